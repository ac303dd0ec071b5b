//! Dual-tower transformer: one stack per modality, asymmetric self-attention
//! over `[references ; noisy]`, role-decoupled weights and gated fusion layers
//! that connect the noisy tokens of the two towers.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, MaskRule, RotaryTable, Var};
use crate::container;
use crate::error::{Error, Result};
use crate::identity_binding::{Position3D, Role, RopeConfig};
use crate::rng::{self, tag};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub fusion_layers: usize,
    pub ffn_mult: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub k_max: usize,
    pub content_dim: usize,
    pub time_features: usize,
    pub rope: RopeConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            blocks: 4,
            fusion_layers: 2,
            ffn_mult: 4,
            video_dim: 48,
            audio_dim: 16,
            k_max: 4,
            content_dim: 2,
            time_features: 32,
            rope: RopeConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Number of condition tags: background/silence, one per slot, and untagged.
    pub fn tag_count(&self) -> usize {
        self.k_max + 2
    }

    pub fn untagged(&self) -> usize {
        self.k_max + 1
    }

    /// Fusion layer `i` runs after block `fusion_after(i)`.
    pub fn fusion_after(&self, i: usize) -> usize {
        ((i + 1) * self.blocks).div_ceil(self.fusion_layers + 1).max(1) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        self.rope.parts(self.head_dim())?;
        if self.blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionGate {
    Active,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Video,
    Audio,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Video => "video",
            Tower::Audio => "audio",
        }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<R: Real> {
    pub tensors: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn get(&self, name: &str) -> &Tensor<R> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<R> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn as_named(&self) -> Vec<(String, &Tensor<R>)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v)).collect()
    }
}

/// Deterministic initialization. Output heads, modulation layers and fusion
/// output projections start at zero.
pub fn init_params<R: Real>(cfg: &ModelConfig) -> Result<ParamSet<R>> {
    cfg.validate()?;
    let d = cfg.width;
    let f = cfg.ffn_mult * d;
    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![];
    let mut add = |name: String, shape: &[usize], init: Init| specs.push((name, shape.to_vec(), init));
    add(
        "ident.table".into(),
        &[cfg.k_max, d],
        Init::Normal(1.0 / (d as f64).sqrt()),
    );
    for tower in [Tower::Video, Tower::Audio] {
        let m = tower.prefix();
        let dm = match tower {
            Tower::Video => cfg.video_dim,
            Tower::Audio => cfg.audio_dim,
        };
        add(format!("{m}.in.ref"), &[d, d], Init::Fan);
        add(format!("{m}.in.noisy"), &[dm, d], Init::Fan);
        add(format!("{m}.in.noisy_b"), &[1, d], Init::Zero);
        add(
            format!("{m}.cond.tag"),
            &[cfg.tag_count(), d],
            Init::Normal(1.0 / (d as f64).sqrt()),
        );
        if tower == Tower::Audio {
            add(format!("{m}.cond.content"), &[cfg.content_dim, d], Init::Fan);
        }
        add(format!("{m}.time.w1"), &[cfg.time_features, d], Init::Fan);
        add(format!("{m}.time.b1"), &[1, d], Init::Zero);
        add(format!("{m}.time.w2"), &[d, d], Init::Fan);
        add(format!("{m}.time.b2"), &[1, d], Init::Zero);
        for b in 0..cfg.blocks {
            for role in ["ref", "noisy"] {
                let p = format!("{m}.blk{b}.{role}");
                for w in ["q", "k", "v", "o"] {
                    add(format!("{p}.{w}"), &[d, d], Init::Fan);
                }
                add(format!("{p}.ff1"), &[d, f], Init::Fan);
                add(format!("{p}.ff1_b"), &[1, f], Init::Zero);
                add(format!("{p}.ff2"), &[f, d], Init::Fan);
                add(format!("{p}.ff2_b"), &[1, d], Init::Zero);
            }
            add(format!("{m}.blk{b}.noisy.mod"), &[d, 6 * d], Init::Zero);
            add(format!("{m}.blk{b}.noisy.mod_b"), &[1, 6 * d], Init::Zero);
        }
        add(format!("{m}.out.mod"), &[d, 2 * d], Init::Zero);
        add(format!("{m}.out.mod_b"), &[1, 2 * d], Init::Zero);
        add(format!("{m}.out.w"), &[d, dm], Init::Zero);
        add(format!("{m}.out.b"), &[1, dm], Init::Zero);
    }
    for i in 0..cfg.fusion_layers {
        for dir in ["v_from_a", "a_from_v"] {
            let p = format!("fusion{i}.{dir}");
            for w in ["q", "k", "v"] {
                add(format!("{p}.{w}"), &[d, d], Init::Fan);
            }
            add(format!("{p}.o"), &[d, d], Init::Zero);
        }
    }
    let mut tensors = BTreeMap::new();
    for (i, (name, shape, init)) in specs.into_iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[tag::INIT, i as u64]);
        let std = match init {
            Init::Zero => 0.0,
            Init::Normal(s) => s,
            Init::Fan => 1.0 / (shape[0] as f64).sqrt(),
        };
        let t = Tensor::from_fn(&shape, |_| {
            if std == 0.0 {
                R::zero()
            } else {
                R::lit(std * rng::normal(&mut r))
            }
        });
        tensors.insert(name, t);
    }
    Ok(ParamSet { tensors })
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    Fan,
    Normal(f64),
}

/// Everything one tower consumes for a single example.
#[derive(Debug, Clone)]
pub struct TowerInput<R: Real> {
    /// `[n_z, D_m]` noisy latent tokens.
    pub noisy: Tensor<R>,
    /// `[n_r, D]` reference tokens at model width, before identity injection.
    pub refs: Tensor<R>,
    pub ref_slots: Vec<usize>,
    /// `n_r + n_z` positions, references first.
    pub positions: Vec<Position3D>,
    /// `[n_z, K_max + 2]` tag weights (usually one-hot).
    pub tags: Tensor<R>,
    /// `[n_z, content_dim]`, audio only.
    pub content: Option<Tensor<R>>,
}

impl<R: Real> TowerInput<R> {
    pub fn n_refs(&self) -> usize {
        self.ref_slots.len()
    }

    pub fn n_noisy(&self) -> usize {
        self.noisy.rows()
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::Reference; self.n_refs()];
        r.extend(std::iter::repeat_n(Role::Noisy, self.n_noisy()));
        r
    }

    fn check(&self, cfg: &ModelConfig, dm: usize, tower: Tower) -> Result<()> {
        let n_z = self.n_noisy();
        if n_z == 0 {
            return Err(Error::NothingToDenoise);
        }
        if self.noisy.cols() != dm {
            return Err(Error::DimensionMismatch(format!(
                "{} noisy width {} vs {dm}",
                tower.prefix(),
                self.noisy.cols()
            )));
        }
        if self.n_refs() > 0 && (self.refs.rows() != self.n_refs() || self.refs.cols() != cfg.width) {
            return Err(Error::Shape(format!(
                "{} refs {:?} for {} slots at width {}",
                tower.prefix(),
                self.refs.shape(),
                self.n_refs(),
                cfg.width
            )));
        }
        if self.positions.len() != self.n_refs() + n_z {
            return Err(Error::Shape(format!(
                "{} positions for {} tokens",
                self.positions.len(),
                self.n_refs() + n_z
            )));
        }
        if self.tags.rows() != n_z || self.tags.cols() != cfg.tag_count() {
            return Err(Error::Shape(format!(
                "tag matrix {:?}, expected [{n_z}, {}]",
                self.tags.shape(),
                cfg.tag_count()
            )));
        }
        if let Some(c) = &self.content {
            if c.rows() != n_z || c.cols() != cfg.content_dim {
                return Err(Error::Shape(format!("content matrix {:?}", c.shape())));
            }
        }
        for &s in &self.ref_slots {
            if s == 0 || s > cfg.k_max {
                return Err(Error::SlotOutOfRange {
                    slot: s,
                    max: cfg.k_max,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub fusion: FusionGate,
    pub identity_embeddings: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            fusion: FusionGate::Active,
            identity_embeddings: true,
        }
    }
}

/// A recorded forward pass, ready for a loss and [`Graph::backward`].
pub struct ForwardGraph<R> {
    pub graph: Graph<R>,
    pub params: BTreeMap<String, Var>,
    pub video: Option<Var>,
    pub audio: Option<Var>,
    /// Final reference-token states per tower.
    pub video_refs: Option<Var>,
    pub audio_refs: Option<Var>,
}

struct Builder<'a, R: Real> {
    g: Graph<R>,
    params: &'a ParamSet<R>,
    vars: BTreeMap<String, Var>,
}

impl<'a, R: Real> Builder<'a, R> {
    fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = self.g.param(self.params.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Var {
        let w = self.p(w);
        let y = self.g.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.p(b);
                self.g.add_row(y, b)
            }
            None => y,
        }
    }

    /// `LN(x)·(1 + scale) + shift` with `[1, D]` modulation rows.
    fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let n = self.g.layer_norm(x, R::lit(1e-6));
        let s1 = self.g.add_scalar(scale, R::one());
        let y = self.g.mul_row(n, s1);
        self.g.add_row(y, shift)
    }

    fn ffn(&mut self, x: Var, p: &str) -> Var {
        let h = self.linear(x, &format!("{p}.ff1"), Some(&format!("{p}.ff1_b")));
        let h = self.g.gelu(h);
        self.linear(h, &format!("{p}.ff2"), Some(&format!("{p}.ff2_b")))
    }
}

fn time_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = vec![0.0; n];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

/// Role-decoupled attention over `[refs ; noisy]`. Reference rows are projected
/// with `wr`, noisy rows with `wz`; reference queries never read noisy keys.
#[allow(clippy::too_many_arguments)]
fn decoupled_attention<R: Real>(
    g: &mut Graph<R>,
    xr: Option<Var>,
    xz: Var,
    wr: [Var; 4],
    wz: [Var; 4],
    heads: usize,
    rope: Option<Arc<RotaryTable<R>>>,
    mask: &MaskRule,
) -> (Option<Var>, Var) {
    let proj = |g: &mut Graph<R>, i: usize| {
        let z = g.matmul(xz, wz[i]);
        match xr {
            Some(xr) => {
                let r = g.matmul(xr, wr[i]);
                g.concat_rows(&[r, z])
            }
            None => z,
        }
    };
    let mut q = proj(g, 0);
    let mut k = proj(g, 1);
    let v = proj(g, 2);
    if let Some(table) = rope {
        q = g.rotary(q, table.clone());
        k = g.rotary(k, table);
    }
    let a = g.attention(q, k, v, heads, mask);
    match xr {
        Some(xr) => {
            let n_r = g.value(xr).rows();
            let n_z = g.value(xz).rows();
            let ar = g.slice_rows(a, 0, n_r);
            let az = g.slice_rows(a, n_r, n_z);
            let or = g.matmul(ar, wr[3]);
            let oz = g.matmul(az, wz[3]);
            (Some(or), oz)
        }
        None => (None, g.matmul(a, wz[3])),
    }
}

fn mask_for(n_r: usize, n_z: usize) -> MaskRule {
    if n_r == 0 {
        return MaskRule::None;
    }
    let flags: Arc<[bool]> = (0..n_r + n_z).map(|i| i < n_r).collect();
    MaskRule::RefBlocksNoisy {
        query_is_ref: flags.clone(),
        key_is_ref: flags,
    }
}

struct TowerState<R> {
    refs: Option<Var>,
    noisy: Var,
    /// `[1, D]` activated timestep embedding.
    time: Var,
    rope: Arc<RotaryTable<R>>,
    mask: MaskRule,
}

fn tower_embed<R: Real>(
    b: &mut Builder<'_, R>,
    cfg: &ModelConfig,
    tower: Tower,
    input: &TowerInput<R>,
    t: f64,
    opts: &ForwardOptions,
) -> Result<TowerState<R>> {
    let m = tower.prefix();
    let refs = if input.n_refs() > 0 {
        let mut x = b.g.constant(input.refs.clone());
        if opts.identity_embeddings {
            let mut sel = Tensor::zeros(&[input.n_refs(), cfg.k_max]);
            for (i, &s) in input.ref_slots.iter().enumerate() {
                sel.row_mut(i)[s - 1] = R::one();
            }
            let sel = b.g.constant(sel);
            let table = b.p("ident.table");
            let e = b.g.matmul(sel, table);
            x = b.g.add(x, e);
        }
        Some(b.linear(x, &format!("{m}.in.ref"), None))
    } else {
        None
    };
    let z = b.g.constant(input.noisy.clone());
    let mut z = b.linear(z, &format!("{m}.in.noisy"), Some(&format!("{m}.in.noisy_b")));
    let tags = b.g.constant(input.tags.clone());
    let te = b.p(&format!("{m}.cond.tag"));
    let te = b.g.matmul(tags, te);
    z = b.g.add(z, te);
    if let Some(c) = &input.content {
        let c = b.g.constant(c.clone());
        let ce = b.p(&format!("{m}.cond.content"));
        let ce = b.g.matmul(c, ce);
        z = b.g.add(z, ce);
    }
    let tf: Vec<R> = time_features(t, cfg.time_features).into_iter().map(R::lit).collect();
    let tf = b.g.constant(Tensor::from_vec(&[1, cfg.time_features], tf)?);
    let h = b.linear(tf, &format!("{m}.time.w1"), Some(&format!("{m}.time.b1")));
    let h = b.g.silu(h);
    let h = b.linear(h, &format!("{m}.time.w2"), Some(&format!("{m}.time.b2")));
    let time = b.g.silu(h);
    let table = cfg.rope.table::<R>(&input.positions, cfg.head_dim(), cfg.heads)?;
    Ok(TowerState {
        refs,
        noisy: z,
        time,
        rope: table,
        mask: mask_for(input.n_refs(), input.n_noisy()),
    })
}

fn tower_block<R: Real>(b: &mut Builder<'_, R>, cfg: &ModelConfig, tower: Tower, blk: usize, st: &mut TowerState<R>) {
    let d = cfg.width;
    let p = format!("{}.blk{blk}", tower.prefix());
    let modv = b.linear(st.time, &format!("{p}.noisy.mod"), Some(&format!("{p}.noisy.mod_b")));
    let chunk: Vec<Var> = (0..6).map(|i| b.g.slice_cols(modv, i * d, d)).collect();
    let xr = st.refs.map(|r| b.g.layer_norm(r, R::lit(1e-6)));
    let xz = b.modulate(st.noisy, chunk[0], chunk[1]);
    let wz = ["q", "k", "v", "o"].map(|w| b.p(&format!("{p}.noisy.{w}")));
    let wr = if st.refs.is_some() {
        ["q", "k", "v", "o"].map(|w| b.p(&format!("{p}.ref.{w}")))
    } else {
        wz
    };
    let rope = st.rope.clone();
    let (ar, az) = decoupled_attention(&mut b.g, xr, xz, wr, wz, cfg.heads, Some(rope), &st.mask);
    if let (Some(r), Some(ar)) = (st.refs, ar) {
        let r = b.g.add(r, ar);
        let h = b.g.layer_norm(r, R::lit(1e-6));
        let h = b.ffn(h, &format!("{p}.ref"));
        st.refs = Some(b.g.add(r, h));
    }
    let az = b.g.mul_row(az, chunk[2]);
    let z = b.g.add(st.noisy, az);
    let h = b.modulate(z, chunk[3], chunk[4]);
    let h = b.ffn(h, &format!("{p}.noisy"));
    let h = b.g.mul_row(h, chunk[5]);
    st.noisy = b.g.add(z, h);
}

fn tower_head<R: Real>(b: &mut Builder<'_, R>, cfg: &ModelConfig, tower: Tower, st: &TowerState<R>) -> Var {
    let m = tower.prefix();
    let d = cfg.width;
    let modv = b.linear(st.time, &format!("{m}.out.mod"), Some(&format!("{m}.out.mod_b")));
    let shift = b.g.slice_cols(modv, 0, d);
    let scale = b.g.slice_cols(modv, d, d);
    let h = b.modulate(st.noisy, shift, scale);
    b.linear(h, &format!("{m}.out.w"), Some(&format!("{m}.out.b")))
}

/// Bidirectional noisy↔noisy cross-attention with temporal rotary positions.
fn fusion<R: Real>(
    b: &mut Builder<'_, R>,
    cfg: &ModelConfig,
    i: usize,
    v: &mut TowerState<R>,
    a: &mut TowerState<R>,
    times: (&Arc<RotaryTable<R>>, &Arc<RotaryTable<R>>),
) {
    let nv = b.g.layer_norm(v.noisy, R::lit(1e-6));
    let na = b.g.layer_norm(a.noisy, R::lit(1e-6));
    let cross =
        |b: &mut Builder<'_, R>, dir: &str, xq: Var, xkv: Var, tq: &Arc<RotaryTable<R>>, tk: &Arc<RotaryTable<R>>| {
            let p = format!("fusion{i}.{dir}");
            let q = b.linear(xq, &format!("{p}.q"), None);
            let k = b.linear(xkv, &format!("{p}.k"), None);
            let val = b.linear(xkv, &format!("{p}.v"), None);
            let q = b.g.rotary(q, tq.clone());
            let k = b.g.rotary(k, tk.clone());
            let o = b.g.attention(q, k, val, cfg.heads, &MaskRule::None);
            b.linear(o, &format!("{p}.o"), None)
        };
    let dv = cross(b, "v_from_a", nv, na, times.0, times.1);
    let da = cross(b, "a_from_v", na, nv, times.1, times.0);
    v.noisy = b.g.add(v.noisy, dv);
    a.noisy = b.g.add(a.noisy, da);
}

fn temporal_table<R: Real>(cfg: &ModelConfig, input: &TowerInput<R>) -> Result<Arc<RotaryTable<R>>> {
    let pos: Vec<Position3D> = input.positions[input.n_refs()..]
        .iter()
        .map(|p| Position3D::new(p.t, 0, 0))
        .collect();
    cfg.rope.table::<R>(&pos, cfg.head_dim(), cfg.heads)
}

/// Records a forward pass of both towers. Either tower may be absent; fusion
/// only runs when both are present and the gate is active.
pub fn build_forward<R: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<R>,
    video: Option<&TowerInput<R>>,
    audio: Option<&TowerInput<R>>,
    t: f64,
    opts: &ForwardOptions,
) -> Result<ForwardGraph<R>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimestepOutOfRange(t));
    }
    if video.is_none() && audio.is_none() {
        return Err(Error::NothingToDenoise);
    }
    if let Some(v) = video {
        v.check(cfg, cfg.video_dim, Tower::Video)?;
    }
    if let Some(a) = audio {
        a.check(cfg, cfg.audio_dim, Tower::Audio)?;
    }
    let mut b = Builder {
        g: Graph::new(),
        params,
        vars: BTreeMap::new(),
    };
    let mut vs = video
        .map(|x| tower_embed(&mut b, cfg, Tower::Video, x, t, opts))
        .transpose()?;
    let mut as_ = audio
        .map(|x| tower_embed(&mut b, cfg, Tower::Audio, x, t, opts))
        .transpose()?;
    let fuse = opts.fusion == FusionGate::Active && vs.is_some() && as_.is_some();
    let times = if fuse {
        Some((
            temporal_table(cfg, video.unwrap())?,
            temporal_table(cfg, audio.unwrap())?,
        ))
    } else {
        None
    };
    let mut next_fusion = 0;
    for blk in 0..cfg.blocks {
        if let Some(st) = vs.as_mut() {
            tower_block(&mut b, cfg, Tower::Video, blk, st);
        }
        if let Some(st) = as_.as_mut() {
            tower_block(&mut b, cfg, Tower::Audio, blk, st);
        }
        while next_fusion < cfg.fusion_layers && cfg.fusion_after(next_fusion) == blk {
            if let (Some(times), Some(v), Some(a)) = (&times, vs.as_mut(), as_.as_mut()) {
                fusion(&mut b, cfg, next_fusion, v, a, (&times.0, &times.1));
            }
            next_fusion += 1;
        }
    }
    let vo = vs.as_ref().map(|st| tower_head(&mut b, cfg, Tower::Video, st));
    let ao = as_.as_ref().map(|st| tower_head(&mut b, cfg, Tower::Audio, st));
    Ok(ForwardGraph {
        graph: b.g,
        params: b.vars,
        video: vo,
        audio: ao,
        video_refs: vs.and_then(|s| s.refs),
        audio_refs: as_.and_then(|s| s.refs),
    })
}

/// Velocity predictions at the noisy positions: `([n_z^v, D_v], [n_z^a, D_a])`.
pub fn forward_towers<R: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<R>,
    video: Option<&TowerInput<R>>,
    audio: Option<&TowerInput<R>>,
    t: f64,
    opts: &ForwardOptions,
) -> Result<(Option<Tensor<R>>, Option<Tensor<R>>)> {
    let fg = build_forward(cfg, params, video, audio, t, opts)?;
    Ok((
        fg.video.map(|v| fg.graph.value(v).clone()),
        fg.audio.map(|v| fg.graph.value(v).clone()),
    ))
}

/// Dense additive mask: `−∞` where a reference query meets a noisy key.
pub fn materialize_mask(roles: &[Role]) -> Tensor<f64> {
    let l = roles.len();
    Tensor::from_fn(&[l, l], |idx| {
        let (i, j) = (idx / l, idx % l);
        if roles[i].is_ref() && !roles[j].is_ref() {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Q/K/V/O maps for one role, each `[D, D]`, applied as `x · W`.
#[derive(Debug, Clone)]
pub struct RoleWeights {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub o: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoupledProjection {
    pub reference: RoleWeights,
    pub noisy: RoleWeights,
}

/// Single-layer asymmetric attention without positions, for inspection and tests.
pub fn asymmetric_attention(
    tokens: &Tensor<f64>,
    roles: &[Role],
    proj: &DecoupledProjection,
    heads: usize,
) -> Result<Tensor<f64>> {
    if roles.len() != tokens.rows() {
        return Err(Error::Shape(format!(
            "{} roles for {} tokens",
            roles.len(),
            tokens.rows()
        )));
    }
    let n_r = roles.iter().take_while(|r| r.is_ref()).count();
    if roles[n_r..].iter().any(|r| r.is_ref()) {
        return Err(Error::Shape("references must precede noisy tokens".into()));
    }
    let n_z = roles.len() - n_r;
    if n_z == 0 {
        return Err(Error::NothingToDenoise);
    }
    let mut g = Graph::<f64>::new();
    let xr = (n_r > 0).then(|| g.constant(tokens.slice_rows(0, n_r)));
    let xz = g.constant(tokens.slice_rows(n_r, n_z));
    let w = |g: &mut Graph<f64>, r: &RoleWeights| [&r.q, &r.k, &r.v, &r.o].map(|t| g.constant(t.clone()));
    let wr = w(&mut g, &proj.reference);
    let wz = w(&mut g, &proj.noisy);
    let (ar, az) = decoupled_attention(&mut g, xr, xz, wr, wz, heads, None, &mask_for(n_r, n_z));
    let mut parts = vec![];
    if let Some(ar) = ar {
        parts.push(g.value(ar).clone());
    }
    parts.push(g.value(az).clone());
    Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters (and any extra named tensors such as optimizer moments).
pub fn save_checkpoint<R: Real>(
    path: &std::path::Path,
    meta: &CheckpointMeta,
    params: &ParamSet<R>,
    extra: &[(String, &Tensor<R>)],
) -> Result<()> {
    let mut named: Vec<(String, &Tensor<R>)> = params
        .as_named()
        .into_iter()
        .map(|(k, v)| (format!("param/{k}"), v))
        .collect();
    named.extend(extra.iter().map(|(k, v)| (k.clone(), *v)));
    let mut buf = Vec::new();
    container::write_checkpoint(&mut buf, &serde_json::to_value(meta)?, &named)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub struct LoadedCheckpoint<R: Real> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<R>,
    pub extra: BTreeMap<String, Tensor<R>>,
}

pub fn load_checkpoint<R: Real>(path: &std::path::Path) -> Result<LoadedCheckpoint<R>> {
    let bytes = std::fs::read(path)?;
    let (meta, tensors) = container::read_checkpoint::<R>(&mut bytes.as_slice())?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let mut params = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (name, t) in tensors {
        match name.strip_prefix("param/") {
            Some(p) => {
                params.insert(p.to_string(), t);
            }
            None => {
                extra.insert(name, t);
            }
        }
    }
    Ok(LoadedCheckpoint {
        meta,
        params: ParamSet { tensors: params },
        extra,
    })
}

/// Field-by-field difference between two model configurations.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (ja, jb) = (
        serde_json::to_value(a).expect("serializes"),
        serde_json::to_value(b).expect("serializes"),
    );
    let (Some(oa), Some(ob)) = (ja.as_object(), jb.as_object()) else {
        return vec![];
    };
    oa.iter()
        .filter_map(|(k, va)| {
            let vb = ob.get(k);
            (vb != Some(va)).then(|| format!("{k}: {va} != {}", vb.map(|v| v.to_string()).unwrap_or_default()))
        })
        .collect()
}

/// Random inputs for both towers: `slots` identities with `refs_per_slot`
/// tokens each, `n_video`/`n_audio` noisy tokens.
pub fn toy_inputs<R: Real>(
    cfg: &ModelConfig,
    slots: usize,
    refs_per_slot: usize,
    n_video: usize,
    n_audio: usize,
    seed: u64,
) -> (TowerInput<R>, TowerInput<R>) {
    let mut r = rng::stream(seed, &[tag::SAMPLE, 99]);
    let mut make = |dm: usize, n_z: usize, content: bool| {
        let n_r = slots * refs_per_slot;
        let ref_slots: Vec<usize> = (0..n_r).map(|i| 1 + i / refs_per_slot).collect();
        let mut positions: Vec<Position3D> = ref_slots
            .iter()
            .enumerate()
            .map(|(i, &s)| Position3D::new(8 + s - 1, (i % refs_per_slot) / 2, i % 2))
            .collect();
        positions.extend((0..n_z).map(|i| Position3D::new(i / 4, (i % 4) / 2, i % 2)));
        let tc = cfg.tag_count();
        TowerInput {
            noisy: Tensor::from_fn(&[n_z, dm], |_| R::lit(rng::normal(&mut r))),
            refs: Tensor::from_fn(&[n_r, cfg.width], |_| R::lit(rng::normal(&mut r))),
            ref_slots,
            positions,
            tags: Tensor::from_fn(&[n_z, tc], |i| {
                let (row, col) = (i / tc, i % tc);
                if col == row % (slots + 1) {
                    R::one()
                } else {
                    R::zero()
                }
            }),
            content: content.then(|| Tensor::from_fn(&[n_z, cfg.content_dim], |_| R::lit(rng::normal(&mut r)))),
        }
    };
    let v = make(cfg.video_dim, n_video, false);
    let a = make(cfg.audio_dim, n_audio, true);
    (v, a)
}

/// Replaces every parameter with seeded Gaussian noise, so zero-initialized
/// paths carry signal.
pub fn randomize_params<R: Real>(params: &mut ParamSet<R>, scale: f64, seed: u64) {
    for (i, t) in params.tensors.values_mut().enumerate() {
        let mut r = rng::stream(seed, &[tag::INIT, 1_000 + i as u64]);
        let fan = (t.shape()[0] as f64).sqrt();
        for x in t.data_mut() {
            *x = R::lit(scale * rng::normal(&mut r) / fan);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_relative: f64,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

fn joint_mse(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    v: &TowerInput<f64>,
    a: &TowerInput<f64>,
    targets: (&Tensor<f64>, &Tensor<f64>),
    t: f64,
) -> Result<(ForwardGraph<f64>, Var)> {
    let mut fg = build_forward(cfg, params, Some(v), Some(a), t, &ForwardOptions::default())?;
    let lv = fg.graph.mse(fg.video.expect("video"), targets.0);
    let la = fg.graph.mse(fg.audio.expect("audio"), targets.1);
    let total = fg.graph.add(lv, la);
    Ok((fg, total))
}

/// Compares analytic parameter gradients of the joint loss with central
/// differences on `samples` randomly chosen scalars, in f64.
pub fn gradient_check(cfg: &ModelConfig, samples: usize, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut params = init_params::<f64>(cfg)?;
    randomize_params(&mut params, 0.7, seed);
    let (v, a) = toy_inputs::<f64>(cfg, 2, 2, 8, 6, seed);
    let mut r = rng::stream(seed, &[tag::EVAL, 7]);
    let tv = Tensor::from_fn(&[8, cfg.video_dim], |_| rng::normal(&mut r));
    let ta = Tensor::from_fn(&[6, cfg.audio_dim], |_| rng::normal(&mut r));
    let t = 0.37;
    let (fg, root) = joint_mse(cfg, &params, &v, &a, (&tv, &ta), t)?;
    let grads = fg.graph.backward(root);
    let names: Vec<String> = params.names().cloned().collect();
    let total: usize = names.iter().map(|n| params.get(n).len()).sum();
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        worst_relative: 0.0,
    };
    use rand::Rng as _;
    for _ in 0..samples {
        let mut flat = r.random_range(0..total);
        let mut pick = None;
        for n in &names {
            let len = params.get(n).len();
            if flat < len {
                pick = Some((n.clone(), flat));
                break;
            }
            flat -= len;
        }
        let (name, idx) = pick.expect("index within parameter count");
        let analytic = fg
            .params
            .get(&name)
            .and_then(|&var| grads.get(var))
            .map(|g| g.data()[idx])
            .unwrap_or(0.0);
        let orig = params.get(&name).data()[idx];
        let mut eval = |x: f64| -> Result<f64> {
            params.get_mut(&name).data_mut()[idx] = x;
            let (g, root) = joint_mse(cfg, &params, &v, &a, (&tv, &ta), t)?;
            Ok(g.graph.value(root).data()[0])
        };
        let numeric = (eval(orig + eps)? - eval(orig - eps)?) / (2.0 * eps);
        params.get_mut(&name).data_mut()[idx] = orig;
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-9 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        report.checked += 1;
        if rel <= tol {
            report.passed += 1;
        }
        report.worst_relative = report.worst_relative.max(rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            width: 16,
            heads: 2,
            blocks: 2,
            fusion_layers: 1,
            ffn_mult: 2,
            video_dim: 8,
            audio_dim: 6,
            time_features: 8,
            ..Default::default()
        }
    }

    fn random_model(seed: u64) -> (ModelConfig, ParamSet<f64>) {
        let cfg = small_cfg();
        let mut p = init_params::<f64>(&cfg).unwrap();
        randomize_params(&mut p, 0.8, seed);
        (cfg, p)
    }

    /// Dense reference implementation: per-head softmax with an explicit mask matrix.
    fn naive_attention(x: &Tensor<f64>, roles: &[Role], proj: &DecoupledProjection, heads: usize) -> Tensor<f64> {
        let l = x.rows();
        let d = x.cols();
        let dh = d / heads;
        let pick = |i: usize| {
            if roles[i].is_ref() {
                &proj.reference
            } else {
                &proj.noisy
            }
        };
        let lin = |i: usize, w: &Tensor<f64>| -> Vec<f64> {
            (0..d)
                .map(|c| (0..d).map(|k| x.row(i)[k] * w.row(k)[c]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = (0..l).map(|i| lin(i, &pick(i).q)).collect();
        let k: Vec<Vec<f64>> = (0..l).map(|i| lin(i, &pick(i).k)).collect();
        let v: Vec<Vec<f64>> = (0..l).map(|i| lin(i, &pick(i).v)).collect();
        let m = materialize_mask(roles);
        let mut mixed = vec![vec![0.0; d]; l];
        for h in 0..heads {
            for i in 0..l {
                let logits: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum();
                        dot / (dh as f64).sqrt() + m.row(i)[j]
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..l {
                    for c in h * dh..(h + 1) * dh {
                        mixed[i][c] += e[j] / s * v[j][c];
                    }
                }
            }
        }
        Tensor::from_fn(&[l, d], |idx| {
            let (i, c) = (idx / d, idx % d);
            let o = &pick(i).o;
            (0..d).map(|k| mixed[i][k] * o.row(k)[c]).sum()
        })
    }

    fn role_weights(r: &mut rng::Rng, d: usize) -> RoleWeights {
        let mut m = || Tensor::from_fn(&[d, d], |_| rng::normal(r) / (d as f64).sqrt());
        RoleWeights {
            q: m(),
            k: m(),
            v: m(),
            o: m(),
        }
    }

    #[test]
    fn mask_examples() {
        let m = materialize_mask(&[Role::Reference, Role::Noisy]);
        assert_eq!(m.data(), &[0.0, f64::NEG_INFINITY, 0.0, 0.0]);
        assert!(materialize_mask(&[Role::Noisy; 3]).data().iter().all(|&x| x == 0.0));
        assert!(materialize_mask(&[Role::Reference; 3]).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_token_hand_softmax() {
        let s = |x: f64| Tensor::from_vec(&[1, 1], vec![x]).unwrap();
        let proj = DecoupledProjection {
            reference: RoleWeights {
                q: s(0.5),
                k: s(1.5),
                v: s(2.0),
                o: s(1.0),
            },
            noisy: RoleWeights {
                q: s(1.0),
                k: s(-0.5),
                v: s(1.0),
                o: s(3.0),
            },
        };
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let roles = [Role::Reference, Role::Noisy, Role::Noisy];
        let out = asymmetric_attention(&x, &roles, &proj, 1).unwrap();
        // keys: r → 1.5, z1 → −1, z2 → 0.5; values: 2, 2, −1
        let (k, v): ([f64; 3], [f64; 3]) = ([1.5, -1.0, 0.5], [2.0, 2.0, -1.0]);
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
        for (row, q) in [(1usize, 2.0f64), (2, -1.0)] {
            let e: Vec<f64> = k.iter().map(|kj| (q * kj).exp()).collect();
            let z: f64 = e.iter().sum();
            let mix: f64 = e.iter().zip(v).map(|(a, b)| a / z * b).sum();
            assert!((out.data()[row] - 3.0 * mix).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_reference_set_is_plain_attention() {
        let mut r = rng::stream(3, &[1]);
        let proj = DecoupledProjection {
            reference: role_weights(&mut r, 8),
            noisy: role_weights(&mut r, 8),
        };
        let x = Tensor::from_fn(&[5, 8], |_| rng::normal(&mut r));
        let roles = [Role::Noisy; 5];
        let out = asymmetric_attention(&x, &roles, &proj, 2).unwrap();
        assert!(out.max_abs_diff(&naive_attention(&x, &roles, &proj, 2)) < 1e-12);
        assert!(matches!(
            asymmetric_attention(&x, &[Role::Reference; 5], &proj, 2),
            Err(Error::NothingToDenoise)
        ));
    }

    #[test]
    fn zero_output_head_gives_zero_velocity() {
        let cfg = small_cfg();
        let p = init_params::<f64>(&cfg).unwrap();
        let (v, a) = toy_inputs::<f64>(&cfg, 2, 3, 8, 5, 1);
        for t in [0.0, 0.4, 1.0] {
            let (uv, ua) = forward_towers(&cfg, &p, Some(&v), Some(&a), t, &ForwardOptions::default()).unwrap();
            assert!(uv.unwrap().data().iter().all(|&x| x == 0.0));
            assert!(ua.unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_table_starts_nonzero() {
        let p = init_params::<f64>(&small_cfg()).unwrap();
        assert!(p.get("ident.table").sq_norm() > 0.0);
    }

    #[test]
    fn reference_states_ignore_noisy_tokens_at_depth() {
        let cfg = ModelConfig {
            blocks: 3,
            ..small_cfg()
        };
        let mut p = init_params::<f64>(&cfg).unwrap();
        randomize_params(&mut p, 0.8, 4);
        let (v, a) = toy_inputs::<f64>(&cfg, 2, 2, 8, 6, 2);
        let run = |v: &TowerInput<f64>, a: &TowerInput<f64>, t: f64| {
            let fg = build_forward(&cfg, &p, Some(v), Some(a), t, &ForwardOptions::default()).unwrap();
            (
                fg.graph.value(fg.video_refs.unwrap()).clone(),
                fg.graph.value(fg.audio_refs.unwrap()).clone(),
                fg.graph.value(fg.video.unwrap()).clone(),
            )
        };
        let base = run(&v, &a, 0.3);
        let mut v2 = v.clone();
        let mut a2 = a.clone();
        v2.noisy = v2.noisy.map(|x| x * -3.0 + 1.0);
        a2.noisy = a2.noisy.map(|x| x + 5.0);
        let pert = run(&v2, &a2, 0.9);
        assert!(base.0.max_abs_diff(&pert.0) <= 1e-6);
        assert!(base.1.max_abs_diff(&pert.1) <= 1e-6);
        // the noisy outputs do change
        assert!(base.2.max_abs_diff(&pert.2) > 1e-3);
    }

    #[test]
    fn masked_fusion_isolates_towers() {
        let (cfg, p) = random_model(5);
        let (v, a) = toy_inputs::<f64>(&cfg, 2, 2, 8, 6, 3);
        let (_, mut a2) = toy_inputs::<f64>(&cfg, 2, 2, 8, 6, 77);
        a2.positions = a.positions.clone();
        let masked = ForwardOptions {
            fusion: FusionGate::Masked,
            ..Default::default()
        };
        let (uv1, ua1) = forward_towers(&cfg, &p, Some(&v), Some(&a), 0.5, &masked).unwrap();
        let (uv2, _) = forward_towers(&cfg, &p, Some(&v), Some(&a2), 0.5, &masked).unwrap();
        let (uv3, _) = forward_towers(&cfg, &p, Some(&v), None, 0.5, &masked).unwrap();
        assert_eq!(uv1, uv2);
        assert_eq!(uv1, uv3);
        let (_, ua4) = forward_towers(&cfg, &p, None, Some(&a), 0.5, &masked).unwrap();
        assert_eq!(ua1, ua4);
        // active fusion couples them
        let (uv5, _) = forward_towers(&cfg, &p, Some(&v), Some(&a2), 0.5, &ForwardOptions::default()).unwrap();
        let (uv6, _) = forward_towers(&cfg, &p, Some(&v), Some(&a), 0.5, &ForwardOptions::default()).unwrap();
        assert!(uv5.unwrap().max_abs_diff(&uv6.unwrap()) > 1e-6);
    }

    #[test]
    fn fresh_fusion_layers_are_identity() {
        let cfg = small_cfg();
        let mut p = init_params::<f64>(&cfg).unwrap();
        let fresh: Vec<(String, Tensor<f64>)> = p
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with("fusion"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        randomize_params(&mut p, 0.8, 6);
        for (k, v) in fresh {
            p.tensors.insert(k, v);
        }
        let (v, a) = toy_inputs::<f64>(&cfg, 1, 2, 8, 6, 4);
        let on = forward_towers(&cfg, &p, Some(&v), Some(&a), 0.2, &ForwardOptions::default()).unwrap();
        let off = forward_towers(
            &cfg,
            &p,
            Some(&v),
            Some(&a),
            0.2,
            &ForwardOptions {
                fusion: FusionGate::Masked,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn slot_listing_order_does_not_matter() {
        let (cfg, p) = random_model(8);
        let (v, a) = toy_inputs::<f64>(&cfg, 2, 3, 8, 6, 5);
        let reorder = |x: &TowerInput<f64>| {
            let n_r = x.n_refs();
            let order: Vec<usize> = (n_r / 2..n_r).chain(0..n_r / 2).collect();
            let mut y = x.clone();
            y.refs = Tensor::concat_rows(
                &order
                    .iter()
                    .map(|&i| x.refs.slice_rows(i, 1))
                    .collect::<Vec<_>>()
                    .iter()
                    .collect::<Vec<_>>(),
            );
            y.ref_slots = order.iter().map(|&i| x.ref_slots[i]).collect();
            let mut pos: Vec<Position3D> = order.iter().map(|&i| x.positions[i]).collect();
            pos.extend_from_slice(&x.positions[n_r..]);
            y.positions = pos;
            y
        };
        let o = ForwardOptions::default();
        let (uv, ua) = forward_towers(&cfg, &p, Some(&v), Some(&a), 0.6, &o).unwrap();
        let (uv2, ua2) = forward_towers(&cfg, &p, Some(&reorder(&v)), Some(&reorder(&a)), 0.6, &o).unwrap();
        assert!(uv.unwrap().max_abs_diff(&uv2.unwrap()) < 1e-10);
        assert!(ua.unwrap().max_abs_diff(&ua2.unwrap()) < 1e-10);
    }

    #[test]
    fn role_weights_are_disjoint() {
        let (cfg, p) = random_model(9);
        let (mut v, _) = toy_inputs::<f64>(&cfg, 1, 2, 8, 6, 6);
        let (_, a) = toy_inputs::<f64>(&cfg, 1, 2, 8, 6, 6);
        let mut fg = build_forward(&cfg, &p, Some(&v), Some(&a), 0.5, &ForwardOptions::default()).unwrap();
        let target = Tensor::zeros(&[8, cfg.video_dim]);
        let loss = fg.graph.mse(fg.video.unwrap(), &target);
        let g = fg.graph.backward(loss);
        assert!(g.get(fg.params["video.blk0.ref.q"]).unwrap().sq_norm() > 0.0);
        // without references the reference weights never enter the graph
        v.refs = Tensor::zeros(&[0, cfg.width]);
        v.ref_slots.clear();
        v.positions.drain(..2);
        let fg = build_forward(&cfg, &p, Some(&v), None, 0.5, &ForwardOptions::default()).unwrap();
        assert!(!fg.params.contains_key("video.blk0.ref.q"));
        assert!(!fg.params.keys().any(|k| k.starts_with("audio.")));
    }

    #[test]
    fn finite_difference_gradients() {
        let rep = gradient_check(&small_cfg(), 120, 1e-4, 1e-3, 11).unwrap();
        assert!(rep.pass_rate() >= 0.99, "{rep:?}");
    }

    #[test]
    fn input_errors() {
        let cfg = small_cfg();
        let p = init_params::<f64>(&cfg).unwrap();
        let (mut v, _) = toy_inputs::<f64>(&cfg, 1, 2, 4, 4, 7);
        let o = ForwardOptions::default();
        let mut bad = v.clone();
        bad.positions.pop();
        assert!(matches!(
            forward_towers(&cfg, &p, Some(&bad), None, 0.5, &o),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward_towers(&cfg, &p, Some(&v), None, 1.5, &o),
            Err(Error::TimestepOutOfRange(_))
        ));
        v.noisy = Tensor::zeros(&[0, cfg.video_dim]);
        v.tags = Tensor::zeros(&[0, cfg.tag_count()]);
        v.positions.truncate(2);
        assert!(matches!(
            forward_towers(&cfg, &p, Some(&v), None, 0.5, &o),
            Err(Error::NothingToDenoise)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = small_cfg();
        let mut p = init_params::<f32>(&cfg).unwrap();
        randomize_params(&mut p, 0.8, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage: "stage2_joint".into(),
            step: 10,
            seed: 3,
            config_hash: cfg.hash(),
            model: cfg.clone(),
            extra: serde_json::Value::Null,
        };
        save_checkpoint(&path, &meta, &p, &[]).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.params, p);
        let (v, a) = toy_inputs::<f32>(&cfg, 2, 2, 8, 6, 1);
        let o = ForwardOptions::default();
        assert_eq!(
            forward_towers(&cfg, &p, Some(&v), Some(&a), 0.3, &o).unwrap(),
            forward_towers(&cfg, &back.params, Some(&v), Some(&a), 0.3, &o).unwrap()
        );
    }

    #[test]
    fn config_hash_and_diff() {
        let a = ModelConfig::default();
        let b = ModelConfig { width: 32, ..a.clone() };
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(config_diff(&a, &b), vec!["width: 64 != 32".to_string()]);
        assert!(ModelConfig {
            width: 24,
            heads: 2,
            ..a
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn asymmetric_attention_matches_dense_oracle(n_r in 0usize..4, n_z in 1usize..5, seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[2]);
            let proj = DecoupledProjection { reference: role_weights(&mut r, 8), noisy: role_weights(&mut r, 8) };
            let x = Tensor::from_fn(&[n_r + n_z, 8], |_| rng::normal(&mut r));
            let mut roles = vec![Role::Reference; n_r];
            roles.extend(vec![Role::Noisy; n_z]);
            let out = asymmetric_attention(&x, &roles, &proj, 2).unwrap();
            prop_assert!(out.max_abs_diff(&naive_attention(&x, &roles, &proj, 2)) < 1e-10);
            // perturbing a noisy token leaves reference rows untouched
            let mut y = x.clone();
            for c in 0..8 { y.row_mut(n_r + n_z - 1)[c] += 2.5; }
            let out2 = asymmetric_attention(&y, &roles, &proj, 2).unwrap();
            for i in 0..n_r {
                for c in 0..8 {
                    prop_assert!((out.row(i)[c] - out2.row(i)[c]).abs() <= 1e-6);
                }
            }
        }
    }
}
