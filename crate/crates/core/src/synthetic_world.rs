//! A procedural audio-visual world whose identities are exactly decodable.
//!
//! Each identity owns an appearance code and a timbre code. Subject regions
//! are painted with a linear rendering of the appearance code; speech is a
//! linear rendering of `timbre ⊗ content`. Matched filters recover both.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub frames: usize,
    pub audio_steps: usize,
    pub hop: usize,
    pub fps_latent: f64,
    pub tokens_per_second: f64,
    pub code_dim: usize,
    pub registry_size: usize,
    pub content_dim: usize,
    /// Side of the square subject region, in pixels.
    pub region: usize,
    pub noise: f64,
    pub max_subjects: usize,
    pub overlap_speech: bool,
    pub silent_prob: f64,
    pub ref_audio_steps: usize,
    /// One-shot reference poses are uniform in `±pose_max_deg`.
    pub pose_max_deg: f64,
    pub views: usize,
    /// Magnitude range of multi-view poses; signs alternate across views.
    pub multiview_pose_deg: (f64, f64),
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_h: 16,
            frame_w: 16,
            channels: 1,
            patch: 4,
            frames: 8,
            audio_steps: 32,
            hop: 16,
            fps_latent: 8.0,
            tokens_per_second: 32.0,
            code_dim: 8,
            registry_size: 16,
            content_dim: 2,
            region: 8,
            noise: 0.01,
            max_subjects: 2,
            overlap_speech: false,
            silent_prob: 0.0,
            ref_audio_steps: 8,
            pose_max_deg: 30.0,
            views: 3,
            multiview_pose_deg: (0.0, 90.0),
        }
    }
}

impl WorldConfig {
    /// Half-size geometry: an 8×16 frame with two side-by-side regions,
    /// 4 latent frames and 16 audio steps.
    pub fn desk() -> Self {
        Self {
            frame_h: 8,
            frame_w: 16,
            frames: 4,
            audio_steps: 16,
            fps_latent: 4.0,
            tokens_per_second: 16.0,
            ref_audio_steps: 6,
            ..Self::default()
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_h / self.patch, self.frame_w / self.patch)
    }

    /// `σ = fps_latent / tokens_per_second`.
    pub fn sigma(&self) -> f64 {
        self.fps_latent / self.tokens_per_second
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.frame_h.is_multiple_of(self.patch)
            || !self.frame_w.is_multiple_of(self.patch)
            || !self.region.is_multiple_of(self.patch)
        {
            return bad("frame and region sides must be multiples of the patch".into());
        }
        if self.region > self.frame_h || self.region > self.frame_w {
            return bad("region larger than the frame".into());
        }
        if self.patch_dim() < self.code_dim + 1 {
            return bad(format!(
                "patch dimension {} cannot hold a {}-dim code plus a mouth pattern",
                self.patch_dim(),
                self.code_dim
            ));
        }
        if self.hop < self.code_dim * self.content_dim {
            return bad(format!(
                "hop {} < code·content {}",
                self.hop,
                self.code_dim * self.content_dim
            ));
        }
        if self.max_subjects == 0 || self.max_subjects > self.region_slots().len() {
            return bad(format!("{} subjects do not fit in the frame", self.max_subjects));
        }
        if self.frames == 0 || self.audio_steps == 0 || self.views == 0 {
            return bad("empty clip".into());
        }
        Ok(())
    }

    /// Non-overlapping candidate regions tiling the frame.
    pub fn region_slots(&self) -> Vec<Region> {
        let mut out = vec![];
        for y in (0..=self.frame_h - self.region).step_by(self.region) {
            for x in (0..=self.frame_w - self.region).step_by(self.region) {
                out.push(Region {
                    y,
                    x,
                    h: self.region,
                    w: self.region,
                });
            }
        }
        out
    }

    /// Audio steps covered by video frame `f`.
    fn frame_steps(&self, f: usize) -> std::ops::Range<usize> {
        let per = self.audio_steps as f64 / self.frames as f64;
        let a = (f as f64 * per).round() as usize;
        let b = ((f + 1) as f64 * per).round() as usize;
        a..b.min(self.audio_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: usize,
    pub appearance: Vec<f64>,
    pub timbre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRegistry {
    pub identities: Vec<Identity>,
}

/// Bound on pairwise `|⟨·,·⟩|` between codes of different identities.
pub const SEPARATION: f64 = 0.3;

fn max_coherence(codes: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            m = m.max(dot(&codes[i], &codes[j]).abs());
        }
    }
    m
}

/// Draws a random code set, spreads it by descending the frame potential
/// `Σ⟨c_i, c_j⟩¹⁶`, and redraws until every pair is below [`SEPARATION`].
fn separated_codes(n: usize, dim: usize, r: &mut Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..500 {
        let mut x: Vec<Vec<f64>> = (0..n).map(|_| rng::unit_vec(r, dim)).collect();
        for _ in 0..3000 {
            let g: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { dot(&x[i], &x[j]) }).collect())
                .collect();
            let mx = g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            if mx < 1e-12 {
                break;
            }
            let norm = mx.powi(15);
            let step: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut s = vec![0.0; dim];
                    for j in 0..n {
                        let w = g[i][j].powi(15) / norm;
                        for (a, b) in s.iter_mut().zip(&x[j]) {
                            *a += w * b;
                        }
                    }
                    s
                })
                .collect();
            for (xi, si) in x.iter_mut().zip(&step) {
                for (a, b) in xi.iter_mut().zip(si) {
                    *a -= 0.02 * b;
                }
                normalize(xi);
            }
        }
        if max_coherence(&x) < SEPARATION {
            return Ok(x);
        }
    }
    Err(Error::Config(format!(
        "could not draw {n} codes in R^{dim} with coherence below {SEPARATION}"
    )))
}

impl IdentityRegistry {
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[tag::REGISTRY]);
        let app = separated_codes(cfg.registry_size, cfg.code_dim, &mut r)?;
        let tim = separated_codes(cfg.registry_size, cfg.code_dim, &mut r)?;
        let reg = Self {
            identities: app
                .into_iter()
                .zip(tim)
                .enumerate()
                .map(|(id, (appearance, timbre))| Identity { id, appearance, timbre })
                .collect(),
        };
        reg.check()?;
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        for idn in &self.identities {
            for code in [&idn.appearance, &idn.timbre] {
                let n = dot(code, code).sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::NonUnitEmbedding {
                        id: idn.id.to_string(),
                        norm: n,
                    });
                }
            }
        }
        let app: Vec<Vec<f64>> = self.identities.iter().map(|i| i.appearance.clone()).collect();
        let tim: Vec<Vec<f64>> = self.identities.iter().map(|i| i.timbre.clone()).collect();
        if max_coherence(&app) >= SEPARATION || max_coherence(&tim) >= SEPARATION {
            return Err(Error::Config("registry codes are not separated".into()));
        }
        Ok(())
    }

    /// Identity whose appearance code best matches `v`.
    pub fn nearest_appearance(&self, v: &[f64]) -> usize {
        argmax(self.identities.iter().map(|i| dot(&i.appearance, v)))
    }

    pub fn nearest_timbre(&self, v: &[f64]) -> usize {
        argmax(self.identities.iter().map(|i| dot(&i.timbre, v)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    fn overlaps(&self, o: &Region) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    /// Patch coordinates `(row, col)` covered by the region.
    pub fn patches(&self, patch: usize) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for i in self.y / patch..(self.y + self.h) / patch {
            for j in self.x / patch..(self.x + self.w) / patch {
                out.push((i, j));
            }
        }
        out
    }

    /// Bottom patch row, where the mouth pattern is drawn.
    pub fn mouth_patches(&self, patch: usize) -> Vec<(usize, usize)> {
        let i = (self.y + self.h) / patch - 1;
        (self.x / patch..(self.x + self.w) / patch).map(|j| (i, j)).collect()
    }
}

/// A speaking interval `[start, end)` in audio steps with its content code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub start: usize,
    pub end: usize,
    pub content: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub identity: usize,
    pub slot: usize,
    pub region: Region,
    pub utterances: Vec<Utterance>,
    /// Pose angle of each reference view, in radians.
    pub ref_poses: Vec<f64>,
    /// Content code of the reference utterance.
    pub ref_content: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub subjects: Vec<SubjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self, cfg: &WorldConfig, registry: &IdentityRegistry) -> Result<()> {
        let k = self.subjects.len();
        if k == 0 {
            return Err(Error::InvalidScene("scene has no subjects".into()));
        }
        let mut slots: Vec<usize> = self.subjects.iter().map(|s| s.slot).collect();
        slots.sort_unstable();
        if slots != (1..=k).collect::<Vec<_>>() {
            return Err(Error::InvalidScene(format!("slots {slots:?} are not 1..{k}")));
        }
        for (i, a) in self.subjects.iter().enumerate() {
            if a.identity >= registry.len() {
                return Err(Error::InvalidScene(format!("unknown identity {}", a.identity)));
            }
            let r = a.region;
            if r.y + r.h > cfg.frame_h || r.x + r.w > cfg.frame_w || r.h != cfg.region || r.w != cfg.region {
                return Err(Error::InvalidScene(format!("region {r:?} outside the frame")));
            }
            if r.y % cfg.patch != 0 || r.x % cfg.patch != 0 {
                return Err(Error::InvalidScene(format!("region {r:?} is not patch aligned")));
            }
            for b in &self.subjects[i + 1..] {
                if a.region.overlaps(&b.region) {
                    return Err(Error::OverlappingRegions(format!("slots {} and {}", a.slot, b.slot)));
                }
            }
            for u in &a.utterances {
                if u.start >= u.end || u.end > cfg.audio_steps || u.content.len() != cfg.content_dim {
                    return Err(Error::InvalidScene(format!("bad utterance {u:?}")));
                }
            }
            if a.ref_poses.is_empty() || a.ref_content.len() != cfg.content_dim {
                return Err(Error::InvalidScene("reference description incomplete".into()));
            }
        }
        Ok(())
    }

    pub fn speaking(&self, subject: usize, step: usize) -> Option<&Utterance> {
        self.subjects[subject]
            .utterances
            .iter()
            .find(|u| (u.start..u.end).contains(&step))
    }

    /// Fragments of subject `i`'s utterances during which nobody else speaks.
    pub fn solo_utterances(&self, i: usize) -> Vec<Utterance> {
        let mut out: Vec<Utterance> = vec![];
        for u in &self.subjects[i].utterances {
            let mut cur: Option<usize> = None;
            for step in u.start..=u.end {
                let solo = step < u.end && (0..self.subjects.len()).all(|j| j == i || self.speaking(j, step).is_none());
                match (solo, cur) {
                    (true, None) => cur = Some(step),
                    (false, Some(a)) => {
                        out.push(Utterance {
                            start: a,
                            end: step,
                            content: u.content.clone(),
                        });
                        cur = None;
                    }
                    _ => {}
                }
            }
        }
        out
    }

    /// Whether subject `i`'s mouth is open during frame `f`: at least half of
    /// the frame's audio steps fall inside one of its utterances.
    pub fn mouth_open(&self, cfg: &WorldConfig, subject: usize, f: usize) -> bool {
        let steps = cfg.frame_steps(f);
        let n = steps.len();
        let on = steps.filter(|&s| self.speaking(subject, s).is_some()).count();
        n > 0 && 2 * on >= n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PoseMode {
    /// Uniform in `±max_deg`.
    Uniform { max_deg: f64 },
    /// Magnitudes uniform in `[min_deg, max_deg]`, signs alternating `+, −, +, …`.
    Alternating { min_deg: f64, max_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecOptions {
    /// Fixed subject count; `None` draws uniformly from `1..=max_subjects`.
    pub subjects: Option<usize>,
    pub views: usize,
    pub pose: PoseMode,
}

impl SpecOptions {
    pub fn one_shot(cfg: &WorldConfig) -> Self {
        Self {
            subjects: None,
            views: 1,
            pose: PoseMode::Uniform {
                max_deg: cfg.pose_max_deg,
            },
        }
    }

    pub fn multiview(cfg: &WorldConfig) -> Self {
        Self {
            subjects: None,
            views: cfg.views,
            pose: PoseMode::Alternating {
                min_deg: cfg.multiview_pose_deg.0,
                max_deg: cfg.multiview_pose_deg.1,
            },
        }
    }
}

fn content_code(r: &mut Rng, dim: usize) -> Vec<f64> {
    // First component ≥ 0.5 keeps the timbre sign recoverable.
    loop {
        let mut c = rng::unit_vec(r, dim);
        if c[0] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        if c[0] >= 0.5 {
            return c;
        }
    }
}

fn speech_schedule(cfg: &WorldConfig, order: &[usize], r: &mut Rng) -> Vec<Vec<(usize, usize)>> {
    let t = cfg.audio_steps;
    let mut out = vec![vec![]; order.len()];
    if cfg.overlap_speech {
        for slot in out.iter_mut() {
            let len = r.random_range((t / 4).max(1)..=(t / 2).max(1));
            let start = r.random_range(0..=t - len);
            slot.push((start, start + len));
        }
        return out;
    }
    let k = order.len();
    for (n, &i) in order.iter().enumerate() {
        let (w0, w1) = (n * t / k, (n + 1) * t / k);
        let w = w1 - w0;
        let start = w0 + r.random_range(0..=(w / 4));
        let end = w1 - r.random_range(0..=(w / 4));
        out[i].push((start, end.max(start + 1)));
    }
    out
}

pub fn random_spec(cfg: &WorldConfig, registry: &IdentityRegistry, opts: &SpecOptions, r: &mut Rng) -> SceneSpec {
    let k = opts
        .subjects
        .unwrap_or_else(|| r.random_range(1..=cfg.max_subjects))
        .clamp(1, cfg.max_subjects);
    let mut ids: Vec<usize> = (0..registry.len()).collect();
    ids.shuffle(r);
    let mut regions = cfg.region_slots();
    regions.shuffle(r);
    let mut slots: Vec<usize> = (1..=k).collect();
    slots.shuffle(r);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(r);
    let schedule = speech_schedule(cfg, &order, r);
    let subjects = (0..k)
        .map(|i| {
            let silent = k > 1 && r.random::<f64>() < cfg.silent_prob;
            let utterances = if silent {
                vec![]
            } else {
                schedule[i]
                    .iter()
                    .map(|&(start, end)| Utterance {
                        start,
                        end,
                        content: content_code(r, cfg.content_dim),
                    })
                    .collect()
            };
            let ref_poses = (0..opts.views)
                .map(|v| {
                    let deg = match opts.pose {
                        PoseMode::Uniform { max_deg } => r.random_range(-max_deg..=max_deg),
                        PoseMode::Alternating { min_deg, max_deg } => {
                            let m = r.random_range(min_deg..=max_deg);
                            if v % 2 == 0 {
                                m
                            } else {
                                -m
                            }
                        }
                    };
                    deg.to_radians()
                })
                .collect();
            let ref_content = loop {
                let c = content_code(r, cfg.content_dim);
                if utterances
                    .iter()
                    .all(|u: &Utterance| c.iter().zip(&u.content).map(|(a, b)| (a - b).abs()).sum::<f64>() > 1e-3)
                {
                    break c;
                }
            };
            SubjectSpec {
                identity: ids[i],
                slot: slots[i],
                region: regions[i],
                utterances,
                ref_poses,
                ref_content,
            }
        })
        .collect();
    SceneSpec { subjects }
}

/// Per-subject condition; carries no identity information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCondition {
    pub slot: usize,
    pub region: Region,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnchorCondition {
    pub anchors_enabled: bool,
    pub subjects: Vec<SubjectCondition>,
}

impl SubjectAnchorCondition {
    pub fn from_spec(spec: &SceneSpec, anchors_enabled: bool) -> Self {
        Self {
            anchors_enabled,
            subjects: spec
                .subjects
                .iter()
                .map(|s| SubjectCondition {
                    slot: s.slot,
                    region: s.region,
                    utterances: s.utterances.clone(),
                })
                .collect(),
        }
    }

    fn tag_of(&self, slot: usize, untagged: usize) -> usize {
        if self.anchors_enabled {
            slot
        } else {
            untagged
        }
    }

    /// `[T·H·W, tag_count]` tag weights for noisy video tokens.
    pub fn video_tags(&self, cfg: &WorldConfig, tag_count: usize) -> Tensor<f64> {
        let (gh, gw) = cfg.grid();
        let per_frame = gh * gw;
        let mut m = Tensor::zeros(&[cfg.frames * per_frame, tag_count]);
        let mut frame_tag = vec![0usize; per_frame];
        for s in &self.subjects {
            for (i, j) in s.region.patches(cfg.patch) {
                frame_tag[i * gw + j] = self.tag_of(s.slot, tag_count - 1);
            }
        }
        for f in 0..cfg.frames {
            for (p, &t) in frame_tag.iter().enumerate() {
                m.row_mut(f * per_frame + p)[t] = 1.0;
            }
        }
        m
    }

    /// `([T_a, tag_count] tags, [T_a, content_dim] content)` for noisy audio
    /// tokens. Without anchors, speaking steps are untagged and carry the
    /// mean content code of the scene.
    pub fn audio_condition(&self, cfg: &WorldConfig, tag_count: usize) -> (Tensor<f64>, Tensor<f64>) {
        let t = cfg.audio_steps;
        let mut tags = Tensor::zeros(&[t, tag_count]);
        let mut content = Tensor::zeros(&[t, cfg.content_dim]);
        let all: Vec<&Utterance> = self.subjects.iter().flat_map(|s| &s.utterances).collect();
        let pooled: Vec<f64> = (0..cfg.content_dim)
            .map(|d| all.iter().map(|u| u.content[d]).sum::<f64>() / all.len().max(1) as f64)
            .collect();
        for step in 0..t {
            let mut active = false;
            for s in &self.subjects {
                for u in &s.utterances {
                    if (u.start..u.end).contains(&step) {
                        active = true;
                        if self.anchors_enabled {
                            tags.row_mut(step)[s.slot] += 1.0;
                            for (c, v) in content.row_mut(step).iter_mut().zip(&u.content) {
                                *c += v;
                            }
                        }
                    }
                }
            }
            if !active {
                tags.row_mut(step)[0] = 1.0;
            } else if !self.anchors_enabled {
                tags.row_mut(step)[tag_count - 1] = 1.0;
                content.row_mut(step).copy_from_slice(&pooled);
            }
        }
        (tags, content)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectReference {
    pub slot: usize,
    /// One `[region, region, C]` image per view.
    pub views: Vec<Tensor<f64>>,
    /// `[ref_audio_steps · hop, 1]`.
    pub wave: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// `[T, H, W, C]`
    pub frames: Tensor<f64>,
    /// `[T_a · hop, 1]`
    pub wave: Tensor<f64>,
    pub references: Vec<SubjectReference>,
}

/// Registry plus the fixed rendering bases.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub registry: IdentityRegistry,
    /// `[patch_dim, code_dim]`, orthonormal columns.
    pub appearance_basis: Tensor<f64>,
    /// Unit patch pattern orthogonal to the appearance basis.
    pub mouth: Vec<f64>,
    /// `[hop, code_dim · content_dim]`, orthonormal columns.
    pub audio_basis: Tensor<f64>,
}

/// Block rotation by `theta` in the planes `(0,1), (2,3), …`.
pub fn rotate_pose(code: &[f64], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = code.to_vec();
    for p in 0..code.len() / 2 {
        let (a, b) = (code[2 * p], code[2 * p + 1]);
        out[2 * p] = c * a - s * b;
        out[2 * p + 1] = s * a + c * b;
    }
    out
}

fn matvec(m: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

fn matvec_t(m: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &x) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += x * w;
        }
    }
    out
}

impl World {
    pub fn new(cfg: WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let registry = IdentityRegistry::generate(&cfg, seed)?;
        let mut r = rng::stream(seed, &[tag::WORLD]);
        let pd = cfg.patch_dim();
        let q = rng::orthonormal(&mut r, pd, cfg.code_dim + 1);
        let cols = cfg.code_dim + 1;
        let appearance_basis =
            Tensor::from_fn(&[pd, cfg.code_dim], |i| q[(i / cfg.code_dim) * cols + i % cfg.code_dim]);
        let mouth = (0..pd).map(|i| q[i * cols + cfg.code_dim]).collect();
        let ac = cfg.code_dim * cfg.content_dim;
        let audio_basis = Tensor::from_vec(&[cfg.hop, ac], rng::orthonormal(&mut r, cfg.hop, ac))?;
        Ok(Self {
            cfg,
            registry,
            appearance_basis,
            mouth,
            audio_basis,
        })
    }

    fn paint_patch(&self, img: &mut [f64], w: usize, c: usize, (y0, x0): (usize, usize), pattern: &[f64], add: bool) {
        let p = self.cfg.patch;
        let mut idx = 0;
        for py in 0..p {
            for px in 0..p {
                let base = ((y0 + py) * w + x0 + px) * c;
                for ch in 0..c {
                    if add {
                        img[base + ch] += pattern[idx];
                    } else {
                        img[base + ch] = pattern[idx];
                    }
                    idx += 1;
                }
            }
        }
    }

    fn read_patch(&self, img: &[f64], w: usize, c: usize, (y0, x0): (usize, usize)) -> Vec<f64> {
        let p = self.cfg.patch;
        let mut out = Vec::with_capacity(p * p * c);
        for py in 0..p {
            for px in 0..p {
                let base = ((y0 + py) * w + x0 + px) * c;
                out.extend_from_slice(&img[base..base + c]);
            }
        }
        out
    }

    fn speech_frame(&self, timbre: &[f64], content: &[f64]) -> Vec<f64> {
        let outer: Vec<f64> = timbre.iter().flat_map(|s| content.iter().map(move |c| s * c)).collect();
        matvec(&self.audio_basis, &outer)
    }

    /// Renders target frames, target audio and per-subject references.
    pub fn generate_scene(&self, spec: &SceneSpec, r: &mut Rng) -> Result<RenderedScene> {
        let cfg = &self.cfg;
        spec.validate(cfg, &self.registry)?;
        let (h, w, c, p) = (cfg.frame_h, cfg.frame_w, cfg.channels, cfg.patch);
        let mut frames = Tensor::zeros(&[cfg.frames, h, w, c]);
        let frame_len = h * w * c;
        for (si, s) in spec.subjects.iter().enumerate() {
            let idn = &self.registry.identities[s.identity];
            let pattern = matvec(&self.appearance_basis, &idn.appearance);
            let mouth_rows = s.region.mouth_patches(p);
            for f in 0..cfg.frames {
                let img = &mut frames.data_mut()[f * frame_len..(f + 1) * frame_len];
                for (i, j) in s.region.patches(p) {
                    self.paint_patch(img, w, c, (i * p, j * p), &pattern, false);
                }
                if spec.mouth_open(cfg, si, f) {
                    for &(i, j) in &mouth_rows {
                        self.paint_patch(img, w, c, (i * p, j * p), &self.mouth, true);
                    }
                }
            }
        }
        let hop = cfg.hop;
        let mut wave = Tensor::zeros(&[cfg.audio_steps * hop, 1]);
        for s in &spec.subjects {
            let timbre = &self.registry.identities[s.identity].timbre;
            for u in &s.utterances {
                let fr = self.speech_frame(timbre, &u.content);
                for step in u.start..u.end {
                    for (x, v) in wave.data_mut()[step * hop..(step + 1) * hop].iter_mut().zip(&fr) {
                        *x += v;
                    }
                }
            }
        }
        let mut references = vec![];
        for s in &spec.subjects {
            let idn = &self.registry.identities[s.identity];
            let views = s
                .ref_poses
                .iter()
                .map(|&theta| {
                    let pattern = matvec(&self.appearance_basis, &rotate_pose(&idn.appearance, theta));
                    let side = cfg.region;
                    let mut img = Tensor::zeros(&[side, side, c]);
                    for i in 0..side / p {
                        for j in 0..side / p {
                            self.paint_patch(img.data_mut(), side, c, (i * p, j * p), &pattern, false);
                        }
                    }
                    img
                })
                .collect();
            let fr = self.speech_frame(&idn.timbre, &s.ref_content);
            let wave = Tensor::from_fn(&[cfg.ref_audio_steps * hop, 1], |i| fr[i % hop]);
            references.push(SubjectReference {
                slot: s.slot,
                views,
                wave,
            });
        }
        let mut add_noise = |t: &mut Tensor<f64>| {
            if cfg.noise > 0.0 {
                for x in t.data_mut() {
                    *x += cfg.noise * rng::normal(r);
                }
            }
        };
        add_noise(&mut frames);
        add_noise(&mut wave);
        for rf in &mut references {
            for v in &mut rf.views {
                add_noise(v);
            }
            add_noise(&mut rf.wave);
        }
        Ok(RenderedScene {
            frames,
            wave,
            references,
        })
    }

    /// Mean appearance-basis projection over a region's patches, across frames.
    pub fn decode_appearance(&self, frames: &Tensor<f64>, region: &Region) -> Vec<f64> {
        let cfg = &self.cfg;
        let (h, w, c) = (cfg.frame_h, cfg.frame_w, cfg.channels);
        let t = frames.len() / (h * w * c);
        let mut acc = vec![0.0; cfg.code_dim];
        let patches = region.patches(cfg.patch);
        for f in 0..t {
            let img = &frames.data()[f * h * w * c..(f + 1) * h * w * c];
            for &(i, j) in &patches {
                let px = self.read_patch(img, w, c, (i * cfg.patch, j * cfg.patch));
                for (a, b) in acc.iter_mut().zip(matvec_t(&self.appearance_basis, &px)) {
                    *a += b;
                }
            }
        }
        acc
    }

    /// `[code_dim × content_dim]` speech estimate at one audio step, row-major.
    fn speech_at(&self, wave: &Tensor<f64>, step: usize) -> Vec<f64> {
        let hop = self.cfg.hop;
        matvec_t(&self.audio_basis, &wave.data()[step * hop..(step + 1) * hop])
    }

    /// Timbre estimate over the given utterances, using their known content codes.
    pub fn decode_timbre(&self, wave: &Tensor<f64>, utterances: &[Utterance]) -> Option<Vec<f64>> {
        let cd = self.cfg.content_dim;
        let mut acc = vec![0.0; self.cfg.code_dim];
        let mut any = false;
        for u in utterances {
            for step in u.start..u.end {
                let m = self.speech_at(wave, step);
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += (0..cd).map(|j| m[i * cd + j] * u.content[j]).sum::<f64>();
                }
                any = true;
            }
        }
        any.then_some(acc)
    }

    fn mouth_score(&self, frames: &Tensor<f64>, region: &Region, f: usize) -> f64 {
        let cfg = &self.cfg;
        let (h, w, c) = (cfg.frame_h, cfg.frame_w, cfg.channels);
        let img = &frames.data()[f * h * w * c..(f + 1) * h * w * c];
        let mp = region.mouth_patches(cfg.patch);
        mp.iter()
            .map(|&(i, j)| dot(&self.read_patch(img, w, c, (i * cfg.patch, j * cfg.patch)), &self.mouth))
            .sum::<f64>()
            / mp.len() as f64
    }

    pub fn decode_binding(&self, frames: &Tensor<f64>, wave: &Tensor<f64>, spec: &SceneSpec) -> BindingReport {
        let cfg = &self.cfg;
        let mut slots = vec![];
        for (si, s) in spec.subjects.iter().enumerate() {
            let appearance = self
                .registry
                .nearest_appearance(&self.decode_appearance(frames, &s.region));
            let solo = spec.solo_utterances(si);
            let timbre = self
                .decode_timbre(wave, &solo)
                .map(|v| self.registry.nearest_timbre(&v));
            let agree = (0..cfg.frames)
                .filter(|&f| (self.mouth_score(frames, &s.region, f) > 0.5) == spec.mouth_open(cfg, si, f))
                .count();
            slots.push(SlotBinding {
                slot: s.slot,
                intended: s.identity,
                appearance,
                timbre,
                mouth_agreement: agree as f64 / cfg.frames as f64,
            });
        }
        slots.sort_by_key(|s| s.slot);
        let active = (0..cfg.audio_steps)
            .filter(|&step| {
                let e = dot(&self.speech_at(wave, step), &self.speech_at(wave, step)).sqrt();
                let want = (0..spec.subjects.len()).any(|i| spec.speaking(i, step).is_some());
                (e > 0.5) == want
            })
            .count();
        BindingReport {
            slots,
            activity_agreement: active as f64 / cfg.audio_steps as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotBinding {
    pub slot: usize,
    pub intended: usize,
    pub appearance: usize,
    /// `None` when the subject never speaks alone (unscored).
    pub timbre: Option<usize>,
    pub mouth_agreement: f64,
}

impl SlotBinding {
    pub fn appearance_ok(&self) -> bool {
        self.appearance == self.intended
    }

    pub fn timbre_ok(&self) -> Option<bool> {
        self.timbre.map(|t| t == self.intended)
    }

    pub fn bound(&self) -> Option<bool> {
        self.timbre_ok().map(|t| t && self.appearance_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingReport {
    pub slots: Vec<SlotBinding>,
    /// Fraction of audio steps whose decoded activity matches the schedule.
    pub activity_agreement: f64,
}

impl BindingReport {
    pub fn scored(&self) -> usize {
        self.slots.iter().filter(|s| s.timbre.is_some()).count()
    }

    /// Joint accuracy over scored slots; `None` when nothing is scored.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.scored();
        (n > 0).then(|| self.slots.iter().filter(|s| s.bound() == Some(true)).count() as f64 / n as f64)
    }

    pub fn appearance_accuracy(&self) -> f64 {
        self.slots.iter().filter(|s| s.appearance_ok()).count() as f64 / self.slots.len().max(1) as f64
    }

    pub fn timbre_accuracy(&self) -> Option<f64> {
        let n = self.scored();
        (n > 0).then(|| self.slots.iter().filter(|s| s.timbre_ok() == Some(true)).count() as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    UnimodalAudio,
    UnimodalVideo,
    Paired,
    Multiview,
}

impl SceneKind {
    pub fn has_video(self) -> bool {
        self != SceneKind::UnimodalAudio
    }

    pub fn has_audio(self) -> bool {
        self != SceneKind::UnimodalVideo
    }

    fn index(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::UnimodalAudio => "unimodal_audio",
            SceneKind::UnimodalVideo => "unimodal_video",
            SceneKind::Paired => "paired",
            SceneKind::Multiview => "multiview",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "unimodal_audio" | "audio" => Ok(SceneKind::UnimodalAudio),
            "unimodal_video" | "video" => Ok(SceneKind::UnimodalVideo),
            "paired" => Ok(SceneKind::Paired),
            "multiview" => Ok(SceneKind::Multiview),
            other => Err(Error::Config(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mix {
    Only(SceneKind),
    /// Audio-only > video-only > paired > multi-view.
    Hierarchy,
}

impl std::str::FromStr for Mix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchy" | "default" => Ok(Mix::Hierarchy),
            other => other.parse().map(Mix::Only),
        }
    }
}

/// Scene counts per kind; the hierarchy splits 40/30/20/10.
pub fn mix_counts(n: usize, mix: Mix) -> Vec<(SceneKind, usize)> {
    match mix {
        Mix::Only(k) => vec![(k, n)],
        Mix::Hierarchy => {
            let v = n * 3 / 10;
            let p = n * 2 / 10;
            let m = n / 10;
            vec![
                (SceneKind::UnimodalAudio, n - v - p - m),
                (SceneKind::UnimodalVideo, v),
                (SceneKind::Paired, p),
                (SceneKind::Multiview, m),
            ]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScene {
    pub id: String,
    pub kind: SceneKind,
    pub spec: SceneSpec,
    pub scene: RenderedScene,
}

/// Deterministic scene for `(seed, split, kind, index)`.
pub fn make_scene(
    world: &World,
    kind: SceneKind,
    index: usize,
    seed: u64,
    split: Split,
    opts: &SpecOptions,
) -> Result<DatasetScene> {
    let sp = match split {
        Split::Train => tag::SCENE,
        Split::Eval => tag::EVAL,
    };
    let mut r = rng::stream(seed, &[sp, kind.index(), index as u64]);
    let spec = random_spec(&world.cfg, &world.registry, opts, &mut r);
    let mut rr = rng::stream(seed, &[tag::RENDER, sp, kind.index(), index as u64]);
    let scene = world.generate_scene(&spec, &mut rr)?;
    Ok(DatasetScene {
        id: format!("{}_{}_{index:05}", split_name(split), kind.name()),
        kind,
        spec,
        scene,
    })
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

pub fn build_dataset(world: &World, n_scenes: usize, mix: Mix, seed: u64) -> Result<Vec<DatasetScene>> {
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    let mut out = vec![];
    for (kind, count) in mix_counts(n_scenes, mix) {
        let opts = if kind == SceneKind::Multiview {
            SpecOptions::multiview(&world.cfg)
        } else {
            SpecOptions::one_shot(&world.cfg)
        };
        for i in 0..count {
            out.push(make_scene(world, kind, i, seed, Split::Train, &opts)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scene_id: String,
    pub kind: SceneKind,
    pub files: BTreeMap<String, String>,
    pub slots: Vec<usize>,
    pub identity_ids: Vec<usize>,
    pub speaking_intervals: Vec<Vec<(usize, usize)>>,
    pub cond: SubjectAnchorCondition,
    pub spec: SceneSpec,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `manifest.jsonl` plus one tensor file per array.
pub fn write_dataset(dir: &Path, scenes: &[DatasetScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in scenes {
        let mut files = BTreeMap::new();
        let mut put = |key: String, t: &Tensor<f64>| -> Result<()> {
            let name = format!("{}.{key}.iapl", s.id);
            save_tensor(&dir.join(&name), t)?;
            files.insert(key, name);
            Ok(())
        };
        if s.kind.has_video() {
            put("v".into(), &s.scene.frames)?;
        }
        if s.kind.has_audio() {
            put("a".into(), &s.scene.wave)?;
        }
        for rf in &s.scene.references {
            if s.kind.has_video() {
                let refs: Vec<&Tensor<f64>> = rf.views.iter().collect();
                let stacked = Tensor::concat_rows(&refs);
                let side = rf.views[0].shape()[0];
                let stacked =
                    stacked.reshape(&[rf.views.len(), side, rf.views[0].shape()[1], rf.views[0].shape()[2]])?;
                put(format!("c_v{}", rf.slot), &stacked)?;
            }
            if s.kind.has_audio() {
                put(format!("c_a{}", rf.slot), &rf.wave)?;
            }
        }
        let row = ManifestRow {
            scene_id: s.id.clone(),
            kind: s.kind,
            files,
            slots: s.spec.subjects.iter().map(|x| x.slot).collect(),
            identity_ids: s.spec.subjects.iter().map(|x| x.identity).collect(),
            speaking_intervals: s
                .spec
                .subjects
                .iter()
                .map(|x| x.utterances.iter().map(|u| (u.start, u.end)).collect())
                .collect(),
            cond: SubjectAnchorCondition::from_spec(&s.spec, true),
            spec: s.spec.clone(),
        };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Reloads a dataset written by [`write_dataset`]. Missing modalities come back
/// as empty tensors.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetScene>> {
    let rows = read_manifest(dir)?;
    rows.into_iter()
        .map(|row| {
            let load = |k: &str| -> Result<Option<Tensor<f64>>> {
                row.files.get(k).map(|f| load_tensor::<f64>(&dir.join(f))).transpose()
            };
            let frames = load("v")?.unwrap_or_else(|| Tensor::zeros(&[0]));
            let wave = load("a")?.unwrap_or_else(|| Tensor::zeros(&[0]));
            let mut references = vec![];
            for s in &row.spec.subjects {
                let views = match load(&format!("c_v{}", s.slot))? {
                    Some(t) => {
                        let sh = t.shape().to_vec();
                        let per: usize = sh[1..].iter().product();
                        (0..sh[0])
                            .map(|i| Tensor::from_vec(&sh[1..], t.data()[i * per..(i + 1) * per].to_vec()))
                            .collect::<Result<Vec<_>>>()?
                    }
                    None => vec![],
                };
                let wave = load(&format!("c_a{}", s.slot))?.unwrap_or_else(|| Tensor::zeros(&[0]));
                references.push(SubjectReference {
                    slot: s.slot,
                    views,
                    wave,
                });
            }
            Ok(DatasetScene {
                id: row.scene_id,
                kind: row.kind,
                spec: row.spec,
                scene: RenderedScene {
                    frames,
                    wave,
                    references,
                },
            })
        })
        .collect()
}
