//! Stage runner: flow-matching steps over prepared scenes with AdamW,
//! deterministic per-step randomness, checkpoints and run records.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, Stage, TrainConfig};
use super::optim::{adamw_step, AdamState, AdamWConfig};
use super::prepare::PreparedScene;
use crate::dual_tower::{
    build_forward, config_diff, init_params, load_checkpoint, save_checkpoint, CheckpointMeta, ForwardOptions,
    FusionGate, ModelConfig, ParamSet, CHECKPOINT_VERSION,
};
use crate::error::{Error, Result};
use crate::flow::sample_timestep;
use crate::rng::{self, tag, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub step: u64,
    pub loss_v: Option<f64>,
    pub loss_a: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Parameters plus optimizer state at a step boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRun {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub lambda: f64,
    pub fusion: FusionGate,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Restrict updates to the stage's parameter selector.
    pub select: bool,
}

impl StageRun {
    pub fn new(stage: Stage, train: &TrainConfig, ablation: AblationFlags, seed: u64) -> Self {
        Self {
            stage,
            steps: train.steps(stage),
            lr: train.lr(stage),
            batch: train.batch,
            weight_decay: train.weight_decay,
            clip: train.clip,
            lambda: train.lambda,
            fusion: stage.fusion_gate(),
            ablation,
            seed,
            select: true,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip: (self.clip > 0.0).then_some(self.clip),
            ..AdamWConfig::default()
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            fusion: self.fusion,
            identity_embeddings: self.ablation.identity_embeddings,
        }
    }

    fn trainable(&self, name: &str) -> bool {
        !self.select || self.stage.trainable(name)
    }
}

/// Noisy input, velocity target and timestep for one tower.
fn flow_pair(clean: &Tensor<f32>, t: f64, r: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    let noise: Vec<f32> = (0..clean.len()).map(|_| rng::normal(r) as f32).collect();
    let t32 = t as f32;
    let xt = Tensor::from_fn(clean.shape(), |i| (1.0 - t32) * clean.data()[i] + t32 * noise[i]);
    let u = Tensor::from_fn(clean.shape(), |i| noise[i] - clean.data()[i]);
    (xt, u)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExampleLoss {
    pub loss_v: Option<f64>,
    pub loss_a: Option<f64>,
    pub total: f64,
}

/// Loss (and optionally gradients accumulated into `grads` with weight `w`)
/// for one scene at timestep `t`.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    scene: &PreparedScene,
    use_video: bool,
    use_audio: bool,
    t: f64,
    r: &mut Rng,
    opts: &ForwardOptions,
    lambda: f64,
    grads: Option<(&mut ParamSet<f32>, f32, &dyn Fn(&str) -> bool)>,
) -> Result<ExampleLoss> {
    let vt = scene.video.as_ref().filter(|_| use_video);
    let at = scene.audio.as_ref().filter(|_| use_audio);
    let vp = vt.map(|p| flow_pair(&p.clean, t, r));
    let ap = at.map(|p| flow_pair(&p.clean, t, r));
    let vin = vt.zip(vp.as_ref()).map(|(p, (xt, _))| p.input(xt.clone()));
    let ain = at.zip(ap.as_ref()).map(|(p, (xt, _))| p.input(xt.clone()));
    let mut fg = build_forward(cfg, params, vin.as_ref(), ain.as_ref(), t, opts)?;
    let g = &mut fg.graph;
    let lv = fg.video.zip(vp.as_ref()).map(|(o, (_, u))| g.mse(o, u));
    let la = fg.audio.zip(ap.as_ref()).map(|(o, (_, u))| g.mse(o, u));
    let root = match (lv, la) {
        (Some(v), Some(a)) => {
            let a = g.scale(a, lambda as f32);
            g.add(v, a)
        }
        (Some(v), None) => v,
        (None, Some(a)) => g.scale(a, lambda as f32),
        (None, None) => return Err(Error::NothingToDenoise),
    };
    let out = ExampleLoss {
        loss_v: lv.map(|v| g.value(v).data()[0] as f64),
        loss_a: la.map(|v| g.value(v).data()[0] as f64),
        total: g.value(root).data()[0] as f64,
    };
    if let Some((acc, w, keep)) = grads {
        let mut gr = fg.graph.backward(root);
        for (name, var) in &fg.params {
            if !keep(name) {
                continue;
            }
            if let Some(gv) = gr.take(*var) {
                let dst = acc.get_mut(name);
                for (d, s) in dst.data_mut().iter_mut().zip(gv.data()) {
                    *d += w * s;
                }
            }
        }
    }
    Ok(out)
}

fn grads_for(params: &ParamSet<f32>, run: &StageRun) -> ParamSet<f32> {
    ParamSet {
        tensors: params
            .tensors
            .iter()
            .filter(|(k, _)| run.trainable(k))
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect(),
    }
}

/// Runs one optimizer step; randomness comes from `(seed, stage, step)` only.
pub fn train_step(
    cfg: &ModelConfig,
    state: &mut TrainState,
    data: &[PreparedScene],
    run: &StageRun,
) -> Result<(ExampleLoss, f64)> {
    if data.is_empty() {
        return Err(Error::Config(format!("no training scenes for {}", run.stage.name())));
    }
    let mut r = rng::stream(run.seed, &[tag::BATCH, run.stage.index(), state.step]);
    let mut grads = grads_for(&state.params, run);
    let w = 1.0 / run.batch as f32;
    let opts = run.forward_options();
    let keep = |n: &str| run.trainable(n);
    let (mut lv, mut la, mut tot, mut nv, mut na) = (0.0, 0.0, 0.0, 0, 0);
    for _ in 0..run.batch {
        let idx = r.random_range(0..data.len());
        let t = sample_timestep(&mut r);
        let l = example_loss(
            cfg,
            &state.params,
            &data[idx],
            run.stage.uses_video(),
            run.stage.uses_audio(),
            t,
            &mut r,
            &opts,
            run.lambda,
            Some((&mut grads, w, &keep)),
        )?;
        if let Some(v) = l.loss_v {
            lv += v;
            nv += 1;
        }
        if let Some(a) = l.loss_a {
            la += a;
            na += 1;
        }
        tot += l.total;
    }
    let norm = adamw_step(&mut state.params, &grads, &mut state.adam, &run.adam());
    state.step += 1;
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((
        ExampleLoss {
            loss_v: mean(lv, nv),
            loss_a: mean(la, na),
            total: tot / run.batch as f64,
        },
        norm,
    ))
}

/// Trains `run.steps` total steps, continuing from `state.step`. Each record
/// is passed to `log`; one record per `log_every` steps is returned.
pub fn train_stage(
    cfg: &ModelConfig,
    state: &mut TrainState,
    data: &[PreparedScene],
    run: &StageRun,
    log_every: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<RunRecord>> {
    let hash = cfg.hash();
    let mut out = vec![];
    let t0 = Instant::now();
    let every = log_every.max(1) as u64;
    while (state.step as usize) < run.steps {
        let (l, norm) = train_step(cfg, state, data, run)?;
        if !l.total.is_finite() {
            return Err(Error::Config(format!("non-finite loss at step {}", state.step)));
        }
        let rec = RunRecord {
            stage: run.stage.name().into(),
            step: state.step,
            loss_v: l.loss_v,
            loss_a: l.loss_a,
            loss: l.total,
            grad_norm: norm,
            wall_ms: t0.elapsed().as_millis() as u64,
            seed: run.seed,
            config_hash: hash.clone(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        if state.step.is_multiple_of(every) || state.step as usize == run.steps {
            out.push(rec);
        }
    }
    Ok(out)
}

impl TrainState {
    pub fn fresh(cfg: &ModelConfig, stage: Stage) -> Result<Self> {
        let params = init_params::<f32>(cfg)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            stage,
            step: 0,
            params,
            adam,
        })
    }

    /// Starts `stage` from the parameters of a finished earlier stage.
    pub fn continue_from(prev: &TrainState, stage: Stage) -> Self {
        Self {
            stage,
            step: 0,
            params: prev.params.clone(),
            adam: AdamState::new(&prev.params),
        }
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig, seed: u64, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage: self.stage.name().into(),
            step: self.step,
            seed,
            config_hash: cfg.hash(),
            model: cfg.clone(),
            extra: serde_json::json!({ "adam_step": self.adam.step, "run": extra }),
        };
        let mut named: Vec<(String, &Tensor<f32>)> = vec![];
        for (k, v) in &self.adam.m.tensors {
            named.push((format!("adam.m/{k}"), v));
        }
        for (k, v) in &self.adam.v.tensors {
            named.push((format!("adam.v/{k}"), v));
        }
        save_checkpoint(path, &meta, &self.params, &named)
    }

    /// Loads a checkpoint, rejecting model configurations that differ from
    /// `cfg` with a field-level diff.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<(Self, CheckpointMeta)> {
        let ck = load_checkpoint::<f32>(path)?;
        if ck.meta.config_hash != cfg.hash() {
            let diff = config_diff(&ck.meta.model, cfg);
            return Err(Error::IncompatibleCheckpoint(if diff.is_empty() {
                "config hash mismatch".into()
            } else {
                diff.join("; ")
            }));
        }
        let stage: Stage = ck.meta.stage.parse()?;
        let expected = init_params::<f32>(cfg)?;
        for (k, v) in &expected.tensors {
            match ck.params.tensors.get(k) {
                Some(p) if p.shape() == v.shape() => {}
                _ => {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "parameter {k} missing or reshaped"
                    )))
                }
            }
        }
        let mut m = ck.params.zeros_like();
        let mut v = ck.params.zeros_like();
        for (name, t) in ck.extra {
            if let Some(k) = name.strip_prefix("adam.m/") {
                m.tensors.insert(k.into(), t);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                v.tensors.insert(k.into(), t);
            }
        }
        let adam_step = ck.meta.extra.get("adam_step").and_then(|x| x.as_u64()).unwrap_or(0);
        Ok((
            Self {
                stage,
                step: ck.meta.step,
                params: ck.params,
                adam: AdamState { step: adam_step, m, v },
            },
            ck.meta,
        ))
    }
}
