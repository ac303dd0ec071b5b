//! Sampling-based evaluation on held-out synthetic scenes.

use serde::{Deserialize, Serialize};

use super::prepare::{PreparedScene, Preparer};
use super::train::example_loss;
use crate::dual_tower::{forward_towers, ForwardOptions, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::flow::{sample, sample_timestep, JointState, SamplerOptions};
use crate::rng::{self, tag};
use crate::synthetic_world::{BindingReport, World};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenes: usize,
    pub slots: usize,
    /// Slots with a scoreable timbre (they speak alone at least once).
    pub scored: usize,
    pub appearance_correct: usize,
    pub timbre_correct: usize,
    pub joint_correct: usize,
    pub alignment_sum: f64,
    pub recon_sum: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn appearance_accuracy(&self) -> f64 {
        ratio(self.appearance_correct, self.slots)
    }

    pub fn timbre_accuracy(&self) -> f64 {
        ratio(self.timbre_correct, self.scored)
    }

    /// Appearance and timbre both match the intended identity, over scored slots.
    pub fn joint_accuracy(&self) -> f64 {
        ratio(self.joint_correct, self.scored)
    }

    /// Mean of mouth/interval agreement and speech-activity agreement.
    pub fn alignment(&self) -> f64 {
        self.alignment_sum / self.scenes.max(1) as f64
    }

    pub fn recon_error(&self) -> f64 {
        self.recon_sum / self.scenes.max(1) as f64
    }

    fn add(&mut self, rep: &BindingReport, recon: f64) {
        self.scenes += 1;
        self.slots += rep.slots.len();
        self.scored += rep.scored();
        self.appearance_correct += rep.slots.iter().filter(|s| s.appearance_ok()).count();
        self.timbre_correct += rep.slots.iter().filter(|s| s.timbre_ok() == Some(true)).count();
        self.joint_correct += rep.slots.iter().filter(|s| s.bound() == Some(true)).count();
        let mouth = rep.slots.iter().map(|s| s.mouth_agreement).sum::<f64>() / rep.slots.len().max(1) as f64;
        self.alignment_sum += 0.5 * (mouth + rep.activity_agreement);
        self.recon_sum += recon;
    }

    fn merge(&mut self, o: &Metrics) {
        self.scenes += o.scenes;
        self.slots += o.slots;
        self.scored += o.scored;
        self.appearance_correct += o.appearance_correct;
        self.timbre_correct += o.timbre_correct;
        self.joint_correct += o.joint_correct;
        self.alignment_sum += o.alignment_sum;
        self.recon_sum += o.recon_sum;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub single: Metrics,
    pub multi: Metrics,
    /// Mean held-out flow loss at fixed timesteps and noise.
    pub eval_loss: f64,
}

impl EvalReport {
    pub fn all(&self) -> Metrics {
        let mut m = self.single;
        m.merge(&self.multi);
        m
    }

    pub fn table(&self, title: &str) -> String {
        let mut s = format!(
            "{title}\n{:<8} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "split", "scenes", "slots", "appear", "timbre", "joint", "align", "recon"
        );
        for (name, m) in [("single", self.single), ("multi", self.multi), ("all", self.all())] {
            s.push_str(&format!(
                "{name:<8} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                m.scenes,
                m.slots,
                m.appearance_accuracy(),
                m.timbre_accuracy(),
                m.joint_accuracy(),
                m.alignment(),
                m.recon_error()
            ));
        }
        s.push_str(&format!("eval loss {:.4}\n", self.eval_loss));
        s
    }
}

/// Draws both modalities for one prepared scene with the Euler sampler.
pub fn sample_scene(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    scene: &PreparedScene,
    opts: &ForwardOptions,
    sampler: &SamplerOptions,
    seed: u64,
    index: u64,
) -> Result<JointState> {
    let model = |x: &JointState, t: f64| -> Result<JointState> {
        let vin = scene
            .video
            .as_ref()
            .zip(x.video.as_ref())
            .map(|(p, x)| p.input(x.cast()));
        let ain = scene
            .audio
            .as_ref()
            .zip(x.audio.as_ref())
            .map(|(p, x)| p.input(x.cast()));
        let (v, a) = forward_towers(cfg, params, vin.as_ref(), ain.as_ref(), t, opts)?;
        Ok(JointState {
            video: v.map(|v| v.cast()),
            audio: a.map(|a| a.cast()),
        })
    };
    let vs = scene.video.as_ref().map(|p| p.clean.shape().to_vec());
    let as_ = scene.audio.as_ref().map(|p| p.clean.shape().to_vec());
    let mut r = rng::stream(seed, &[tag::SAMPLE, index]);
    sample(&model, (vs.as_deref(), as_.as_deref()), sampler, &mut r)
}

fn rel_err(pred: &Tensor<f64>, target: &Tensor<f32>) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        num += (p - *t as f64).powi(2);
        den += (*t as f64).powi(2);
    }
    (num, den)
}

/// Samples every scene, decodes the clip and scores binding against the spec.
pub fn evaluate(
    world: &World,
    prep: &Preparer,
    params: &ParamSet<f32>,
    scenes: &[PreparedScene],
    opts: &ForwardOptions,
    sampler: &SamplerOptions,
    seed: u64,
) -> Result<EvalReport> {
    let cfg = &prep.model;
    let mut rep = EvalReport::default();
    for (i, sc) in scenes.iter().enumerate() {
        if sc.video.is_none() || sc.audio.is_none() {
            return Err(Error::InvalidScene(format!(
                "{} lacks a modality for evaluation",
                sc.id
            )));
        }
        let out = sample_scene(cfg, params, sc, opts, sampler, seed, i as u64)?;
        let (v, a) = (out.video.expect("video"), out.audio.expect("audio"));
        let frames = prep.decode_video(world, &v)?;
        let wave = prep.decode_audio(world, &a)?;
        let b = world.decode_binding(&frames, &wave, &sc.spec);
        let (nv, dv) = rel_err(&v, &sc.video.as_ref().unwrap().clean);
        let (na, da) = rel_err(&a, &sc.audio.as_ref().unwrap().clean);
        let recon = ((nv + na) / (dv + da).max(1e-12)).sqrt();
        if sc.spec.subjects.len() > 1 {
            rep.multi.add(&b, recon);
        } else {
            rep.single.add(&b, recon);
        }
    }
    rep.eval_loss = eval_loss(cfg, params, scenes, opts, 1.0, seed)?;
    Ok(rep)
}

/// Mean joint flow loss over four fixed `(t, noise)` draws per scene.
pub fn eval_loss(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    scenes: &[PreparedScene],
    opts: &ForwardOptions,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, sc) in scenes.iter().enumerate() {
        for j in 0..4 {
            let mut r = rng::stream(seed, &[tag::EVAL, 0x1055, i as u64, j]);
            let t = sample_timestep(&mut r);
            let l = example_loss(
                cfg,
                params,
                sc,
                sc.video.is_some(),
                sc.audio.is_some(),
                t,
                &mut r,
                opts,
                lambda,
                None,
            )?;
            sum += l.total;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}
