//! Multi-stage training, evaluation and ablations on the synthetic world.

pub mod config;
pub mod eval;
pub mod optim;
pub mod prepare;
pub mod train;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{AblationFlags, DataConfig, EvalConfig, ExperimentConfig, ModelSize, Stage, TrainConfig};
pub use eval::{eval_loss, evaluate, sample_scene, EvalReport, Metrics};
pub use optim::{adamw_step, global_norm, AdamState, AdamWConfig};
pub use prepare::{PrepareOptions, PreparedScene, PreparedTower, Preparer};
pub use train::{example_loss, train_stage, train_step, ExampleLoss, RunRecord, StageRun, TrainState};

use crate::dual_tower::{ForwardOptions, FusionGate, ModelConfig, ParamSet};
use crate::error::Result;
use crate::flow::SamplerOptions;
use crate::synthetic_world::{make_scene, DatasetScene, PoseMode, SceneKind, SpecOptions, Split, World};

/// World, codec and model configuration for one seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub model: ModelConfig,
    pub prep: Preparer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// One-shot references at training poses, 1 or 2 subjects.
    Standard,
    /// Multi-view references at large poses; `views` limits the views shown.
    LargePose { views: usize },
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(cfg.world.clone(), cfg.seed)?;
        let model = cfg.model_config();
        let prep = Preparer::new(&world, &model, cfg.train.latent_scale);
        Ok(Self {
            cfg,
            world,
            model,
            prep,
        })
    }

    pub fn spec_options(&self, kind: SceneKind) -> SpecOptions {
        if kind == SceneKind::Multiview {
            SpecOptions::multiview(&self.world.cfg)
        } else {
            SpecOptions::one_shot(&self.world.cfg)
        }
    }

    pub fn raw_scenes(&self, kind: SceneKind, n: usize) -> Result<Vec<DatasetScene>> {
        let opts = self.spec_options(kind);
        (0..n)
            .map(|i| make_scene(&self.world, kind, i, self.cfg.seed, Split::Train, &opts))
            .collect()
    }

    pub fn prepare_all(&self, scenes: &[DatasetScene], opts: &PrepareOptions) -> Result<Vec<PreparedScene>> {
        scenes.iter().map(|s| self.prep.prepare(&self.world, s, opts)).collect()
    }

    pub fn stage_options(&self, stage: Stage, flags: AblationFlags) -> PrepareOptions {
        PrepareOptions {
            video: stage.uses_video(),
            audio: stage.uses_audio(),
            subject_anchors: flags.subject_anchors,
            max_views: None,
        }
    }

    /// Training scenes of the stage's kind, generated from the experiment seed.
    pub fn training_set(&self, stage: Stage, flags: AblationFlags) -> Result<Vec<PreparedScene>> {
        let kind = stage.scene_kind();
        let raw = self.raw_scenes(kind, self.cfg.data.count(kind))?;
        self.prepare_all(&raw, &self.stage_options(stage, flags))
    }

    pub fn eval_scenes(&self, split: EvalSplit, n: usize) -> Result<Vec<DatasetScene>> {
        (0..n).map(|i| self.eval_scene(split, i)).collect()
    }

    /// Held-out scene `index` of a split; independent of the split size.
    pub fn eval_scene(&self, split: EvalSplit, index: usize) -> Result<DatasetScene> {
        let w = &self.world.cfg;
        let (kind, opts) = match split {
            EvalSplit::Standard => (SceneKind::Paired, SpecOptions::one_shot(w)),
            EvalSplit::LargePose { .. } => (
                SceneKind::Multiview,
                SpecOptions {
                    subjects: None,
                    views: w.views,
                    pose: PoseMode::Alternating {
                        min_deg: self.cfg.eval.large_pose_deg.0,
                        max_deg: self.cfg.eval.large_pose_deg.1,
                    },
                },
            ),
        };
        make_scene(&self.world, kind, index, self.cfg.seed, Split::Eval, &opts)
    }

    pub fn eval_set(&self, split: EvalSplit, flags: AblationFlags) -> Result<Vec<PreparedScene>> {
        let raw = self.eval_scenes(split, self.cfg.eval.scenes)?;
        self.prepare_all(&raw, &Self::eval_options(split, flags))
    }

    pub fn eval_options(split: EvalSplit, flags: AblationFlags) -> PrepareOptions {
        PrepareOptions {
            video: true,
            audio: true,
            subject_anchors: flags.subject_anchors,
            max_views: match split {
                EvalSplit::Standard => None,
                EvalSplit::LargePose { views } => Some(views),
            },
        }
    }

    pub fn stage_run(&self, stage: Stage, flags: AblationFlags) -> StageRun {
        StageRun::new(stage, &self.cfg.train, flags, self.cfg.seed)
    }

    pub fn sampler(&self) -> SamplerOptions {
        SamplerOptions {
            steps: self.cfg.eval.sampler_steps,
            guidance: None,
        }
    }

    pub fn forward_options(&self, flags: AblationFlags) -> ForwardOptions {
        ForwardOptions {
            fusion: FusionGate::Active,
            identity_embeddings: flags.identity_embeddings,
        }
    }

    pub fn evaluate(
        &self,
        params: &ParamSet<f32>,
        scenes: &[PreparedScene],
        flags: AblationFlags,
    ) -> Result<EvalReport> {
        evaluate(
            &self.world,
            &self.prep,
            params,
            scenes,
            &self.forward_options(flags),
            &self.sampler(),
            self.cfg.seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoIdentityEmbeddings,
    NoSubjectAnchors,
    /// One joint run on paired data with the step budget of stages 1 and 2.
    OneStage,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIdentityEmbeddings => "no_identity_embeddings",
            Variant::NoSubjectAnchors => "no_subject_anchors",
            Variant::OneStage => "one_stage",
        }
    }

    pub fn flags(self, base: AblationFlags) -> AblationFlags {
        match self {
            Variant::NoIdentityEmbeddings => AblationFlags {
                identity_embeddings: false,
                ..base
            },
            Variant::NoSubjectAnchors => AblationFlags {
                subject_anchors: false,
                ..base
            },
            _ => base,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" | "none" => Ok(Variant::Full),
            "identity-embeddings" | "ie" | "no-identity-embeddings" => Ok(Variant::NoIdentityEmbeddings),
            "subject-anchors" | "sa" | "no-subject-anchors" => Ok(Variant::NoSubjectAnchors),
            "staging" | "one-stage" => Ok(Variant::OneStage),
            other => Err(crate::error::Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Checkpoints produced by a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub variant: Variant,
    pub flags: AblationFlags,
    /// One-shot model after stage 2 (or the single joint run).
    pub stage2: TrainState,
    /// Multi-view fine-tuned model; absent for the one-stage variant.
    pub stage3: Option<TrainState>,
    pub records: Vec<RunRecord>,
}

/// Optional sinks for checkpoints and logs.
#[derive(Default)]
pub struct PipelineIo<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

/// Run metadata stored in checkpoints: the full experiment configuration and
/// the stage's ablation flags.
pub fn checkpoint_extra(cfg: &ExperimentConfig, run: &StageRun) -> serde_json::Value {
    serde_json::json!({ "experiment": cfg, "ablation": run.ablation })
}

/// Experiment configuration recorded by [`checkpoint_extra`].
pub fn experiment_from_meta(meta: &crate::dual_tower::CheckpointMeta) -> Result<(ExperimentConfig, AblationFlags)> {
    let run = meta.extra.get("run").cloned().unwrap_or_default();
    let cfg = run
        .get("experiment")
        .cloned()
        .ok_or_else(|| crate::error::Error::Format("checkpoint carries no experiment configuration".into()))?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg)?;
    let flags = match run.get("ablation") {
        Some(f) => serde_json::from_value(f.clone())?,
        None => cfg.ablation,
    };
    Ok((cfg, flags))
}

pub fn run_stage(
    exp: &Experiment,
    state: &mut TrainState,
    run: &StageRun,
    data: &[PreparedScene],
    io: &mut PipelineIo<'_>,
) -> Result<Vec<RunRecord>> {
    let recs = train_stage(
        &exp.model,
        state,
        data,
        run,
        exp.cfg.train.log_every,
        io.log.as_mut().map(|w| &mut **w as &mut dyn Write),
    )?;
    if let Some(dir) = io.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        state.save(
            &dir.join(format!("{}.ckpt", run.stage.name())),
            &exp.model,
            exp.cfg.seed,
            checkpoint_extra(&exp.cfg, run),
        )?;
    }
    Ok(recs)
}

pub fn run_pipeline(exp: &Experiment, variant: Variant, io: &mut PipelineIo<'_>) -> Result<PipelineOutcome> {
    let flags = variant.flags(exp.cfg.ablation);
    let mut records = vec![];
    if variant == Variant::OneStage {
        let mut run = exp.stage_run(Stage::Stage2Joint, flags);
        let t = &exp.cfg.train;
        run.steps = t.stage1_audio_steps + t.stage1_video_steps + t.stage2_steps;
        let data = exp.training_set(Stage::Stage2Joint, flags)?;
        let mut st = TrainState::fresh(&exp.model, Stage::Stage2Joint)?;
        records.extend(run_stage(exp, &mut st, &run, &data, io)?);
        return Ok(PipelineOutcome {
            variant,
            flags,
            stage2: st,
            stage3: None,
            records,
        });
    }
    let mut st = TrainState::fresh(&exp.model, Stage::Stage1Audio)?;
    for stage in Stage::ALL {
        if stage != Stage::Stage1Audio {
            st = TrainState::continue_from(&st, stage);
        }
        if stage == Stage::Stage3Multiview {
            break;
        }
        let data = exp.training_set(stage, flags)?;
        records.extend(run_stage(exp, &mut st, &exp.stage_run(stage, flags), &data, io)?);
    }
    let stage2 = TrainState {
        stage: Stage::Stage2Joint,
        ..st.clone()
    };
    let data = exp.training_set(Stage::Stage3Multiview, flags)?;
    records.extend(run_stage(
        exp,
        &mut st,
        &exp.stage_run(Stage::Stage3Multiview, flags),
        &data,
        io,
    )?);
    Ok(PipelineOutcome {
        variant,
        flags,
        stage2,
        stage3: Some(st),
        records,
    })
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub state: TrainState,
    pub scene: PreparedScene,
    /// `‖x̂ − x‖ / ‖x‖` over decoded frames and waveform.
    pub relative_error: f64,
    pub report: EvalReport,
}

/// Trains the joint model on a single paired scene, then samples it back.
pub fn overfit_single(exp: &Experiment, steps: usize, batch: usize) -> Result<OverfitOutcome> {
    let flags = exp.cfg.ablation;
    let raw = exp.raw_scenes(SceneKind::Paired, 1)?;
    let data = exp.prepare_all(&raw, &exp.stage_options(Stage::Stage2Joint, flags))?;
    let mut run = exp.stage_run(Stage::Stage2Joint, flags);
    run.steps = steps;
    run.batch = batch;
    let mut st = TrainState::fresh(&exp.model, Stage::Stage2Joint)?;
    train_stage(&exp.model, &mut st, &data, &run, steps, None)?;
    let sc = &data[0];
    let out = sample_scene(
        &exp.model,
        &st.params,
        sc,
        &exp.forward_options(flags),
        &exp.sampler(),
        exp.cfg.seed,
        0,
    )?;
    let frames = exp.prep.decode_video(&exp.world, out.video.as_ref().expect("video"))?;
    let wave = exp.prep.decode_audio(&exp.world, out.audio.as_ref().expect("audio"))?;
    let truth = &raw[0].scene;
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in frames
        .data()
        .iter()
        .chain(wave.data())
        .zip(truth.frames.data().iter().chain(truth.wave.data()))
    {
        num += (p - t).powi(2);
        den += t * t;
    }
    let report = exp.evaluate(&st.params, &data, flags)?;
    Ok(OverfitOutcome {
        state: st,
        scene: data[0].clone(),
        relative_error: (num / den).sqrt(),
        report,
    })
}

/// Evaluation of one pipeline variant for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub seed: u64,
    pub variant: Variant,
    pub flags: AblationFlags,
    /// Stage-2 (or one-stage) model on the standard split.
    pub stage2: EvalReport,
    /// Stage-3 model on the standard split.
    pub stage3: Option<EvalReport>,
    /// Stage-2 model on large poses, first view only.
    pub large_pose_one_shot: Option<EvalReport>,
    /// Stage-3 model on large poses with every view.
    pub large_pose_multiview: Option<EvalReport>,
}

impl VariantResult {
    /// Report of the final model on the standard split.
    pub fn final_report(&self) -> &EvalReport {
        self.stage3.as_ref().unwrap_or(&self.stage2)
    }
}

/// Trains one variant with `cfg.seed` and evaluates every relevant split.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    io: &mut PipelineIo<'_>,
) -> Result<(PipelineOutcome, VariantResult)> {
    let exp = Experiment::new(cfg.clone())?;
    let out = run_pipeline(&exp, variant, io)?;
    let flags = out.flags;
    let standard = exp.eval_set(EvalSplit::Standard, flags)?;
    let stage2 = exp.evaluate(&out.stage2.params, &standard, flags)?;
    let (mut stage3, mut lp1, mut lp3) = (None, None, None);
    if let Some(s3) = &out.stage3 {
        stage3 = Some(exp.evaluate(&s3.params, &standard, flags)?);
        if variant == Variant::Full {
            let one = exp.eval_set(EvalSplit::LargePose { views: 1 }, flags)?;
            let all = exp.eval_set(EvalSplit::LargePose { views: cfg.world.views }, flags)?;
            lp1 = Some(exp.evaluate(&out.stage2.params, &one, flags)?);
            lp3 = Some(exp.evaluate(&s3.params, &all, flags)?);
        }
    }
    let res = VariantResult {
        seed: cfg.seed,
        variant,
        flags,
        stage2,
        stage3,
        large_pose_one_shot: lp1,
        large_pose_multiview: lp3,
    };
    Ok((out, res))
}
