//! Experiment configuration: world, model, data sizes, stage budgets and
//! ablation flags. Loaded from TOML; every field has a default.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dual_tower::{FusionGate, ModelConfig};
use crate::error::{Error, Result};
use crate::identity_binding::RopeConfig;
use crate::synthetic_world::{SceneKind, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Audio,
    Stage1Video,
    Stage2Joint,
    Stage3Multiview,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Stage1Audio,
        Stage::Stage1Video,
        Stage::Stage2Joint,
        Stage::Stage3Multiview,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1Audio => "stage1_audio",
            Stage::Stage1Video => "stage1_video",
            Stage::Stage2Joint => "stage2_joint",
            Stage::Stage3Multiview => "stage3_multiview",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn fusion_gate(self) -> FusionGate {
        match self {
            Stage::Stage1Audio | Stage::Stage1Video => FusionGate::Masked,
            _ => FusionGate::Active,
        }
    }

    pub fn scene_kind(self) -> SceneKind {
        match self {
            Stage::Stage1Audio => SceneKind::UnimodalAudio,
            Stage::Stage1Video => SceneKind::UnimodalVideo,
            Stage::Stage2Joint => SceneKind::Paired,
            Stage::Stage3Multiview => SceneKind::Multiview,
        }
    }

    pub fn uses_video(self) -> bool {
        self != Stage::Stage1Audio
    }

    pub fn uses_audio(self) -> bool {
        self != Stage::Stage1Video
    }

    /// Stage-1 towers train only their own parameters; the video run keeps
    /// the identity table learned by the audio run.
    pub fn trainable(self, name: &str) -> bool {
        match self {
            Stage::Stage1Audio => name.starts_with("audio.") || name == "ident.table",
            Stage::Stage1Video => name.starts_with("video."),
            Stage::Stage2Joint | Stage::Stage3Multiview => true,
        }
    }

    /// Stages whose checkpoint may initialize this one.
    pub fn accepts_init_from(self, prev: Stage) -> bool {
        match self {
            Stage::Stage1Audio => false,
            Stage::Stage1Video => prev == Stage::Stage1Audio,
            Stage::Stage2Joint => matches!(prev, Stage::Stage1Video | Stage::Stage1Audio),
            Stage::Stage3Multiview => prev == Stage::Stage2Joint,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub subject_anchors: bool,
    pub identity_embeddings: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            subject_anchors: true,
            identity_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub audio: usize,
    pub video: usize,
    pub paired: usize,
    pub multiview: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            audio: 1000,
            video: 750,
            paired: 500,
            multiview: 250,
        }
    }
}

impl DataConfig {
    pub fn count(&self, kind: SceneKind) -> usize {
        match kind {
            SceneKind::UnimodalAudio => self.audio,
            SceneKind::UnimodalVideo => self.video,
            SceneKind::Paired => self.paired,
            SceneKind::Multiview => self.multiview,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub stage3_lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip: f64,
    /// Audio loss weight λ.
    pub lambda: f64,
    /// Latents and reference tokens are multiplied by this before the model.
    pub latent_scale: f64,
    pub stage1_audio_steps: usize,
    pub stage1_video_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            stage3_lr: 1e-4,
            batch: 32,
            weight_decay: 0.01,
            clip: 1.0,
            lambda: 1.0,
            latent_scale: 4.0,
            stage1_audio_steps: 2000,
            stage1_video_steps: 2000,
            stage2_steps: 1000,
            stage3_steps: 300,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Stage1Audio => self.stage1_audio_steps,
            Stage::Stage1Video => self.stage1_video_steps,
            Stage::Stage2Joint => self.stage2_steps,
            Stage::Stage3Multiview => self.stage3_steps,
        }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        if stage == Stage::Stage3Multiview {
            self.stage3_lr
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub sampler_steps: usize,
    /// Pose magnitude range of the large-pose split, in degrees.
    pub large_pose_deg: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            sampler_steps: 50,
            large_pose_deg: (60.0, 75.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSize {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub fusion_layers: usize,
    pub ffn_mult: usize,
    pub time_features: usize,
    pub k_max: usize,
    pub rope: RopeConfig,
}

impl Default for ModelSize {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            blocks: 2,
            fusion_layers: 1,
            ffn_mult: 4,
            time_features: 16,
            k_max: 4,
            rope: RopeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelSize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::desk(),
            model: ModelSize::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Model configuration implied by the world geometry.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.model.width,
            heads: self.model.heads,
            blocks: self.model.blocks,
            fusion_layers: self.model.fusion_layers,
            ffn_mult: self.model.ffn_mult,
            video_dim: self.world.patch_dim(),
            audio_dim: self.world.hop,
            k_max: self.model.k_max,
            content_dim: self.world.content_dim,
            time_features: self.model.time_features,
            rope: self.model.rope.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model_config().validate()?;
        if self.world.max_subjects > self.model.k_max {
            return Err(Error::Config(format!(
                "{} subjects exceed k_max {}",
                self.world.max_subjects, self.model.k_max
            )));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = ExperimentConfig::from_toml("seed = 9\n[train]\nbatch = 4\n[ablation]\nidentity_embeddings = false\n")
            .unwrap();
        assert_eq!(p.seed, 9);
        assert_eq!(p.train.batch, 4);
        assert_eq!(p.train.lr, 1e-3);
        assert!(!p.ablation.identity_embeddings && p.ablation.subject_anchors);
        assert!(ExperimentConfig::from_toml("[train]\nbatch = \"x\"").is_err());
    }

    #[test]
    fn stage_gating_and_selection() {
        assert_eq!(Stage::Stage1Audio.fusion_gate(), FusionGate::Masked);
        assert_eq!(Stage::Stage1Video.fusion_gate(), FusionGate::Masked);
        assert_eq!(Stage::Stage2Joint.fusion_gate(), FusionGate::Active);
        assert_eq!(Stage::Stage3Multiview.fusion_gate(), FusionGate::Active);
        assert_eq!(Stage::Stage3Multiview.scene_kind(), SceneKind::Multiview);
        assert!(Stage::Stage1Audio.trainable("ident.table"));
        assert!(!Stage::Stage1Audio.trainable("video.in.ref"));
        assert!(!Stage::Stage1Audio.trainable("fusion0.v_from_a.q"));
        assert!(!Stage::Stage1Video.trainable("ident.table"));
        assert!(Stage::Stage2Joint.trainable("fusion0.v_from_a.q"));
        assert_eq!("stage2-joint".parse::<Stage>().unwrap(), Stage::Stage2Joint);
        assert!("stage9".parse::<Stage>().is_err());
    }
}
