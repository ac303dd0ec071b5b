//! Scene → model inputs: codec latents, reference tokens, structured positions
//! and condition tags.

use crate::dual_tower::{ModelConfig, TowerInput};
use crate::error::{Error, Result};
use crate::identity_binding::{assign_positions, Position3D, PositionConfig, SceneLayout};
use crate::latents::{AudioLatent, Codec, CodecConfig, ReferencePayload, ReferenceSignal, VideoLatent};
use crate::synthetic_world::{DatasetScene, SceneSpec, SubjectAnchorCondition, World};
use crate::tensor::Tensor;

/// One tower's share of a prepared scene.
#[derive(Debug, Clone)]
pub struct PreparedTower {
    /// `[n_z, D_m]` clean latent tokens, already scaled.
    pub clean: Tensor<f32>,
    pub refs: Tensor<f32>,
    pub ref_slots: Vec<usize>,
    pub positions: Vec<Position3D>,
    pub tags: Tensor<f32>,
    pub content: Option<Tensor<f32>>,
}

impl PreparedTower {
    pub fn input(&self, noisy: Tensor<f32>) -> TowerInput<f32> {
        TowerInput {
            noisy,
            refs: self.refs.clone(),
            ref_slots: self.ref_slots.clone(),
            positions: self.positions.clone(),
            tags: self.tags.clone(),
            content: self.content.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub spec: SceneSpec,
    pub video: Option<PreparedTower>,
    pub audio: Option<PreparedTower>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    pub video: bool,
    pub audio: bool,
    pub subject_anchors: bool,
    /// Keep at most this many reference views per subject.
    pub max_views: Option<usize>,
}

/// Holds the codec and scaling shared by preparation and decoding.
#[derive(Debug, Clone)]
pub struct Preparer {
    pub codec: Codec,
    pub model: ModelConfig,
    pub positions: PositionConfig,
    pub latent_scale: f64,
}

fn f32s(t: &Tensor<f64>, scale: f64) -> Tensor<f32> {
    t.map(|x| x * scale).cast()
}

impl Preparer {
    pub fn new(world: &World, model: &ModelConfig, latent_scale: f64) -> Self {
        let cfg = &world.cfg;
        let codec = Codec::new(CodecConfig {
            patch: cfg.patch,
            channels: cfg.channels,
            hop: cfg.hop,
            audio_channels: 1,
            width: model.width,
            seed: model.seed,
        });
        Self {
            codec,
            model: model.clone(),
            positions: PositionConfig {
                max_audio_ref: cfg.ref_audio_steps.max(PositionConfig::default().max_audio_ref),
                k_max: model.k_max,
            },
            latent_scale,
        }
    }

    pub fn prepare(&self, world: &World, scene: &DatasetScene, opts: &PrepareOptions) -> Result<PreparedScene> {
        let cfg = &world.cfg;
        if self.codec.model_width() != self.model.width {
            return Err(Error::Config(format!(
                "model width {} is smaller than the latent width",
                self.model.width
            )));
        }
        let s = self.latent_scale;
        let cond = SubjectAnchorCondition::from_spec(&scene.spec, opts.subject_anchors);
        let mut subjects: Vec<_> = scene.spec.subjects.iter().zip(&scene.scene.references).collect();
        subjects.sort_by_key(|(sub, _)| sub.slot);

        let mut vref_tokens = vec![];
        let mut vref_slots = vec![];
        let mut layout_vrefs = vec![];
        let mut aref_tokens = vec![];
        let mut aref_slots = vec![];
        let mut layout_arefs = vec![];
        for (sub, rf) in &subjects {
            if opts.video {
                let n = opts.max_views.unwrap_or(usize::MAX).min(rf.views.len());
                let tok = self.codec.tokenize_reference(&ReferenceSignal {
                    payload: ReferencePayload::Visual(rf.views[..n].to_vec()),
                    identity_slot: sub.slot,
                })?;
                let (gh, gw) = tok.patch_grid.expect("visual grid");
                layout_vrefs.push((sub.slot, gh, gw));
                vref_slots.extend(std::iter::repeat_n(sub.slot, tok.tokens.rows()));
                vref_tokens.push(tok.tokens);
            }
            if opts.audio {
                let tok = self.codec.tokenize_reference(&ReferenceSignal {
                    payload: ReferencePayload::Auditory(rf.wave.clone()),
                    identity_slot: sub.slot,
                })?;
                layout_arefs.push((sub.slot, tok.tokens.rows()));
                aref_slots.extend(std::iter::repeat_n(sub.slot, tok.tokens.rows()));
                aref_tokens.push(tok.tokens);
            }
        }
        let (gh, gw) = cfg.grid();
        // Both timelines always enter the layout so reference positions do not
        // depend on which tower is trained.
        let layout = SceneLayout {
            video: Some((cfg.frames, gh, gw)),
            audio: Some((cfg.audio_steps, cfg.sigma())),
            visual_refs: layout_vrefs,
            audio_refs: layout_arefs,
        };
        let pos = assign_positions(&layout, &self.positions)?;
        let stack = |parts: &[Tensor<f64>]| -> Tensor<f32> {
            if parts.is_empty() {
                Tensor::zeros(&[0, self.model.width])
            } else {
                f32s(&Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()), s)
            }
        };
        let tag_count = self.model.tag_count();
        let video = if opts.video {
            let lat = self.codec.encode_video(&scene.scene.frames, cfg.fps_latent)?;
            Some(PreparedTower {
                clean: f32s(&lat.tokens(), s),
                refs: stack(&vref_tokens),
                ref_slots: vref_slots,
                positions: pos.video.positions.clone(),
                tags: cond.video_tags(cfg, tag_count).cast(),
                content: None,
            })
        } else {
            None
        };
        let audio = if opts.audio {
            let lat = self.codec.encode_audio(&scene.scene.wave, cfg.tokens_per_second)?;
            let (tags, content) = cond.audio_condition(cfg, tag_count);
            Some(PreparedTower {
                clean: f32s(&lat.data, s),
                refs: stack(&aref_tokens),
                ref_slots: aref_slots,
                positions: pos.audio.positions.clone(),
                tags: tags.cast(),
                content: Some(content.cast()),
            })
        } else {
            None
        };
        Ok(PreparedScene {
            id: scene.id.clone(),
            spec: scene.spec.clone(),
            video,
            audio,
        })
    }

    /// Scaled `[n_z, D_v]` tokens → frames `[T, H, W, C]`.
    pub fn decode_video(&self, world: &World, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        let cfg = &world.cfg;
        let (gh, gw) = cfg.grid();
        let data = tokens
            .map(|x| x / self.latent_scale)
            .reshape(&[cfg.frames, gh, gw, cfg.patch_dim()])?;
        self.codec.decode_video(&VideoLatent {
            data,
            fps_latent: cfg.fps_latent,
        })
    }

    /// Scaled `[T_a, D_a]` tokens → wave `[T_a·hop, 1]`.
    pub fn decode_audio(&self, world: &World, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.codec.decode_audio(&AudioLatent {
            data: tokens.map(|x| x / self.latent_scale),
            tokens_per_second: world.cfg.tokens_per_second,
        })
    }
}
