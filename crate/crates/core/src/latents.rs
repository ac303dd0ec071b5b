//! Fixed orthonormal patch codecs for video frames and audio waveforms.
//!
//! Each codec is a linear map with an orthogonal matrix, so decoding is the
//! transpose and reconstruction is exact up to floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity_binding::pack_multiview;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch: usize,
    pub channels: usize,
    pub hop: usize,
    pub audio_channels: usize,
    /// Shared model width `D` that reference tokens are projected to.
    pub width: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 3,
            hop: 16,
            audio_channels: 1,
            width: 64,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn video_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn audio_dim(&self) -> usize {
        self.hop * self.audio_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    /// `[T_v, H, W, D_v]`
    pub data: Tensor<f64>,
    pub fps_latent: f64,
}

impl VideoLatent {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Tokens in frame-major, then row-major patch order: `[T·H·W, D_v]`.
    pub fn tokens(&self) -> Tensor<f64> {
        self.data.as_matrix()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioLatent {
    /// `[T_a, D_a]`
    pub data: Tensor<f64>,
    pub tokens_per_second: f64,
}

impl AudioLatent {
    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Auditory,
}

#[derive(Debug, Clone)]
pub enum ReferencePayload {
    /// One or more `[H, W, C]` images.
    Visual(Vec<Tensor<f64>>),
    /// `[N, C_a]` waveform.
    Auditory(Tensor<f64>),
}

#[derive(Debug, Clone)]
pub struct ReferenceSignal {
    pub payload: ReferencePayload,
    pub identity_slot: usize,
}

impl ReferenceSignal {
    pub fn modality(&self) -> Modality {
        match self.payload {
            ReferencePayload::Visual(_) => Modality::Visual,
            ReferencePayload::Auditory(_) => Modality::Auditory,
        }
    }
}

/// Reference tokens at model width plus their patch-grid geometry.
#[derive(Debug, Clone)]
pub struct ReferenceTokens {
    pub tokens: Tensor<f64>,
    pub modality: Modality,
    pub slot: usize,
    /// Patch rows/cols of the packed canvas (visual only).
    pub patch_grid: Option<(usize, usize)>,
    /// Near-square packing grid in images (visual only).
    pub image_grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    /// `D_v × D_v`, row-major; latent = basis · patch.
    video_basis: Tensor<f64>,
    audio_basis: Tensor<f64>,
    /// `D × D_v` with orthonormal columns.
    video_proj: Tensor<f64>,
    audio_proj: Tensor<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Self {
        let dv = cfg.video_dim();
        let da = cfg.audio_dim();
        let mut r = rng::stream(cfg.seed, &[tag::CODEC]);
        let video_basis = Tensor::from_vec(&[dv, dv], rng::orthonormal(&mut r, dv, dv)).unwrap();
        let audio_basis = Tensor::from_vec(&[da, da], rng::orthonormal(&mut r, da, da)).unwrap();
        let width = cfg.width.max(dv).max(da);
        let video_proj = Tensor::from_vec(&[width, dv], rng::orthonormal(&mut r, width, dv)).unwrap();
        let audio_proj = Tensor::from_vec(&[width, da], rng::orthonormal(&mut r, width, da)).unwrap();
        Self {
            cfg,
            video_basis,
            audio_basis,
            video_proj,
            audio_proj,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Frames `[T, H, W, C]` → latent `[T, H/p, W/p, p²C]`.
    pub fn encode_video(&self, frames: &Tensor<f64>, fps_latent: f64) -> Result<VideoLatent> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::DimensionMismatch(format!(
                "frames must be [T, H, W, C], got {s:?}"
            )));
        }
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let p = self.cfg.patch;
        if c != self.cfg.channels {
            return Err(Error::DimensionMismatch(format!(
                "expected {} channels, got {c}",
                self.cfg.channels
            )));
        }
        if t == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::DimensionMismatch(format!(
                "frame {h}x{w} not divisible by patch {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let dv = self.cfg.video_dim();
        let mut patches = Tensor::zeros(&[t * gh * gw, dv]);
        let fd = frames.data();
        for f in 0..t {
            for i in 0..gh {
                for j in 0..gw {
                    let row = patches.row_mut((f * gh + i) * gw + j);
                    let mut idx = 0;
                    for py in 0..p {
                        for px in 0..p {
                            let base = ((f * h + i * p + py) * w + j * p + px) * c;
                            row[idx..idx + c].copy_from_slice(&fd[base..base + c]);
                            idx += c;
                        }
                    }
                }
            }
        }
        let lat = patches.matmul_t(false, &self.video_basis, true);
        Ok(VideoLatent {
            data: lat.reshape(&[t, gh, gw, dv])?,
            fps_latent,
        })
    }

    pub fn decode_video(&self, latent: &VideoLatent) -> Result<Tensor<f64>> {
        let s = latent.data.shape();
        let dv = self.cfg.video_dim();
        if s.len() != 4 || s[3] != dv {
            return Err(Error::DimensionMismatch(format!(
                "latent {s:?} does not end in D_v = {dv}"
            )));
        }
        let (t, gh, gw) = (s[0], s[1], s[2]);
        let p = self.cfg.patch;
        let c = self.cfg.channels;
        let patches = latent.data.as_matrix().matmul(&self.video_basis);
        let (h, w) = (gh * p, gw * p);
        let mut out = Tensor::zeros(&[t, h, w, c]);
        let od = out.data_mut();
        for f in 0..t {
            for i in 0..gh {
                for j in 0..gw {
                    let row = patches.row((f * gh + i) * gw + j);
                    let mut idx = 0;
                    for py in 0..p {
                        for px in 0..p {
                            let base = ((f * h + i * p + py) * w + j * p + px) * c;
                            od[base..base + c].copy_from_slice(&row[idx..idx + c]);
                            idx += c;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Waveform `[N, C_a]` → latent `[N / hop, hop·C_a]`.
    pub fn encode_audio(&self, wave: &Tensor<f64>, tokens_per_second: f64) -> Result<AudioLatent> {
        let s = wave.shape();
        if s.len() != 2 || s[1] != self.cfg.audio_channels {
            return Err(Error::DimensionMismatch(format!(
                "wave must be [N, {}], got {s:?}",
                self.cfg.audio_channels
            )));
        }
        let hop = self.cfg.hop;
        if s[0] == 0 || !s[0].is_multiple_of(hop) {
            return Err(Error::DimensionMismatch(format!(
                "{} samples not divisible by hop {hop}",
                s[0]
            )));
        }
        let da = self.cfg.audio_dim();
        let frames = Tensor::from_vec(&[s[0] / hop, da], wave.data().to_vec())?;
        Ok(AudioLatent {
            data: frames.matmul_t(false, &self.audio_basis, true),
            tokens_per_second,
        })
    }

    pub fn decode_audio(&self, latent: &AudioLatent) -> Result<Tensor<f64>> {
        let s = latent.data.shape();
        let da = self.cfg.audio_dim();
        if s.len() != 2 || s[1] != da {
            return Err(Error::DimensionMismatch(format!(
                "latent {s:?} does not end in D_a = {da}"
            )));
        }
        let frames = latent.data.matmul(&self.audio_basis);
        Tensor::from_vec(&[s[0] * self.cfg.hop, self.cfg.audio_channels], frames.into_data())
    }

    /// Latent tokens `[L, D_v]` → model width `[L, D]`.
    pub fn project_video(&self, tokens: &Tensor<f64>) -> Tensor<f64> {
        tokens.matmul_t(false, &self.video_proj, true)
    }

    pub fn project_audio(&self, tokens: &Tensor<f64>) -> Tensor<f64> {
        tokens.matmul_t(false, &self.audio_proj, true)
    }

    pub fn model_width(&self) -> usize {
        self.video_proj.rows()
    }

    pub fn tokenize_reference(&self, reference: &ReferenceSignal) -> Result<ReferenceTokens> {
        match &reference.payload {
            ReferencePayload::Visual(images) => {
                if images.is_empty() {
                    return Err(Error::EmptyPayload("visual reference has no images".into()));
                }
                let (canvas, image_grid) = pack_multiview(images)?;
                let s = canvas.shape().to_vec();
                let frame = canvas.reshape(&[1, s[0], s[1], s[2]])?;
                let lat = self.encode_video(&frame, 1.0)?;
                let (gh, gw) = lat.grid();
                Ok(ReferenceTokens {
                    tokens: self.project_video(&lat.tokens()),
                    modality: Modality::Visual,
                    slot: reference.identity_slot,
                    patch_grid: Some((gh, gw)),
                    image_grid: Some(image_grid),
                })
            }
            ReferencePayload::Auditory(wave) => {
                if wave.is_empty() {
                    return Err(Error::EmptyPayload("auditory reference is empty".into()));
                }
                let lat = self.encode_audio(wave, 1.0)?;
                Ok(ReferenceTokens {
                    tokens: self.project_audio(&lat.data),
                    modality: Modality::Auditory,
                    slot: reference.identity_slot,
                    patch_grid: None,
                    image_grid: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[99]);
        Tensor::from_fn(shape, |_| rng::normal(&mut r))
    }

    #[test]
    fn zero_frames_encode_to_zero() {
        let codec = Codec::new(CodecConfig::default());
        let lat = codec.encode_video(&Tensor::zeros(&[2, 8, 8, 3]), 8.0).unwrap();
        assert!(lat.data.data().iter().all(|&x| x == 0.0));
        let alat = codec.encode_audio(&Tensor::zeros(&[32, 1]), 16.0).unwrap();
        assert!(alat.data.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn video_latent_shape() {
        let codec = Codec::new(CodecConfig::default());
        let lat = codec.encode_video(&noise(&[1, 8, 8, 3], 1), 8.0).unwrap();
        assert_eq!(lat.data.shape(), &[1, 2, 2, 48]);
    }

    #[test]
    fn audio_latent_shape() {
        let codec = Codec::new(CodecConfig::default());
        let lat = codec.encode_audio(&noise(&[160, 1], 2), 16.0).unwrap();
        assert_eq!(lat.data.shape(), &[10, 16]);
    }

    #[test]
    fn indivisible_inputs_are_rejected() {
        let codec = Codec::new(CodecConfig::default());
        assert!(matches!(
            codec.encode_video(&Tensor::zeros(&[1, 6, 8, 3]), 8.0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            codec.encode_audio(&Tensor::zeros(&[17, 1]), 16.0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn reference_token_counts() {
        let codec = Codec::new(CodecConfig::default());
        let one = ReferenceSignal {
            payload: ReferencePayload::Visual(vec![noise(&[8, 8, 3], 3)]),
            identity_slot: 1,
        };
        let toks = codec.tokenize_reference(&one).unwrap();
        assert_eq!(toks.tokens.shape(), &[4, 64]);

        let four = ReferenceSignal {
            payload: ReferencePayload::Visual((0..4).map(|i| noise(&[8, 8, 3], 10 + i)).collect()),
            identity_slot: 1,
        };
        let toks = codec.tokenize_reference(&four).unwrap();
        assert_eq!(toks.tokens.rows(), 16);
        assert_eq!(toks.image_grid, Some((2, 2)));
        assert_eq!(toks.patch_grid, Some((4, 4)));

        let audio = ReferenceSignal {
            payload: ReferencePayload::Auditory(noise(&[160, 1], 4)),
            identity_slot: 2,
        };
        assert_eq!(codec.tokenize_reference(&audio).unwrap().tokens.rows(), 10);

        let empty = ReferenceSignal {
            payload: ReferencePayload::Visual(vec![]),
            identity_slot: 1,
        };
        assert!(matches!(codec.tokenize_reference(&empty), Err(Error::EmptyPayload(_))));
    }

    #[test]
    fn projection_preserves_norms() {
        let codec = Codec::new(CodecConfig::default());
        let x = noise(&[5, 48], 5);
        let y = codec.project_video(&x);
        for i in 0..5 {
            let a: f64 = x.row(i).iter().map(|v| v * v).sum();
            let b: f64 = y.row(i).iter().map(|v| v * v).sum();
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn video_roundtrip_and_shape(t in 1usize..4, gh in 1usize..4, gw in 1usize..4, seed in any::<u64>()) {
            let codec = Codec::new(CodecConfig::default());
            let x = noise(&[t, gh * 4, gw * 4, 3], seed);
            let lat = codec.encode_video(&x, 8.0).unwrap();
            prop_assert_eq!(lat.data.shape(), &[t, gh, gw, 48]);
            let back = codec.decode_video(&lat).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-5);
        }

        #[test]
        fn audio_roundtrip(frames in 1usize..12, seed in any::<u64>()) {
            let codec = Codec::new(CodecConfig::default());
            let x = noise(&[frames * 16, 1], seed);
            let lat = codec.encode_audio(&x, 16.0).unwrap();
            prop_assert_eq!(lat.data.shape(), &[frames, 16]);
            prop_assert!(codec.decode_audio(&lat).unwrap().max_abs_diff(&x) < 1e-5);
        }

        #[test]
        fn codecs_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let codec = Codec::new(CodecConfig::default());
            let x = noise(&[2, 8, 4, 3], seed);
            let y = noise(&[2, 8, 4, 3], seed.wrapping_add(1));
            let mix = x.zip_map(&y, |p, q| a * p + b * q);
            let lhs = codec.encode_video(&mix, 8.0).unwrap().data;
            let ex = codec.encode_video(&x, 8.0).unwrap().data;
            let ey = codec.encode_video(&y, 8.0).unwrap().data;
            let rhs = ex.zip_map(&ey, |p, q| a * p + b * q);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);

            let wx = noise(&[48, 1], seed);
            let wy = noise(&[48, 1], seed.wrapping_add(2));
            let wmix = wx.zip_map(&wy, |p, q| a * p + b * q);
            let lhs = codec.encode_audio(&wmix, 16.0).unwrap().data;
            let rhs = codec.encode_audio(&wx, 16.0).unwrap().data
                .zip_map(&codec.encode_audio(&wy, 16.0).unwrap().data, |p, q| a * p + b * q);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }
    }
}
