//! Identity embeddings, multi-view packing, structured positions and 3-D rotary
//! embeddings.
//!
//! Reference tokens of identity `k` receive the same learnable vector in both
//! towers and are placed on virtual frames past the generation window: visual
//! references of slot `k` at `base + (k − 1)`, auditory references of slot `k`
//! starting at `base + (k − 1)·L`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::RotaryTable;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbeddingTable {
    /// `[K_max, D]`; row `k − 1` is the embedding of slot `k`.
    pub table: Tensor<f64>,
}

impl IdentityEmbeddingTable {
    pub fn k_max(&self) -> usize {
        self.table.rows()
    }

    pub fn embedding(&self, slot: usize) -> Result<&[f64]> {
        if slot == 0 || slot > self.k_max() {
            return Err(Error::SlotOutOfRange {
                slot,
                max: self.k_max(),
            });
        }
        Ok(self.table.row(slot - 1))
    }

    /// Adds the slot's embedding to every row of `tokens`.
    pub fn inject(&self, tokens: &Tensor<f64>, slot: usize) -> Result<Tensor<f64>> {
        let e = self.embedding(slot)?;
        if tokens.cols() != e.len() {
            return Err(Error::DimensionMismatch(format!(
                "tokens of width {} vs embedding width {}",
                tokens.cols(),
                e.len()
            )));
        }
        let mut out = tokens.clone();
        for i in 0..out.rows() {
            for (x, &v) in out.row_mut(i).iter_mut().zip(e) {
                *x += v;
            }
        }
        Ok(out)
    }
}

/// Near-square grid for `n` images: `cols = ⌈√n⌉`, `rows = ⌈n / cols⌉`.
pub fn grid_shape(n: usize) -> (usize, usize) {
    assert!(n >= 1);
    let mut cols = (n as f64).sqrt().ceil() as usize;
    // Guard against floating-point rounding of perfect squares.
    while cols * cols < n {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= n {
        cols -= 1;
    }
    (n.div_ceil(cols), cols)
}

/// Packs `[H, W, C]` images row-major into a near-square canvas; unused cells are zero.
pub fn pack_multiview(images: &[Tensor<f64>]) -> Result<(Tensor<f64>, (usize, usize))> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyPayload("no images to pack".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::DimensionMismatch(format!("images must be [H, W, C], got {s:?}")));
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != s.as_slice() {
            return Err(Error::NonUniformImages(format!(
                "image {i} has shape {:?}, expected {s:?}",
                img.shape()
            )));
        }
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (rows, cols) = grid_shape(images.len());
    let (ch, cw) = (rows * h, cols * w);
    let mut canvas = Tensor::zeros(&[ch, cw, c]);
    for (n, img) in images.iter().enumerate() {
        let (gr, gc) = (n / cols, n % cols);
        for y in 0..h {
            let src = &img.data()[y * w * c..(y + 1) * w * c];
            let dst = ((gr * h + y) * cw + gc * w) * c;
            canvas.data_mut()[dst..dst + w * c].copy_from_slice(src);
        }
    }
    Ok((canvas, (rows, cols)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position3D {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Position3D {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Noisy,
}

impl Role {
    pub fn is_ref(self) -> bool {
        self == Role::Reference
    }
}

/// One tower's token order: references first, then noisy latents.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub roles: Vec<Role>,
    pub positions: Vec<Position3D>,
    pub slots: Vec<Option<usize>>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn ref_count(&self) -> usize {
        self.roles.iter().filter(|r| r.is_ref()).count()
    }

    /// One line per token: `index role slot t h w` (slot `-` for noisy tokens).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, ((role, pos), slot)) in self.roles.iter().zip(&self.positions).zip(&self.slots).enumerate() {
            let role = match role {
                Role::Reference => "reference",
                Role::Noisy => "noisy",
            };
            let slot = slot.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{i} {role} {slot} {} {} {}", pos.t, pos.h, pos.w);
        }
        out
    }
}

/// A token sequence: `[L, D]` matrix plus its layout.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor<f64>,
    pub layout: TokenLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionConfig {
    /// Maximum auditory reference length `L`, in steps of the aligned timeline.
    pub max_audio_ref: usize,
    pub k_max: usize,
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self {
            max_audio_ref: 16,
            k_max: 4,
        }
    }
}

/// What is being generated and which references condition it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneLayout {
    /// `(frames, patch rows, patch cols)` of the noisy video latent.
    pub video: Option<(usize, usize, usize)>,
    /// `(steps, σ)`: audio latent steps and `fps_latent / tokens_per_second`.
    pub audio: Option<(usize, f64)>,
    /// `(slot, patch rows, patch cols)` per visual reference canvas.
    pub visual_refs: Vec<(usize, usize, usize)>,
    /// `(slot, token count)` per auditory reference.
    pub audio_refs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedPositions {
    /// First virtual frame: one past the last noisy temporal index of either modality.
    pub base: usize,
    pub video: TokenLayout,
    pub audio: TokenLayout,
}

pub fn audio_time(step: usize, sigma: f64) -> usize {
    (step as f64 * sigma).round() as usize
}

pub fn assign_positions(layout: &SceneLayout, cfg: &PositionConfig) -> Result<AssignedPositions> {
    let check_slot = |slot: usize| {
        if slot == 0 || slot > cfg.k_max {
            Err(Error::SlotOutOfRange { slot, max: cfg.k_max })
        } else {
            Ok(())
        }
    };
    let video_end = layout.video.map(|(f, _, _)| f).unwrap_or(0);
    let audio_end = layout
        .audio
        .map(|(s, sigma)| if s == 0 { 0 } else { audio_time(s - 1, sigma) + 1 })
        .unwrap_or(0);
    let base = video_end.max(audio_end);

    let mut video = TokenLayout {
        roles: vec![],
        positions: vec![],
        slots: vec![],
    };
    for &(slot, rows, cols) in &layout.visual_refs {
        check_slot(slot)?;
        for h in 0..rows {
            for w in 0..cols {
                video.roles.push(Role::Reference);
                video.positions.push(Position3D::new(base + slot - 1, h, w));
                video.slots.push(Some(slot));
            }
        }
    }
    if let Some((frames, rows, cols)) = layout.video {
        for f in 0..frames {
            for h in 0..rows {
                for w in 0..cols {
                    video.roles.push(Role::Noisy);
                    video.positions.push(Position3D::new(f, h, w));
                    video.slots.push(None);
                }
            }
        }
    }

    let mut audio = TokenLayout {
        roles: vec![],
        positions: vec![],
        slots: vec![],
    };
    for &(slot, len) in &layout.audio_refs {
        check_slot(slot)?;
        if len > cfg.max_audio_ref {
            return Err(Error::ReferenceTooLong {
                len,
                max: cfg.max_audio_ref,
            });
        }
        for j in 0..len {
            audio.roles.push(Role::Reference);
            audio
                .positions
                .push(Position3D::new(base + (slot - 1) * cfg.max_audio_ref + j, 0, 0));
            audio.slots.push(Some(slot));
        }
    }
    if let Some((steps, sigma)) = layout.audio {
        for s in 0..steps {
            audio.roles.push(Role::Noisy);
            audio.positions.push(Position3D::new(audio_time(s, sigma), 0, 0));
            audio.slots.push(None);
        }
    }
    Ok(AssignedPositions { base, video, audio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    /// Relative channel shares of the (t, h, w) axes.
    pub split: [usize; 3],
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            base: 10_000.0,
            split: [2, 1, 1],
        }
    }
}

impl RopeConfig {
    /// Channel counts `(d_t, d_h, d_w)` for one head.
    pub fn parts(&self, head_dim: usize) -> Result<[usize; 3]> {
        let total: usize = self.split.iter().sum();
        let err = || Error::IndivisibleHead {
            head_dim,
            parts: self.split,
        };
        if total == 0 || !head_dim.is_multiple_of(total) {
            return Err(err());
        }
        let unit = head_dim / total;
        let parts = [self.split[0] * unit, self.split[1] * unit, self.split[2] * unit];
        if parts.iter().any(|p| p % 2 != 0) {
            return Err(err());
        }
        Ok(parts)
    }

    /// Per-pair angles for one position, covering one head (`head_dim / 2` entries).
    fn angles(&self, pos: Position3D, parts: [usize; 3]) -> Vec<f64> {
        let coords = [pos.t as f64, pos.h as f64, pos.w as f64];
        let mut out = Vec::with_capacity(parts.iter().sum::<usize>() / 2);
        for (axis, &d) in parts.iter().enumerate() {
            for i in 0..d / 2 {
                let theta = self.base.powf(-2.0 * i as f64 / d as f64);
                out.push(theta * coords[axis]);
            }
        }
        out
    }

    /// Rotation table for `[L, heads·head_dim]` activations.
    pub fn table<R: Real>(
        &self,
        positions: &[Position3D],
        head_dim: usize,
        heads: usize,
    ) -> Result<Arc<RotaryTable<R>>> {
        let parts = self.parts(head_dim)?;
        let half = head_dim / 2;
        let mut cos = Tensor::zeros(&[positions.len(), half * heads]);
        let mut sin = Tensor::zeros(&[positions.len(), half * heads]);
        for (i, &p) in positions.iter().enumerate() {
            let a = self.angles(p, parts);
            for h in 0..heads {
                for (j, &ang) in a.iter().enumerate() {
                    cos.row_mut(i)[h * half + j] = R::lit(ang.cos());
                    sin.row_mut(i)[h * half + j] = R::lit(ang.sin());
                }
            }
        }
        Ok(Arc::new(RotaryTable { cos, sin }))
    }
}

/// Rotates each row of `x` (`[L, D_head]`) by its position.
pub fn apply_rope(x: &Tensor<f64>, positions: &[Position3D], cfg: &RopeConfig) -> Result<Tensor<f64>> {
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let table = cfg.table::<f64>(positions, x.cols(), 1)?;
    let mut out = x.clone();
    let c = x.cols();
    for i in 0..x.rows() {
        let (cr, sr) = (table.cos.row(i), table.sin.row(i));
        let row = out.row_mut(i);
        for p in 0..c / 2 {
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * cr[p] - b * sr[p];
            row[2 * p + 1] = a * sr[p] + b * cr[p];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// Enumerates every grid with enough cells: shortest longer side, then least area, rows ≤ cols.
    fn grid_oracle(n: usize) -> (usize, usize) {
        let mut best = (usize::MAX, usize::MAX, 0, 0);
        for r in 1..=n {
            for c in r..=n {
                if r * c >= n && (c, r * c) < (best.0, best.1) {
                    best = (c, r * c, r, c);
                }
            }
        }
        (best.2, best.3)
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[1]);
        Tensor::from_fn(&[h, w, 1], |_| rng::normal(&mut r))
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(4), (2, 2));
        assert_eq!(grid_shape(5), (2, 3));
        assert_eq!(grid_oracle(4), (2, 2));
        assert_eq!(grid_oracle(5), (2, 3));
    }

    #[test]
    fn grid_matches_oracle_area() {
        for n in 1..=64 {
            let (r, c) = grid_shape(n);
            let (or, oc) = grid_oracle(n);
            assert!(r * c >= n);
            assert!(r.abs_diff(c) <= 1, "n={n}");
            assert_eq!((r, c), (or, oc), "n={n}");
        }
    }

    #[test]
    fn singleton_pack_is_identity() {
        let img = image(1, 8, 8);
        let (canvas, grid) = pack_multiview(std::slice::from_ref(&img)).unwrap();
        assert_eq!(grid, (1, 1));
        assert_eq!(canvas, img);
    }

    #[test]
    fn five_images_leave_one_zero_cell() {
        let imgs: Vec<_> = (0..5).map(|i| image(i, 4, 4)).collect();
        let (canvas, grid) = pack_multiview(&imgs).unwrap();
        assert_eq!(grid, (2, 3));
        assert_eq!(canvas.shape(), &[8, 12, 1]);
        for y in 4..8 {
            for x in 8..12 {
                assert_eq!(canvas.data()[y * 12 + x], 0.0);
            }
        }
        // image 3 sits at row 1, col 0
        assert_eq!(canvas.data()[4 * 12], imgs[3].data()[0]);
    }

    #[test]
    fn non_uniform_images_rejected() {
        let r = pack_multiview(&[image(1, 4, 4), image(2, 4, 8)]);
        assert!(matches!(r, Err(Error::NonUniformImages(_))));
    }

    #[test]
    fn injection_examples() {
        let mut table = IdentityEmbeddingTable {
            table: Tensor::zeros(&[4, 3]),
        };
        let r = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(table.inject(&r, 1).unwrap(), r);
        table.table.row_mut(1).copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = table.inject(&r, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out.row(i)[j] - r.row(i)[j], table.table.row(1)[j]);
            }
        }
        assert!(matches!(
            table.inject(&r, 5),
            Err(Error::SlotOutOfRange { slot: 5, max: 4 })
        ));
        assert!(table.inject(&r, 0).is_err());
    }

    #[test]
    fn shared_offset_across_modalities() {
        let mut r = rng::stream(5, &[2]);
        let table = IdentityEmbeddingTable {
            table: Tensor::from_fn(&[4, 6], |_| rng::normal(&mut r)),
        };
        let vis = Tensor::from_fn(&[4, 6], |_| rng::normal(&mut r));
        let aud = Tensor::from_fn(&[3, 6], |_| rng::normal(&mut r));
        let dv = table.inject(&vis, 2).unwrap();
        let da = table.inject(&aud, 2).unwrap();
        for j in 0..6 {
            let ov = dv.row(0)[j] - vis.row(0)[j];
            let oa = da.row(0)[j] - aud.row(0)[j];
            assert_eq!(
                ov.to_bits(),
                (table.table.row(1)[j] + vis.row(0)[j] - vis.row(0)[j]).to_bits()
            );
            assert!((ov - oa).abs() < 1e-12);
        }
    }

    #[test]
    fn virtual_frames_for_visual_refs() {
        let cfg = PositionConfig::default();
        let one = SceneLayout {
            video: Some((8, 2, 4)),
            visual_refs: vec![(1, 2, 2)],
            ..Default::default()
        };
        let p = assign_positions(&one, &cfg).unwrap();
        assert_eq!(p.base, 8);
        assert!(p.video.positions[..4].iter().all(|q| q.t == 8));

        let two = SceneLayout {
            video: Some((8, 2, 4)),
            visual_refs: vec![(1, 2, 2), (2, 2, 2)],
            ..Default::default()
        };
        let p = assign_positions(&two, &cfg).unwrap();
        assert!(p.video.positions[4..8].iter().all(|q| q.t == 9));
        assert_eq!(p.video.positions[8], Position3D::new(0, 0, 0));
        assert_eq!(p.video.positions[8 + 8 * 3 + 7], Position3D::new(3, 1, 3));
    }

    #[test]
    fn audio_refs_follow_slot_blocks() {
        let cfg = PositionConfig {
            max_audio_ref: 4,
            k_max: 4,
        };
        let layout = SceneLayout {
            video: Some((8, 1, 1)),
            audio: Some((32, 0.25)),
            visual_refs: vec![(1, 1, 1), (2, 1, 1)],
            audio_refs: vec![(1, 4), (2, 4)],
        };
        let p = assign_positions(&layout, &cfg).unwrap();
        // round(31 · 0.25) = 8, so the shared base moves to 9.
        assert_eq!(p.base, 9);
        let two: Vec<usize> = p.audio.positions[4..8].iter().map(|q| q.t).collect();
        assert_eq!(two, vec![13, 14, 15, 16]);
        assert_eq!(p.audio.positions[0].t, p.video.positions[0].t);

        // With the base pinned at 8 the slot-2 block is {12..15}.
        let layout8 = SceneLayout {
            audio: Some((32, 0.24)),
            ..layout.clone()
        };
        let p = assign_positions(&layout8, &cfg).unwrap();
        assert_eq!(p.base, 8);
        let two: Vec<usize> = p.audio.positions[4..8].iter().map(|q| q.t).collect();
        assert_eq!(two, vec![12, 13, 14, 15]);
        assert!(p.audio.positions[4..8].iter().all(|q| q.h == 0 && q.w == 0));
        // noisy audio positions are scaled
        assert_eq!(p.audio.positions[8 + 4].t, 1);
    }

    #[test]
    fn position_errors() {
        let cfg = PositionConfig {
            max_audio_ref: 4,
            k_max: 2,
        };
        let bad_slot = SceneLayout {
            visual_refs: vec![(3, 1, 1)],
            ..Default::default()
        };
        assert!(matches!(
            assign_positions(&bad_slot, &cfg),
            Err(Error::SlotOutOfRange { .. })
        ));
        let too_long = SceneLayout {
            audio_refs: vec![(1, 5)],
            ..Default::default()
        };
        assert!(matches!(
            assign_positions(&too_long, &cfg),
            Err(Error::ReferenceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn dump_format() {
        let layout = SceneLayout {
            video: Some((1, 1, 2)),
            visual_refs: vec![(1, 1, 1)],
            ..Default::default()
        };
        let p = assign_positions(&layout, &PositionConfig::default()).unwrap();
        assert_eq!(
            p.video.dump(),
            "0 reference 1 1 0 0\n1 noisy - 0 0 0\n2 noisy - 0 0 1\n"
        );
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let mut r = rng::stream(1, &[3]);
        let x = Tensor::from_fn(&[3, 16], |_| rng::normal(&mut r));
        let pos = vec![Position3D::new(0, 0, 0); 3];
        let y = apply_rope(&x, &pos, &RopeConfig::default()).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn rope_rejects_bad_head_dim() {
        let x = Tensor::zeros(&[1, 12]);
        let pos = vec![Position3D::new(1, 1, 1)];
        assert!(matches!(
            apply_rope(&x, &pos, &RopeConfig::default()),
            Err(Error::IndivisibleHead { .. })
        ));
    }

    fn arb_positions(n: usize) -> impl Strategy<Value = Vec<Position3D>> {
        proptest::collection::vec((0usize..20, 0usize..6, 0usize..6), n)
            .prop_map(|v| v.into_iter().map(|(t, h, w)| Position3D::new(t, h, w)).collect())
    }

    fn logits(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        q.matmul_t(false, k, true)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn rope_logits_depend_on_differences(
            pos in arb_positions(5),
            shift in (0usize..10, 0usize..4, 0usize..4),
            dh in prop_oneof![Just(8usize), Just(16), Just(32)],
            seed in any::<u64>(),
        ) {
            let cfg = RopeConfig::default();
            let mut r = rng::stream(seed, &[4]);
            let q = Tensor::from_fn(&[5, dh], |_| rng::normal(&mut r));
            let k = Tensor::from_fn(&[5, dh], |_| rng::normal(&mut r));
            let shifted: Vec<_> = pos
                .iter()
                .map(|p| Position3D::new(p.t + shift.0, p.h + shift.1, p.w + shift.2))
                .collect();
            let a = logits(&apply_rope(&q, &pos, &cfg).unwrap(), &apply_rope(&k, &pos, &cfg).unwrap());
            let b = logits(&apply_rope(&q, &shifted, &cfg).unwrap(), &apply_rope(&k, &shifted, &cfg).unwrap());
            prop_assert!(a.max_abs_diff(&b) < 1e-5 * (1.0 + a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))));
        }

        #[test]
        fn rope_preserves_norms(pos in arb_positions(4), seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[5]);
            let x = Tensor::from_fn(&[4, 16], |_| rng::normal(&mut r));
            let y = apply_rope(&x, &pos, &RopeConfig::default()).unwrap();
            for i in 0..4 {
                let a: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let b: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn packing_geometry(n in 1usize..=16) {
            let (r, c) = grid_shape(n);
            prop_assert!(r * c >= n);
            prop_assert!(r.abs_diff(c) <= 1);
            // A cap of 16 views on 2×2-patch images stays within an 8×8 patch grid.
            prop_assert!(r * 2 <= 8 && c * 2 <= 8);
        }

        #[test]
        fn positions_are_deterministic_and_anchors_separate(
            k in 1usize..=4,
            frames in 1usize..6,
            steps in 1usize..20,
            views in 1usize..=4,
        ) {
            let cfg = PositionConfig { max_audio_ref: 6, k_max: 4 };
            let (gr, gc) = grid_shape(views);
            let layout = SceneLayout {
                video: Some((frames, 2, 2)),
                audio: Some((steps, 0.25)),
                visual_refs: (1..=k).map(|s| (s, gr * 2, gc * 2)).collect(),
                audio_refs: (1..=k).map(|s| (s, 1 + s % 6)).collect(),
            };
            let a = assign_positions(&layout, &cfg).unwrap();
            let b = assign_positions(&layout, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            for tower in [&a.video, &a.audio] {
                let refs: Vec<_> = (0..tower.len()).filter(|&i| tower.roles[i].is_ref()).collect();
                for &i in &refs {
                    for &j in &refs {
                        if tower.slots[i] != tower.slots[j] {
                            prop_assert_ne!(tower.positions[i], tower.positions[j]);
                        }
                    }
                    // references never collide with the generation window
                    prop_assert!(tower.positions[i].t >= a.base);
                }
                for i in 0..tower.len() {
                    if !tower.roles[i].is_ref() {
                        prop_assert!(tower.positions[i].t < a.base);
                    }
                }
            }
        }
    }
}
