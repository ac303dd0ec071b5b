//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! global seed and a path of stream indices, so results never depend on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of stream tags.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags, so call sites don't collide by accident.
pub mod tag {
    pub const CODEC: u64 = 1;
    pub const REGISTRY: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const RENDER: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const WORLD: u64 = 9;
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random matrix with orthonormal columns, `rows × cols` (`rows ≥ cols`), row-major.
pub fn orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows >= cols, "orthonormal needs rows >= cols");
    let m = nalgebra::DMatrix::<f64>::from_fn(rows, cols, |_, _| normal(rng));
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign-fix so the factorization is unique.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = q[(i, j)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_path_sensitive() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_eq!(derive(7, &[1]), derive(7, &[1]));
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = stream(3, &[tag::CODEC]);
        let q = orthonormal(&mut rng, 7, 4);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..7).map(|i| q[i * 4 + a] * q[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }
}
