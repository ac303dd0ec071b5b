//! Linear flow-matching paths, the joint two-modality loss and an Euler sampler.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x0: Tensor<f64>,
    pub x1: Tensor<f64>,
    pub xt: Tensor<f64>,
    pub u_target: Tensor<f64>,
}

/// `x_t = (1 − t)·x_0 + t·x_1`, `u = x_1 − x_0`, for a given noise draw.
pub fn flow_sample_with_noise(x0: &Tensor<f64>, x1: Tensor<f64>, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::TimestepOutOfRange(t));
    }
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "clean {:?} vs noise {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let xt = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b);
    let u_target = x1.zip_map(x0, |b, a| b - a);
    Ok(FlowSample {
        t,
        x0: x0.clone(),
        x1,
        xt,
        u_target,
    })
}

pub fn make_flow_sample(x0: &Tensor<f64>, t: f64, rng: &mut Rng) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::TimestepOutOfRange(t));
    }
    let x1 = Tensor::from_fn(x0.shape(), |_| rng::normal(rng));
    flow_sample_with_noise(x0, x1, t)
}

/// Uniform on `[0, 1]`.
pub fn sample_timestep(rng: &mut Rng) -> f64 {
    rng.random_range(0.0..=1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossReport {
    pub loss_v: f64,
    pub loss_a: f64,
    pub lambda: f64,
    pub total: f64,
}

fn mse(pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean squared error per modality over noisy-token elements; a missing
/// modality contributes zero.
pub fn joint_loss(
    pred_v: Option<&Tensor<f64>>,
    pred_a: Option<&Tensor<f64>>,
    target_v: Option<&Tensor<f64>>,
    target_a: Option<&Tensor<f64>>,
    lambda: f64,
) -> Result<JointLossReport> {
    let part = |p: Option<&Tensor<f64>>, t: Option<&Tensor<f64>>| match (p, t) {
        (Some(p), Some(t)) => mse(p, t),
        (None, None) => Ok(0.0),
        _ => Err(Error::Shape("prediction/target presence differs".into())),
    };
    let loss_v = part(pred_v, target_v)?;
    let loss_a = part(pred_a, target_a)?;
    Ok(JointLossReport {
        loss_v,
        loss_a,
        lambda,
        total: loss_v + lambda * loss_a,
    })
}

/// Analytic gradient of the joint loss with respect to each prediction.
pub fn joint_loss_grad(
    pred_v: &Tensor<f64>,
    pred_a: &Tensor<f64>,
    target_v: &Tensor<f64>,
    target_a: &Tensor<f64>,
    lambda: f64,
) -> (Tensor<f64>, Tensor<f64>) {
    let nv = pred_v.len().max(1) as f64;
    let na = pred_a.len().max(1) as f64;
    (
        pred_v.zip_map(target_v, |p, t| 2.0 * (p - t) / nv),
        pred_a.zip_map(target_a, |p, t| lambda * 2.0 * (p - t) / na),
    )
}

/// Joint state of both modalities during sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub video: Option<Tensor<f64>>,
    pub audio: Option<Tensor<f64>>,
}

/// A velocity field over the joint state; references and conditions are
/// bound inside the implementor.
pub trait VelocityModel {
    fn velocity(&self, x: &JointState, t: f64) -> Result<JointState>;

    /// Condition-free prediction used by guidance; `None` when unsupported.
    fn unconditional_velocity(&self, _x: &JointState, _t: f64) -> Option<Result<JointState>> {
        None
    }
}

impl<F> VelocityModel for F
where
    F: Fn(&JointState, f64) -> Result<JointState>,
{
    fn velocity(&self, x: &JointState, t: f64) -> Result<JointState> {
        self(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    /// Classifier-free guidance scale; `None` disables guidance.
    pub guidance: Option<f64>,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: None,
        }
    }
}

fn axpy(x: &mut Option<Tensor<f64>>, h: f64, u: &Option<Tensor<f64>>) -> Result<()> {
    match (x.as_mut(), u) {
        (Some(x), Some(u)) => {
            if x.shape() != u.shape() {
                return Err(Error::Shape(format!(
                    "velocity {:?} for state {:?}",
                    u.shape(),
                    x.shape()
                )));
            }
            for (a, b) in x.data_mut().iter_mut().zip(u.data()) {
                *a -= h * b;
            }
            Ok(())
        }
        (None, _) => Ok(()),
        (Some(_), None) => Err(Error::Shape("model returned no velocity for a modality".into())),
    }
}

fn guide(c: Option<Tensor<f64>>, u: Option<Tensor<f64>>, s: f64) -> Option<Tensor<f64>> {
    match (c, u) {
        (Some(c), Some(u)) => Some(u.zip_map(&c, |u, c| u + s * (c - u))),
        (c, _) => c,
    }
}

/// Euler integration from `t = 1` (Gaussian noise) to `t = 0` with uniform
/// steps, advancing both modalities together. `shapes` gives the latent shape
/// of each modality to generate.
pub fn sample(
    model: &impl VelocityModel,
    shapes: (Option<&[usize]>, Option<&[usize]>),
    opts: &SamplerOptions,
    rng: &mut Rng,
) -> Result<JointState> {
    if opts.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let mut draw = |s: Option<&[usize]>| s.map(|s| Tensor::from_fn(s, |_| rng::normal(rng)));
    let video = draw(shapes.0);
    let audio = draw(shapes.1);
    integrate(model, JointState { video, audio }, opts)
}

/// Euler integration from a given state at `t = 1`.
pub fn integrate(model: &impl VelocityModel, mut x: JointState, opts: &SamplerOptions) -> Result<JointState> {
    let h = 1.0 / opts.steps as f64;
    for i in 0..opts.steps {
        let t = 1.0 - i as f64 * h;
        let mut u = model.velocity(&x, t)?;
        if let Some(s) = opts.guidance {
            let un = model
                .unconditional_velocity(&x, t)
                .ok_or_else(|| Error::Config("guidance requested but the model has no unconditional path".into()))??;
            u = JointState {
                video: guide(u.video, un.video, s),
                audio: guide(u.audio, un.audio, s),
            };
        }
        axpy(&mut x.video, h, &u.video)?;
        axpy(&mut x.audio, h, &u.audio)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = stream(seed, &[11]);
        Tensor::from_fn(shape, |_| rng::normal(&mut r))
    }

    #[test]
    fn interpolation_endpoints() {
        let x0 = randn(&[3, 4], 1);
        let mut r = stream(2, &[1]);
        let s0 = make_flow_sample(&x0, 0.0, &mut r).unwrap();
        assert_eq!(s0.xt, x0);
        let s1 = make_flow_sample(&x0, 1.0, &mut r).unwrap();
        assert_eq!(s1.xt, s1.x1);
        assert!(matches!(
            make_flow_sample(&x0, 1.1, &mut r),
            Err(Error::TimestepOutOfRange(_))
        ));
        assert!(make_flow_sample(&x0, -0.1, &mut r).is_err());
    }

    #[test]
    fn midpoint_example() {
        let e = randn(&[2, 3], 3);
        let s = flow_sample_with_noise(&Tensor::zeros(&[2, 3]), e.clone(), 0.5).unwrap();
        assert!(s.xt.max_abs_diff(&e.map(|x| 0.5 * x)) < 1e-15);
        assert_eq!(s.u_target, e);
    }

    #[test]
    fn loss_examples() {
        let tv = randn(&[4, 3], 4);
        let ta = randn(&[5, 2], 5);
        let r = joint_loss(Some(&tv), Some(&ta), Some(&tv), Some(&ta), 1.0).unwrap();
        assert_eq!(r.total, 0.0);
        let pv = tv.map(|x| x + 1.0);
        let pa = ta.map(|x| x + 1.0);
        let r = joint_loss(Some(&pv), Some(&pa), Some(&tv), Some(&ta), 1.0).unwrap();
        assert!((r.loss_v - 1.0).abs() < 1e-12 && (r.loss_a - 1.0).abs() < 1e-12);
        assert!((r.total - 2.0).abs() < 1e-12);
        let r = joint_loss(Some(&pv), Some(&pa), Some(&tv), Some(&ta), 0.0).unwrap();
        assert_eq!(r.total, r.loss_v);
        assert!(joint_loss(Some(&pv), None, Some(&ta), None, 1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_tape() {
        let (pv, pa, tv, ta) = (
            randn(&[4, 3], 6),
            randn(&[2, 5], 7),
            randn(&[4, 3], 8),
            randn(&[2, 5], 9),
        );
        let lambda = 0.7;
        let (gv, ga) = joint_loss_grad(&pv, &pa, &tv, &ta, lambda);
        let mut g = Graph::<f64>::new();
        let (v, a) = (g.param(pv.clone()), g.param(pa.clone()));
        let lv = g.mse(v, &tv);
        let la = g.mse(a, &ta);
        let la = g.scale(la, lambda);
        let tot = g.add(lv, la);
        let grads = g.backward(tot);
        assert!(grads.get(v).unwrap().max_abs_diff(&gv) < 1e-6);
        assert!(grads.get(a).unwrap().max_abs_diff(&ga) < 1e-6);
        let r = joint_loss(Some(&pv), Some(&pa), Some(&tv), Some(&ta), lambda).unwrap();
        assert!((r.total - g.value(tot).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_predictor_loss_matches_monte_carlo() {
        let a0 = randn(&[6, 4], 10);
        let n = a0.len() as f64;
        let expected = (n + a0.sq_norm()) / n;
        let mut r = stream(11, &[2]);
        let zero = Tensor::zeros(a0.shape());
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let t = sample_timestep(&mut r);
                let s = make_flow_sample(&a0, t, &mut r).unwrap();
                joint_loss(None, Some(&zero), None, Some(&s.u_target), 1.0)
                    .unwrap()
                    .loss_a
            })
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (draws.len() - 1) as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!((m - expected).abs() < 3.0 * se, "mc {m} vs {expected} (se {se})");
    }

    #[test]
    fn timestep_mean() {
        let mut r = stream(12, &[3]);
        let m = (0..100_000).map(|_| sample_timestep(&mut r)).sum::<f64>() / 1e5;
        assert!((m - 0.5).abs() < 0.01);
    }

    #[test]
    fn zero_field_returns_initial_noise() {
        let zero = |x: &JointState, _t: f64| -> Result<JointState> {
            Ok(JointState {
                video: x.video.as_ref().map(|v| Tensor::zeros(v.shape())),
                audio: x.audio.as_ref().map(|v| Tensor::zeros(v.shape())),
            })
        };
        let opts = SamplerOptions::default();
        let out = sample(&zero, (Some(&[3, 2]), Some(&[4, 2])), &opts, &mut stream(13, &[1])).unwrap();
        let mut r = stream(13, &[1]);
        let v = Tensor::from_fn(&[3, 2], |_| rng::normal(&mut r));
        let a = Tensor::from_fn(&[4, 2], |_| rng::normal(&mut r));
        assert_eq!(out.video.unwrap(), v);
        assert_eq!(out.audio.unwrap(), a);
    }

    #[test]
    fn constant_field_lands_on_endpoint() {
        let x0 = randn(&[3, 3], 14);
        let x1 = randn(&[3, 3], 15);
        let u = x1.zip_map(&x0, |b, a| b - a);
        let field = |_: &JointState, _t: f64| -> Result<JointState> {
            Ok(JointState {
                video: Some(u.clone()),
                audio: None,
            })
        };
        for steps in [1, 100] {
            let start = JointState {
                video: Some(x1.clone()),
                audio: None,
            };
            let out = integrate(&field, start, &SamplerOptions { steps, guidance: None }).unwrap();
            assert!(out.video.unwrap().max_abs_diff(&x0) < 1e-5);
        }
    }

    #[test]
    fn guidance_requires_unconditional_path() {
        let field = |x: &JointState, _t: f64| -> Result<JointState> { Ok(x.clone()) };
        let opts = SamplerOptions {
            steps: 2,
            guidance: Some(2.0),
        };
        assert!(sample(&field, (Some(&[1, 1]), None), &opts, &mut stream(1, &[1])).is_err());
    }

    #[test]
    fn guidance_mixes_predictions() {
        struct Two;
        impl VelocityModel for Two {
            fn velocity(&self, _x: &JointState, _t: f64) -> Result<JointState> {
                Ok(JointState {
                    video: Some(Tensor::full(&[1, 1], 1.0)),
                    audio: None,
                })
            }
            fn unconditional_velocity(&self, _x: &JointState, _t: f64) -> Option<Result<JointState>> {
                Some(Ok(JointState {
                    video: Some(Tensor::full(&[1, 1], 0.0)),
                    audio: None,
                }))
            }
        }
        let start = JointState {
            video: Some(Tensor::zeros(&[1, 1])),
            audio: None,
        };
        let out = integrate(
            &Two,
            start,
            &SamplerOptions {
                steps: 4,
                guidance: Some(3.0),
            },
        )
        .unwrap();
        assert!((out.video.unwrap().data()[0] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic() {
        let field = |x: &JointState, t: f64| -> Result<JointState> {
            Ok(JointState {
                video: x.video.as_ref().map(|v| v.map(|e| e.sin() * t)),
                audio: x.audio.as_ref().map(|v| v.map(|e| e * 0.5)),
            })
        };
        let run = || {
            sample(
                &field,
                (Some(&[4, 3]), Some(&[2, 2])),
                &SamplerOptions::default(),
                &mut stream(21, &[4]),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn flow_sample_invariants(t in 0.0f64..=1.0, seed in any::<u64>()) {
            let x0 = randn(&[3, 2], seed);
            let s = make_flow_sample(&x0, t, &mut stream(seed, &[5])).unwrap();
            for i in 0..x0.len() {
                let (a, b) = (s.x0.data()[i], s.x1.data()[i]);
                prop_assert!((s.xt.data()[i] - ((1.0 - t) * a + t * b)).abs() < 1e-12);
                prop_assert_eq!(s.u_target.data()[i], b - a);
            }
            let r = joint_loss(Some(&s.xt), Some(&s.x1), Some(&s.x0), Some(&s.x0), 0.5).unwrap();
            prop_assert!(r.loss_v >= 0.0 && r.loss_a >= 0.0);
            prop_assert!((r.total - (r.loss_v + 0.5 * r.loss_a)).abs() < 1e-12);
        }
    }
}
