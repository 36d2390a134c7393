//! Flow-matching primitives: the straight-line interpolant between a prior
//! sample and a data sample, the conditional flow-matching regression loss,
//! an explicit Euler ODE sampler and classifier-free guidance.
//!
//! Time runs from `t = 0` (prior) to `t = 1` (data).

use rand::Rng;

use crate::error::{Error, LabResult, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 6.0;

/// One point on the conditional straight path from `x0` to `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub u_target: Tensor,
}

/// `x_t = (1 - t)·x0 + t·x1` with velocity target `x1 - x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> LabResult<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let x_t = x0.zip_map(x1, "interpolate", |a, b| (1.0 - t) * a + t * b)?;
    let u_target = x0.zip_map(x1, "interpolate", |a, b| b - a)?;
    Ok(FlowSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t,
        u_target,
    })
}

/// Unit Gaussian prior sample.
pub fn sample_prior<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Mean squared error between a predicted velocity and the sample's target.
pub fn cfm_loss(v_pred: &Tensor, sample: &FlowSample) -> Result<f64> {
    let diff = v_pred.zip_map(&sample.u_target, "cfm_loss", |p, u| p - u)?;
    Ok(diff.mean_square())
}

/// Differentiable form of [`cfm_loss`].
pub fn cfm_loss_graph(g: &mut Graph, v_pred: Var, u_target: &Tensor) -> Result<Var> {
    if g.shape(v_pred) != u_target.shape() {
        return Err(TensorError::Shape {
            op: "cfm_loss",
            lhs: g.shape(v_pred).to_vec(),
            rhs: u_target.shape().to_vec(),
        });
    }
    let target = g.constant(u_target.clone());
    let diff = g.sub(v_pred, target)?;
    g.mean_square(diff)
}

/// Integrate `dx/dt = velocity(x, t)` from `t = 0` to `t = 1` with `steps`
/// uniform explicit Euler steps: `x_{k+1} = x_k + velocity(x_k, k/steps) / steps`.
pub fn euler_sample<F>(mut velocity: F, x_start: &Tensor, steps: usize) -> LabResult<Tensor>
where
    F: FnMut(&Tensor, f64) -> LabResult<Tensor>,
{
    if steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x_start.clone();
    for k in 0..steps {
        let v = velocity(&x, k as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(TensorError::Shape {
                op: "euler_sample",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            }
            .into());
        }
        if !v.all_finite() {
            return Err(Error::NonFiniteVelocity { step: k });
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Classifier-free guidance: `v_uncond + scale·(v_cond - v_uncond)`.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    v_cond.zip_map(v_uncond, "cfg_velocity", |c, u| u + scale * (c - u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x1 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().x_t, x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().x_t, x1);

        let s = interpolate(&t1(&[0.0]), &t1(&[2.0]), 0.5).unwrap();
        assert_eq!(s.x_t.item(), 1.0);
        assert_eq!(s.u_target.item(), 2.0);
    }

    #[test]
    fn interpolation_rejects_out_of_range_time() {
        let x = t1(&[0.0]);
        assert!(matches!(interpolate(&x, &x, 1.5), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&x, &x, -0.1), Err(Error::Domain(_))));
        assert!(interpolate(&x, &t1(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn cfm_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let x1 = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let s = interpolate(&x0, &x1, 0.3).unwrap();
        assert_eq!(cfm_loss(&s.u_target, &s).unwrap(), 0.0);
        let off = s.u_target.map(|v| v + 1.0);
        assert!((cfm_loss(&off, &s).unwrap() - 1.0).abs() < 1e-15);

        let pred = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..5 {
                let d = pred.at(&[i, j]) - (x1.at(&[i, j]) - x0.at(&[i, j]));
                oracle += d * d;
            }
        }
        oracle /= 20.0;
        assert!((cfm_loss(&pred, &s).unwrap() - oracle).abs() <= 1e-12);

        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let l = cfm_loss_graph(&mut g, p, &s.u_target).unwrap();
        assert!((g.value(l).item() - oracle).abs() <= 1e-12);
        assert!(cfm_loss(&t1(&[1.0]), &s).is_err());
    }

    #[test]
    fn euler_constant_and_zero_fields() {
        let a = t1(&[1.5, -2.0]);
        let c = t1(&[0.25, 3.0]);
        for steps in [1, 7, 50] {
            let out = euler_sample(|_, _| Ok(c.clone()), &a, steps).unwrap();
            for (o, (x, v)) in out.data().iter().zip(a.data().iter().zip(c.data())) {
                assert!((o - (x + v)).abs() < 1e-12);
            }
            let still = euler_sample(|x, _| Ok(Tensor::zeros(x.shape())), &a, steps).unwrap();
            assert_eq!(still, a);
        }
        assert!(euler_sample(|x, _| Ok(x.clone()), &a, 0).is_err());
    }

    #[test]
    fn euler_on_linear_field_matches_closed_form() {
        let out = euler_sample(|x, _| Ok(x.clone()), &Tensor::scalar(1.0), 50).unwrap();
        let closed = (1.0f64 + 1.0 / 50.0).powi(50);
        assert!((out.item() - closed).abs() < 1e-12);
        assert!((out.item() - 2.691588).abs() < 1e-6);
    }

    #[test]
    fn euler_error_is_first_order() {
        let errors: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&n| {
                let x = euler_sample(|x, _| Ok(x.clone()), &Tensor::scalar(1.0), n).unwrap();
                (x.item() - std::f64::consts::E).abs()
            })
            .collect();
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
        }
    }

    #[test]
    fn euler_reports_failing_step() {
        let err = euler_sample(
            |_, t| Ok(Tensor::scalar(if t >= 0.5 { f64::NAN } else { 0.0 })),
            &Tensor::scalar(0.0),
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteVelocity { step: 2 }));
    }

    #[test]
    fn guidance_cases() {
        let c = t1(&[1.0, -2.0]);
        let u = t1(&[0.5, 4.0]);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(&c, &c, 6.0).unwrap(), c);
        assert_eq!(cfg_velocity(&t1(&[1.0]), &t1(&[0.0]), DEFAULT_CFG_SCALE).unwrap().item(), 6.0);
        assert!(cfg_velocity(&c, &t1(&[1.0]), 2.0).is_err());
    }

    proptest! {
        #[test]
        fn target_velocity_is_time_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            t1_ in 0.0f64..=1.0,
            t2_ in 0.0f64..=1.0,
        ) {
            let (x0, x1) = (t1(&a), t1(&b));
            let s1 = interpolate(&x0, &x1, t1_).unwrap();
            let s2 = interpolate(&x0, &x1, t2_).unwrap();
            prop_assert_eq!(s1.u_target, s2.u_target);
        }

        #[test]
        fn cfm_loss_is_nonnegative_and_zero_only_at_target(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            p in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let s = interpolate(&t1(&a), &t1(&b), 0.5).unwrap();
            let pred = t1(&p);
            let loss = cfm_loss(&pred, &s).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, pred == s.u_target);
        }
    }
}
