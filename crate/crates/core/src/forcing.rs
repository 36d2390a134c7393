//! Timestep schedulers for per-element diffusion forcing and cross-modal forcing.
//!
//! Timesteps here are noise levels: `t = 0` is clean, `t = 1` is pure prior.
//! A branch at noise level `t` is interpolated at flow time `1 - t`
//! (see [`flow_time`]).
//!
//! Cross-modal forcing samples a video/audio pair `(t_v, t_a)` per training
//! step. The indicator `d = [t_a < t_v]` marks audio as the cleaner modality;
//! the noisier branch's loss is upweighted by `1 + λ`. A three-phase
//! curriculum moves from tied timesteps, through clamped decoupling with a
//! linearly increasing probability, to fully independent timesteps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LabResult, Result, TensorError};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_DELTA_MAX: f64 = 0.25;
pub const DEFAULT_RATIOS: [f64; 3] = [0.3, 0.4, 0.3];

/// Flow-matching interpolation time for a noise level.
pub fn flow_time(noise_level: f64) -> f64 {
    1.0 - noise_level
}

/// `L` i.i.d. uniform noise levels, one per sequence element.
pub fn sample_df_timesteps<R: Rng + ?Sized>(len: usize, rng: &mut R) -> LabResult<Vec<f64>> {
    if len == 0 {
        return Err(Error::Domain("diffusion forcing needs at least one element".into()));
    }
    Ok((0..len).map(|_| rng.random::<f64>()).collect())
}

/// Heterogeneous-noise objective: sum over elements of each element's mean squared error.
pub fn df_loss(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(TensorError::Shape {
            op: "df_loss",
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| Ok(p.zip_map(t, "df_loss", |a, b| a - b)?.mean_square()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    SyncWarmup,
    IncrementalDecoupling,
    FullIndependence,
}

impl Phase {
    pub fn index(self) -> u8 {
        match self {
            Phase::SyncWarmup => 1,
            Phase::IncrementalDecoupling => 2,
            Phase::FullIndependence => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::SyncWarmup => "SyncWarmup",
            Phase::IncrementalDecoupling => "IncrementalDecoupling",
            Phase::FullIndependence => "FullIndependence",
        }
    }
}

/// Training-time timestep schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// `t_v == t_a` throughout, no reweighting.
    SyncOnly,
    /// Independent timesteps from the first step, reweighting throughout.
    IndepOnly,
    /// The three-phase progressive curriculum.
    ProgForcing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepPair {
    pub t_v: f64,
    pub t_a: f64,
    pub d: u8,
    pub w_v: f64,
    pub w_a: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumState {
    pub step: usize,
    pub total_steps: usize,
    pub phase: Phase,
    pub p_ind: f64,
    pub delta_max: f64,
    pub reweight_active: bool,
}

/// `d = [t_a < t_v]`, `w_v = 1 + λd`, `w_a = 1 + λ(1 - d)`.
pub fn direction_weights(t_v: f64, t_a: f64, lambda: f64) -> (u8, f64, f64) {
    let d = u8::from(t_a < t_v);
    let df = f64::from(d);
    (d, 1.0 + lambda * df, 1.0 + lambda * (1.0 - df))
}

fn validate_ratios(ratios: [f64; 3]) -> LabResult<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("phase ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// First step of phase II and first step of phase III.
pub fn phase_boundaries(total_steps: usize, ratios: [f64; 3]) -> (usize, usize) {
    // The small epsilon keeps exact products such as 0.7·1000 from flooring one step low.
    let total = total_steps as f64;
    let b1 = (ratios[0] * total + 1e-9).floor() as usize;
    let b2 = ((ratios[0] + ratios[1]) * total + 1e-9).floor() as usize;
    (b1.min(total_steps), b2.min(total_steps))
}

/// Curriculum state at `step` of a `total_steps` run.
pub fn curriculum_state(step: usize, total_steps: usize, ratios: [f64; 3], delta_max: f64) -> LabResult<CurriculumState> {
    if total_steps == 0 {
        return Err(Error::Domain("total_steps must be positive".into()));
    }
    if step >= total_steps {
        return Err(Error::Domain(format!("step {step} is not below total_steps {total_steps}")));
    }
    validate_ratios(ratios)?;
    if !(0.0..=1.0).contains(&delta_max) {
        return Err(Error::Config(format!("delta_max {delta_max} outside [0, 1]")));
    }
    let (b1, b2) = phase_boundaries(total_steps, ratios);
    let (phase, p_ind) = if step < b1 {
        (Phase::SyncWarmup, 0.0)
    } else if step < b2 {
        (Phase::IncrementalDecoupling, (step - b1) as f64 / (b2 - b1) as f64)
    } else {
        (Phase::FullIndependence, 1.0)
    };
    Ok(CurriculumState {
        step,
        total_steps,
        phase,
        p_ind,
        delta_max,
        reweight_active: phase != Phase::SyncWarmup,
    })
}

impl Schedule {
    /// The effective curriculum state this schedule uses at `step`.
    pub fn state(self, step: usize, total_steps: usize, ratios: [f64; 3], delta_max: f64) -> LabResult<CurriculumState> {
        let mut state = curriculum_state(step, total_steps, ratios, delta_max)?;
        match self {
            Schedule::ProgForcing => {}
            Schedule::SyncOnly => {
                state.phase = Phase::SyncWarmup;
                state.p_ind = 0.0;
                state.reweight_active = false;
            }
            Schedule::IndepOnly => {
                state.phase = Phase::FullIndependence;
                state.p_ind = 1.0;
                state.reweight_active = true;
            }
        }
        Ok(state)
    }
}

/// Draw a video/audio noise-level pair for the given curriculum state.
pub fn sample_pair<R: Rng + ?Sized>(state: &CurriculumState, lambda: f64, rng: &mut R) -> TimestepPair {
    let t_v: f64 = rng.random();
    let t_a = match state.phase {
        Phase::SyncWarmup => t_v,
        Phase::IncrementalDecoupling => {
            if rng.random::<f64>() < state.p_ind {
                let delta = rng.random_range(-state.delta_max..=state.delta_max);
                (t_v + delta).clamp(0.0, 1.0)
            } else {
                t_v
            }
        }
        Phase::FullIndependence => rng.random(),
    };
    let (d, w_v, w_a) = if state.reweight_active {
        direction_weights(t_v, t_a, lambda)
    } else {
        (u8::from(t_a < t_v), 1.0, 1.0)
    };
    TimestepPair { t_v, t_a, d, w_v, w_a }
}
