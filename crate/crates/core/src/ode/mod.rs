//! Adaptive Dormand-Prince 5(4) integration, log-density augmentation and
//! adjoint sensitivities.

mod flow;

pub use flow::{
    adjoint_gradient, integrate, integrate_forward_logdet, integrate_logdet, integrate_reverse,
    AdjointResult, AugmentedState, FlowField, GraphField, LinearField,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::egnn::EgnnError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("exceeded {0} solver steps")]
    MaxStepsExceeded(usize),
    #[error("step size {h:e} underflowed at t = {t}")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {0}")]
    NonFiniteState(f64),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Differential(#[from] EgnnError),
}

impl From<std::convert::Infallible> for OdeError {
    fn from(e: std::convert::Infallible) -> Self {
        match e {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            initial_step: 1e-2,
            max_steps: 10_000,
            t_start: 0.0,
            t_end: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.rtol = tol;
        self.atol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(OdeError::InvalidConfig("tolerances must be positive".into()));
        }
        if !(self.initial_step > 0.0) || self.max_steps == 0 {
            return Err(OdeError::InvalidConfig(
                "initial step must be positive and max steps at least 1".into(),
            ));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) || self.t_start == self.t_end {
            return Err(OdeError::InvalidConfig("empty time interval".into()));
        }
        Ok(())
    }
}

/// Counters from one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl std::ops::AddAssign for SolveStats {
    fn add_assign(&mut self, o: Self) {
        self.nfe += o.nfe;
        self.accepted += o.accepted;
        self.rejected += o.rejected;
    }
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
///
/// The error norm is the RMS of `err_i / (atol + rtol·max(|y_i|, |y_new_i|))`
/// over the first `err_len` components only, so trailing accumulators can be
/// excluded from step control.
pub fn dopri5<F, E2>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    cfg: &SolverConfig,
    err_len: usize,
) -> Result<(Vec<f64>, SolveStats), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E2>,
    OdeError: From<E2>,
{
    cfg.validate()?;
    let n = y0.len();
    let err_len = err_len.min(n);
    let span = t1 - t0;
    let dir = span.signum();
    let min_step = 1e-12 * span.abs();
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    if n == 0 || span == 0.0 {
        return Ok((y, stats));
    }
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    f(t0, &y, &mut k[0])?;
    stats.nfe += 1;
    let mut t = t0;
    let mut h = dir * cfg.initial_step.min(span.abs());
    loop {
        let remaining = t1 - t;
        if remaining * dir <= 0.0 {
            break;
        }
        let last = h.abs() >= remaining.abs();
        if last {
            h = remaining;
        }
        if h.abs() < min_step {
            return Err(OdeError::StepUnderflow { t, h });
        }
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(OdeError::MaxStepsExceeded(cfg.max_steps));
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            f(t + C[s] * h, &ytmp, &mut k[s])?;
            stats.nfe += 1;
            if s == 6 {
                ynew.copy_from_slice(&ytmp);
            }
        }
        let mut sum = 0.0;
        for i in 0..err_len {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(ynew[i].abs());
            let r = h * e / sc;
            sum += r * r;
        }
        let err = if err_len == 0 { 0.0 } else { (sum / err_len as f64).sqrt() };
        if !err.is_finite() {
            return Err(OdeError::NonFiniteState(t + h));
        }
        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            if ynew.iter().any(|v| !v.is_finite()) {
                return Err(OdeError::NonFiniteState(t + h));
            }
            t = if last { t1 } else { t + h };
            std::mem::swap(&mut y, &mut ynew);
            k.swap(0, 6);
            stats.accepted += 1;
            if last {
                break;
            }
            h *= factor;
        } else {
            stats.rejected += 1;
            h *= factor.min(1.0);
        }
    }
    Ok((y, stats))
}
