use super::{dopri5, OdeError, SolveStats, SolverConfig};
use crate::egnn::{Differential, GraphInput};

/// A per-node vector field with exact block traces and a combined reverse
/// pass, i.e. everything the log-density and adjoint integrators need.
pub trait FlowField: Sync {
    fn nodes(&self) -> usize;
    fn state_len(&self) -> usize;
    fn param_count(&self) -> usize;

    /// `out = f(t, z)`; `trace[i] = tr ∂f_i/∂z_i` when requested.
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64], trace: Option<&mut [f64]>) -> Result<(), OdeError>;

    /// Adds `∂/∂(z, θ)` of `Σ w·f + Σ c_i tr_i` into the two accumulators and
    /// optionally writes `f(t, z)` into `value`.
    #[allow(clippy::too_many_arguments)]
    fn vjp(
        &self,
        t: f64,
        z: &[f64],
        w: &[f64],
        c: Option<&[f64]>,
        value: Option<&mut [f64]>,
        z_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<(), OdeError>;
}

/// The message-passing differential bound to one graph.
#[derive(Clone, Copy)]
pub struct GraphField<'a> {
    pub f: &'a Differential,
    pub g: &'a GraphInput,
}

impl FlowField for GraphField<'_> {
    fn nodes(&self) -> usize {
        self.g.len()
    }

    fn state_len(&self) -> usize {
        self.g.len() * self.f.k()
    }

    fn param_count(&self) -> usize {
        self.f.param_count()
    }

    fn eval(&self, t: f64, z: &[f64], out: &mut [f64], trace: Option<&mut [f64]>) -> Result<(), OdeError> {
        Ok(self.f.forward(self.g, t, z, out, trace)?)
    }

    fn vjp(
        &self,
        t: f64,
        z: &[f64],
        w: &[f64],
        c: Option<&[f64]>,
        value: Option<&mut [f64]>,
        z_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<(), OdeError> {
        Ok(self.f.vjp(self.g, t, z, w, c, value, z_bar, theta_bar)?)
    }
}

/// `f_i(z) = A_i z_i` with one `K x K` block per node; the blocks are the
/// parameters. Exists for closed-form checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub m: usize,
    pub k: usize,
    pub blocks: Vec<f64>,
}

impl LinearField {
    pub fn new(m: usize, k: usize, blocks: Vec<f64>) -> Self {
        assert_eq!(blocks.len(), m * k * k);
        Self { m, k, blocks }
    }
}

impl FlowField for LinearField {
    fn nodes(&self) -> usize {
        self.m
    }

    fn state_len(&self) -> usize {
        self.m * self.k
    }

    fn param_count(&self) -> usize {
        self.blocks.len()
    }

    fn eval(&self, _t: f64, z: &[f64], out: &mut [f64], trace: Option<&mut [f64]>) -> Result<(), OdeError> {
        let k = self.k;
        for i in 0..self.m {
            let a = &self.blocks[i * k * k..(i + 1) * k * k];
            for r in 0..k {
                out[i * k + r] = (0..k).map(|c| a[r * k + c] * z[i * k + c]).sum();
            }
        }
        if let Some(tr) = trace {
            for (i, t) in tr.iter_mut().enumerate() {
                *t = (0..k).map(|r| self.blocks[i * k * k + r * k + r]).sum();
            }
        }
        Ok(())
    }

    fn vjp(
        &self,
        t: f64,
        z: &[f64],
        w: &[f64],
        c: Option<&[f64]>,
        value: Option<&mut [f64]>,
        z_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<(), OdeError> {
        if let Some(v) = value {
            self.eval(t, z, v, None)?;
        }
        let k = self.k;
        for i in 0..self.m {
            let base = i * k * k;
            for r in 0..k {
                for col in 0..k {
                    z_bar[i * k + col] += self.blocks[base + r * k + col] * w[i * k + r];
                    theta_bar[base + r * k + col] += w[i * k + r] * z[i * k + col];
                }
                if let Some(c) = c {
                    theta_bar[base + r * k + r] += c[i];
                }
            }
        }
        Ok(())
    }
}

/// Flow state plus per-node accumulated log-density change.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub logdet: Vec<f64>,
}

/// Plain state integration without density terms.
pub fn integrate<F: FlowField + ?Sized>(
    field: &F,
    z: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), OdeError> {
    let n = field.state_len();
    dopri5(|t, y: &[f64], dy: &mut [f64]| field.eval(t, y, dy, None), t0, t1, z, cfg, n)
}

/// Integrates `dz = f` jointly with `dℓ_i = -sign(t1 - t0)·tr_i` from `t0`
/// to `t1`, so that `ℓ = -∫_0^T tr dt` in both directions and
/// `log p_T(z(T)) = log p_0(z(0)) + Σ_i ℓ_i`.
pub fn integrate_logdet<F: FlowField + ?Sized>(
    field: &F,
    z: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(AugmentedState, SolveStats), OdeError> {
    let n = field.state_len();
    let m = field.nodes();
    let sigma = (t1 - t0).signum();
    let mut y0 = z.to_vec();
    y0.resize(n + m, 0.0);
    let (y, stats) = dopri5(
        |t, y: &[f64], dy: &mut [f64]| {
            let (dz, dl) = dy.split_at_mut(n);
            field.eval(t, &y[..n], dz, Some(dl))?;
            dl.iter_mut().for_each(|v| *v *= -sigma);
            Ok::<(), OdeError>(())
        },
        t0,
        t1,
        &y0,
        cfg,
        n + m,
    )?;
    Ok((
        AugmentedState {
            z: y[..n].to_vec(),
            logdet: y[n..].to_vec(),
        },
        stats,
    ))
}

/// `z(0) -> z(T)` with log-density change.
pub fn integrate_forward_logdet<F: FlowField + ?Sized>(
    field: &F,
    z0: &[f64],
    cfg: &SolverConfig,
) -> Result<(AugmentedState, SolveStats), OdeError> {
    integrate_logdet(field, z0, cfg.t_start, cfg.t_end, cfg)
}

/// `z(T) -> z(0)` with log-density change.
pub fn integrate_reverse<F: FlowField + ?Sized>(
    field: &F,
    z_t: &[f64],
    cfg: &SolverConfig,
) -> Result<(AugmentedState, SolveStats), OdeError> {
    integrate_logdet(field, z_t, cfg.t_end, cfg.t_start, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    /// `∂L/∂θ`
    pub grad_theta: Vec<f64>,
    /// `∂L/∂z` at the start of the primal integration
    pub grad_z: Vec<f64>,
    pub stats: SolveStats,
}

/// Gradients of a loss `L(z(t_e), ℓ(t_e))` for a primal log-density
/// integration that ran from `t_s` to `t_e` and ended in `z_end`.
///
/// The state is re-integrated backwards together with the costate
/// `a = ∂L/∂z(t)`:
///
/// ```text
/// dz/dt = f
/// da/dt = -(aᵀ ∂f/∂z + Σ_i c_i ∂tr_i/∂z)
/// dg/dt = -(aᵀ ∂f/∂θ + Σ_i c_i ∂tr_i/∂θ),   c_i = -sign(t_e - t_s)·∂L/∂ℓ_i
/// ```
///
/// from `t_e` (with `a = ∂L/∂z(t_e)`, `g = 0`) to `t_s`, where `g` is the
/// parameter gradient. The costate of `ℓ` is constant because no term depends
/// on `ℓ`. Step control uses `z` and `a` only.
pub fn adjoint_gradient<F: FlowField + ?Sized>(
    field: &F,
    t_s: f64,
    t_e: f64,
    z_end: &[f64],
    dl_dz: &[f64],
    dl_dlogdet: &[f64],
    cfg: &SolverConfig,
) -> Result<AdjointResult, OdeError> {
    let n = field.state_len();
    let m = field.nodes();
    let p = field.param_count();
    let sigma = (t_e - t_s).signum();
    let c: Vec<f64> = dl_dlogdet.iter().map(|v| -sigma * v).collect();
    let use_trace = c.iter().any(|&v| v != 0.0);
    assert_eq!(c.len(), m);

    let mut y0 = Vec::with_capacity(2 * n + p);
    y0.extend_from_slice(z_end);
    y0.extend_from_slice(dl_dz);
    y0.resize(2 * n + p, 0.0);
    let (y, stats) = dopri5(
        |t, y: &[f64], dy: &mut [f64]| {
            let (z, rest) = y.split_at(n);
            let a = &rest[..n];
            let (dz, drest) = dy.split_at_mut(n);
            let (da, dg) = drest.split_at_mut(n);
            da.iter_mut().for_each(|v| *v = 0.0);
            dg.iter_mut().for_each(|v| *v = 0.0);
            field.vjp(t, z, a, use_trace.then_some(c.as_slice()), Some(dz), da, dg)?;
            da.iter_mut().for_each(|v| *v = -*v);
            dg.iter_mut().for_each(|v| *v = -*v);
            Ok::<(), OdeError>(())
        },
        t_e,
        t_s,
        &y0,
        cfg,
        2 * n,
    )?;
    Ok(AdjointResult {
        grad_theta: y[2 * n..].to_vec(),
        grad_z: y[n..2 * n].to_vec(),
        stats,
    })
}
