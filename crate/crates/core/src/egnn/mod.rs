//! The learnable differential: one message-passing layer restricted to graph
//! neighbors, whose only geometric input is the squared pairwise distance.
//!
//! ```text
//! m_ij = φ_e(z_i, z_j, |x_i - x_j|², onehot(b_ij))
//! m_i  = Σ_{j ∈ N(i)} m_ij
//! dz_i = φ_h(z_i, m_i, t)
//! ```
//!
//! Besides the forward map this module provides the exact trace of every
//! diagonal `K x K` block of `∂f/∂z`, a forward-mode tangent, and one combined
//! reverse pass returning `wᵀ ∂f/∂(z, θ) + Σ_i c_i ∂tr_i/∂(z, θ)`, which is
//! what the adjoint integrator needs.

mod params;
mod scratch;

pub use params::{init_params, EgnnParams, Layout};

use scratch::Buf;

use thiserror::Error;

use crate::graph::{Coords, LabeledGraph, BOND_ARITY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EgnnError {
    #[error("graph has no coordinates")]
    MissingCoordinates,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in the differential")]
    NumericalOverflow,
}

/// Topology and geometry of one graph in the form the differential consumes:
/// directed edges grouped by receiving node, with bond class and squared
/// distance per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    m: usize,
    dim: usize,
    coords: Vec<f64>,
    offsets: Vec<usize>,
    senders: Vec<usize>,
    bonds: Vec<usize>,
    d2: Vec<f64>,
}

impl GraphInput {
    pub fn new(graph: &LabeledGraph) -> Result<Self, EgnnError> {
        let coords = graph.coords().ok_or(EgnnError::MissingCoordinates)?;
        Ok(Self::with_geometry(graph, coords))
    }

    pub fn with_geometry(graph: &LabeledGraph, coords: &Coords) -> Self {
        let m = graph.len();
        let adj = graph.adjacency();
        let mut offsets = Vec::with_capacity(m + 1);
        let mut senders = Vec::new();
        let mut bonds = Vec::new();
        offsets.push(0);
        for list in &adj {
            for &(j, order) in list {
                senders.push(j);
                bonds.push(order as usize - 1);
            }
            offsets.push(senders.len());
        }
        let mut g = Self {
            m,
            dim: coords.dim(),
            coords: coords.as_slice().to_vec(),
            offsets,
            senders,
            bonds,
            d2: Vec::new(),
        };
        g.refresh_distances();
        g
    }

    fn refresh_distances(&mut self) {
        let d = self.dim;
        self.d2 = (0..self.m)
            .flat_map(|i| (self.offsets[i]..self.offsets[i + 1]).map(move |e| (i, e)))
            .map(|(i, e)| {
                let j = self.senders[e];
                (0..d)
                    .map(|c| {
                        let v = self.coords[i * d + c] - self.coords[j * d + c];
                        v * v
                    })
                    .sum()
            })
            .collect();
    }

    /// Same topology with replaced coordinates.
    pub fn moved(&self, coords: &[f64]) -> Self {
        let mut g = self.clone();
        g.coords.copy_from_slice(coords);
        g.refresh_distances();
        g
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn edge_count(&self) -> usize {
        self.senders.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.senders[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major `c = a · b + beta · c` where `a` is `m x n` and `b` is `n x p`,
/// each given with its row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    n: usize,
    p: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || p == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(n == 0 || last(m, n, a.1, a.2) < a.0.len());
    assert!(n == 0 || last(n, p, b.1, b.2) < b.0.len());
    assert!(c.len() >= m * p);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            p,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU and its first two derivatives.
#[inline]
fn silu3(x: f64) -> (f64, f64, f64) {
    let s = sigmoid(x);
    let d1 = s * (1.0 + x * (1.0 - s));
    let d2 = s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
    (x * s, d1, d2)
}

/// Forward intermediates for one evaluation.
struct Pass {
    /// per directed edge, `[E*H]`-strided
    s1: Buf,
    ds1: Buf,
    dds1: Buf,
    msg: Buf,
    ds2: Buf,
    dds2: Buf,
    /// per node
    mi: Buf,
    g1: Buf,
    dg1: Buf,
    ddg1: Buf,
    /// incoming edges of each node in summation order
    order: Vec<usize>,
}

/// Read-only view pairing parameters with their layout.
#[derive(Clone, Copy)]
struct View<'a> {
    l: Layout,
    p: &'a [f64],
}

impl View<'_> {
    #[inline]
    fn we1(&self, h: usize, c: usize) -> f64 {
        self.p[self.l.we1 + h * self.l.in_e + c]
    }
    #[inline]
    fn we2(&self, p: usize, q: usize) -> f64 {
        self.p[self.l.we2 + p * self.l.hidden + q]
    }
    #[inline]
    fn wh1(&self, h: usize, c: usize) -> f64 {
        self.p[self.l.wh1 + h * self.l.in_h + c]
    }
    #[inline]
    fn wh2(&self, k: usize, h: usize) -> f64 {
        self.p[self.l.wh2 + k * self.l.hidden + h]
    }
}

/// The differential `f_θ` bound to a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Differential {
    params: EgnnParams,
}

impl Differential {
    pub fn new(params: EgnnParams) -> Self {
        assert_eq!(params.bonds(), BOND_ARITY, "bond encoding is fixed to three orders");
        Self { params }
    }

    pub fn params(&self) -> &EgnnParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut EgnnParams {
        &mut self.params
    }

    pub fn k(&self) -> usize {
        self.params.k()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn view(&self) -> View<'_> {
        View {
            l: self.params.layout(),
            p: self.params.as_slice(),
        }
    }

    fn check(&self, g: &GraphInput, z: &[f64]) -> Result<(), EgnnError> {
        if z.len() != g.m * self.k() {
            return Err(EgnnError::ShapeMismatch(format!(
                "state has {} values, expected {} x {}",
                z.len(),
                g.m,
                self.k()
            )));
        }
        Ok(())
    }

    fn pass(&self, g: &GraphInput, t: f64, z: &[f64], second: bool) -> Pass {
        let v = self.view();
        let l = v.l;
        let (k, h, e) = (l.k, l.hidden, l.msg);
        let (m, ne) = (g.m, g.edge_count());

        // receiver and sender halves of the first edge layer, per node
        let mut pq = Buf::zeros(m * 2 * h);
        for i in 0..m {
            let zi = &z[i * k..(i + 1) * k];
            for r in 0..h {
                let row = &v.p[l.we1 + r * l.in_e..];
                let (mut a, mut b) = (0.0, 0.0);
                for c in 0..k {
                    a += row[c] * zi[c];
                    b += row[k + c] * zi[c];
                }
                pq[i * 2 * h + r] = a;
                pq[i * 2 * h + h + r] = b;
            }
        }
        let dist_col: Vec<f64> = (0..h).map(|r| v.we1(r, 2 * k)).collect();
        let bond_col: Vec<f64> = (0..BOND_ARITY)
            .flat_map(|b| (0..h).map(move |r| (b, r)))
            .map(|(b, r)| v.we1(r, 2 * k + 1 + b) + v.p[l.be1 + r])
            .collect();

        let mut pass = Pass {
            s1: Buf::zeros(ne * h),
            ds1: Buf::zeros(ne * h),
            dds1: if second { Buf::zeros(ne * h) } else { Buf::zeros(0) },
            msg: Buf::zeros(ne * e),
            ds2: Buf::zeros(ne * e),
            dds2: if second { Buf::zeros(ne * e) } else { Buf::zeros(0) },
            mi: Buf::zeros(m * e),
            g1: Buf::zeros(m * h),
            dg1: Buf::zeros(m * h),
            ddg1: if second { Buf::zeros(m * h) } else { Buf::zeros(0) },
            order: (0..ne).collect(),
        };

        for i in 0..m {
            for ed in g.offsets[i]..g.offsets[i + 1] {
                let j = g.senders[ed];
                let (b, d2) = (g.bonds[ed], g.d2[ed]);
                for r in 0..h {
                    let a1 = (pq[i * 2 * h + r] + pq[j * 2 * h + h + r])
                        + (dist_col[r] * d2 + bond_col[b * h + r]);
                    let (s, d, dd) = silu3(a1);
                    pass.s1[ed * h + r] = s;
                    pass.ds1[ed * h + r] = d;
                    if second {
                        pass.dds1[ed * h + r] = dd;
                    }
                }
            }
        }

        let mut a2 = Buf::zeros(ne * e);
        for row in a2.chunks_exact_mut(e) {
            row.copy_from_slice(&v.p[l.be2..l.be2 + e]);
        }
        gemm(ne, h, e, (&pass.s1, h, 1), (&v.p[l.we2..l.we2 + e * h], 1, h), 1.0, &mut a2);
        for (idx, &x) in a2.iter().enumerate() {
            let (s, d, dd) = silu3(x);
            pass.msg[idx] = s;
            pass.ds2[idx] = d;
            if second {
                pass.dds2[idx] = dd;
            }
        }

        for i in 0..m {
            // value-ordered summation keeps the aggregate independent of
            // node numbering
            let msg = &pass.msg;
            pass.order[g.offsets[i]..g.offsets[i + 1]].sort_by(|&x, &y| {
                msg[x * e..(x + 1) * e]
                    .iter()
                    .zip(&msg[y * e..(y + 1) * e])
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for &ed in &pass.order[g.offsets[i]..g.offsets[i + 1]] {
                for p in 0..e {
                    pass.mi[i * e + p] += pass.msg[ed * e + p];
                }
            }
        }

        let mut x = Buf::zeros(m * l.in_h);
        let mut c1 = Buf::zeros(m * h);
        for i in 0..m {
            let row = &mut x[i * l.in_h..(i + 1) * l.in_h];
            row[..k].copy_from_slice(&z[i * k..(i + 1) * k]);
            row[k..k + e].copy_from_slice(&pass.mi[i * e..(i + 1) * e]);
            row[k + e] = t;
            c1[i * h..(i + 1) * h].copy_from_slice(&v.p[l.bh1..l.bh1 + h]);
        }
        gemm(m, l.in_h, h, (&x, l.in_h, 1), (&v.p[l.wh1..l.wh1 + h * l.in_h], 1, l.in_h), 1.0, &mut c1);
        for (idx, &a) in c1.iter().enumerate() {
            let (s, d, dd) = silu3(a);
            pass.g1[idx] = s;
            pass.dg1[idx] = d;
            if second {
                pass.ddg1[idx] = dd;
            }
        }
        pass
    }

    /// `dt[h] = Σ_k wh2[k,h] wh1[h,k]`, the direct-path trace weights.
    fn direct_trace_weights(&self) -> Vec<f64> {
        let v = self.view();
        (0..v.l.hidden)
            .map(|r| (0..v.l.k).map(|c| v.wh2(c, r) * v.wh1(r, c)).sum())
            .collect()
    }

    /// `we1[:, c]` for the receiver block, as `K` contiguous rows.
    fn receiver_columns(&self) -> Vec<f64> {
        let v = self.view();
        let (k, h) = (v.l.k, v.l.hidden);
        let mut out = vec![0.0; k * h];
        for q in 0..h {
            for c in 0..k {
                out[c * h + q] = v.we1(q, c);
            }
        }
        out
    }

    /// `G[k,p] = Σ_h wh1[h,K+p] s'(c1_h) wh2[k,h]` for every row of `dg1`
    /// (one row of `H` values per node), stacked node-major.
    fn trace_g(&self, dg1: &[f64], gmat: &mut [f64]) {
        let v = self.view();
        let (k, h, e) = (v.l.k, v.l.hidden, v.l.msg);
        let nodes = dg1.len() / h;
        let mut y = Buf::zeros(nodes * k * h);
        for i in 0..nodes {
            for c in 0..k {
                let w = &v.p[v.l.wh2 + c * h..v.l.wh2 + (c + 1) * h];
                let out = &mut y[(i * k + c) * h..(i * k + c + 1) * h];
                for ((o, a), b) in out.iter_mut().zip(&dg1[i * h..(i + 1) * h]).zip(w) {
                    *o = a * b;
                }
            }
        }
        let b = &v.p[v.l.wh1 + k..v.l.wh1 + (h - 1) * v.l.in_h + k + e];
        gemm(nodes * k, h, e, (&y, h, 1), (b, v.l.in_h, 1), 0.0, gmat);
    }

    /// `C[p,q] = Σ_k G[k,p] we1[q,k]` for one node's `G`.
    fn trace_c(&self, gmat: &[f64], we1t: &[f64], cmat: &mut [f64]) {
        let (k, h, e) = (self.k(), self.params.width(), self.params.width());
        gemm(e, k, h, (gmat, 1, e), (we1t, h, 1), 0.0, cmat);
    }

    /// Both trace kernels of one node.
    fn trace_kernels(&self, dg1: &[f64], we1t: &[f64], gmat: &mut [f64], cmat: &mut [f64]) {
        self.trace_g(dg1, gmat);
        self.trace_c(gmat, we1t, cmat);
    }

    /// Evaluates `dz = f(t, z)` into `out` and, when requested, the exact
    /// trace of each node's diagonal Jacobian block into `trace`.
    pub fn forward(
        &self,
        g: &GraphInput,
        t: f64,
        z: &[f64],
        out: &mut [f64],
        trace: Option<&mut [f64]>,
    ) -> Result<(), EgnnError> {
        self.check(g, z)?;
        let pass = self.pass(g, t, z, false);
        let v = self.view();
        let (k, h, e) = (v.l.k, v.l.hidden, v.l.msg);
        let bh2 = &v.p[v.l.bh2..v.l.bh2 + k];
        for i in 0..g.m {
            let g1 = &pass.g1[i * h..(i + 1) * h];
            for c in 0..k {
                let row = &v.p[v.l.wh2 + c * h..v.l.wh2 + (c + 1) * h];
                out[i * k + c] = bh2[c] + dot(row, g1);
            }
        }
        if let Some(tr) = trace {
            let dt = self.direct_trace_weights();
            let we1t = self.receiver_columns();
            let w2 = &v.p[v.l.we2..v.l.we2 + e * h];
            let mut gall = Buf::zeros(g.m * k * e);
            self.trace_g(&pass.dg1, &mut gall);
            let mut cmat = Buf::zeros(e * h);
            for i in 0..g.m {
                let dg1 = &pass.dg1[i * h..(i + 1) * h];
                let mut total = dot(dg1, &dt);
                if g.offsets[i + 1] > g.offsets[i] {
                    self.trace_c(&gall[i * k * e..(i + 1) * k * e], &we1t, &mut cmat);
                    cmat.iter_mut().zip(w2).for_each(|(c, w)| *c *= w);
                    for &ed in &pass.order[g.offsets[i]..g.offsets[i + 1]] {
                        let ds1 = &pass.ds1[ed * h..(ed + 1) * h];
                        let mut s = 0.0;
                        for p in 0..e {
                            s += pass.ds2[ed * e + p] * dot(&cmat[p * h..(p + 1) * h], ds1);
                        }
                        total += s;
                    }
                }
                tr[i] = total;
            }
            if tr.iter().any(|x| !x.is_finite()) {
                return Err(EgnnError::NumericalOverflow);
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(EgnnError::NumericalOverflow);
        }
        Ok(())
    }

    /// Per-node traces of the diagonal Jacobian blocks.
    pub fn trace_jacobian(&self, g: &GraphInput, t: f64, z: &[f64]) -> Result<Vec<f64>, EgnnError> {
        let mut out = vec![0.0; z.len()];
        let mut tr = vec![0.0; g.m];
        self.forward(g, t, z, &mut out, Some(&mut tr))?;
        Ok(tr)
    }

    /// Forward-mode tangent `(∂f/∂z) dz`.
    pub fn jvp(&self, g: &GraphInput, t: f64, z: &[f64], dz: &[f64]) -> Result<Vec<f64>, EgnnError> {
        self.check(g, z)?;
        self.check(g, dz)?;
        let pass = self.pass(g, t, z, false);
        let v = self.view();
        let (k, h, e) = (v.l.k, v.l.hidden, v.l.msg);
        let mut dmi = Buf::zeros(g.m * e);
        let mut da1 = Buf::zeros(h);
        for i in 0..g.m {
            for &ed in &pass.order[g.offsets[i]..g.offsets[i + 1]] {
                let j = g.senders[ed];
                for (r, d) in da1.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..k {
                        s += v.we1(r, c) * dz[i * k + c] + v.we1(r, k + c) * dz[j * k + c];
                    }
                    *d = s * pass.ds1[ed * h + r];
                }
                for p in 0..e {
                    let s: f64 = (0..h).map(|q| v.we2(p, q) * da1[q]).sum();
                    dmi[i * e + p] += pass.ds2[ed * e + p] * s;
                }
            }
        }
        let mut out = vec![0.0; g.m * k];
        for i in 0..g.m {
            let mut dc1 = Buf::zeros(h);
            for (r, d) in dc1.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..k {
                    s += v.wh1(r, c) * dz[i * k + c];
                }
                for p in 0..e {
                    s += v.wh1(r, k + p) * dmi[i * e + p];
                }
                *d = s * pass.dg1[i * h + r];
            }
            for c in 0..k {
                out[i * k + c] = (0..h).map(|r| v.wh2(c, r) * dc1[r]).sum();
            }
        }
        Ok(out)
    }

    /// Reverse pass of `Φ = Σ_i w_i·f_i + Σ_i c_i tr_i`.
    ///
    /// Adds `∂Φ/∂z` into `z_bar` and `∂Φ/∂θ` into `theta_bar`. Either
    /// cotangent may be zero; `c = None` skips the trace terms entirely.
    /// When `value` is given it receives `f(t, z)`.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp(
        &self,
        g: &GraphInput,
        t: f64,
        z: &[f64],
        w: &[f64],
        c: Option<&[f64]>,
        value: Option<&mut [f64]>,
        z_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<(), EgnnError> {
        self.check(g, z)?;
        self.check(g, w)?;
        let pass = self.pass(g, t, z, c.is_some());
        let v = self.view();
        let l = v.l;
        let (k, h, e, m) = (l.k, l.hidden, l.msg, g.m);
        let ne = g.edge_count();
        if let Some(out) = value {
            for i in 0..m {
                let g1 = &pass.g1[i * h..(i + 1) * h];
                for c in 0..k {
                    let row = &v.p[l.wh2 + c * h..l.wh2 + (c + 1) * h];
                    out[i * k + c] = v.p[l.bh2 + c] + dot(row, g1);
                }
            }
        }

        let mut da1 = Buf::zeros(ne * h);
        let mut da2 = Buf::zeros(ne * e);
        let mut dc1 = Buf::zeros(m * h);

        if let Some(c) = c {
            let dt = self.direct_trace_weights();
            let we1t = self.receiver_columns();
            let mut dt_bar = Buf::zeros(h);
            let mut gmat = Buf::zeros(e * k);
            let mut cmat = Buf::zeros(e * h);
            let mut smat = Buf::zeros(e * h);
            let mut gbar = Buf::zeros(e * k);
            let mut xmat = Buf::zeros(h * k);
            let mut ds_bar = Buf::zeros(h);
            for i in 0..m {
                let ci = c[i];
                if ci == 0.0 {
                    continue;
                }
                let dg1 = &pass.dg1[i * h..(i + 1) * h];
                for r in 0..h {
                    ds_bar[r] = ci * dt[r];
                    dt_bar[r] += ci * dg1[r];
                }
                let edges = &pass.order[g.offsets[i]..g.offsets[i + 1]];
                if !edges.is_empty() {
                    self.trace_kernels(dg1, &we1t, &mut gmat, &mut cmat);
                    smat.iter_mut().for_each(|x| *x = 0.0);
                    for &ed in edges {
                        for p in 0..e {
                            let a = pass.ds2[ed * e + p];
                            for q in 0..h {
                                smat[p * h + q] += a * pass.ds1[ed * h + q];
                            }
                        }
                    }
                    // W2e and C_i cotangents from Σ_e σ2ᵀ (W2e ⊙ C_i) σ1
                    for p in 0..e {
                        for q in 0..h {
                            let idx = p * h + q;
                            theta_bar[l.we2 + idx] += ci * smat[idx] * cmat[idx];
                        }
                    }
                    for &ed in edges {
                        for p in 0..e {
                            let mut acc2 = 0.0;
                            for q in 0..h {
                                acc2 += v.we2(p, q) * cmat[p * h + q] * pass.ds1[ed * h + q];
                            }
                            da2[ed * e + p] += ci * acc2 * pass.dds2[ed * e + p];
                        }
                        for q in 0..h {
                            let mut acc1 = 0.0;
                            for p in 0..e {
                                acc1 += v.we2(p, q) * cmat[p * h + q] * pass.ds2[ed * e + p];
                            }
                            da1[ed * h + q] += ci * acc1 * pass.dds1[ed * h + q];
                        }
                    }
                    // C̄ = c_i W2e ⊙ S, stored in smat
                    for p in 0..e {
                        for q in 0..h {
                            smat[p * h + q] *= ci * v.we2(p, q);
                        }
                    }
                    gbar.iter_mut().for_each(|x| *x = 0.0);
                    for p in 0..e {
                        for q in 0..h {
                            let cb = smat[p * h + q];
                            if cb == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                gbar[p * k + kk] += cb * v.we1(q, kk);
                                theta_bar[l.we1 + q * l.in_e + kk] += cb * gmat[kk * e + p];
                            }
                        }
                    }
                    xmat.iter_mut().for_each(|x| *x = 0.0);
                    for r in 0..h {
                        for p in 0..e {
                            let wv = v.wh1(r, k + p);
                            let mut acc = 0.0;
                            for kk in 0..k {
                                xmat[r * k + kk] += wv * gbar[p * k + kk];
                                acc += gbar[p * k + kk] * v.wh2(kk, r);
                            }
                            theta_bar[l.wh1 + r * l.in_h + k + p] += dg1[r] * acc;
                        }
                    }
                    for r in 0..h {
                        for kk in 0..k {
                            ds_bar[r] += xmat[r * k + kk] * v.wh2(kk, r);
                            theta_bar[l.wh2 + kk * h + r] += dg1[r] * xmat[r * k + kk];
                        }
                    }
                }
                for r in 0..h {
                    dc1[i * h + r] += ds_bar[r] * pass.ddg1[i * h + r];
                }
            }
            for r in 0..h {
                for kk in 0..k {
                    theta_bar[l.wh2 + kk * h + r] += dt_bar[r] * v.wh1(r, kk);
                    theta_bar[l.wh1 + r * l.in_h + kk] += dt_bar[r] * v.wh2(kk, r);
                }
            }
        }

        // node MLP φ_h
        let mut mi_bar = Buf::zeros(m * e);
        for i in 0..m {
            let wi = &w[i * k..(i + 1) * k];
            let g1 = &pass.g1[i * h..(i + 1) * h];
            for kk in 0..k {
                theta_bar[l.bh2 + kk] += wi[kk];
                if wi[kk] != 0.0 {
                    for r in 0..h {
                        theta_bar[l.wh2 + kk * h + r] += wi[kk] * g1[r];
                    }
                }
            }
            for r in 0..h {
                let gbar: f64 = (0..k).map(|kk| v.wh2(kk, r) * wi[kk]).sum();
                dc1[i * h + r] += gbar * pass.dg1[i * h + r];
            }
            let zi = &z[i * k..(i + 1) * k];
            let mi = &pass.mi[i * e..(i + 1) * e];
            for r in 0..h {
                let cb = dc1[i * h + r];
                if cb == 0.0 {
                    continue;
                }
                let row = l.wh1 + r * l.in_h;
                for kk in 0..k {
                    theta_bar[row + kk] += cb * zi[kk];
                    z_bar[i * k + kk] += cb * v.p[row + kk];
                }
                for p in 0..e {
                    theta_bar[row + k + p] += cb * mi[p];
                    mi_bar[i * e + p] += cb * v.p[row + k + p];
                }
                theta_bar[row + k + e] += cb * t;
                theta_bar[l.bh1 + r] += cb;
            }
        }

        // edge MLP φ_e
        let mut pq_bar = Buf::zeros(m * 2 * h);
        for i in 0..m {
            for ed in g.offsets[i]..g.offsets[i + 1] {
                let j = g.senders[ed];
                for p in 0..e {
                    da2[ed * e + p] += mi_bar[i * e + p] * pass.ds2[ed * e + p];
                }
                let s1 = &pass.s1[ed * h..(ed + 1) * h];
                for p in 0..e {
                    let a = da2[ed * e + p];
                    if a == 0.0 {
                        continue;
                    }
                    theta_bar[l.be2 + p] += a;
                    let row = l.we2 + p * h;
                    for q in 0..h {
                        theta_bar[row + q] += a * s1[q];
                        da1[ed * h + q] += a * v.p[row + q] * pass.ds1[ed * h + q];
                    }
                }
                let (b, d2) = (g.bonds[ed], g.d2[ed]);
                for r in 0..h {
                    let a = da1[ed * h + r];
                    pq_bar[i * 2 * h + r] += a;
                    pq_bar[j * 2 * h + h + r] += a;
                    let row = l.we1 + r * l.in_e;
                    theta_bar[row + 2 * k] += a * d2;
                    theta_bar[row + 2 * k + 1 + b] += a;
                    theta_bar[l.be1 + r] += a;
                }
            }
        }
        for i in 0..m {
            let zi = &z[i * k..(i + 1) * k];
            for r in 0..h {
                let (pb, qb) = (pq_bar[i * 2 * h + r], pq_bar[i * 2 * h + h + r]);
                let row = l.we1 + r * l.in_e;
                for kk in 0..k {
                    theta_bar[row + kk] += pb * zi[kk];
                    theta_bar[row + k + kk] += qb * zi[kk];
                    z_bar[i * k + kk] += pb * v.p[row + kk] + qb * v.p[row + k + kk];
                }
            }
        }
        if z_bar.iter().any(|x| !x.is_finite()) {
            return Err(EgnnError::NumericalOverflow);
        }
        Ok(())
    }

    /// Coordinate velocity `dx_i = |N_i|⁻¹ Σ_j (x_i - x_j) φ_x(m_ij)` for the
    /// experimental co-evolving geometry; isolated nodes stay put.
    pub fn coordinate_velocity(&self, g: &GraphInput, t: f64, z: &[f64]) -> Result<Vec<f64>, EgnnError> {
        self.check(g, z)?;
        let pass = self.pass(g, t, z, false);
        let v = self.view();
        let l = v.l;
        let (h, e, d) = (l.hidden, l.msg, g.dim);
        let mut out = vec![0.0; g.m * d];
        for i in 0..g.m {
            let deg = g.offsets[i + 1] - g.offsets[i];
            if deg == 0 {
                continue;
            }
            for ed in g.offsets[i]..g.offsets[i + 1] {
                let j = g.senders[ed];
                let msg = &pass.msg[ed * e..(ed + 1) * e];
                let mut phi = v.p[l.bx2];
                for r in 0..h {
                    let row = &v.p[l.wx1 + r * e..l.wx1 + (r + 1) * e];
                    let a = v.p[l.bx1 + r] + dot(row, msg);
                    phi += v.p[l.wx2 + r] * silu3(a).0;
                }
                for c in 0..d {
                    out[i * d + c] += (g.coords[i * d + c] - g.coords[j * d + c]) * phi;
                }
            }
            for c in 0..d {
                out[i * d + c] /= deg as f64;
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(EgnnError::NumericalOverflow);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, k: usize) -> (Differential, GraphInput, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for b in 1..m {
            edges.push((rng.gen_range(0..b), b, rng.gen_range(1..=3)));
        }
        if m > 3 && !edges.iter().any(|&(a, b, _)| (a, b) == (0, m - 1)) {
            edges.push((0, m - 1, 1));
        }
        let coords: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let graph = LabeledGraph::new(vec![0; m], edges, Some(Coords::new(3, coords).unwrap())).unwrap();
        let z: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = init_params(seed, k, BOND_ARITY, 32);
        // non-zero biases so every path is exercised
        let l = params.layout();
        for off in [l.be1, l.be2, l.bh1] {
            for x in &mut params.as_mut_slice()[off..off + 32] {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
        (Differential::new(params), GraphInput::new(&graph).unwrap(), z)
    }

    fn eval(f: &Differential, g: &GraphInput, t: f64, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; z.len()];
        let mut tr = vec![0.0; g.len()];
        f.forward(g, t, z, &mut out, Some(&mut tr)).unwrap();
        (out, tr)
    }

    #[test]
    fn isolated_node_ignores_geometry() {
        let graph = LabeledGraph::new(vec![0], [], Some(Coords::new(2, vec![3.0, 4.0]).unwrap())).unwrap();
        let f = Differential::new(init_params(1, 3, 3, 32));
        let g = GraphInput::new(&graph).unwrap();
        let z = [0.2, -0.1, 0.4];
        let (a, _) = eval(&f, &g, 0.3, &z);
        let (b, _) = eval(&f, &g.moved(&[-7.0, 1.0]), 0.3, &z);
        assert_eq!(a, b);
    }

    #[test]
    fn trace_matches_directional_derivatives() {
        let (f, g, z) = instance(5, 6, 4);
        let (_, tr) = eval(&f, &g, 0.4, &z);
        let k = 4;
        for i in 0..g.len() {
            let mut want = 0.0;
            for c in 0..k {
                let mut dz = vec![0.0; z.len()];
                dz[i * k + c] = 1.0;
                want += f.jvp(&g, 0.4, &z, &dz).unwrap()[i * k + c];
            }
            assert!((tr[i] - want).abs() < 1e-10, "node {i}: {} vs {want}", tr[i]);
        }
    }

    #[test]
    fn trace_matches_finite_differences() {
        let (f, g, z) = instance(8, 5, 3);
        let (_, tr) = eval(&f, &g, 0.1, &z);
        let h = 1e-5;
        for i in 0..g.len() {
            let mut want = 0.0;
            for c in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i * 3 + c] += h;
                zm[i * 3 + c] -= h;
                want += (eval(&f, &g, 0.1, &zp).0[i * 3 + c] - eval(&f, &g, 0.1, &zm).0[i * 3 + c]) / (2.0 * h);
            }
            assert!((tr[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn zeroed_output_layer_is_constant() {
        let (mut f, g, z) = instance(2, 4, 3);
        f.params_mut().zero_output_layer();
        let (out, tr) = eval(&f, &g, 0.0, &z);
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(tr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_matches_jvp_dense_jacobian() {
        let (f, g, z) = instance(3, 5, 3);
        let n = z.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut zb = vec![0.0; n];
        let mut tb = vec![0.0; f.param_count()];
        f.vjp(&g, 0.7, &z, &w, None, None, &mut zb, &mut tb).unwrap();
        for col in 0..n {
            let mut dz = vec![0.0; n];
            dz[col] = 1.0;
            let jcol = f.jvp(&g, 0.7, &z, &dz).unwrap();
            let want: f64 = jcol.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((zb[col] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_vjp_matches_finite_differences() {
        let (f, g, z) = instance(11, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..z.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = 0.35;
        let phi = |f: &Differential, z: &[f64]| {
            let (out, tr) = eval(f, &g, t, z);
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + tr.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut zb = vec![0.0; z.len()];
        let mut tb = vec![0.0; f.param_count()];
        f.vjp(&g, t, &z, &w, Some(&c), None, &mut zb, &mut tb).unwrap();
        let h = 1e-5;
        for idx in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (phi(&f, &zp) - phi(&f, &zm)) / (2.0 * h);
            assert!((zb[idx] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "z[{idx}] {} vs {fd}", zb[idx]);
        }
        for idx in 0..f.param_count() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp.params_mut().as_mut_slice()[idx] += h;
            fm.params_mut().as_mut_slice()[idx] -= h;
            let fd = (phi(&fp, &z) - phi(&fm, &z)) / (2.0 * h);
            assert!(
                (tb[idx] - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "theta[{idx}] {} vs {fd}",
                tb[idx]
            );
        }
    }

    #[test]
    fn vjp_is_linear_in_cotangents() {
        let (f, g, z) = instance(4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = z.len();
        let w1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c1: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c2: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |w: &[f64], c: &[f64]| {
            let mut zb = vec![0.0; n];
            let mut tb = vec![0.0; f.param_count()];
            f.vjp(&g, 0.2, &z, w, Some(c), None, &mut zb, &mut tb).unwrap();
            (zb, tb)
        };
        let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let (za, ta) = run(&w1, &c1);
        let (zb, tb) = run(&w2, &c2);
        let (zs, ts) = run(&sum(&w1, &w2), &sum(&c1, &c2));
        for (s, (a, b)) in zs.iter().zip(za.iter().zip(&zb)) {
            assert!((s - a - b).abs() < 1e-12);
        }
        for (s, (a, b)) in ts.iter().zip(ta.iter().zip(&tb)) {
            assert!((s - a - b).abs() < 1e-12);
        }
        let mut z0 = vec![0.0; n];
        let mut t0 = vec![0.0; f.param_count()];
        f.vjp(&g, 0.2, &z, &vec![0.0; n], Some(&vec![0.0; g.len()]), None, &mut z0, &mut t0).unwrap();
        assert!(z0.iter().chain(&t0).all(|&v| v == 0.0));
    }

    #[test]
    fn non_neighbors_do_not_couple() {
        // path 0-1-2-3: node 0 and node 3 are not adjacent
        let coords = Coords::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let graph = LabeledGraph::new(vec![0; 4], [(0, 1, 1), (1, 2, 2), (2, 3, 1)], Some(coords)).unwrap();
        let f = Differential::new(init_params(6, 3, 3, 32));
        let g = GraphInput::new(&graph).unwrap();
        let z: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        for j in 0..4usize {
            let mut dz = vec![0.0; 12];
            dz[j * 3..j * 3 + 3].copy_from_slice(&[1.0, -0.5, 0.25]);
            let out = f.jvp(&g, 0.5, &z, &dz).unwrap();
            for i in 0..4usize {
                if i.abs_diff(j) > 1 {
                    assert!(out[i * 3..i * 3 + 3].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn coordinate_velocity_is_equivariant() {
        let (f, g, z) = instance(12, 5, 3);
        let v0 = f.coordinate_velocity(&g, 0.0, &z).unwrap();
        // rotate by 90 degrees about the z axis and translate
        let moved: Vec<f64> = g
            .coords()
            .chunks(3)
            .flat_map(|p| [-p[1] + 1.0, p[0] - 2.0, p[2] + 0.5])
            .collect();
        let v1 = f.coordinate_velocity(&g.moved(&moved), 0.0, &z).unwrap();
        for (a, b) in v0.chunks(3).zip(v1.chunks(3)) {
            assert!((b[0] + a[1]).abs() < 1e-12 && (b[1] - a[0]).abs() < 1e-12 && (b[2] - a[2]).abs() < 1e-12);
        }
    }
}
