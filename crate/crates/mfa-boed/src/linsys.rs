//! The mass-balance linear system.
//!
//! With allocation fractions `φ_ij` (fraction of node `i`'s outflow routed to
//! node `j`) and external inputs `q`, conservation of mass at every node reads
//! `Σ_i φ_ij x_i + q_j = x_j`, i.e. `(I − Φᵀ) x = q`. Nodal flows are solved
//! with a partially pivoted LU factorization guarded by a 1-norm reciprocal
//! condition estimate: allocation-conserving cycles make the system singular
//! and are reported as errors rather than solved to garbage.

use crate::design::{Design, Target};
use crate::error::{Error, Result};
use crate::network::NetworkStructure;

/// Reject systems whose reciprocal condition estimate falls below this.
pub const RCOND_MIN: f64 = 1e-12;

/// Solutions with entries in `(-NEGATIVE_TOLERANCE, 0)` are clamped to zero;
/// anything more negative is an infeasibility error.
pub const NEGATIVE_TOLERANCE: f64 = 1e-10;

/// Dense matrix of allocation fractions, row `i` holding node `i`'s outgoing
/// fractions. Entries for absent edges must be exactly zero.
#[derive(Debug, Clone)]
pub struct AllocationMatrix {
    n: usize,
    data: Vec<f64>,
}

impl AllocationMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    #[inline]
    pub fn set(&mut self, from: usize, to: usize, value: f64) {
        self.data[from * self.n + to] = value;
    }

    /// Build from per-node fraction lists aligned with the structure's
    /// canonical outgoing-edge order.
    pub fn from_node_fractions(structure: &NetworkStructure, fractions: &[Vec<f64>]) -> Result<Self> {
        let n = structure.n_nodes();
        if fractions.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: fractions.len(),
            });
        }
        let mut phi = Self::zeros(n);
        for (i, fr) in fractions.iter().enumerate() {
            let targets = structure.out_targets(i);
            if fr.len() != targets.len() {
                return Err(Error::LengthMismatch {
                    expected: targets.len(),
                    got: fr.len(),
                });
            }
            for (&t, &f) in targets.iter().zip(fr) {
                phi.set(i, t, f);
            }
        }
        Ok(phi)
    }
}

/// External inputs `q`, one entry per node (zero off the input nodes).
#[derive(Debug, Clone)]
pub struct ExternalInputs {
    q: Vec<f64>,
}

impl ExternalInputs {
    pub fn new(q: Vec<f64>) -> Self {
        Self { q }
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, node: usize) -> f64 {
        self.q[node]
    }
}

/// Solved nodal throughputs.
#[derive(Debug, Clone)]
pub struct NodalFlows {
    x: Vec<f64>,
}

impl NodalFlows {
    pub fn values(&self) -> &[f64] {
        &self.x
    }

    pub fn get(&self, node: usize) -> f64 {
        self.x[node]
    }
}

/// The assembled system `A x = b` with `A = I − Φᵀ`, `b = q`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub n: usize,
    /// Row-major `A`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Assemble `A = I − Φᵀ`, `b = q`, checking that the allocation matrix's
/// zero pattern matches the structure's edge set and that inputs are
/// non-negative and confined to the declared input nodes.
pub fn assemble_system(
    structure: &NetworkStructure,
    phi: &AllocationMatrix,
    q: &ExternalInputs,
) -> Result<LinearSystem> {
    let n = structure.n_nodes();
    if phi.n() != n {
        return Err(Error::LengthMismatch { expected: n, got: phi.n() });
    }
    if q.values().len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: q.values().len(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            let value = phi.get(i, j);
            let present = structure.has_edge(i, j);
            if !present && value != 0.0 {
                return Err(Error::PatternMismatch {
                    from: format!("node {i}"),
                    to: format!("node {j}"),
                    detail: format!("phi = {value} on an absent edge"),
                });
            }
            if present && !(0.0..=1.0).contains(&value) {
                return Err(Error::PatternMismatch {
                    from: format!("node {i}"),
                    to: format!("node {j}"),
                    detail: format!("phi = {value} outside [0, 1]"),
                });
            }
        }
    }
    let mut a = vec![0.0; n * n];
    for d in 0..n {
        a[d * n + d] = 1.0;
    }
    for i in 0..n {
        for &j in structure.out_targets(i) {
            a[j * n + i] -= phi.get(i, j);
        }
    }
    Ok(LinearSystem {
        n,
        a,
        b: q.values().to_vec(),
    })
}

/// In-place LU factorization with partial pivoting (`P A = L U`); returns
/// false when an exactly zero pivot is hit.
pub(crate) fn lu_factor_in_place(n: usize, a: &mut [f64], piv: &mut [usize]) -> bool {
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            return false;
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        let inv = 1.0 / a[k * n + k];
        for i in (k + 1)..n {
            let l = a[i * n + k] * inv;
            a[i * n + k] = l;
            if l != 0.0 {
                let (head, tail) = a.split_at_mut(i * n);
                let row_k = &head[k * n + k + 1..k * n + n];
                let row_i = &mut tail[k + 1..n];
                for (x, &u) in row_i.iter_mut().zip(row_k) {
                    *x -= l * u;
                }
            }
        }
    }
    true
}

/// Solve `A x = b` in place from the factors.
pub(crate) fn lu_solve(n: usize, lu: &[f64], piv: &[usize], b: &mut [f64]) {
    for k in 0..n {
        b.swap(k, piv[k]);
    }
    for i in 1..n {
        let mut s = b[i];
        for j in 0..i {
            s -= lu[i * n + j] * b[j];
        }
        b[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in (i + 1)..n {
            s -= lu[i * n + j] * b[j];
        }
        b[i] = s / lu[i * n + i];
    }
}

/// Solve `Aᵀ z = c` in place using the same factors:
/// `Aᵀ = Uᵀ Lᵀ P`, so solve `Uᵀ w = c`, then `Lᵀ v = w`, then undo `P`.
pub(crate) fn lu_solve_transpose(n: usize, lu: &[f64], piv: &[usize], c: &mut [f64]) {
    for k in 0..n {
        let mut s = c[k];
        for i in 0..k {
            s -= lu[i * n + k] * c[i];
        }
        c[k] = s / lu[k * n + k];
    }
    for k in (0..n).rev() {
        let mut s = c[k];
        for i in (k + 1)..n {
            s -= lu[i * n + k] * c[i];
        }
        c[k] = s;
    }
    for k in (0..n).rev() {
        c.swap(k, piv[k]);
    }
}

/// LU factors of a row-permuted matrix (`P A = L U`).
pub(crate) struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

pub(crate) fn lu_factor(n: usize, mut a: Vec<f64>) -> Option<LuFactors> {
    let mut piv = vec![0usize; n];
    if !lu_factor_in_place(n, &mut a, &mut piv) {
        return None;
    }
    Some(LuFactors { n, lu: a, piv })
}

impl LuFactors {
    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        lu_solve(self.n, &self.lu, &self.piv, b);
    }
}

pub(crate) fn norm1(n: usize, a: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += a[i * n + j].abs();
        }
        best = best.max(col);
    }
    best
}

/// Hager-style 1-norm estimate of `‖A⁻¹‖₁` from LU factors, giving the
/// reciprocal condition estimate `1 / (‖A‖₁ ‖A⁻¹‖₁)`. `ws` must hold at
/// least `2 n` scratch values.
pub(crate) fn rcond_from_factors(
    a_norm1: f64,
    n: usize,
    lu: &[f64],
    piv: &[usize],
    ws: &mut [f64],
) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let (x, y) = ws.split_at_mut(n);
    x.fill(1.0 / n as f64);
    let mut est = 0.0f64;
    for iter in 0..4 {
        y.copy_from_slice(x);
        lu_solve(n, lu, piv, y);
        let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
        est = est.max(y_norm);
        for v in y.iter_mut() {
            *v = if *v >= 0.0 { 1.0 } else { -1.0 };
        }
        lu_solve_transpose(n, lu, piv, y);
        let (mut j_best, mut z_best) = (0usize, 0.0f64);
        for (j, z) in y.iter().enumerate() {
            if z.abs() > z_best {
                z_best = z.abs();
                j_best = j;
            }
        }
        let zx: f64 = y.iter().zip(x.iter()).map(|(z, xv)| z * xv).sum();
        if iter > 0 && z_best <= zx.abs() {
            break;
        }
        x.fill(0.0);
        x[j_best] = 1.0;
    }
    if est == 0.0 || a_norm1 == 0.0 {
        return 0.0;
    }
    1.0 / (a_norm1 * est)
}

pub(crate) fn rcond_estimate(a_norm1: f64, lu: &LuFactors) -> f64 {
    let mut ws = vec![0.0; 2 * lu.n];
    rcond_from_factors(a_norm1, lu.n, &lu.lu, &lu.piv, &mut ws)
}

/// Solve an assembled system with the condition guard and negativity
/// clamp/check. `structure` is consulted only for error diagnostics.
pub(crate) fn solve_system(structure: &NetworkStructure, sys: &LinearSystem, labels: &[String]) -> Result<Vec<f64>> {
    let a_norm = norm1(sys.n, &sys.a);
    let singular_error = || {
        let mut nodes = structure.conserving_cycle_nodes();
        if nodes.is_empty() {
            nodes = structure.cycle_nodes();
        }
        let names = nodes
            .into_iter()
            .map(|i| labels.get(i).cloned().unwrap_or_else(|| format!("node {i}")))
            .collect();
        Error::SingularSystem {
            rcond: 0.0,
            nodes: names,
        }
    };
    let lu = lu_factor(sys.n, sys.a.clone()).ok_or_else(singular_error)?;
    let rcond = rcond_estimate(a_norm, &lu);
    if rcond < RCOND_MIN {
        let mut err = singular_error();
        if let Error::SingularSystem { rcond: r, .. } = &mut err {
            *r = rcond;
        }
        return Err(err);
    }
    let mut x = sys.b.clone();
    lu.solve_in_place(&mut x);
    for (i, v) in x.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(singular_error());
        }
        if *v < 0.0 {
            if *v > -NEGATIVE_TOLERANCE {
                *v = 0.0;
            } else {
                return Err(Error::InfeasibleFlow {
                    label: labels.get(i).cloned().unwrap_or_else(|| format!("node {i}")),
                    value: *v,
                });
            }
        }
    }
    Ok(x)
}

/// Solve the mass-balance system for nodal flows `x = (I − Φᵀ)⁻¹ q`.
pub fn solve_nodal_flows(
    structure: &NetworkStructure,
    phi: &AllocationMatrix,
    q: &ExternalInputs,
) -> Result<NodalFlows> {
    let sys = assemble_system(structure, phi, q)?;
    let x = solve_system(structure, &sys, &[])?;
    Ok(NodalFlows { x })
}

/// Predicted quantities of interest for a design: `G_k = φ_ij · x_i` for an
/// edge target `(i, j)` (zero when the structure lacks the edge) and
/// `G_k = q_i` for an external-input target.
pub fn compute_qoi(
    structure: &NetworkStructure,
    phi: &AllocationMatrix,
    q: &ExternalInputs,
    design: &Design,
) -> Result<Vec<f64>> {
    let flows = solve_nodal_flows(structure, phi, q)?;
    let n = structure.n_nodes();
    design
        .targets()
        .iter()
        .map(|t| match *t {
            Target::Edge { from, to } => {
                if from >= n || to >= n {
                    Err(Error::UnknownNode {
                        index: from.max(to),
                        n_nodes: n,
                    })
                } else if structure.has_edge(from, to) {
                    Ok(phi.get(from, to) * flows.get(from))
                } else {
                    Ok(0.0)
                }
            }
            Target::Input { node } => {
                if node >= n {
                    Err(Error::UnknownNode { index: node, n_nodes: n })
                } else {
                    Ok(q.get(node))
                }
            }
        })
        .collect()
}
