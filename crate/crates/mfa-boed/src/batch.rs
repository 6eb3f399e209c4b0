//! The shared sample batch behind the nested Monte Carlo estimators.
//!
//! One batch holds `N` prior parameter draws per candidate structure and the
//! predicted QoIs `G(θ_m^{(s)}, k; M_m)` for every target `k` in a target
//! universe. The same draws serve the outer loop (synthetic data generation)
//! and both inner loops (evidence and marginal estimates), which caps the
//! unique MFA solves at exactly `n_M · N` per batch — the sample-reuse cost —
//! instead of one solve per likelihood evaluation.

use rayon::prelude::*;
use std::collections::HashMap;

use crate::design::Target;
use crate::error::{Error, Result};
use crate::linsys::{
    lu_factor_in_place, lu_solve, norm1, rcond_from_factors, NEGATIVE_TOLERANCE, RCOND_MIN,
};
use crate::network::CandidateSet;
use crate::priors::{
    derive_all_structures, sample_input, sample_node_fractions, AllocationPrior, InputPrior,
    NodePrior,
};
use crate::rng::{RngFactory, StreamPurpose};

/// Sanitation floor: predicted QoIs at or below zero (possible only through
/// extreme underflow of a Dirichlet tail) are floored here before taking
/// reciprocals and logs, keeping the likelihood kernel free of NaNs while
/// still assigning such samples essentially zero likelihood for any
/// measurement of ordinary magnitude.
const G_FLOOR: f64 = 1e-300;

/// Precomputed per-(target, structure) sample columns.
struct TargetColumn {
    /// Raw predicted QoI per sample (used to synthesize observations).
    g: Vec<f64>,
    /// `1 / max(g, floor)` for the likelihood kernel.
    inv_g: Vec<f64>,
    /// `ln(max(g, floor))` for the likelihood kernel.
    ln_g: Vec<f64>,
}

/// Shared batch: `n_M × N` parameter draws with QoI tables over a target
/// universe.
pub struct ReuseBatch {
    n_models: usize,
    n_samples: usize,
    seed: u64,
    universe: Vec<Target>,
    target_index: HashMap<Target, usize>,
    /// `columns[k][m]`: `None` when structure `m` lacks edge target `k`.
    columns: Vec<Vec<Option<TargetColumn>>>,
    model_prior: Vec<f64>,
    ln_prior: Vec<f64>,
    solve_count: u64,
}

impl std::fmt::Debug for ReuseBatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReuseBatch")
            .field("n_models", &self.n_models)
            .field("n_samples", &self.n_samples)
            .field("seed", &self.seed)
            .field("targets", &self.universe.len())
            .field("solve_count", &self.solve_count)
            .finish()
    }
}

impl ReuseBatch {
    /// Draw `n` prior samples per structure and precompute the QoI tables for
    /// `universe`. Performs exactly `candidates.len() * n` MFA solves.
    ///
    /// Parameter streams are keyed by `(structure, sample)`, so the table is
    /// reproducible for a seed regardless of scheduling.
    pub fn build(
        candidates: &CandidateSet,
        base_alloc: &AllocationPrior,
        input: &InputPrior,
        universe: &[Target],
        n: usize,
        factory: &RngFactory,
    ) -> Result<Self> {
        if n < 1 {
            return Err(Error::SampleBudget { min: 1, got: n });
        }
        let n_nodes = candidates.nodes().len();
        for t in universe {
            let bad = match *t {
                Target::Edge { from, to } => from.max(to),
                Target::Input { node } => node,
            };
            if bad >= n_nodes {
                return Err(Error::UnknownNode {
                    index: bad,
                    n_nodes,
                });
            }
        }
        let derived = derive_all_structures(base_alloc, candidates)?;
        for s in candidates.structures() {
            input.check_covers(s)?;
        }

        let n_models = candidates.len();
        let labels = candidates.nodes().labels();
        // One independent build task per structure.
        let per_structure: Result<Vec<Vec<Option<TargetColumn>>>> = (0..n_models)
            .into_par_iter()
            .map(|m| {
                build_structure_columns(
                    candidates,
                    &derived[m],
                    input,
                    universe,
                    m,
                    n,
                    factory,
                    labels,
                )
            })
            .collect();
        let per_structure = per_structure?;

        // Transpose to columns[k][m].
        let mut columns: Vec<Vec<Option<TargetColumn>>> = universe
            .iter()
            .map(|_| Vec::with_capacity(n_models))
            .collect();
        for structure_cols in per_structure {
            for (k, col) in structure_cols.into_iter().enumerate() {
                columns[k].push(col);
            }
        }

        let mut target_index = HashMap::with_capacity(universe.len());
        for (k, t) in universe.iter().enumerate() {
            target_index.insert(*t, k);
        }
        let model_prior = candidates.model_prior().to_vec();
        let ln_prior = model_prior
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self {
            n_models,
            n_samples: n,
            seed: factory.seed(),
            universe: universe.to_vec(),
            target_index,
            columns,
            model_prior,
            ln_prior,
            solve_count: (n_models * n) as u64,
        })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn universe(&self) -> &[Target] {
        &self.universe
    }

    /// Unique MFA solves performed while filling the batch.
    pub fn solve_count(&self) -> u64 {
        self.solve_count
    }

    pub fn model_prior(&self) -> &[f64] {
        &self.model_prior
    }

    pub(crate) fn ln_prior(&self) -> &[f64] {
        &self.ln_prior
    }

    pub fn target_index(&self, target: &Target) -> Option<usize> {
        self.target_index.get(target).copied()
    }

    /// Raw per-sample QoIs for `(target, structure)`; `None` when the
    /// structure lacks the edge.
    pub fn qoi_samples(&self, target_k: usize, m: usize) -> Option<&[f64]> {
        self.columns[target_k][m].as_ref().map(|c| c.g.as_slice())
    }

    pub(crate) fn kernel_columns(&self, target_k: usize, m: usize) -> Option<(&[f64], &[f64])> {
        self.columns[target_k][m]
            .as_ref()
            .map(|c| (c.inv_g.as_slice(), c.ln_g.as_slice()))
    }
}

#[allow(clippy::too_many_arguments)]
fn build_structure_columns(
    candidates: &CandidateSet,
    alloc: &AllocationPrior,
    input: &InputPrior,
    universe: &[Target],
    m: usize,
    n: usize,
    factory: &RngFactory,
    labels: &[String],
) -> Result<Vec<Option<TargetColumn>>> {
    let structure = candidates.structure(m);
    let n_nodes = structure.n_nodes();

    // Resolve each universe target against this structure once.
    enum Resolved {
        Absent,
        Input(usize),
        /// (source node, offset into the flat fraction buffer)
        Edge(usize, usize),
    }
    let mut frac_offset = vec![usize::MAX; n_nodes];
    let mut total_fracs = 0usize;
    for node in 0..n_nodes {
        let outs = structure.out_targets(node);
        if !outs.is_empty() {
            frac_offset[node] = total_fracs;
            total_fracs += outs.len();
        }
    }
    let resolved: Vec<Resolved> = universe
        .iter()
        .map(|t| match *t {
            Target::Input { node } => Resolved::Input(node),
            Target::Edge { from, to } => {
                if structure.has_edge(from, to) {
                    let pos = structure
                        .out_targets(from)
                        .iter()
                        .position(|&x| x == to)
                        .expect("edge present");
                    Resolved::Edge(from, frac_offset[from] + pos)
                } else {
                    Resolved::Absent
                }
            }
        })
        .collect();

    let mut g_cols: Vec<Option<Vec<f64>>> = resolved
        .iter()
        .map(|r| match r {
            Resolved::Absent => None,
            _ => Some(Vec::with_capacity(n)),
        })
        .collect();

    // Node priors in index order, with their targets, for the sampling loop.
    let node_priors: Vec<Option<(&[usize], &NodePrior)>> = (0..n_nodes)
        .map(|node| {
            if structure.out_targets(node).is_empty() {
                None
            } else {
                alloc.node_prior(node)
            }
        })
        .collect();
    for (node, p) in node_priors.iter().enumerate() {
        if !structure.out_targets(node).is_empty() && p.is_none() {
            return Err(Error::InvalidAllocationPrior {
                label: labels
                    .get(node)
                    .cloned()
                    .unwrap_or_else(|| format!("node {node}")),
                detail: "no prior for node with outgoing edges".into(),
            });
        }
    }

    let mut fracs = vec![0.0f64; total_fracs];
    let mut node_buf: Vec<f64> = Vec::new();
    let mut a = vec![0.0f64; n_nodes * n_nodes];
    let mut piv = vec![0usize; n_nodes];
    let mut x = vec![0.0f64; n_nodes];
    let mut q = vec![0.0f64; n_nodes];
    let mut rcond_ws = vec![0.0f64; 2 * n_nodes];

    let solve_error = |rcond: f64| -> Error {
        let mut nodes = structure.conserving_cycle_nodes();
        if nodes.is_empty() {
            nodes = structure.cycle_nodes();
        }
        let names = nodes
            .into_iter()
            .map(|i| labels.get(i).cloned().unwrap_or_else(|| format!("node {i}")))
            .collect();
        Error::StructureSolve {
            structure: m,
            code: structure.code_string(),
            source: Box::new(Error::SingularSystem { rcond, nodes: names }),
        }
    };

    for s in 0..n {
        let mut rng = factory.stream(StreamPurpose::BatchParams, m as u64, s as u64);
        // Draw allocations node by node in index order.
        for node in 0..n_nodes {
            if let Some((_, prior)) = node_priors[node] {
                sample_node_fractions(prior, &mut rng, &mut node_buf);
                let off = frac_offset[node];
                fracs[off..off + node_buf.len()].copy_from_slice(&node_buf);
            }
        }
        q.fill(0.0);
        for &node in structure.external_input_nodes() {
            q[node] = sample_input(input.kind(node).expect("covered"), &mut rng);
        }
        // A = I - Phi^T.
        a.fill(0.0);
        for d in 0..n_nodes {
            a[d * n_nodes + d] = 1.0;
        }
        for node in 0..n_nodes {
            let outs = structure.out_targets(node);
            if outs.is_empty() {
                continue;
            }
            let off = frac_offset[node];
            for (j, &t) in outs.iter().enumerate() {
                a[t * n_nodes + node] -= fracs[off + j];
            }
        }
        let a_norm = norm1(n_nodes, &a);
        if !lu_factor_in_place(n_nodes, &mut a, &mut piv) {
            return Err(solve_error(0.0));
        }
        let rcond = rcond_from_factors(a_norm, n_nodes, &a, &piv, &mut rcond_ws);
        if rcond < RCOND_MIN {
            return Err(solve_error(rcond));
        }
        x.copy_from_slice(&q);
        lu_solve(n_nodes, &a, &piv, &mut x);
        for (node, v) in x.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(solve_error(rcond));
            }
            if *v < 0.0 {
                if *v > -NEGATIVE_TOLERANCE {
                    *v = 0.0;
                } else {
                    return Err(Error::StructureSolve {
                        structure: m,
                        code: structure.code_string(),
                        source: Box::new(Error::InfeasibleFlow {
                            label: labels
                                .get(node)
                                .cloned()
                                .unwrap_or_else(|| format!("node {node}")),
                            value: *v,
                        }),
                    });
                }
            }
        }
        for (r, col) in resolved.iter().zip(g_cols.iter_mut()) {
            match (r, col) {
                (Resolved::Input(node), Some(col)) => col.push(q[*node]),
                (Resolved::Edge(node, off), Some(col)) => col.push(fracs[*off] * x[*node]),
                (Resolved::Absent, None) => {}
                _ => unreachable!(),
            }
        }
    }

    Ok(g_cols
        .into_iter()
        .map(|col| {
            col.map(|g| {
                let inv_g: Vec<f64> = g.iter().map(|&v| 1.0 / v.max(G_FLOOR)).collect();
                let ln_g: Vec<f64> = g.iter().map(|&v| v.max(G_FLOOR).ln()).collect();
                TargetColumn { g, inv_g, ln_g }
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{enumerate_candidates, Edge, Nodes, PriorKind};
    use crate::priors::InputKind;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn small_problem() -> (CandidateSet, AllocationPrior, InputPrior) {
        let nodes = Nodes::new(labels(3)).unwrap();
        let cs = enumerate_candidates(
            nodes,
            &[Edge::new(0, 1)],
            &[Edge::new(0, 2)],
            &[0],
            PriorKind::Uniform,
        )
        .unwrap();
        let alloc = AllocationPrior::new(
            3,
            [(0usize, vec![(1usize, 4.0), (2, 2.0)])],
            [],
            &labels(3),
        )
        .unwrap();
        let input = InputPrior::new(
            3,
            [(0, InputKind::TruncatedNormal { mean: 10.0, sd: 1.0 })],
            &labels(3),
        )
        .unwrap();
        (cs, alloc, input)
    }

    #[test]
    fn solve_count_is_models_times_samples() {
        let (cs, alloc, input) = small_problem();
        let universe = [Target::Edge { from: 0, to: 1 }, Target::Input { node: 0 }];
        let f = RngFactory::new(1);
        let b = ReuseBatch::build(&cs, &alloc, &input, &universe, 500, &f).unwrap();
        assert_eq!(b.solve_count(), 2 * 500);
        let b1 = ReuseBatch::build(&cs, &alloc, &input, &universe, 1, &f).unwrap();
        assert_eq!(b1.solve_count(), 2);
    }

    #[test]
    fn absent_target_has_no_column() {
        let (cs, alloc, input) = small_problem();
        let universe = [Target::Edge { from: 0, to: 2 }];
        let f = RngFactory::new(2);
        let b = ReuseBatch::build(&cs, &alloc, &input, &universe, 16, &f).unwrap();
        // Structure 0 lacks 0 -> 2; structure 1 has it.
        assert!(b.qoi_samples(0, 0).is_none());
        let col = b.qoi_samples(0, 1).unwrap();
        assert_eq!(col.len(), 16);
        assert!(col.iter().all(|&g| g > 0.0 && g < 20.0));
    }

    #[test]
    fn batch_is_reproducible_and_seed_sensitive() {
        let (cs, alloc, input) = small_problem();
        let universe = [Target::Edge { from: 0, to: 1 }];
        let a = ReuseBatch::build(&cs, &alloc, &input, &universe, 64, &RngFactory::new(5)).unwrap();
        let b = ReuseBatch::build(&cs, &alloc, &input, &universe, 64, &RngFactory::new(5)).unwrap();
        let c = ReuseBatch::build(&cs, &alloc, &input, &universe, 64, &RngFactory::new(6)).unwrap();
        assert_eq!(a.qoi_samples(0, 0).unwrap(), b.qoi_samples(0, 0).unwrap());
        assert_ne!(a.qoi_samples(0, 0).unwrap(), c.qoi_samples(0, 0).unwrap());
    }

    #[test]
    fn singular_structure_names_itself() {
        let nodes = Nodes::new(labels(3)).unwrap();
        // Base chain plus an uncertain return edge closing a conserving cycle.
        let cs = enumerate_candidates(
            nodes,
            &[Edge::new(0, 1), Edge::new(1, 2)],
            &[Edge::new(2, 1)],
            &[0],
            PriorKind::Uniform,
        )
        .unwrap();
        let alloc = AllocationPrior::new(
            3,
            [(1usize, vec![(2usize, 1.0)])],
            [
                (0usize, vec![(1usize, 1.0)]),
                (2usize, vec![(1usize, 1.0)]),
            ],
            &labels(3),
        )
        .unwrap();
        let input = InputPrior::new(3, [(0, InputKind::Fixed(1.0))], &labels(3)).unwrap();
        let universe = [Target::Edge { from: 0, to: 1 }];
        let err = ReuseBatch::build(&cs, &alloc, &input, &universe, 8, &RngFactory::new(3));
        match err {
            Err(Error::StructureSolve { structure, code, .. }) => {
                assert_eq!(structure, 1);
                assert_eq!(code, "1");
            }
            other => panic!("expected structure solve failure, got {other:?}"),
        }
    }
}
