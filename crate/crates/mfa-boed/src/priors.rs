//! Prior distributions over MFA parameters.
//!
//! Allocation fractions get per-node Dirichlet priors over the node's
//! outgoing edges, which keeps every sample on the mass-balance simplex.
//! External inputs get truncated normal priors with a lower bound of zero.
//! Priors are stated once on the maximal (all-edges) structure; the prior for
//! any other candidate is derived by deleting the hyper-parameters of the
//! edges that candidate lacks while keeping the rest unchanged.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linsys::{AllocationMatrix, ExternalInputs};
use crate::network::NetworkStructure;
use crate::numeric::{normal_cdf, truncated_normal_mean};

/// Minimum acceptance probability for rejection sampling of a truncated
/// normal; priors below this are rejected as pathological.
pub const MIN_TRUNCATION_ACCEPTANCE: f64 = 1e-6;

/// Per-node allocation prior over an ordered target list.
#[derive(Debug, Clone, PartialEq)]
pub enum NodePrior {
    /// Dirichlet hyper-parameters, one per outgoing edge.
    Dirichlet(Vec<f64>),
    /// Point mass: the fractions are known exactly.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct NodeEntry {
    targets: Vec<usize>,
    prior: NodePrior,
}

/// Allocation priors for every node with outgoing edges.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPrior {
    entries: Vec<Option<NodeEntry>>,
}

impl AllocationPrior {
    /// Build a prior keyed by node, each with ordered `(target, value)`
    /// pairs; `value` is a Dirichlet hyper-parameter (or a fixed share for
    /// point-mass nodes).
    pub fn new(
        n_nodes: usize,
        dirichlet: impl IntoIterator<Item = (usize, Vec<(usize, f64)>)>,
        fixed: impl IntoIterator<Item = (usize, Vec<(usize, f64)>)>,
        labels: &[String],
    ) -> Result<Self> {
        let label = |i: usize| -> String {
            labels
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("node {i}"))
        };
        let mut entries: Vec<Option<NodeEntry>> = vec![None; n_nodes];
        let mut insert = |node: usize, pairs: Vec<(usize, f64)>, is_fixed: bool| -> Result<()> {
            if node >= n_nodes {
                return Err(Error::UnknownNode {
                    index: node,
                    n_nodes,
                });
            }
            if pairs.is_empty() {
                return Err(Error::InvalidAllocationPrior {
                    label: label(node),
                    detail: "empty hyper-parameter list".into(),
                });
            }
            for &(_, v) in &pairs {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidAllocationPrior {
                        label: label(node),
                        detail: format!("non-positive hyper-parameter {v}"),
                    });
                }
            }
            let (targets, values): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
            let prior = if is_fixed {
                let total: f64 = values.iter().sum();
                NodePrior::Fixed(values.iter().map(|v| v / total).collect())
            } else {
                NodePrior::Dirichlet(values)
            };
            if entries[node].is_some() {
                return Err(Error::InvalidAllocationPrior {
                    label: label(node),
                    detail: "node declared twice".into(),
                });
            }
            entries[node] = Some(NodeEntry { targets, prior });
            Ok(())
        };
        for (node, pairs) in dirichlet {
            insert(node, pairs, false)?;
        }
        for (node, pairs) in fixed {
            insert(node, pairs, true)?;
        }
        Ok(Self { entries })
    }

    pub fn n_nodes(&self) -> usize {
        self.entries.len()
    }

    /// Ordered `(targets, prior)` for a node, if it has one.
    pub fn node_prior(&self, node: usize) -> Option<(&[usize], &NodePrior)> {
        self.entries[node]
            .as_ref()
            .map(|e| (e.targets.as_slice(), &e.prior))
    }

    /// Apply the deletion rule: for each node, drop the hyper-parameters of
    /// outgoing edges absent from `structure`, keeping the remaining values
    /// unchanged (point-mass weights are renormalized). The base prior must
    /// cover every outgoing edge the structure has.
    pub fn derive_for_structure(&self, structure: &NetworkStructure) -> Result<AllocationPrior> {
        let n = structure.n_nodes();
        if self.entries.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.entries.len(),
            });
        }
        let mut entries: Vec<Option<NodeEntry>> = vec![None; n];
        for node in 0..n {
            let out = structure.out_targets(node);
            if out.is_empty() {
                continue;
            }
            let entry = self.entries[node].as_ref().ok_or_else(|| {
                Error::InvalidAllocationPrior {
                    label: format!("node {node}"),
                    detail: "structure has outgoing edges but the prior does not cover this node"
                        .into(),
                }
            })?;
            let mut targets = Vec::with_capacity(out.len());
            let mut values = Vec::with_capacity(out.len());
            let source = match &entry.prior {
                NodePrior::Dirichlet(v) => v,
                NodePrior::Fixed(v) => v,
            };
            for (t, v) in entry.targets.iter().zip(source) {
                if structure.has_edge(node, *t) {
                    targets.push(*t);
                    values.push(*v);
                }
            }
            if targets.as_slice() != out {
                return Err(Error::InvalidAllocationPrior {
                    label: format!("node {node}"),
                    detail: format!(
                        "prior targets {targets:?} do not match structure out-edges {out:?}"
                    ),
                });
            }
            if values.is_empty() {
                return Err(Error::EmptyDerivedPrior {
                    structure: structure.model_index(),
                    label: format!("node {node}"),
                });
            }
            let prior = match &entry.prior {
                NodePrior::Dirichlet(_) => NodePrior::Dirichlet(values),
                NodePrior::Fixed(_) => {
                    let total: f64 = values.iter().sum();
                    if total <= 0.0 {
                        return Err(Error::EmptyDerivedPrior {
                            structure: structure.model_index(),
                            label: format!("node {node}"),
                        });
                    }
                    NodePrior::Fixed(values.iter().map(|v| v / total).collect())
                }
            };
            entries[node] = Some(NodeEntry { targets, prior });
        }
        Ok(AllocationPrior { entries })
    }
}

/// Prior on one external input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputKind {
    /// `Normal(mean, sd)` truncated to `[0, inf)`.
    TruncatedNormal { mean: f64, sd: f64 },
    /// Known exactly.
    Fixed(f64),
}

/// Priors for the external inputs `q`, keyed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPrior {
    entries: Vec<Option<InputKind>>,
}

impl InputPrior {
    pub fn new(
        n_nodes: usize,
        inputs: impl IntoIterator<Item = (usize, InputKind)>,
        labels: &[String],
    ) -> Result<Self> {
        let label = |i: usize| -> String {
            labels
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("node {i}"))
        };
        let mut entries = vec![None; n_nodes];
        for (node, kind) in inputs {
            if node >= n_nodes {
                return Err(Error::UnknownNode {
                    index: node,
                    n_nodes,
                });
            }
            match kind {
                InputKind::TruncatedNormal { mean, sd } => {
                    if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
                        return Err(Error::InvalidInputPrior {
                            label: label(node),
                            detail: format!("mean = {mean}, sd = {sd}"),
                        });
                    }
                    let acceptance = normal_cdf(mean / sd);
                    if acceptance < MIN_TRUNCATION_ACCEPTANCE {
                        return Err(Error::DegenerateTruncation {
                            label: label(node),
                            acceptance,
                        });
                    }
                }
                InputKind::Fixed(v) => {
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(Error::InvalidInputPrior {
                            label: label(node),
                            detail: format!("fixed input {v} must be non-negative"),
                        });
                    }
                }
            }
            if entries[node].replace(kind).is_some() {
                return Err(Error::InvalidInputPrior {
                    label: label(node),
                    detail: "node declared twice".into(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn kind(&self, node: usize) -> Option<InputKind> {
        self.entries[node]
    }

    /// Check that every declared input node of `structure` has a prior.
    pub fn check_covers(&self, structure: &NetworkStructure) -> Result<()> {
        for &node in structure.external_input_nodes() {
            if self.entries.get(node).map_or(true, |e| e.is_none()) {
                return Err(Error::InvalidInputPrior {
                    label: format!("node {node}"),
                    detail: "declared external input has no prior".into(),
                });
            }
        }
        Ok(())
    }
}

/// One draw of the full parameter vector for a structure.
#[derive(Debug, Clone)]
pub struct ParameterSample {
    pub structure_index: usize,
    pub phi: AllocationMatrix,
    pub q: ExternalInputs,
}

/// Derive the base prior for every candidate structure in one pass.
pub fn derive_all_structures(
    base: &AllocationPrior,
    candidates: &crate::network::CandidateSet,
) -> Result<Vec<AllocationPrior>> {
    candidates
        .structures()
        .iter()
        .map(|s| base.derive_for_structure(s))
        .collect()
}

/// Sample one node's allocation fractions into `out`.
pub(crate) fn sample_node_fractions(prior: &NodePrior, rng: &mut impl Rng, out: &mut Vec<f64>) {
    out.clear();
    match prior {
        NodePrior::Fixed(w) => out.extend_from_slice(w),
        NodePrior::Dirichlet(alphas) => {
            if alphas.len() == 1 {
                out.push(1.0);
                return;
            }
            loop {
                out.clear();
                let mut total = 0.0;
                for &a in alphas {
                    // Gamma(a, 1) normalization yields Dirichlet(alphas).
                    let g = Gamma::new(a, 1.0).expect("validated alpha > 0").sample(rng);
                    total += g;
                    out.push(g);
                }
                if total > 0.0 {
                    for v in out.iter_mut() {
                        *v /= total;
                    }
                    return;
                }
            }
        }
    }
}

/// Sample one external input.
pub(crate) fn sample_input(kind: InputKind, rng: &mut impl Rng) -> f64 {
    match kind {
        InputKind::Fixed(v) => v,
        InputKind::TruncatedNormal { mean, sd } => loop {
            let z: f64 = StandardNormal.sample(rng);
            let v = mean + sd * z;
            if v >= 0.0 {
                return v;
            }
        },
    }
}

/// Draw a full parameter sample for `structure` from priors already derived
/// for it. Deterministic given the rng state.
pub fn sample_parameters(
    structure: &NetworkStructure,
    alloc: &AllocationPrior,
    input: &InputPrior,
    rng: &mut impl Rng,
) -> Result<ParameterSample> {
    input.check_covers(structure)?;
    let n = structure.n_nodes();
    let mut phi = AllocationMatrix::zeros(n);
    let mut buf = Vec::new();
    for node in 0..n {
        let targets = structure.out_targets(node);
        if targets.is_empty() {
            continue;
        }
        let (prior_targets, prior) = alloc.node_prior(node).ok_or_else(|| {
            Error::InvalidAllocationPrior {
                label: format!("node {node}"),
                detail: "no prior for node with outgoing edges".into(),
            }
        })?;
        if prior_targets != targets {
            return Err(Error::InvalidAllocationPrior {
                label: format!("node {node}"),
                detail: "prior was not derived for this structure".into(),
            });
        }
        sample_node_fractions(prior, rng, &mut buf);
        for (&t, &f) in targets.iter().zip(&buf) {
            phi.set(node, t, f);
        }
    }
    let mut q = vec![0.0; n];
    for &node in structure.external_input_nodes() {
        let kind = input.kind(node).expect("checked by check_covers");
        q[node] = sample_input(kind, rng);
    }
    Ok(ParameterSample {
        structure_index: structure.model_index(),
        phi,
        q: ExternalInputs::new(q),
    })
}

/// The prior-mean parameter point: Dirichlet means `α / Σα` and exact
/// truncated-normal means (the truncation correction is tiny for the typical
/// `mean >> sd` priors but is applied anyway).
pub fn prior_mean_parameters(
    structure: &NetworkStructure,
    alloc: &AllocationPrior,
    input: &InputPrior,
) -> Result<ParameterSample> {
    input.check_covers(structure)?;
    let n = structure.n_nodes();
    let mut phi = AllocationMatrix::zeros(n);
    for node in 0..n {
        let targets = structure.out_targets(node);
        if targets.is_empty() {
            continue;
        }
        let (prior_targets, prior) = alloc.node_prior(node).ok_or_else(|| {
            Error::InvalidAllocationPrior {
                label: format!("node {node}"),
                detail: "no prior for node with outgoing edges".into(),
            }
        })?;
        if prior_targets != targets {
            return Err(Error::InvalidAllocationPrior {
                label: format!("node {node}"),
                detail: "prior was not derived for this structure".into(),
            });
        }
        match prior {
            NodePrior::Fixed(w) => {
                for (&t, &f) in targets.iter().zip(w) {
                    phi.set(node, t, f);
                }
            }
            NodePrior::Dirichlet(alphas) => {
                let total: f64 = alphas.iter().sum();
                for (&t, &a) in targets.iter().zip(alphas) {
                    phi.set(node, t, a / total);
                }
            }
        }
    }
    let mut q = vec![0.0; n];
    for &node in structure.external_input_nodes() {
        q[node] = match input.kind(node).expect("checked by check_covers") {
            InputKind::Fixed(v) => v,
            InputKind::TruncatedNormal { mean, sd } => truncated_normal_mean(mean, sd),
        };
    }
    Ok(ParameterSample {
        structure_index: structure.model_index(),
        phi,
        q: ExternalInputs::new(q),
    })
}
