//! Candidate network structures for an MFA problem.
//!
//! A problem fixes a node set, a list of base edges that are always present,
//! and an ordered list of uncertain edges. Every on/off combination of the
//! uncertain edges is one candidate structure, so `n_L` uncertain edges give
//! `2^{n_L}` candidates. Structure `m` contains uncertain edge `l` exactly
//! when bit `l` of `m` is set, and the conventional code string (e.g. `"1010"`)
//! prints uncertain edge 0 leftmost.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Dense, label-addressable node set. Indices are assigned in declaration
/// order and never change.
#[derive(Debug, Clone)]
pub struct Nodes {
    labels: Vec<String>,
    by_label: HashMap<String, usize>,
}

impl Nodes {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut by_label = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if by_label.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidAllocationPrior {
                    label: label.clone(),
                    detail: "duplicate node label".into(),
                });
            }
        }
        Ok(Self { labels, by_label })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.by_label.get(label).copied()
    }
}

/// One directed edge by node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }
}

/// One candidate structure: the realized edge set plus its on/off code over
/// the problem's uncertain edges.
#[derive(Debug, Clone)]
pub struct NetworkStructure {
    model_index: usize,
    n_nodes: usize,
    uncertain_code: Vec<bool>,
    /// Outgoing targets per node, in canonical declaration order (base edges
    /// first, surviving uncertain edges after). Allocation fractions and
    /// Dirichlet hyper-parameters align with this order.
    out_edges: Vec<Vec<usize>>,
    edge_set: HashSet<Edge>,
    external_input_nodes: Vec<usize>,
}

impl NetworkStructure {
    /// Build a structure from an explicit edge list (already in canonical
    /// order). Rejects self-loops, duplicate edges, and out-of-range nodes.
    pub fn from_edges(
        nodes: &Nodes,
        model_index: usize,
        uncertain_code: Vec<bool>,
        edges: &[Edge],
        external_input_nodes: &[usize],
    ) -> Result<Self> {
        let n = nodes.len();
        let mut out_edges = vec![Vec::new(); n];
        let mut edge_set = HashSet::with_capacity(edges.len());
        for e in edges {
            if e.from >= n || e.to >= n {
                return Err(Error::UnknownNode {
                    index: e.from.max(e.to),
                    n_nodes: n,
                });
            }
            if e.from == e.to {
                return Err(Error::SelfLoop {
                    label: nodes.label(e.from).to_string(),
                });
            }
            if !edge_set.insert(*e) {
                return Err(Error::DuplicateUncertainEdge {
                    from: nodes.label(e.from).to_string(),
                    to: nodes.label(e.to).to_string(),
                });
            }
            out_edges[e.from].push(e.to);
        }
        for &i in external_input_nodes {
            if i >= n {
                return Err(Error::UnknownNode { index: i, n_nodes: n });
            }
        }
        Ok(Self {
            model_index,
            n_nodes: n,
            uncertain_code,
            out_edges,
            edge_set,
            external_input_nodes: external_input_nodes.to_vec(),
        })
    }

    pub fn model_index(&self) -> usize {
        self.model_index
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edge_set.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edge_set.contains(&Edge { from, to })
    }

    /// Outgoing targets of `node` in canonical order.
    pub fn out_targets(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn external_input_nodes(&self) -> &[usize] {
        &self.external_input_nodes
    }

    pub fn uncertain_code(&self) -> &[bool] {
        &self.uncertain_code
    }

    /// Code string with uncertain edge 0 leftmost, e.g. `"1010"`.
    pub fn code_string(&self) -> String {
        self.uncertain_code
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    /// Nodes on allocation-conserving cycles: members of a strongly connected
    /// component of size > 1 whose every member routes all of its allocation
    /// to other members. Such a component traps mass and makes `I - Φᵀ`
    /// singular; this is the diagnostic attached to singular-system errors.
    pub fn conserving_cycle_nodes(&self) -> Vec<usize> {
        let sccs = strongly_connected_components(&self.out_edges);
        let mut flagged = Vec::new();
        for scc in sccs {
            if scc.len() < 2 {
                continue;
            }
            let members: HashSet<usize> = scc.iter().copied().collect();
            let closed = scc
                .iter()
                .all(|&i| self.out_edges[i].iter().all(|t| members.contains(t)));
            if closed {
                flagged.extend(scc);
            }
        }
        flagged.sort_unstable();
        flagged
    }

    /// All nodes on any directed cycle. Used as a fallback diagnostic when a
    /// system is near-singular without a strictly conserving cycle (e.g. the
    /// leak fractions of a cycle were sampled close to zero).
    pub fn cycle_nodes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = strongly_connected_components(&self.out_edges)
            .into_iter()
            .filter(|scc| scc.len() >= 2)
            .flatten()
            .collect();
        out.sort_unstable();
        out
    }
}

/// Iterative Tarjan SCC over adjacency lists.
fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next_index = 0usize;
    let mut sccs = Vec::new();
    // Explicit DFS stack of (node, next child position).
    let mut call_stack: Vec<(usize, usize)> = Vec::new();
    for start in 0..n {
        if index[start] != usize::MAX {
            continue;
        }
        call_stack.push((start, 0));
        index[start] = next_index;
        low[start] = next_index;
        next_index += 1;
        stack.push(start);
        on_stack[start] = true;
        while let Some(&mut (v, ref mut child)) = call_stack.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call_stack.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call_stack.pop();
                if let Some(&(parent, _)) = call_stack.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut scc = Vec::new();
                    while let Some(w) = stack.pop() {
                        on_stack[w] = false;
                        scc.push(w);
                        if w == v {
                            break;
                        }
                    }
                    sccs.push(scc);
                }
            }
        }
    }
    sccs
}

/// Prior over candidate structures.
#[derive(Debug, Clone)]
pub enum PriorKind {
    /// Every structure gets `1 / 2^{n_L}`.
    Uniform,
    /// Independent per-uncertain-edge presence probabilities; a structure's
    /// prior is the product over edges of `p` (present) or `1 - p` (absent).
    PerEdgeProbabilities(Vec<f64>),
}

/// The full candidate pool with its prior.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    nodes: Nodes,
    structures: Vec<NetworkStructure>,
    model_prior: Vec<f64>,
    uncertain_edges: Vec<Edge>,
}

impl CandidateSet {
    pub fn nodes(&self) -> &Nodes {
        &self.nodes
    }

    pub fn structures(&self) -> &[NetworkStructure] {
        &self.structures
    }

    pub fn structure(&self, m: usize) -> &NetworkStructure {
        &self.structures[m]
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    pub fn model_prior(&self) -> &[f64] {
        &self.model_prior
    }

    pub fn uncertain_edges(&self) -> &[Edge] {
        &self.uncertain_edges
    }

    /// The all-edges structure (every uncertain edge present); priors for the
    /// whole pool are stated on this structure and derived per candidate by
    /// the deletion rule.
    pub fn maximal_structure(&self) -> &NetworkStructure {
        &self.structures[self.structures.len() - 1]
    }

    /// Index of the structure with the given code string, if any.
    pub fn find_by_code(&self, code: &str) -> Option<usize> {
        self.structures.iter().position(|s| s.code_string() == code)
    }
}

/// Guard against accidental combinatorial explosions.
pub const MAX_UNCERTAIN_EDGES: usize = 20;

/// Expand the base network and uncertain-edge list into all `2^{n_L}`
/// candidate structures with their prior.
///
/// Candidate `m` contains uncertain edge `l` iff bit `l` of `m` is set, so
/// the last candidate is the maximal (all-edges) structure.
pub fn enumerate_candidates(
    nodes: Nodes,
    base_edges: &[Edge],
    uncertain_edges: &[Edge],
    external_input_nodes: &[usize],
    prior: PriorKind,
) -> Result<CandidateSet> {
    let n_l = uncertain_edges.len();
    if n_l > MAX_UNCERTAIN_EDGES {
        return Err(Error::TooManyUncertainEdges {
            count: n_l,
            max: MAX_UNCERTAIN_EDGES,
        });
    }
    let mut seen: HashSet<Edge> = base_edges.iter().copied().collect();
    for e in uncertain_edges {
        if e.from >= nodes.len() || e.to >= nodes.len() {
            return Err(Error::UnknownNode {
                index: e.from.max(e.to),
                n_nodes: nodes.len(),
            });
        }
        if e.from == e.to {
            return Err(Error::SelfLoop {
                label: nodes.label(e.from).to_string(),
            });
        }
        if !seen.insert(*e) {
            return Err(Error::DuplicateUncertainEdge {
                from: nodes.label(e.from).to_string(),
                to: nodes.label(e.to).to_string(),
            });
        }
    }
    let edge_probs = match &prior {
        PriorKind::Uniform => None,
        PriorKind::PerEdgeProbabilities(ps) => {
            if ps.len() != n_l {
                return Err(Error::LengthMismatch {
                    expected: n_l,
                    got: ps.len(),
                });
            }
            for (p, e) in ps.iter().zip(uncertain_edges) {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::EdgeProbabilityOutOfRange {
                        from: nodes.label(e.from).to_string(),
                        to: nodes.label(e.to).to_string(),
                        value: *p,
                    });
                }
            }
            Some(ps.clone())
        }
    };

    let n_m = 1usize << n_l;
    let mut structures = Vec::with_capacity(n_m);
    let mut model_prior = Vec::with_capacity(n_m);
    for m in 0..n_m {
        let code: Vec<bool> = (0..n_l).map(|l| (m >> l) & 1 == 1).collect();
        let mut edges: Vec<Edge> = base_edges.to_vec();
        edges.extend(
            uncertain_edges
                .iter()
                .enumerate()
                .filter(|(l, _)| code[*l])
                .map(|(_, e)| *e),
        );
        structures.push(NetworkStructure::from_edges(
            &nodes,
            m,
            code.clone(),
            &edges,
            external_input_nodes,
        )?);
        let p = match &edge_probs {
            None => 1.0 / n_m as f64,
            Some(ps) => code
                .iter()
                .zip(ps)
                .map(|(&on, &p)| if on { p } else { 1.0 - p })
                .product(),
        };
        model_prior.push(p);
    }
    let total: f64 = model_prior.iter().sum();
    debug_assert!((total - 1.0).abs() < 1e-12);
    Ok(CandidateSet {
        nodes,
        structures,
        model_prior,
        uncertain_edges: uncertain_edges.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(n: usize) -> Nodes {
        Nodes::new((0..n).map(|i| format!("n{i}")).collect()).unwrap()
    }

    #[test]
    fn uniform_enumeration_covers_all_codes() {
        let base = [Edge::new(0, 1)];
        let uncertain = [
            Edge::new(1, 2),
            Edge::new(1, 3),
            Edge::new(2, 3),
            Edge::new(0, 2),
        ];
        let cs = enumerate_candidates(nodes(4), &base, &uncertain, &[0], PriorKind::Uniform).unwrap();
        assert_eq!(cs.len(), 16);
        for p in cs.model_prior() {
            assert!((p - 1.0 / 16.0).abs() < 1e-15);
        }
        let codes: HashSet<String> = cs.structures().iter().map(|s| s.code_string()).collect();
        assert_eq!(codes.len(), 16);
        assert!(cs.find_by_code("0000") == Some(0));
        assert!(cs.find_by_code("1000") == Some(1));
        assert_eq!(cs.maximal_structure().code_string(), "1111");
        assert_eq!(cs.maximal_structure().n_edges(), 5);
    }

    #[test]
    fn empty_uncertain_list_gives_single_structure() {
        let base = [Edge::new(0, 1)];
        let cs = enumerate_candidates(nodes(2), &base, &[], &[0], PriorKind::Uniform).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.model_prior(), &[1.0]);
        assert_eq!(cs.structure(0).code_string(), "");
    }

    #[test]
    fn per_edge_probabilities_multiply() {
        let uncertain = [Edge::new(0, 1), Edge::new(1, 2)];
        let cs = enumerate_candidates(
            nodes(3),
            &[],
            &uncertain,
            &[0],
            PriorKind::PerEdgeProbabilities(vec![0.5, 0.8]),
        )
        .unwrap();
        let got = cs.model_prior().to_vec();
        let want = [0.1, 0.1, 0.4, 0.4];
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "got {got:?}");
        }
    }

    #[test]
    fn guards_reject_bad_input() {
        let too_many: Vec<Edge> = (0..21).map(|i| Edge::new(i, i + 1)).collect();
        assert!(matches!(
            enumerate_candidates(nodes(22), &[], &too_many, &[], PriorKind::Uniform),
            Err(Error::TooManyUncertainEdges { .. })
        ));
        assert!(matches!(
            enumerate_candidates(
                nodes(3),
                &[Edge::new(0, 1)],
                &[Edge::new(0, 1)],
                &[],
                PriorKind::Uniform
            ),
            Err(Error::DuplicateUncertainEdge { .. })
        ));
        assert!(matches!(
            enumerate_candidates(nodes(3), &[], &[Edge::new(1, 1)], &[], PriorKind::Uniform),
            Err(Error::SelfLoop { .. })
        ));
        assert!(matches!(
            enumerate_candidates(
                nodes(3),
                &[],
                &[Edge::new(0, 1)],
                &[],
                PriorKind::PerEdgeProbabilities(vec![1.0])
            ),
            Err(Error::EdgeProbabilityOutOfRange { .. })
        ));
    }

    #[test]
    fn out_targets_follow_declaration_order() {
        let base = [Edge::new(0, 2), Edge::new(0, 1)];
        let uncertain = [Edge::new(0, 3)];
        let cs = enumerate_candidates(nodes(4), &base, &uncertain, &[0], PriorKind::Uniform).unwrap();
        assert_eq!(cs.structure(0).out_targets(0), &[2, 1]);
        assert_eq!(cs.structure(1).out_targets(0), &[2, 1, 3]);
    }

    #[test]
    fn conserving_cycle_detection() {
        let n = nodes(4);
        // 0 -> 1 -> 2 -> 1 with no leak from {1, 2}: conserving cycle.
        let s = NetworkStructure::from_edges(
            &n,
            0,
            vec![],
            &[Edge::new(0, 1), Edge::new(1, 2), Edge::new(2, 1)],
            &[0],
        )
        .unwrap();
        assert_eq!(s.conserving_cycle_nodes(), vec![1, 2]);
        // Adding a leak 2 -> 3 makes the cycle non-conserving.
        let s = NetworkStructure::from_edges(
            &n,
            0,
            vec![],
            &[
                Edge::new(0, 1),
                Edge::new(1, 2),
                Edge::new(2, 1),
                Edge::new(2, 3),
            ],
            &[0],
        )
        .unwrap();
        assert!(s.conserving_cycle_nodes().is_empty());
    }
}
