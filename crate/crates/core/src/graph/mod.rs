//! Graph containers, batching, dataset files and synthetic generators.

mod batch;
mod io;
mod synth;

pub use batch::{batch_graphs, Batch, BatchTargets};
pub use io::{graph_from_json_line, graph_to_json_line, load_dataset, parse_dataset, save_dataset};
pub use synth::{gen_synthetic, sbm_graph, SbmTally, SynthKind, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A labelled candidate node pair for link prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLabel {
    pub u: usize,
    pub v: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Only used for merged batch graphs; dataset files always carry a label.
    None,
    Class(usize),
    Multi(Vec<bool>),
    Nodes(Vec<usize>),
    Pairs(Vec<PairLabel>),
}

impl Label {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Label::None => "none",
            Label::Class(_) => "graph class",
            Label::Multi(_) => "multi-label",
            Label::Nodes(_) => "node class",
            Label::Pairs(_) => "node pairs",
        }
    }
}

/// Undirected graph stored as symmetric directed CSR keyed by destination.
///
/// Directed edge `e` runs `sources[e] -> targets[e]`; the edges arriving at
/// node `u` occupy `offsets[u]..offsets[u + 1]`. Self-loops are rejected:
/// layers add the self term explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    edge_origin: Vec<usize>,
    x: Tensor,
    edge_attr: Option<Tensor>,
    label: Label,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<[usize; 2]>,
        x: Tensor,
        edge_attr: Option<Tensor>,
        label: Label,
    ) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != num_nodes {
            return Err(Error::Validation(format!(
                "node features have shape {:?}, expected {num_nodes} rows",
                x.shape()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &[a, b] in &edges {
            for idx in [a, b] {
                if idx >= num_nodes {
                    return Err(Error::Validation(format!(
                        "edge [{a}, {b}] references node {idx} but the graph has {num_nodes} nodes"
                    )));
                }
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop [{a}, {b}] is not allowed")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate edge [{a}, {b}]")));
            }
        }
        if let Some(ea) = &edge_attr {
            if ea.shape().len() != 2 || ea.rows() != edges.len() {
                return Err(Error::Validation(format!(
                    "edge features have shape {:?}, expected {} rows",
                    ea.shape(),
                    edges.len()
                )));
            }
        }
        match &label {
            Label::Nodes(y) if y.len() != num_nodes => {
                return Err(Error::Validation(format!(
                    "{} node labels for {num_nodes} nodes",
                    y.len()
                )))
            }
            Label::Pairs(pairs) => {
                if let Some(p) = pairs.iter().find(|p| p.u >= num_nodes || p.v >= num_nodes) {
                    return Err(Error::Validation(format!(
                        "pair [{}, {}] references a node outside 0..{num_nodes}",
                        p.u, p.v
                    )));
                }
            }
            _ => {}
        }

        let edge_attr = edge_attr.filter(|ea| ea.rows() > 0);

        let mut directed: Vec<(usize, usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for (k, &[a, b]) in edges.iter().enumerate() {
            directed.push((b, a, k));
            directed.push((a, b, k));
        }
        directed.sort_unstable();
        let mut offsets = vec![0; num_nodes + 1];
        for &(dst, _, _) in &directed {
            offsets[dst + 1] += 1;
        }
        for u in 0..num_nodes {
            offsets[u + 1] += offsets[u];
        }
        let targets = directed.iter().map(|d| d.0).collect();
        let sources = directed.iter().map(|d| d.1).collect();
        let edge_origin = directed.iter().map(|d| d.2).collect();
        Ok(Self {
            num_nodes,
            edges,
            offsets,
            sources,
            targets,
            edge_origin,
            x,
            edge_attr,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored directed edges (twice the undirected count).
    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    /// Undirected edge list in input order.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.sources[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    /// Edge features per undirected input edge.
    pub fn edge_attr(&self) -> Option<&Tensor> {
        self.edge_attr.as_ref()
    }

    pub fn edge_feature_dim(&self) -> Option<usize> {
        self.edge_attr.as_ref().map(Tensor::cols)
    }

    /// Edge features expanded to the directed CSR order.
    pub fn directed_edge_attr(&self) -> Option<Tensor> {
        let ea = self.edge_attr.as_ref()?;
        let c = ea.cols();
        let mut data = Vec::with_capacity(self.num_edges() * c);
        for &k in &self.edge_origin {
            data.extend_from_slice(ea.row(k));
        }
        Some(Tensor::matrix(self.num_edges(), c, data).expect("edge attr shape"))
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    /// Row `u` of the result is the sum of `h` over the neighbours of `u`.
    pub fn neighbor_sum(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let rows = tape.value(h).rows();
        if rows != self.num_nodes {
            return Err(Error::dim(
                "neighbor_sum",
                format!("features have {rows} rows, graph has {} nodes", self.num_nodes),
            ));
        }
        tape.spmm(&self.offsets, &self.sources, None, h)
    }

    /// Dense `n x n` adjacency. Only meant for oracles on small graphs.
    pub fn dense_adjacency(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.num_nodes]; self.num_nodes];
        for &[u, v] in &self.edges {
            a[u][v] = 1.0;
            a[v][u] = 1.0;
        }
        a
    }

    /// Relabels node `i` as `perm[i]`, carrying features and labels along.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::dim("permuted", "permutation length differs from node count"));
        }
        let edges = self.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect();
        let label = match &self.label {
            Label::Nodes(y) => {
                let mut out = vec![0; y.len()];
                for (i, &p) in perm.iter().enumerate() {
                    out[p] = y[i];
                }
                Label::Nodes(out)
            }
            Label::Pairs(pairs) => Label::Pairs(
                pairs
                    .iter()
                    .map(|p| PairLabel {
                        u: perm[p.u],
                        v: perm[p.v],
                        positive: p.positive,
                    })
                    .collect(),
            ),
            other => other.clone(),
        };
        Graph::new(
            self.num_nodes,
            edges,
            self.x.permute_rows(perm),
            self.edge_attr.clone(),
            label,
        )
    }

    pub(crate) fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(rows: &[f64]) -> Tensor {
        Tensor::column(rows.to_vec())
    }

    #[test]
    fn csr_invariants_hold() {
        let g = Graph::new(4, vec![[0, 1], [2, 1], [3, 0]], features(&[0.0; 4]), None, Label::Class(0)).unwrap();
        assert_eq!(g.num_edges(), 6);
        assert_eq!(*g.offsets().last().unwrap(), 6);
        assert!(g.offsets().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.degree(0), 2);
    }

    #[test]
    fn rejects_bad_edges() {
        let x = features(&[0.0; 3]);
        let err = Graph::new(3, vec![[0, 7]], x.clone(), None, Label::Class(0)).unwrap_err();
        assert!(err.to_string().contains('7'));
        assert!(Graph::new(3, vec![[1, 1]], x.clone(), None, Label::Class(0)).is_err());
        assert!(Graph::new(3, vec![[0, 1], [1, 0]], x, None, Label::Class(0)).is_err());
    }

    #[test]
    fn neighbor_sum_small_cases() {
        let g = Graph::new(2, vec![[0, 1]], features(&[1.0, 2.0]), None, Label::Class(0)).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(g.x().clone());
        let s = g.neighbor_sum(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 1.0]);

        let g = Graph::new(3, vec![[0, 1]], features(&[1.0, 2.0, 5.0]), None, Label::Class(0)).unwrap();
        let h = tape.constant(g.x().clone());
        let s = g.neighbor_sum(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.0);

        let wrong = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(g.neighbor_sum(&mut tape, wrong), Err(Error::Dimension { .. })));
    }

    fn dense_oracle(g: &Graph, h: &Tensor) -> Vec<f64> {
        let a = g.dense_adjacency();
        let (n, d) = h.dims();
        let mut out = vec![0.0; n * d];
        for u in 0..n {
            for v in 0..n {
                for j in 0..d {
                    out[u * d + j] += a[u][v] * h.get(v, j);
                }
            }
        }
        out
    }

    fn arb_graph() -> impl Strategy<Value = (Graph, Tensor, Vec<usize>)> {
        (1usize..=32).prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let m = pairs.len();
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), m),
                proptest::collection::vec(-10.0f64..10.0, n * 3),
                proptest::collection::vec(any::<u64>(), n).prop_map(|keys| {
                    let mut order: Vec<usize> = (0..keys.len()).collect();
                    order.sort_by_key(|&i| (keys[i], i));
                    order
                }),
                Just(pairs),
            )
                .prop_map(|(n, keep, feats, perm, pairs)| {
                    let edges = pairs
                        .iter()
                        .zip(&keep)
                        .filter(|(_, &k)| k)
                        .map(|(&(a, b), _)| [a, b])
                        .collect();
                    let x = Tensor::matrix(n, 3, feats).unwrap();
                    (Graph::new(n, edges, x.clone(), None, Label::Class(0)).unwrap(), x, perm)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn neighbor_sum_matches_dense_oracle((g, x, _) in arb_graph()) {
            let mut tape = Tape::new();
            let h = tape.constant(x.clone());
            let s = g.neighbor_sum(&mut tape, h).unwrap();
            let expect = dense_oracle(&g, &x);
            for (a, b) in tape.value(s).data().iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn neighbor_sum_is_permutation_consistent((g, x, perm) in arb_graph()) {
            let mut tape = Tape::new();
            let h = tape.constant(x.clone());
            let s = g.neighbor_sum(&mut tape, h).unwrap();
            let expected = tape.value(s).permute_rows(&perm);
            let pg = g.permuted(&perm).unwrap();
            let ph = tape.constant(pg.x().clone());
            let ps = pg.neighbor_sum(&mut tape, ph).unwrap();
            prop_assert!(tape.value(ps).max_abs_diff(&expected) <= 1e-12);
        }
    }
}
