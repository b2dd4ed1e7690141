//! Seeded random inputs shared by the property suites and unit tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Label};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub fn random_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_graph(rng: &mut impl Rng, n: usize, d: usize, p: f64) -> Graph {
    random_graph_with_edges(rng, n, d, 0, p)
}

/// Erdos-Renyi graph with uniform node features and, when `edge_dim > 0`,
/// uniform edge features.
pub fn random_graph_with_edges(rng: &mut impl Rng, n: usize, d: usize, edge_dim: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push([a, b]);
            }
        }
    }
    let x = random_tensor(rng, n, d);
    let ea = (edge_dim > 0).then(|| random_tensor(rng, edges.len(), edge_dim));
    Graph::new(n, edges, x, ea, Label::None).unwrap()
}

/// A cycle through all nodes plus random chords, so every node of a graph
/// with three or more nodes has at least two neighbours.
pub fn random_ring_graph(rng: &mut impl Rng, n: usize, d: usize, edge_dim: usize, p: f64) -> Graph {
    let mut edges: Vec<[usize; 2]> = (0..n).filter(|_| n > 1).map(|a| [a, (a + 1) % n]).collect();
    if n == 2 {
        edges.truncate(1);
    }
    for a in 0..n {
        for b in a + 2..n {
            if !(a == 0 && b == n - 1) && rng.random_bool(p) {
                edges.push([a, b]);
            }
        }
    }
    let x = random_tensor(rng, n, d);
    let ea = (edge_dim > 0 && !edges.is_empty()).then(|| random_tensor(rng, edges.len(), edge_dim));
    Graph::new(n, edges, x, ea, Label::None).unwrap()
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every trainable tensor with uniform noise in `[-1, 1]` and
/// every buffer with plausible running statistics.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let is_var = store.name(id).ends_with("running_var");
        let kind = store.kind(id);
        for v in store.get_mut(id).data_mut() {
            *v = match (kind, is_var) {
                (ParamKind::Buffer, true) => rng.random_range(0.5..2.0),
                _ => rng.random_range(-1.0..1.0),
            };
        }
    }
}
