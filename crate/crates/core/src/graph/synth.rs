//! Deterministic synthetic datasets standing in for the benchmark suites.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Label, PairLabel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Stochastic block model; node label = block.
    SbmNode,
    /// Class 0 = cycle of `n` nodes, class 1 = path of `n` nodes.
    CycleVsPath,
    /// Random geometric graphs with spatially close but graph-distant pairs.
    PairContact,
}

impl SynthKind {
    pub const NAMES: [&'static str; 3] = ["sbm-node", "cycle-vs-path", "pair-contact"];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::SbmNode => "sbm-node",
            SynthKind::CycleVsPath => "cycle-vs-path",
            SynthKind::PairContact => "pair-contact",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbm-node" => Ok(SynthKind::SbmNode),
            "cycle-vs-path" => Ok(SynthKind::CycleVsPath),
            "pair-contact" => Ok(SynthKind::PairContact),
            other => Err(Error::Usage(format!(
                "unknown dataset kind `{other}`; valid kinds: {}",
                SynthKind::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Number of graphs.
    pub count: usize,
    /// Nodes per graph for `cycle-vs-path` and `pair-contact`.
    pub n: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Standard deviation of the Gaussian noise on SBM block indicators.
    pub noise: f64,
    /// Contact radius for positive pairs.
    pub radius: f64,
    /// Connection radius of the geometric graph.
    pub edge_radius: f64,
    /// Minimum hop distance for a contact pair.
    pub min_hops: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            count: 16,
            n: 6,
            blocks: 2,
            block_size: 20,
            p_in: 0.3,
            p_out: 0.02,
            noise: 1.0,
            radius: 0.3,
            edge_radius: 0.2,
            min_hops: 3,
        }
    }
}

/// Edge counts observed while sampling one SBM graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SbmTally {
    pub intra_edges: usize,
    pub inter_edges: usize,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

pub fn gen_synthetic(kind: SynthKind, seed: u64, p: &SynthParams) -> Result<Vec<Graph>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::SbmNode => {
            if p.blocks == 0 || p.block_size == 0 {
                return Err(Error::Usage("sbm-node needs blocks >= 1 and block-size >= 1".into()));
            }
            check_prob("p-in", p.p_in)?;
            check_prob("p-out", p.p_out)?;
            (0..p.count)
                .map(|_| sbm_graph(&mut rng, p.blocks, p.block_size, p.p_in, p.p_out, p.noise).map(|(g, _)| g))
                .collect()
        }
        SynthKind::CycleVsPath => {
            if p.n < 3 {
                return Err(Error::Usage("cycle-vs-path needs n >= 3".into()));
            }
            let mut classes: Vec<usize> = (0..p.count).map(|i| usize::from(i >= p.count / 2)).collect();
            classes.shuffle(&mut rng);
            classes
                .into_iter()
                .map(|c| cycle_or_path(&mut rng, p.n, c))
                .collect()
        }
        SynthKind::PairContact => {
            if p.n < 2 {
                return Err(Error::Usage("pair-contact needs n >= 2".into()));
            }
            (0..p.count).map(|_| pair_contact_graph(&mut rng, p)).collect()
        }
    }
}

fn check_prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Usage(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// One SBM graph with `blocks * block_size` nodes; node `i` is in block
/// `i / block_size`. Features are the one-hot block indicator plus
/// Gaussian noise of standard deviation `noise`.
pub fn sbm_graph(
    rng: &mut impl Rng,
    blocks: usize,
    block_size: usize,
    p_in: f64,
    p_out: f64,
    noise: f64,
) -> Result<(Graph, SbmTally)> {
    let n = blocks * block_size;
    let block = |i: usize| i / block_size;
    let mut tally = SbmTally::default();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let same = block(a) == block(b);
            let p = if same { p_in } else { p_out };
            if same {
                tally.intra_pairs += 1;
            } else {
                tally.inter_pairs += 1;
            }
            if rng.random_bool(p) {
                edges.push([a, b]);
                if same {
                    tally.intra_edges += 1;
                } else {
                    tally.inter_edges += 1;
                }
            }
        }
    }
    let mut x = vec![0.0; n * blocks];
    for i in 0..n {
        for j in 0..blocks {
            let indicator = if block(i) == j { 1.0 } else { 0.0 };
            let z: f64 = rng.sample(StandardNormal);
            x[i * blocks + j] = indicator + noise * z;
        }
    }
    let labels = (0..n).map(block).collect();
    let g = Graph::new(n, edges, Tensor::matrix(n, blocks, x)?, None, Label::Nodes(labels))?;
    Ok((g, tally))
}

fn cycle_or_path(rng: &mut impl Rng, n: usize, class: usize) -> Result<Graph> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut edges: Vec<[usize; 2]> = (1..n).map(|i| [ids[i - 1], ids[i]]).collect();
    if class == 0 {
        edges.push([ids[n - 1], ids[0]]);
    }
    Graph::new(n, edges, Tensor::full(&[n, 1], 1.0), None, Label::Class(class))
}

fn hop_distances(n: usize, adj: &[Vec<usize>], src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; n];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn pair_contact_graph(rng: &mut impl Rng, p: &SynthParams) -> Result<Graph> {
    let n = p.n;
    let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let dist = |a: usize, b: usize| {
        let dx = pos[a][0] - pos[b][0];
        let dy = pos[a][1] - pos[b][1];
        (dx * dx + dy * dy).sqrt()
    };
    let mut edges = Vec::new();
    let mut adj = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            if dist(a, b) < p.edge_radius {
                edges.push([a, b]);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for a in 0..n {
        let hops = hop_distances(n, &adj, a);
        for b in a + 1..n {
            if hops[b] < p.min_hops {
                continue;
            }
            if dist(a, b) < p.radius {
                positives.push(PairLabel { u: a, v: b, positive: true });
            } else {
                negatives.push(PairLabel { u: a, v: b, positive: false });
            }
        }
    }
    negatives.shuffle(rng);
    negatives.truncate(positives.len());
    negatives.sort_by_key(|q| (q.u, q.v));
    positives.extend(negatives);
    let x = Tensor::matrix(n, 2, pos.iter().flatten().copied().collect())?;
    Graph::new(n, edges, x, None, Label::Pairs(positives))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::io::graph_to_json_line;

    #[test]
    fn cycle_has_n_edges_and_path_n_minus_one() {
        let p = SynthParams { count: 2, n: 4, ..Default::default() };
        let gs = gen_synthetic(SynthKind::CycleVsPath, 3, &p).unwrap();
        for g in &gs {
            match g.label() {
                Label::Class(0) => assert_eq!(g.edges().len(), 4),
                Label::Class(1) => assert_eq!(g.edges().len(), 3),
                other => panic!("unexpected {other:?}"),
            }
        }
        let classes: Vec<_> = gs.iter().map(|g| g.label().clone()).collect();
        assert!(classes.contains(&Label::Class(0)) && classes.contains(&Label::Class(1)));
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [SynthKind::SbmNode, SynthKind::CycleVsPath, SynthKind::PairContact] {
            let p = SynthParams { count: 4, n: 12, ..Default::default() };
            let render = |seed| {
                gen_synthetic(kind, seed, &p)
                    .unwrap()
                    .iter()
                    .map(|g| graph_to_json_line(g).unwrap())
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(render(5), render(5));
            assert_ne!(render(5), render(6));
        }
    }

    #[test]
    fn unknown_kind_lists_valid_kinds() {
        let err = "bogus".parse::<SynthKind>().unwrap_err().to_string();
        for k in SynthKind::NAMES {
            assert!(err.contains(k));
        }
    }

    #[test]
    fn sbm_intra_edges_follow_binomial_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (g, tally) = sbm_graph(&mut rng, 2, 20, 0.9, 0.05, 0.1).unwrap();
        // 2 blocks of C(20, 2) = 190 pairs each
        assert_eq!(tally.intra_pairs, 380);
        assert_eq!(tally.inter_pairs, 400);
        let mean = 0.9 * 380.0;
        let sd = (380.0f64 * 0.9 * 0.1).sqrt();
        assert!((tally.intra_edges as f64 - mean).abs() <= 3.0 * sd, "{tally:?}");
        let mean_out = 0.05 * 400.0;
        let sd_out = (400.0f64 * 0.05 * 0.95).sqrt();
        assert!((tally.inter_edges as f64 - mean_out).abs() <= 3.0 * sd_out, "{tally:?}");
        assert_eq!(g.edges().len(), tally.intra_edges + tally.inter_edges);
    }

    #[test]
    fn contact_pairs_are_far_in_hops() {
        let p = SynthParams { count: 6, n: 30, ..Default::default() };
        let gs = gen_synthetic(SynthKind::PairContact, 1, &p).unwrap();
        let mut total_pos = 0;
        for g in &gs {
            let Label::Pairs(pairs) = g.label() else { panic!() };
            let adj: Vec<Vec<usize>> = (0..g.num_nodes()).map(|u| g.neighbors(u).to_vec()).collect();
            let pos = pairs.iter().filter(|q| q.positive).count();
            assert_eq!(pairs.len() - pos, pos.min(pairs.len() - pos));
            for q in pairs {
                assert!(hop_distances(g.num_nodes(), &adj, q.u)[q.v] >= 3);
            }
            total_pos += pos;
        }
        assert!(total_pos > 0);
    }
}
