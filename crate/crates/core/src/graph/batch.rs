use super::{Graph, Label, PairLabel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Targets of a merged batch, indexed by graph or by batch node.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    None,
    Classes(Vec<usize>),
    Multi(Vec<Vec<bool>>),
    Nodes(Vec<usize>),
    /// Pair indices already shifted into batch node numbering.
    Pairs(Vec<PairLabel>),
}

/// Disjoint union of graphs. Node ranges are contiguous and there are no
/// edges between graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    graph: Graph,
    graph_index: Vec<usize>,
    graph_offsets: Vec<usize>,
    targets: BatchTargets,
}

impl Batch {
    pub fn single(g: &Graph) -> Result<Batch> {
        batch_graphs([g])
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_index(&self) -> &[usize] {
        &self.graph_index
    }

    /// Start node of each graph.
    pub fn graph_offsets(&self) -> &[usize] {
        &self.graph_offsets
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_offsets.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        let end = self
            .graph_offsets
            .get(g + 1)
            .copied()
            .unwrap_or(self.graph.num_nodes());
        self.graph_offsets[g]..end
    }

    pub fn targets(&self) -> &BatchTargets {
        &self.targets
    }
}

/// Concatenates graphs into one disconnected graph with shifted indices.
pub fn batch_graphs<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<Batch> {
    let graphs: Vec<&Graph> = graphs.into_iter().collect();
    let first = graphs
        .first()
        .ok_or_else(|| Error::Validation("cannot batch an empty list of graphs".into()))?;
    let d = first.feature_dim();
    let de = graphs.iter().find_map(|g| g.edge_feature_dim());
    let kind = std::mem::discriminant(first.label());

    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut x = Vec::with_capacity(total_nodes * d);
    let mut edges = Vec::new();
    let mut edge_attr = Vec::new();
    let mut graph_index = Vec::with_capacity(total_nodes);
    let mut graph_offsets = Vec::with_capacity(graphs.len());
    let mut targets = match first.label() {
        Label::None => BatchTargets::None,
        Label::Class(_) => BatchTargets::Classes(Vec::new()),
        Label::Multi(_) => BatchTargets::Multi(Vec::new()),
        Label::Nodes(_) => BatchTargets::Nodes(Vec::new()),
        Label::Pairs(_) => BatchTargets::Pairs(Vec::new()),
    };

    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(Error::Format(format!(
                "graph {gi} has node feature width {}, expected {d}",
                g.feature_dim()
            )));
        }
        if g.edge_feature_dim() != de && g.num_edges() > 0 {
            return Err(Error::Format(format!(
                "graph {gi} has edge feature width {:?}, expected {de:?}",
                g.edge_feature_dim()
            )));
        }
        if std::mem::discriminant(g.label()) != kind {
            return Err(Error::Format(format!(
                "graph {gi} has label kind {}, expected {}",
                g.label().kind_name(),
                first.label().kind_name()
            )));
        }
        x.extend_from_slice(g.x().data());
        edges.extend(g.edges().iter().map(|&[a, b]| [a + offset, b + offset]));
        if let Some(ea) = g.edge_attr() {
            edge_attr.extend_from_slice(ea.data());
        }
        graph_offsets.push(offset);
        graph_index.extend(std::iter::repeat_n(gi, g.num_nodes()));
        match (&mut targets, g.label()) {
            (BatchTargets::Classes(t), Label::Class(c)) => t.push(*c),
            (BatchTargets::Multi(t), Label::Multi(bits)) => {
                if let Some(prev) = t.first() {
                    if prev.len() != bits.len() {
                        return Err(Error::Format(format!(
                            "graph {gi} has {} labels, expected {}",
                            bits.len(),
                            prev.len()
                        )));
                    }
                }
                t.push(bits.clone())
            }
            (BatchTargets::Nodes(t), Label::Nodes(y)) => t.extend_from_slice(y),
            (BatchTargets::Pairs(t), Label::Pairs(p)) => t.extend(p.iter().map(|p| PairLabel {
                u: p.u + offset,
                v: p.v + offset,
                positive: p.positive,
            })),
            _ => {}
        }
        offset += g.num_nodes();
    }

    let x = Tensor::matrix(total_nodes, d, x)?;
    let edge_attr = match de {
        Some(c) => Some(Tensor::matrix(edges.len(), c, edge_attr)?),
        None => None,
    };
    let label = match &targets {
        BatchTargets::Nodes(y) => Label::Nodes(y.clone()),
        BatchTargets::Pairs(p) => Label::Pairs(p.clone()),
        _ => Label::None,
    };
    let graph = Graph::new(total_nodes, edges, x, edge_attr, Label::None)?.with_label(label);
    Ok(Batch {
        graph,
        graph_index,
        graph_offsets,
        targets,
    })
}
