//! JSON-lines dataset files: one graph per line.
//!
//! Floats are written as decimal strings with 17 significant digits, which
//! round-trips every `f64` exactly. Plain JSON numbers are accepted on read.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Label, PairLabel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Num {
    Text(String),
    Value(f64),
}

impl Num {
    fn encode(v: f64) -> Num {
        Num::Text(format!("{v:.16e}"))
    }

    fn decode(&self) -> std::result::Result<f64, String> {
        match self {
            Num::Value(v) => Ok(*v),
            Num::Text(s) => s.parse().map_err(|_| format!("`{s}` is not a number")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GraphTarget {
    Class(usize),
    Bits(Vec<u8>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_attr: Option<Vec<Vec<Num>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_graph: Option<GraphTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_node: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_pairs: Option<Vec<[usize; 3]>>,
}

fn encode_rows(t: &Tensor) -> Vec<Vec<Num>> {
    t.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(Num::encode).collect())
        .collect()
}

fn decode_rows(rows: &[Vec<Num>], what: &str, width_hint: usize) -> std::result::Result<Tensor, String> {
    let cols = rows.first().map_or(width_hint, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(format!("{what} row {i} has {} values, expected {cols}", r.len()));
        }
        for v in r {
            data.push(v.decode()?);
        }
    }
    Tensor::matrix(rows.len(), cols, data).map_err(|e| e.to_string())
}

pub fn graph_to_json_line(g: &Graph) -> Result<String> {
    let mut raw = RawGraph {
        num_nodes: g.num_nodes(),
        edges: g.edges().to_vec(),
        x: encode_rows(g.x()),
        edge_attr: g.edge_attr().map(encode_rows),
        y_graph: None,
        y_node: None,
        y_pairs: None,
    };
    match g.label() {
        Label::None => {
            return Err(Error::Validation("graphs without a label cannot be saved".into()))
        }
        Label::Class(c) => raw.y_graph = Some(GraphTarget::Class(*c)),
        Label::Multi(bits) => {
            raw.y_graph = Some(GraphTarget::Bits(bits.iter().map(|&b| b as u8).collect()))
        }
        Label::Nodes(y) => raw.y_node = Some(y.clone()),
        Label::Pairs(p) => {
            raw.y_pairs = Some(p.iter().map(|p| [p.u, p.v, p.positive as usize]).collect())
        }
    }
    Ok(serde_json::to_string(&raw)?)
}

/// Parses one dataset line. `line_no` is 1-based and only used in errors.
pub fn graph_from_json_line(line: &str, line_no: usize) -> Result<Graph> {
    let raw: RawGraph = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let parse_err = |msg: String| Error::Parse { line: line_no, msg };
    let label = match (raw.y_graph, raw.y_node, raw.y_pairs) {
        (Some(GraphTarget::Class(c)), None, None) => Label::Class(c),
        (Some(GraphTarget::Bits(bits)), None, None) => {
            if let Some(b) = bits.iter().find(|&&b| b > 1) {
                return Err(parse_err(format!("multi-label entry {b} is not 0 or 1")));
            }
            Label::Multi(bits.into_iter().map(|b| b == 1).collect())
        }
        (None, Some(y), None) => Label::Nodes(y),
        (None, None, Some(p)) => {
            let mut pairs = Vec::with_capacity(p.len());
            for [u, v, l] in p {
                if l > 1 {
                    return Err(parse_err(format!("pair label {l} is not 0 or 1")));
                }
                pairs.push(PairLabel { u, v, positive: l == 1 });
            }
            Label::Pairs(pairs)
        }
        _ => {
            return Err(parse_err(
                "exactly one of y_graph, y_node, y_pairs must be present".into(),
            ))
        }
    };
    let x = decode_rows(&raw.x, "x", 0).map_err(parse_err)?;
    let edge_attr = match raw.edge_attr {
        Some(rows) if rows.is_empty() => None,
        Some(rows) => Some(decode_rows(&rows, "edge_attr", 0).map_err(parse_err)?),
        None => None,
    };
    let x = if raw.num_nodes == 0 && x.numel() == 0 {
        Tensor::zeros(&[0, 0])
    } else {
        x
    };
    Graph::new(raw.num_nodes, raw.edges, x, edge_attr, label).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("line {line_no}: {msg}")),
        other => other,
    })
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<Graph>> {
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        graphs.push(graph_from_json_line(&line, i + 1)?);
    }
    Ok(graphs)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

pub fn save_dataset(graphs: &[Graph], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for g in graphs {
        out.extend_from_slice(graph_to_json_line(g)?.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
