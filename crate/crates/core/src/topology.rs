//! Aggregation topologies.
//!
//! A topology decides which earlier outputs each layer consumes. Nodes are
//! indexed `0..L`; node 0 is the stem (or block input) and every edge points
//! strictly forward, so every graph built here is acyclic by construction.
//!
//! Four patterns are supported:
//!
//! * `Plain` – a chain, layer `l` reads only `l - 1`.
//! * `Dense` – layer `l` reads every earlier output (ResNet / DenseNet).
//! * `Sparse(c)` – layer `l` reads `l - c^0, l - c^1, ..., l - c^k` where `k`
//!   is the largest exponent with `c^k <= l`.
//! * `Fractal(C)` – stacked fractal blocks of `C` parallel columns joined at
//!   regular intervals. Only used for connection counting and drawing.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("layer index {0} is outside the domain (layers start at 1)")]
    Domain(usize),
    #[error("node {node} is out of range for a graph with {num_layers} nodes")]
    OutOfRange { node: usize, num_layers: usize },
    #[error("no path from node {src} to node {dst}")]
    NoPath { src: usize, dst: usize },
    #[error(
        "could not parse topology {0:?} (expected plain, dense, sparse:<c> or fractal:<columns>)"
    )]
    Parse(String),
}

/// Connection pattern of an aggregation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TopologyKind {
    Plain,
    Dense,
    /// Exponential offsets with the given base (`c >= 2`).
    Sparse(usize),
    /// Fractal expansion with the given number of columns (`>= 1`).
    Fractal(usize),
}

impl TopologyKind {
    pub fn validate(&self) -> Result<(), TopologyError> {
        match *self {
            TopologyKind::Sparse(c) if c < 2 => Err(TopologyError::InvalidTopology(format!(
                "sparse base must be at least 2, got {c}"
            ))),
            TopologyKind::Fractal(0) => Err(TopologyError::InvalidTopology(
                "fractal topology needs at least one column".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Plain => write!(f, "plain"),
            TopologyKind::Dense => write!(f, "dense"),
            TopologyKind::Sparse(c) => write!(f, "sparse:{c}"),
            TopologyKind::Fractal(c) => write!(f, "fractal:{c}"),
        }
    }
}

impl FromStr for TopologyKind {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let parse_arg = |a: Option<&str>| -> Result<usize, TopologyError> {
            a.ok_or_else(|| TopologyError::Parse(s.to_string()))?
                .parse::<usize>()
                .map_err(|_| TopologyError::Parse(s.to_string()))
        };
        let kind = match name {
            "plain" if arg.is_none() => TopologyKind::Plain,
            "dense" if arg.is_none() => TopologyKind::Dense,
            "sparse" => TopologyKind::Sparse(parse_arg(arg)?),
            "fractal" => TopologyKind::Fractal(parse_arg(arg)?),
            _ => return Err(TopologyError::Parse(s.to_string())),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for TopologyKind {
    type Error = TopologyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TopologyKind> for String {
    fn from(kind: TopologyKind) -> Self {
        kind.to_string()
    }
}

/// Sources aggregated by layer `layer`, nearest first.
///
/// For `Fractal(C)` the answer refers to the periodic expansion built from
/// full `C`-column blocks; see [`build_graph`] for how a graph of arbitrary
/// length is completed.
pub fn predecessors(kind: TopologyKind, layer: usize) -> Result<Vec<usize>, TopologyError> {
    kind.validate()?;
    if layer == 0 {
        return Err(TopologyError::Domain(layer));
    }
    Ok(match kind {
        TopologyKind::Plain => vec![layer - 1],
        TopologyKind::Dense => (0..layer).rev().collect(),
        TopologyKind::Sparse(c) => sparse_predecessors(c, layer),
        TopologyKind::Fractal(columns) => {
            let block = FractalBlock::new(columns);
            let period = block.len();
            let start = ((layer - 1) / period) * period;
            let local = layer - start;
            block.inputs[local - 1]
                .iter()
                .map(|&src| start + src)
                .collect()
        }
    })
}

fn sparse_predecessors(c: usize, layer: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 1usize;
    while offset <= layer {
        out.push(layer - offset);
        match offset.checked_mul(c) {
            Some(next) => offset = next,
            None => break,
        }
    }
    out
}

/// Layer DAG: which earlier outputs each node aggregates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationGraph {
    kind: TopologyKind,
    num_layers: usize,
    // incoming sources per node, nearest first
    inputs: Vec<Vec<usize>>,
    outputs: Vec<Vec<usize>>,
}

/// Builds the `num_layers`-node graph for `kind`.
///
/// Fractal graphs stack full `C`-column blocks; when the remaining node budget
/// cannot hold another full block it is filled with the widest narrower block
/// that fits, down to single-column blocks, so the last node always closes a
/// block and every node reaches it.
pub fn build_graph(
    kind: TopologyKind,
    num_layers: usize,
) -> Result<AggregationGraph, TopologyError> {
    kind.validate()?;
    if num_layers == 0 {
        return Err(TopologyError::InvalidTopology(
            "a graph needs at least one node".into(),
        ));
    }
    let inputs = match kind {
        TopologyKind::Fractal(columns) => fractal_inputs(columns, num_layers),
        _ => {
            let mut inputs = vec![Vec::new()];
            for layer in 1..num_layers {
                inputs.push(predecessors(kind, layer)?);
            }
            inputs
        }
    };
    Ok(AggregationGraph::from_inputs(kind, inputs))
}

impl AggregationGraph {
    fn from_inputs(kind: TopologyKind, inputs: Vec<Vec<usize>>) -> Self {
        let num_layers = inputs.len();
        let mut outputs = vec![Vec::new(); num_layers];
        for (dst, srcs) in inputs.iter().enumerate() {
            for &src in srcs {
                debug_assert!(src < dst);
                outputs[src].push(dst);
            }
        }
        for out in &mut outputs {
            out.sort_unstable();
        }
        AggregationGraph {
            kind,
            num_layers,
            inputs,
            outputs,
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Sources feeding `node`, nearest first. Empty for node 0.
    pub fn inputs(&self, node: usize) -> &[usize] {
        &self.inputs[node]
    }

    /// Consumers of `node` in increasing order.
    pub fn outputs(&self, node: usize) -> &[usize] {
        &self.outputs[node]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.inputs[node].len()
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        dst < self.num_layers && self.inputs[dst].contains(&src)
    }

    /// All edges sorted by `(dst, src)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.count_edges());
        for (dst, srcs) in self.inputs.iter().enumerate() {
            let mut srcs = srcs.clone();
            srcs.sort_unstable();
            edges.extend(srcs.into_iter().map(|src| (src, dst)));
        }
        edges
    }

    pub fn count_edges(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }

    /// Length in edges of the shortest directed path `src -> dst` (BFS).
    pub fn shortest_gradient_path(&self, src: usize, dst: usize) -> Result<usize, TopologyError> {
        for node in [src, dst] {
            if node >= self.num_layers {
                return Err(TopologyError::OutOfRange {
                    node,
                    num_layers: self.num_layers,
                });
            }
        }
        if src >= dst {
            return Err(TopologyError::NoPath { src, dst });
        }
        let mut dist = vec![usize::MAX; dst + 1];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(node) = queue.pop_front() {
            for &next in &self.outputs[node] {
                if next > dst || dist[next] != usize::MAX {
                    continue;
                }
                dist[next] = dist[node] + 1;
                if next == dst {
                    return Ok(dist[next]);
                }
                queue.push_back(next);
            }
        }
        Err(TopologyError::NoPath { src, dst })
    }

    /// True when every node has a directed path to the last node.
    pub fn all_reach_final(&self) -> bool {
        let last = self.num_layers - 1;
        let mut reaches = vec![false; self.num_layers];
        reaches[last] = true;
        for node in (0..last).rev() {
            reaches[node] = self.outputs[node].iter().any(|&n| reaches[n]);
        }
        reaches.into_iter().all(|r| r)
    }

    /// Graphviz DOT text. Nodes are `F0..F{L-1}`, edges sorted by `(dst, src)`.
    pub fn to_dot(&self, labels: Option<&[String]>) -> String {
        let mut out = String::new();
        out.push_str(&format!("digraph \"{}\" {{\n", self.kind));
        out.push_str("  rankdir=LR;\n");
        for node in 0..self.num_layers {
            match labels.and_then(|l| l.get(node)) {
                Some(label) => out.push_str(&format!(
                    "  F{node} [label=\"{}\"];\n",
                    label.replace('\\', "\\\\").replace('"', "\\\"")
                )),
                None => out.push_str(&format!("  F{node};\n")),
            }
        }
        for (src, dst) in self.edges() {
            out.push_str(&format!("  F{src} -> F{dst};\n"));
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        let dump = GraphDump {
            num_layers: self.num_layers,
            edges: self.edges().into_iter().map(|(s, d)| [s, d]).collect(),
        };
        serde_json::to_string(&dump).expect("graph dump serializes")
    }

    /// Parses a JSON dump back into a graph. The kind is not part of the dump,
    /// so the caller supplies it.
    pub fn from_json(kind: TopologyKind, text: &str) -> Result<Self, TopologyError> {
        let dump: GraphDump = serde_json::from_str(text)
            .map_err(|e| TopologyError::InvalidTopology(format!("bad graph json: {e}")))?;
        if dump.num_layers == 0 {
            return Err(TopologyError::InvalidTopology("empty graph".into()));
        }
        let mut inputs = vec![Vec::new(); dump.num_layers];
        for [src, dst] in dump.edges {
            if src >= dst || dst >= dump.num_layers {
                return Err(TopologyError::InvalidTopology(format!(
                    "edge {src}->{dst} is not a forward edge inside the graph"
                )));
            }
            inputs[dst].push(src);
        }
        for srcs in &mut inputs {
            srcs.sort_unstable_by(|a, b| b.cmp(a));
            srcs.dedup();
        }
        Ok(Self::from_inputs(kind, inputs))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDump {
    num_layers: usize,
    edges: Vec<[usize; 2]>,
}

/// Edge count of an already built graph.
pub fn count_edges(graph: &AggregationGraph) -> usize {
    graph.count_edges()
}

/// One fractal block with its input at local index 0.
struct FractalBlock {
    // inputs[i] lists sources of local node i + 1
    inputs: Vec<Vec<usize>>,
}

impl FractalBlock {
    fn new(columns: usize) -> Self {
        let mut inputs: Vec<Vec<usize>> = Vec::new();
        let depth = 1usize << (columns - 1);
        // current tail of every column; column i has 2^i convolutions
        let mut tail = vec![0usize; columns];
        for pos in 1..=depth {
            let ending: Vec<usize> = (0..columns)
                .rev()
                .filter(|&col| pos % (1usize << (columns - 1 - col)) == 0)
                .collect();
            let mut convs = Vec::with_capacity(ending.len());
            for &col in &ending {
                inputs.push(vec![tail[col]]);
                convs.push(inputs.len());
            }
            if convs.len() == 1 {
                tail[ending[0]] = convs[0];
            } else {
                let mut srcs = convs.clone();
                srcs.sort_unstable_by(|a, b| b.cmp(a));
                inputs.push(srcs);
                let join = inputs.len();
                for &col in &ending {
                    tail[col] = join;
                }
            }
        }
        FractalBlock { inputs }
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }
}

fn fractal_inputs(columns: usize, num_layers: usize) -> Vec<Vec<usize>> {
    let templates: Vec<FractalBlock> = (1..=columns).map(FractalBlock::new).collect();
    let mut inputs = vec![Vec::new()];
    let mut block_input = 0usize;
    while inputs.len() < num_layers {
        let remaining = num_layers - inputs.len();
        let block = templates
            .iter()
            .rev()
            .find(|b| b.len() <= remaining)
            .expect("single-column block always fits");
        for srcs in &block.inputs {
            inputs.push(srcs.iter().map(|&s| block_input + s).collect());
        }
        block_input = inputs.len() - 1;
    }
    inputs
}
