//! TU-format graph corpora: parsing, statistics, node-count filtering.
//!
//! A corpus named `NAME` lives in a directory holding three text files:
//!
//! * `NAME_A.txt` - one edge per line as comma-separated, 1-based global
//!   node indices (both directions are usually listed; they collapse to one
//!   unordered pair here),
//! * `NAME_graph_indicator.txt` - line i gives the graph id of node i,
//! * `NAME_graph_labels.txt` - one class label per graph.
//!
//! Node-label and node-attribute companions are ignored. The two distinct
//! raw class labels are mapped to {1, 2} in ascending order; class 1 is the
//! positive class everywhere downstream.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One undirected, unlabeled graph. Edges are canonical: `u < v`, sorted,
/// deduplicated, indices local to the graph in `0..num_nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub id: u64,
    pub num_nodes: usize,
    pub edges: Vec<(u32, u32)>,
    /// Class label, 1 or 2.
    pub label: u8,
}

impl Graph {
    pub fn new(id: u64, num_nodes: usize, edges: Vec<(u32, u32)>, label: u8) -> Result<Self> {
        let mut canonical = BTreeSet::new();
        for &(u, v) in &edges {
            if u == v {
                return Err(Error::Config(format!("graph {id}: self-loop at node {u}")));
            }
            if u as usize >= num_nodes || v as usize >= num_nodes {
                return Err(Error::Config(format!(
                    "graph {id}: edge ({u}, {v}) outside 0..{num_nodes}"
                )));
            }
            canonical.insert((u.min(v), u.max(v)));
        }
        if label != 1 && label != 2 {
            return Err(Error::Config(format!("graph {id}: label {label} not in {{1, 2}}")));
        }
        Ok(Graph {
            id,
            num_nodes,
            edges: canonical.into_iter().collect(),
            label,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_edgeless(&self) -> bool {
        self.edges.is_empty()
    }

    /// Adjacency lists with both directions.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        adj
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u as usize] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.num_nodes
    }
}

/// An ordered corpus of graphs. Order follows the graph-indicator file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSet {
    pub name: String,
    pub graphs: Vec<Graph>,
}

impl GraphSet {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.graphs.iter().map(|g| g.id).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("GraphSet serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let set: GraphSet = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        for g in &set.graphs {
            // Re-validate invariants; JSON may come from outside.
            Graph::new(g.id, g.num_nodes, g.edges.clone(), g.label)?;
        }
        Ok(set)
    }
}

/// Aggregate corpus statistics, emitted as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub graphs: usize,
    pub nodes_min: usize,
    pub nodes_avg: f64,
    pub nodes_max: usize,
    pub edges_min: usize,
    pub edges_avg: f64,
    pub edges_max: usize,
    /// Graph counts for classes 1 and 2.
    pub class_counts: (usize, usize),
    pub edgeless: usize,
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_int(path: &Path, line_no: usize, token: &str) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| {
        Error::parse(
            path.display().to_string(),
            line_no,
            format!("expected an integer, got {token:?}"),
        )
    })
}

/// Find the corpus name in `root` from the unique `*_A.txt` file.
pub fn detect_dataset_name(root: &Path) -> Result<String> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = file.strip_suffix("_A.txt") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    match names.len() {
        0 => Err(Error::parse(
            root.display().to_string(),
            None,
            "no *_A.txt file found",
        )),
        1 => Ok(names.pop().unwrap()),
        _ => Err(Error::parse(
            root.display().to_string(),
            None,
            format!("multiple corpora found: {names:?}; pass a name explicitly"),
        )),
    }
}

/// Parse the TU corpus `name` from directory `root`.
///
/// The parser is strict: missing files, non-integer tokens, node indices out
/// of range, self-loops and edges across two graphs are all reported with
/// file name and (where meaningful) 1-based line number. Zero-edge graphs
/// are kept; downstream embedding rejects them.
pub fn parse_tu_dataset(root: &Path, name: &str) -> Result<GraphSet> {
    let adj_path = root.join(format!("{name}_A.txt"));
    let ind_path = root.join(format!("{name}_graph_indicator.txt"));
    let lab_path = root.join(format!("{name}_graph_labels.txt"));

    // Node -> graph id, 1-based on both sides of the map.
    let ind_text = read_to_string(&ind_path)?;
    let mut node_graph: Vec<u64> = Vec::new();
    for (i, line) in ind_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let gid = parse_int(&ind_path, i + 1, line)?;
        if gid < 1 {
            return Err(Error::parse(
                ind_path.display().to_string(),
                i + 1,
                format!("graph id {gid} must be >= 1"),
            ));
        }
        node_graph.push(gid as u64);
    }
    if node_graph.is_empty() {
        return Err(Error::parse(
            ind_path.display().to_string(),
            None,
            "no nodes listed",
        ));
    }
    let num_graphs = *node_graph.iter().max().unwrap() as usize;
    {
        let mut present = vec![false; num_graphs];
        for &g in &node_graph {
            present[(g - 1) as usize] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::parse(
                ind_path.display().to_string(),
                None,
                format!("graph ids must cover 1..={num_graphs}; {} has no nodes", missing + 1),
            ));
        }
    }

    // Local node index within its graph, assigned in file order.
    let mut node_count = vec![0usize; num_graphs];
    let mut local_index: Vec<u32> = Vec::with_capacity(node_graph.len());
    for &g in &node_graph {
        let slot = &mut node_count[(g - 1) as usize];
        local_index.push(*slot as u32);
        *slot += 1;
    }

    // Raw labels, one per graph, in graph-id order.
    let lab_text = read_to_string(&lab_path)?;
    let mut raw_labels: Vec<i64> = Vec::new();
    for (i, line) in lab_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw_labels.push(parse_int(&lab_path, i + 1, line)?);
    }
    if raw_labels.len() != num_graphs {
        return Err(Error::parse(
            lab_path.display().to_string(),
            None,
            format!("{} labels for {num_graphs} graphs", raw_labels.len()),
        ));
    }
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() > 2 {
        return Err(Error::parse(
            lab_path.display().to_string(),
            None,
            format!("expected a binary task, found labels {distinct:?}"),
        ));
    }
    let to_class = |raw: i64| -> u8 {
        if raw == distinct[0] {
            1
        } else {
            2
        }
    };

    // Edges.
    let adj_text = read_to_string(&adj_path)?;
    let mut edge_sets: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); num_graphs];
    for (i, line) in adj_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::parse(
                    adj_path.display().to_string(),
                    line_no,
                    format!("expected \"u, v\", got {line:?}"),
                ))
            }
        };
        let u = parse_int(&adj_path, line_no, a)?;
        let v = parse_int(&adj_path, line_no, b)?;
        for &x in &[u, v] {
            if x < 1 || x as usize > node_graph.len() {
                return Err(Error::parse(
                    adj_path.display().to_string(),
                    line_no,
                    format!("node {x} outside 1..={}", node_graph.len()),
                ));
            }
        }
        if u == v {
            return Err(Error::parse(
                adj_path.display().to_string(),
                line_no,
                format!("self-loop at node {u}"),
            ));
        }
        let (gu, gv) = (node_graph[(u - 1) as usize], node_graph[(v - 1) as usize]);
        if gu != gv {
            return Err(Error::parse(
                adj_path.display().to_string(),
                line_no,
                format!("edge ({u}, {v}) crosses graphs {gu} and {gv}"),
            ));
        }
        let (lu, lv) = (local_index[(u - 1) as usize], local_index[(v - 1) as usize]);
        edge_sets[(gu - 1) as usize].insert((lu.min(lv), lu.max(lv)));
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for gid in 1..=num_graphs {
        graphs.push(Graph {
            id: gid as u64,
            num_nodes: node_count[gid - 1],
            edges: edge_sets[gid - 1].iter().copied().collect(),
            label: to_class(raw_labels[gid - 1]),
        });
    }
    Ok(GraphSet {
        name: name.to_string(),
        graphs,
    })
}

/// Write `set` back out in TU layout (ids renumbered to 1..=N, each edge in
/// both directions). `parse_tu_dataset(write_tu_dataset(parse(x))) == parse(x)`
/// for corpora that came from a parse.
pub fn write_tu_dataset(set: &GraphSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut indicator = String::new();
    let mut labels = String::new();
    let mut adjacency = String::new();
    let mut base = 0u64; // global index of the first node of the current graph
    for (gi, g) in set.graphs.iter().enumerate() {
        for _ in 0..g.num_nodes {
            let _ = writeln!(indicator, "{}", gi + 1);
        }
        let _ = writeln!(labels, "{}", g.label);
        for &(u, v) in &g.edges {
            let gu = base + u as u64 + 1;
            let gv = base + v as u64 + 1;
            let _ = writeln!(adjacency, "{gu}, {gv}");
            let _ = writeln!(adjacency, "{gv}, {gu}");
        }
        base += g.num_nodes as u64;
    }
    for (file, text) in [
        (format!("{}_A.txt", set.name), adjacency),
        (format!("{}_graph_indicator.txt", set.name), indicator),
        (format!("{}_graph_labels.txt", set.name), labels),
    ] {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Keep graphs with `num_nodes <= max_nodes`, preserving order and ids.
pub fn filter_by_node_count(set: &GraphSet, max_nodes: usize) -> GraphSet {
    GraphSet {
        name: set.name.clone(),
        graphs: set
            .graphs
            .iter()
            .filter(|g| g.num_nodes <= max_nodes)
            .cloned()
            .collect(),
    }
}

pub fn corpus_stats(set: &GraphSet) -> Result<CorpusStats> {
    if set.is_empty() {
        return Err(Error::EmptyInput("corpus has no graphs".into()));
    }
    let nodes: Vec<usize> = set.graphs.iter().map(|g| g.num_nodes).collect();
    let edges: Vec<usize> = set.graphs.iter().map(|g| g.num_edges()).collect();
    let avg = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / xs.len() as f64;
    let class1 = set.graphs.iter().filter(|g| g.label == 1).count();
    Ok(CorpusStats {
        graphs: set.len(),
        nodes_min: *nodes.iter().min().unwrap(),
        nodes_avg: avg(&nodes),
        nodes_max: *nodes.iter().max().unwrap(),
        edges_min: *edges.iter().min().unwrap(),
        edges_avg: avg(&edges),
        edges_max: *edges.iter().max().unwrap(),
        class_counts: (class1, set.len() - class1),
        edgeless: set.graphs.iter().filter(|g| g.is_edgeless()).count(),
    })
}
