//! Multi-relation graph storage: one shared node set, per-relation CSR
//! adjacency, dense features, binary labels.
//!
//! Graphs are immutable once built. Construction symmetrizes and deduplicates
//! edges and drops self-loops, so every neighbor list is sorted, unique, and
//! never contains the node itself.
//!
//! # On-disk dataset format
//!
//! A dataset directory holds UTF-8, tab-separated, LF-terminated files with
//! 0-based decimal node ids:
//!
//! - `meta.tsv` — `num_nodes`, `feature_dim`, `num_relations` key/value lines
//! - `features.tsv` — `node_id <TAB> f_1 .. f_d` per node
//! - `labels.tsv` — `node_id <TAB> {0,1}` per node
//! - `edges_r<k>.tsv` for k = 1..R — `u <TAB> v` per line, undirected

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("inconsistent graph: {0}")]
    Inconsistent(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// CSR adjacency for one relation: `offsets` has `num_nodes + 1` entries and
/// `targets[offsets[u]..offsets[u+1]]` is the sorted neighbor list of `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Csr {
    fn from_edges(num_nodes: usize, edges: &[(u32, u32)]) -> Self {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u == v {
                continue; // self-loops are never stored
            }
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    fn neighbors(&self, u: usize) -> &[u32] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    /// Undirected edge count (each stored endpoint pair counted once).
    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }
}

/// Heterogeneous graph as R homogeneous relation subgraphs over one node set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRelationGraph {
    num_nodes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    relations: Vec<Csr>,
}

/// Per-relation degree summary plus an overall density figure (fraction of
/// possible node-pair slots filled across all relations).
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeStats {
    pub per_relation: Vec<RelationDegrees>,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDegrees {
    pub mean_degree: f64,
    pub max_degree: usize,
    pub edges: usize,
}

impl MultiRelationGraph {
    /// Build from raw parts. Edge lists may contain duplicates, both
    /// directions, and self-loops; they are normalized here.
    pub fn from_parts(
        num_nodes: usize,
        feature_dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        edge_lists: &[Vec<(u32, u32)>],
    ) -> Result<Self, GraphError> {
        if features.len() != num_nodes * feature_dim {
            return Err(GraphError::Inconsistent(format!(
                "feature matrix has {} entries, expected {} x {}",
                features.len(),
                num_nodes,
                feature_dim
            )));
        }
        if labels.len() != num_nodes {
            return Err(GraphError::Inconsistent(format!(
                "label count {} does not match node count {}",
                labels.len(),
                num_nodes
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(GraphError::Inconsistent(format!("label {bad} is not 0 or 1")));
        }
        if let Some(bad) = features.iter().find(|f| !f.is_finite()) {
            return Err(GraphError::Inconsistent(format!("non-finite feature {bad}")));
        }
        for (r, edges) in edge_lists.iter().enumerate() {
            for &(u, v) in edges {
                if u as usize >= num_nodes || v as usize >= num_nodes {
                    return Err(GraphError::Inconsistent(format!(
                        "edge ({u}, {v}) of relation {} references a node >= {num_nodes}",
                        r + 1
                    )));
                }
            }
        }
        let relations = edge_lists
            .iter()
            .map(|edges| Csr::from_edges(num_nodes, edges))
            .collect();
        Ok(Self {
            num_nodes,
            feature_dim,
            features,
            labels,
            relations,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major node-feature matrix (num_nodes x feature_dim).
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, u: usize) -> &[f64] {
        &self.features[u * self.feature_dim..(u + 1) * self.feature_dim]
    }

    /// Binary node labels: 0 benign, 1 fraud.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Sorted, duplicate-free 1-hop neighbor list of `u` under relation `r`.
    pub fn neighbors(&self, u: usize, r: usize) -> &[u32] {
        assert!(u < self.num_nodes, "node id {u} out of range");
        assert!(r < self.relations.len(), "relation id {r} out of range");
        self.relations[r].neighbors(u)
    }

    /// Nodes reachable within two hops of `u` under relation `r` (same
    /// relation for both hops), excluding `u`, sorted and duplicate-free.
    pub fn two_hop_candidates(&self, u: usize, r: usize) -> Vec<u32> {
        assert!(u < self.num_nodes, "node id {u} out of range");
        assert!(r < self.relations.len(), "relation id {r} out of range");
        let direct = self.relations[r].neighbors(u);
        let mut out: Vec<u32> = direct.to_vec();
        for &v in direct {
            out.extend_from_slice(self.relations[r].neighbors(v as usize));
        }
        out.sort_unstable();
        out.dedup();
        if let Ok(pos) = out.binary_search(&(u as u32)) {
            out.remove(pos);
        }
        out
    }

    /// Undirected edge count summed over relations.
    pub fn total_edges(&self) -> usize {
        self.relations.iter().map(|r| r.edge_count()).sum()
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let n = self.num_nodes;
        let per_relation: Vec<RelationDegrees> = self
            .relations
            .iter()
            .map(|csr| {
                let edges = csr.edge_count();
                let max_degree = (0..n)
                    .map(|u| csr.neighbors(u).len())
                    .max()
                    .unwrap_or(0);
                let mean_degree = if n == 0 { 0.0 } else { 2.0 * edges as f64 / n as f64 };
                RelationDegrees {
                    mean_degree,
                    max_degree,
                    edges,
                }
            })
            .collect();
        let possible = self.relations.len() as f64 * n as f64 * (n as f64 - 1.0) / 2.0;
        let density = if possible > 0.0 {
            self.total_edges() as f64 / possible
        } else {
            0.0
        };
        DegreeStats {
            per_relation,
            density,
        }
    }

    /// Load a dataset directory (see the module docs for the format).
    pub fn load(dir: &Path) -> Result<Self, GraphError> {
        let meta = read_meta(&dir.join("meta.tsv"))?;
        let (num_nodes, feature_dim, num_relations) = meta;

        let features = read_features(&dir.join("features.tsv"), num_nodes, feature_dim)?;
        let labels = read_labels(&dir.join("labels.tsv"), num_nodes)?;
        let mut edge_lists = Vec::with_capacity(num_relations);
        for k in 1..=num_relations {
            edge_lists.push(read_edges(&dir.join(format!("edges_r{k}.tsv")), num_nodes)?);
        }
        Self::from_parts(num_nodes, feature_dim, features, labels, &edge_lists)
    }

    /// Write the dataset directory. Each undirected edge is stored once as
    /// `u <TAB> v` with u < v, ascending. Feature values print in Rust's
    /// shortest round-trip decimal form, so load(save(g)) == g bit for bit.
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        fs::create_dir_all(dir).map_err(|e| GraphError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let write = |name: &str, body: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| GraphError::Io {
                path: path.clone(),
                source: e,
            })?;
            let mut w = BufWriter::new(file);
            body(&mut w).and_then(|_| w.flush()).map_err(|e| GraphError::Io {
                path,
                source: e,
            })
        };

        write("meta.tsv", &|w| {
            writeln!(w, "num_nodes\t{}", self.num_nodes)?;
            writeln!(w, "feature_dim\t{}", self.feature_dim)?;
            writeln!(w, "num_relations\t{}", self.relations.len())
        })?;
        write("features.tsv", &|w| {
            for u in 0..self.num_nodes {
                write!(w, "{u}")?;
                for f in self.feature_row(u) {
                    write!(w, "\t{f}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
        write("labels.tsv", &|w| {
            for (u, l) in self.labels.iter().enumerate() {
                writeln!(w, "{u}\t{l}")?;
            }
            Ok(())
        })?;
        for (r, csr) in self.relations.iter().enumerate() {
            write(&format!("edges_r{}.tsv", r + 1), &|w| {
                for u in 0..self.num_nodes {
                    for &v in csr.neighbors(u) {
                        if (u as u32) < v {
                            writeln!(w, "{u}\t{v}")?;
                        }
                    }
                }
                Ok(())
            })?;
        }
        Ok(())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>, GraphError> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| GraphError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_meta(path: &Path) -> Result<(usize, usize, usize), GraphError> {
    let mut num_nodes = None;
    let mut feature_dim = None;
    let mut num_relations = None;
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let key = parts.next().unwrap_or("");
        let value = parts
            .next()
            .ok_or_else(|| parse_err(path, lineno, "expected key<TAB>value"))?;
        let parsed: usize = value
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("non-numeric value {value:?}")))?;
        match key {
            "num_nodes" => num_nodes = Some(parsed),
            "feature_dim" => feature_dim = Some(parsed),
            "num_relations" => num_relations = Some(parsed),
            other => return Err(parse_err(path, lineno, format!("unknown meta key {other:?}"))),
        }
    }
    match (num_nodes, feature_dim, num_relations) {
        (Some(n), Some(d), Some(r)) => Ok((n, d, r)),
        _ => Err(parse_err(path, 0, "meta.tsv must define num_nodes, feature_dim, num_relations")),
    }
}

fn read_features(path: &Path, num_nodes: usize, dim: usize) -> Result<Vec<f64>, GraphError> {
    let mut features = vec![f64::NAN; num_nodes * dim];
    let mut seen = vec![false; num_nodes];
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parse_node_id(parts.next(), num_nodes, path, lineno)?;
        let row = &mut features[id * dim..(id + 1) * dim];
        let mut count = 0;
        for part in parts {
            if count >= dim {
                count += 1;
                break;
            }
            row[count] = part.parse().map_err(|_| {
                parse_err(path, lineno, format!("non-numeric feature {part:?}"))
            })?;
            count += 1;
        }
        if count != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {dim} features, found {count}"),
            ));
        }
        seen[id] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_err(path, 0, format!("no feature row for node {missing}")));
    }
    Ok(features)
}

fn read_labels(path: &Path, num_nodes: usize) -> Result<Vec<u8>, GraphError> {
    let mut labels = vec![0u8; num_nodes];
    let mut seen = vec![false; num_nodes];
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parse_node_id(parts.next(), num_nodes, path, lineno)?;
        let raw = parts
            .next()
            .ok_or_else(|| parse_err(path, lineno, "expected node_id<TAB>label"))?;
        labels[id] = match raw.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, lineno, format!("label {other:?} is not 0 or 1"))),
        };
        seen[id] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_err(path, 0, format!("no label for node {missing}")));
    }
    Ok(labels)
}

fn read_edges(path: &Path, num_nodes: usize) -> Result<Vec<(u32, u32)>, GraphError> {
    let mut edges = Vec::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let u = parse_node_id(parts.next(), num_nodes, path, lineno)?;
        let v = parse_node_id(parts.next(), num_nodes, path, lineno)?;
        edges.push((u as u32, v as u32));
    }
    Ok(edges)
}

fn parse_node_id(
    part: Option<&str>,
    num_nodes: usize,
    path: &Path,
    lineno: usize,
) -> Result<usize, GraphError> {
    let raw = part.ok_or_else(|| parse_err(path, lineno, "missing node id"))?;
    let id: usize = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("invalid node id {raw:?}")))?;
    if id >= num_nodes {
        return Err(parse_err(
            path,
            lineno,
            format!("node id {id} out of range (num_nodes = {num_nodes})"),
        ));
    }
    Ok(id)
}
