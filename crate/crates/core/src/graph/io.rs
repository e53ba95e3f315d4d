//! CSV node, edge and feature files.
//!
//! * nodes: `node_id,node_type` with ids dense per type from 0
//! * edges: `relation,src_id,dst_id,weight`
//! * features (one file per type): `node_id,f_0,...,f_{d-1}`
//!
//! A header row is optional; it is recognised by a non-numeric first field.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Edge, HeteroGraph, NodeType, RelationType};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Conventional file names inside a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: Vec<(NodeType, PathBuf)>,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            nodes: dir.join("nodes.csv"),
            edges: dir.join("edges.csv"),
            features: NodeType::ALL
                .iter()
                .map(|&t| (t, dir.join(format!("features_{}.csv", t.name()))))
                .collect(),
        }
    }

    pub fn all_paths(&self) -> Vec<PathBuf> {
        let mut v = vec![self.nodes.clone(), self.edges.clone()];
        v.extend(self.features.iter().map(|(_, p)| p.clone()));
        v
    }
}

fn load_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Yields `(line number, fields)` for every data row.
fn read_rows(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(path, 0, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| load_err(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) && !is_relation_row(&rec) {
            continue;
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn is_relation_row(rec: &csv::StringRecord) -> bool {
    rec.get(0).and_then(RelationType::parse).is_some()
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    rec.get(i)
        .ok_or_else(|| load_err(path, line, format!("missing {what}")))?
        .parse()
        .map_err(|_| load_err(path, line, format!("malformed {what} `{}`", rec.get(i).unwrap_or(""))))
}

/// Loads and validates a graph. Node counts come from the node files; every
/// edge endpoint and feature row is checked against them.
pub fn load_graph(
    node_files: &[PathBuf],
    edge_files: &[PathBuf],
    feature_files: &[(NodeType, PathBuf)],
) -> Result<HeteroGraph> {
    let mut ids: [BTreeMap<usize, (PathBuf, u64)>; 3] = Default::default();
    for path in node_files {
        for (line, rec) in read_rows(path)? {
            let id: usize = field(path, line, &rec, 0, "node_id")?;
            let ty = rec.get(1).unwrap_or("");
            let t = NodeType::parse(ty).ok_or_else(|| load_err(path, line, format!("unknown node type `{ty}`")))?;
            if ids[t.index()].insert(id, (path.clone(), line)).is_some() {
                return Err(load_err(path, line, format!("duplicate {t} node {id}")));
            }
        }
    }
    let mut counts = [0usize; 3];
    for t in NodeType::ALL {
        let set = &ids[t.index()];
        counts[t.index()] = set.len();
        if let Some((&id, (path, line))) = set.iter().enumerate().find(|(i, (id, _))| *i != **id).map(|(_, x)| x) {
            return Err(load_err(
                path,
                *line,
                format!("{t} ids are not dense from 0 (saw {id})"),
            ));
        }
    }

    let mut edges: [Vec<Edge>; 4] = Default::default();
    for path in edge_files {
        for (line, rec) in read_rows(path)? {
            let rname = rec.get(0).unwrap_or("");
            let rel = RelationType::parse(rname)
                .ok_or_else(|| load_err(path, line, format!("unknown relation `{rname}`")))?;
            let src: usize = field(path, line, &rec, 1, "src_id")?;
            let dst: usize = field(path, line, &rec, 2, "dst_id")?;
            let weight: f64 = field(path, line, &rec, 3, "weight")?;
            let (st, dt) = rel.endpoints();
            if src >= counts[st.index()] || dst >= counts[dt.index()] {
                return Err(load_err(
                    path,
                    line,
                    format!(
                        "dangling {rel} edge ({src}, {dst}): {} {st} / {} {dt} nodes",
                        counts[st.index()],
                        counts[dt.index()]
                    ),
                ));
            }
            edges[rel.index()].push(Edge { src, dst, weight });
        }
    }

    let mut features: [Option<Tensor>; 3] = Default::default();
    for (t, path) in feature_files {
        let n = counts[t.index()];
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut dim = None;
        for (line, rec) in read_rows(path)? {
            let id: usize = field(path, line, &rec, 0, "node_id")?;
            if id >= n {
                return Err(load_err(path, line, format!("feature row for unknown {t} node {id}")));
            }
            let vals = (1..rec.len())
                .map(|i| field::<f64>(path, line, &rec, i, "feature value"))
                .collect::<Result<Vec<_>>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(load_err(
                        path,
                        line,
                        format!("feature dimension {} differs from {d}", vals.len()),
                    ));
                }
                _ => {}
            }
            if rows[id].replace(vals).is_some() {
                return Err(load_err(path, line, format!("duplicate feature row for {t} node {id}")));
            }
        }
        let d = dim.unwrap_or(0);
        if let Some(missing) = rows.iter().position(Option::is_none) {
            return Err(load_err(path, 0, format!("missing feature row for {t} node {missing}")));
        }
        let data = rows.into_iter().flatten().flatten().collect();
        features[t.index()] = Some(Tensor::matrix(n, d, data)?);
    }

    let g = HeteroGraph::new(counts, edges, features)?;
    log::info!(
        "loaded graph: {} users, {} recipes, {} ingredients; edges {}",
        counts[0],
        counts[1],
        counts[2],
        RelationType::ALL
            .iter()
            .map(|r| format!("{r}={}", g.edge_count(*r)))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(g)
}

/// Loads `nodes.csv`, `edges.csv` and whichever `features_<type>.csv` exist.
pub fn load_dir(dir: &Path) -> Result<HeteroGraph> {
    let files = DatasetFiles::in_dir(dir);
    let features: Vec<_> = files.features.into_iter().filter(|(_, p)| p.exists()).collect();
    load_graph(&[files.nodes], &[files.edges], &features)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the graph in the CSV formats read by [`load_dir`]. Symmetric edges
/// are written once per pair.
pub fn save_dir(g: &HeteroGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = DatasetFiles::in_dir(dir);

    let mut w = csv::Writer::from_path(&files.nodes)?;
    w.write_record(["node_id", "node_type"])?;
    for t in NodeType::ALL {
        for i in 0..g.count(t) {
            w.write_record([i.to_string(), t.name().to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.edges)?;
    w.write_record(["relation", "src_id", "dst_id", "weight"])?;
    for r in RelationType::ALL {
        for e in g.edges(r) {
            if r.is_symmetric() && e.src > e.dst {
                continue;
            }
            w.write_record([
                r.name().to_string(),
                e.src.to_string(),
                e.dst.to_string(),
                fmt_f64(e.weight),
            ])?;
        }
    }
    w.flush()?;

    for (t, path) in &files.features {
        let Some(f) = g.features(*t) else { continue };
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["node_id".to_string()];
        header.extend((0..f.cols()).map(|j| format!("f_{j}")));
        w.write_record(&header)?;
        for i in 0..f.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(f.row(i).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// SHA-256 of each existing file, keyed by file name.
pub fn fingerprint_files(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if !p.exists() {
            continue;
        }
        let digest = Sha256::digest(fs::read(p)?);
        let name = p
            .file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        out.insert(name, hex::encode(digest));
    }
    Ok(out)
}
