//! Attributed graphs in compressed sparse row form.
//!
//! A [`GraphBundle`] is undirected and unweighted: directed input is
//! symmetrized, duplicates are merged and self-loops are dropped on ingest.
//! Self-loops only ever appear inside [`normalize`], which builds the
//! symmetric operator `D̃^{-1/2} (A + I) D̃^{-1/2}`.
//!
//! On-disk layout (all paths in a manifest are relative to the manifest):
//!
//! ```text
//! manifest.json  {"name": .., "edges": .., "features": .., "labels": .., "id_map": ..}
//! edges          one "u v" pair per line, '#' starts a comment line
//! features       CSV (n rows x d columns) or RFGF binary
//! labels         one 0/1 per line
//! id_map         one string id per line; line number = dense node id
//! ```
//!
//! The RFGF binary matrix format is a 16-byte header (`b"RFGF"`, `u32` rows,
//! `u32` cols, `u32` reserved = 0, all little-endian) followed by
//! `rows * cols` little-endian `f32` values in row-major order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const RFGF_MAGIC: &[u8; 4] = b"RFGF";

#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    name: String,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Matrix,
    labels: Option<Vec<u8>>,
}

impl GraphBundle {
    /// Builds and validates a bundle. The edge list may be directed, contain
    /// duplicates or self-loops; it is cleaned up here.
    pub fn from_edges(
        name: impl Into<String>,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Invalid("graph must have at least one node".into()));
        }
        if features.cols() == 0 {
            return Err(Error::Invalid("feature dimension must be at least 1".into()));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite feature at row {}, column {}",
                pos / features.cols(),
                pos % features.cols()
            )));
        }

        let mut self_loops = 0usize;
        let mut degree = vec![0usize; n];
        for &(u, v) in edges {
            for id in [u, v] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, n });
                }
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            degree[u] += 1;
            degree[v] += 1;
        }
        if self_loops > 0 {
            warn!("dropped {self_loops} self-loop(s) from edge list");
        }

        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(u, v) in edges {
            if u == v {
                continue;
            }
            neighbors[cursor[u]] = v;
            cursor[u] += 1;
            neighbors[cursor[v]] = u;
            cursor[v] += 1;
        }

        // Sort and deduplicate each row, then compact.
        let mut compact_offsets = Vec::with_capacity(n + 1);
        compact_offsets.push(0);
        let mut write = 0;
        for i in 0..n {
            let row = &mut neighbors[offsets[i]..offsets[i + 1]];
            row.sort_unstable();
            let mut last = usize::MAX;
            for r in offsets[i]..offsets[i + 1] {
                let v = neighbors[r];
                if v != last {
                    neighbors[write] = v;
                    write += 1;
                    last = v;
                }
            }
            compact_offsets.push(write);
        }
        neighbors.truncate(write);
        neighbors.shrink_to_fit();

        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::RowCountMismatch { what: "label file", got: y.len(), expected: n });
            }
            if let Some(bad) = y.iter().find(|&&l| l > 1) {
                return Err(Error::Invalid(format!("label {bad} is not 0 or 1")));
            }
            let anomalies = y.iter().filter(|&&l| l == 1).count();
            if 2 * anomalies >= n {
                warn!("{anomalies} of {n} nodes labeled anomalous; anomalies are expected to be a minority");
            }
        }

        Ok(Self {
            name: name.into(),
            offsets: compact_offsets,
            neighbors,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Node count.
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.degree(i)).collect()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<u8>>) -> Result<()> {
        if let Some(y) = &labels {
            if y.len() != self.n() {
                return Err(Error::RowCountMismatch { what: "labels", got: y.len(), expected: self.n() });
            }
        }
        self.labels = labels;
        Ok(())
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 0..self.n() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// The same graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        assert_eq!(perm.len(), n, "permutation length");
        let edges: Vec<_> = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        let mut feats = Matrix::zeros(n, self.d());
        for i in 0..n {
            feats.row_mut(perm[i]).copy_from_slice(self.features.row(i));
        }
        let labels = self.labels.as_ref().map(|y| {
            let mut out = vec![0u8; n];
            for i in 0..n {
                out[perm[i]] = y[i];
            }
            out
        });
        GraphBundle::from_edges(self.name.clone(), &edges, feats, labels)
    }
}

/// Square sparse operator sharing the CSR layout of a graph plus diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(columns, values)` of row `i`, columns ascending.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn identity(n: usize) -> Self {
        Self { n, offsets: (0..=n).collect(), cols: (0..n).collect(), vals: vec![1.0; n] }
    }

    /// Same sparsity pattern, new values computed per stored entry `(i, j, v)`.
    pub fn map_entries(&self, f: impl Fn(usize, usize, f64) -> f64 + Sync) -> Self {
        let vals = (0..self.n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (cols, vals) = self.row(i);
                let f = &f;
                cols.iter().zip(vals).map(move |(&j, &v)| f(i, j, v))
            })
            .collect();
        Self { n: self.n, offsets: self.offsets.clone(), cols: self.cols.clone(), vals }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`, kept sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(SparseOperator);

impl NormalizedAdjacency {
    pub fn operator(&self) -> &SparseOperator {
        &self.0
    }
}

impl std::ops::Deref for NormalizedAdjacency {
    type Target = SparseOperator;
    fn deref(&self) -> &SparseOperator {
        &self.0
    }
}

pub fn normalize(g: &GraphBundle) -> NormalizedAdjacency {
    let n = g.n();
    let deg: Vec<f64> = (0..n).map(|i| (g.degree(i) + 1) as f64).collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.neighbors.len() + n);
    let mut vals = Vec::with_capacity(g.neighbors.len() + n);
    offsets.push(0);
    for i in 0..n {
        let nbrs = g.neighbors(i);
        let split = nbrs.partition_point(|&j| j < i);
        for &j in nbrs[..split].iter().chain(std::iter::once(&i)).chain(&nbrs[split..]) {
            cols.push(j);
            vals.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        offsets.push(cols.len());
    }
    NormalizedAdjacency(SparseOperator { n, offsets, cols, vals })
}

/// Sparse-dense product `op · m`; never forms an `n x n` dense matrix.
pub fn spmm(op: &SparseOperator, m: &Matrix) -> Result<Matrix> {
    if m.rows() != op.n {
        return Err(Error::shape("spmm", format!("operator is {0}x{0}, matrix has {1} rows", op.n, m.rows())));
    }
    let d = m.cols();
    let mut out = Matrix::zeros(op.n, d);
    if d == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(i, out_row)| {
        let (cols, vals) = op.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            for (o, &x) in out_row.iter_mut().zip(m.row(j)) {
                *o += v * x;
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_map: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<GraphBundle> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_text(manifest_path)?)
        .map_err(|source| Error::Manifest { path: manifest_path.to_path_buf(), source })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let features = read_features(&base.join(&manifest.features))?;
    let n = features.rows();

    let id_map = match &manifest.id_map {
        Some(p) => {
            let path = base.join(p);
            let ids = read_id_map(&path)?;
            if ids.len() != n {
                return Err(Error::RowCountMismatch { what: "id map", got: ids.len(), expected: n });
            }
            Some(ids)
        }
        None => None,
    };
    let edges = read_edges(&base.join(&manifest.edges), n, id_map.as_ref())?;
    let labels = match &manifest.labels {
        Some(p) => Some(read_labels(&base.join(p), n)?),
        None => None,
    };
    GraphBundle::from_edges(manifest.name, &edges, features, labels)
}

fn read_id_map(path: &Path) -> Result<HashMap<String, usize>> {
    let text = read_text(path)?;
    let mut map = HashMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        let next = map.len();
        if map.insert(id.to_string(), next).is_some() {
            return Err(Error::Parse { path: path.into(), line: line_no + 1, msg: format!("duplicate id {id:?}") });
        }
    }
    Ok(map)
}

fn read_edges(path: &Path, n: usize, id_map: Option<&HashMap<String, usize>>) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.into(), line: line_no + 1, msg };
        let mut toks = line.split_whitespace();
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(parse_err(format!("expected two node ids, got {line:?}")));
        };
        let resolve = |tok: &str| -> Result<usize> {
            match id_map {
                Some(map) => map.get(tok).copied().ok_or_else(|| parse_err(format!("unknown node id {tok:?}"))),
                None => {
                    let id: usize = tok.parse().map_err(|_| parse_err(format!("invalid node id {tok:?}")))?;
                    if id >= n {
                        return Err(Error::NodeOutOfRange { id, n });
                    }
                    Ok(id)
                }
            }
        };
        edges.push((resolve(a)?, resolve(b)?));
    }
    Ok(edges)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u8>> {
    let text = read_text(path)?;
    let mut labels = Vec::with_capacity(n);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line_no + 1,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        }
    }
    if labels.len() != n {
        return Err(Error::RowCountMismatch { what: "label file", got: labels.len(), expected: n });
    }
    Ok(labels)
}

/// Reads a feature matrix, sniffing the RFGF magic to pick the binary path.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RFGF_MAGIC) {
        decode_rfgf(&bytes).map_err(|msg| Error::Parse { path: path.into(), line: 0, msg })
    } else {
        read_feature_csv(path, &bytes)
    }
}

fn read_feature_csv(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(bytes);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, record) in reader.records().enumerate() {
        let parse_err = |msg: String| Error::Parse { path: path.into(), line: line_no + 1, msg };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_err(format!("expected {c} columns, got {}", record.len())));
            }
            _ => {}
        }
        for cell in record.iter() {
            let v: f64 = cell.parse().map_err(|_| parse_err(format!("non-numeric feature cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite feature cell {cell:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse { path: path.into(), line: 0, msg: "empty feature file".into() })?;
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn encode_rfgf(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.len());
    out.extend_from_slice(RFGF_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_rfgf(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 16 || &bytes[..4] != RFGF_MAGIC {
        return Err("missing RFGF header".into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(format!("RFGF body holds {} bytes, expected {} for {rows}x{cols}", body.len(), rows * cols * 4));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Writes a manifest bundle (`edges.txt`, `features.csv`, `labels.txt`,
/// `manifest.json`) into `dir` and returns the manifest path.
pub fn write_bundle(g: &GraphBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_file = |name: &str, fill: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        fill(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    };

    write_file("edges.txt", &|w| {
        writeln!(w, "# {} undirected edges", g.edge_count())?;
        for (u, v) in g.edges() {
            writeln!(w, "{u} {v}")?;
        }
        Ok(())
    })?;
    write_file("features.csv", &|w| {
        for i in 0..g.n() {
            let row: Vec<String> = g.features.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    if let Some(y) = g.labels() {
        write_file("labels.txt", &|w| {
            for l in y {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })?;
    }
    let manifest = Manifest {
        name: g.name.clone(),
        edges: "edges.txt".into(),
        features: "features.csv".into(),
        labels: g.labels().map(|_| "labels.txt".into()),
        id_map: None,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn path3() -> GraphBundle {
        GraphBundle::from_edges("p3", &[(0, 1), (1, 2)], Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), None)
            .unwrap()
    }

    fn dense_normalized(g: &GraphBundle) -> Matrix {
        let n = g.n();
        let mut a = Matrix::identity(n);
        for (u, v) in g.edges() {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, a.get(i, j) / (deg[i] * deg[j]).sqrt());
            }
        }
        out
    }

    pub(crate) fn random_graph(n: usize, p: f64, d: usize, seed: u64) -> GraphBundle {
        let mut rng = SplitMix64::new(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(p) {
                    edges.push((u, v));
                }
            }
        }
        let feats = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect());
        GraphBundle::from_edges("random", &edges, feats, None).unwrap()
    }

    #[test]
    fn path_graph_degrees() {
        assert_eq!(path3().degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn reversed_duplicate_is_one_edge() {
        let g = GraphBundle::from_edges("g", &[(1, 0), (0, 1), (0, 0)], Matrix::zeros(2, 1), None).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = GraphBundle::from_edges("g", &[(0, 5)], Matrix::zeros(2, 1), None).unwrap_err();
        assert!(matches!(err, Error::NodeOutOfRange { id: 5, n: 2 }));
    }

    #[test]
    fn normalize_two_nodes() {
        let g = GraphBundle::from_edges("g", &[(0, 1)], Matrix::zeros(2, 1), None).unwrap();
        let a = normalize(&g).to_dense();
        assert_eq!(a, Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn normalize_isolated_node() {
        let g = GraphBundle::from_edges("g", &[], Matrix::zeros(1, 1), None).unwrap();
        assert_eq!(normalize(&g).to_dense(), Matrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn normalize_matches_dense_oracle() {
        let g = random_graph(10, 0.3, 2, 5);
        let sparse = normalize(&g).to_dense();
        assert!(sparse.max_abs_diff(&dense_normalized(&g)) <= 1e-12);
        assert!(sparse.as_slice().iter().all(|&v| v == 0.0 || (v > 0.0 && v <= 1.0)));
    }

    #[test]
    fn spmm_examples() {
        let id = SparseOperator::identity(3);
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(spmm(&id, &m).unwrap(), m);

        let g = GraphBundle::from_edges("g", &[(0, 1)], Matrix::zeros(2, 1), None).unwrap();
        let out = spmm(&normalize(&g), &Matrix::identity(2)).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));

        assert!(matches!(spmm(&id, &Matrix::zeros(2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn spmm_matches_dense_oracle() {
        let g = random_graph(50, 0.08, 1, 9);
        let adj = normalize(&g);
        let mut rng = SplitMix64::new(1);
        let m = Matrix::from_vec(50, 6, (0..300).map(|_| rng.normal()).collect());
        let sparse = spmm(&adj, &m).unwrap();
        let dense = adj.to_dense().matmul(&m);
        assert!(sparse.max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // 6-cycle: every node has degree 2.
        let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let g = GraphBundle::from_edges("c6", &edges, Matrix::zeros(6, 1), None).unwrap();
        let out = spmm(&normalize(&g), &Matrix::filled(6, 1, 1.0)).unwrap();
        for v in out.as_slice() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let g = random_graph(12, 0.3, 2, 21);
        let mut perm: Vec<usize> = (0..12).collect();
        SplitMix64::new(4).shuffle(&mut perm);
        let a = normalize(&g).to_dense();
        let b = normalize(&g.permuted(&perm).unwrap()).to_dense();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(a.get(i, j), b.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn rfgf_round_trip() {
        let m = Matrix::from_rows(&[[1.5, -2.0, 0.25], [3.0, 4.0, 5.0]]);
        let bytes = encode_rfgf(&m);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(decode_rfgf(&bytes).unwrap(), m);
    }
}
