//! Relational fingerprints.
//!
//! Every node is summarized by five relational attributes that mean the same
//! thing on any attributed graph, whatever its feature space:
//!
//! | dim | attribute | computed from |
//! |-----|-----------|---------------|
//! | NP  | mean distance to neighbors | similarity-reweighted convolution `Ā X`, `Ā = Â ⊙ XXᵀ` |
//! | ND  | mean cosine to neighbors   | same convolved features |
//! | GD  | cosine to global centre    | two-hop convolution `Â(ÂX)` |
//! | deg | degree                     | adjacency |
//! | LC  | local clustering coefficient | triangle counts |
//!
//! Each attribute is replaced by its percentile rank within the graph
//! (average rank for ties, divided by `n`), which puts every graph on the
//! same `(0, 1]` scale.
//!
//! Degenerate cases: cosine with a zero vector is 0; an isolated node has
//! NP = 0 and ND = 1; LC = 0 when degree < 2.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize, spmm, GraphBundle, NormalizedAdjacency, SparseOperator};
use crate::matrix::{cosine, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    Np,
    Nd,
    Gd,
    Deg,
    Lc,
}

impl Dim {
    /// Fingerprint column order.
    pub const ALL: [Dim; 5] = [Dim::Np, Dim::Nd, Dim::Gd, Dim::Deg, Dim::Lc];

    pub fn name(self) -> &'static str {
        match self {
            Dim::Np => "np",
            Dim::Nd => "nd",
            Dim::Gd => "gd",
            Dim::Deg => "deg",
            Dim::Lc => "lc",
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "np" => Ok(Dim::Np),
            "nd" => Ok(Dim::Nd),
            "gd" => Ok(Dim::Gd),
            "deg" | "degree" | "d" => Ok(Dim::Deg),
            "lc" => Ok(Dim::Lc),
            _ => Err(Error::Invalid(format!("unknown fingerprint dimension {s:?} (expected np, nd, gd, deg or lc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintOptions {
    /// Use ℓ2-normalized feature rows for the edge similarity term.
    pub normalize_similarity: bool,
    /// Permit dropping more than one dimension.
    pub allow_multi_drop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAttributes {
    pub np: Vec<f64>,
    pub nd: Vec<f64>,
    pub gd: Vec<f64>,
    pub deg: Vec<usize>,
    pub lc: Vec<f64>,
}

impl RawAttributes {
    pub fn column(&self, dim: Dim) -> Vec<f64> {
        match dim {
            Dim::Np => self.np.clone(),
            Dim::Nd => self.nd.clone(),
            Dim::Gd => self.gd.clone(),
            Dim::Deg => self.deg.iter().map(|&d| d as f64).collect(),
            Dim::Lc => self.lc.clone(),
        }
    }
}

/// Rank-transformed fingerprint matrix, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ReFiMatrix {
    values: Matrix,
    dims: Vec<Dim>,
}

impl ReFiMatrix {
    pub fn new(values: Matrix, dims: Vec<Dim>) -> Result<Self> {
        if values.cols() != dims.len() {
            return Err(Error::shape("refi", format!("{} columns for {} dims", values.cols(), dims.len())));
        }
        Ok(Self { values, dims })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.dims.len()
    }

    /// Active dimensions, in column order.
    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn dropped(&self) -> Vec<Dim> {
        Dim::ALL.iter().copied().filter(|d| !self.dims.contains(d)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<&str> = std::iter::once("node").chain(self.dims.iter().map(|d| d.name())).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            write!(w, "{i}")?;
            for v in self.values.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `Ā = Â ⊙ (X Xᵀ)`, evaluated only on the stored entries of `Â`.
pub fn reweighted_adjacency(g: &GraphBundle, adj: &NormalizedAdjacency, opts: FingerprintOptions) -> SparseOperator {
    let normalized;
    let x = if opts.normalize_similarity {
        normalized = l2_normalize_rows(g.features());
        &normalized
    } else {
        g.features()
    };
    adj.map_entries(|i, j, a| a * dot(x.row(i), x.row(j)))
}

fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// NP, ND and GD for every node.
pub fn contextual_attributes(g: &GraphBundle) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    contextual_attributes_with(g, &normalize(g), FingerprintOptions::default())
}

pub fn contextual_attributes_with(
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    opts: FingerprintOptions,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let x = g.features();
    let reweighted = reweighted_adjacency(g, adj, opts);
    let conv = spmm(&reweighted, x).expect("operator built from the same graph");
    drop(reweighted);
    let norms: Vec<f64> = (0..g.n()).map(|i| dot(conv.row(i), conv.row(i)).sqrt()).collect();

    let (np, nd): (Vec<f64>, Vec<f64>) = (0..g.n())
        .into_par_iter()
        .map(|i| {
            let nbrs = g.neighbors(i);
            if nbrs.is_empty() {
                return (0.0, 1.0);
            }
            let xi = conv.row(i);
            let mut dist = 0.0;
            let mut cos = 0.0;
            for &j in nbrs {
                let xj = conv.row(j);
                let mut sq = 0.0;
                let mut ip = 0.0;
                for (a, b) in xi.iter().zip(xj) {
                    sq += (a - b) * (a - b);
                    ip += a * b;
                }
                dist += sq.sqrt();
                if norms[i] > 0.0 && norms[j] > 0.0 {
                    cos += ip / (norms[i] * norms[j]);
                }
            }
            let k = nbrs.len() as f64;
            (dist / k, cos / k)
        })
        .unzip();
    drop(conv);

    // Two sparse products rather than forming Â².
    let two_hop = spmm(adj, &spmm(adj, x).expect("same graph")).expect("same graph");
    let mut center = vec![0.0; g.d()];
    for i in 0..g.n() {
        for (c, v) in center.iter_mut().zip(two_hop.row(i)) {
            *c += v;
        }
    }
    let n = g.n() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    let gd = (0..g.n()).into_par_iter().map(|i| cosine(two_hop.row(i), &center)).collect();
    (np, nd, gd)
}

/// Triangles through each node. Edges are oriented from lower to higher
/// `(degree, id)`, so every triangle is found once, from its lowest vertex,
/// by intersecting sorted out-lists.
pub fn triangle_counts(g: &GraphBundle) -> Vec<u64> {
    let n = g.n();
    let higher = |i: usize, j: usize| (g.degree(j), j) > (g.degree(i), i);
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0usize);
    let mut targets = Vec::new();
    for i in 0..n {
        targets.extend(g.neighbors(i).iter().copied().filter(|&j| higher(i, j)));
        offsets.push(targets.len());
    }
    let out = |i: usize| &targets[offsets[i]..offsets[i + 1]];

    let counts: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(0)).collect();
    (0..n).into_par_iter().for_each(|u| {
        let ou = out(u);
        for &v in ou {
            let mut found = 0u64;
            for_each_common(ou, out(v), |w| {
                counts[w].fetch_add(1, Ordering::Relaxed);
                found += 1;
            });
            if found > 0 {
                counts[u].fetch_add(found, Ordering::Relaxed);
                counts[v].fetch_add(found, Ordering::Relaxed);
            }
        }
    });
    counts.into_iter().map(AtomicU64::into_inner).collect()
}

fn for_each_common(a: &[usize], b: &[usize], mut f: impl FnMut(usize)) {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                f(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
}

/// Degree and local clustering coefficient.
pub fn structural_attributes(g: &GraphBundle) -> (Vec<usize>, Vec<f64>) {
    let deg = g.degrees();
    let lc = triangle_counts(g)
        .into_iter()
        .zip(&deg)
        .map(|(t, &d)| if d < 2 { 0.0 } else { 2.0 * t as f64 / (d as f64 * (d as f64 - 1.0)) })
        .collect();
    (deg, lc)
}

pub fn raw_attributes(g: &GraphBundle, opts: FingerprintOptions) -> RawAttributes {
    let adj = normalize(g);
    let (np, nd, gd) = contextual_attributes_with(g, &adj, opts);
    drop(adj);
    let (deg, lc) = structural_attributes(g);
    RawAttributes { np, nd, gd, deg, lc }
}

/// Ascending percentile ranks; tied values share the mean of their rank
/// positions. Output entries lie in `(0, 1]`.
pub fn rank_transform(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        // `==` so that -0.0 and 0.0 tie.
        while end < n && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // 1-based positions start+1 ..= end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            out[idx] = avg / n as f64;
        }
        start = end;
    }
    out
}

pub fn build_refi(g: &GraphBundle, drop: &[Dim]) -> Result<ReFiMatrix> {
    build_refi_with(g, drop, FingerprintOptions::default())
}

pub fn build_refi_with(g: &GraphBundle, drop: &[Dim], opts: FingerprintOptions) -> Result<ReFiMatrix> {
    let dims = active_dims(drop, opts.allow_multi_drop)?;
    let raw = raw_attributes(g, opts);
    Ok(refi_from_raw(&raw, &dims))
}

/// Validates a drop set and returns the remaining dimensions in column order.
pub fn active_dims(drop: &[Dim], allow_multi_drop: bool) -> Result<Vec<Dim>> {
    let dims: Vec<Dim> = Dim::ALL.iter().copied().filter(|d| !drop.contains(d)).collect();
    let dropped = Dim::ALL.len() - dims.len();
    if dims.is_empty() {
        return Err(Error::Invalid("cannot drop all five fingerprint dimensions".into()));
    }
    if dropped > 1 && !allow_multi_drop {
        return Err(Error::Invalid(format!(
            "dropping {dropped} dimensions requires the multi-drop option"
        )));
    }
    Ok(dims)
}

pub fn refi_from_raw(raw: &RawAttributes, dims: &[Dim]) -> ReFiMatrix {
    let n = raw.deg.len();
    let mut values = Matrix::zeros(n, dims.len());
    for (c, &dim) in dims.iter().enumerate() {
        for (i, r) in rank_transform(&raw.column(dim)).into_iter().enumerate() {
            values.set(i, c, r);
        }
    }
    ReFiMatrix { values, dims: dims.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn graph(edges: &[(usize, usize)], feats: Matrix) -> GraphBundle {
        GraphBundle::from_edges("t", edges, feats, None).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn unit_features_leave_adjacency_unchanged() {
        let g = graph(&[(0, 1), (1, 2), (2, 3)], Matrix::from_rows(&[[1.0, 0.0]; 4]));
        let adj = normalize(&g);
        assert_eq!(reweighted_adjacency(&g, &adj, Default::default()), *adj.operator());
    }

    #[test]
    fn orthogonal_endpoints_zero_the_edge() {
        let g = graph(&[(0, 1)], Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let bar = reweighted_adjacency(&g, &normalize(&g), Default::default()).to_dense();
        assert_eq!(bar.get(0, 1), 0.0);
        assert_eq!(bar.get(1, 0), 0.0);
        assert_eq!(bar.get(0, 0), 0.5);
    }

    #[test]
    fn identical_features_give_neutral_context() {
        let feats = Matrix::from_rows(&[[0.3, -1.2, 2.0]; 4]);
        let g = graph(&[(0, 1), (1, 2), (0, 2), (2, 3)], feats.clone());
        let (_, nd, gd) = contextual_attributes(&g);
        for i in 0..4 {
            assert_close(nd[i], 1.0, 1e-12);
            assert_close(gd[i], 1.0, 1e-12);
        }
        // Representations differ only in scale unless Â has equal row sums.
        let cycle = graph(&[(0, 1), (1, 2), (2, 3), (3, 0)], feats);
        let (np, nd, gd) = contextual_attributes(&cycle);
        for i in 0..4 {
            assert_close(np[i], 0.0, 1e-12);
            assert_close(nd[i], 1.0, 1e-12);
            assert_close(gd[i], 1.0, 1e-12);
        }
    }

    #[test]
    fn two_node_orthogonal_hand_case() {
        let g = graph(&[(0, 1)], Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let (np, nd, _) = contextual_attributes(&g);
        assert_close(np[0], 0.5f64.hypot(0.5), 1e-12);
        assert_close(np[1], 0.707_106_781_186_547_5, 1e-12);
        assert_eq!(nd, vec![0.0, 0.0]);
    }

    #[test]
    fn isolated_node_defaults() {
        let g = graph(&[(0, 1)], Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
        let (np, nd, _) = contextual_attributes(&g);
        assert_eq!((np[2], nd[2]), (0.0, 1.0));
    }

    #[test]
    fn structural_examples() {
        let k3 = graph(&[(0, 1), (1, 2), (0, 2)], Matrix::zeros(3, 1));
        assert_eq!(structural_attributes(&k3), (vec![2, 2, 2], vec![1.0, 1.0, 1.0]));
        let star = graph(&[(0, 1), (0, 2), (0, 3)], Matrix::zeros(4, 1));
        assert_eq!(structural_attributes(&star), (vec![3, 1, 1, 1], vec![0.0; 4]));
    }

    #[test]
    fn triangles_match_triple_enumeration() {
        let mut rng = SplitMix64::new(12);
        let n = 12;
        let mut adj = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(0.4) {
                    adj[u][v] = true;
                    adj[v][u] = true;
                    edges.push((u, v));
                }
            }
        }
        let g = graph(&edges, Matrix::zeros(n, 1));
        let mut want = vec![0u64; n];
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    if adj[a][b] && adj[b][c] && adj[a][c] {
                        want[a] += 1;
                        want[b] += 1;
                        want[c] += 1;
                    }
                }
            }
        }
        assert_eq!(triangle_counts(&g), want);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_transform(&[0.3, 0.1, 0.2]), vec![1.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(rank_transform(&[5.0, 5.0, 2.0]), vec![2.5 / 3.0, 2.5 / 3.0, 1.0 / 3.0]);
        assert_eq!(rank_transform(&[7.0; 6]), vec![7.0 / 12.0; 6]);
        assert_eq!(rank_transform(&[0.0, -0.0]), vec![0.75, 0.75]);
    }

    #[test]
    fn constant_triangle_gives_two_thirds() {
        let g = graph(&[(0, 1), (1, 2), (0, 2)], Matrix::from_rows(&[[1.0, 2.0]; 3]));
        let p = build_refi(&g, &[]).unwrap();
        assert_eq!(p.width(), 5);
        for &v in p.values().as_slice() {
            assert_close(v, 2.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn drop_bookkeeping() {
        let g = graph(&[(0, 1), (1, 2)], Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
        let p = build_refi(&g, &[Dim::Gd]).unwrap();
        assert_eq!(p.dims(), &[Dim::Np, Dim::Nd, Dim::Deg, Dim::Lc]);
        assert_eq!(p.dropped(), vec![Dim::Gd]);
        assert!(build_refi(&g, &Dim::ALL).is_err());
        assert!(build_refi(&g, &[Dim::Np, Dim::Nd]).is_err());
        let opts = FingerprintOptions { allow_multi_drop: true, ..Default::default() };
        assert_eq!(build_refi_with(&g, &[Dim::Np, Dim::Nd], opts).unwrap().width(), 3);
    }

    #[test]
    fn csv_header_omits_dropped() {
        let g = graph(&[(0, 1)], Matrix::from_rows(&[[1.0], [2.0]]));
        let p = build_refi(&g, &[Dim::Lc]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("node,np,nd,gd,deg\n"));
    }
}
