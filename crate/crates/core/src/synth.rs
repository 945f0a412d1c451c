//! Seeded synthetic graphs with injected anomalies.
//!
//! Graphs are stochastic block models whose communities occupy contiguous
//! node ranges. Each community has a Gaussian feature centre; a node's
//! features are its centre plus isotropic noise. Two kinds of anomalies are
//! injected into disjoint random node sets:
//!
//! - contextual: features are redrawn around the centre farthest from the
//!   node's own community, while its edges stay put;
//! - structural: nodes are split into groups of `clique_size` and every
//!   within-group pair is linked with probability `clique_density`.
//!
//! All randomness comes from [`SplitMix64`] streams keyed by the spec seed,
//! so a spec reproduces the same bundle on every platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBundle;
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

/// Parameter presets standing in for different source domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// 4 communities, 32 features, about 16 neighbors per node.
    A,
    /// 8 communities, 7 features, about 6 neighbors per node.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub family: Option<Family>,
    pub n: usize,
    pub communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d: usize,
    /// Standard deviation of community centre coordinates.
    pub center_scale: f64,
    /// Standard deviation of per-node feature noise.
    pub noise: f64,
    /// Fraction of nodes that are anomalous.
    pub rho: f64,
    /// Share of anomalies that are contextual; the rest are structural.
    pub contextual_share: f64,
    pub clique_size: usize,
    pub clique_density: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn preset(family: Family, n: usize, seed: u64) -> Self {
        let (communities, d, deg_in, deg_out) = match family {
            Family::A => (4, 32, 15.0, 1.5),
            Family::B => (8, 7, 6.0, 0.5),
        };
        let block = (n / communities).max(2) as f64;
        let rest = (n as f64 - block).max(1.0);
        Self {
            name: format!("synth-{family:?}-{seed}").to_lowercase(),
            family: Some(family),
            n,
            communities,
            p_in: (deg_in / (block - 1.0)).min(1.0),
            p_out: (deg_out / rest).min(0.5),
            d,
            center_scale: 1.0,
            noise: 0.5,
            rho: 0.05,
            contextual_share: 0.5,
            clique_size: 15,
            clique_density: 0.9,
            seed,
        }
    }

    pub fn family_a(n: usize, seed: u64) -> Self {
        Self::preset(Family::A, n, seed)
    }

    pub fn family_b(n: usize, seed: u64) -> Self {
        Self::preset(Family::B, n, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.n < 2 || self.communities == 0 || self.communities > self.n {
            return bad(format!("need n >= 2 and 1 <= communities <= n, got n = {}, c = {}", self.n, self.communities));
        }
        if !(0.0 < self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad(format!("need 0 < p_out < p_in <= 1, got p_in = {}, p_out = {}", self.p_in, self.p_out));
        }
        if self.d < 2 {
            return bad(format!("feature dimension must be at least 2, got {}", self.d));
        }
        if !(0.0..0.5).contains(&self.rho) {
            return bad(format!("anomaly fraction must lie in [0, 0.5), got {}", self.rho));
        }
        if self.rho > 0.0 && self.rho * (self.n as f64) < 1.0 {
            return bad(format!("rho * n = {} leaves no anomaly to inject", self.rho * self.n as f64));
        }
        if !(0.0..=1.0).contains(&self.contextual_share) || !(0.0..=1.0).contains(&self.clique_density) {
            return bad("contextual_share and clique_density must lie in [0, 1]".into());
        }
        if self.clique_size < 3 {
            return bad(format!("clique size must be at least 3, got {}", self.clique_size));
        }
        if !(self.center_scale >= 0.0 && self.noise >= 0.0) {
            return bad("center_scale and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn anomaly_count(&self) -> usize {
        (self.rho * self.n as f64).round() as usize
    }

    fn community_of(&self, i: usize) -> usize {
        i * self.communities / self.n
    }

    fn community_range(&self, c: usize) -> std::ops::Range<usize> {
        let start = (c * self.n).div_ceil(self.communities);
        let end = ((c + 1) * self.n).div_ceil(self.communities);
        start..end
    }
}

/// Which nodes received which kind of anomaly.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Injected {
    pub contextual: Vec<usize>,
    pub structural: Vec<usize>,
    pub cliques: Vec<Vec<usize>>,
}

pub fn generate(spec: &SynthSpec) -> Result<GraphBundle> {
    generate_with_truth(spec).map(|(g, _)| g)
}

/// Bernoulli(p) successes over `lo..hi`, by geometric skipping.
fn sample_range(rng: &mut SplitMix64, lo: usize, hi: usize, p: f64, mut emit: impl FnMut(usize)) {
    if p <= 0.0 || lo >= hi {
        return;
    }
    if p >= 1.0 {
        (lo..hi).for_each(emit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut j = lo as f64 - 1.0;
    loop {
        let u = 1.0 - rng.uniform();
        j += 1.0 + (u.ln() / log_q).floor();
        if j >= hi as f64 {
            return;
        }
        emit(j as usize);
    }
}

pub fn generate_with_truth(spec: &SynthSpec) -> Result<(GraphBundle, Injected)> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);

    let mut rng = SplitMix64::keyed(spec.seed, &[0x5b, 1]);
    let centers: Vec<Vec<f64>> =
        (0..spec.communities).map(|_| (0..d).map(|_| spec.center_scale * rng.normal()).collect()).collect();

    let mut rng = SplitMix64::keyed(spec.seed, &[0x5b, 2]);
    let mut edges = Vec::new();
    for i in 0..n {
        let own = spec.community_range(spec.community_of(i));
        let mut push = |j: usize| edges.push((i, j));
        sample_range(&mut rng, i + 1, own.end, spec.p_in, &mut push);
        sample_range(&mut rng, own.end.max(i + 1), n, spec.p_out, &mut push);
    }

    let mut rng = SplitMix64::keyed(spec.seed, &[0x5b, 3]);
    let mut features = Matrix::zeros(n, d);
    for i in 0..n {
        let c = &centers[spec.community_of(i)];
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            *v = c[j] + spec.noise * rng.normal();
        }
    }

    let mut rng = SplitMix64::keyed(spec.seed, &[0x5b, 4]);
    let total = spec.anomaly_count();
    let all: Vec<usize> = (0..n).collect();
    let chosen = rng.choose_distinct(&all, total);
    let n_ctx = (total as f64 * spec.contextual_share).round() as usize;
    let mut truth = Injected {
        contextual: chosen[..n_ctx].to_vec(),
        structural: chosen[n_ctx..].to_vec(),
        cliques: Vec::new(),
    };

    for &i in &truth.contextual {
        let own = &centers[spec.community_of(i)];
        let far = (0..spec.communities)
            .max_by(|&a, &b| sq_dist(own, &centers[a]).total_cmp(&sq_dist(own, &centers[b])))
            .expect("at least one community");
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            *v = centers[far][j] + spec.noise * rng.normal();
        }
    }

    let mut groups: Vec<Vec<usize>> = truth.structural.chunks(spec.clique_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 3) {
        let tail = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(tail);
    }
    for group in &groups {
        for (a, &u) in group.iter().enumerate() {
            for &v in &group[a + 1..] {
                if rng.bernoulli(spec.clique_density) {
                    edges.push((u, v));
                }
            }
        }
    }
    truth.cliques = groups;
    truth.contextual.sort_unstable();
    truth.structural.sort_unstable();

    let mut labels = vec![0u8; n];
    for &i in truth.contextual.iter().chain(&truth.structural) {
        labels[i] = 1;
    }
    let g = GraphBundle::from_edges(spec.name.clone(), &edges, features, Some(labels))?;
    Ok((g, truth))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Uniform random graph with about `m` edges and Gaussian features.
pub fn random_sparse(n: usize, m: usize, d: usize, seed: u64) -> Result<GraphBundle> {
    if n < 2 {
        return Err(Error::Invalid("random graph needs at least two nodes".into()));
    }
    let mut rng = SplitMix64::keyed(seed, &[0x7a, 1]);
    let mut edges = Vec::with_capacity(m);
    while edges.len() < m {
        let u = rng.below(n);
        let v = rng.below(n);
        if u != v {
            edges.push((u, v));
        }
    }
    let mut rng = SplitMix64::keyed(seed, &[0x7a, 2]);
    let features = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect());
    GraphBundle::from_edges(format!("random-{n}-{m}"), &edges, features, None)
}
