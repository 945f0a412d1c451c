//! Episodic training on labeled source graphs.
//!
//! Every episode is drawn from a single graph: `k` normal and `k` anomalous
//! supports, then a query batch with `⌈n_b·r/(r+1)⌉` normals and the rest
//! anomalies. A stratified tenth of each graph is withheld from sampling and
//! used to compute validation AUROC after every epoch; the parameters with
//! the best validation AUROC are returned.
//!
//! Episode randomness is keyed by `(seed, graph, epoch, episode)`, so a run
//! is reproducible bit for bit given the same inputs and configuration.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{forward, infer, load_weights, Background, Episode, Hyper, InferenceOptions, ModelParams, Support};
use crate::error::{Error, Result};
use crate::fingerprint::ReFiMatrix;
use crate::matrix::Matrix;
use crate::metrics::auroc;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::rng::SplitMix64;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub n_b: usize,
    /// Normal queries per anomalous query.
    pub ratio: f64,
    pub epochs: usize,
    pub episodes_per_graph: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Fraction of each graph's nodes (per class) held out for validation.
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 50,
            n_b: 512,
            ratio: 10.0,
            epochs: 100,
            episodes_per_graph: 4,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 42,
            val_fraction: 0.1,
            patience: Some(20),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_b == 0 {
            return Err(Error::Invalid("k and n_b must be at least 1".into()));
        }
        if !(self.ratio >= 1.0) || !self.ratio.is_finite() {
            return Err(Error::Invalid(format!("ratio must be a finite value >= 1, got {}", self.ratio)));
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be finite and non-negative, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Invalid("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Normal and anomalous query counts before clamping to availability.
    pub fn query_split(&self) -> (usize, usize) {
        let normals = ((self.n_b as f64) * self.ratio / (self.ratio + 1.0)).ceil() as usize;
        let normals = normals.min(self.n_b);
        (normals, self.n_b - normals)
    }
}

/// A labeled graph to train on.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub name: &'a str,
    pub refi: &'a ReFiMatrix,
    pub labels: &'a [u8],
}

/// Node pools of one source graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pools {
    pub normals: Vec<usize>,
    pub anomalies: Vec<usize>,
    pub val_normals: Vec<usize>,
    pub val_anomalies: Vec<usize>,
}

impl Pools {
    /// Stratified hold-out. Anomalies are only held out while at least
    /// `k + 1` remain for training.
    pub fn split(labels: &[u8], k: usize, val_fraction: f64, rng: &mut SplitMix64) -> Self {
        let mut normals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let mut anomalies: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
        rng.shuffle(&mut normals);
        rng.shuffle(&mut anomalies);
        let take = |len: usize| ((len as f64) * val_fraction).round() as usize;
        let n_val_a = take(anomalies.len()).min(anomalies.len().saturating_sub(k + 1));
        let n_val_n = take(normals.len()).min(normals.len().saturating_sub(k + 1));
        let val_anomalies = anomalies.split_off(anomalies.len() - n_val_a);
        let val_normals = normals.split_off(normals.len() - n_val_n);
        normals.sort_unstable();
        anomalies.sort_unstable();
        Self { normals, anomalies, val_normals, val_anomalies }
    }

    pub fn check(&self, k: usize) -> Result<()> {
        if self.anomalies.len() < k + 1 {
            return Err(Error::InsufficientAnomalies { have: self.anomalies.len(), need: k + 1 });
        }
        if self.normals.len() < k + 1 {
            return Err(Error::InsufficientNormals { have: self.normals.len(), need: k + 1 });
        }
        Ok(())
    }
}

/// Draws one episode and the query labels (1 = anomalous).
pub fn sample_episode(pools: &Pools, cfg: &TrainConfig, rng: &mut SplitMix64) -> Result<(Episode, Vec<u8>)> {
    pools.check(cfg.k)?;
    let normals = rng.choose_distinct(&pools.normals, pools.normals.len());
    let anomalies = rng.choose_distinct(&pools.anomalies, pools.anomalies.len());
    let (want_n, want_a) = cfg.query_split();
    let q_n = want_n.min(normals.len() - cfg.k);
    let q_a = want_a.min(anomalies.len() - cfg.k);
    let mut queries = Vec::with_capacity(q_n + q_a);
    queries.extend_from_slice(&normals[cfg.k..cfg.k + q_n]);
    queries.extend_from_slice(&anomalies[cfg.k..cfg.k + q_a]);
    let mut labels = vec![0u8; q_n];
    labels.resize(q_n + q_a, 1);
    Ok((
        Episode {
            support_normal: normals[..cfg.k].to_vec(),
            support_anomalous: anomalies[..cfg.k].to_vec(),
            queries,
        },
        labels,
    ))
}

/// Mean binary cross-entropy with predictions clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(pred: &[f64], labels: &[u8]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::RowCountMismatch { what: "labels", got: labels.len(), expected: pred.len() });
    }
    let mut tape = Tape::new();
    let p = tape.constant(Matrix::from_vec(pred.len(), 1, pred.to_vec()))?;
    let loss = bce_on_tape(&mut tape, p, labels)?;
    Ok(tape.value(loss).item())
}

pub fn bce_on_tape(tape: &mut Tape, pred: Var, labels: &[u8]) -> Result<Var> {
    let (rows, cols) = tape.shape(pred);
    if cols != 1 || rows != labels.len() {
        return Err(Error::shape("bce", format!("{rows}x{cols} predictions for {} labels", labels.len())));
    }
    let y = Matrix::from_vec(rows, 1, labels.iter().map(|&l| l as f64).collect());
    let one_minus_y = y.map(|v| 1.0 - v);
    let y = tape.constant(y)?;
    let one_minus_y = tape.constant(one_minus_y)?;
    let log_p = tape.log_clamped(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let neg = tape.scalar_mul(pred, -1.0)?;
    let q = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log_clamped(q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let a = tape.hadamard(y, log_p)?;
    let b = tape.hadamard(one_minus_y, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll)?;
    tape.scalar_mul(mean, -1.0)
}

/// Loss and per-tensor gradients (canonical order) for one episode.
pub fn loss_and_grads(
    params: &ModelParams,
    refi: &ReFiMatrix,
    episode: &Episode,
    labels: &[u8],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let w = load_weights(&mut tape, &params.weights, true)?;
    let out = forward(&mut tape, &w, &params.hyper, refi, episode, &Background::Episode)?;
    let loss = bce_on_tape(&mut tape, out.scores, labels)?;
    tape.backward(loss)?;
    let mut grads = Vec::new();
    w.for_each(|_, &v| grads.push(tape.grad(v)));
    Ok((tape.value(loss).item(), grads))
}

/// Loss only, without recording gradients.
pub fn episode_loss(params: &ModelParams, refi: &ReFiMatrix, episode: &Episode, labels: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let w = load_weights(&mut tape, &params.weights, false)?;
    let out = forward(&mut tape, &w, &params.hyper, refi, episode, &Background::Episode)?;
    let loss = bce_on_tape(&mut tape, out.scores, labels)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: usize,
    pub graph: String,
    pub loss: f64,
    /// Set on the last episode of each epoch.
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auroc: Option<f64>,
    /// Graphs skipped with the reason.
    pub skipped: Vec<(String, String)>,
}

struct Prepared<'a> {
    source: Source<'a>,
    index: usize,
    pools: Pools,
    val_support: Support,
}

fn prepare<'a>(sources: &[Source<'a>], hyper: &Hyper, cfg: &TrainConfig) -> Result<(Vec<Prepared<'a>>, Vec<(String, String)>)> {
    let mut ready = Vec::new();
    let mut skipped = Vec::new();
    for (index, source) in sources.iter().enumerate() {
        if source.labels.len() != source.refi.n() {
            return Err(Error::RowCountMismatch { what: "labels", got: source.labels.len(), expected: source.refi.n() });
        }
        if source.refi.dims() != hyper.dims.as_slice() {
            return Err(Error::Invalid(format!(
                "graph {} has fingerprint dims {:?}, model uses {:?}",
                source.name,
                source.refi.dims(),
                hyper.dims
            )));
        }
        let mut rng = SplitMix64::keyed(cfg.seed, &[0x7a1, index as u64]);
        let pools = Pools::split(source.labels, cfg.k, cfg.val_fraction, &mut rng);
        if let Err(e) = pools.check(cfg.k) {
            warn!("skipping graph {}: {e}", source.name);
            skipped.push((source.name.to_string(), e.to_string()));
            continue;
        }
        let val_support = Support {
            normal: rng.choose_distinct(&pools.normals, cfg.k),
            anomalous: rng.choose_distinct(&pools.anomalies, cfg.k),
        };
        ready.push(Prepared { source: *source, index, pools, val_support });
    }
    Ok((ready, skipped))
}

/// Mean held-out AUROC over graphs whose hold-out contains both classes.
fn validate(params: &ModelParams, prepared: &[Prepared<'_>], batch_size: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in prepared {
        if p.pools.val_normals.is_empty() || p.pools.val_anomalies.is_empty() {
            continue;
        }
        let nodes: Vec<usize> = p.pools.val_normals.iter().chain(&p.pools.val_anomalies).copied().collect();
        let labels: Vec<u8> = nodes.iter().map(|&i| p.source.labels[i]).collect();
        let opts = InferenceOptions { batch_size, ..InferenceOptions::default() };
        let out = infer(params, p.source.refi, &p.val_support, &nodes, opts)?;
        total += auroc(&out.scores, &labels)?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

pub fn episode_seed(seed: u64, graph: usize, epoch: usize, episode: usize) -> u64 {
    SplitMix64::keyed(seed, &[0xe915, graph as u64, epoch as u64, episode as u64]).next_u64()
}

/// Trains a freshly initialized model. `on_episode` sees every history row
/// as it is produced.
pub fn train(
    sources: &[Source<'_>],
    hyper: Hyper,
    cfg: &TrainConfig,
    mut on_episode: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hyper.validate()?;
    let (prepared, skipped) = prepare(sources, &hyper, cfg)?;
    if prepared.is_empty() {
        return Err(Error::Invalid("no source graph has enough labeled nodes to train on".into()));
    }

    let mut params = ModelParams::init(hyper, cfg.seed)?;
    let mut state = AdamState::new(params.named_tensors().iter().map(|(_, m)| m.shape()));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut counter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        SplitMix64::keyed(cfg.seed, &[0x0bde, epoch as u64]).shuffle(&mut order);
        for &g in &order {
            let p = &prepared[g];
            for e in 0..cfg.episodes_per_graph {
                let seed = episode_seed(cfg.seed, p.index, epoch, e);
                let diverged = || Error::Diverged { graph: p.source.name.to_string(), epoch, episode: e, seed };
                let (episode, labels) = sample_episode(&p.pools, cfg, &mut SplitMix64::new(seed))?;
                let (loss, mut grads) = match loss_and_grads(&params, p.source.refi, &episode, &labels) {
                    Ok(r) => r,
                    Err(Error::NonFinite(_)) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(diverged());
                }
                if let Some(max) = cfg.clip_norm {
                    clip_global_norm(&mut grads, max);
                }
                adam_step(&mut params.tensors_mut(), &grads, &mut state, &cfg.adam);
                if params.named_tensors().iter().any(|(_, m)| !m.is_finite()) {
                    return Err(diverged());
                }
                let row = HistoryRow { episode: counter, graph: p.source.name.to_string(), loss, val_auroc: None };
                on_episode(&row);
                history.push(row);
                counter += 1;
            }
        }
        epochs_run = epoch + 1;

        let val = validate(&params, &prepared, cfg.n_b)?;
        if let Some(last) = history.last_mut() {
            last.val_auroc = val;
        }
        let Some(val) = val else { continue };
        info!("epoch {epoch}: validation AUROC {val:.4}");
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (best_val_auroc, best_epoch, params) = match best {
        Some((v, e, p)) => (Some(v), Some(e), p),
        None => (None, None, params),
    };
    Ok(TrainOutcome { params, history, epochs_run, best_epoch, best_val_auroc, skipped })
}

pub fn write_history_csv(rows: &[HistoryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Invalid(format!("history CSV: {e}"));
    w.write_record(["episode", "graph", "loss", "val_auroc"]).map_err(wrap)?;
    for r in rows {
        let val = r.val_auroc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.episode.to_string(), r.graph.clone(), r.loss.to_string(), val]).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("history CSV: {e}")))?;
    Ok(())
}

pub fn save_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(rows, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BlockVariant;
    use crate::fingerprint::{build_refi, Dim};
    use crate::synth::{generate, SynthSpec};

    fn labels(n: usize, every: usize) -> Vec<u8> {
        (0..n).map(|i| (i % every == 0) as u8).collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { k: 3, n_b: 22, epochs: 2, episodes_per_graph: 2, ..TrainConfig::default() }
    }

    #[test]
    fn query_split_follows_ratio() {
        assert_eq!(small_cfg().query_split(), (20, 2));
        assert_eq!(TrainConfig::default().query_split(), (466, 46));
    }

    #[test]
    fn sampled_episodes_are_valid() {
        let y = labels(300, 7);
        let cfg = small_cfg();
        let pools = Pools::split(&y, cfg.k, 0.1, &mut SplitMix64::new(1));
        let held: Vec<usize> = pools.val_normals.iter().chain(&pools.val_anomalies).copied().collect();
        for s in 0..1000 {
            let (ep, ql) = sample_episode(&pools, &cfg, &mut SplitMix64::new(s)).unwrap();
            ep.validate(300).unwrap();
            assert_eq!(ep.k(), 3);
            assert!(ep.support_normal.iter().all(|&i| y[i] == 0));
            assert!(ep.support_anomalous.iter().all(|&i| y[i] == 1));
            assert_eq!(ql.iter().filter(|&&l| l == 0).count(), 20);
            assert_eq!(ql.iter().filter(|&&l| l == 1).count(), 2);
            for (&q, &l) in ep.queries.iter().zip(&ql) {
                assert_eq!(y[q], l);
                assert!(!held.contains(&q));
            }
        }
    }

    #[test]
    fn anomaly_shortage_is_reported() {
        let mut y = vec![0u8; 100];
        y[..3].fill(1);
        let cfg = small_cfg();
        let pools = Pools::split(&y, cfg.k, 0.1, &mut SplitMix64::new(0));
        assert_eq!(pools.anomalies.len(), 3);
        assert!(matches!(
            sample_episode(&pools, &cfg, &mut SplitMix64::new(0)),
            Err(Error::InsufficientAnomalies { have: 3, need: 4 })
        ));
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap() <= 1e-11);
        assert!((bce_loss(&[0.5; 4], &[1, 0, 0, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[0.5], &[1, 0]).is_err());
        let mut rng = SplitMix64::new(4);
        for _ in 0..100 {
            let m = 1 + rng.below(30);
            let p: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
            let y: Vec<u8> = (0..m).map(|_| rng.bernoulli(0.5) as u8).collect();
            let mut oracle = 0.0;
            for (&pi, &yi) in p.iter().zip(&y) {
                let c = pi.clamp(1e-12, 1.0 - 1e-12);
                let q = (1.0 - pi).clamp(1e-12, 1.0 - 1e-12);
                oracle -= if yi == 1 { c.ln() } else { q.ln() };
            }
            oracle /= m as f64;
            assert!((bce_loss(&p, &y).unwrap() - oracle).abs() <= 1e-12);
        }
    }

    fn fixture() -> (ReFiMatrix, Vec<u8>) {
        let g = generate(&SynthSpec::family_a(300, 2)).unwrap();
        (build_refi(&g, &[]).unwrap(), g.labels().unwrap().to_vec())
    }

    fn tiny_hyper() -> Hyper {
        Hyper { d_model: 8, layers: 1, ..Hyper::default() }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (refi, y) = fixture();
        let src = [Source { name: "a", refi: &refi, labels: &y }];
        let mut cfg = small_cfg();
        cfg.adam.lr = 0.0;
        cfg.patience = None;
        let out = train(&src, tiny_hyper(), &cfg, |_| {}).unwrap();
        let init = ModelParams::init(tiny_hyper(), cfg.seed).unwrap();
        assert_eq!(out.params.checksum(), init.checksum());
        assert_eq!(out.history.len(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let (refi, y) = fixture();
        let src = [Source { name: "a", refi: &refi, labels: &y }];
        let cfg = small_cfg();
        let a = train(&src, tiny_hyper(), &cfg, |_| {}).unwrap();
        let b = train(&src, tiny_hyper(), &cfg, |_| {}).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn fresh_model_loss_near_ln2() {
        let (refi, y) = fixture();
        let cfg = TrainConfig { k: 5, n_b: 64, ..TrainConfig::default() };
        let pools = Pools::split(&y, cfg.k, 0.1, &mut SplitMix64::new(3));
        for variant in [BlockVariant::Standard, BlockVariant::Literal] {
            let params = ModelParams::init(Hyper { variant, ..tiny_hyper() }, 11).unwrap();
            for s in 0..20 {
                let (ep, ql) = sample_episode(&pools, &cfg, &mut SplitMix64::new(s)).unwrap();
                let loss = episode_loss(&params, &refi, &ep, &ql).unwrap();
                assert!((loss - std::f64::consts::LN_2).abs() < 0.2, "{variant}: {loss}");
            }
        }
    }

    #[test]
    fn skipped_graph_is_reported() {
        let (refi, y) = fixture();
        let few = {
            let mut v = vec![0u8; y.len()];
            v[..2].fill(1);
            v
        };
        let src = [Source { name: "ok", refi: &refi, labels: &y }, Source { name: "few", refi: &refi, labels: &few }];
        let out = train(&src, tiny_hyper(), &small_cfg(), |_| {}).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, "few");
        assert!(out.history.iter().all(|r| r.graph == "ok"));
    }

    #[test]
    fn dims_must_match() {
        let (_, y) = fixture();
        let g = generate(&SynthSpec::family_a(300, 2)).unwrap();
        let refi4 = build_refi(&g, &[Dim::Lc]).unwrap();
        let src = [Source { name: "a", refi: &refi4, labels: &y }];
        assert!(train(&src, tiny_hyper(), &small_cfg(), |_| {}).is_err());
        let hyper = Hyper { dims: vec![Dim::Np, Dim::Nd, Dim::Gd, Dim::Deg], ..tiny_hyper() };
        train(&src, hyper, &small_cfg(), |_| {}).unwrap();
    }

    #[test]
    fn history_csv_layout() {
        let rows = vec![
            HistoryRow { episode: 0, graph: "g".into(), loss: 0.5, val_auroc: None },
            HistoryRow { episode: 1, graph: "g".into(), loss: 0.25, val_auroc: Some(0.75) },
        ];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "episode,graph,loss,val_auroc\n0,g,0.5,\n1,g,0.25,0.75\n");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let vals = (0..12 * 5).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let refi = ReFiMatrix::new(Matrix::from_vec(12, 5, vals), Dim::ALL.to_vec()).unwrap();
        let ep = Episode { support_normal: vec![0, 1, 2], support_anomalous: vec![3, 4, 5], queries: vec![6, 7, 8, 9] };
        let ql = [0, 1, 0, 1];
        for variant in [BlockVariant::Standard, BlockVariant::Literal] {
            let hyper = Hyper { d_model: 8, layers: 2, variant, ..Hyper::default() };
            let mut params = ModelParams::init(hyper, 3).unwrap();
            for m in params.tensors_mut() {
                for v in m.as_mut_slice() {
                    *v += 0.05 * rng.normal();
                }
            }
            let (_, grads) = loss_and_grads(&params, &refi, &ep, &ql).unwrap();
            let h = 1e-4;
            let mut worst = 0.0f64;
            for (t, g) in grads.iter().enumerate() {
                for idx in 0..g.len() {
                    let mut plus = params.clone();
                    plus.tensors_mut()[t].as_mut_slice()[idx] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut()[t].as_mut_slice()[idx] -= h;
                    let fd = (episode_loss(&plus, &refi, &ep, &ql).unwrap()
                        - episode_loss(&minus, &refi, &ep, &ql).unwrap())
                        / (2.0 * h);
                    let a = g.as_slice()[idx];
                    worst = worst.max((a - fd).abs() / a.abs().max(1.0));
                }
            }
            assert!(worst <= 1e-3, "{variant}: {worst}");
        }
    }
}
