//! Fingerprint-grounded few-shot detector.
//!
//! One forward pass handles one episode: `k` normal supports, `k` anomalous
//! supports and `n_b` queries drawn from the same graph.
//!
//! 1. **Projector**: `H⁰ = ReLU(P W + b)` maps fingerprint rows to `d′`.
//! 2. **Context transformer**: the sequence `[S_n; S_a; Q]` passes through
//!    `L` attention + FFN blocks. Supports attend to all supports; a query
//!    attends to all supports and to itself only (see [`build_mask`]).
//! 3. **SNR gate**: per-dimension signal-to-noise between the anomalous
//!    centre and the normal background (`S_n ∪ Q`) yields weights
//!    `m = σ(λ·s + β)`; `H = (H¹ ⊙ m) W′ᵀ`.
//! 4. **Scoring**: each query gets softmax weights over the supports from
//!    `τ`-scaled cosine similarities; the score is
//!    `½(Σ_{S_a} α − Σ_{S_n} α + 1) ∈ [0, 1]`.
//!
//! The attention never materializes the full `(2k+n_b)²` masked score
//! matrix: since a query only sees supports and itself, the logits are the
//! `(2k+n_b) x 2k` support block plus one self column. This is exactly the
//! masked softmax over [`build_mask`] with the `-inf` entries removed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fingerprint::{Dim, ReFiMatrix};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

pub const DEFAULT_SNR_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

/// Transformer block form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    /// Pre-layer-norm blocks with residuals around attention and FFN.
    #[default]
    Standard,
    /// `Z ← FFN(softmax(QKᵀ/√d′ + M) V)`, no residuals or normalization.
    Literal,
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockVariant::Standard => "standard",
            BlockVariant::Literal => "literal",
        })
    }
}

impl FromStr for BlockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(BlockVariant::Standard),
            "literal" => Ok(BlockVariant::Literal),
            _ => Err(Error::Invalid(format!("unknown block variant {s:?} (expected standard or literal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Active fingerprint dimensions, which fixes the projector input width.
    pub dims: Vec<Dim>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: BlockVariant,
    /// When false the SNR gate is bypassed (`m = 1`).
    pub snr_gate: bool,
    pub snr_eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            dims: Dim::ALL.to_vec(),
            d_model: 64,
            layers: 4,
            heads: 1,
            variant: BlockVariant::Standard,
            snr_gate: true,
            snr_eps: DEFAULT_SNR_EPS,
        }
    }
}

impl Hyper {
    pub fn input_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Invalid("at least one fingerprint dimension is required".into()));
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Invalid("d_model, layers and heads must all be at least 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model)));
        }
        if !(self.snr_eps > 0.0) {
            return Err(Error::Invalid("snr_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorms<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    /// Present for [`BlockVariant::Standard`] only.
    pub norms: Option<LayerNorms<T>>,
}

/// Every learnable tensor of the model, generic over storage so the same
/// layout holds matrices, tape handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub proj_w: T,
    pub proj_b: T,
    pub layers: Vec<Layer<T>>,
    pub lambda: T,
    pub beta: T,
    pub w_out: T,
    pub tau: T,
}

impl<T> Weights<T> {
    /// Visits tensors in canonical order with their checkpoint names.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        f("proj_w", &self.proj_w);
        f("proj_b", &self.proj_b);
        for (l, layer) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("layers.{l}.{s}");
            f(&name("w_q"), &layer.w_q);
            f(&name("w_k"), &layer.w_k);
            f(&name("w_v"), &layer.w_v);
            f(&name("ffn_w1"), &layer.ffn_w1);
            f(&name("ffn_b1"), &layer.ffn_b1);
            f(&name("ffn_w2"), &layer.ffn_w2);
            f(&name("ffn_b2"), &layer.ffn_b2);
            if let Some(n) = &layer.norms {
                f(&name("ln1_gamma"), &n.ln1_gamma);
                f(&name("ln1_beta"), &n.ln1_beta);
                f(&name("ln2_gamma"), &n.ln2_gamma);
                f(&name("ln2_beta"), &n.ln2_beta);
            }
        }
        f("lambda", &self.lambda);
        f("beta", &self.beta);
        f("w_out", &self.w_out);
        f("tau", &self.tau);
    }

    /// Same canonical order as [`Weights::for_each`].
    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&'a mut T)) {
        f(&mut self.proj_w);
        f(&mut self.proj_b);
        for layer in &mut self.layers {
            f(&mut layer.w_q);
            f(&mut layer.w_k);
            f(&mut layer.w_v);
            f(&mut layer.ffn_w1);
            f(&mut layer.ffn_b1);
            f(&mut layer.ffn_w2);
            f(&mut layer.ffn_b2);
            if let Some(n) = &mut layer.norms {
                f(&mut n.ln1_gamma);
                f(&mut n.ln1_beta);
                f(&mut n.ln2_gamma);
                f(&mut n.ln2_beta);
            }
        }
        f(&mut self.lambda);
        f(&mut self.beta);
        f(&mut self.w_out);
        f(&mut self.tau);
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Weights<U>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let proj_w = f(&self.proj_w)?;
        let proj_b = f(&self.proj_b)?;
        for layer in &self.layers {
            layers.push(Layer {
                w_q: f(&layer.w_q)?,
                w_k: f(&layer.w_k)?,
                w_v: f(&layer.w_v)?,
                ffn_w1: f(&layer.ffn_w1)?,
                ffn_b1: f(&layer.ffn_b1)?,
                ffn_w2: f(&layer.ffn_w2)?,
                ffn_b2: f(&layer.ffn_b2)?,
                norms: match &layer.norms {
                    Some(n) => Some(LayerNorms {
                        ln1_gamma: f(&n.ln1_gamma)?,
                        ln1_beta: f(&n.ln1_beta)?,
                        ln2_gamma: f(&n.ln2_gamma)?,
                        ln2_beta: f(&n.ln2_beta)?,
                    }),
                    None => None,
                },
            });
        }
        Ok(Weights {
            proj_w,
            proj_b,
            layers,
            lambda: f(&self.lambda)?,
            beta: f(&self.beta)?,
            w_out: f(&self.w_out)?,
            tau: f(&self.tau)?,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|name, _| out.push(name.to_string()));
        out
    }
}

/// Trained (or freshly initialized) model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub weights: Weights<Matrix>,
}

fn xavier(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect())
}

impl ModelParams {
    /// Fan-balanced uniform weights, zero biases, unit layer-norm scale,
    /// `λ = 1`, `β = 0`, `τ = 1`.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = SplitMix64::keyed(seed, &[0x1417]);
        let d = hyper.d_model;
        let f = d * FFN_MULT;
        let proj_w = xavier(hyper.input_dim(), d, &mut rng);
        let layers = (0..hyper.layers)
            .map(|_| Layer {
                w_q: xavier(d, d, &mut rng),
                w_k: xavier(d, d, &mut rng),
                w_v: xavier(d, d, &mut rng),
                ffn_w1: xavier(d, f, &mut rng),
                ffn_b1: Matrix::zeros(1, f),
                ffn_w2: xavier(f, d, &mut rng),
                ffn_b2: Matrix::zeros(1, d),
                norms: (hyper.variant == BlockVariant::Standard).then(|| LayerNorms {
                    ln1_gamma: Matrix::filled(1, d, 1.0),
                    ln1_beta: Matrix::zeros(1, d),
                    ln2_gamma: Matrix::filled(1, d, 1.0),
                    ln2_beta: Matrix::zeros(1, d),
                }),
            })
            .collect();
        let w_out = xavier(d, d, &mut rng);
        Ok(Self {
            weights: Weights {
                proj_w,
                proj_b: Matrix::zeros(1, d),
                layers,
                lambda: Matrix::scalar(1.0),
                beta: Matrix::scalar(0.0),
                w_out,
                tau: Matrix::scalar(1.0),
            },
            hyper,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.weights.for_each(|name, m| out.push((name.to_string(), m)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.weights.for_each_mut(|m| out.push(m));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tau(&self) -> f64 {
        self.weights.tau.item()
    }
}

/// Support and query node indices for one task on one graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support_normal: Vec<usize>,
    pub support_anomalous: Vec<usize>,
    pub queries: Vec<usize>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support_normal.len()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    /// Sequence length `2k + n_b`.
    pub fn len(&self) -> usize {
        2 * self.k() + self.n_queries()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node indices in sequence order `S_n, S_a, Q`.
    pub fn sequence(&self) -> Vec<usize> {
        self.support_normal.iter().chain(&self.support_anomalous).chain(&self.queries).copied().collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.support_normal.is_empty() || self.support_normal.len() != self.support_anomalous.len() {
            return Err(Error::Episode(format!(
                "support sets must be non-empty and equal in size, got {} normal and {} anomalous",
                self.support_normal.len(),
                self.support_anomalous.len()
            )));
        }
        if self.queries.is_empty() {
            return Err(Error::Episode("query set is empty".into()));
        }
        let mut seen = vec![false; n];
        for id in self.sequence() {
            if id >= n {
                return Err(Error::NodeOutOfRange { id, n });
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Episode(format!("node {id} appears more than once")));
            }
        }
        Ok(())
    }
}

/// The attention mask over `2k + n_b` positions: `0` where position `j` is a
/// support or `i == j`, `-inf` elsewhere.
pub fn build_mask(k: usize, n_b: usize) -> Matrix {
    let t = 2 * k + n_b;
    let mut m = Matrix::filled(t, t, f64::NEG_INFINITY);
    for i in 0..t {
        for j in 0..t {
            if j < 2 * k || i == j {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

/// Where the normal-background statistics of the SNR gate come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Background {
    /// `S_n` rows plus the episode's query rows.
    #[default]
    Episode,
    /// Precomputed centre and population variance (`1 x d′` each).
    Fixed { mean: Matrix, var: Matrix },
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h1: Var,
    pub gate: Option<Var>,
    pub h: Var,
    pub scores: Var,
}

pub fn load_weights(tape: &mut Tape, weights: &Weights<Matrix>, track: bool) -> Result<Weights<Var>> {
    weights.try_map(|m| tape.leaf(m.clone(), track))
}

/// `ReLU(P W + b)` on the tape.
pub fn project_on_tape(tape: &mut Tape, w: &Weights<Var>, p: Var) -> Result<Var> {
    let (_, width) = tape.shape(p);
    let expected = tape.shape(w.proj_w).0;
    if width != expected {
        return Err(Error::shape("project", format!("fingerprint width {width}, projector expects {expected}")));
    }
    let z = tape.linear(p, w.proj_w, w.proj_b)?;
    tape.relu(z)
}

fn attention(tape: &mut Tape, layer: &Layer<Var>, z: Var, k2: usize, heads: usize) -> Result<Var> {
    let (t, d) = tape.shape(z);
    let q = tape.matmul(z, layer.w_q)?;
    let kk = tape.matmul(z, layer.w_k)?;
    let v = tape.matmul(z, layer.w_v)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Support rows must not count their own position twice.
    let mut self_mask = Matrix::zeros(t, k2 + 1);
    for i in 0..k2.min(t) {
        self_mask.set(i, k2, f64::NEG_INFINITY);
    }

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, kk, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(kk, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let ks = tape.slice_rows(kh, 0, k2)?;
        let vs = tape.slice_rows(vh, 0, k2)?;
        let support_logits = tape.matmul_nt(qh, ks)?;
        let self_logits = tape.row_dot(qh, kh)?;
        let logits = tape.concat_cols(&[support_logits, self_logits])?;
        let logits = tape.scalar_mul(logits, scale)?;
        let attn = tape.softmax_rows(logits, Some(&self_mask))?;
        let attn_support = tape.slice_cols(attn, 0, k2)?;
        let attn_self = tape.slice_cols(attn, k2, k2 + 1)?;
        let from_support = tape.matmul(attn_support, vs)?;
        let self_weight = tape.broadcast(attn_self, t, dh)?;
        let from_self = tape.hadamard(self_weight, vh)?;
        outs.push(tape.add(from_support, from_self)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn ffn(tape: &mut Tape, layer: &Layer<Var>, x: Var) -> Result<Var> {
    let h = tape.linear(x, layer.ffn_w1, layer.ffn_b1)?;
    let h = tape.relu(h)?;
    tape.linear(h, layer.ffn_w2, layer.ffn_b2)
}

fn affine_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let rows = tape.shape(x).0;
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let g = tape.broadcast_row(gamma, rows)?;
    let b = tape.broadcast_row(beta, rows)?;
    let scaled = tape.hadamard(n, g)?;
    tape.add(scaled, b)
}

/// Context transformer over an already projected sequence `Z⁰`.
pub fn transformer_on_tape(tape: &mut Tape, w: &Weights<Var>, hyper: &Hyper, z0: Var, k: usize) -> Result<Var> {
    let mut z = z0;
    for layer in &w.layers {
        z = match (&hyper.variant, &layer.norms) {
            (BlockVariant::Standard, Some(n)) => {
                let a = affine_norm(tape, z, n.ln1_gamma, n.ln1_beta)?;
                let a = attention(tape, layer, a, 2 * k, hyper.heads)?;
                let z1 = tape.add(z, a)?;
                let b = affine_norm(tape, z1, n.ln2_gamma, n.ln2_beta)?;
                let b = ffn(tape, layer, b)?;
                tape.add(z1, b)?
            }
            (BlockVariant::Literal, None) => {
                let a = attention(tape, layer, z, 2 * k, hyper.heads)?;
                ffn(tape, layer, a)?
            }
            _ => return Err(Error::Invalid("layer parameters do not match the block variant".into())),
        };
    }
    Ok(z)
}

/// Projector + transformer: the `H¹` rows for an episode, in sequence order.
pub fn encode_on_tape(
    tape: &mut Tape,
    w: &Weights<Var>,
    hyper: &Hyper,
    refi: &ReFiMatrix,
    episode: &Episode,
) -> Result<Var> {
    episode.validate(refi.n())?;
    check_dims(hyper, refi)?;
    let p = tape.constant(refi.values().select_rows(&episode.sequence()))?;
    let h0 = project_on_tape(tape, w, p)?;
    transformer_on_tape(tape, w, hyper, h0, episode.k())
}

fn check_dims(hyper: &Hyper, refi: &ReFiMatrix) -> Result<()> {
    if hyper.dims != refi.dims() {
        return Err(Error::Invalid(format!(
            "model expects fingerprint dims {:?}, got {:?}",
            hyper.dims,
            refi.dims()
        )));
    }
    Ok(())
}

/// SNR gate weights `m = σ(λ s + β)` (`1 x d′`).
pub fn snr_gate_on_tape(
    tape: &mut Tape,
    w: &Weights<Var>,
    h1: Var,
    k: usize,
    eps: f64,
    background: &Background,
) -> Result<Var> {
    let (t, d) = tape.shape(h1);
    let anomalous = tape.slice_rows(h1, k, 2 * k)?;
    let h_a = tape.mean_rows(anomalous)?;
    let (h_n, var_n) = match background {
        Background::Episode => {
            let sn = tape.slice_rows(h1, 0, k)?;
            let q = tape.slice_rows(h1, 2 * k, t)?;
            let normal = tape.concat_rows(&[sn, q])?;
            (tape.mean_rows(normal)?, tape.var_rows(normal)?)
        }
        Background::Fixed { mean, var } => {
            if mean.shape() != (1, d) || var.shape() != (1, d) {
                return Err(Error::shape("snr_gate", "background statistics must be 1 x d′"));
            }
            (tape.constant(mean.clone())?, tape.constant(var.clone())?)
        }
    };
    let diff = tape.sub(h_a, h_n)?;
    let signal = tape.hadamard(diff, diff)?;
    let noise = tape.add_scalar(var_n, eps)?;
    let s = tape.div(signal, noise)?;
    let scaled = tape.mul_scalar_var(s, w.lambda)?;
    let shift = tape.broadcast(w.beta, 1, d)?;
    let logits = tape.add(scaled, shift)?;
    tape.sigmoid(logits)
}

/// `H = (H¹ ⊙ m) W′ᵀ`; with the gate disabled `m = 1`.
pub fn refine_on_tape(
    tape: &mut Tape,
    w: &Weights<Var>,
    hyper: &Hyper,
    h1: Var,
    k: usize,
    background: &Background,
) -> Result<(Var, Option<Var>)> {
    if !hyper.snr_gate {
        return Ok((tape.matmul_nt(h1, w.w_out)?, None));
    }
    let m = snr_gate_on_tape(tape, w, h1, k, hyper.snr_eps, background)?;
    let rows = tape.shape(h1).0;
    let mb = tape.broadcast_row(m, rows)?;
    let gated = tape.hadamard(h1, mb)?;
    Ok((tape.matmul_nt(gated, w.w_out)?, Some(m)))
}

/// Query scores (`n_b x 1`) from final representations in sequence order.
pub fn score_on_tape(tape: &mut Tape, tau: Var, h: Var, k: usize) -> Result<Var> {
    let t = tape.shape(h).0;
    if t <= 2 * k {
        return Err(Error::shape("score", format!("{t} rows leaves no queries after 2k = {}", 2 * k)));
    }
    let unit = tape.normalize_rows(h)?;
    let supports = tape.slice_rows(unit, 0, 2 * k)?;
    let queries = tape.slice_rows(unit, 2 * k, t)?;
    let sims = tape.matmul_nt(queries, supports)?;
    let logits = tape.mul_scalar_var(sims, tau)?;
    let alpha = tape.softmax_rows(logits, None)?;

    let indicator = |lo: usize| {
        let mut m = Matrix::zeros(2 * k, 1);
        for i in lo..lo + k {
            m.set(i, 0, 1.0);
        }
        m
    };
    let pick_n = tape.constant(indicator(0))?;
    let pick_a = tape.constant(indicator(k))?;
    let mass_n = tape.matmul(alpha, pick_n)?;
    let mass_a = tape.matmul(alpha, pick_a)?;
    let diff = tape.sub(mass_a, mass_n)?;
    let half = tape.scalar_mul(diff, 0.5)?;
    let y = tape.add_scalar(half, 0.5)?;
    tape.clamp(y, 0.0, 1.0)
}

/// Full episode forward pass.
pub fn forward(
    tape: &mut Tape,
    w: &Weights<Var>,
    hyper: &Hyper,
    refi: &ReFiMatrix,
    episode: &Episode,
    background: &Background,
) -> Result<Forward> {
    let h1 = encode_on_tape(tape, w, hyper, refi, episode)?;
    let (h, gate) = refine_on_tape(tape, w, hyper, h1, episode.k(), background)?;
    let scores = score_on_tape(tape, w.tau, h, episode.k())?;
    Ok(Forward { h1, gate, h, scores })
}

// ---- value-level entry points -------------------------------------------

/// `H⁰` for arbitrary fingerprint rows.
pub fn project(p_rows: &Matrix, params: &ModelParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let w = load_weights(&mut tape, &params.weights, false)?;
    let p = tape.constant(p_rows.clone())?;
    let h0 = project_on_tape(&mut tape, &w, p)?;
    Ok(tape.value(h0).clone())
}

/// `H¹` rows for an episode, in sequence order.
pub fn encode(episode: &Episode, refi: &ReFiMatrix, params: &ModelParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let w = load_weights(&mut tape, &params.weights, false)?;
    let h1 = encode_on_tape(&mut tape, &w, &params.hyper, refi, episode)?;
    Ok(tape.value(h1).clone())
}

/// `H` from `H¹` (rows ordered `S_n, S_a, Q`) using the episode background.
pub fn snr_refine(h1: &Matrix, k: usize, params: &ModelParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let w = load_weights(&mut tape, &params.weights, false)?;
    let h1v = tape.constant(h1.clone())?;
    let (h, _) = refine_on_tape(&mut tape, &w, &params.hyper, h1v, k, &Background::Episode)?;
    Ok(tape.value(h).clone())
}

/// Query scores from final representations (rows ordered `S_n, S_a, Q`).
pub fn score(h: &Matrix, k: usize, tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let tau = tape.constant(Matrix::scalar(tau))?;
    let hv = tape.constant(h.clone())?;
    let y = score_on_tape(&mut tape, tau, hv, k)?;
    Ok(tape.value(y).as_slice().to_vec())
}

/// Labeled support nodes on a target graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Support {
    pub fn k(&self) -> usize {
        self.normal.len()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.normal.contains(&node) || self.anomalous.contains(&node)
    }

    pub fn episode(&self, queries: Vec<usize>) -> Episode {
        Episode { support_normal: self.normal.clone(), support_anomalous: self.anomalous.clone(), queries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    pub batch_size: usize,
    /// Gate statistics from all queried nodes instead of the current batch.
    pub full_context: bool,
    pub keep_embeddings: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { batch_size: 512, full_context: false, keep_embeddings: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub nodes: Vec<usize>,
    pub scores: Vec<f64>,
    /// Final `H` rows of the queried nodes, when requested.
    pub embeddings: Option<Matrix>,
    /// Final `H` rows of the supports (normal then anomalous) from the first
    /// batch, when requested.
    pub support_embeddings: Option<Matrix>,
}

/// Scores `queries` against a fixed support set without touching `params`.
pub fn infer(
    params: &ModelParams,
    refi: &ReFiMatrix,
    support: &Support,
    queries: &[usize],
    opts: InferenceOptions,
) -> Result<Inference> {
    if opts.batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let batches: Vec<&[usize]> = queries.chunks(opts.batch_size).collect();
    let background = if opts.full_context && params.hyper.snr_gate {
        full_context_background(params, refi, support, &batches)?
    } else {
        Background::Episode
    };

    let d = params.hyper.d_model;
    let mut scores = Vec::with_capacity(queries.len());
    let mut embeddings = opts.keep_embeddings.then(|| Vec::with_capacity(queries.len() * d));
    let mut support_embeddings = None;
    for batch in batches {
        let episode = support.episode(batch.to_vec());
        let mut tape = Tape::new();
        let w = load_weights(&mut tape, &params.weights, false)?;
        let out = forward(&mut tape, &w, &params.hyper, refi, &episode, &background)?;
        scores.extend_from_slice(tape.value(out.scores).as_slice());
        if let Some(e) = embeddings.as_mut() {
            let h = tape.value(out.h);
            if support_embeddings.is_none() {
                support_embeddings = Some(Matrix::from_vec(2 * episode.k(), d, h.as_slice()[..2 * episode.k() * d].to_vec()));
            }
            for i in 2 * episode.k()..h.rows() {
                e.extend_from_slice(h.row(i));
            }
        }
    }
    Ok(Inference {
        nodes: queries.to_vec(),
        scores,
        embeddings: embeddings.map(|e| Matrix::from_vec(queries.len(), d, e)),
        support_embeddings,
    })
}

fn full_context_background(
    params: &ModelParams,
    refi: &ReFiMatrix,
    support: &Support,
    batches: &[&[usize]],
) -> Result<Background> {
    let k = support.k();
    let d = params.hyper.d_model;
    let mut rows: Vec<f64> = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        let h1 = encode(&support.episode(batch.to_vec()), refi, params)?;
        let start = if b == 0 { 0 } else { 2 * k };
        for i in start..h1.rows() {
            if i >= k && i < 2 * k {
                continue;
            }
            rows.extend_from_slice(h1.row(i));
        }
    }
    let m = Matrix::from_vec(rows.len() / d, d, rows);
    let mut tape = Tape::new();
    let mv = tape.constant(m)?;
    let mean = tape.mean_rows(mv)?;
    let var = tape.var_rows(mv)?;
    Ok(Background::Fixed { mean: tape.value(mean).clone(), var: tape.value(var).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_hyper(variant: BlockVariant, heads: usize) -> Hyper {
        Hyper { d_model: 8, layers: 2, heads, variant, ..Hyper::default() }
    }

    fn refi(n: usize, seed: u64) -> ReFiMatrix {
        let mut rng = SplitMix64::new(seed);
        let vals = (0..n * 5).map(|_| rng.uniform_range(0.01, 1.0)).collect();
        ReFiMatrix::new(Matrix::from_vec(n, 5, vals), Dim::ALL.to_vec()).unwrap()
    }

    fn episode() -> Episode {
        Episode { support_normal: vec![0, 1, 2], support_anomalous: vec![3, 4, 5], queries: vec![6, 7, 8, 9] }
    }

    #[test]
    fn mask_small_cases() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(build_mask(1, 1), Matrix::from_rows(&[[0.0, 0.0, ninf], [0.0, 0.0, ninf], [0.0, 0.0, 0.0]]));
        let m = build_mask(1, 2);
        assert_eq!(m.get(2, 3), ninf);
        assert_eq!(m.get(3, 2), ninf);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.get(3, 3), 0.0);
    }

    #[test]
    fn projection_examples() {
        let mut params = ModelParams::init(Hyper { d_model: 5, ..Hyper::default() }, 1).unwrap();
        params.weights.proj_w = Matrix::zeros(5, 5);
        params.weights.proj_b = Matrix::row_vector(&[1.0, -1.0, 0.5, 0.0, -2.0]);
        let p = refi(4, 3);
        let h0 = project(p.values(), &params).unwrap();
        for i in 0..4 {
            assert_eq!(h0.row(i), &[1.0, 0.0, 0.5, 0.0, 0.0]);
        }
        params.weights.proj_w = Matrix::identity(5);
        params.weights.proj_b = Matrix::zeros(1, 5);
        assert_eq!(project(p.values(), &params).unwrap(), *p.values());
        assert!(project(&Matrix::zeros(2, 4), &params).is_err());
    }

    #[test]
    fn literal_zero_weights_encode_to_zero() {
        let mut params = ModelParams::init(Hyper { layers: 1, ..tiny_hyper(BlockVariant::Literal, 1) }, 2).unwrap();
        for layer in &mut params.weights.layers {
            for m in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v, &mut layer.ffn_w1, &mut layer.ffn_w2] {
                *m = Matrix::zeros(m.rows(), m.cols());
            }
        }
        let h1 = encode(&episode(), &refi(10, 1), &params).unwrap();
        assert_eq!(h1, Matrix::zeros(10, 8));
    }

    #[test]
    fn episode_validation() {
        let p = refi(10, 1);
        let params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 0).unwrap();
        let mut ep = episode();
        ep.queries.push(2);
        assert!(matches!(encode(&ep, &p, &params), Err(Error::Episode(_))));
        let mut ep = episode();
        ep.queries.push(42);
        assert!(matches!(encode(&ep, &p, &params), Err(Error::NodeOutOfRange { id: 42, .. })));
    }

    #[test]
    fn snr_zero_signal_and_zero_lambda() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 5).unwrap();
        params.weights.beta = Matrix::scalar(0.3);
        let same = Matrix::from_vec(7, 8, (0..56).map(|i| (i % 8) as f64 - 3.0).collect());
        let h = snr_refine(&same, 2, &params).unwrap();
        let s = crate::autodiff::sigmoid(0.3);
        let want = same.map(|v| v * s).matmul_nt(&params.weights.w_out);
        assert!(h.max_abs_diff(&want) < 1e-12);

        params.weights.lambda = Matrix::scalar(0.0);
        let mut rng = SplitMix64::new(8);
        let h1 = Matrix::from_vec(7, 8, (0..56).map(|_| rng.normal()).collect());
        let h = snr_refine(&h1, 2, &params).unwrap();
        let want = h1.map(|v| v * s).matmul_nt(&params.weights.w_out);
        assert!(h.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn score_examples() {
        // Equal similarity everywhere: 0.5 exactly.
        let h = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]);
        assert_eq!(score(&h, 2, 1.7).unwrap(), vec![0.5, 0.5]);

        // k = 1, cos 0.2 to the normal support and 0.8 to the anomalous one.
        let q = [1.0f64, 0.0];
        let n = [0.2f64, (1.0 - 0.04f64).sqrt()];
        let a = [0.8f64, 0.6];
        let h = Matrix::from_rows(&[n, a, q]);
        let y = score(&h, 1, 1.0).unwrap()[0];
        let want = 0.8f64.exp() / (0.8f64.exp() + 0.2f64.exp());
        assert!((y - want).abs() < 1e-12, "{y} vs {want}");
        assert!((y - 0.64566).abs() < 1e-5);
    }

    #[test]
    fn multi_head_forward_runs() {
        let params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 2), 3).unwrap();
        let h1 = encode(&episode(), &refi(10, 2), &params).unwrap();
        assert_eq!(h1.shape(), (10, 8));
        assert!(ModelParams::init(tiny_hyper(BlockVariant::Standard, 3), 3).is_err());
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 3).unwrap();
        let before = params.checksum();
        assert_eq!(before, params.clone().checksum());
        params.weights.tau = Matrix::scalar(1.0 + 1e-15);
        assert_ne!(before, params.checksum());
    }

    #[test]
    fn tensor_order_is_stable() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 3).unwrap();
        let names = params.weights.names();
        assert_eq!(names.first().map(String::as_str), Some("proj_w"));
        assert_eq!(names.last().map(String::as_str), Some("tau"));
        let shapes: Vec<_> = params.named_tensors().iter().map(|(_, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = params.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    // ---- straight-line oracle: dense mask, plain loops, no tape ----------

    fn o_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, m, p) = (a.len(), b.len(), b[0].len());
        (0..n).map(|i| (0..p).map(|j| (0..m).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
    }

    fn o_rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    fn o_affine(x: &[Vec<f64>], w: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
        let mut y = o_matmul(x, &o_rows(w));
        for r in &mut y {
            for (v, bias) in r.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        y
    }

    fn o_layer_norm(x: &[Vec<f64>], g: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * g.get(0, j) + b.get(0, j))
                    .collect()
            })
            .collect()
    }

    fn o_attention(x: &[Vec<f64>], layer: &Layer<Matrix>, k: usize, heads: usize) -> Vec<Vec<f64>> {
        let t = x.len();
        let mask = build_mask(k, t - 2 * k);
        let q = o_matmul(x, &o_rows(&layer.w_q));
        let kk = o_matmul(x, &o_rows(&layer.w_k));
        let v = o_matmul(x, &o_rows(&layer.w_v));
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * kk[j][c]).sum();
                        dot / (dh as f64).sqrt() + mask.get(i, j)
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        out
    }

    fn o_ffn(x: &[Vec<f64>], layer: &Layer<Matrix>) -> Vec<Vec<f64>> {
        let h: Vec<Vec<f64>> = o_affine(x, &layer.ffn_w1, &layer.ffn_b1)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        o_affine(&h, &layer.ffn_w2, &layer.ffn_b2)
    }

    fn o_add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn o_encode(p: &ReFiMatrix, ep: &Episode, params: &ModelParams) -> Vec<Vec<f64>> {
        let rows: Vec<Vec<f64>> = ep.sequence().iter().map(|&i| p.values().row(i).to_vec()).collect();
        let w = &params.weights;
        let mut z: Vec<Vec<f64>> = o_affine(&rows, &w.proj_w, &w.proj_b)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        for layer in &w.layers {
            z = match &layer.norms {
                Some(n) => {
                    let a = o_attention(&o_layer_norm(&z, &n.ln1_gamma, &n.ln1_beta), layer, ep.k(), params.hyper.heads);
                    let z1 = o_add(&z, &a);
                    let f = o_ffn(&o_layer_norm(&z1, &n.ln2_gamma, &n.ln2_beta), layer);
                    o_add(&z1, &f)
                }
                None => o_ffn(&o_attention(&z, layer, ep.k(), params.hyper.heads), layer),
            };
        }
        z
    }

    fn o_refine(h1: &[Vec<f64>], k: usize, params: &ModelParams) -> Vec<Vec<f64>> {
        let d = h1[0].len();
        let normal: Vec<&Vec<f64>> = h1[..k].iter().chain(&h1[2 * k..]).collect();
        let lambda = params.weights.lambda.item();
        let beta = params.weights.beta.item();
        let m: Vec<f64> = (0..d)
            .map(|j| {
                let hn = normal.iter().map(|r| r[j]).sum::<f64>() / normal.len() as f64;
                let var = normal.iter().map(|r| (r[j] - hn).powi(2)).sum::<f64>() / normal.len() as f64;
                let ha = h1[k..2 * k].iter().map(|r| r[j]).sum::<f64>() / k as f64;
                let s = (ha - hn).powi(2) / (var + DEFAULT_SNR_EPS);
                1.0 / (1.0 + (-(lambda * s + beta)).exp())
            })
            .collect();
        let gated: Vec<Vec<f64>> = h1.iter().map(|r| r.iter().zip(&m).map(|(a, b)| a * b).collect()).collect();
        o_matmul(&gated, &o_rows(&params.weights.w_out.transpose()))
    }

    fn o_score(h: &[Vec<f64>], k: usize, tau: f64) -> Vec<f64> {
        let cos = |a: &[f64], b: &[f64]| {
            let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
            if na == 0.0 || nb == 0.0 { 0.0 } else { a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb) }
        };
        h[2 * k..]
            .iter()
            .map(|q| {
                let e: Vec<f64> = h[..2 * k].iter().map(|s| (tau * cos(q, s)).exp()).collect();
                let z: f64 = e.iter().sum();
                let a: f64 = e[k..].iter().sum::<f64>() / z;
                let n: f64 = e[..k].iter().sum::<f64>() / z;
                0.5 * (a - n + 1.0)
            })
            .collect()
    }

    fn perturbed(params: &mut ModelParams, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for m in params.tensors_mut() {
            for v in m.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
        }
    }

    fn max_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
        let mut m = 0.0f64;
        for (i, r) in b.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m = m.max((a.get(i, j) - v).abs());
            }
        }
        m
    }

    #[test]
    fn mask_zero_count() {
        for k in 1..5 {
            for nb in 1..6 {
                let m = build_mask(k, nb);
                let zeros = m.as_slice().iter().filter(|v| **v == 0.0).count();
                assert_eq!(zeros, 2 * k * (2 * k + nb) + nb);
            }
        }
    }

    #[test]
    fn projection_matches_oracle() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 9).unwrap();
        perturbed(&mut params, 1);
        let p = refi(6, 4);
        let got = project(p.values(), &params).unwrap();
        let want: Vec<Vec<f64>> = o_affine(&o_rows(p.values()), &params.weights.proj_w, &params.weights.proj_b)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        assert!(max_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let p = refi(12, 11);
        let ep = episode();
        for (variant, heads) in [(BlockVariant::Standard, 1), (BlockVariant::Literal, 1), (BlockVariant::Standard, 2)] {
            let mut params = ModelParams::init(tiny_hyper(variant, heads), 21).unwrap();
            perturbed(&mut params, 3);
            let h1 = encode(&ep, &p, &params).unwrap();
            let o1 = o_encode(&p, &ep, &params);
            assert!(max_diff(&h1, &o1) < 1e-10, "{variant} x{heads}: {}", max_diff(&h1, &o1));

            let h = snr_refine(&h1, 3, &params).unwrap();
            let oh = o_refine(&o1, 3, &params);
            assert!(max_diff(&h, &oh) < 1e-10);

            let y = score(&h, 3, params.tau()).unwrap();
            for (a, b) in y.iter().zip(o_score(&oh, 3, params.tau())) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn queries_do_not_see_each_other() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 4).unwrap();
        perturbed(&mut params, 5);
        let p = refi(12, 1);
        let base = encode(&episode(), &p, &params).unwrap();
        let mut values = p.values().clone();
        for node in [7, 8, 9] {
            for c in 0..5 {
                values.set(node, c, 1.0 - values.get(node, c) * 0.5);
            }
        }
        let changed = encode(&episode(), &ReFiMatrix::new(values, Dim::ALL.to_vec()).unwrap(), &params).unwrap();
        for c in 0..8 {
            assert!((base.get(6, c) - changed.get(6, c)).abs() <= 1e-12);
        }
        // The gate does depend on the batch through the normal background.
        let mut tape = Tape::new();
        let w = load_weights(&mut tape, &params.weights, false).unwrap();
        let a = tape.constant(base).unwrap();
        let b = tape.constant(changed).unwrap();
        let ma = snr_gate_on_tape(&mut tape, &w, a, 3, DEFAULT_SNR_EPS, &Background::Episode).unwrap();
        let mb = snr_gate_on_tape(&mut tape, &w, b, 3, DEFAULT_SNR_EPS, &Background::Episode).unwrap();
        assert!(tape.value(ma).max_abs_diff(tape.value(mb)) > 1e-9);
    }

    #[test]
    fn support_order_is_irrelevant() {
        let mut params = ModelParams::init(tiny_hyper(BlockVariant::Standard, 1), 6).unwrap();
        perturbed(&mut params, 7);
        let p = refi(12, 5);
        let run = |ep: &Episode| {
            let h1 = encode(ep, &p, &params).unwrap();
            score(&snr_refine(&h1, 3, &params).unwrap(), 3, params.tau()).unwrap()
        };
        let base = run(&episode());
        let mut ep = episode();
        ep.support_normal = vec![2, 0, 1];
        ep.support_anomalous = vec![4, 5, 3];
        for (a, b) in base.iter().zip(run(&ep)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scores_ignore_row_scale() {
        let mut rng = SplitMix64::new(12);
        let h = Matrix::from_vec(9, 4, (0..36).map(|_| rng.normal()).collect());
        let base = score(&h, 2, 1.3).unwrap();
        for row in 0..9 {
            let mut scaled = h.clone();
            for v in scaled.row_mut(row) {
                *v *= 3.7;
            }
            for (a, b) in base.iter().zip(score(&scaled, 2, 1.3).unwrap()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn temperature_limit() {
        // Query closest to an anomalous support, then to a normal one.
        let h = Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [1.0, 0.1], [-1.0, 0.1]]);
        let y = score(&h, 2, 500.0).unwrap();
        assert!(y[0] > 1.0 - 1e-6, "{y:?}");
        assert!(y[1] < 1e-6, "{y:?}");
    }
}
