//! Subcommand implementations and the `run.json` provenance record.
//!
//! Each command writes its artifacts and then a sidecar record next to the
//! main output: `<out>.run.json` for file outputs, `<dir>/run.json` for
//! `synth`. The record holds the resolved configuration, its hash and the
//! SHA-256 of every input and output file. No timestamps are recorded, so
//! rerunning a recorded configuration reproduces the record bitwise.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use refi_core::checkpoint::{self, CheckpointHeader};
use refi_core::encoder::{infer, InferenceOptions, ModelParams, Support};
use refi_core::fingerprint::{active_dims, build_refi_with, Dim, FingerprintOptions, ReFiMatrix};
use refi_core::graph::{encode_rfgf, load_bundle, write_bundle, GraphBundle, Manifest};
use refi_core::metrics::{evaluate_target, Evaluation, MeanStd};
use refi_core::synth::{generate_with_truth, Injected, SynthSpec};
use refi_core::trainer::{save_history, train, Source};

use crate::ablate;
use crate::config::{ConfigArgs, PartialConfig, RunConfig};
use crate::{CliError, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { spec, family, n, seed, out } => synth(spec.as_deref(), family, n, seed, &out),
        Command::Fingerprint { manifest, out, drop, allow_multi_drop, normalize_similarity, binary } => {
            let run = FingerprintRun { drop, allow_multi_drop, normalize_similarity, binary };
            fingerprint(&manifest, &out, &run)
        }
        Command::Train { sources, out, history, cfg } => train_cmd(&sources, &out, history.as_deref(), &cfg),
        Command::Eval { ckpt, target, out, cfg } => eval(&ckpt, &target, &out, &cfg),
        Command::Score { ckpt, target, support, out, cfg } => score(&ckpt, &target, &support, &out, &cfg, false),
        Command::ExportEmbeddings { ckpt, target, support, out, cfg } => {
            score(&ckpt, &target, &support, &out, &cfg, true)
        }
        Command::Ablate { sources, target, out, variants, cfg } => ablate_cmd(&sources, &target, &out, &variants, &cfg),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

/// `<out>.<suffix>`, keeping the full original file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn write_with(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    create_parent(path)?;
    let context = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| CliError::io(context(), e))?;
    let mut w = BufWriter::new(file);
    fill(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(context(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(value).expect("report serializes");
    json.push(b'\n');
    write_file(path, &json)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// The manifest plus every file it references.
fn manifest_files(manifest: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(manifest).map_err(|e| CliError::io(format!("reading {}", manifest.display()), e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid manifest: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut files = vec![manifest.to_path_buf(), base.join(&m.edges), base.join(&m.features)];
    files.extend(m.labels.iter().chain(&m.id_map).map(|p| base.join(p)));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

struct Record<'a> {
    command: &'a str,
    config: serde_json::Value,
    config_hash: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
}

impl<'a> Record<'a> {
    fn new<T: Serialize>(command: &'a str, config: &T) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: hash_json(config),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    fn manifest(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.extend(manifest_files(path)?);
        Ok(())
    }

    fn write(self, path: &Path) -> Result<(), CliError> {
        let record = RunRecord {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            config_hash: self.config_hash,
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
            outputs: self.outputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
            summary: self.summary,
        };
        write_json(path, &record)?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn labels_of<'g>(g: &'g GraphBundle, path: &Path) -> Result<&'g [u8], CliError> {
    g.labels().ok_or_else(|| CliError::Usage(format!("{}: graph {} has no labels", path.display(), g.name())))
}

fn synth(spec_path: Option<&Path>, family: Option<FamilyArg>, n: Option<usize>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut spec = match spec_path {
        Some(path) => {
            if family.is_some() {
                return Err(CliError::Usage("--spec and --family are mutually exclusive".into()));
            }
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::Usage(format!("invalid synth spec {}: {e}", path.display())))?
        }
        None => {
            let (n, seed) = (n.unwrap_or(2000), seed.unwrap_or(42));
            match family.unwrap_or(FamilyArg::A) {
                FamilyArg::A => SynthSpec::family_a(n, seed),
                FamilyArg::B => SynthSpec::family_b(n, seed),
            }
        }
    };
    if spec_path.is_some() {
        // Explicit flags still win over the spec file.
        if let Some(n) = n {
            spec.n = n;
        }
        if let Some(seed) = seed {
            spec.seed = seed;
        }
    }
    let (g, truth) = generate_with_truth(&spec)?;
    let manifest = write_bundle(&g, out)?;
    let truth_path = out.join("truth.json");
    write_json(&truth_path, &Truth { spec: spec.clone(), injected: truth })?;
    info!("generated {} with {} nodes and {} edges", g.name(), g.n(), g.edge_count());

    let mut record = Record::new("synth", &spec);
    record.inputs.extend(spec_path.map(Path::to_path_buf));
    record.outputs = manifest_files(&manifest)?;
    record.outputs.push(truth_path);
    record.write(&out.join("run.json"))
}

#[derive(Debug, Serialize)]
struct Truth {
    spec: SynthSpec,
    injected: Injected,
}

#[derive(Debug, Clone, Serialize)]
struct FingerprintRun {
    drop: Vec<Dim>,
    allow_multi_drop: bool,
    normalize_similarity: bool,
    binary: bool,
}

fn fingerprint(manifest: &Path, out: &Path, run: &FingerprintRun) -> Result<(), CliError> {
    let g = load_bundle(manifest)?;
    let opts = FingerprintOptions { normalize_similarity: run.normalize_similarity, allow_multi_drop: run.allow_multi_drop };
    let refi = build_refi_with(&g, &run.drop, opts)?;
    if run.binary {
        write_file(out, &encode_rfgf(refi.values()))?;
    } else {
        write_with(out, |w| refi.write_csv(w))?;
    }
    info!("wrote {} x {} fingerprint to {}", refi.n(), refi.width(), out.display());

    let mut record = Record::new("fingerprint", run);
    record.manifest(manifest)?;
    record.outputs.push(out.to_path_buf());
    record.write(&sibling(out, "run.json"))
}

struct LoadedSource {
    name: String,
    refi: ReFiMatrix,
    labels: Vec<u8>,
}

fn load_sources(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<LoadedSource>, CliError> {
    paths
        .iter()
        .map(|path| {
            let g = load_bundle(path)?;
            let labels = labels_of(&g, path)?.to_vec();
            let refi = build_refi_with(&g, &cfg.drop, cfg.fingerprint_options())?;
            info!("loaded source {} ({} nodes, {} anomalies)", g.name(), g.n(), labels.iter().filter(|&&l| l != 0).count());
            Ok(LoadedSource { name: g.name().to_string(), refi, labels })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    epochs_run: usize,
    episodes: usize,
    best_epoch: Option<usize>,
    best_val_auroc: Option<f64>,
    final_loss: Option<f64>,
    skipped: Vec<(String, String)>,
    parameter_checksum: String,
}

fn train_cmd(sources: &[PathBuf], out: &Path, history: Option<&Path>, args: &ConfigArgs) -> Result<(), CliError> {
    let (_, cfg) = args.resolve()?;
    let loaded = load_sources(sources, &cfg)?;
    let views: Vec<Source<'_>> =
        loaded.iter().map(|s| Source { name: &s.name, refi: &s.refi, labels: &s.labels }).collect();
    let outcome = train(&views, cfg.hyper()?, &cfg.train()?, |row| {
        debug!("episode {} on {}: loss {:.6}", row.episode, row.graph, row.loss);
    })?;
    for (name, reason) in &outcome.skipped {
        warn!("source {name} skipped: {reason}");
    }

    let hash = cfg.hash();
    create_parent(out)?;
    checkpoint::save(&outcome.params, out, Some(&hash))?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "history.csv"));
    create_parent(&history_path)?;
    save_history(&outcome.history, &history_path)?;
    info!("saved checkpoint {} after {} epochs", out.display(), outcome.epochs_run);

    let mut record = Record::new("train", &cfg);
    for path in sources {
        record.manifest(path)?;
    }
    record.outputs = vec![out.to_path_buf(), history_path];
    record.summary = serde_json::to_value(TrainSummary {
        epochs_run: outcome.epochs_run,
        episodes: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_auroc: outcome.best_val_auroc,
        final_loss: outcome.history.last().map(|r| r.loss),
        skipped: outcome.skipped.clone(),
        parameter_checksum: outcome.params.checksum(),
    })
    .expect("summary serializes");
    record.write(&sibling(out, "run.json"))
}

/// Rejects explicitly requested model settings that disagree with the
/// checkpoint header.
pub fn check_against_header(explicit: &PartialConfig, header: &CheckpointHeader) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let mut check = |what: &str, requested: Option<String>, stored: String| {
        if let Some(requested) = requested {
            if requested != stored {
                problems.push(format!("{what}: config requests {requested}, checkpoint has {stored}"));
            }
        }
    };
    check("d_model", explicit.d_model.map(|v| v.to_string()), header.d_prime.to_string());
    check("layers", explicit.layers.map(|v| v.to_string()), header.layers.to_string());
    check("heads", explicit.heads.map(|v| v.to_string()), header.heads.to_string());
    check("variant", explicit.variant.map(|v| v.to_string()), header.variant.to_string());
    check("snr_gate", explicit.snr_gate.map(|v| v.to_string()), header.snr_gate.to_string());
    let dims = |d: &[Dim]| d.iter().map(|d| d.name()).collect::<Vec<_>>().join(",");
    let requested_dims = match &explicit.drop {
        Some(drop) => Some(dims(&active_dims(drop, true)?)),
        None => None,
    };
    check("fingerprint dims", requested_dims, dims(&header.dims_active));
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("checkpoint mismatch: {}", problems.join("; "))))
    }
}

struct Model {
    params: ModelParams,
    header: CheckpointHeader,
    cfg: RunConfig,
}

fn load_model(ckpt: &Path, args: &ConfigArgs) -> Result<Model, CliError> {
    let (explicit, mut cfg) = args.resolve()?;
    let (params, header) = checkpoint::load(ckpt)?;
    check_against_header(&explicit, &header)?;
    cfg.d_model = header.d_prime;
    cfg.layers = header.layers;
    cfg.heads = header.heads;
    cfg.variant = header.variant;
    cfg.snr_gate = header.snr_gate;
    cfg.drop = Dim::ALL.iter().copied().filter(|d| !header.dims_active.contains(d)).collect();
    cfg.allow_multi_drop |= cfg.drop.len() > 1;
    Ok(Model { params, header, cfg })
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    fold_seed: u64,
    auroc: f64,
    auprc: f64,
    support: Support,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    target: String,
    nodes: usize,
    anomalies: usize,
    config: RunConfig,
    config_hash: String,
    checkpoint_config_hash: Option<String>,
    checkpoint_checksum: String,
    k_requested: usize,
    k_used: usize,
    warnings: Vec<String>,
    folds: Vec<FoldSummary>,
    auroc: MeanStd,
    auprc: MeanStd,
    /// File name of the per-node scores, next to the report.
    scores_csv: String,
}

fn write_fold_scores(path: &Path, eval: &Evaluation) -> Result<(), CliError> {
    write_with(path, |w| {
        writeln!(w, "fold,node,label,score")?;
        for f in &eval.folds {
            for ((node, label), score) in f.nodes.iter().zip(&f.labels).zip(&f.scores) {
                writeln!(w, "{},{node},{label},{score}", f.fold)?;
            }
        }
        Ok(())
    })
}

fn eval(ckpt: &Path, target: &Path, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let model = load_model(ckpt, args)?;
    let cfg = &model.cfg;
    let g = load_bundle(target)?;
    let labels = labels_of(&g, target)?;
    let refi = build_refi_with(&g, &cfg.drop, cfg.fingerprint_options())?;
    let evaluation = evaluate_target(&model.params, &refi, labels, &cfg.eval())?;
    for w in &evaluation.warnings {
        warn!("{w}");
    }
    info!("{}: AUROC {:.4} +/- {:.4}", g.name(), evaluation.auroc.mean, evaluation.auroc.std);

    let scores_path = sibling(out, "scores.csv");
    write_fold_scores(&scores_path, &evaluation)?;
    let report = EvalReport {
        target: g.name().to_string(),
        nodes: g.n(),
        anomalies: labels.iter().filter(|&&l| l != 0).count(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        checkpoint_config_hash: model.header.config_hash.clone(),
        checkpoint_checksum: model.header.checksum.clone(),
        k_requested: evaluation.k_requested,
        k_used: evaluation.k_used,
        warnings: evaluation.warnings.clone(),
        folds: evaluation
            .folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.fold,
                fold_seed: f.fold_seed,
                auroc: f.auroc,
                auprc: f.auprc,
                support: f.support.clone(),
            })
            .collect(),
        auroc: evaluation.auroc,
        auprc: evaluation.auprc,
        scores_csv: scores_path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    write_json(out, &report)?;

    let mut record = Record::new("eval", cfg);
    record.inputs.push(ckpt.to_path_buf());
    record.manifest(target)?;
    record.outputs = vec![out.to_path_buf(), scores_path];
    record.write(&sibling(out, "run.json"))
}

/// Reads a `node,label` CSV into a support set with equal class counts.
pub fn read_support(path: &Path, n: usize) -> Result<Support, CliError> {
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["node", "label"] {
        return Err(bad(format!("expected header node,label, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut support = Support { normal: Vec::new(), anomalous: Vec::new() };
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let node: usize = row[0].parse().map_err(|_| bad(format!("line {line}: invalid node {:?}", &row[0])))?;
        if node >= n {
            return Err(bad(format!("line {line}: node {node} out of range [0, {n})")));
        }
        if !seen.insert(node) {
            return Err(bad(format!("line {line}: node {node} listed twice")));
        }
        match &row[1] {
            "0" => support.normal.push(node),
            "1" => support.anomalous.push(node),
            other => return Err(bad(format!("line {line}: label must be 0 or 1, got {other:?}"))),
        }
    }
    if support.normal.is_empty() || support.normal.len() != support.anomalous.len() {
        return Err(bad(format!(
            "need the same positive number of normal and anomalous supports, got {} and {}",
            support.normal.len(),
            support.anomalous.len()
        )));
    }
    Ok(support)
}

fn score(ckpt: &Path, target: &Path, support_path: &Path, out: &Path, args: &ConfigArgs, embeddings: bool) -> Result<(), CliError> {
    let model = load_model(ckpt, args)?;
    let cfg = &model.cfg;
    let g = load_bundle(target)?;
    let support = read_support(support_path, g.n())?;
    let refi = build_refi_with(&g, &cfg.drop, cfg.fingerprint_options())?;
    let queries: Vec<usize> = (0..g.n()).filter(|&i| !support.contains(i)).collect();
    let opts = InferenceOptions { batch_size: cfg.batch_size, full_context: cfg.full_context, keep_embeddings: embeddings };
    let result = infer(&model.params, &refi, &support, &queries, opts)?;

    if embeddings {
        let d = model.params.hyper.d_model;
        write_with(out, |w| {
            let cols: Vec<String> = (0..d).map(|j| format!("h{j}")).collect();
            writeln!(w, "node,role,{}", cols.join(","))?;
            let mut emit = |node: usize, role: &str, row: &[f64]| {
                let vals: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(w, "{node},{role},{}", vals.join(","))
            };
            if let Some(h) = &result.support_embeddings {
                let roles = support.normal.iter().map(|&i| (i, "support_normal"));
                let roles = roles.chain(support.anomalous.iter().map(|&i| (i, "support_anomalous")));
                for (r, (node, role)) in roles.enumerate() {
                    emit(node, role, h.row(r))?;
                }
            }
            if let Some(h) = &result.embeddings {
                for (r, &node) in result.nodes.iter().enumerate() {
                    emit(node, "query", h.row(r))?;
                }
            }
            Ok(())
        })?;
    } else {
        write_with(out, |w| {
            writeln!(w, "node,score")?;
            for (node, s) in result.nodes.iter().zip(&result.scores) {
                writeln!(w, "{node},{s}")?;
            }
            Ok(())
        })?;
    }
    info!("scored {} nodes of {} into {}", result.nodes.len(), g.name(), out.display());

    let mut record = Record::new(if embeddings { "export-embeddings" } else { "score" }, cfg);
    record.inputs.push(ckpt.to_path_buf());
    record.manifest(target)?;
    record.inputs.push(support_path.to_path_buf());
    record.outputs.push(out.to_path_buf());
    record.write(&sibling(out, "run.json"))
}

fn ablate_cmd(sources: &[PathBuf], target: &Path, out: &Path, variants: &[String], args: &ConfigArgs) -> Result<(), CliError> {
    let (_, cfg) = args.resolve()?;
    let variants = ablate::parse_variants(variants)?;
    let opts = cfg.fingerprint_options();
    let load = |path: &Path| -> Result<ablate::Graph, CliError> {
        let g = load_bundle(path)?;
        let labels = labels_of(&g, path)?.to_vec();
        Ok(ablate::Graph::new(&g, labels, opts))
    };
    let source_graphs: Vec<ablate::Graph> = sources.iter().map(|p| load(p)).collect::<Result<_, _>>()?;
    let target_graph = load(target)?;
    let table = ablate::run(&source_graphs, &target_graph, &cfg, &variants)?;

    let csv_path = out.with_extension("csv");
    write_json(out, &table)?;
    write_with(&csv_path, |w| table.write_csv(w))?;

    let mut record = Record::new("ablate", &cfg);
    for path in sources.iter().map(PathBuf::as_path).chain([target]) {
        record.manifest(path)?;
    }
    record.outputs = vec![out.to_path_buf(), csv_path];
    record.write(&sibling(out, "run.json"))
}
