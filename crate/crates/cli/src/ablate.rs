//! Ablation table: the full model, the model without the SNR gate, and one
//! variant per dropped fingerprint dimension, each trained from scratch and
//! evaluated on the same target.
//!
//! Replacing the fingerprint with raw features (`wo-r`) needs a feature
//! alignment pipeline this crate does not ship. It is listed in the report
//! as not applicable.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use serde::{Serialize, Serializer};

use refi_core::fingerprint::{raw_attributes, refi_from_raw, Dim, FingerprintOptions, RawAttributes};
use refi_core::graph::GraphBundle;
use refi_core::metrics::{evaluate_target, MeanStd};
use refi_core::trainer::{train, Source};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutGate,
    Drop(Dim),
    WithoutReFi,
}

pub const NOT_APPLICABLE_REASON: &str =
    "raw-feature replacement of the fingerprint requires a feature alignment pipeline that is not provided; see README";

impl Variant {
    /// The seven rows of the table, in order.
    pub fn table() -> Vec<Variant> {
        let mut v = vec![Variant::Full, Variant::WithoutGate];
        v.extend(Dim::ALL.iter().map(|&d| Variant::Drop(d)));
        v
    }

    pub fn dims(self) -> Vec<Dim> {
        match self {
            Variant::Drop(dropped) => Dim::ALL.iter().copied().filter(|&d| d != dropped).collect(),
            _ => Dim::ALL.to_vec(),
        }
    }

    pub fn snr_gate(self) -> bool {
        self != Variant::WithoutGate
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::WithoutGate => f.write_str("wo-d"),
            Variant::Drop(d) => write!(f, "drop-{}", d.name()),
            Variant::WithoutReFi => f.write_str("wo-r"),
        }
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "full" => Ok(Variant::Full),
            "wo-d" | "w/o-d" => Ok(Variant::WithoutGate),
            "wo-r" | "w/o-r" => Ok(Variant::WithoutReFi),
            other => other
                .strip_prefix("drop-")
                .and_then(|d| d.parse::<Dim>().ok())
                .map(Variant::Drop)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "unknown ablation variant {other:?} (expected full, wo-d, wo-r or drop-np/nd/gd/deg/lc)"
                    ))
                }),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Parses variant names; an empty list selects the full table.
pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>, CliError> {
    if names.is_empty() {
        return Ok(Variant::table());
    }
    let mut out: Vec<Variant> = Vec::new();
    for name in names {
        let v: Variant = name.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// A labeled graph with its unranked attributes computed once.
pub struct Graph {
    pub name: String,
    pub raw: RawAttributes,
    pub labels: Vec<u8>,
}

impl Graph {
    pub fn new(g: &GraphBundle, labels: Vec<u8>, opts: FingerprintOptions) -> Self {
        Self { name: g.name().to_string(), raw: raw_attributes(g, opts), labels }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub variant: Variant,
    pub dims: Vec<Dim>,
    pub snr_gate: bool,
    pub auroc: MeanStd,
    pub auprc: MeanStd,
    pub k_used: usize,
    pub epochs_run: usize,
    pub parameter_checksum: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct NotApplicable {
    pub variant: Variant,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub target: String,
    pub sources: Vec<String>,
    pub config: RunConfig,
    pub config_hash: String,
    pub rows: Vec<Row>,
    pub not_applicable: Vec<NotApplicable>,
}

impl Table {
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "variant,dims,snr_gate,auroc_mean,auroc_std,auprc_mean,auprc_std")?;
        for r in &self.rows {
            let dims: Vec<&str> = r.dims.iter().map(|d| d.name()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variant,
                dims.join(" "),
                r.snr_gate,
                r.auroc.mean,
                r.auroc.std,
                r.auprc.mean,
                r.auprc.std
            )?;
        }
        Ok(())
    }
}

/// Trains and evaluates each variant. `cfg.drop` must be empty since the
/// variants choose their own dimensions.
pub fn run(sources: &[Graph], target: &Graph, cfg: &RunConfig, variants: &[Variant]) -> Result<Table, CliError> {
    if !cfg.drop.is_empty() {
        return Err(CliError::Usage("ablate selects fingerprint dimensions per variant; do not pass --drop".into()));
    }
    let mut rows = Vec::new();
    let mut not_applicable = Vec::new();
    for &variant in variants {
        if variant == Variant::WithoutReFi {
            not_applicable.push(NotApplicable { variant, reason: NOT_APPLICABLE_REASON });
            continue;
        }
        let dims = variant.dims();
        let mut hyper = cfg.hyper()?;
        hyper.dims = dims.clone();
        hyper.snr_gate = variant.snr_gate();

        let refis: Vec<_> = sources.iter().map(|s| refi_from_raw(&s.raw, &dims)).collect();
        let views: Vec<Source<'_>> = sources
            .iter()
            .zip(&refis)
            .map(|(s, refi)| Source { name: &s.name, refi, labels: &s.labels })
            .collect();
        let outcome = train(&views, hyper, &cfg.train()?, |_| {})?;
        let target_refi = refi_from_raw(&target.raw, &dims);
        let eval = evaluate_target(&outcome.params, &target_refi, &target.labels, &cfg.eval())?;
        info!("ablation {variant}: AUROC {:.4} +/- {:.4}", eval.auroc.mean, eval.auroc.std);
        rows.push(Row {
            variant,
            dims,
            snr_gate: variant.snr_gate(),
            auroc: eval.auroc,
            auprc: eval.auprc,
            k_used: eval.k_used,
            epochs_run: outcome.epochs_run,
            parameter_checksum: outcome.params.checksum(),
        });
    }
    if !variants.contains(&Variant::WithoutReFi) {
        not_applicable.push(NotApplicable { variant: Variant::WithoutReFi, reason: NOT_APPLICABLE_REASON });
    }
    Ok(Table {
        target: target.name.clone(),
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        rows,
        not_applicable,
    })
}
