use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mpe_core::catalog::{group_by_frequency, ingest as ingest_log};
use mpe_core::packfmt;
use mpe_core::search::sample_precision;
use mpe_core::synth::generate;
use mpe_core::trainer::{evaluate, evaluate_source, run_phase, EmbeddingMode, EvalMetrics, PhaseResult};
use mpe_core::{
    Checkpoint, Dataset, Error, FeatureCatalog, GroupAssignment, PackedTable, Phase, SampledPrecision, Schema, Split,
    SynthSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const CATALOG_FILE: &str = "catalog.bin";
const DATASET_FILE: &str = "dataset.bin";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const PRECISION_FILE: &str = "precision.tsv";
const RESULT_FILE: &str = "result.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_catalog(data_dir: &Path) -> Result<FeatureCatalog> {
    Ok(FeatureCatalog::read_from(&mut open(&data_dir.join(CATALOG_FILE))?)?)
}

fn load_data(data_dir: &Path) -> Result<(FeatureCatalog, Dataset)> {
    let catalog = load_catalog(data_dir)?;
    let (data, hash) = Dataset::read_from(&mut open(&data_dir.join(DATASET_FILE))?)?;
    catalog.hash().ensure_eq(&hash)?;
    Ok((catalog, data))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::read_from(&mut open(path)?)?)
}

fn load_precision(path: &Path, groups: &GroupAssignment) -> Result<SampledPrecision> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SampledPrecision::from_tsv(&text, groups).with_context(|| format!("parsing {}", path.display()))
}

fn write_precision(dir: &Path, sampled: &SampledPrecision, groups: &GroupAssignment, dim: usize) -> Result<()> {
    fs::write(dir.join(PRECISION_FILE), sampled.to_tsv())?;
    write_json(&dir.join("precision.json"), &sampled.summary(groups, dim))
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SynthSpec = toml::from_str(&text)?;
    let data = generate(&spec)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("data.tsv"))?;
    data.write_tsv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("weights.tsv"))?;
    data.write_weights(&mut w)?;
    w.flush()?;
    fs::write(out.join("spec.toml"), toml::to_string(&spec)?)?;
    println!(
        "{}",
        serde_json::json!({ "rows": data.len(), "positive_rate": data.positive_rate() })
    );
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    features: usize,
    fields: Vec<String>,
    rows: usize,
    train: usize,
    valid: usize,
    test: usize,
    dim: usize,
    seed: u64,
    catalog_hash: String,
}

pub fn ingest(input: &Path, out: &Path, seed: u64, dim: usize, fields: Option<Vec<String>>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let schema = match fields {
        Some(names) => Schema::new(names)?,
        None => {
            let first = text.lines().find(|l| !l.is_empty()).ok_or(Error::EmptyInput)?;
            Schema::anonymous(first.split('\t').count().saturating_sub(1))?
        }
    };
    let (catalog, data) = ingest_log(text.as_bytes(), &schema, seed, dim)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join(CATALOG_FILE))?;
    catalog.write_to(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join(DATASET_FILE))?;
    data.write_to(&mut w, &catalog.hash())?;
    w.flush()?;
    let count = |s| data.splits().iter().filter(|&&x| x == s).count();
    let summary = IngestSummary {
        features: catalog.len(),
        fields: catalog.field_names().to_vec(),
        rows: data.len(),
        train: count(Split::Train),
        valid: count(Split::Valid),
        test: count(Split::Test),
        dim,
        seed,
        catalog_hash: catalog.hash().to_hex(),
    };
    write_json(&out.join("ingest.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Contents of `result.json` in every phase directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub lambda: f64,
    pub seed: u64,
    pub valid: EvalMetrics,
    pub test: EvalMetrics,
    /// 32 for full-precision phases.
    pub avg_bits: f64,
    /// Payload bytes over fp32 bytes; 1 for full-precision phases.
    pub ratio: f64,
    pub catalog_hash: String,
}

pub fn train(config: &Path, phase: Option<Phase>, prior: Option<PathBuf>, precision: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?.with_phase(phase);
    let summary = train_with(&cfg, prior, precision)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn train_with(cfg: &RunConfig, prior: Option<PathBuf>, precision: Option<PathBuf>) -> Result<PhaseSummary> {
    let phase = cfg.train.phase;
    let (catalog, data) = load_data(&cfg.data_dir)?;
    let search_dir = cfg.out_dir.join(Phase::Search.as_str());
    let needs_prior = matches!(phase, Phase::Retrain | Phase::RetrainLth | Phase::NoRetrainEval);

    let prior_path = prior.or_else(|| needs_prior.then(|| search_dir.join(CHECKPOINT_FILE)));
    let prior = match prior_path {
        Some(p) if !p.exists() => {
            return Err(Error::MissingPrerequisite(format!("{phase} needs {}", p.display())).into());
        }
        Some(p) => Some(load_checkpoint(&p)?),
        None => None,
    };
    let precision_path = precision.or_else(|| {
        let default = search_dir.join(PRECISION_FILE);
        (needs_prior && default.exists()).then_some(default)
    });
    let sampled = match (&precision_path, &prior) {
        (Some(path), Some(p)) => Some(load_precision(path, &group_by_frequency(&catalog, p.group_size)?)?),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!("{phase} does not take a precision file")).into());
        }
        _ => None,
    };

    let result = run_phase(&cfg.train, &data, &catalog, prior.as_ref(), sampled)?;
    let dir = cfg.phase_dir();
    fs::create_dir_all(&dir)?;
    write_phase(&dir, cfg, &catalog, &result)
}

fn write_phase(dir: &Path, cfg: &RunConfig, catalog: &FeatureCatalog, result: &PhaseResult) -> Result<PhaseSummary> {
    cfg.write_resolved(dir)?;
    let mut w = create(&dir.join(CHECKPOINT_FILE))?;
    result.checkpoint.write_to(&mut w)?;
    w.flush()?;

    let mut w = create(&dir.join("metrics.jsonl"))?;
    for m in &result.metrics {
        writeln!(w, "{}", serde_json::to_string(m)?)?;
    }
    w.flush()?;

    let (avg_bits, ratio) = match &result.sampled {
        Some(s) => {
            let groups = group_by_frequency(catalog, result.checkpoint.group_size)?;
            write_precision(dir, s, &groups, catalog.dim())?;
            (s.avg_bits, s.storage_ratio(&groups, catalog.dim()))
        }
        None => (32.0, 1.0),
    };
    let summary = PhaseSummary {
        phase: result.checkpoint.phase,
        lambda: cfg.train.lambda,
        seed: cfg.train.seed,
        valid: result.valid,
        test: result.test,
        avg_bits,
        ratio,
        catalog_hash: catalog.hash().to_hex(),
    };
    write_json(&dir.join(RESULT_FILE), &summary)?;
    Ok(summary)
}

pub fn sample(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let catalog = load_catalog(data_dir)?;
    catalog.hash().ensure_eq(&ckpt.catalog_hash)?;
    let state = match (ckpt.phase, ckpt.model.precision.as_ref()) {
        (Phase::Search, Some(state)) => state,
        (phase, _) => {
            return Err(Error::MissingPrerequisite(format!("sampling needs a search checkpoint, got {phase}")).into());
        }
    };
    let groups = group_by_frequency(&catalog, ckpt.group_size)?;
    let sampled = sample_precision(state, &ckpt.candidates, &groups)?;
    fs::create_dir_all(out)?;
    write_precision(out, &sampled, &groups, catalog.dim())?;
    println!("{}", serde_json::to_string(&sampled.summary(&groups, catalog.dim()))?);
    Ok(())
}

pub fn pack(checkpoint: &Path, data_dir: &Path, precision: Option<&Path>, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let catalog = load_catalog(data_dir)?;
    catalog.hash().ensure_eq(&ckpt.catalog_hash)?;
    let groups = group_by_frequency(&catalog, ckpt.group_size)?;
    let sampled = match (precision, &ckpt.sampled) {
        (Some(path), _) => load_precision(path, &groups)?,
        (None, Some(bits)) => SampledPrecision::from_bits(&groups, bits.clone())?,
        (None, None) => {
            return Err(Error::MissingPrerequisite(format!(
                "{} checkpoint has no sampled widths; pass --precision",
                ckpt.phase
            ))
            .into());
        }
    };
    let model = &ckpt.model;
    let table = packfmt::pack(&model.embeddings, model.dim, &sampled, &model.quant, &groups)?
        .with_catalog_hash(catalog.hash())
        .with_candidates(ckpt.candidates.bits());
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = create(out)?;
    table.write_to(&mut w)?;
    w.flush()?;
    // The scoring layers travel with the table so a packed file can be
    // evaluated on its own.
    let mut w = create(&mlp_path(out))?;
    ckpt.write_to(&mut w)?;
    w.flush()?;
    let report = table.report();
    write_json(&out.with_extension("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Checkpoint copied next to a packed file.
fn mlp_path(packed: &Path) -> PathBuf {
    packed.with_extension("ckpt")
}

#[derive(Serialize)]
struct EvalOutput {
    source: &'static str,
    split: Split,
    auc: f64,
    logloss: f64,
}

pub fn eval(packed: Option<&Path>, checkpoint: Option<&Path>, data_dir: &Path, split: &str) -> Result<()> {
    let split: Split = split.parse()?;
    let (catalog, data) = load_data(data_dir)?;
    let samples = data.split(split);
    let (source, metrics) = match (packed, checkpoint) {
        (Some(path), _) => {
            let table = PackedTable::read_from(&mut open(path)?)?;
            table.verify_catalog(&catalog.hash())?;
            let ckpt_path = mlp_path(path);
            if !ckpt_path.exists() {
                return Err(Error::MissingPrerequisite(format!("{} not found", ckpt_path.display())).into());
            }
            let ckpt = load_checkpoint(&ckpt_path)?;
            ("packed", evaluate_source(&table, &ckpt.model.mlp, &samples)?)
        }
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            catalog.hash().ensure_eq(&ckpt.catalog_hash)?;
            ("checkpoint", eval_checkpoint(&ckpt, &catalog, &samples)?)
        }
        (None, None) => return Err(Error::InvalidArgument("pass --packed or --checkpoint".into()).into()),
    };
    let out = EvalOutput {
        source,
        split,
        auc: metrics.auc,
        logloss: metrics.logloss,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn eval_checkpoint(ckpt: &Checkpoint, catalog: &FeatureCatalog, samples: &mpe_core::Samples) -> Result<EvalMetrics> {
    let groups = group_by_frequency(catalog, ckpt.group_size)?;
    let metrics = match (ckpt.phase, &ckpt.sampled) {
        (Phase::Baseline, _) => evaluate(&ckpt.model, samples, &EmbeddingMode::FullPrecision)?,
        (Phase::Search, _) => {
            let mode = EmbeddingMode::Mixture {
                groups: &groups,
                cands: &ckpt.candidates,
                lambda: 0.0,
            };
            evaluate(&ckpt.model, samples, &mode)?
        }
        (_, Some(bits)) => {
            let sampled = SampledPrecision::from_bits(&groups, bits.clone())?;
            let mode = EmbeddingMode::Quantized {
                groups: &groups,
                sampled: &sampled,
            };
            evaluate(&ckpt.model, samples, &mode)?
        }
        (phase, None) => return Err(Error::Format(format!("{phase} checkpoint lacks sampled widths")).into()),
    };
    Ok(metrics)
}

pub fn report(run_dir: Option<PathBuf>, config: Option<&Path>, lambdas: &[f64]) -> Result<()> {
    let cfg = config.map(RunConfig::load).transpose()?;
    let run_dir = match (run_dir, &cfg) {
        (Some(d), _) => d,
        (None, Some(c)) => c.out_dir.clone(),
        (None, None) => return Err(Error::InvalidArgument("pass --run-dir or --config".into()).into()),
    };
    if let Some(base) = &cfg {
        for &lambda in lambdas {
            let mut point = base.clone();
            point.out_dir = run_dir.join("sweep").join(format!("lambda_{lambda:e}"));
            point.train.lambda = lambda;
            for phase in [Phase::Search, Phase::Retrain] {
                point.train.phase = phase;
                train_with(&point, None, None)?;
            }
        }
    }

    let mut rows = Vec::new();
    collect_results(&run_dir, &run_dir, &mut rows)?;
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut table = String::from("run\tphase\tlambda\tseed\tvalid_auc\ttest_auc\ttest_logloss\tavg_bits\tratio\n");
    for (run, s) in &rows {
        table.push_str(&format!(
            "{run}\t{}\t{:e}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\n",
            s.phase, s.lambda, s.seed, s.valid.auc, s.test.auc, s.test.logloss, s.avg_bits, s.ratio
        ));
    }
    fs::write(run_dir.join("report.tsv"), &table)?;

    let mut curve: Vec<&PhaseSummary> = rows.iter().map(|(_, s)| s).filter(|s| s.phase == Phase::Retrain).collect();
    curve.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let mut text = String::from("lambda\tavg_bits\tratio\ttest_auc\ttest_logloss\n");
    for s in curve {
        text.push_str(&format!(
            "{:e}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\n",
            s.lambda, s.avg_bits, s.ratio, s.test.auc, s.test.logloss
        ));
    }
    fs::write(run_dir.join("curve.tsv"), text)?;
    print!("{table}");
    Ok(())
}

fn collect_results(root: &Path, dir: &Path, rows: &mut Vec<(String, PhaseSummary)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_results(root, &path, rows)?;
        } else if path.file_name().is_some_and(|n| n == RESULT_FILE) {
            let summary: PhaseSummary = serde_json::from_reader(open(&path)?)?;
            let run = path
                .parent()
                .and_then(|p| p.strip_prefix(root).ok())
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            rows.push((run, summary));
        }
    }
    Ok(())
}

pub fn dump(packed: &Path) -> Result<()> {
    let table = PackedTable::read_from(&mut open(packed)?)?;
    print!("{}", table.dump());
    Ok(())
}
