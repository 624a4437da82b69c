//! Experiment orchestration behind the command-line tool: load data, train,
//! evaluate, and write the run directory.
//!
//! A run directory holds:
//!
//! | file              | content                                              |
//! |-------------------|------------------------------------------------------|
//! | `metrics.csv`     | one row per epoch; bytes depend only on config+seed  |
//! | `timing.csv`      | wall-clock seconds per epoch                         |
//! | `checkpoint.bin`  | final encoder parameters                             |
//! | `eval.csv`        | linear-probe and few-shot results                    |
//! | `manifest.toml`   | code version, seed, thread count and the full config |
//! | `FAILED`          | present only if the run stopped on an error          |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::ImageShape;
use crate::checkpoint::{load_checkpoint_as, save_checkpoint};
use crate::config::{emit_config, ExperimentConfig, Method};
use crate::dataset::{self, load_delimited, load_idx, save_idx, Dataset, Split, SynthSpec};
use crate::deepcluster::{embed_dataset, run_deepcluster};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::eval::{linear_probe, prototypical_eval, FewShotResult, ProbeConfig, ProbeResult};
use crate::parallel::Parallelism;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::uic::{run_uic, EpochTrace, TrainingRun};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FAILED_FILE: &str = "FAILED";
pub const COMPARE_FILE: &str = "compare.csv";

pub const METRICS_HEADER: &str =
    "epoch,mean_loss,nmi_vs_prev,nmi_vs_truth,partition_entropy,empty_class_fixes,lr";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub probe: Option<ProbeResult>,
    pub fewshot: Option<FewShotResult>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run: TrainingRun,
    pub eval: EvalReport,
}

/// Every sample of the configured source; samples of a separate test file
/// (or the synthetic test fraction) are tagged [`Split::Test`].
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(spec) = &cfg.data.synthetic {
        return dataset::synth_clusters(spec, cfg.seed);
    }
    if let Some(src) = &cfg.data.idx {
        let labels = src.labels.as_ref().map(|p| cfg.resolve(p));
        let train = load_idx(&cfg.resolve(&src.images), labels.as_deref())?;
        return match &src.test_images {
            None => Ok(train),
            Some(test) => {
                let labels = src.test_labels.as_ref().map(|p| cfg.resolve(p));
                train.with_test_set(load_idx(&cfg.resolve(test), labels.as_deref())?)
            }
        };
    }
    if let Some(src) = &cfg.data.text {
        let shape = ImageShape::new(src.channels, src.height, src.width);
        let train = load_delimited(&cfg.resolve(&src.path), shape, src.has_label)?;
        return match &src.test_path {
            None => Ok(train),
            Some(test) => {
                train.with_test_set(load_delimited(&cfg.resolve(test), shape, src.has_label)?)
            }
        };
    }
    Err(Error::Config("no dataset source configured".into()))
}

fn rows_of(features: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = features.row_len();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(features.row(i));
    }
    Tensor::from_vec(&[indices.len(), d], data)
}

/// Linear probe on frozen embeddings: fit on the `Train` samples, score on
/// the `Test` samples. `None` without ground truth or a test split.
pub fn probe_encoder(
    dataset: &Dataset,
    encoder: &EncoderState,
    cfg: &ProbeConfig,
    par: &Parallelism,
) -> Result<Option<ProbeResult>> {
    let Some(truth) = dataset.truth() else {
        return Ok(None);
    };
    let train = dataset.indices_of(Split::Train);
    let test = dataset.indices_of(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Ok(None);
    }
    let features = embed_dataset(dataset, encoder, par)?;
    let labels = |ix: &[usize]| ix.iter().map(|&i| truth[i]).collect::<Vec<_>>();
    linear_probe(
        &rows_of(&features, &train)?,
        &labels(&train),
        &rows_of(&features, &test)?,
        &labels(&test),
        cfg,
    )
    .map(Some)
}

/// Probe and few-shot evaluation as configured; parts that the data cannot
/// support (no labels, no test split, too few samples per class) are
/// skipped with a warning.
pub fn evaluate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &EncoderState,
    par: &Parallelism,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    if cfg.eval.probe {
        report.probe = probe_encoder(dataset, encoder, &cfg.probe_config(), par)?;
        if report.probe.is_none() {
            log::warn!("linear probe skipped: needs labels and both train and test samples");
        }
    }
    if cfg.eval.fewshot {
        report.fewshot = fewshot(cfg, dataset, encoder, par)?;
    }
    Ok(report)
}

fn fewshot(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    encoder: &EncoderState,
    par: &Parallelism,
) -> Result<Option<FewShotResult>> {
    let e = &cfg.eval;
    let Some(truth) = dataset.truth() else {
        log::warn!("few-shot evaluation skipped: no labels");
        return Ok(None);
    };
    let pool = dataset.indices_of(Split::Test);
    if pool.is_empty() {
        log::warn!("few-shot evaluation skipped: no test split");
        return Ok(None);
    }
    let labels: Vec<usize> = pool.iter().map(|&i| truth[i]).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let need = e.k_shot + e.n_query;
    let present = counts.iter().filter(|&&c| c > 0).count();
    let smallest = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    if present < e.n_way || smallest < need {
        log::warn!(
            "few-shot evaluation skipped: {present} test classes, smallest with {smallest} samples; \
             {}-way {}-shot with {} queries needs {} classes of {need}",
            e.n_way,
            e.k_shot,
            e.n_query,
            e.n_way
        );
        return Ok(None);
    }
    let features = rows_of(&embed_dataset(dataset, encoder, par)?, &pool)?;
    prototypical_eval(
        &features,
        &labels,
        e.n_way,
        e.k_shot,
        e.n_query,
        e.episodes,
        &Rng::new(cfg.seed),
    )
    .map(Some)
}

/// Floats use the shortest representation that reads back exactly.
pub fn metrics_csv(trace: &[EpochTrace]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for t in trace {
        let truth = t.nmi_vs_truth.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.epoch,
            t.mean_loss,
            t.nmi_vs_prev,
            truth,
            t.partition_entropy,
            t.empty_class_fixes,
            t.lr
        )
        .expect("write to String");
    }
    out
}

fn timing_csv(trace: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,wall_seconds\n");
    for t in trace {
        writeln!(out, "{},{}", t.epoch, t.wall_seconds).expect("write to String");
    }
    out
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    if let Some(p) = &report.probe {
        writeln!(out, "probe_accuracy,{}", p.accuracy).expect("write to String");
        writeln!(out, "probe_final_train_loss,{}", p.final_train_loss).expect("write to String");
    }
    if let Some(f) = &report.fewshot {
        writeln!(out, "fewshot_mean_accuracy,{}", f.mean_accuracy).expect("write to String");
        writeln!(out, "fewshot_stderr,{}", f.stderr).expect("write to String");
        writeln!(out, "fewshot_episodes,{}", f.episodes).expect("write to String");
    }
    out
}

fn manifest(cfg: &ExperimentConfig, par: &Parallelism) -> Result<String> {
    let mut doc = toml::Table::new();
    doc.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
    doc.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
    doc.insert("method".into(), cfg.method.to_string().into());
    doc.insert("threads".into(), toml::Value::Integer(par.threads() as i64));
    let config: toml::Table = emit_config(cfg)?
        .parse()
        .map_err(|e: toml::de::Error| Error::Internal(e.to_string()))?;
    doc.insert("config".into(), toml::Value::Table(config));
    toml::to_string(&doc).map_err(|e| Error::Internal(e.to_string()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(FAILED_FILE);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(marker, e))?;
    }
    Ok(())
}

/// Leave a `FAILED` marker next to whatever the run managed to write.
fn mark_failed<T>(dir: &Path, result: Result<T>) -> Result<T> {
    if let Err(e) = &result {
        let _ = fs::write(dir.join(FAILED_FILE), format!("{e}\n"));
    }
    result
}

fn train(cfg: &ExperimentConfig, dataset: &Dataset, par: &Parallelism) -> Result<TrainingRun> {
    let train_set = match dataset.indices_of(Split::Train) {
        ix if ix.len() == dataset.len() => dataset.clone(),
        ix => dataset.subset(&ix)?,
    };
    let encoder = EncoderState::init(cfg.encoder_config(dataset.image_shape()))?;
    log::info!(
        "training {} on {} samples ({} parameters)",
        cfg.method,
        train_set.len(),
        encoder.params().num_scalars()
    );
    match cfg.method {
        Method::Uic => run_uic(&train_set, encoder, &cfg.uic_config(), par),
        Method::Deepcluster => run_deepcluster(&train_set, encoder, &cfg.deepcluster_config(), par),
    }
}

/// Train with `cfg.method` on the `Train` samples, evaluate, and write the
/// run directory `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, par: &Parallelism) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_dir(out)?;
    write(out, MANIFEST_FILE, manifest(cfg, par)?)?;
    mark_failed(
        out,
        (|| {
            let dataset = load_dataset(cfg)?;
            let run = train(cfg, &dataset, par)?;
            write(out, METRICS_FILE, metrics_csv(&run.trace))?;
            write(out, TIMING_FILE, timing_csv(&run.trace))?;
            save_checkpoint(&run.encoder, run.trace.len(), &out.join(CHECKPOINT_FILE))?;
            let eval = evaluate(cfg, &dataset, &run.encoder, par)?;
            write(out, EVAL_FILE, eval_csv(&eval))?;
            Ok(RunSummary { run, eval })
        })(),
    )
}

/// Evaluate a saved checkpoint without training; writes `eval.csv` to `out`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    par: &Parallelism,
) -> Result<EvalReport> {
    cfg.validate()?;
    prepare_dir(out)?;
    mark_failed(
        out,
        (|| {
            let dataset = load_dataset(cfg)?;
            let encoder =
                load_checkpoint_as(checkpoint, &cfg.encoder_config(dataset.image_shape()))?;
            let eval = evaluate(cfg, &dataset, &encoder, par)?;
            write(out, EVAL_FILE, eval_csv(&eval))?;
            Ok(eval)
        })(),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Run both methods on the same config and seed (into `out/uic` and
/// `out/deepcluster`) and write a side-by-side `compare.csv`.
pub fn run_compare(cfg: &ExperimentConfig, out: &Path, par: &Parallelism) -> Result<PathBuf> {
    let mut summaries = Vec::new();
    for method in [Method::Uic, Method::Deepcluster] {
        let cfg = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        summaries.push(run_experiment(&cfg, &out.join(method.to_string()), par)?);
    }
    let (u, d) = (&summaries[0], &summaries[1]);
    let mut csv = String::from(
        "epoch,uic_mean_loss,deepcluster_mean_loss,uic_nmi_vs_prev,deepcluster_nmi_vs_prev,\
         uic_nmi_vs_truth,deepcluster_nmi_vs_truth,uic_partition_entropy,deepcluster_partition_entropy\n",
    );
    for (a, b) in u.run.trace.iter().zip(&d.run.trace) {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            a.epoch,
            a.mean_loss,
            b.mean_loss,
            a.nmi_vs_prev,
            b.nmi_vs_prev,
            opt(a.nmi_vs_truth),
            opt(b.nmi_vs_truth),
            a.partition_entropy,
            b.partition_entropy
        )
        .expect("write to String");
    }
    write(out, COMPARE_FILE, &csv)?;
    let mut summary = String::from("metric,uic,deepcluster\n");
    let rows = [
        (
            "final_nmi_vs_truth",
            u.run.final_trace().nmi_vs_truth,
            d.run.final_trace().nmi_vs_truth,
        ),
        (
            "probe_accuracy",
            u.eval.probe.map(|p| p.accuracy),
            d.eval.probe.map(|p| p.accuracy),
        ),
        (
            "fewshot_mean_accuracy",
            u.eval.fewshot.map(|f| f.mean_accuracy),
            d.eval.fewshot.map(|f| f.mean_accuracy),
        ),
        (
            "mean_epoch_seconds",
            Some(u.run.mean_epoch_seconds()),
            Some(d.run.mean_epoch_seconds()),
        ),
    ];
    for (name, a, b) in rows {
        writeln!(summary, "{name},{},{}", opt(a), opt(b)).expect("write to String");
    }
    write(out, "compare_summary.csv", summary)?;
    Ok(out.join(COMPARE_FILE))
}

/// Write the synthetic benchmark as IDX files (pixels quantized to bytes):
/// `train-images.idx`, `train-labels.idx`, `test-images.idx`,
/// `test-labels.idx`.
pub fn gen_data(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = dataset::synth_clusters(spec, seed)?;
    let mut written = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        if data.indices_of(split).is_empty() {
            continue;
        }
        let part = data.split(split)?;
        let images = out.join(format!("{name}-images.idx"));
        let labels = out.join(format!("{name}-labels.idx"));
        save_idx(&part, &images, Some(&labels))?;
        written.extend([images, labels]);
    }
    Ok(written)
}
