//! Implementations of the `far` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use far_core::data::{self, BenchmarkConfig, DomainSpec, LabeledSet, Split};
use far_core::diagnostics::{
    activation_map, divergence_profile, mean_std, run_variant_on, stage_maps, variant_setup, variant_trainer,
    DivergenceReport, Stage, VariantId,
};
use far_core::network::FarModel;
use far_core::trainer::{Checkpoint, MetricRow};
use far_core::Tensor;

use crate::config::Config;
use crate::{fmt_float, CliError, Result};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// File name of one domain split inside a data directory.
pub fn dataset_file(domain: usize, split: Split) -> String {
    format!("domain{domain}_{}.fard", split_name(split))
}

/// Hash of everything that determines a generated split except the seed.
pub fn spec_hash(bench: &BenchmarkConfig, spec: &DomainSpec) -> String {
    let mut h = Sha256::new();
    let mut text = format!(
        "domain={} classes={} h={} w={}",
        spec.domain_id, bench.n_classes, bench.height, bench.width
    );
    for v in spec.style_shift.iter().chain(&spec.style_scale) {
        write!(text, " {:08x}", v.to_bits()).expect("string write");
    }
    write!(text, " rho={:08x} noise={:08x}", spec.rho.to_bits(), spec.noise_std.to_bits()).expect("string write");
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub domain: usize,
    pub split: String,
    pub path: String,
    pub samples: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub files: Vec<ManifestFile>,
}

/// Writes one FARD file per domain and split, plus `manifest.json`.
pub fn dataset_gen(cfg: &Config, out: &Path) -> Result<DatasetManifest> {
    create_dir(out)?;
    let bench = &cfg.experiment.benchmark;
    let mut files = Vec::new();
    for spec in &bench.domains {
        for split in [Split::Train, Split::Test] {
            let set = bench.generate_split(spec, split)?;
            let bytes = data::encode(&set)?;
            let name = dataset_file(spec.domain_id, split);
            write_file(&out.join(&name), &bytes)?;
            files.push(ManifestFile {
                domain: spec.domain_id,
                split: split_name(split).into(),
                path: name,
                samples: set.len(),
                seed: bench.split_seed(spec.domain_id, split),
                spec_hash: spec_hash(bench, spec),
                sha256: format!("{:x}", Sha256::digest(&bytes)),
            });
        }
    }
    let manifest = DatasetManifest {
        seed: bench.seed,
        n_classes: bench.n_classes,
        height: bench.height,
        width: bench.width,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// One-paragraph summary of a FARD file.
pub fn dataset_inspect(path: &Path) -> Result<String> {
    let set = data::load(path)?;
    let shape = set.image_shape();
    let mut counts = vec![0usize; set.n_classes];
    for &y in &set.labels {
        counts[y] += 1;
    }
    let mut s = format!(
        "{}: domain {} | {} images of {}x{}x{} | {} classes | labels: {}\n",
        path.display(),
        set.domain_id,
        set.len(),
        shape[0],
        shape[1],
        shape[2],
        set.n_classes,
        if set.has_labels() { "yes" } else { "no" }
    );
    if set.has_labels() {
        writeln!(s, "class counts: {counts:?}").expect("string write");
    }
    Ok(s)
}

/// Train and test sets of every configured domain, read from `data.dir`.
pub fn load_domains(cfg: &Config) -> Result<(Vec<LabeledSet>, Vec<LabeledSet>)> {
    let bench = &cfg.experiment.benchmark;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in 0..bench.domains.len() {
        for (split, dst) in [(Split::Train, &mut train), (Split::Test, &mut test)] {
            let path = cfg.data_dir.join(dataset_file(d, split));
            let set = data::load(&path)?;
            let want = [3, bench.height, bench.width];
            if set.image_shape() != want || set.n_classes != bench.n_classes || set.domain_id != d {
                return Err(CliError::Config(format!(
                    "{}: holds domain {} with {:?} images and {} classes; config expects domain {d}, {want:?}, {} classes",
                    path.display(),
                    set.domain_id,
                    set.image_shape(),
                    set.n_classes,
                    bench.n_classes
                )));
            }
            dst.push(set);
        }
    }
    Ok((train, test))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.farc";
pub const CONFIG_FILE: &str = "config.txt";

pub fn metrics_header(n_domains: usize) -> String {
    let mut h = String::from("epoch,step,lr,l_cls,l_align,l_dre_plus,l_dre_minus,l_consist");
    for d in 0..n_domains {
        write!(h, ",acc_d{d}").expect("string write");
    }
    h
}

/// One CSV line; the step column is empty on epoch rows and accuracy
/// columns are empty when the row was not evaluated.
pub fn metrics_line(row: &MetricRow, n_domains: usize) -> String {
    let l = &row.losses;
    let mut s = format!(
        "{},{},{},{},{},{},{},{}",
        row.epoch,
        row.step.map(|v| v.to_string()).unwrap_or_default(),
        fmt_float(row.lr),
        fmt_float(l.cls),
        fmt_float(l.align),
        fmt_float(l.dre_plus),
        fmt_float(l.dre_minus),
        fmt_float(l.consist)
    );
    for d in 0..n_domains {
        s.push(',');
        if let Some(a) = row.accuracy.get(d) {
            s.push_str(&fmt_float(*a));
        }
    }
    s
}

/// Outcome of `train`; `None` on a dry run.
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_row: MetricRow,
}

/// Trains the configured variant into `out`: `metrics.csv`,
/// `checkpoint.farc` (rewritten after every epoch) and `config.txt`.
///
/// With `resume`, training continues from that checkpoint and the rows of
/// already finished epochs in an existing `metrics.csv` are kept.
/// `stop_after` ends this invocation after that many epochs; the schedule
/// still spans the configured epoch count.
pub fn train(
    cfg: &Config,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    dry_run: bool,
) -> Result<Option<TrainSummary>> {
    if dry_run {
        print!("{}", cfg.to_text());
        return Ok(None);
    }
    let (train_sets, test_sets) = load_domains(cfg)?;
    let n = test_sets.len();
    let (mut trainer, data) = variant_trainer(cfg.variant, &cfg.experiment, &train_sets, &test_sets)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_text())?;

    let metrics_path = out.join(METRICS_FILE);
    let mut lines = vec![metrics_header(n)];
    if let Some(ckpt_path) = resume {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let done = ckpt.progress.epochs_done;
        trainer.resume(ckpt)?;
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            lines.extend(
                old.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < done))
                    .map(str::to_string),
            );
        }
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut budget = stop_after.unwrap_or(usize::MAX);
    while !trainer.is_done() && budget > 0 {
        budget -= 1;
        let before = trainer.log.len();
        trainer.run_epoch(&data)?;
        lines.extend(trainer.log[before..].iter().map(|r| metrics_line(r, n)));
        write_file(&metrics_path, lines.join("\n") + "\n")?;
        trainer.checkpoint().save(&ckpt_path)?;
    }
    let final_row = trainer
        .log
        .last()
        .cloned()
        .ok_or_else(|| CliError::Config("nothing to train: no epochs left or --stop-after 0".into()))?;
    Ok(Some(TrainSummary {
        run_dir: out.to_path_buf(),
        final_row,
    }))
}

/// Result of one (variant, seed) run, as exchanged with worker processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub target_domain: usize,
    pub target_accuracy: f64,
    pub accuracy: Vec<f64>,
}

pub fn run_one(cfg: &Config, variant: VariantId, seed: u64, train: &[LabeledSet], test: &[LabeledSet]) -> Result<RunRecord> {
    let mut exp = cfg.experiment.clone();
    exp.train.seed = seed;
    let run = run_variant_on(variant, &exp, train, test)?;
    Ok(RunRecord {
        variant: variant.to_string(),
        seed,
        target_domain: exp.target_domain,
        target_accuracy: run.target_accuracy,
        accuracy: run.final_row.accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub target_domain: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Weakest first.
    pub ladder: Vec<String>,
    /// `None` unless every ladder variant was run.
    pub ordering_holds: Option<bool>,
    pub far_minus_baseline: Option<f64>,
}

pub struct AblationOutcome {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub verdict: Verdict,
}

/// Checks `FAR ≥ BaselineAttAlign ≥ BaselineAlign ≥ Baseline` with
/// `FAR > Baseline` on summary means.
pub fn ladder_verdict(summary: &[SummaryRow]) -> Verdict {
    let mean = |v: VariantId| summary.iter().find(|r| r.variant == v.name()).map(|r| r.mean_accuracy);
    let means: Option<Vec<f64>> = VariantId::LADDER.iter().map(|&v| mean(v)).collect();
    let (ordering_holds, far_minus_baseline) = match means {
        Some(m) => {
            let ordered = m.windows(2).all(|w| w[1] >= w[0]);
            let gain = m[3] - m[0];
            (Some(ordered && gain > 0.0), Some(gain))
        }
        None => (None, None),
    };
    Verdict {
        ladder: VariantId::LADDER.iter().map(|v| v.to_string()).collect(),
        ordering_holds,
        far_minus_baseline,
    }
}

/// Runs every configured variant × seed and writes `runs.csv`,
/// `summary.csv` and `verdict.json` into `out`. With `workers > 1` the runs
/// are spread over child processes of `exe`; results do not depend on the
/// worker count.
pub fn ablation(cfg: &Config, out: &Path, workers: usize, exe: Option<&Path>) -> Result<AblationOutcome> {
    if cfg.ablation_variants.is_empty() || cfg.ablation_seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one variant and one seed".into()));
    }
    let (train_sets, test_sets) = load_domains(cfg)?;
    create_dir(out)?;
    let jobs: Vec<(VariantId, u64)> = cfg
        .ablation_variants
        .iter()
        .flat_map(|&v| cfg.ablation_seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = match (workers, exe) {
        (w, Some(exe)) if w > 1 => run_in_workers(cfg, out, &jobs, w, exe)?,
        _ => jobs
            .iter()
            .map(|&(v, s)| run_one(cfg, v, s, &train_sets, &test_sets))
            .collect::<Result<Vec<_>>>()?,
    };

    let n = test_sets.len();
    let mut runs_csv = String::from("variant,seed,target_domain,target_acc");
    for d in 0..n {
        write!(runs_csv, ",acc_d{d}").expect("string write");
    }
    runs_csv.push('\n');
    for r in &runs {
        write!(runs_csv, "{},{},{},{}", r.variant, r.seed, r.target_domain, fmt_float(r.target_accuracy)).expect("string write");
        for a in &r.accuracy {
            write!(runs_csv, ",{}", fmt_float(*a)).expect("string write");
        }
        runs_csv.push('\n');
    }
    write_file(&out.join("runs.csv"), runs_csv)?;

    let mut summary = Vec::new();
    let mut summary_csv = String::from("variant,target_domain,mean_acc,std_acc,seeds\n");
    for v in &cfg.ablation_variants {
        let accs: Vec<f64> = runs
            .iter()
            .filter(|r| r.variant == v.name())
            .map(|r| r.target_accuracy)
            .collect();
        let (mean, std) = mean_std(&accs);
        let row = SummaryRow {
            variant: v.to_string(),
            target_domain: cfg.experiment.target_domain,
            mean_accuracy: mean,
            std_accuracy: std,
            seeds: accs.len(),
        };
        writeln!(
            summary_csv,
            "{},{},{},{},{}",
            row.variant,
            row.target_domain,
            fmt_float(mean),
            fmt_float(std),
            row.seeds
        )
        .expect("string write");
        summary.push(row);
    }
    write_file(&out.join("summary.csv"), summary_csv)?;
    let verdict = ladder_verdict(&summary);
    let json = serde_json::to_string_pretty(&verdict).expect("verdict serializes");
    write_file(&out.join("verdict.json"), json + "\n")?;
    Ok(AblationOutcome { runs, summary, verdict })
}

fn run_in_workers(cfg: &Config, out: &Path, jobs: &[(VariantId, u64)], workers: usize, exe: &Path) -> Result<Vec<RunRecord>> {
    let snapshot = out.join("ablation_config.txt");
    write_file(&snapshot, cfg.to_text())?;
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        let children = chunk
            .iter()
            .map(|(v, s)| {
                Command::new(exe)
                    .arg("worker")
                    .arg("--config")
                    .arg(&snapshot)
                    .arg("--variant")
                    .arg(v.name())
                    .arg("--seed")
                    .arg(s.to_string())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| CliError::Io {
                        path: exe.to_path_buf(),
                        source: e,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        for child in children {
            let output = child.wait_with_output().map_err(|e| CliError::Io {
                path: exe.to_path_buf(),
                source: e,
            })?;
            if !output.status.success() {
                return Err(CliError::Worker(String::from_utf8_lossy(&output.stderr).trim().to_string()));
            }
            let record: RunRecord = serde_json::from_slice(&output.stdout)
                .map_err(|e| CliError::Worker(format!("unreadable worker output: {e}")))?;
            results.push(record);
        }
    }
    Ok(results)
}

/// Body of the hidden `worker` subcommand: one run, JSON on stdout.
pub fn worker(cfg: &Config, variant: VariantId, seed: u64) -> Result<String> {
    let (train_sets, test_sets) = load_domains(cfg)?;
    let record = run_one(cfg, variant, seed, &train_sets, &test_sets)?;
    Ok(serde_json::to_string(&record).expect("record serializes"))
}

#[derive(Serialize)]
struct StageBlock<'a> {
    stage: &'a str,
    domains: &'a [usize],
    matrix: &'a [Vec<f64>],
    mean: f64,
}

/// Plain (P2) graymap of a map scaled so its largest absolute value is 255;
/// negative values clamp to 0.
pub fn pgm(map: &Tensor<f32>) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let peak = map.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in map.data().chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if peak > 0.0 { (v / peak * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
                (g as u32).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn stage_file_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::F => "F",
        Stage::A => "A",
        Stage::APlusRPlus => "ARplus",
    }
}

/// Loads a checkpoint into the configured variant's architecture.
pub fn load_model(cfg: &Config, checkpoint: &Path) -> Result<FarModel> {
    let n_domains = cfg.experiment.benchmark.domains.len();
    let (net, _, _) = variant_setup(cfg.variant, &cfg.experiment, n_domains);
    let mut model = FarModel::new(net, cfg.experiment.train.seed)?;
    let mut opt = far_core::trainer::OptimizerState::zeros_like(&model);
    Checkpoint::load(checkpoint)?.restore(&mut model, &mut opt)?;
    Ok(model)
}

pub struct DiagnoseOutcome {
    pub reports: [DivergenceReport; 3],
    pub maps_written: usize,
    pub feature_rows: usize,
}

/// Writes `divergence_report.json`, `maps/*.pgm` and `features.csv` for the
/// test split of every domain.
pub fn diagnose(cfg: &Config, checkpoint: &Path, out: &Path) -> Result<DiagnoseOutcome> {
    let model = load_model(cfg, checkpoint)?;
    let (_, test_sets) = load_domains(cfg)?;
    create_dir(out)?;
    let reports = divergence_profile(&model, &test_sets)?;
    let blocks: Vec<StageBlock> = reports
        .iter()
        .map(|r| StageBlock {
            stage: r.stage.label(),
            domains: &r.domains,
            matrix: &r.matrix,
            mean: r.mean,
        })
        .collect();
    let json = serde_json::to_string_pretty(&serde_json::json!({ "stages": blocks })).expect("report serializes");
    write_file(&out.join("divergence_report.json"), json + "\n")?;

    let maps_dir = out.join("maps");
    create_dir(&maps_dir)?;
    let c = model.config().feature_channels();
    let (h, w) = model.config().feature_hw();
    let mut features = String::from("domain,stage,sample,label");
    for k in 0..c {
        write!(features, ",f{k}").expect("string write");
    }
    features.push('\n');
    let (mut maps_written, mut feature_rows) = (0, 0);
    for set in &test_sets {
        let maps = stage_maps(&model, &set.images)?;
        for (stage, m) in Stage::ALL.into_iter().zip(&maps) {
            for (i, img) in m.data().chunks(c * h * w).enumerate() {
                let fmap = Tensor::new(vec![c, h, w], img.to_vec())?;
                if i < cfg.diagnose_samples {
                    let name = format!("domain{}_sample{i}_{}.pgm", set.domain_id, stage_file_tag(stage));
                    write_file(&maps_dir.join(name), pgm(&activation_map(&fmap)?))?;
                    maps_written += 1;
                }
                let label = set.labels.get(i).map(|y| y.to_string()).unwrap_or_default();
                write!(features, "{},{},{i},{label}", set.domain_id, stage.label()).expect("string write");
                for p in img.chunks(h * w) {
                    let pooled = p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
                    write!(features, ",{}", fmt_float(pooled)).expect("string write");
                }
                features.push('\n');
                feature_rows += 1;
            }
        }
    }
    write_file(&out.join("features.csv"), features)?;
    Ok(DiagnoseOutcome {
        reports,
        maps_written,
        feature_rows,
    })
}
