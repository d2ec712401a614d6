use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use memtangle_core::analysis::{
    fmri_auto_rsa, ridge_offset_analysis, ridge_random_baseline, rsa_over_sessions, RidgeConfig,
};
use memtangle_core::dataset::carve_validation;
use memtangle_core::decode::{build_bank, decode_windows, DecodedRecord};
use memtangle_core::eval::{evaluate_run, DecodedRun, MetricReport};
use memtangle_core::fmt::sig9;
use memtangle_core::model::{
    load_checkpoint, save_checkpoint, train, write_trace_csv, Decoder, Method, TrainConfig,
    TrainOutcome,
};
use memtangle_core::{
    build_windows, mdst, split_contamination_free, synthgen, Dataset, Error, GenConfig, Result,
    Split, SplitConfig, WindowSample,
};

use crate::config::{load_json, AnalysisConfig};
use crate::io::{create_parent, read_labeled_jsonl, sha256_hex, write_atomic};
use crate::manifest::RunManifest;
use crate::{CliError, StageExt};

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Defaults to `<out>.manifest.json`.
    pub manifest: Option<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut cfg: GenConfig = match &args.config {
        Some(p) => load_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = synthgen::generate(&cfg)?;
    let bytes = mdst::encode(&ds)?;
    create_parent(&args.out)?;
    write_atomic(&args.out, &bytes)?;
    let hash = sha256_hex(&bytes);

    let mut manifest = RunManifest::new(
        "generate",
        serde_json::json!({ "generate": cfg }),
        hash.clone(),
        vec![cfg.seed],
    );
    manifest
        .outputs
        .insert(args.out.display().to_string(), hash);
    manifest
        .timings
        .insert("generate".into(), start.elapsed().as_secs_f64());
    let path = args
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&args.out, "manifest.json"));
    manifest.write(&path)?;
    Ok(manifest)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

// ----------------------------------------------------------------- analyze

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeMode {
    Ridge,
    Rsa,
    AutoRsa,
}

impl AnalyzeMode {
    pub const ALL: [AnalyzeMode; 3] = [AnalyzeMode::Ridge, AnalyzeMode::Rsa, AnalyzeMode::AutoRsa];
}

impl fmt::Display for AnalyzeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalyzeMode::Ridge => "ridge",
            AnalyzeMode::Rsa => "rsa",
            AnalyzeMode::AutoRsa => "auto-rsa",
        })
    }
}

impl FromStr for AnalyzeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(AnalyzeMode::Ridge),
            "rsa" => Ok(AnalyzeMode::Rsa),
            "auto-rsa" => Ok(AnalyzeMode::AutoRsa),
            other => Err(Error::config(
                "mode",
                format!("unknown mode {other:?} (ridge|rsa|auto-rsa)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub mode: String,
    pub max_k: usize,
    pub curve: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<f64>,
}

impl AnalyzeSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.baseline {
            Some(b) => {
                out.push_str("k,score,baseline\n");
                for p in &self.curve {
                    out.push_str(&format!("{},{},{}\n", p.k, sig9(p.value), sig9(b)));
                }
                out.push_str(&format!("rand,{},{}\n", sig9(b), sig9(b)));
            }
            None => {
                out.push_str("k,rho_ave\n");
                for p in &self.curve {
                    out.push_str(&format!("{},{}\n", p.k, sig9(p.value)));
                }
            }
        }
        out
    }
}

/// Runs one analysis on an in-memory dataset.
pub fn analyze(ds: &Dataset, mode: AnalyzeMode, cfg: &AnalysisConfig) -> Result<AnalyzeSummary> {
    let (curve, baseline) = match mode {
        AnalyzeMode::Ridge => {
            let rc = RidgeConfig {
                lambda: cfg.lambda,
                max_k: cfg.max_k,
            };
            let split = SplitConfig {
                m: cfg.m,
                seed: cfg.seed,
            };
            let pts = ridge_offset_analysis(ds, &rc, &split)?;
            let base = ridge_random_baseline(ds, &rc, &split)?;
            let curve = pts
                .iter()
                .map(|p| CurvePoint {
                    k: p.k,
                    value: p.score,
                })
                .collect();
            (curve, Some(base))
        }
        AnalyzeMode::Rsa | AnalyzeMode::AutoRsa => {
            let r = if mode == AnalyzeMode::Rsa {
                rsa_over_sessions(ds, cfg.max_k)?
            } else {
                fmri_auto_rsa(ds, cfg.max_k)?
            };
            let curve =
                r.ks.iter()
                    .zip(&r.per_k)
                    .map(|(&k, &value)| CurvePoint { k, value })
                    .collect();
            (curve, None)
        }
    };
    Ok(AnalyzeSummary {
        mode: mode.to_string(),
        max_k: cfg.max_k,
        curve,
        baseline,
    })
}

/// Writes `<mode>.csv` and `<mode>.json` into `dir`; returns their paths.
pub(crate) fn write_analysis(summary: &AnalyzeSummary, dir: &Path) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", summary.mode));
    let json = dir.join(format!("{}.json", summary.mode));
    std::fs::write(&csv, summary.to_csv())?;
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(&json, text)?;
    Ok([csv, json])
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub dataset: PathBuf,
    pub mode: AnalyzeMode,
    pub config: AnalysisConfig,
    pub out_dir: PathBuf,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeSummary, CliError> {
    let ds = mdst::load_dataset(&args.dataset)?;
    let summary = analyze(&ds, args.mode, &args.config)?;
    write_analysis(&summary, &args.out_dir)?;
    Ok(summary)
}

// ------------------------------------------------------------------- train

/// File stem for one trained model, e.g. `sf_seed1` or `dis_a0.01_seed3`.
pub fn run_tag(method: Method, alpha: Option<f64>, seed: u64) -> String {
    match alpha {
        Some(a) => format!("{method}_a{a}_seed{seed}"),
        None => format!("{method}_seed{seed}"),
    }
}

pub struct TrainedRun {
    pub tag: String,
    pub method: Method,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub config: TrainConfig,
    pub split_config: SplitConfig,
    pub split: Split,
    pub outcome: TrainOutcome,
}

/// Splits `windows` with `seed`, carves a validation set of
/// `validation_m` windows out of train (skipped when 0), and trains.
/// The seed also drives initialization and batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    windows: &[WindowSample],
    method: Method,
    alpha: Option<f64>,
    seed: u64,
    base: &TrainConfig,
    m: usize,
    validation_m: usize,
) -> Result<TrainedRun> {
    let mut config = base.clone();
    config.seed = seed;
    config.alpha = match method {
        Method::Straightforward => 0.0,
        Method::Disentangled => alpha.unwrap_or(base.alpha),
    };
    let alpha = (method == Method::Disentangled).then_some(config.alpha);
    let split_config = SplitConfig { m, seed };
    let split = split_contamination_free(windows, &split_config)?;
    let (train_set, val) = if validation_m == 0 {
        (split.train.clone(), Vec::new())
    } else {
        carve_validation(split.train.clone(), validation_m, seed)?
    };
    let outcome = train(method, &train_set, &val, &config)?;
    Ok(TrainedRun {
        tag: run_tag(method, alpha, seed),
        method,
        alpha,
        seed,
        config,
        split_config,
        split,
        outcome,
    })
}

impl TrainedRun {
    /// Writes `<tag>.mdmw` and `<tag>.trace.csv`; returns their paths.
    pub fn save(&self, dir: &Path) -> Result<[PathBuf; 2]> {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join(format!("{}.mdmw", self.tag));
        let trace = dir.join(format!("{}.trace.csv", self.tag));
        save_checkpoint(
            &self.outcome.model,
            &self.config,
            Some(self.split_config),
            &ckpt,
        )?;
        let mut buf = Vec::new();
        write_trace_csv(&self.outcome.trace, &mut buf)?;
        std::fs::write(&trace, buf)?;
        Ok([ckpt, trace])
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub method: Method,
    pub alpha: Option<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub m: usize,
    pub validation_m: Option<usize>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    if args.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required").into());
    }
    args.train.validate()?;
    let start = Instant::now();
    let bytes = std::fs::read(&args.dataset).map_err(Error::from)?;
    let ds = mdst::decode(&bytes).map_err(|source| Error::Format {
        path: args.dataset.clone(),
        source,
    })?;
    let windows = build_windows(&ds, 3)?;
    let val_m = args.validation_m.unwrap_or(args.m);
    let results = run_jobs(args.seeds.clone(), args.threads, |seed| {
        let run = train_run(
            &windows,
            args.method,
            args.alpha,
            seed,
            &args.train,
            args.m,
            val_m,
        )?;
        run.save(&args.out_dir)
    })?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "train": args.train,
            "method": args.method,
            "alpha": args.alpha,
            "m": args.m,
            "validation_m": val_m,
        }),
        sha256_hex(&bytes),
        args.seeds.clone(),
    );
    for path in results.into_iter().flatten() {
        manifest.outputs.insert(
            path.display().to_string(),
            sha256_hex(&std::fs::read(&path).map_err(Error::from)?),
        );
    }
    manifest
        .timings
        .insert("train".into(), start.elapsed().as_secs_f64());
    manifest.write(&args.out_dir.join("train.manifest.json"))?;
    Ok(manifest)
}

/// Runs `f` on every job with up to `threads` workers; results keep job
/// order and the first failing job (in job order) is reported.
pub(crate) fn run_jobs<J, R, E, F>(
    jobs: Vec<J>,
    threads: usize,
    f: F,
) -> std::result::Result<Vec<R>, E>
where
    J: Send,
    R: Send,
    E: Send,
    F: Fn(J) -> std::result::Result<R, E> + Sync,
{
    let n = jobs.len();
    if threads <= 1 || n <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let queue = Mutex::new(jobs.into_iter().enumerate());
    let results: Mutex<Vec<Option<std::result::Result<R, E>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().unwrap().next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

// ------------------------------------------------------------------ decode

/// A decoded record with the labels of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub method: Method,
    pub alpha: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub record: DecodedRecord,
}

/// Decodes the test side of `split`, retrieving from a bank built on its
/// train side.
pub fn decode_run(model: &Decoder, ds: &Dataset, split: &Split) -> Result<Vec<DecodedRecord>> {
    let bank = build_bank(ds, &split.train)?;
    decode_windows(model, ds, &split.test, &bank)
}

pub(crate) fn write_labeled(
    path: &Path,
    method: Method,
    alpha: Option<f64>,
    seed: u64,
    records: &[DecodedRecord],
) -> Result<()> {
    create_parent(path)?;
    let mut buf = Vec::new();
    for r in records {
        let rec = LabeledRecord {
            method,
            alpha,
            seed,
            record: r.clone(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.write_all(b"\n")?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Defaults to the split stored in the checkpoint, then to its seed.
    pub split_seed: Option<u64>,
    pub m: Option<usize>,
    pub out: PathBuf,
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<Vec<DecodedRecord>, CliError> {
    let (model, header) = load_checkpoint(&args.checkpoint)?;
    let ds = mdst::load_dataset(&args.dataset)?;
    let stored = header.split;
    let split_cfg = SplitConfig {
        m: args.m.or(stored.map(|s| s.m)).unwrap_or(500),
        seed: args
            .split_seed
            .or(stored.map(|s| s.seed))
            .unwrap_or(header.config.seed),
    };
    let arch = model.architecture();
    if arch.d_f != ds.d_f {
        return Err(Error::dims("checkpoint d_f vs dataset d_f", ds.d_f, arch.d_f).into());
    }
    if arch.d_c != ds.d_c {
        return Err(Error::dims("checkpoint d_c vs dataset d_c", ds.d_c, arch.d_c).into());
    }
    let windows = build_windows(&ds, 3)?;
    let split = split_contamination_free(&windows, &split_cfg)?;
    let records = decode_run(&model, &ds, &split)?;
    let alpha = (header.method == Method::Disentangled).then_some(header.config.alpha);
    write_labeled(&args.out, header.method, alpha, split_cfg.seed, &records)?;
    Ok(records)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub inputs: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Groups labeled records into runs keyed by (method, alpha, seed).
pub(crate) fn group_runs(records: Vec<LabeledRecord>) -> Vec<DecodedRun> {
    let mut runs: BTreeMap<(Method, Option<u64>, u64), DecodedRun> = BTreeMap::new();
    for r in records {
        runs.entry((r.method, r.alpha.map(f64::to_bits), r.seed))
            .or_insert_with(|| DecodedRun {
                method: r.method,
                alpha: r.alpha,
                seed: r.seed,
                records: Vec::new(),
            })
            .records
            .push(r.record);
    }
    runs.into_values().collect()
}

pub(crate) fn write_report(report: &MetricReport, dir: &Path) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("report.csv");
    let txt = dir.join("report.txt");
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    std::fs::write(&csv, buf)?;
    std::fs::write(&txt, report.to_table())?;
    Ok([csv, txt])
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport, CliError> {
    if args.inputs.is_empty() {
        return Err(Error::Incomplete {
            missing: vec!["no decoded files given".into()],
        }
        .into());
    }
    let mut records = Vec::new();
    for p in &args.inputs {
        records.extend(read_labeled_jsonl(p)?);
    }
    let report = evaluate_run(&group_runs(records)).stage("evaluate")?;
    if let Some(dir) = &args.out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}
