use std::path::{Path, PathBuf};
use std::time::Instant;

use memtangle_core::eval::{evaluate_run, DecodedRun, MetricReport};
use memtangle_core::model::load_checkpoint;
use memtangle_core::{build_windows, mdst, synthgen};

use crate::commands::{
    analyze, decode_run, run_jobs, train_run, write_analysis, write_labeled, write_report,
    AnalyzeMode,
};
use crate::config::PipelineConfig;
use crate::io::{sha256_hex, write_atomic};
use crate::manifest::RunManifest;
use crate::{CliError, StageExt};

pub struct PipelineOutputs {
    pub manifest: RunManifest,
    pub report: MetricReport,
    pub dir: PathBuf,
}

/// generate -> analyze (ridge, rsa, auto-rsa) -> train every
/// (method, alpha, seed) -> decode -> evaluate, all under `out_dir`:
///
/// ```text
/// data.mdst
/// analysis/{ridge,rsa,auto-rsa}.{csv,json}
/// runs/<tag>.{mdmw,trace.csv,jsonl}
/// report.csv, report.txt
/// manifest.json          written last, atomically
/// ```
pub fn cmd_pipeline(
    cfg: &PipelineConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<PipelineOutputs, CliError> {
    cfg.validate().stage("config")?;
    std::fs::create_dir_all(out_dir)
        .map_err(Into::into)
        .stage("setup")?;
    let manifest_path = out_dir.join("manifest.json");
    match std::fs::remove_file(&manifest_path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()).stage("setup"),
        _ => {}
    }
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut timings = Vec::new();

    let t = Instant::now();
    let ds = synthgen::generate(&cfg.generate).stage("generate")?;
    let bytes = mdst::encode(&ds).stage("generate")?;
    let data_path = out_dir.join("data.mdst");
    write_atomic(&data_path, &bytes).stage("generate")?;
    let dataset_hash = sha256_hex(&bytes);
    outputs.push(data_path);
    timings.push(("generate", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    for mode in AnalyzeMode::ALL {
        let summary = analyze(&ds, mode, &cfg.analysis).stage("analyze")?;
        outputs.extend(write_analysis(&summary, &out_dir.join("analysis")).stage("analyze")?);
    }
    timings.push(("analyze", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let windows = build_windows(&ds, 3).stage("train")?;
    let exp = &cfg.experiment;
    let mut jobs = Vec::new();
    for &seed in &exp.seeds {
        for (method, alpha) in exp.variants() {
            jobs.push((method, alpha, seed));
        }
    }
    let runs_dir = out_dir.join("runs");
    let results = run_jobs(jobs, threads, |(method, alpha, seed)| {
        let run = train_run(
            &windows,
            method,
            alpha,
            seed,
            &cfg.train,
            exp.m,
            exp.validation_size(),
        )
        .map_err(|e| ("train", e))?;
        let mut paths = run
            .save(&runs_dir)
            .map(Vec::from)
            .map_err(|e| ("train", e))?;
        // Decode from the checkpoint as written so the records match a
        // standalone `decode` of that file.
        let (model, _) = load_checkpoint(&paths[0]).map_err(|e| ("decode", e))?;
        let records = decode_run(&model, &ds, &run.split).map_err(|e| ("decode", e))?;
        let jsonl = runs_dir.join(format!("{}.jsonl", run.tag));
        write_labeled(&jsonl, method, run.alpha, seed, &records).map_err(|e| ("decode", e))?;
        paths.push(jsonl);
        Ok::<_, (&'static str, memtangle_core::Error)>((
            paths,
            DecodedRun {
                method,
                alpha: run.alpha,
                seed,
                records,
            },
        ))
    });
    let results = match results {
        Ok(r) => r,
        Err((stage, error)) => {
            return Err(CliError {
                stage: Some(stage),
                error,
            })
        }
    };
    let mut runs = Vec::new();
    for (paths, run) in results {
        outputs.extend(paths);
        runs.push(run);
    }
    timings.push(("train+decode", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let report = evaluate_run(&runs).stage("evaluate")?;
    outputs.extend(write_report(&report, out_dir).stage("evaluate")?);
    timings.push(("evaluate", t.elapsed().as_secs_f64()));

    let config = serde_json::to_value(cfg)
        .map_err(Into::into)
        .stage("manifest")?;
    let mut manifest = RunManifest::new("pipeline", config, dataset_hash, exp.seeds.clone());
    for p in outputs {
        let hash = sha256_hex(&std::fs::read(&p).map_err(Into::into).stage("manifest")?);
        let rel = p.strip_prefix(out_dir).unwrap_or(&p);
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        manifest.outputs.insert(key, hash);
    }
    for (stage, secs) in timings {
        manifest.timings.insert(stage.into(), secs);
    }
    manifest.write(&manifest_path).stage("manifest")?;
    Ok(PipelineOutputs {
        manifest,
        report,
        dir: out_dir.to_path_buf(),
    })
}
