//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits nonzero if the set of failing criteria differs from
//! `KNOWN_FAILURES`, so an unexpected failure (or an unexpected pass of a
//! known failure) breaks the build while the known gap stays visible.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;

use memtangle_cli::{
    analyze, cmd_pipeline, load_json, train_run, AnalysisConfig, AnalyzeMode, PipelineConfig,
};
use memtangle_core::analysis::{compute_rdm, fmri_auto_rsa, rsa_over_sessions, trialwise_rsa};
use memtangle_core::dataset::image_ids;
use memtangle_core::decode::{build_bank, decode_windows, retrieval_accuracy};
use memtangle_core::eval::{cell_scores, cider, cider_items, meteor_lite, tokenize, DecodedRun};
use memtangle_core::model::{
    evaluate, grad_check, infonce_from_similarities, loss_infonce, Architecture, Batch, Decoder,
    Method, Mlp, TrainConfig,
};
use memtangle_core::rng::Stream;
use memtangle_core::{
    build_windows, split_contamination_free, synthgen, Dataset, GenConfig, SplitConfig,
    WindowSample,
};

/// k=0 ridge score above 0.8 is out of reach for the default generator; see
/// the README.
const KNOWN_FAILURES: &[u32] = &[1];

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn default_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| synthgen::generate(&GenConfig::default()).expect("default dataset"))
}

fn default_windows() -> &'static [WindowSample] {
    static W: OnceLock<Vec<WindowSample>> = OnceLock::new();
    W.get_or_init(|| build_windows(default_dataset(), 3).expect("windows"))
}

fn desk_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    load_json(&path).expect("desk config")
}

fn non_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0])
}

fn fmt_curve(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let s = analyze(
        default_dataset(),
        AnalyzeMode::Ridge,
        &AnalysisConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let curve: Vec<f64> = s.curve.iter().map(|p| p.value).collect();
    let base = s.baseline.unwrap();
    let secs = start.elapsed().as_secs_f64();
    let clauses = [
        ("k0..4 non-increasing", non_increasing(&curve[..5])),
        ("k0 > 0.8", curve[0] > 0.8),
        (
            "k>=5 within 0.05 of baseline",
            curve[5..].iter().all(|v| (v - base).abs() <= 0.05),
        ),
        ("|baseline| < 0.05", base.abs() < 0.05),
        ("runtime < 180 s", secs < 180.0),
    ];
    let failed: Vec<&str> = clauses.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "curve [{}], baseline {base:.4}, {secs:.0} s{}",
        fmt_curve(&curve),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join("; "))
        }
    );
    check(failed.is_empty(), detail)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let r = rsa_over_sessions(default_dataset(), 9).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ok = non_increasing(&r.per_k[..4]) && secs < 120.0;
    check(
        ok,
        format!("rsa per_k [{}], {secs:.0} s", fmt_curve(&r.per_k)),
    )
}

/// Signals are pure i.i.d. noise, unrelated to the stimuli.
fn noise_dataset() -> Dataset {
    let (d_f, d_c) = (512, 8);
    let mut s = Stream::new(5, "acceptance-noise");
    let mut ds = Dataset::new(d_f, d_c);
    let n_images = 4 * 12 * 62;
    for id in 0..n_images as u64 {
        let emb: Vec<f32> = (0..d_c).map(|_| s.next_normal() as f32).collect();
        ds.images.push(memtangle_core::ImageRecord {
            image_id: id,
            embedding: emb.into(),
            captions: vec![format!("image {id}")],
        });
    }
    let mut id = 0u64;
    for session in 0..4 {
        for _ in 0..12 {
            let trials = (0..62)
                .map(|_| {
                    id += 1;
                    (id - 1, (0..d_f).map(|_| s.next_normal() as f32).collect())
                })
                .collect();
            ds.push_run(session, trials);
        }
    }
    ds
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let r = fmri_auto_rsa(default_dataset(), 9).map_err(|e| e.to_string())?;
    let noise = fmri_auto_rsa(&noise_dataset(), 9).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let declines = r.per_k.windows(2).take(3).all(|w| w[1] < w[0]);
    let worst = noise.per_k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(
        declines && worst < 0.1 && secs < 120.0,
        format!(
            "auto-rsa k1.. [{}], noise max |rho| {worst:.4}, {secs:.0} s",
            fmt_curve(&r.per_k)
        ),
    )
}

fn random_batch(seed: u64, n: usize, d_f: usize, d_c: usize) -> Batch {
    let mut s = Stream::new(seed, "acceptance-batch");
    let mut m = |rows: usize| DMatrix::from_fn(rows, n, |_, _| s.next_normal());
    Batch {
        f_t: m(d_f),
        f_prev: m(d_f),
        targets: [m(d_c), m(d_c), m(d_c)],
    }
}

fn kink_margin(model: &Decoder, batch: &Batch) -> f64 {
    let first_layer = |mlp: &Mlp, x: &DMatrix<f64>| -> f64 {
        if mlp.layers.len() < 2 {
            return f64::INFINITY;
        }
        let l = &mlp.layers[0];
        let mut z = &l.weight * x;
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    };
    match model {
        Decoder::Straightforward { mlps } => mlps
            .iter()
            .map(|m| first_layer(m, &batch.f_t))
            .fold(f64::INFINITY, f64::min),
        Decoder::Disentangled { encoder, .. } => {
            first_layer(&encoder.trunk, &batch.f_t).min(first_layer(&encoder.trunk, &batch.f_prev))
        }
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst_full = 0.0f64;
    for seed in 1..=3 {
        let arch = Architecture {
            d_f: 16,
            d_c: 5,
            d_h: 6,
            hidden: 12,
        };
        let cfg = TrainConfig {
            alpha: 0.01,
            ..TrainConfig::default()
        };
        for method in [Method::Straightforward, Method::Disentangled] {
            let model = Decoder::init(method, &arch, seed);
            // Keep every hidden pre-activation clear of the ReLU kink so the
            // finite-difference step cannot cross it.
            let batch = (0..)
                .map(|b| random_batch(1000 * seed + b, 6, arch.d_f, arch.d_c))
                .find(|b| kink_margin(&model, b) > 1e-2)
                .unwrap();
            let r = grad_check(&model, &batch, &cfg, 1e-4, 1).map_err(|e| e.to_string())?;
            worst_full = worst_full.max(r.max_rel_err);
        }
    }
    let arch = Architecture {
        d_f: 16,
        d_c: 5,
        d_h: 0,
        hidden: 0,
    };
    let cfg = TrainConfig {
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let model = Decoder::init(Method::Straightforward, &arch, 7);
    // Central differences are exact on a quadratic, so the step only trades
    // off rounding; at 1e-4 the quotient itself carries ~1e-9 of it.
    let linear = grad_check(&model, &random_batch(9, 6, 16, 5), &cfg, 1e-2, 1)
        .map_err(|e| e.to_string())?
        .max_rel_err;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_full < 1e-4 && linear < 1e-9 && secs < 60.0,
        format!("full loss max rel err {worst_full:.2e}, linear MSE {linear:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let v = [0.3, -1.2, 0.8, 2.0];
    let equal = loss_infonce(&v, &v, &v, &v, 0.07).map_err(|e| e.to_string())?;
    let e = |i: usize| {
        let mut x = vec![0.0; 3];
        x[i] = 1.0;
        x
    };
    // b_t == n_prev, the other four pairs orthogonal.
    let tau1 = loss_infonce(&e(0), &e(1), &e(2), &e(0), 1.0).map_err(|e| e.to_string())?;
    let tau1_want = (1.0 + 5.0 / std::f64::consts::E).ln();
    let tau01 = infonce_from_similarities(&[1.0, -1.0, -1.0, -1.0, -1.0, -1.0], 0.1);
    let tau01_want = (5.0 * (-20.0f64).exp()).ln_1p();
    let errs = [
        (equal - 6f64.ln()).abs(),
        (tau1 - tau1_want).abs(),
        (tau01 - tau01_want).abs(),
    ];
    check(
        errs.iter().all(|&e| e < 1e-9),
        format!("ln6 {equal:.12}, tau=1 {tau1:.12}, tau=0.1 {tau01:.6e}"),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let base = desk_config().train;
    let mut means = BTreeMap::new();
    for alpha in [0.0, 0.01] {
        let mut total = 0.0;
        for seed in 1..=5 {
            let run = train_run(
                default_windows(),
                Method::Disentangled,
                Some(alpha),
                seed,
                &base,
                200,
                0,
            )
            .map_err(|e| e.to_string())?;
            let rep = evaluate(&run.outcome.model, &run.split.test, &run.config)
                .map_err(|e| e.to_string())?;
            total += rep.per_offset_mse[0];
        }
        means.insert(alpha.to_bits(), total / 5.0);
    }
    let (m0, m1) = (means[&0f64.to_bits()], means[&0.01f64.to_bits()]);
    let secs = start.elapsed().as_secs_f64();
    check(
        m1 <= 1.05 * m0 && secs < 600.0,
        format!(
            "k=0 test MSE alpha=0.01 {m1:.6} vs alpha=0 {m0:.6} (ratio {:.4}), {secs:.0} s",
            m1 / m0
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let windows = default_windows();
    let mut overlaps = 0;
    for seed in 0..100 {
        let split = split_contamination_free(windows, &SplitConfig { m: 500, seed })
            .map_err(|e| e.to_string())?;
        let train = image_ids(&split.train);
        let test = image_ids(&split.test);
        overlaps += train.intersection(&test).count();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        overlaps == 0 && secs < 60.0,
        format!("100 seeds, {overlaps} shared ids, {secs:.1} s"),
    )
}

/// Brute-force CIDEr written from the definition with dense vectors over
/// the full n-gram vocabulary of the corpus.
fn cider_oracle(cands: &[String], refs: &[Vec<String>]) -> Vec<f64> {
    let n_docs = cands.len() as f64;
    let grams = |toks: &[String], n: usize| -> Vec<Vec<String>> {
        if toks.len() < n {
            return Vec::new();
        }
        (0..=toks.len() - n)
            .map(|i| toks[i..i + n].to_vec())
            .collect()
    };
    let mut out = vec![0.0; cands.len()];
    for n in 1..=4 {
        let cand_grams: Vec<Vec<Vec<String>>> =
            cands.iter().map(|c| grams(&tokenize(c), n)).collect();
        let ref_grams: Vec<Vec<Vec<Vec<String>>>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| grams(&tokenize(r), n)).collect())
            .collect();
        let mut vocab = BTreeSet::new();
        for g in cand_grams
            .iter()
            .flatten()
            .chain(ref_grams.iter().flatten().flatten())
        {
            vocab.insert(g.clone());
        }
        let vocab: Vec<Vec<String>> = vocab.into_iter().collect();
        let idf: Vec<f64> = vocab
            .iter()
            .map(|g| {
                let df = ref_grams
                    .iter()
                    .filter(|rs| rs.iter().any(|r| r.contains(g)))
                    .count();
                (n_docs / (df.max(1) as f64)).ln()
            })
            .collect();
        let vector = |gs: &[Vec<String>]| -> Vec<f64> {
            vocab
                .iter()
                .zip(&idf)
                .map(|(g, w)| {
                    if gs.is_empty() {
                        0.0
                    } else {
                        gs.iter().filter(|x| *x == g).count() as f64 / gs.len() as f64 * w
                    }
                })
                .collect()
        };
        for i in 0..cands.len() {
            let c = vector(&cand_grams[i]);
            let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for rg in &ref_grams[i] {
                let r = vector(rg);
                let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let num: f64 = c.iter().zip(&r).map(|(a, b)| a.min(*b) * b).sum();
                    acc += num / (nc * nr);
                }
            }
            out[i] += acc / ref_grams[i].len() as f64;
        }
    }
    out.into_iter().map(|s| s * 10.0 / 4.0).collect()
}

fn criterion_8() -> Outcome {
    const WORDS: [&str; 6] = ["a", "dog", "red", "runs", "on", "grass"];
    let mut s = Stream::new(8, "acceptance-corpora");
    let sentence = |s: &mut Stream| -> String {
        let len = s.below(9);
        (0..len)
            .map(|_| WORDS[s.below(WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let items = 2 + s.below(4);
        let cands: Vec<String> = (0..items).map(|_| sentence(&mut s)).collect();
        let refs: Vec<Vec<String>> = (0..items)
            .map(|_| {
                let r = 1 + s.below(3);
                (0..r).map(|_| sentence(&mut s)).collect()
            })
            .collect();
        let got = cider_items(&cands, &refs).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(cider_oracle(&cands, &refs)) {
            worst = worst.max((g - w).abs());
        }
    }
    let identical = cider_items(
        &["a brown dog runs on the grass", "two cats sleep"],
        &[
            vec!["a brown dog runs on the grass"],
            vec!["boats at the harbour"],
        ],
    )
    .map_err(|e| e.to_string())?[0];
    let corpus = cider(&["x y"], &[vec!["x y"]]).is_err();
    let m_same = meteor_lite("the cat sat on mats", &["the cat sat on mats"]);
    let m_rev = meteor_lite("c b a", &["a b c"]);
    let m_none = meteor_lite("x y", &["a b"]);
    let meteor_ok =
        (m_same - (1.0 - 0.5 / 125.0)).abs() < 1e-9 && (m_rev - 0.5).abs() < 1e-9 && m_none == 0.0;
    check(
        worst < 1e-9 && (identical - 10.0).abs() < 1e-9 && corpus && meteor_ok,
        format!(
            "oracle max abs diff {worst:.1e} over 200 corpora, identical {identical:.12}, meteor {m_same:.6}/{m_rev:.6}/{m_none}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let ds = default_dataset();
    let cfg = desk_config().train;
    let run = train_run(
        default_windows(),
        Method::Straightforward,
        None,
        1,
        &cfg,
        200,
        0,
    )
    .map_err(|e| e.to_string())?;
    let bank = build_bank(ds, &run.split.train).map_err(|e| e.to_string())?;
    let records = decode_windows(&run.outcome.model, ds, &run.split.test, &bank)
        .map_err(|e| e.to_string())?;
    let acc = retrieval_accuracy(&records, ds, &bank).map_err(|e| e.to_string())?;
    let decoded = DecodedRun {
        method: Method::Straightforward,
        alpha: None,
        seed: 1,
        records,
    };
    let c0 = cell_scores(&decoded, 0).map_err(|e| e.to_string())?[0];
    let c2 = cell_scores(&decoded, 2).map_err(|e| e.to_string())?[0];
    check(
        acc[0] > acc[2] && c0 > c2,
        format!(
            "top-1 accuracy k0 {:.3} k1 {:.3} k2 {:.3}; CIDEr k0 {c0:.3} k2 {c2:.3}",
            acc[0], acc[1], acc[2]
        ),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    let mut manifests = Vec::new();
    for d in &dirs {
        manifests.push(
            cmd_pipeline(&cfg, d, 1)
                .map_err(|e| e.to_string())?
                .manifest,
        );
    }
    let secs = start.elapsed().as_secs_f64() / 2.0;
    let mut differing = Vec::new();
    for file in manifests[0].outputs.keys() {
        let a = std::fs::read(dirs[0].join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].join(file)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(file.clone());
        }
    }
    let same_index = manifests[0].outputs == manifests[1].outputs
        && manifests[0].dataset_sha256 == manifests[1].dataset_sha256
        && manifests[0].config == manifests[1].config;
    let kinds = ["mdmw", "csv", "jsonl"]
        .iter()
        .all(|ext| manifests[0].outputs.keys().any(|f| f.ends_with(ext)));
    check(
        differing.is_empty() && same_index && kinds && secs < 900.0,
        format!(
            "{} files compared, differing {differing:?}, {secs:.0} s per run",
            manifests[0].outputs.len()
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut s = Stream::new(11, "acceptance-rdm");
    let mut worst = 0.0f64;
    let mut self_ok = true;
    for _ in 0..1000 {
        let n = 2 + s.below(9);
        let d = 2 + s.below(15);
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| s.next_normal()).collect())
            .collect();
        let r = compute_rdm(&vs).map_err(|e| e.to_string())?;
        for i in 0..n {
            worst = worst.max(r.get(i, i).abs());
            for j in 0..n {
                let v = r.get(i, j);
                worst = worst.max((v - r.get(j, i)).abs()).max(-v).max(v - 2.0);
            }
        }
        // Rows need at least 3 off-diagonal entries, and 2-d vectors only
        // ever correlate at +-1, which can leave a row constant.
        if n >= 4 && d >= 3 {
            self_ok &= trialwise_rsa(&r, &r, 0).map_err(|e| e.to_string())? == 1.0;
        }
    }
    check(
        worst <= 1e-9 && self_ok,
        format!(
            "1000 instances, worst violation {:.1e}, self-RSA exactly 1: {self_ok}",
            worst.abs()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "retention curve recovery", criterion_1),
        (2, "RSA/ridge concordance", criterion_2),
        (3, "auto-RSA", criterion_3),
        (4, "gradient suite", criterion_4),
        (5, "InfoNCE closed forms", criterion_5),
        (6, "disentangling ablation trend", criterion_6),
        (7, "contamination", criterion_7),
        (8, "metric oracles", criterion_8),
        (9, "decline across k", criterion_9),
        (10, "reproducibility", criterion_10),
        (11, "RDM invariants", criterion_11),
    ];
    // ACCEPTANCE_ONLY=4,10 runs a subset; the known-failure bookkeeping
    // then only covers the selected criteria.
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = Vec::new();
    for (n, name, f) in criteria.into_iter().filter(|c| selected(c.0)) {
        match f() {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                let known = if KNOWN_FAILURES.contains(&n) {
                    " [known]"
                } else {
                    ""
                };
                println!("FAIL criterion {n} ({name}){known}: {detail}");
                failed.push(n);
            }
        }
    }
    let unexpected: Vec<u32> = failed
        .iter()
        .copied()
        .filter(|n| !KNOWN_FAILURES.contains(n))
        .collect();
    let fixed: Vec<u32> = KNOWN_FAILURES
        .iter()
        .copied()
        .filter(|&n| selected(n) && !failed.contains(&n))
        .collect();
    let ran = criteria_count(&only);
    println!(
        "acceptance: {} passed, {} failed ({} known)",
        ran - failed.len(),
        failed.len(),
        failed.len() - unexpected.len()
    );
    if !unexpected.is_empty() || !fixed.is_empty() {
        eprintln!("unexpected failures {unexpected:?}, known failures now passing {fixed:?}");
        std::process::exit(1);
    }
}

fn criteria_count(only: &Option<Vec<u32>>) -> usize {
    only.as_ref()
        .map_or(11, |o| o.iter().filter(|n| (1..=11).contains(*n)).count())
}
