//! Caption metrics (CIDEr and an exact-match METEOR variant) and the
//! seed-aggregated report over methods, alphas and offsets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::WINDOW;
use crate::decode::DecodedRecord;
use crate::error::{Error, Result};
use crate::model::Method;

const MAX_N: usize = 4;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

// Ordered so float sums are reproducible run to run.
type Counts<'a> = BTreeMap<&'a [String], f64>;

/// Term frequencies of the `n`-grams of `tokens` (count / number of n-grams).
fn ngram_tf(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out: Counts = BTreeMap::new();
    if tokens.len() < n {
        return out;
    }
    let total = (tokens.len() + 1 - n) as f64;
    for g in tokens.windows(n) {
        *out.entry(g).or_default() += 1.0 / total;
    }
    out
}

/// Corpus CIDEr: mean over items of the per-item score, each in `[0, 10]`.
pub fn cider<C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<f64>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    let scores = cider_items(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-item CIDEr scores.
///
/// For each n in 1..=4 the candidate and every reference become TF-IDF
/// vectors (IDF = ln(N / df), df counted once per reference set); the
/// similarity is `sum_g min(c_g, r_g) r_g / (|c| |r|)`, averaged over the
/// references and then over n, times 10.
pub fn cider_items<C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<Vec<f64>>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    let n_docs = candidates.len();
    if references.len() != n_docs {
        return Err(Error::dims("cider references", n_docs, references.len()));
    }
    if n_docs < 2 {
        return Err(Error::InvalidArgument(format!(
            "cider needs a corpus of at least 2 items, got {n_docs}"
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "item {i} has no references"
        )));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c.as_ref())).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r.as_ref())).collect())
        .collect();

    let mut scores = vec![0.0; n_docs];
    for n in 1..=MAX_N {
        let ref_tf: Vec<Vec<Counts>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| ngram_tf(r, n)).collect())
            .collect();
        let mut df: BTreeMap<&[String], f64> = BTreeMap::new();
        for item in &ref_tf {
            let present: BTreeSet<&[String]> =
                item.iter().flat_map(|tf| tf.keys().copied()).collect();
            for g in present {
                *df.entry(g).or_default() += 1.0;
            }
        }
        let idf = |g: &[String]| (n_docs as f64 / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
        for (i, cand) in cands.iter().enumerate() {
            let c = tfidf(ngram_tf(cand, n), &idf);
            let mut sum = 0.0;
            for r in &ref_tf[i] {
                let r = tfidf(r.clone(), &idf);
                sum += clipped_cosine(&c, &r);
            }
            scores[i] += sum / ref_tf[i].len() as f64;
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| 10.0 * s / MAX_N as f64)
        .collect())
}

fn tfidf<'a>(mut tf: Counts<'a>, idf: &dyn Fn(&[String]) -> f64) -> Counts<'a> {
    for (g, v) in tf.iter_mut() {
        *v *= idf(g);
    }
    tf
}

fn clipped_cosine(c: &Counts, r: &Counts) -> f64 {
    let norm = |v: &Counts| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (nc, nr) = (norm(c), norm(r));
    if nc == 0.0 || nr == 0.0 {
        return 0.0;
    }
    let dot: f64 = c
        .iter()
        .filter_map(|(g, &cv)| r.get(g).map(|&rv| cv.min(rv) * rv))
        .sum();
    dot / (nc * nr)
}

/// Exact-match METEOR: greedy alignment, harmonic mean weighted towards
/// recall, fragmentation penalty. Best score over `refs`.
pub fn meteor_lite<R: AsRef<str>>(candidate: &str, refs: &[R]) -> f64 {
    let cand = tokenize(candidate);
    refs.iter()
        .map(|r| meteor_single(&cand, &tokenize(r.as_ref())))
        .fold(0.0, f64::max)
}

fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut matches = Vec::new();
    for (i, tok) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            matches.push((i, j));
        }
    }
    let m = matches.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + matches
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub const METRICS: [&str; 2] = ["CIDEr", "METEOR-lite"];

/// Decoded records of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRun {
    pub method: Method,
    /// `None` for the straightforward method, which has no contrastive term.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub records: Vec<DecodedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub alpha: Option<f64>,
    pub k: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Mean and unbiased sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type GroupKey = (Method, Option<u64>);

fn alpha_label(alpha: Option<f64>) -> String {
    alpha.map_or_else(|| "_".to_string(), |a| a.to_string())
}

fn cell_label(method: Method, alpha: Option<f64>, k: usize, seed: u64) -> String {
    format!("{method}/alpha={}/k={k}/seed={seed}", alpha_label(alpha))
}

/// Scores every (method, alpha, k, seed) cell and aggregates over seeds.
///
/// Every group must hold the same seeds, and every run must carry each of
/// its windows at all offsets; otherwise the missing cells are listed in an
/// [`Error::Incomplete`].
pub fn evaluate_run(runs: &[DecodedRun]) -> Result<MetricReport> {
    if runs.is_empty() {
        return Err(Error::Incomplete {
            missing: vec!["no decoded runs".into()],
        });
    }
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, &DecodedRun>> = BTreeMap::new();
    let mut all_seeds = BTreeSet::new();
    for run in runs {
        let key = (run.method, run.alpha.map(f64::to_bits));
        if groups
            .entry(key)
            .or_default()
            .insert(run.seed, run)
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate run {}",
                cell_label(run.method, run.alpha, 0, run.seed).replace("/k=0", "")
            )));
        }
        all_seeds.insert(run.seed);
    }

    let mut missing = Vec::new();
    for (&(method, alpha_bits), by_seed) in &groups {
        let alpha = alpha_bits.map(f64::from_bits);
        for &seed in &all_seeds {
            let Some(run) = by_seed.get(&seed) else {
                missing.extend((0..WINDOW).map(|k| cell_label(method, alpha, k, seed)));
                continue;
            };
            let mut anchors: [BTreeSet<_>; WINDOW] = Default::default();
            for r in &run.records {
                if r.k < WINDOW {
                    anchors[r.k].insert(r.anchor);
                }
            }
            let every: BTreeSet<_> = anchors.iter().flatten().copied().collect();
            for (k, set) in anchors.iter().enumerate() {
                if set.is_empty() || set.len() != every.len() {
                    missing.push(cell_label(method, alpha, k, seed));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete { missing });
    }

    let mut warnings = Vec::new();
    if all_seeds.len() == 1 {
        let w = "single seed: standard deviations are reported as 0".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut rows = Vec::new();
    for (&(method, alpha_bits), by_seed) in &groups {
        let alpha = alpha_bits.map(f64::from_bits);
        for k in 0..WINDOW {
            let mut per_metric = [Vec::new(), Vec::new()];
            for run in by_seed.values() {
                let [c, m] = cell_scores(run, k)?;
                per_metric[0].push(c);
                per_metric[1].push(m);
            }
            for (name, values) in METRICS.iter().zip(&per_metric) {
                let (mean, std) = mean_std(values);
                rows.push(MetricRow {
                    method,
                    alpha,
                    k,
                    metric: name.to_string(),
                    mean,
                    std,
                    n_seeds: values.len(),
                });
            }
        }
    }
    Ok(MetricReport {
        rows,
        seeds: all_seeds.into_iter().collect(),
        warnings,
    })
}

/// CIDEr and mean METEOR-lite of one run at offset `k`, over its windows in
/// anchor order.
pub fn cell_scores(run: &DecodedRun, k: usize) -> Result<[f64; 2]> {
    let mut recs: Vec<&DecodedRecord> = run.records.iter().filter(|r| r.k == k).collect();
    recs.sort_by_key(|r| r.anchor);
    let cands: Vec<&str> = recs.iter().map(|r| r.predicted_caption.as_str()).collect();
    let refs: Vec<Vec<&str>> = recs
        .iter()
        .map(|r| r.true_captions.iter().map(String::as_str).collect())
        .collect();
    let c = cider(&cands, &refs)?;
    let m = recs
        .iter()
        .map(|r| meteor_lite(&r.predicted_caption, &r.true_captions))
        .sum::<f64>()
        / recs.len() as f64;
    Ok([c, m])
}

impl MetricReport {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "method,alpha,k,metric,mean,std,n_seeds")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                alpha_label(r.alpha),
                r.k,
                r.metric,
                r.mean,
                r.std,
                r.n_seeds
            )?;
        }
        Ok(())
    }

    pub fn get(
        &self,
        method: Method,
        alpha: Option<f64>,
        k: usize,
        metric: &str,
    ) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.alpha == alpha && r.k == k && r.metric == metric)
    }

    /// One line per (method, alpha); columns are metric x offset, each
    /// cell `mean±std`.
    pub fn to_table(&self) -> String {
        let mut keys: Vec<(Method, Option<f64>)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.method, r.alpha)) {
                keys.push((r.method, r.alpha));
            }
        }
        let mut header = vec!["method".to_string(), "alpha".to_string()];
        for m in METRICS {
            for k in 0..WINDOW {
                header.push(format!("{m} k={k}"));
            }
        }
        let mut lines = vec![header];
        for (method, alpha) in keys {
            let mut line = vec![method.to_string(), alpha_label(alpha)];
            for m in METRICS {
                for k in 0..WINDOW {
                    line.push(match self.get(method, alpha, k, m) {
                        Some(r) => format!("{:.4}±{:.4}", r.mean, r.std),
                        None => "-".into(),
                    });
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap())
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrialRef;

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("A man riding a horse."),
            ["a", "man", "riding", "a", "horse"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("Giraffe-spotting, 2 p.m."),
            ["giraffe", "spotting", "2", "p", "m"]
        );
    }

    #[test]
    fn identical_candidate_scores_ten() {
        let cands = ["a dog runs on grass", "blue sky above"];
        let refs = vec![vec!["a dog runs on grass"], vec!["red car parked inside"]];
        let s = cider_items(&cands, &refs).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let s = cider(&["x y z", "p q"], &[vec!["a b c"], vec!["d e"]]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn cider_needs_two_items() {
        assert!(matches!(
            cider(&["a"], &[vec!["a"]]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let s = cider_items(&["", "b"], &[vec!["a"], vec!["b"]]).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn unigram_only_hand_value() {
        // item 0: cand "a b", ref "a c"; item 1: cand/ref "c". N = 2.
        // n=1: df(a)=1, df(c)=2 -> idf(a)=ln2, idf(c)=0, idf(b)=ln2 (df floored at 1).
        // cand = {a: .5 ln2, b: .5 ln2}, ref = {a: .5 ln2, c: 0}
        // cosine = (.25 ln2^2) / (sqrt(.5) ln2 * .5 ln2) = 1/sqrt 2. Higher n are 0 (ref has no 2-gram overlap).
        let s = cider_items(&["a b", "c"], &[vec!["a c"], vec!["c"]]).unwrap();
        assert!((s[0] - 10.0 * (0.5f64.sqrt()) / 4.0).abs() < 1e-12);
        // item 1's only n-gram has idf 0, so its vectors vanish
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn meteor_identical() {
        let s = meteor_lite("a b c d e", &["a b c d e"]);
        assert!((s - (1.0 - 0.5 / 125.0)).abs() < 1e-12);
        assert!((s - 0.996).abs() < 1e-12);
    }

    #[test]
    fn meteor_reversed() {
        // m = 3, P = R = 1, chunks = 3 -> penalty 0.5
        assert!((meteor_lite("c b a", &["a b c"]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn meteor_partial_hand_trace() {
        // cand "the cat sat" vs ref "the cat lay down": m=2, P=2/3, R=1/2
        // F = 10 * (1/3) / (1/2 + 6) = 10/19.5; chunks 1 -> penalty 0.5/8
        let f = 10.0 * (2.0 / 3.0) * 0.5 / (0.5 + 9.0 * 2.0 / 3.0);
        let want = f * (1.0 - 0.5 * (0.5f64).powi(3));
        assert!((meteor_lite("the cat sat", &["the cat lay down"]) - want).abs() < 1e-12);
    }

    #[test]
    fn meteor_edges() {
        assert_eq!(meteor_lite("x y", &["a b"]), 0.0);
        assert_eq!(meteor_lite("", &["a b"]), 0.0);
        let best = meteor_lite("a b", &["z", "a b"]);
        assert!((best - (1.0 - 0.5 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn appending_unrelated_words_lowers_meteor() {
        let base = meteor_lite("a red bus stops", &["a red bus stops"]);
        let longer = meteor_lite("a red bus stops green frog", &["a red bus stops"]);
        assert!(longer < base);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    fn run(
        method: Method,
        alpha: Option<f64>,
        seed: u64,
        perfect: bool,
        ks: &[usize],
    ) -> DecodedRun {
        let caps = [
            "a dog runs across the field",
            "the cat sleeps on a sofa",
            "red bus stops here today",
        ];
        let mut records = Vec::new();
        for (t, cap) in caps.iter().enumerate() {
            for &k in ks {
                records.push(DecodedRecord {
                    anchor: TrialRef {
                        session: 0,
                        run: 0,
                        trial: t as u32 + 2,
                    },
                    k,
                    predicted_caption: if perfect {
                        cap.to_string()
                    } else {
                        caps[(t + 1) % 3].to_string()
                    },
                    true_captions: vec![cap.to_string()],
                    true_image_id: t as u64,
                    retrieved_image_id: 0,
                    similarity: 1.0,
                });
            }
        }
        DecodedRun {
            method,
            alpha,
            seed,
            records,
        }
    }

    #[test]
    fn perfect_decoding_gives_ten_everywhere() {
        let r =
            evaluate_run(&[run(Method::Disentangled, Some(0.01), 1, true, &[0, 1, 2])]).unwrap();
        assert_eq!(r.rows.len(), 6);
        for row in r.rows.iter().filter(|r| r.metric == "CIDEr") {
            assert!((row.mean - 10.0).abs() < 1e-12);
            assert_eq!(row.std, 0.0);
        }
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn missing_cells_are_listed() {
        let runs = [
            run(Method::Straightforward, None, 1, true, &[0, 1, 2]),
            run(Method::Straightforward, None, 2, true, &[0, 2]),
            run(Method::Disentangled, Some(0.0), 1, true, &[0, 1, 2]),
        ];
        match evaluate_run(&runs) {
            Err(Error::Incomplete { missing }) => {
                assert!(missing.contains(&"sf/alpha=_/k=1/seed=2".to_string()));
                assert!(missing.contains(&"dis/alpha=0/k=0/seed=2".to_string()));
                assert_eq!(missing.len(), 4);
            }
            other => panic!("expected incompleteness, got {other:?}"),
        }
    }

    #[test]
    fn aggregation_over_seeds() {
        let runs = [
            run(Method::Disentangled, Some(0.1), 1, true, &[0, 1, 2]),
            run(Method::Disentangled, Some(0.1), 2, false, &[0, 1, 2]),
        ];
        let r = evaluate_run(&runs).unwrap();
        let a = cell_scores(&runs[0], 0).unwrap();
        let b = cell_scores(&runs[1], 0).unwrap();
        let row = r
            .get(Method::Disentangled, Some(0.1), 0, "METEOR-lite")
            .unwrap();
        let (m, s) = mean_std(&[a[1], b[1]]);
        assert_eq!((row.mean, row.std, row.n_seeds), (m, s, 2));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("method,alpha,k,metric,mean,std,n_seeds\ndis,0.1,0,CIDEr,"));
        assert!(r.to_table().lines().nth(1).unwrap().starts_with("dis"));
    }
}
