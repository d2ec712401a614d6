//! Sequential recording data model: images, trials grouped into runs and
//! sessions, sliding windows over runs, and the contamination-free split.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Number of consecutive trials in one decoding window (offsets 0, 1, 2).
pub const WINDOW: usize = 3;

/// A stimulus image with its semantic embedding and reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub embedding: Arc<[f32]>,
    pub captions: Vec<String>,
}

/// One recorded trial. The indices are positional and are kept in sync by
/// [`Dataset::push_run`] and the loader.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub session_index: u32,
    pub run_index: u32,
    pub trial_index: u32,
    pub image_id: u64,
    pub fmri: Arc<[f32]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub runs: Vec<Run>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_f: usize,
    pub d_c: usize,
    pub images: Vec<ImageRecord>,
    pub sessions: Vec<Session>,
}

/// Position of a trial inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialRef {
    pub session: u32,
    pub run: u32,
    pub trial: u32,
}

impl std::fmt::Display for TrialRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}/r{}/t{}", self.session, self.run, self.trial)
    }
}

impl Dataset {
    pub fn new(d_f: usize, d_c: usize) -> Self {
        Dataset {
            d_f,
            d_c,
            images: Vec::new(),
            sessions: Vec::new(),
        }
    }

    /// Appends a run of `(image_id, signal)` trials to session `session`,
    /// creating empty sessions as needed. Indices are assigned positionally.
    pub fn push_run(&mut self, session: usize, trials: Vec<(u64, Arc<[f32]>)>) {
        while self.sessions.len() <= session {
            self.sessions.push(Session::default());
        }
        let run_index = self.sessions[session].runs.len() as u32;
        let trials = trials
            .into_iter()
            .enumerate()
            .map(|(i, (image_id, fmri))| Trial {
                session_index: session as u32,
                run_index,
                trial_index: i as u32,
                image_id,
                fmri,
            })
            .collect();
        self.sessions[session].runs.push(Run { trials });
    }

    pub fn image_index(&self) -> HashMap<u64, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.image_id, i))
            .collect()
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.sessions
            .iter()
            .flat_map(|s| s.runs.iter())
            .flat_map(|r| r.trials.iter())
    }

    pub fn n_trials(&self) -> usize {
        self.trials().count()
    }

    /// Checks every structural invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_c == 0 {
            return Err(Error::Validation("d_f and d_c must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(self.images.len());
        for im in &self.images {
            if !ids.insert(im.image_id) {
                return Err(Error::Validation(format!(
                    "duplicate image_id {}",
                    im.image_id
                )));
            }
            if im.embedding.len() != self.d_c {
                return Err(Error::Validation(format!(
                    "image {} has embedding length {} (d_c = {})",
                    im.image_id,
                    im.embedding.len(),
                    self.d_c
                )));
            }
            if im.captions.is_empty() || im.captions.len() > 5 {
                return Err(Error::Validation(format!(
                    "image {} has {} captions (expected 1..=5)",
                    im.image_id,
                    im.captions.len()
                )));
            }
            if let Some(i) = im.captions.iter().position(|c| c.trim().is_empty()) {
                return Err(Error::Validation(format!(
                    "image {} caption {i} is blank",
                    im.image_id
                )));
            }
        }
        for (s, session) in self.sessions.iter().enumerate() {
            for (r, run) in session.runs.iter().enumerate() {
                for (t, trial) in run.trials.iter().enumerate() {
                    let at = TrialRef {
                        session: s as u32,
                        run: r as u32,
                        trial: t as u32,
                    };
                    if trial.session_index as usize != s
                        || trial.run_index as usize != r
                        || trial.trial_index as usize != t
                    {
                        return Err(Error::Validation(format!(
                            "trial at {at} carries indices s{}/r{}/t{}",
                            trial.session_index, trial.run_index, trial.trial_index
                        )));
                    }
                    if trial.fmri.len() != self.d_f {
                        return Err(Error::Validation(format!(
                            "trial {at} has signal length {} (d_f = {})",
                            trial.fmri.len(),
                            self.d_f
                        )));
                    }
                    if !ids.contains(&trial.image_id) {
                        return Err(Error::Validation(format!(
                            "trial {at} references unknown image_id {}",
                            trial.image_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One decoding task instance: the signal at `t`, the signal at `t-1`, and the
/// stimuli at `t`, `t-1`, `t-2` (in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub anchor: TrialRef,
    pub fmri_t: Arc<[f32]>,
    pub fmri_prev: Arc<[f32]>,
    pub target_image_ids: [u64; WINDOW],
    pub target_embeddings: [Arc<[f32]>; WINDOW],
}

impl WindowSample {
    pub fn contains_any(&self, marked: &HashSet<u64>) -> bool {
        self.target_image_ids.iter().any(|id| marked.contains(id))
    }
}

/// Builds one window per trial that has `window - 1` predecessors in the same
/// run. Only `window == 3` matches the [`WindowSample`] layout.
pub fn build_windows(dataset: &Dataset, window: usize) -> Result<Vec<WindowSample>> {
    if window != WINDOW {
        return Err(Error::InvalidArgument(format!(
            "window size {window} is not supported (only {WINDOW})"
        )));
    }
    let index = dataset.image_index();
    let mut out = Vec::new();
    for session in &dataset.sessions {
        for run in &session.runs {
            for trial in &run.trials {
                if !index.contains_key(&trial.image_id) {
                    return Err(Error::Validation(format!(
                        "trial s{}/r{}/t{} references unknown image_id {}",
                        trial.session_index, trial.run_index, trial.trial_index, trial.image_id
                    )));
                }
            }
            for t in (window - 1)..run.trials.len() {
                let cur = &run.trials[t];
                let ids = [
                    cur.image_id,
                    run.trials[t - 1].image_id,
                    run.trials[t - 2].image_id,
                ];
                let embeddings = ids.map(|id| Arc::clone(&dataset.images[index[&id]].embedding));
                out.push(WindowSample {
                    anchor: TrialRef {
                        session: cur.session_index,
                        run: cur.run_index,
                        trial: cur.trial_index,
                    },
                    fmri_t: Arc::clone(&cur.fmri),
                    fmri_prev: Arc::clone(&run.trials[t - 1].fmri),
                    target_image_ids: ids,
                    target_embeddings: embeddings,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Every image id that appears in a test window.
    pub marked: HashSet<u64>,
    /// Windows dropped from train because they touch a marked image.
    pub discarded: usize,
}

/// Draws `m` test windows uniformly without replacement, marks their images,
/// and keeps as training data only the windows that touch no marked image.
///
/// Windows are sorted by anchor first, so the result does not depend on the
/// input order. Both halves come back sorted by anchor.
pub fn split_contamination_free(windows: &[WindowSample], cfg: &SplitConfig) -> Result<Split> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows to split".into()));
    }
    if cfg.m == 0 || cfg.m >= windows.len() {
        return Err(Error::InvalidArgument(format!(
            "test size m = {} must be in 1..{}",
            cfg.m,
            windows.len()
        )));
    }
    let mut sorted: Vec<&WindowSample> = windows.iter().collect();
    sorted.sort_by_key(|w| w.anchor);

    let mut stream = Stream::new(cfg.seed, rng::SPLIT);
    let order = stream.permutation(sorted.len());
    let mut is_test = vec![false; sorted.len()];
    for &i in &order[..cfg.m] {
        is_test[i] = true;
    }

    let mut marked = HashSet::new();
    let mut test = Vec::with_capacity(cfg.m);
    for (w, _) in sorted.iter().zip(&is_test).filter(|(_, &t)| t) {
        marked.extend(w.target_image_ids);
        test.push((*w).clone());
    }
    let mut train = Vec::new();
    let mut discarded = 0;
    for (w, _) in sorted.iter().zip(&is_test).filter(|(_, &t)| !t) {
        if w.contains_any(&marked) {
            discarded += 1;
        } else {
            train.push((*w).clone());
        }
    }
    if train.is_empty() {
        return Err(Error::OverContaminated {
            test: cfg.m,
            windows: windows.len(),
        });
    }
    Ok(Split {
        train,
        test,
        marked,
        discarded,
    })
}

/// Moves `m` uniformly chosen windows out of `train` into a validation set
/// (stream `"validation"`). Both outputs keep anchor order.
pub fn carve_validation(
    train: Vec<WindowSample>,
    m: usize,
    seed: u64,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    if m >= train.len() {
        return Err(Error::OverContaminated {
            test: m,
            windows: train.len(),
        });
    }
    let mut stream = Stream::new(seed, "validation");
    let order = stream.permutation(train.len());
    let mut is_val = vec![false; train.len()];
    for &i in &order[..m] {
        is_val[i] = true;
    }
    let (val, rest): (Vec<_>, Vec<_>) = train.into_iter().zip(is_val).partition(|(_, v)| *v);
    Ok((
        rest.into_iter().map(|(w, _)| w).collect(),
        val.into_iter().map(|(w, _)| w).collect(),
    ))
}

pub fn image_ids<'a>(windows: impl IntoIterator<Item = &'a WindowSample>) -> HashSet<u64> {
    windows
        .into_iter()
        .flat_map(|w| w.target_image_ids)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(x: f32, n: usize) -> Arc<[f32]> {
        vec![x; n].into()
    }

    /// One image per trial unless `ids` says otherwise; runs given as image-id lists.
    fn dataset_from_runs(runs: &[Vec<u64>]) -> Dataset {
        let mut ds = Dataset::new(2, 2);
        let mut seen = HashSet::new();
        for run in runs {
            for &id in run {
                if seen.insert(id) {
                    ds.images.push(ImageRecord {
                        image_id: id,
                        embedding: vec![id as f32, 1.0].into(),
                        captions: vec![format!("image {id}")],
                    });
                }
            }
            let trials = run.iter().map(|&id| (id, vec_of(id as f32, 2))).collect();
            ds.push_run(0, trials);
        }
        ds
    }

    #[test]
    fn five_trial_run_gives_three_windows() {
        let ds = dataset_from_runs(&[vec![0, 1, 2, 3, 4]]);
        let w = build_windows(&ds, 3).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(
            w.iter().map(|w| w.anchor.trial).collect::<Vec<_>>(),
            vec![2, 3, 4]
        );
        assert_eq!(w[0].target_image_ids, [2, 1, 0]);
        assert_eq!(&*w[0].fmri_prev, &[1.0, 1.0]);
        assert_eq!(&*w[0].target_embeddings[2], &[0.0, 1.0]);
    }

    #[test]
    fn short_runs_give_no_windows() {
        let ds = dataset_from_runs(&[vec![0, 1], vec![2, 3]]);
        assert!(build_windows(&ds, 3).unwrap().is_empty());
    }

    #[test]
    fn nsd_sized_run() {
        let ds = dataset_from_runs(&[(0..62).collect()]);
        assert_eq!(build_windows(&ds, 3).unwrap().len(), 60);
    }

    #[test]
    fn dangling_image_is_named() {
        let mut ds = dataset_from_runs(&[vec![0, 1, 2]]);
        ds.sessions[0].runs[0].trials[1].image_id = 99;
        let err = build_windows(&ds, 3).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("s0/r0/t1") && msg.contains("99"), "{msg}");
        assert!(ds.validate().is_err());
    }

    #[test]
    fn other_window_sizes_rejected() {
        let ds = dataset_from_runs(&[vec![0, 1, 2, 3]]);
        assert!(build_windows(&ds, 2).is_err());
    }

    #[test]
    fn disjoint_images_lose_nothing() {
        // 10 windows over disjoint images: runs of 3 trials each.
        let runs: Vec<Vec<u64>> = (0..10).map(|r| vec![3 * r, 3 * r + 1, 3 * r + 2]).collect();
        let ds = dataset_from_runs(&runs);
        let w = build_windows(&ds, 3).unwrap();
        assert_eq!(w.len(), 10);
        let split = split_contamination_free(&w, &SplitConfig { m: 2, seed: 5 }).unwrap();
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.discarded, 0);
    }

    #[test]
    fn full_overlap_is_over_contaminated() {
        let runs: Vec<Vec<u64>> = (0..4).map(|_| vec![0, 1, 2]).collect();
        let ds = dataset_from_runs(&runs);
        let w = build_windows(&ds, 3).unwrap();
        let err = split_contamination_free(&w, &SplitConfig { m: 1, seed: 0 }).unwrap_err();
        assert!(matches!(err, Error::OverContaminated { .. }));
    }

    #[test]
    fn m_must_be_smaller_than_window_count() {
        let ds = dataset_from_runs(&[vec![0, 1, 2, 3]]);
        let w = build_windows(&ds, 3).unwrap();
        assert!(matches!(
            split_contamination_free(&w, &SplitConfig { m: 2, seed: 0 }),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn split_ignores_input_order() {
        let runs: Vec<Vec<u64>> = (0..20)
            .map(|r| vec![3 * r, 3 * r + 1, 3 * r + 2, 3 * r])
            .collect();
        let ds = dataset_from_runs(&runs);
        let w = build_windows(&ds, 3).unwrap();
        let mut rev = w.clone();
        rev.reverse();
        let cfg = SplitConfig { m: 4, seed: 9 };
        let a = split_contamination_free(&w, &cfg).unwrap();
        let b = split_contamination_free(&rev, &cfg).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn validation_carve_is_disjoint() {
        let runs: Vec<Vec<u64>> = (0..10).map(|r| vec![3 * r, 3 * r + 1, 3 * r + 2]).collect();
        let w = build_windows(&dataset_from_runs(&runs), 3).unwrap();
        let (rest, val) = carve_validation(w.clone(), 3, 1).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(rest.len(), 7);
        assert!(val.iter().all(|v| !rest.contains(v)));
    }
}
