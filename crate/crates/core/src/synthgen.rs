//! Synthetic sequential-stimulus datasets with a known memory trace.
//!
//! Each signal is a linear mixture of the current and recent stimulus
//! embeddings plus white noise:
//!
//! `F_t = A · Σ_k w_k · C_{t-k} + ε_t`,
//!
//! with past terms truncated at the start of every run. The decay weights
//! `w_k` are the ground truth that the retention analyses should recover.
//!
//! Random draws use separate streams: `"concepts"` (embeddings and captions),
//! `"schedule"` (trial order), `"mixing"` (the matrix `A`) and `"noise"`
//! (`ε`), all keyed by the config seed.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const ADJECTIVES: &[&str] = &[
    "small", "large", "red", "blue", "green", "white", "black", "brown", "young", "tall",
    "striped", "spotted", "wooden", "shiny", "dusty", "quiet", "busy", "tiny", "golden", "pale",
];
const NOUNS: &[&str] = &[
    "dog",
    "cat",
    "horse",
    "giraffe",
    "cow",
    "man",
    "woman",
    "child",
    "bus",
    "train",
    "truck",
    "bicycle",
    "boat",
    "airplane",
    "bird",
    "elephant",
    "zebra",
    "sheep",
    "pizza",
    "cake",
    "clock",
    "kite",
    "umbrella",
    "laptop",
    "bench",
    "teddy bear",
    "motorcycle",
    "surfer",
    "skier",
    "vase",
];
const VERB_PHRASES: &[&str] = &[
    "standing",
    "sitting",
    "running",
    "sleeping",
    "parked",
    "resting",
    "waiting",
    "walking",
    "lying down",
    "looking around",
    "eating grass",
    "flying high",
    "crossing the road",
    "playing with a ball",
    "next to a fence",
    "covered in snow",
    "under a tree",
    "holding a frisbee",
    "facing the camera",
    "drinking water",
];
const LOCATIONS: &[&str] = &[
    "in a field",
    "on a street",
    "near the beach",
    "in a kitchen",
    "by the river",
    "at the station",
    "in the park",
    "on a table",
    "in a living room",
    "at the airport",
    "on a hill",
    "in the snow",
    "at night",
    "in the city",
    "on a farm",
    "near a lake",
    "in a forest",
    "on the grass",
    "by a window",
    "in the desert",
];

/// Generator settings. Serialized as JSON with these exact field names;
/// omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_images: usize,
    pub d_f: usize,
    pub d_c: usize,
    pub n_sessions: usize,
    pub runs_per_session: usize,
    pub trials_per_run: usize,
    pub repeats: usize,
    pub decay_weights: Vec<f64>,
    pub noise_sigma: f64,
    pub captions_per_image: usize,
    /// Fraction of embedding variance carried by the caption's words; the rest
    /// is image-specific. Zero gives i.i.d. embeddings.
    pub semantic_share: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_images: 1984,
            d_f: 2048,
            d_c: 512,
            n_sessions: 8,
            runs_per_session: 12,
            trials_per_run: 62,
            repeats: 3,
            decay_weights: vec![1.0, 0.6, 0.3, 0.1],
            noise_sigma: 0.5,
            captions_per_image: 1,
            semantic_share: 0.5,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn slots(&self) -> usize {
        self.n_sessions * self.runs_per_session * self.trials_per_run
    }

    /// Sets `n_images` so that the schedule exactly fills all slots (rounding
    /// down), for configs built by hand.
    pub fn with_filled_images(mut self) -> Self {
        self.n_images = self.slots() / self.repeats.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_images", self.n_images),
            ("d_f", self.d_f),
            ("d_c", self.d_c),
            ("n_sessions", self.n_sessions),
            ("runs_per_session", self.runs_per_session),
            ("trials_per_run", self.trials_per_run),
            ("repeats", self.repeats),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.repeats * self.n_images != self.slots() {
            return Err(Error::config(
                "repeats, n_images",
                format!(
                    "repeats x n_images = {} x {} = {} must equal n_sessions x runs_per_session x trials_per_run = {} x {} x {} = {}",
                    self.repeats,
                    self.n_images,
                    self.repeats * self.n_images,
                    self.n_sessions,
                    self.runs_per_session,
                    self.trials_per_run,
                    self.slots()
                ),
            ));
        }
        match self.decay_weights.first() {
            Some(&w0) if w0 > 0.0 => {}
            _ => return Err(Error::config("decay_weights", "w_0 must be > 0")),
        }
        if self
            .decay_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::config(
                "decay_weights",
                "weights must be finite and >= 0",
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(1..=5).contains(&self.captions_per_image) {
            return Err(Error::config("captions_per_image", "must be in 1..=5"));
        }
        if !(0.0..=1.0).contains(&self.semantic_share) {
            return Err(Error::config("semantic_share", "must be in [0, 1]"));
        }
        let space = ADJECTIVES.len() * NOUNS.len() * VERB_PHRASES.len() * LOCATIONS.len();
        if self.n_images > space {
            return Err(Error::config(
                "n_images",
                format!("at most {space} distinct captions are available"),
            ));
        }
        Ok(())
    }
}

fn caption_variant(variant: usize, words: [&str; 4]) -> String {
    let [adj, noun, verb, loc] = words;
    match variant {
        0 => format!("a {adj} {noun} {verb} {loc}"),
        1 => format!("there is a {adj} {noun} {verb} {loc}"),
        2 => format!("{loc}, a {adj} {noun} {verb}"),
        3 => format!("a photo of a {adj} {noun} {verb} {loc}"),
        _ => format!("the {noun} is {adj} and {verb} {loc}"),
    }
}

/// Word vectors for one slot of the caption grammar, centered so that the
/// slot contributes no common direction to the embeddings.
fn word_vectors(stream: &mut Stream, n_words: usize, d: usize) -> Vec<Vec<f64>> {
    let mut vs: Vec<Vec<f64>> = (0..n_words)
        .map(|_| (0..d).map(|_| stream.next_normal()).collect())
        .collect();
    let mut mean = vec![0.0; d];
    for v in &vs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n_words as f64;
        }
    }
    for v in &mut vs {
        for (x, m) in v.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    vs
}

/// Draws `n_images` stimuli with unit-norm embeddings and grammar captions.
///
/// Each image gets a distinct (adjective, noun, verb phrase, location) tuple.
/// Its embedding is `normalize(√(1-s)·g + √(s/4)·Σ u_word)` where `g` is an
/// image-specific Gaussian and the `u_word` are shared per-word Gaussians, so
/// images with overlapping captions have correlated embeddings.
pub fn gen_concepts(cfg: &GenConfig) -> Result<Vec<ImageRecord>> {
    cfg.validate()?;
    let d = cfg.d_c;
    let mut stream = Stream::new(cfg.seed, "concepts");
    let lists = [ADJECTIVES, NOUNS, VERB_PHRASES, LOCATIONS];
    let words: Vec<Vec<Vec<f64>>> = lists
        .iter()
        .map(|l| word_vectors(&mut stream, l.len(), d))
        .collect();
    let own = (1.0 - cfg.semantic_share).sqrt();
    let shared = (cfg.semantic_share / 4.0).sqrt();

    let mut used = HashSet::with_capacity(cfg.n_images);
    let mut out = Vec::with_capacity(cfg.n_images);
    for image_id in 0..cfg.n_images as u64 {
        let choice = loop {
            let c = [
                stream.below(ADJECTIVES.len()),
                stream.below(NOUNS.len()),
                stream.below(VERB_PHRASES.len()),
                stream.below(LOCATIONS.len()),
            ];
            if used.insert(c) {
                break c;
            }
        };
        let mut e: Vec<f64> = (0..d).map(|_| own * stream.next_normal()).collect();
        for (slot, &w) in choice.iter().enumerate() {
            for (x, u) in e.iter_mut().zip(&words[slot][w]) {
                *x += shared * u;
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        let embedding: Arc<[f32]> = e.iter().map(|x| (x / norm) as f32).collect();
        let text = [
            ADJECTIVES[choice[0]],
            NOUNS[choice[1]],
            VERB_PHRASES[choice[2]],
            LOCATIONS[choice[3]],
        ];
        let captions = (0..cfg.captions_per_image)
            .map(|v| caption_variant(v, text))
            .collect();
        out.push(ImageRecord {
            image_id,
            embedding,
            captions,
        });
    }
    Ok(out)
}

/// Image order for every session, run and trial: `sessions[s][r][t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub sessions: Vec<Vec<Vec<u64>>>,
}

impl Schedule {
    pub fn appearances(&self) -> std::collections::BTreeMap<u64, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for id in self.sessions.iter().flatten().flatten() {
            *counts.entry(*id).or_insert(0) += 1;
        }
        counts
    }
}

/// Shuffles the multiset in which every image appears `repeats` times and
/// cuts it into sessions and runs.
pub fn gen_schedule(cfg: &GenConfig) -> Result<Schedule> {
    cfg.validate()?;
    let mut ids: Vec<u64> = (0..cfg.n_images as u64)
        .flat_map(|id| std::iter::repeat_n(id, cfg.repeats))
        .collect();
    Stream::new(cfg.seed, rng::SCHEDULE).shuffle(&mut ids);
    let sessions = ids
        .chunks(cfg.runs_per_session * cfg.trials_per_run)
        .map(|s| s.chunks(cfg.trials_per_run).map(<[u64]>::to_vec).collect())
        .collect();
    Ok(Schedule { sessions })
}

/// Signal model: a fixed mixing matrix plus the memory decay weights.
#[derive(Debug, Clone)]
pub struct MixingModel {
    /// `d_f x d_c`, entries i.i.d. standard normal.
    pub a: DMatrix<f64>,
    pub decay_weights: Vec<f64>,
    pub noise_sigma: f64,
}

impl MixingModel {
    pub fn sample(cfg: &GenConfig) -> Self {
        let mut stream = Stream::new(cfg.seed, "mixing");
        // Row-major draw order, so the matrix does not depend on storage layout.
        let mut a = DMatrix::zeros(cfg.d_f, cfg.d_c);
        for i in 0..cfg.d_f {
            for j in 0..cfg.d_c {
                a[(i, j)] = stream.next_normal();
            }
        }
        MixingModel {
            a,
            decay_weights: cfg.decay_weights.clone(),
            noise_sigma: cfg.noise_sigma,
        }
    }
}

/// Renders signals for a schedule. Noise is drawn trial by trial in
/// (session, run, trial) order from the `"noise"` stream of `seed`.
pub fn gen_signals(
    schedule: &Schedule,
    concepts: &[ImageRecord],
    model: &MixingModel,
    seed: u64,
) -> Result<Dataset> {
    let (d_f, d_c) = model.a.shape();
    let index: std::collections::HashMap<u64, usize> = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.image_id, i))
        .collect();
    if let Some(c) = concepts.iter().find(|c| c.embedding.len() != d_c) {
        return Err(Error::dims(
            format!("embedding of image {}", c.image_id),
            d_c,
            c.embedding.len(),
        ));
    }
    let mut noise = Stream::new(seed, rng::NOISE);
    let mut ds = Dataset::new(d_f, d_c);
    ds.images = concepts.to_vec();
    for (s, session) in schedule.sessions.iter().enumerate() {
        for run in session {
            let mut mixtures = DMatrix::<f64>::zeros(d_c, run.len());
            for t in 0..run.len() {
                for (k, &w) in model.decay_weights.iter().enumerate() {
                    if k > t || w == 0.0 {
                        continue;
                    }
                    let id = run[t - k];
                    let &i = index.get(&id).ok_or_else(|| {
                        Error::Validation(format!("schedule references unknown image_id {id}"))
                    })?;
                    for (j, &c) in concepts[i].embedding.iter().enumerate() {
                        mixtures[(j, t)] += w * f64::from(c);
                    }
                }
            }
            let clean = &model.a * mixtures;
            let trials = run
                .iter()
                .enumerate()
                .map(|(t, &id)| {
                    let fmri: Arc<[f32]> = clean
                        .column(t)
                        .iter()
                        .map(|&x| {
                            let e = if model.noise_sigma > 0.0 {
                                model.noise_sigma * noise.next_normal()
                            } else {
                                0.0
                            };
                            (x + e) as f32
                        })
                        .collect();
                    (id, fmri)
                })
                .collect();
            ds.push_run(s, trials);
        }
    }
    Ok(ds)
}

/// Full generation: concepts, schedule, mixing model and signals.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let concepts = gen_concepts(cfg)?;
    let schedule = gen_schedule(cfg)?;
    let model = MixingModel::sample(cfg);
    gen_signals(&schedule, &concepts, &model, cfg.seed)
}

/// The decay weights padded with zeros (or truncated) to `max_k + 1` entries.
pub fn expected_retention_curve(cfg: &GenConfig, max_k: usize) -> Vec<f64> {
    (0..=max_k)
        .map(|k| cfg.decay_weights.get(k).copied().unwrap_or(0.0))
        .collect()
}
