//! Caption retrieval: predicted embeddings are mapped to the caption of the
//! most similar training image.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TrialRef, WindowSample, WINDOW};
use crate::error::{Error, Result};
use crate::model::{predict, Decoder};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub image_id: u64,
    pub embedding: Arc<[f32]>,
    pub caption: String,
}

/// Training-side images and their first captions, sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBank {
    entries: Vec<BankEntry>,
    /// Unit-normalized embeddings, one column per entry.
    unit: DMatrix<f64>,
}

impl CaptionBank {
    pub fn from_entries(mut entries: Vec<BankEntry>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| {
            Error::InvalidArgument("caption bank needs at least one entry".into())
        })?;
        let d = first.embedding.len();
        entries.sort_by_key(|e| e.image_id);
        entries.dedup_by_key(|e| e.image_id);
        let mut unit = DMatrix::zeros(d, entries.len());
        for (j, e) in entries.iter().enumerate() {
            if e.embedding.len() != d {
                return Err(Error::dims(
                    format!("bank embedding of image {}", e.image_id),
                    d,
                    e.embedding.len(),
                ));
            }
            let mut col = unit.column_mut(j);
            for (dst, &v) in col.iter_mut().zip(e.embedding.iter()) {
                *dst = f64::from(v);
            }
            let n = col.norm();
            if n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "bank embedding of image {} has zero norm",
                    e.image_id
                )));
            }
            col /= n;
        }
        Ok(CaptionBank { entries, unit })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.unit.nrows()
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.entries
            .binary_search_by_key(&image_id, |e| e.image_id)
            .is_ok()
    }
}

/// One entry per distinct image referenced by the training windows (any
/// offset), captioned with the image's first caption.
pub fn build_bank(dataset: &Dataset, train: &[WindowSample]) -> Result<CaptionBank> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a caption bank from zero training windows".into(),
        ));
    }
    let index = dataset.image_index();
    let mut seen = BTreeMap::new();
    for w in train {
        for &id in &w.target_image_ids {
            if seen.contains_key(&id) {
                continue;
            }
            let &i = index.get(&id).ok_or_else(|| {
                Error::Validation(format!("window {} references unknown image {id}", w.anchor))
            })?;
            let im = &dataset.images[i];
            seen.insert(
                id,
                BankEntry {
                    image_id: id,
                    embedding: im.embedding.clone(),
                    caption: im.captions.first().cloned().unwrap_or_default(),
                },
            );
        }
    }
    CaptionBank::from_entries(seen.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub caption: String,
    pub image_id: u64,
    pub similarity: f64,
}

/// Entry with the highest cosine similarity to `pred`; ties go to the
/// lowest image id.
pub fn nearest_caption(pred: &[f64], bank: &CaptionBank) -> Result<Retrieval> {
    let j = nearest_index(pred, bank)?;
    let e = &bank.entries[j.0];
    Ok(Retrieval {
        caption: e.caption.clone(),
        image_id: e.image_id,
        similarity: j.1,
    })
}

fn nearest_index(pred: &[f64], bank: &CaptionBank) -> Result<(usize, f64)> {
    if pred.len() != bank.dim() {
        return Err(Error::dims("prediction width", bank.dim(), pred.len()));
    }
    let norm = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(
            "prediction has zero or non-finite norm".into(),
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, col) in bank.unit.column_iter().enumerate() {
        let s: f64 = col.iter().zip(pred).map(|(a, b)| a * b).sum::<f64>() / norm;
        // strict comparison keeps the earliest (lowest id) entry on ties
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best)
}

/// Retrieval for offsets 0, 1, 2 in that order.
pub fn decode_window<P: AsRef<[f64]>>(
    preds: &[P; WINDOW],
    bank: &CaptionBank,
) -> Result<[Retrieval; WINDOW]> {
    let [a, b, c] = preds;
    Ok([
        nearest_caption(a.as_ref(), bank)?,
        nearest_caption(b.as_ref(), bank)?,
        nearest_caption(c.as_ref(), bank)?,
    ])
}

/// One decoded caption; serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub anchor: TrialRef,
    pub k: usize,
    pub predicted_caption: String,
    pub true_captions: Vec<String>,
    pub true_image_id: u64,
    pub retrieved_image_id: u64,
    pub similarity: f64,
}

/// Runs `model` on every test window and retrieves a caption per offset.
/// Records are ordered by window, then by `k`.
pub fn decode_windows(
    model: &Decoder,
    dataset: &Dataset,
    test: &[WindowSample],
    bank: &CaptionBank,
) -> Result<Vec<DecodedRecord>> {
    let arch = model.architecture();
    if arch.d_f != dataset.d_f {
        return Err(Error::dims(
            "checkpoint signal width (d_f) vs dataset",
            dataset.d_f,
            arch.d_f,
        ));
    }
    if arch.d_c != dataset.d_c {
        return Err(Error::dims(
            "checkpoint embedding width (d_c) vs dataset",
            dataset.d_c,
            arch.d_c,
        ));
    }
    if bank.dim() != arch.d_c {
        return Err(Error::dims("caption bank width", arch.d_c, bank.dim()));
    }
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let preds = predict(model, test)?;
    let index = dataset.image_index();
    let mut out = Vec::with_capacity(test.len() * WINDOW);
    for (i, w) in test.iter().enumerate() {
        for (k, p) in preds.iter().enumerate() {
            let col: Vec<f64> = p.column(i).iter().copied().collect();
            let r = nearest_caption(&col, bank)?;
            let id = w.target_image_ids[k];
            out.push(DecodedRecord {
                anchor: w.anchor,
                k,
                predicted_caption: r.caption,
                true_captions: dataset.images[index[&id]].captions.clone(),
                true_image_id: id,
                retrieved_image_id: r.image_id,
                similarity: r.similarity,
            });
        }
    }
    Ok(out)
}

/// Fraction of windows at each offset whose retrieved image is the bank
/// entry nearest to the true target embedding. Test images are never in the
/// bank, so this is the best attainable hit.
pub fn retrieval_accuracy(
    records: &[DecodedRecord],
    dataset: &Dataset,
    bank: &CaptionBank,
) -> Result<[f64; WINDOW]> {
    let index = dataset.image_index();
    let mut hits = [0usize; WINDOW];
    let mut totals = [0usize; WINDOW];
    let mut oracle = BTreeMap::new();
    for r in records {
        if r.k >= WINDOW {
            return Err(Error::InvalidArgument(format!(
                "record offset {} out of range",
                r.k
            )));
        }
        let best = match oracle.get(&r.true_image_id) {
            Some(&b) => b,
            None => {
                let &i = index.get(&r.true_image_id).ok_or_else(|| {
                    Error::Validation(format!("unknown image {}", r.true_image_id))
                })?;
                let e: Vec<f64> = dataset.images[i]
                    .embedding
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                let b = bank.entries[nearest_index(&e, bank)?.0].image_id;
                oracle.insert(r.true_image_id, b);
                b
            }
        };
        totals[r.k] += 1;
        if r.retrieved_image_id == best {
            hits[r.k] += 1;
        }
    }
    Ok(std::array::from_fn(|k| {
        if totals[k] == 0 {
            0.0
        } else {
            hits[k] as f64 / totals[k] as f64
        }
    }))
}

pub fn write_jsonl(records: &[DecodedRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<DecodedRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("decoded record on line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, e: &[f32], cap: &str) -> BankEntry {
        BankEntry {
            image_id: id,
            embedding: e.into(),
            caption: cap.into(),
        }
    }

    fn bank() -> CaptionBank {
        CaptionBank::from_entries(vec![
            entry(7, &[1.0, 0.0, 0.0], "seven"),
            entry(3, &[0.0, 1.0, 0.0], "three"),
            entry(5, &[0.6, 0.8, 0.0], "five"),
        ])
        .unwrap()
    }

    #[test]
    fn exact_embedding_is_retrieved_with_similarity_one() {
        let r = nearest_caption(&[0.6, 0.8, 0.0], &bank()).unwrap();
        assert_eq!((r.image_id, r.caption.as_str()), (5, "five"));
        assert!((r.similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_image_id() {
        let b = CaptionBank::from_entries(vec![
            entry(9, &[1.0, 1.0], "nine"),
            entry(4, &[2.0, 2.0], "four"),
        ])
        .unwrap();
        assert_eq!(nearest_caption(&[1.0, 1.0], &b).unwrap().image_id, 4);
    }

    #[test]
    fn midpoint_query_matches_linear_scan() {
        // midpoint of e1 and (0.6, 0.8): cosine with "five" beats "seven"
        let q = [0.8, 0.4, 0.0];
        let b = bank();
        let mut best = (0u64, f64::NEG_INFINITY);
        for e in b.entries() {
            let v: Vec<f64> = e.embedding.iter().map(|&x| x as f64).collect();
            let s = crate::model::cosine_sim(&q, &v).unwrap();
            if s > best.1 {
                best = (e.image_id, s);
            }
        }
        let r = nearest_caption(&q, &b).unwrap();
        assert_eq!(r.image_id, best.0);
        assert!((r.similarity - best.1).abs() < 1e-12);
    }

    #[test]
    fn zero_prediction_is_degenerate() {
        assert!(matches!(
            nearest_caption(&[0.0; 3], &bank()),
            Err(Error::Degenerate(_))
        ));
        let zeros = [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]];
        assert!(decode_window(&zeros, &bank()).is_err());
    }

    #[test]
    fn perfect_predictions_recover_every_offset() {
        let preds = [
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.6, 0.8, 0.0],
        ];
        let out = decode_window(&preds, &bank()).unwrap();
        let caps: Vec<&str> = out.iter().map(|r| r.caption.as_str()).collect();
        assert_eq!(caps, ["three", "seven", "five"]);
    }

    #[test]
    fn duplicate_entries_collapse() {
        let b = CaptionBank::from_entries(vec![
            entry(1, &[1.0], "a"),
            entry(1, &[1.0], "a"),
            entry(2, &[1.0], "b"),
        ])
        .unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.contains(1) && !b.contains(3));
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = DecodedRecord {
            anchor: TrialRef {
                session: 0,
                run: 1,
                trial: 4,
            },
            k: 2,
            predicted_caption: "a red cat".into(),
            true_captions: vec!["a blue dog".into()],
            true_image_id: 11,
            retrieved_image_id: 3,
            similarity: 0.25,
        };
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![rec]);
    }
}
