//! MDST dataset files.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "MDST" | u32 version=1 | u32 d_f | u32 d_c | u64 n_images | u64 n_sessions
//! n_images x { u64 image_id | d_c x f32 | u16 n_captions | n_captions x { u32 len | utf-8 } }
//! n_sessions x { u32 n_runs | n_runs x { u32 n_trials | n_trials x { u64 image_id | d_f x f32 } } }
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::dataset::{Dataset, ImageRecord};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MDST";
pub const VERSION: u32 = 1;

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(ds.d_f, "d_f")?.to_le_bytes());
    out.extend_from_slice(&narrow(ds.d_c, "d_c")?.to_le_bytes());
    out.extend_from_slice(&(ds.images.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.sessions.len() as u64).to_le_bytes());
    for im in &ds.images {
        if im.embedding.len() != ds.d_c {
            return Err(Error::dims(
                format!("embedding of image {}", im.image_id),
                ds.d_c,
                im.embedding.len(),
            ));
        }
        out.extend_from_slice(&im.image_id.to_le_bytes());
        put_f32s(&mut out, &im.embedding);
        let n_caps = u16::try_from(im.captions.len())
            .map_err(|_| Error::InvalidArgument("too many captions".into()))?;
        out.extend_from_slice(&n_caps.to_le_bytes());
        for cap in &im.captions {
            out.extend_from_slice(&narrow(cap.len(), "caption length")?.to_le_bytes());
            out.extend_from_slice(cap.as_bytes());
        }
    }
    for session in &ds.sessions {
        out.extend_from_slice(&narrow(session.runs.len(), "run count")?.to_le_bytes());
        for run in &session.runs {
            out.extend_from_slice(&narrow(run.trials.len(), "trial count")?.to_le_bytes());
            for trial in &run.trials {
                if trial.fmri.len() != ds.d_f {
                    return Err(Error::dims("trial signal", ds.d_f, trial.fmri.len()));
                }
                out.extend_from_slice(&trial.image_id.to_le_bytes());
                put_f32s(&mut out, &trial.fmri);
            }
        }
    }
    Ok(out)
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                context: context.to_string(),
            }),
        }
    }

    fn u16(&mut self, ctx: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, ctx: &str) -> Result<Arc<[f32]>, FormatError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| FormatError::Malformed(format!("{ctx}: vector length overflows")))?,
            ctx,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        });
    }
    let d_f = r.u32("d_f")? as usize;
    let d_c = r.u32("d_c")? as usize;
    let n_images = r.u64("image count")?;
    let n_sessions = r.u64("session count")?;

    let mut ds = Dataset::new(d_f, d_c);
    // Counts come from untrusted input; grow incrementally instead of
    // reserving up front.
    for i in 0..n_images {
        let ctx = format!("image {i}");
        let image_id = r.u64(&ctx)?;
        let embedding = r.f32s(d_c, &ctx)?;
        let n_caps = r.u16(&ctx)?;
        let mut captions = Vec::new();
        for c in 0..n_caps as usize {
            let len = r.u32(&ctx)? as usize;
            let bytes = r.take(len, &ctx)?;
            let s = std::str::from_utf8(bytes).map_err(|_| FormatError::InvalidUtf8 {
                image_id,
                caption: c,
            })?;
            captions.push(s.to_owned());
        }
        ds.images.push(ImageRecord {
            image_id,
            embedding,
            captions,
        });
    }
    for s in 0..n_sessions as usize {
        let n_runs = r.u32(&format!("session {s}"))?;
        if n_runs == 0 {
            ds.sessions.push(Default::default());
        }
        for run in 0..n_runs {
            let ctx = format!("session {s} run {run}");
            let n_trials = r.u32(&ctx)?;
            let mut trials = Vec::new();
            for _ in 0..n_trials {
                let image_id = r.u64(&ctx)?;
                trials.push((image_id, r.f32s(d_f, &ctx)?));
            }
            ds.push_run(s, trials);
        }
    }
    if r.pos != buf.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ds)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
