//! Precomputed feature files.
//!
//! ```text
//! magic       4 bytes  "MMFT"
//! version     u32      FEATURE_VERSION
//! K           u32
//! audio_dim   u32
//! video_dim   u32
//! count       u64
//! per sample: label u32, audio_dim x f32, video_dim x f32
//! ```
//!
//! Everything is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, MultimodalSample};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(dataset: &Dataset, mut out: impl Write) -> Result<(), DataError> {
    out.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, dataset.num_classes as u32, dataset.audio_dim as u32, dataset.video_dim as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(dataset.samples.len() as u64).to_le_bytes())?;
    for s in &dataset.samples {
        out.write_all(&(s.label as u32).to_le_bytes())?;
        for v in s.audio.iter().chain(&s.video) {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        if self.buf.len() - self.pos < N {
            return Err(DataError::Parse {
                offset: self.buf.len() as u64,
                message: format!("unexpected end of file reading {what}"),
            });
        }
        let out = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
}

pub fn read_features(mut input: impl Read) -> Result<Dataset, DataError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic: [u8; 4] = r.take("magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: "bad magic tag".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(DataError::Parse {
            offset: 4,
            message: format!("unsupported format version {version}"),
        });
    }
    let num_classes = r.u32("K")? as usize;
    let audio_dim = r.u32("audio_dim")? as usize;
    let video_dim = r.u32("video_dim")? as usize;
    let count = u64::from_le_bytes(r.take("count")?);
    if count == 0 {
        return Err(DataError::Empty);
    }
    let mut samples = Vec::new();
    for i in 0..count {
        let at = r.pos as u64;
        let label = r.u32("label")? as usize;
        if label >= num_classes {
            return Err(DataError::Parse {
                offset: at,
                message: format!("sample {i} label {label} outside [0, {num_classes})"),
            });
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>, DataError> {
            (0..n)
                .map(|_| {
                    let at = r.pos as u64;
                    let v = f32::from_le_bytes(r.take("feature")?);
                    if !v.is_finite() {
                        return Err(DataError::Parse {
                            offset: at,
                            message: "non-finite feature".into(),
                        });
                    }
                    Ok(v as f64)
                })
                .collect()
        };
        let audio = read_vec(audio_dim)?;
        let video = read_vec(video_dim)?;
        samples.push(MultimodalSample { audio, video, label });
    }
    if r.pos != buf.len() {
        return Err(DataError::Parse {
            offset: r.pos as u64,
            message: "trailing bytes after last record".into(),
        });
    }
    let dataset = Dataset {
        num_classes,
        audio_dim,
        video_dim,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_features(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_features(dataset, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    read_features(fs::File::open(path)?)
}
