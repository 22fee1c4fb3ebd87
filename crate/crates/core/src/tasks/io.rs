use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Annotation, Corpus, Utterance};
use super::spec::TaskSpec;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `FMFT` read as a little-endian `u32`.
pub const FEATURE_MAGIC: u32 = u32::from_le_bytes(*b"FMFT");
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Writes `(frames, dim)` features as a 16-byte header followed by
/// row-major little-endian `f32`.
pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::format(path, format!("{what} {v} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * features.len());
    buf.extend_from_slice(&FEATURE_MAGIC.to_le_bytes());
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(features.rows(), "frames")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(features.cols(), "feature_dim")?.to_le_bytes());
    for &x in features.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    if word(1) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(1))));
    }
    let (frames, dim) = (word(2) as usize, word(3) as usize);
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "size overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("{} payload bytes for {frames}x{dim} frames", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![frames, dim], data)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub symbols: Vec<usize>,
    pub annotations: Vec<Annotation>,
    pub durations: Vec<usize>,
    pub inserted_frames: Vec<usize>,
    pub z_f: String,
    /// Path of the feature file, relative to the manifest.
    pub features: String,
}

const MANIFEST: &str = "manifest.jsonl";
const TASK_FILE: &str = "task.json";

/// Writes `task.json`, `manifest.jsonl` and `features/<id>.bin` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    fs::write(dir.join(TASK_FILE), serde_json::to_string_pretty(&corpus.spec)?)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    let splits = [("train", &corpus.train), ("heldout", &corpus.heldout)];
    for (split, utts) in splits {
        for u in utts.iter() {
            u.validate()?;
            let rel = format!("features/{}.bin", u.id);
            write_features(dir.join(&rel), &u.features)?;
            let rec = ManifestRecord {
                id: u.id.clone(),
                split: split.to_string(),
                symbols: u.symbols.clone(),
                annotations: u.annotations.clone(),
                durations: u.durations.clone(),
                inserted_frames: u.inserted.clone(),
                z_f: u.z_f(),
                features: rel,
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let spec: TaskSpec = serde_json::from_str(&fs::read_to_string(dir.join(TASK_FILE))?)?;
    let manifest_path = dir.join(MANIFEST);
    let reader = BufReader::new(fs::File::open(&manifest_path)?);
    let mut corpus = Corpus {
        spec,
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let utt = Utterance {
            features: read_features(dir.join(&rec.features))?,
            id: rec.id,
            symbols: rec.symbols,
            annotations: rec.annotations,
            durations: rec.durations,
            inserted: rec.inserted_frames,
        };
        utt.validate()?;
        match rec.split.as_str() {
            "train" => corpus.train.push(utt),
            "heldout" => corpus.heldout.push(utt),
            other => return Err(Error::format(&manifest_path, format!("unknown split `{other}`"))),
        }
    }
    Ok(corpus)
}
