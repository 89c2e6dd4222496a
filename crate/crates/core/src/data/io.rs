use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Dataset, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::moment::{AnnotationRecord, ClipFeatureSequence};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

const MAGIC: &[u8; 4] = b"LGNF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Spans may overshoot the duration by this much (seconds) to absorb
/// rounding of `(b+1)·duration/N`.
const SPAN_SLACK: f64 = 1e-9;

/// Writes a feature file. Values are stored as `f32`, the duration in whole
/// milliseconds.
pub fn write_features(path: &Path, seq: &ClipFeatureSequence) -> Result<()> {
    let (t, d) = (seq.clip_count(), seq.feature_width());
    let ms = (seq.duration_s() * 1000.0).round();
    if !(1.0..=u32::MAX as f64).contains(&ms) {
        return Err(Error::Config(format!("duration {} s does not fit the file header", seq.duration_s())));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, t as u32, d as u32, ms as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in seq.features().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads and validates a feature file.
pub fn read_features(path: &Path, video_id: &str) -> Result<ClipFeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, t, d, ms) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    if t == 0 || d == 0 || ms == 0 {
        return Err(fail(format!("empty header fields (T={t}, d_v={d}, duration={ms} ms)")));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * t * d {
        return Err(fail(format!(
            "payload has {} bytes, header declares {}×{} f32 = {}",
            payload.len(),
            t,
            d,
            4 * t * d
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let features = Tensor::new(vec![t, d], data)?;
    ClipFeatureSequence::new(video_id, features, ms as f64 / 1000.0).map_err(|e| fail(e.to_string()))
}

/// Writes one JSON object per line.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads annotations, resolving each against `videos` and checking its span
/// lies within the video. Blank lines are skipped; `line` in errors is
/// 1-based. Returns `(line, record)` pairs.
pub fn read_annotations(
    path: &Path,
    videos: &HashMap<String, Arc<ClipFeatureSequence>>,
) -> Result<Vec<(usize, AnnotationRecord)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| Error::Validation {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        let video = videos
            .get(&record.video_id)
            .ok_or_else(|| Error::Resolution(record.video_id.clone()))?;
        if record.span.end() > video.duration_s() + SPAN_SLACK {
            return Err(invalid(format!(
                "span [{}, {}] exceeds the {} s duration of `{}`",
                record.span.start(),
                record.span.end(),
                video.duration_s(),
                record.video_id
            )));
        }
        if record.tokens.is_empty() {
            return Err(invalid("query has no tokens".into()));
        }
        out.push((lineno, record));
    }
    Ok(out)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from its manifest (or the directory containing it) and
/// validates every file it references.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_file = manifest_path(path);
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_file.clone(),
        reason: e.to_string(),
    })?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut by_id = HashMap::with_capacity(manifest.videos.len());
    let mut split_of = HashMap::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let seq = Arc::new(read_features(&root.join(&entry.feature_file), &entry.video_id)?);
        if by_id.insert(entry.video_id.clone(), seq.clone()).is_some() {
            return Err(Error::Format {
                path: manifest_file.clone(),
                reason: format!("video `{}` listed twice", entry.video_id),
            });
        }
        split_of.insert(entry.video_id.clone(), entry.split);
        videos.push(seq);
    }

    let records = read_annotations(&root.join(&manifest.annotations), &by_id)?;
    let samples = records
        .into_iter()
        .map(|(line, annotation)| Sample {
            query_id: format!("{}#{line}", annotation.video_id),
            split: split_of[&annotation.video_id],
            video: by_id[&annotation.video_id].clone(),
            annotation,
        })
        .collect();
    Ok(Dataset { videos, samples })
}
