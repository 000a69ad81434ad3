//! Video and query annotation records and their JSON / JSON-lines I/O.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub label: String,
    pub score: f64,
}

impl Detection {
    pub fn new(label: impl Into<String>, score: f64) -> Self {
        Self {
            label: label.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// `K` frame feature rows of width `D_f`.
    pub frames: Vec<Vec<f32>>,
    #[serde(default)]
    pub actions: Vec<Detection>,
    #[serde(default)]
    pub objects: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub video_id: String,
    /// Seconds.
    pub duration: f64,
    pub segments: Vec<Segment>,
}

impl VideoAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::NoSegments(self.video_id.clone()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidAnnotation(format!(
                "video `{}` has duration {}",
                self.video_id, self.duration
            )));
        }
        let dim = self.frame_dim();
        for (t, seg) in self.segments.iter().enumerate() {
            if let Some(row) = seg.frames.iter().find(|f| Some(f.len()) != dim) {
                return Err(Error::InvalidAnnotation(format!(
                    "video `{}` segment {t}: frame width {} differs from {:?}",
                    self.video_id,
                    row.len(),
                    dim
                )));
            }
            if seg.frames.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidAnnotation(format!(
                    "video `{}` segment {t}: non-finite frame feature",
                    self.video_id
                )));
            }
            for d in seg.actions.iter().chain(&seg.objects) {
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(Error::InvalidAnnotation(format!(
                        "video `{}` segment {t}: score {} for `{}` outside [0, 1]",
                        self.video_id, d.score, d.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Width of the frame features, from the first frame present.
    pub fn frame_dim(&self) -> Option<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.frames.first())
            .map(|f| f.len())
            .next()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Normalized `[start, end)` span of segment `t`, with segments of equal
    /// length.
    pub fn segment_span(&self, t: usize) -> (f64, f64) {
        let n = self.segments.len() as f64;
        (t as f64 / n, (t + 1) as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticStructure {
    pub predicate: String,
    #[serde(default)]
    pub arguments: Vec<String>,
}

impl SemanticStructure {
    pub fn new(predicate: impl Into<String>, arguments: &[&str]) -> Self {
        Self {
            predicate: predicate.into(),
            arguments: arguments.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAnnotation {
    pub query_id: String,
    pub video_id: String,
    pub structures: Vec<SemanticStructure>,
    pub tokens: Vec<String>,
    /// Ground-truth `(start, end)` in seconds.
    pub gt_interval: (f64, f64),
}

impl QueryAnnotation {
    pub fn validate(&self, video: Option<&VideoAnnotation>) -> Result<()> {
        if self.structures.is_empty() {
            return Err(Error::NoStructures(self.query_id.clone()));
        }
        let (s, e) = self.gt_interval;
        let limit = video.map_or(f64::INFINITY, |v| v.duration);
        if !(0.0 <= s && s <= e && e <= limit + 1e-9) {
            return Err(Error::InvalidAnnotation(format!(
                "query `{}` interval ({s}, {e}) outside [0, {limit}]",
                self.query_id
            )));
        }
        if let Some(v) = video {
            if v.video_id != self.video_id {
                return Err(Error::InvalidAnnotation(format!(
                    "query `{}` refers to `{}`, not `{}`",
                    self.query_id, self.video_id, v.video_id
                )));
            }
        }
        Ok(())
    }

    /// Ground truth normalized by the video duration.
    pub fn normalized_interval(&self, duration: f64) -> (f64, f64) {
        let (s, e) = self.gt_interval;
        ((s / duration).clamp(0.0, 1.0), (e / duration).clamp(0.0, 1.0))
    }
}

/// Reads a collection written either as a JSON array or as one JSON value
/// per line.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    let mut out = Vec::new();
    for line in BufReader::new(text.as_bytes()).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes one compact JSON value per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
