//! JSON-lines manifests.
//!
//! The first line is a header `{"embedding_dim": D}`; every following line
//! holds one video. Track manifests carry clustered `tracks`, raw-detection
//! manifests carry a flat `faces` list instead.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DataError, FaceRecord, Label, VideoRecord};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    embedding_dim: usize,
}

/// A video before identity clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawVideo {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub faces: Vec<FaceRecord>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_lines<R: BufRead, T: DeserializeOwned>(
    reader: R,
    validate: impl Fn(&T, usize) -> Result<(), (&'static str, String)>,
) -> Result<Vec<T>, DataError> {
    let mut header: Option<Header> = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: Header = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: lineno,
                message: format!("expected header {{\"embedding_dim\": D}}: {e}"),
            })?;
            header = Some(h);
            continue;
        };
        let record: T = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        validate(&record, h.embedding_dim).map_err(|(field, reason)| DataError::Invalid {
            line: lineno,
            field: field.into(),
            reason,
        })?;
        out.push(record);
    }
    Ok(out)
}

fn check_dims<'f>(faces: impl Iterator<Item = &'f FaceRecord>, dim: usize) -> Result<(), (&'static str, String)> {
    for f in faces {
        if f.embedding.len() != dim {
            return Err((
                "embedding",
                format!("frame {}: length {} but header declares {dim}", f.frame_index, f.embedding.len()),
            ));
        }
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<VideoRecord>, DataError> {
    read_lines(reader, |v: &VideoRecord, dim| {
        v.check()?;
        check_dims(v.tracks.iter().flat_map(|t| &t.faces), dim)
    })
}

pub fn read_raw_manifest<R: BufRead>(reader: R) -> Result<Vec<RawVideo>, DataError> {
    read_lines(reader, |v: &RawVideo, dim| {
        if v.faces.is_empty() {
            return Err(("faces", "video has no detections".into()));
        }
        for f in &v.faces {
            f.check()?;
        }
        check_dims(v.faces.iter(), dim)
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<VideoRecord>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_manifest(BufReader::new(file))
}

pub fn load_raw_manifest(path: &Path) -> Result<Vec<RawVideo>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_raw_manifest(BufReader::new(file))
}

fn write_lines<W: Write, T: Serialize>(w: &mut W, records: &[T], embedding_dim: usize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &Header { embedding_dim })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn dim_of<'f>(mut faces: impl Iterator<Item = &'f FaceRecord>) -> usize {
    faces.next().map_or(0, |f| f.embedding.len())
}

pub fn write_manifest<W: Write>(w: &mut W, videos: &[VideoRecord]) -> std::io::Result<()> {
    let dim = dim_of(videos.iter().flat_map(|v| &v.tracks).flat_map(|t| &t.faces));
    write_lines(w, videos, dim)
}

pub fn write_raw_manifest<W: Write>(w: &mut W, videos: &[RawVideo]) -> std::io::Result<()> {
    let dim = dim_of(videos.iter().flat_map(|v| &v.faces));
    write_lines(w, videos, dim)
}

pub fn save_manifest(path: &Path, videos: &[VideoRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_manifest(&mut w, videos)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

pub fn save_raw_manifest(path: &Path, videos: &[RawVideo]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_raw_manifest(&mut w, videos)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}
