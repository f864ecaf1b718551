//! Dataset directories: `manifest.json`, one raw `u16le` file per frame
//! and `annotations.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::BBox;
use crate::volume::{Dims, GroundTruthEvent, Volume4D};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "u16le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: [usize; 4],
    pub dtype: String,
    pub frame_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedBox {
    t: usize,
    z: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedEvent {
    event_id: u32,
    boxes: Vec<AnnotatedBox>,
}

pub fn frame_file_name(t: usize) -> String {
    format!("vol_t{t:04}.raw")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes intensities in `[0, 1]` as `round(v * 65535)`.
pub fn encode_intensity(v: f32) -> u16 {
    (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn decode_intensity(raw: u16) -> f32 {
    (f64::from(raw) / 65535.0) as f32
}

/// Writes the dataset and returns the manifest path.
pub fn save_dataset(volume: &Volume4D, events: &[GroundTruthEvent], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dims = volume.dims();
    let mut frame_files = Vec::with_capacity(dims.t);
    for t in 0..dims.t {
        let name = frame_file_name(t);
        let bytes: Vec<u8> = volume
            .frame(t)
            .iter()
            .flat_map(|&v| encode_intensity(v).to_le_bytes())
            .collect();
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        frame_files.push(name);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims: dims.as_array(),
        dtype: DTYPE.into(),
        frame_files,
        id: Some(volume.id.clone()),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;
    save_annotations(events, &dir.join(ANNOTATIONS_FILE))?;
    Ok(manifest_path)
}

pub fn save_annotations(events: &[GroundTruthEvent], path: &Path) -> Result<()> {
    let doc: Vec<AnnotatedEvent> = events
        .iter()
        .map(|e| AnnotatedEvent {
            event_id: e.event_id,
            boxes: e
                .boxes
                .iter()
                .map(|(&(z, t), b)| AnnotatedBox {
                    t,
                    z,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                })
                .collect(),
        })
        .collect();
    write_json(path, &doc)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Manifest(format!("{} not found", path.display())));
    }
    let m: Manifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            m.format_version
        )));
    }
    if m.dtype != DTYPE {
        return Err(Error::Manifest(format!("unsupported dtype {:?}", m.dtype)));
    }
    if m.dims.contains(&0) {
        return Err(Error::Manifest(format!("degenerate dims {:?}", m.dims)));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<(Volume4D, Vec<GroundTruthEvent>)> {
    let m = load_manifest(dir)?;
    let dims = Dims::new(m.dims[0], m.dims[1], m.dims[2], m.dims[3]);
    let expected = (dims.frame_len() * 2) as u64;
    let mut intensities = Vec::with_capacity(dims.voxels());
    for t in 0..dims.t {
        let path = match m.frame_files.get(t) {
            Some(name) => dir.join(name),
            None => {
                return Err(Error::MissingFrame {
                    path: dir.join(frame_file_name(t)),
                })
            }
        };
        if !path.is_file() {
            return Err(Error::MissingFrame { path });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() as u64 != expected {
            return Err(Error::FrameSize {
                path,
                expected,
                found: bytes.len() as u64,
            });
        }
        intensities.extend(
            bytes
                .chunks_exact(2)
                .map(|c| decode_intensity(u16::from_le_bytes([c[0], c[1]]))),
        );
    }
    if m.frame_files.len() > dims.t {
        return Err(Error::Manifest(format!(
            "{} frame files listed for T={}",
            m.frame_files.len(),
            dims.t
        )));
    }
    let id = m.id.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let volume = Volume4D::new(id, dims, intensities)?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let events = if ann_path.is_file() {
        load_annotations(&ann_path, dims)?
    } else {
        Vec::new()
    };
    Ok((volume, events))
}

pub fn load_annotations(path: &Path, dims: Dims) -> Result<Vec<GroundTruthEvent>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Vec<AnnotatedEvent> = serde_json::from_str(&text)
        .map_err(|e| Error::Annotation(format!("{}: {e}", path.display())))?;
    let mut events = Vec::with_capacity(doc.len());
    let mut seen_ids = std::collections::BTreeSet::new();
    for e in doc {
        if !seen_ids.insert(e.event_id) {
            return Err(Error::Annotation(format!(
                "duplicate event_id {}",
                e.event_id
            )));
        }
        let mut boxes = BTreeMap::new();
        for b in e.boxes {
            let bb = BBox::new(b.x0, b.y0, b.x1, b.y1, 0.0).map_err(|_| {
                Error::Annotation(format!(
                    "event {}: degenerate box at (z={}, t={})",
                    e.event_id, b.z, b.t
                ))
            })?;
            if boxes.insert((b.z, b.t), bb).is_some() {
                return Err(Error::Annotation(format!(
                    "event {}: two boxes at (z={}, t={})",
                    e.event_id, b.z, b.t
                )));
            }
        }
        let event = GroundTruthEvent {
            event_id: e.event_id,
            boxes,
        };
        event.validate(dims)?;
        events.push(event);
    }
    Ok(events)
}
