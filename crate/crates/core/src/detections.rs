//! Per-slice detection sets and their JSON document form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::BBox;
use crate::volume::Dims;

pub const DETECTIONS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Per-slice detector output.
    Raw,
    /// After merging with the neighbouring slices' outputs.
    VolumeFused,
    /// After temporal re-scoring.
    Final,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::VolumeFused => "volume_fused",
            Stage::Final => "final",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(Stage::Raw),
            "volume_fused" => Ok(Stage::VolumeFused),
            "final" => Ok(Stage::Final),
            other => Err(format!(
                "unknown stage {other:?} (expected raw, volume_fused or final)"
            )),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scored boxes for one `(z, t)` slice at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub z: usize,
    pub t: usize,
    pub stage: Stage,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(z: usize, t: usize, stage: Stage, boxes: Vec<BBox>) -> Self {
        Self { z, t, stage, boxes }
    }

    pub fn empty(z: usize, t: usize, stage: Stage) -> Self {
        Self::new(z, t, stage, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Detections for a whole volume, keyed by `(z, t)`.
pub type VolumeDetections = BTreeMap<(usize, usize), DetectionSet>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub t: usize,
    pub z: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
    pub stage: Stage,
}

/// File form: a header naming the volume extents plus flat records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsDocument {
    pub format_version: u32,
    pub dims: [usize; 4],
    pub stage: Stage,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionsDocument {
    /// Records ordered by `(t, z)`, then by the set's box order.
    pub fn from_sets(dims: Dims, stage: Stage, sets: &VolumeDetections) -> Self {
        let mut keyed: Vec<_> = sets.values().collect();
        keyed.sort_by_key(|s| (s.t, s.z));
        let detections = keyed
            .into_iter()
            .flat_map(|s| {
                s.boxes.iter().map(move |b| DetectionRecord {
                    t: s.t,
                    z: s.z,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                    score: b.score,
                    stage: s.stage,
                })
            })
            .collect();
        Self {
            format_version: DETECTIONS_FORMAT_VERSION,
            dims: dims.as_array(),
            stage,
            detections,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DETECTIONS_FORMAT_VERSION {
            return Err(Error::Detections(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let d = self.dims();
        for (i, r) in self.detections.iter().enumerate() {
            if r.z >= d.z || r.t >= d.t {
                return Err(Error::Detections(format!(
                    "record {i}: (z={}, t={}) outside {d}",
                    r.z, r.t
                )));
            }
            if r.stage != self.stage {
                return Err(Error::Detections(format!(
                    "record {i}: stage {} in a {} document",
                    r.stage, self.stage
                )));
            }
            if BBox::new(r.x0, r.y0, r.x1, r.y1, r.score).is_err() {
                return Err(Error::Detections(format!(
                    "record {i}: invalid box or score"
                )));
            }
        }
        Ok(())
    }

    /// Groups records into per-slice sets; every `(z, t)` of the volume gets
    /// a set, possibly empty.
    pub fn to_sets(&self) -> Result<VolumeDetections> {
        self.validate()?;
        let d = self.dims();
        let mut sets: VolumeDetections = BTreeMap::new();
        for t in 0..d.t {
            for z in 0..d.z {
                sets.insert((z, t), DetectionSet::empty(z, t, self.stage));
            }
        }
        for r in &self.detections {
            let b = BBox::new(r.x0, r.y0, r.x1, r.y1, r.score)?;
            sets.get_mut(&(r.z, r.t)).expect("validated").boxes.push(b);
        }
        Ok(sets)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let doc: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Detections(format!("{}: {e}", path.display())))?;
        doc.validate()?;
        Ok(doc)
    }
}
