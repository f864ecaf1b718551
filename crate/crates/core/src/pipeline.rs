//! The full cascade: weights of both stages, checkpoint I/O and inference
//! over a whole volume.

use std::collections::BTreeMap;
use std::path::Path;

use mitodet_nn::{Checkpoint, LayerParams};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detections::{DetectionSet, Stage, VolumeDetections};
use crate::error::{io_err, Error, Result};
use crate::stage1::{
    detect_from_forward, fuse_neighbor_outputs, OutputSet, SliceFeatures, Stage1Config, Stage1Net,
};
use crate::stage2::{
    build_candidate_pool, classify_temporal, fuse_temporal, Stage2Config, Stage2Net,
};
use crate::volume::{replicate_index, Volume4D};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub stage1: Stage1Net,
    pub stage2: Stage2Net,
}

const STAGE1_PREFIX: &str = "stage1.";
const STAGE2_PREFIX: &str = "stage2.";

impl Cascade {
    pub fn new<R: Rng + ?Sized>(config: &CascadeConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            stage1: Stage1Net::new(config.stage1.clone(), rng)?,
            stage2: Stage2Net::new(config.stage2.clone(), rng)?,
        })
    }

    pub fn config(&self) -> CascadeConfig {
        CascadeConfig {
            stage1: self.stage1.config.clone(),
            stage2: self.stage2.config.clone(),
        }
    }

    /// Every layer under a stage-qualified name.
    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut LayerParams)> {
        let mut out: Vec<(String, &mut LayerParams)> = Vec::new();
        for (n, p) in self.stage1.layers_mut() {
            out.push((format!("{STAGE1_PREFIX}{n}"), p));
        }
        for (n, p) in self.stage2.layers_mut() {
            out.push((format!("{STAGE2_PREFIX}{n}"), p));
        }
        out
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut layers = BTreeMap::new();
        for (n, p) in self.stage1.layers() {
            layers.insert(format!("{STAGE1_PREFIX}{n}"), p.clone());
        }
        for (n, p) in self.stage2.layers() {
            layers.insert(format!("{STAGE2_PREFIX}{n}"), p.clone());
        }
        let meta = serde_json::json!({
            "config": self.config(),
            "training": extra,
        });
        Checkpoint::new(meta, layers)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: CascadeConfig = ckpt
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint has no network config".into()))
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| Error::Config(format!("checkpoint config: {e}")))
            })?;
        config.validate()?;
        let mut s1 = BTreeMap::new();
        let mut s2 = BTreeMap::new();
        for (name, p) in &ckpt.layers {
            if let Some(n) = name.strip_prefix(STAGE1_PREFIX) {
                s1.insert(n.to_string(), p.clone());
            } else if let Some(n) = name.strip_prefix(STAGE2_PREFIX) {
                s2.insert(n.to_string(), p.clone());
            } else {
                return Err(Error::Shape(format!("unexpected checkpoint layer {name}")));
            }
        }
        Ok(Self {
            stage1: Stage1Net::from_layers(config.stage1, s1)?,
            stage2: Stage2Net::from_layers(config.stage2, s2)?,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Detections of every stage for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub raw: VolumeDetections,
    pub volume_fused: VolumeDetections,
    pub final_sets: VolumeDetections,
}

impl PipelineOutput {
    pub fn stage(&self, stage: Stage) -> &VolumeDetections {
        match stage {
            Stage::Raw => &self.raw,
            Stage::VolumeFused => &self.volume_fused,
            Stage::Final => &self.final_sets,
        }
    }
}

/// Stage-1 raw detections for every `(z, t)`, reusing each slice's
/// backbone features across the three triplets that contain it.
pub fn detect_raw(volume: &Volume4D, cascade: &Cascade) -> Result<VolumeDetections> {
    let dims = volume.dims();
    let net = &cascade.stage1;
    let mut out = VolumeDetections::new();
    for t in 0..dims.t {
        let feats: Vec<SliceFeatures> = (0..dims.z)
            .map(|z| net.backbone(&volume.slice(z, t)?))
            .collect::<Result<_>>()?;
        for z in 0..dims.z {
            let [a, b, c] = [-1isize, 0, 1].map(|o| replicate_index(z, o, dims.z));
            let fwd = net.forward_from(&[&feats[a], &feats[b], &feats[c]])?;
            let boxes = detect_from_forward(&fwd, net, &net.config.anchors)?;
            out.insert((z, t), DetectionSet::new(z, t, Stage::Raw, boxes));
        }
    }
    Ok(out)
}

pub fn fuse_volume(
    raw: &VolumeDetections,
    volume: &Volume4D,
    cascade: &Cascade,
) -> Result<VolumeDetections> {
    let dims = volume.dims();
    let cfg = &cascade.stage1.config.fusion;
    let mut out = VolumeDetections::new();
    for t in 0..dims.t {
        for z in 0..dims.z {
            let get = |o: isize| {
                raw.get(&(replicate_index(z, o, dims.z), t))
                    .cloned()
                    .ok_or_else(|| {
                        Error::OutOfRange(format!("no raw detections for (z={z}, t={t})"))
                    })
            };
            let set = OutputSet::new(z, t, [get(-1)?, get(0)?, get(1)?])?;
            out.insert((z, t), fuse_neighbor_outputs(&set, cfg));
        }
    }
    Ok(out)
}

pub fn refine_temporal(
    fused: &VolumeDetections,
    volume: &Volume4D,
    cascade: &Cascade,
) -> Result<VolumeDetections> {
    let dims = volume.dims();
    let cfg = &cascade.stage2.config;
    let mut out = VolumeDetections::new();
    for t in 0..dims.t {
        for z in 0..dims.z {
            let get = |o: isize| {
                fused
                    .get(&(z, replicate_index(t, o, dims.t)))
                    .ok_or_else(|| {
                        Error::OutOfRange(format!("no merged detections for (z={z}, t={t})"))
                    })
            };
            let pool = build_candidate_pool(get(-1)?, get(0)?, get(1)?, cfg.match_iou)?;
            let scored = pool
                .iter()
                .map(|c| classify_temporal(c, volume, z, t, &cascade.stage2))
                .collect::<Result<Vec<_>>>()?;
            out.insert((z, t), fuse_temporal(z, t, &scored, cfg.accept_threshold)?);
        }
    }
    Ok(out)
}

pub fn run_cascade(volume: &Volume4D, cascade: &Cascade) -> Result<PipelineOutput> {
    let raw = detect_raw(volume, cascade)?;
    let volume_fused = fuse_volume(&raw, volume, cascade)?;
    let final_sets = refine_temporal(&volume_fused, volume, cascade)?;
    Ok(PipelineOutput {
        raw,
        volume_fused,
        final_sets,
    })
}
