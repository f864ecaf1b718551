//! Temporal re-scoring of merged detections.
//!
//! Candidates from frames `t - 1`, `t`, `t + 1` are pooled, each is scored
//! by a small classifier at all three frames, and the mean score decides
//! whether it survives.

use std::collections::BTreeMap;

use mitodet_nn::{
    conv2d, conv2d_backward, linear, linear_backward, max_pool2d, max_pool2d_backward, relu,
    relu_backward, two_class_probability, LayerParams, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detections::{DetectionSet, Stage};
use crate::error::{Error, Result};
use crate::geometry::{score_order, BBox};
use crate::stage1::{accumulate, canonical_mean, group_boxes, GradMap};
use crate::volume::{replicate_index, Volume4D};

/// Smallest divisor used when normalising a classifier window.
pub const STACK_PEAK_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Side of the square window cropped around a candidate.
    pub crop_size: usize,
    pub channels: [usize; 2],
    pub accept_threshold: f64,
    pub match_iou: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            crop_size: 48,
            channels: [8, 16],
            accept_threshold: 0.5,
            match_iou: 0.5,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(4) {
            return Err(Error::Config(
                "stage2: crop_size must be a positive multiple of 4".into(),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("stage2: channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.accept_threshold) || !(0.0..=1.0).contains(&self.match_iou) {
            return Err(Error::Config(
                "stage2: thresholds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Input channels: the frames before, at and after the scored frame.
    pub const INPUT_FRAMES: usize = 3;
}

/// Two conv + pool blocks and a linear two-class head.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Net {
    pub config: Stage2Config,
    pub conv1: LayerParams,
    pub conv2: LayerParams,
    pub fc: LayerParams,
}

pub const STAGE2_LAYERS: [&str; 3] = ["conv1", "conv2", "fc"];

impl Stage2Net {
    pub fn new<R: Rng + ?Sized>(config: Stage2Config, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.channels;
        let side = config.crop_size / 4;
        Ok(Self {
            conv1: LayerParams::glorot(&[c1, Stage2Config::INPUT_FRAMES, 3, 3], rng),
            conv2: LayerParams::glorot(&[c2, c1, 3, 3], rng),
            fc: LayerParams::glorot(&[2, c2 * side * side], rng),
            config,
        })
    }

    pub fn layers(&self) -> [(&'static str, &LayerParams); 3] {
        [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("fc", &self.fc),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut LayerParams); 3] {
        [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("fc", &mut self.fc),
        ]
    }

    pub fn from_layers(
        config: Stage2Config,
        mut layers: BTreeMap<String, LayerParams>,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(config, &mut rng)?;
        for (name, slot) in net.layers_mut() {
            let p = layers
                .remove(name)
                .ok_or_else(|| Error::Shape(format!("stage2 layer {name} missing")))?;
            if p.kernels.shape() != slot.kernels.shape() {
                return Err(Error::Shape(format!(
                    "stage2 layer {name}: kernels {:?}, config expects {:?}",
                    p.kernels.shape(),
                    slot.kernels.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Stage2Forward> {
        let s = self.config.crop_size;
        if input.shape() != [Stage2Config::INPUT_FRAMES, s, s] {
            return Err(Error::Shape(format!(
                "stage2 input {:?}, expected [{}, {s}, {s}]",
                input.shape(),
                Stage2Config::INPUT_FRAMES
            )));
        }
        let z1 = conv2d(input, &self.conv1, 1, 1)?;
        let a1 = relu(&z1);
        let p1 = max_pool2d(&a1, 2, 2)?;
        let z2 = conv2d(&p1, &self.conv2, 1, 1)?;
        let a2 = relu(&z2);
        let p2 = max_pool2d(&a2, 2, 2)?;
        let flat = Tensor::from_vec(p2.values().to_vec());
        let logits = linear(&flat, &self.fc)?;
        Ok(Stage2Forward {
            input: input.clone(),
            z1,
            a1,
            p1,
            z2,
            a2,
            p2_shape: p2.shape().to_vec(),
            flat,
            logits,
        })
    }

    /// Probability of the mitotic class.
    pub fn score(&self, input: &Tensor) -> Result<f64> {
        let f = self.forward(input)?;
        Ok(f.probability())
    }

    pub fn backward(
        &self,
        fwd: &Stage2Forward,
        d_logits: &Tensor,
        grads: &mut GradMap,
    ) -> Result<()> {
        let gfc = linear_backward(&fwd.flat, &self.fc, d_logits)?;
        accumulate(grads, "fc", &gfc.params);
        let dp2 = gfc.input.reshape(&fwd.p2_shape)?;
        let da2 = max_pool2d_backward(&fwd.a2, 2, 2, &dp2)?;
        let dz2 = relu_backward(&fwd.z2, &da2)?;
        let g2 = conv2d_backward(&fwd.p1, &self.conv2, 1, 1, &dz2)?;
        accumulate(grads, "conv2", &g2.params);
        let da1 = max_pool2d_backward(&fwd.a1, 2, 2, &g2.input)?;
        let dz1 = relu_backward(&fwd.z1, &da1)?;
        let g1 = conv2d_backward(&fwd.input, &self.conv1, 1, 1, &dz1)?;
        accumulate(grads, "conv1", &g1.params);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Forward {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    p1: Tensor,
    z2: Tensor,
    a2: Tensor,
    p2_shape: Vec<usize>,
    flat: Tensor,
    /// `(background, mitotic)` logits.
    pub logits: Tensor,
}

impl Stage2Forward {
    pub fn probability(&self) -> f64 {
        let l = self.logits.values();
        two_class_probability(l[0], l[1])
    }
}

/// Classifier input for frame `f`: windows at slice `z` of frames
/// `f - 1`, `f`, `f + 1` (boundary-replicated), centred on `(cx, cy)`.
/// The stack is divided by its peak (at least `STACK_PEAK_FLOOR`) so the
/// classifier sees temporal change rather than absolute brightness.
pub fn temporal_stack(
    volume: &Volume4D,
    z: usize,
    f: usize,
    cx: f64,
    cy: f64,
    size: usize,
) -> Result<Tensor> {
    let dims = volume.dims();
    volume.check_index(z, f)?;
    let mut values = Vec::with_capacity(3 * size * size);
    for off in [-1isize, 0, 1] {
        let frame = replicate_index(f, off, dims.t);
        let crop = volume.slice(z, frame)?.crop_centered(cx, cy, size);
        values.extend(crop.pixels.iter().map(|&v| f64::from(v)));
    }
    let peak = values.iter().fold(STACK_PEAK_FLOOR, |m, &v| m.max(v));
    values.iter_mut().for_each(|v| *v /= peak);
    Ok(Tensor::new(vec![3, size, size], values)?)
}

/// A pooled candidate location for slice `z` at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCandidate {
    pub z: usize,
    pub t: usize,
    /// Location; its score is the best contributing detection score.
    pub bbox: BBox,
    /// Whether the sets at `t - 1`, `t`, `t + 1` contributed.
    pub source_frames: [bool; 3],
    /// Classifier scores at `t - 1`, `t`, `t + 1`, once computed.
    pub per_frame_scores: Option<[f64; 3]>,
}

/// Union of the merged detections of three consecutive frames, with boxes
/// that overlap across frames merged into their corner mean.
pub fn build_candidate_pool(
    v_prev: &DetectionSet,
    v_curr: &DetectionSet,
    v_next: &DetectionSet,
    match_iou: f64,
) -> Result<Vec<TemporalCandidate>> {
    if v_prev.z != v_curr.z || v_next.z != v_curr.z {
        return Err(Error::Shape(format!(
            "candidate pool needs one slice, got z = {}, {}, {}",
            v_prev.z, v_curr.z, v_next.z
        )));
    }
    let sets: [&[BBox]; 3] = [&v_prev.boxes, &v_curr.boxes, &v_next.boxes];
    Ok(group_boxes(&sets, match_iou)
        .into_iter()
        .map(|g| {
            let mut source_frames = [false; 3];
            for (m, _) in &g.members {
                source_frames[*m] = true;
            }
            TemporalCandidate {
                z: v_curr.z,
                t: v_curr.t,
                bbox: g.mean_box().with_score(g.max_score()),
                source_frames,
                per_frame_scores: None,
            }
        })
        .collect())
}

/// Scores the candidate at frames `t - 1`, `t` and `t + 1`.
pub fn classify_temporal(
    candidate: &TemporalCandidate,
    volume: &Volume4D,
    z: usize,
    t: usize,
    net: &Stage2Net,
) -> Result<TemporalCandidate> {
    volume.check_index(z, t)?;
    let (cx, cy) = candidate.bbox.center();
    let n = volume.dims().t;
    let mut scores = [0.0; 3];
    for (k, off) in [-1isize, 0, 1].into_iter().enumerate() {
        let f = replicate_index(t, off, n);
        let input = temporal_stack(volume, z, f, cx, cy, net.config.crop_size)?;
        scores[k] = net.score(&input)?;
    }
    Ok(TemporalCandidate {
        per_frame_scores: Some(scores),
        ..candidate.clone()
    })
}

/// Keeps candidates whose mean per-frame score reaches `accept_threshold`.
pub fn fuse_temporal(
    z: usize,
    t: usize,
    candidates: &[TemporalCandidate],
    accept_threshold: f64,
) -> Result<DetectionSet> {
    let mut out = Vec::new();
    for c in candidates {
        let s = c
            .per_frame_scores
            .ok_or_else(|| Error::Empty("candidate has no per-frame scores".into()))?;
        if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange(format!(
                "per-frame scores {s:?} outside [0, 1]"
            )));
        }
        let mut v = s.to_vec();
        let mean = canonical_mean(&mut v, 3);
        if mean >= accept_threshold {
            out.push(c.bbox.with_score(mean));
        }
    }
    out.sort_by(score_order);
    Ok(DetectionSet::new(z, t, Stage::Final, out))
}
