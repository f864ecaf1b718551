//! Slice-triplet detector and the merge of neighbouring-slice outputs.
//!
//! Each slice of a triplet runs through a shared 2D backbone; the three
//! feature maps are stacked along a depth axis and collapsed by a 3×3×3
//! convolution. An anchor head proposes boxes on the fused map and a
//! classification head over max-pooled ROI features re-scores and refines
//! them.

use std::collections::BTreeMap;

use mitodet_nn::{
    conv2d, conv2d_backward, conv3d, conv3d_backward, linear, linear_backward, max_pool2d,
    max_pool2d_backward, relu, relu_backward, two_class_probability, LayerParams, ParamGrads,
    Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_deltas, generate_anchors, AnchorConfig};
use crate::detections::{DetectionSet, Stage};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, score_order, BBox};
use crate::volume::{Slice, SliceTriplet};

/// Accumulated parameter gradients keyed by layer name.
pub type GradMap = BTreeMap<String, ParamGrads>;

pub(crate) fn accumulate(grads: &mut GradMap, name: &str, g: &ParamGrads) {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(g),
        None => {
            grads.insert(name.to_string(), g.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub match_iou: f64,
    pub keep_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            keep_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Output channels of the two backbone convolutions.
    pub backbone_channels: [usize; 2],
    /// Output channels of the 3×3×3 triplet convolution.
    pub fused_channels: usize,
    pub head_channels: usize,
    pub roi_pool_size: usize,
    pub roi_hidden: usize,
    pub anchors: AnchorConfig,
    pub fusion: FusionConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32],
            fused_channels: 32,
            head_channels: 32,
            roi_pool_size: 7,
            roi_hidden: 64,
            anchors: AnchorConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.backbone_channels.contains(&0)
            || self.fused_channels == 0
            || self.head_channels == 0
            || self.roi_pool_size == 0
            || self.roi_hidden == 0
        {
            return Err(Error::Config(
                "stage1: layer widths must be positive".into(),
            ));
        }
        if self.anchors.stride != 2 * FEATURE_STRIDE {
            return Err(Error::Config(format!(
                "stage1: anchor stride must be {} for this network",
                2 * FEATURE_STRIDE
            )));
        }
        Ok(())
    }
}

/// Downsampling of the fused feature map relative to the input.
pub const FEATURE_STRIDE: usize = 4;

/// Trainable weights of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Net {
    pub config: Stage1Config,
    pub conv1: LayerParams,
    pub conv2: LayerParams,
    pub fuse3d: LayerParams,
    pub head: LayerParams,
    pub obj: LayerParams,
    pub reg: LayerParams,
    pub fc1: LayerParams,
    pub fc2: LayerParams,
}

pub const STAGE1_LAYERS: [&str; 8] = [
    "conv1", "conv2", "fuse3d", "head", "obj", "reg", "fc1", "fc2",
];

impl Stage1Net {
    pub fn new<R: Rng + ?Sized>(config: Stage1Config, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.backbone_channels;
        let c3 = config.fused_channels;
        let ch = config.head_channels;
        let a = config.anchors.anchors_per_cell();
        let p = config.roi_pool_size;
        Ok(Self {
            conv1: LayerParams::glorot(&[c1, 1, 3, 3], rng),
            conv2: LayerParams::glorot(&[c2, c1, 3, 3], rng),
            fuse3d: LayerParams::glorot(&[c3, c2, 3, 3, 3], rng),
            head: LayerParams::glorot(&[ch, c3, 3, 3], rng),
            obj: LayerParams::glorot(&[2 * a, ch, 1, 1], rng),
            reg: LayerParams::glorot(&[4 * a, ch, 1, 1], rng),
            fc1: LayerParams::glorot(&[config.roi_hidden, c3 * p * p], rng),
            fc2: LayerParams::glorot(&[6, config.roi_hidden], rng),
            config,
        })
    }

    pub fn layers(&self) -> [(&'static str, &LayerParams); 8] {
        [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("fuse3d", &self.fuse3d),
            ("head", &self.head),
            ("obj", &self.obj),
            ("reg", &self.reg),
            ("fc1", &self.fc1),
            ("fc2", &self.fc2),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut LayerParams); 8] {
        [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("fuse3d", &mut self.fuse3d),
            ("head", &mut self.head),
            ("obj", &mut self.obj),
            ("reg", &mut self.reg),
            ("fc1", &mut self.fc1),
            ("fc2", &mut self.fc2),
        ]
    }

    /// Rebuilds a network from named layers, checking every shape against
    /// `config`.
    pub fn from_layers(
        config: Stage1Config,
        mut layers: BTreeMap<String, LayerParams>,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(config, &mut rng)?;
        for (name, slot) in net.layers_mut() {
            let p = layers
                .remove(name)
                .ok_or_else(|| Error::Shape(format!("stage1 layer {name} missing")))?;
            if p.kernels.shape() != slot.kernels.shape() {
                return Err(Error::Shape(format!(
                    "stage1 layer {name}: kernels {:?}, config expects {:?}",
                    p.kernels.shape(),
                    slot.kernels.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    fn check_input(&self, triplet: &SliceTriplet) -> Result<()> {
        let (w, h) = (triplet.width(), triplet.height());
        let s = self.config.anchors.stride;
        if w % s != 0 || h % s != 0 || w == 0 || h == 0 {
            return Err(Error::Shape(format!(
                "stage1 input {w}x{h} must be a positive multiple of {s}"
            )));
        }
        if triplet
            .slices
            .iter()
            .any(|sl| sl.width != w || sl.height != h)
        {
            return Err(Error::Shape("triplet slices differ in size".into()));
        }
        Ok(())
    }

    pub fn forward(&self, triplet: &SliceTriplet) -> Result<Stage1Forward> {
        self.check_input(triplet)?;
        let feats: Vec<SliceFeatures> = triplet
            .slices
            .iter()
            .map(|s| self.backbone(s))
            .collect::<Result<_>>()?;
        self.forward_from(&[&feats[0], &feats[1], &feats[2]])
    }

    /// Per-slice backbone features, reusable across the triplets sharing
    /// the slice.
    pub fn backbone(&self, slice: &Slice) -> Result<SliceFeatures> {
        let s = self.config.anchors.stride;
        if !slice.width.is_multiple_of(s) || !slice.height.is_multiple_of(s) {
            return Err(Error::Shape(format!(
                "stage1 input {}x{} must be a positive multiple of {s}",
                slice.width, slice.height
            )));
        }
        Ok(SliceFeatures(self.backbone_forward(slice)?))
    }

    pub fn forward_from(&self, feats: &[&SliceFeatures; 3]) -> Result<Stage1Forward> {
        let shape = feats[0].0.x.shape().to_vec();
        if feats.iter().any(|f| f.0.x.shape() != shape.as_slice()) {
            return Err(Error::Shape("triplet slices differ in size".into()));
        }
        let slices: Vec<SliceCache> = feats.iter().map(|f| f.0.clone()).collect();
        let c2 = self.config.backbone_channels[1];
        let (fh, fw) = (slices[0].p2.shape()[1], slices[0].p2.shape()[2]);
        let hw = fh * fw;
        let mut stacked = vec![0.0; c2 * 3 * hw];
        for c in 0..c2 {
            for (d, sc) in slices.iter().enumerate() {
                stacked[(c * 3 + d) * hw..(c * 3 + d + 1) * hw]
                    .copy_from_slice(&sc.p2.values()[c * hw..(c + 1) * hw]);
            }
        }
        let stacked = Tensor::new(vec![c2, 3, fh, fw], stacked)?;
        let z3 = conv3d(&stacked, &self.fuse3d, 1, [0, 1, 1])?;
        let features = relu(&z3).reshape(&[self.config.fused_channels, fh, fw])?;
        let q = max_pool2d(&features, 2, 2)?;
        let z4 = conv2d(&q, &self.head, 1, 1)?;
        let a4 = relu(&z4);
        let obj = conv2d(&a4, &self.obj, 1, 0)?;
        let reg = conv2d(&a4, &self.reg, 1, 0)?;
        Ok(Stage1Forward {
            width: shape[2],
            height: shape[1],
            slices,
            stacked,
            z3,
            features,
            q,
            z4,
            a4,
            obj,
            reg,
        })
    }

    fn backbone_forward(&self, slice: &Slice) -> Result<SliceCache> {
        let x = Tensor::new(
            vec![1, slice.height, slice.width],
            slice.pixels.iter().map(|&v| f64::from(v)).collect(),
        )?;
        let z1 = conv2d(&x, &self.conv1, 1, 1)?;
        let a1 = relu(&z1);
        let p1 = max_pool2d(&a1, 2, 2)?;
        let z2 = conv2d(&p1, &self.conv2, 1, 1)?;
        let a2 = relu(&z2);
        let p2 = max_pool2d(&a2, 2, 2)?;
        Ok(SliceCache {
            x,
            z1,
            a1,
            p1,
            z2,
            a2,
            p2,
        })
    }

    /// Objectness probabilities and anchors for a forward pass, in anchor
    /// order.
    pub fn anchor_scores(&self, fwd: &Stage1Forward) -> (Vec<BBox>, Vec<f64>) {
        let anchors = generate_anchors(fwd.width, fwd.height, &self.config.anchors);
        let a = self.config.anchors.anchors_per_cell();
        let cells = fwd.obj.shape()[1] * fwd.obj.shape()[2];
        let o = fwd.obj.values();
        let mut probs = Vec::with_capacity(anchors.len());
        for cell in 0..cells {
            for k in 0..a {
                probs.push(two_class_probability(
                    o[(2 * k) * cells + cell],
                    o[(2 * k + 1) * cells + cell],
                ));
            }
        }
        (anchors, probs)
    }

    /// Regression outputs of anchor `index` (cell-major, then anchor).
    pub fn anchor_deltas(&self, fwd: &Stage1Forward, index: usize) -> [f64; 4] {
        let a = self.config.anchors.anchors_per_cell();
        let cells = fwd.reg.shape()[1] * fwd.reg.shape()[2];
        let (cell, k) = (index / a, index % a);
        let r = fwd.reg.values();
        std::array::from_fn(|j| r[(4 * k + j) * cells + cell])
    }

    /// Anchor proposals above the score threshold, decoded, clipped,
    /// suppressed and truncated to `top_k`.
    pub fn proposals(&self, fwd: &Stage1Forward, cfg: &AnchorConfig) -> Vec<BBox> {
        let (anchors, probs) = self.anchor_scores(fwd);
        let mut boxes = Vec::new();
        for (i, (anchor, &p)) in anchors.iter().zip(&probs).enumerate() {
            if p > cfg.score_threshold {
                let d = self.anchor_deltas(fwd, i);
                let b = decode_deltas(&anchor.with_score(p), &d);
                if let Some(c) = b.clip(fwd.width as f64, fwd.height as f64) {
                    boxes.push(c);
                }
            }
        }
        let mut kept = nms(&boxes, cfg.nms_iou);
        kept.truncate(cfg.top_k);
        kept
    }

    pub fn roi_forward(&self, fwd: &Stage1Forward, roi: &BBox) -> Result<RoiForward> {
        let (pooled, argmax) = roi_pool(
            &fwd.features,
            roi,
            FEATURE_STRIDE,
            self.config.roi_pool_size,
        );
        let flat = Tensor::from_vec(pooled.into_values());
        let h1 = linear(&flat, &self.fc1)?;
        let a1 = relu(&h1);
        let out = linear(&a1, &self.fc2)?;
        Ok(RoiForward {
            roi: *roi,
            argmax,
            flat,
            h1,
            a1,
            out,
        })
    }

    /// Refined box and probability from an ROI head output.
    pub fn roi_result(&self, r: &RoiForward, width: usize, height: usize) -> Option<BBox> {
        let o = r.out.values();
        let p = two_class_probability(o[0], o[1]);
        decode_deltas(&r.roi, &o[2..6])
            .with_score(p)
            .clip(width as f64, height as f64)
    }

    /// Backward pass. `d_obj`/`d_reg` are gradients on the anchor head
    /// outputs (same shapes as the forward's); `rois` pairs each ROI
    /// forward with the gradient on its six outputs.
    pub fn backward(
        &self,
        fwd: &Stage1Forward,
        d_obj: &Tensor,
        d_reg: &Tensor,
        rois: &[(&RoiForward, [f64; 6])],
        grads: &mut GradMap,
    ) -> Result<()> {
        let g_obj = conv2d_backward(&fwd.a4, &self.obj, 1, 0, d_obj)?;
        let g_reg = conv2d_backward(&fwd.a4, &self.reg, 1, 0, d_reg)?;
        accumulate(grads, "obj", &g_obj.params);
        accumulate(grads, "reg", &g_reg.params);
        let mut da4 = g_obj.input.into_values();
        for (a, b) in da4.iter_mut().zip(g_reg.input.values()) {
            *a += b;
        }
        let dz4 = relu_backward(&fwd.z4, &Tensor::new(fwd.z4.shape().to_vec(), da4)?)?;
        let g_head = conv2d_backward(&fwd.q, &self.head, 1, 1, &dz4)?;
        accumulate(grads, "head", &g_head.params);
        let mut df = max_pool2d_backward(&fwd.features, 2, 2, &g_head.input)?.into_values();

        for (r, g) in rois {
            let g2 = linear_backward(&r.a1, &self.fc2, &Tensor::from_vec(g.to_vec()))?;
            accumulate(grads, "fc2", &g2.params);
            let dh1 = relu_backward(&r.h1, &g2.input)?;
            let g1 = linear_backward(&r.flat, &self.fc1, &dh1)?;
            accumulate(grads, "fc1", &g1.params);
            for (&src, &gv) in r.argmax.iter().zip(g1.input.values()) {
                if src != usize::MAX {
                    df[src] += gv;
                }
            }
        }

        let dz3 = relu_backward(&fwd.z3, &Tensor::new(fwd.z3.shape().to_vec(), df)?)?;
        let g3 = conv3d_backward(&fwd.stacked, &self.fuse3d, 1, [0, 1, 1], &dz3)?;
        accumulate(grads, "fuse3d", &g3.params);
        let ds = g3.input.values();
        let c2 = self.config.backbone_channels[1];
        let p2_shape = fwd.slices[0].p2.shape().to_vec();
        let hw = p2_shape[1] * p2_shape[2];
        for (d, sc) in fwd.slices.iter().enumerate() {
            let mut dp2 = vec![0.0; c2 * hw];
            for c in 0..c2 {
                dp2[c * hw..(c + 1) * hw]
                    .copy_from_slice(&ds[(c * 3 + d) * hw..(c * 3 + d + 1) * hw]);
            }
            let dp2 = Tensor::new(p2_shape.clone(), dp2)?;
            let da2 = max_pool2d_backward(&sc.a2, 2, 2, &dp2)?;
            let dz2 = relu_backward(&sc.z2, &da2)?;
            let g2 = conv2d_backward(&sc.p1, &self.conv2, 1, 1, &dz2)?;
            accumulate(grads, "conv2", &g2.params);
            let da1 = max_pool2d_backward(&sc.a1, 2, 2, &g2.input)?;
            let dz1 = relu_backward(&sc.z1, &da1)?;
            let g1 = conv2d_backward(&sc.x, &self.conv1, 1, 1, &dz1)?;
            accumulate(grads, "conv1", &g1.params);
        }
        Ok(())
    }
}

/// Backbone activations of one slice.
#[derive(Debug, Clone)]
pub struct SliceFeatures(SliceCache);

#[derive(Debug, Clone)]
struct SliceCache {
    x: Tensor,
    z1: Tensor,
    a1: Tensor,
    p1: Tensor,
    z2: Tensor,
    a2: Tensor,
    p2: Tensor,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Stage1Forward {
    pub width: usize,
    pub height: usize,
    slices: Vec<SliceCache>,
    stacked: Tensor,
    z3: Tensor,
    /// Fused feature map `[C, H/4, W/4]`.
    pub features: Tensor,
    q: Tensor,
    z4: Tensor,
    a4: Tensor,
    /// Objectness logits `[2A, H/8, W/8]`: channel `2a` background,
    /// `2a + 1` foreground.
    pub obj: Tensor,
    /// Anchor deltas `[4A, H/8, W/8]`.
    pub reg: Tensor,
}

#[derive(Debug, Clone)]
pub struct RoiForward {
    pub roi: BBox,
    argmax: Vec<usize>,
    flat: Tensor,
    h1: Tensor,
    a1: Tensor,
    /// Two class logits (background, foreground) then four deltas.
    pub out: Tensor,
}

/// Max pooling of the feature cells under `roi` into a `size × size` grid.
/// Returns the pooled values and, per output, the source index in
/// `features` (`usize::MAX` for empty bins, which output zero).
pub fn roi_pool(features: &Tensor, roi: &BBox, stride: usize, size: usize) -> (Tensor, Vec<usize>) {
    let s = features.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let st = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / st).floor().max(0.0) as usize).min(n.saturating_sub(1));
        let b = ((hi / st).ceil() as usize).clamp(a + 1, n);
        (a, b)
    };
    let (x0, x1) = span(roi.x0, roi.x1, w);
    let (y0, y1) = span(roi.y0, roi.y1, h);
    let bin = |p: usize, lo: usize, hi: usize| {
        let len = (hi - lo) as f64 / size as f64;
        let a = lo + (p as f64 * len).floor() as usize;
        let b = (lo + ((p + 1) as f64 * len).ceil() as usize).min(hi);
        (a, b.max(a))
    };
    let x = features.values();
    let mut out = vec![0.0; c * size * size];
    let mut arg = vec![usize::MAX; c * size * size];
    for ci in 0..c {
        for py in 0..size {
            let (ya, yb) = bin(py, y0, y1);
            for px in 0..size {
                let (xa, xb) = bin(px, x0, x1);
                let o = (ci * size + py) * size + px;
                let mut best = usize::MAX;
                for yy in ya..yb {
                    for xx in xa..xb {
                        let i = (ci * h + yy) * w + xx;
                        if best == usize::MAX || x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                if best != usize::MAX {
                    out[o] = x[best];
                    arg[o] = best;
                }
            }
        }
    }
    (
        Tensor::new(vec![c, size, size], out).expect("pool shape"),
        arg,
    )
}

/// Raw detections for one slice triplet.
pub fn detect_slice(
    triplet: &SliceTriplet,
    net: &Stage1Net,
    anchors: &AnchorConfig,
) -> Result<DetectionSet> {
    let fwd = net.forward(triplet)?;
    let boxes = detect_from_forward(&fwd, net, anchors)?;
    Ok(DetectionSet::new(
        triplet.center_z,
        triplet.t,
        Stage::Raw,
        boxes,
    ))
}

/// Proposals, ROI re-scoring and final suppression for a computed forward
/// pass.
pub fn detect_from_forward(
    fwd: &Stage1Forward,
    net: &Stage1Net,
    anchors: &AnchorConfig,
) -> Result<Vec<BBox>> {
    anchors.validate()?;
    let own = &net.config.anchors;
    if anchors.stride != own.stride
        || anchors.scales != own.scales
        || anchors.aspect_ratios != own.aspect_ratios
    {
        return Err(Error::Config(
            "anchor geometry differs from the one the network was built with".into(),
        ));
    }
    let mut boxes = Vec::new();
    for p in net.proposals(fwd, anchors) {
        let r = net.roi_forward(fwd, &p)?;
        if let Some(b) = net.roi_result(&r, fwd.width, fwd.height) {
            if b.score > anchors.score_threshold {
                boxes.push(b);
            }
        }
    }
    Ok(nms(&boxes, anchors.nms_iou))
}

/// The raw outputs at `z - 1`, `z`, `z + 1` (boundary-replicated) for one
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSet {
    pub center_z: usize,
    pub t: usize,
    pub members: [DetectionSet; 3],
}

impl OutputSet {
    pub fn new(center_z: usize, t: usize, members: [DetectionSet; 3]) -> Result<Self> {
        if members.iter().any(|m| m.t != t) {
            return Err(Error::Shape("output set members must share t".into()));
        }
        for pair in members.windows(2) {
            if pair[1].z.abs_diff(pair[0].z) > 1 {
                return Err(Error::Shape(
                    "output set members must be adjacent slices".into(),
                ));
            }
        }
        Ok(Self {
            center_z,
            t,
            members,
        })
    }
}

/// `lo + Σ(v - lo) / n` over values sorted ascending, where `lo` is the
/// smallest. Exact on equal inputs and independent of input order.
pub(crate) fn canonical_mean(values: &mut [f64], n: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    lo + values.iter().map(|v| v - lo).sum::<f64>() / n as f64
}

/// A group of at most one box per member set.
pub(crate) struct Group {
    pub members: Vec<(usize, BBox)>,
}

impl Group {
    pub(crate) fn mean_box(&self) -> BBox {
        let n = self.members.len();
        let coord = |f: fn(&BBox) -> f64| {
            let mut v: Vec<f64> = self.members.iter().map(|(_, b)| f(b)).collect();
            canonical_mean(&mut v, n)
        };
        BBox {
            x0: coord(|b| b.x0),
            y0: coord(|b| b.y0),
            x1: coord(|b| b.x1),
            y1: coord(|b| b.y1),
            score: 0.0,
        }
    }

    pub(crate) fn max_score(&self) -> f64 {
        self.members
            .iter()
            .map(|(_, b)| b.score)
            .fold(0.0, f64::max)
    }
}

/// Greedy grouping: boxes from all sets in score order; each ungrouped
/// box seeds a group and takes, from every other set, the ungrouped box of
/// highest IoU with the seed if that IoU reaches `match_iou`.
pub(crate) fn group_boxes(sets: &[&[BBox]], match_iou: f64) -> Vec<Group> {
    let mut all: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(m, s)| (0..s.len()).map(move |i| (m, i)))
        .collect();
    all.sort_by(|&(ma, ia), &(mb, ib)| score_order(&sets[ma][ia], &sets[mb][ib]));
    let mut used: Vec<Vec<bool>> = sets.iter().map(|s| vec![false; s.len()]).collect();
    let mut groups = Vec::new();
    for (m, i) in all {
        if used[m][i] {
            continue;
        }
        used[m][i] = true;
        let seed = sets[m][i];
        let mut members = vec![(m, seed)];
        for (other, set) in sets.iter().enumerate() {
            if other == m {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, b) in set.iter().enumerate() {
                if used[other][j] {
                    continue;
                }
                let v = iou(&seed, b);
                if v < match_iou {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((k, bv)) => v > bv || (v == bv && score_order(b, &set[k]).is_lt()),
                };
                if better {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[other][j] = true;
                members.push((other, set[j]));
            }
        }
        groups.push(Group { members });
    }
    groups
}

/// Merges the three neighbouring-slice outputs: grouped boxes are averaged
/// corner-wise and scored by the sum of member scores over three, so a box
/// seen on one slice only keeps a third of its score.
pub fn fuse_neighbor_outputs(set: &OutputSet, config: &FusionConfig) -> DetectionSet {
    let sets: Vec<&[BBox]> = set.members.iter().map(|m| m.boxes.as_slice()).collect();
    let mut out = Vec::new();
    for g in group_boxes(&sets, config.match_iou) {
        let mut scores: Vec<f64> = g.members.iter().map(|(_, b)| b.score).collect();
        scores.resize(3, 0.0);
        let score = canonical_mean(&mut scores, 3).min(g.max_score());
        if score < config.keep_threshold {
            continue;
        }
        out.push(g.mean_box().with_score(score));
    }
    out.sort_by(score_order);
    DetectionSet::new(set.center_z, set.t, Stage::VolumeFused, out)
}
