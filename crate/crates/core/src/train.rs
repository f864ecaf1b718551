//! Joint training of both cascade stages.
//!
//! Every batch draws `batch_slices` augmented slice triplets for the
//! detector and a set of temporal windows for the re-scoring classifier;
//! the four loss terms are summed and one Adam step is applied to every
//! layer of both stages.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use mitodet_nn::{smooth_l1, softmax_cross_entropy, OptimizerConfig, ParamGrads, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_deltas, encode_deltas};
use crate::augment::{augment_sample_detailed, transform_box, Affine, AugmentConfig};
use crate::error::{io_err, Error, Result};
use crate::eval::truth_by_slice;
use crate::geometry::{iou, nms, BBox};
use crate::pipeline::{Cascade, CascadeConfig};
use crate::stage1::GradMap;
use crate::stage2::temporal_stack;
use crate::volume::{extract_slice_triplet, GroundTruthEvent, Volume4D};

/// A volume with its annotated events.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub volume: Volume4D,
    pub events: Vec<GroundTruthEvent>,
}

impl Dataset {
    pub fn new(volume: Volume4D, events: Vec<GroundTruthEvent>) -> Self {
        Self { volume, events }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub objectness: f64,
    pub box_regression: f64,
    pub roi_classification: f64,
    pub temporal_classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            objectness: 1.0,
            box_regression: 1.0,
            roi_classification: 1.0,
            temporal_classification: 1.0,
        }
    }
}

/// How anchors, ROIs and classifier windows are drawn within a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Probability that a batch slot after the first holds a mitosis.
    pub positive_slot_prob: f64,
    /// Probability that a non-positive slot is centred on a mined false
    /// positive rather than drawn uniformly.
    pub hard_negative_slot_prob: f64,
    pub hard_negative_capacity: usize,
    pub anchor_samples: usize,
    pub anchor_positive_fraction: f64,
    pub anchor_positive_iou: f64,
    pub anchor_negative_iou: f64,
    /// Sampled negatives per positive when the slot holds positives.
    pub anchor_negative_ratio: f64,
    /// Ranked proposals offered to the ROI sampler.
    pub roi_candidates: usize,
    pub roi_samples: usize,
    pub roi_foreground_fraction: f64,
    pub roi_foreground_iou: f64,
    /// Windows on annotated boxes, at the annotated frame or a neighbour.
    pub temporal_event: usize,
    /// Windows on event locations at frames outside the event.
    pub temporal_rest: usize,
    /// Windows on mined false positives.
    pub temporal_hard: usize,
    pub temporal_random: usize,
    /// Windows on bright spots, mostly cells.
    pub temporal_bright: usize,
    /// Random pixels examined when looking for a bright spot.
    pub bright_probes: usize,
    /// IoU with an annotated box at the scored frame for a positive label.
    pub temporal_positive_iou: f64,
    /// Largest centre shift of jittered windows, in pixels.
    pub jitter: f64,
    /// Gaussian noise added to classifier windows, percent of the
    /// intensity range.
    pub temporal_noise_percent_range: [f64; 2],
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            positive_slot_prob: 0.5,
            hard_negative_slot_prob: 0.5,
            hard_negative_capacity: 512,
            anchor_samples: 64,
            anchor_positive_fraction: 0.5,
            anchor_positive_iou: 0.5,
            anchor_negative_iou: 0.3,
            anchor_negative_ratio: 3.0,
            roi_candidates: 32,
            roi_samples: 16,
            roi_foreground_fraction: 0.25,
            roi_foreground_iou: 0.5,
            temporal_event: 6,
            temporal_rest: 2,
            temporal_hard: 4,
            temporal_random: 2,
            temporal_bright: 6,
            bright_probes: 32,
            temporal_positive_iou: 0.3,
            jitter: 2.0,
            temporal_noise_percent_range: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_slices: usize,
    pub max_batches: u64,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeights,
    pub network: CascadeConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_slices: 5,
            max_batches: 2_000,
            augment: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            network: CascadeConfig::default(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.network.validate()?;
        if self.batch_slices == 0 || self.max_batches == 0 {
            return Err(Error::Config(
                "batch_slices and max_batches must be at least 1".into(),
            ));
        }
        let stride = self.network.stage1.anchors.stride;
        if self.augment.crop_size.iter().any(|c| c % stride != 0) {
            return Err(Error::Config(format!(
                "augment crop_size {:?} must be a multiple of the anchor stride {stride}",
                self.augment.crop_size
            )));
        }
        let w = &self.loss_weights;
        if [
            w.objectness,
            w.box_regression,
            w.roi_classification,
            w.temporal_classification,
        ]
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        let s = &self.sampling;
        let probs = [
            s.positive_slot_prob,
            s.hard_negative_slot_prob,
            s.anchor_positive_fraction,
            s.roi_foreground_fraction,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "sampling fractions must lie in [0, 1]".into(),
            ));
        }
        if s.anchor_samples == 0 || s.roi_samples == 0 {
            return Err(Error::Config(
                "anchor_samples and roi_samples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss terms of one batch, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub objectness: f64,
    pub box_regression: f64,
    pub roi_classification: f64,
    pub temporal_classification: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.objectness
            + self.box_regression
            + self.roi_classification
            + self.temporal_classification
    }

    fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Zero-based batch index.
    pub batch: u64,
    /// Learning rate applied in this batch.
    pub lr: f64,
    pub losses: LossComponents,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str =
    "batch,lr,total,objectness,box_regression,roi_classification,temporal_classification";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.batch,
                r.lr,
                l.total(),
                l.objectness,
                l.box_regression,
                l.roi_classification,
                l.temporal_classification
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    /// Mean total loss over rows `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.rows[range];
        rows.iter().map(|r| r.losses.total()).sum::<f64>() / rows.len() as f64
    }
}

/// A mined false positive in original image coordinates.
#[derive(Debug, Clone, Copy)]
struct HardNegative {
    dataset: usize,
    z: usize,
    t: usize,
    bbox: BBox,
}

/// Per-dataset lookup of annotated boxes.
struct Indexed<'a> {
    data: &'a Dataset,
    truth: BTreeMap<(usize, usize), Vec<BBox>>,
}

/// One classifier window: slice `z`, scored frame `f`, centre, label.
struct TemporalItem {
    dataset: usize,
    z: usize,
    f: usize,
    cx: f64,
    cy: f64,
    positive: bool,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    sets: Vec<Indexed<'a>>,
    positives: Vec<(usize, usize, usize)>,
    /// `(dataset, event index, (z, t))` over every annotated box.
    event_boxes: Vec<(usize, usize, (usize, usize))>,
    pool: VecDeque<HardNegative>,
    rng: ChaCha8Rng,
}

/// Trains a freshly initialised cascade. The same datasets and config
/// always produce the same weights and log.
pub fn train_cascade(
    datasets: &[&Dataset],
    config: &TrainConfig,
) -> Result<(Cascade, TrainingLog)> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("no training datasets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cascade = Cascade::new(&config.network, &mut rng)?;
    let log = train_existing(&mut cascade, datasets, config, rng)?;
    Ok((cascade, log))
}

fn train_existing(
    cascade: &mut Cascade,
    datasets: &[&Dataset],
    config: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<TrainingLog> {
    let [cw, ch] = config.augment.crop_size;
    let mut sets = Vec::new();
    let mut positives = Vec::new();
    let mut event_boxes = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        let dims = d.volume.dims();
        if dims.x < cw || dims.y < ch {
            return Err(Error::CropTooLarge {
                crop_w: cw,
                crop_h: ch,
                image_w: dims.x,
                image_h: dims.y,
            });
        }
        for e in &d.events {
            e.validate(dims)?;
        }
        let truth = truth_by_slice(&d.events);
        positives.extend(truth.keys().map(|&(z, t)| (i, z, t)));
        for (k, e) in d.events.iter().enumerate() {
            event_boxes.extend(e.boxes.keys().map(|&zt| (i, k, zt)));
        }
        sets.push(Indexed { data: d, truth });
    }
    let mut trainer = Trainer {
        config,
        sets,
        positives,
        event_boxes,
        pool: VecDeque::new(),
        rng,
    };
    let mut log = TrainingLog::default();
    for batch in 0..config.max_batches {
        let (losses, g1, g2) = match trainer.batch(cascade) {
            Err(Error::Nn(mitodet_nn::NnError::NonFinite(_))) => {
                return Err(Error::Diverged { batch })
            }
            other => other?,
        };
        if !losses.is_finite() || g1.values().chain(g2.values()).any(|g| !g.all_finite()) {
            return Err(Error::Diverged { batch });
        }
        let mut lr = config.optimizer.learning_rate(batch);
        for (name, params) in cascade.stage1.layers_mut() {
            let g = g1
                .get(name)
                .cloned()
                .unwrap_or_else(|| ParamGrads::zeros_like(params));
            params.set_grads(&g)?;
            lr = mitodet_nn::adam_step(params, &config.optimizer, batch)?;
        }
        for (name, params) in cascade.stage2.layers_mut() {
            let g = g2
                .get(name)
                .cloned()
                .unwrap_or_else(|| ParamGrads::zeros_like(params));
            params.set_grads(&g)?;
            mitodet_nn::adam_step(params, &config.optimizer, batch)?;
            params.clear_grads();
        }
        for (_, params) in cascade.stage1.layers_mut() {
            params.clear_grads();
        }
        log.rows.push(LogRow { batch, lr, losses });
    }
    Ok(log)
}

fn scale_grads(grads: &mut GradMap, factor: f64) {
    for g in grads.values_mut() {
        g.scale(factor);
    }
}

fn merge(into: &mut GradMap, from: GradMap) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(k, g);
            }
        }
    }
}

impl Trainer<'_> {
    fn batch(&mut self, cascade: &Cascade) -> Result<(LossComponents, GradMap, GradMap)> {
        let n = self.config.batch_slices;
        let mut losses = LossComponents::default();
        let mut g1 = GradMap::new();
        for slot in 0..n {
            let (l, g) = self.detector_slot(cascade, slot)?;
            losses.objectness += l.objectness / n as f64;
            losses.box_regression += l.box_regression / n as f64;
            losses.roi_classification += l.roi_classification / n as f64;
            let mut g = g;
            scale_grads(&mut g, 1.0 / n as f64);
            merge(&mut g1, g);
        }
        let (temporal, g2) = self.temporal_batch(cascade)?;
        losses.temporal_classification = temporal;
        Ok((losses, g1, g2))
    }

    /// Picks `(dataset, z, t)` and an optional crop focus for one slot.
    fn pick_slot(&mut self, slot: usize) -> (usize, usize, usize, Option<BBox>) {
        let s = &self.config.sampling;
        let want_positive = !self.positives.is_empty()
            && (slot == 0 || self.rng.random::<f64>() < s.positive_slot_prob);
        if want_positive {
            let (d, z, t) = self.positives[self.rng.random_range(0..self.positives.len())];
            let boxes = &self.sets[d].truth[&(z, t)];
            let focus = boxes[self.rng.random_range(0..boxes.len())];
            return (d, z, t, Some(focus));
        }
        if !self.pool.is_empty() && self.rng.random::<f64>() < s.hard_negative_slot_prob {
            let h = self.pool[self.rng.random_range(0..self.pool.len())];
            return (h.dataset, h.z, h.t, Some(h.bbox));
        }
        let (d, z, t, b) = self.bright_window();
        (d, z, t, Some(b))
    }

    /// A random slice and a window on the brightest of a few random pixels
    /// in it, which usually lands on a cell.
    fn bright_window(&mut self) -> (usize, usize, usize, BBox) {
        let d = self.rng.random_range(0..self.sets.len());
        let volume = &self.sets[d].data.volume;
        let dims = volume.dims();
        let (z, t) = (
            self.rng.random_range(0..dims.z),
            self.rng.random_range(0..dims.t),
        );
        let mut best = (f32::NEG_INFINITY, 0, 0);
        for _ in 0..self.config.sampling.bright_probes.max(1) {
            let (x, y) = (
                self.rng.random_range(0..dims.x),
                self.rng.random_range(0..dims.y),
            );
            let v = volume.get(x, y, z, t);
            if v > best.0 {
                best = (v, x, y);
            }
        }
        let b = BBox::from_center(best.1 as f64 + 0.5, best.2 as f64 + 0.5, 10.0, 10.0);
        (d, z, t, b)
    }

    fn detector_slot(
        &mut self,
        cascade: &Cascade,
        slot: usize,
    ) -> Result<(LossComponents, GradMap)> {
        let cfg = self.config;
        let s = &cfg.sampling;
        let w = &cfg.loss_weights;
        let net = &cascade.stage1;
        let (d, z, t, focus) = self.pick_slot(slot);
        let volume = &self.sets[d].data.volume;
        let dims = volume.dims();
        let truth: Vec<BBox> = self.sets[d].truth.get(&(z, t)).cloned().unwrap_or_default();
        let triplet = extract_slice_triplet(volume, z, t)?;
        let sample = augment_sample_detailed(
            &triplet,
            &truth,
            &cfg.augment,
            focus.as_ref(),
            &mut self.rng,
        )?;
        // Rotations inflate corner hulls; the transformed inscribed ellipse
        // gives tighter targets for round cells.
        let gts: Vec<BBox> = sample
            .kept
            .iter()
            .filter_map(|&i| {
                ellipse_box(&truth[i], &sample.affine).clip(
                    cfg.augment.crop_size[0] as f64,
                    cfg.augment.crop_size[1] as f64,
                )
            })
            .collect();
        let gts = &gts;
        let fwd = net.forward(&sample.triplet)?;
        let (width, height) = (fwd.width, fwd.height);

        // anchor targets
        let (anchors, _) = net.anchor_scores(&fwd);
        let a = net.config.anchors.anchors_per_cell();
        let cells = fwd.obj.shape()[1] * fwd.obj.shape()[2];
        let mut best_iou = vec![0.0f64; anchors.len()];
        let mut best_gt = vec![0usize; anchors.len()];
        for (i, an) in anchors.iter().enumerate() {
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(an, gt);
                if v > best_iou[i] {
                    best_iou[i] = v;
                    best_gt[i] = g;
                }
            }
        }
        let mut positive = vec![false; anchors.len()];
        for (i, &v) in best_iou.iter().enumerate() {
            positive[i] = v >= s.anchor_positive_iou;
        }
        for (g, gt) in gts.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (i, an) in anchors.iter().enumerate() {
                let v = iou(an, gt);
                if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            if let Some((i, _)) = best {
                positive[i] = true;
                best_gt[i] = g;
            }
        }
        let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| positive[i]).collect();
        let mut neg: Vec<usize> = (0..anchors.len())
            .filter(|&i| !positive[i] && best_iou[i] < s.anchor_negative_iou)
            .collect();
        pos.shuffle(&mut self.rng);
        neg.shuffle(&mut self.rng);
        let max_pos = ((s.anchor_samples as f64 * s.anchor_positive_fraction).floor() as usize)
            .min(pos.len());
        pos.truncate(max_pos);
        let neg_cap = if pos.is_empty() {
            s.anchor_samples
        } else {
            (s.anchor_negative_ratio * pos.len() as f64).ceil() as usize
        };
        neg.truncate((s.anchor_samples - pos.len()).min(neg_cap));
        let sampled = pos.len() + neg.len();

        let mut d_obj = vec![0.0; fwd.obj.len()];
        let mut d_reg = vec![0.0; fwd.reg.len()];
        let mut obj_loss = 0.0;
        let ov = fwd.obj.values();
        for (&i, label) in pos
            .iter()
            .map(|i| (i, 1usize))
            .chain(neg.iter().map(|i| (i, 0usize)))
        {
            let (cell, k) = (i / a, i % a);
            let (ib, ifg) = ((2 * k) * cells + cell, (2 * k + 1) * cells + cell);
            let l = softmax_cross_entropy(&Tensor::from_vec(vec![ov[ib], ov[ifg]]), label)?;
            obj_loss += l.loss / sampled as f64;
            d_obj[ib] += w.objectness * l.grad.values()[0] / sampled as f64;
            d_obj[ifg] += w.objectness * l.grad.values()[1] / sampled as f64;
        }
        let mut reg_loss = 0.0;
        let npos = pos.len().max(1) as f64;
        for &i in &pos {
            let target = encode_deltas(&anchors[i], &gts[best_gt[i]]);
            let pred = net.anchor_deltas(&fwd, i);
            let l = smooth_l1(
                &Tensor::from_vec(pred.to_vec()),
                &Tensor::from_vec(target.to_vec()),
            )?;
            reg_loss += l.loss / npos;
            let (cell, k) = (i / a, i % a);
            for j in 0..4 {
                d_reg[(4 * k + j) * cells + cell] += w.box_regression * l.grad.values()[j] / npos;
            }
        }

        // ROI sampling
        let mut candidates = ranked_proposals(net, &fwd, s.roi_candidates);
        self.mine_hard_negatives(
            net,
            &fwd,
            &sample.affine,
            &truth,
            (d, z, t),
            (dims.x, dims.y),
        )?;
        for gt in gts {
            candidates.push(*gt);
            for _ in 0..2 {
                let j = jitter_box(gt, 0.2, &mut self.rng);
                if let Some(c) = j.clip(width as f64, height as f64) {
                    candidates.push(c);
                }
            }
        }
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for c in candidates {
            let best = gts
                .iter()
                .enumerate()
                .map(|(g, gt)| (g, iou(&c, gt)))
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match best {
                Some((g, v)) if v >= s.roi_foreground_iou => fg.push((c, Some(g))),
                _ => bg.push((c, None)),
            }
        }
        fg.shuffle(&mut self.rng);
        bg.shuffle(&mut self.rng);
        let max_fg =
            ((s.roi_samples as f64 * s.roi_foreground_fraction).ceil() as usize).min(fg.len());
        fg.truncate(max_fg);
        bg.truncate(s.roi_samples - fg.len());
        let rois: Vec<(BBox, Option<usize>)> = fg.into_iter().chain(bg).collect();

        let mut roi_cls = 0.0;
        let mut roi_reg = 0.0;
        let nroi = rois.len().max(1) as f64;
        let nfg = rois.iter().filter(|r| r.1.is_some()).count().max(1) as f64;
        let mut roi_fwds = Vec::with_capacity(rois.len());
        for (roi, g) in &rois {
            let r = net.roi_forward(&fwd, roi)?;
            let o = r.out.values();
            let mut grad = [0.0; 6];
            let l = softmax_cross_entropy(
                &Tensor::from_vec(o[..2].to_vec()),
                usize::from(g.is_some()),
            )?;
            roi_cls += l.loss / nroi;
            grad[0] = w.roi_classification * l.grad.values()[0] / nroi;
            grad[1] = w.roi_classification * l.grad.values()[1] / nroi;
            if let Some(g) = g {
                let target = encode_deltas(roi, &gts[*g]);
                let lr = smooth_l1(
                    &Tensor::from_vec(o[2..].to_vec()),
                    &Tensor::from_vec(target.to_vec()),
                )?;
                roi_reg += lr.loss / nfg;
                for j in 0..4 {
                    grad[2 + j] = w.box_regression * lr.grad.values()[j] / nfg;
                }
            }
            roi_fwds.push((r, grad));
        }
        let mut grads = GradMap::new();
        let refs: Vec<_> = roi_fwds.iter().map(|(r, g)| (r, *g)).collect();
        net.backward(
            &fwd,
            &Tensor::new(fwd.obj.shape().to_vec(), d_obj)?,
            &Tensor::new(fwd.reg.shape().to_vec(), d_reg)?,
            &refs,
            &mut grads,
        )?;
        Ok((
            LossComponents {
                objectness: w.objectness * obj_loss,
                box_regression: w.box_regression * (reg_loss + roi_reg),
                roi_classification: w.roi_classification * roi_cls,
                temporal_classification: 0.0,
            },
            grads,
        ))
    }

    /// Adds confident proposals far from every annotation to the pool.
    fn mine_hard_negatives(
        &mut self,
        net: &crate::stage1::Stage1Net,
        fwd: &crate::stage1::Stage1Forward,
        affine: &Affine,
        truth: &[BBox],
        (d, z, t): (usize, usize, usize),
        (w, h): (usize, usize),
    ) -> Result<()> {
        let cap = self.config.sampling.hard_negative_capacity;
        if cap == 0 {
            return Ok(());
        }
        let inverse = affine.inverse()?;
        for p in net.proposals(fwd, &net.config.anchors) {
            let Some(orig) = transform_box(&p, &inverse, (w as f64, h as f64))? else {
                continue;
            };
            if truth
                .iter()
                .all(|g| iou(&orig, g) < self.config.sampling.anchor_negative_iou)
            {
                if self.pool.len() == cap {
                    self.pool.pop_front();
                }
                self.pool.push_back(HardNegative {
                    dataset: d,
                    z,
                    t,
                    bbox: orig,
                });
            }
        }
        Ok(())
    }

    fn label_window(&self, d: usize, z: usize, f: usize, b: &BBox) -> bool {
        self.sets[d].truth.get(&(z, f)).is_some_and(|gs| {
            gs.iter()
                .any(|g| iou(b, g) >= self.config.sampling.temporal_positive_iou)
        })
    }

    fn temporal_items(&mut self) -> Vec<TemporalItem> {
        let s = self.config.sampling.clone();
        let mut items = Vec::new();
        let mut push = |this: &mut Self, d: usize, z: usize, f: usize, b: BBox| {
            let (cx, cy) = b.center();
            let positive = this.label_window(d, z, f, &b);
            items.push(TemporalItem {
                dataset: d,
                z,
                f,
                cx,
                cy,
                positive,
            });
        };
        if !self.event_boxes.is_empty() {
            for _ in 0..s.temporal_event {
                let (d, e, (z, t)) =
                    self.event_boxes[self.rng.random_range(0..self.event_boxes.len())];
                let n = self.sets[d].data.volume.dims().t;
                let b = self.sets[d].data.events[e].boxes[&(z, t)];
                let f =
                    (t as i64 + self.rng.random_range(-1i64..=1)).clamp(0, n as i64 - 1) as usize;
                let j = shift_box(&b, s.jitter, &mut self.rng);
                push(self, d, z, f, j);
            }
            for _ in 0..s.temporal_rest {
                let (d, e, (z, _)) =
                    self.event_boxes[self.rng.random_range(0..self.event_boxes.len())];
                let n = self.sets[d].data.volume.dims().t;
                let ev = &self.sets[d].data.events[e];
                let frames = ev.frames();
                let outside: Vec<usize> = (0..n)
                    .filter(|f| {
                        !frames.contains(f)
                            && !frames.contains(&(f + 1))
                            && (*f == 0 || !frames.contains(&(f - 1)))
                    })
                    .collect();
                if outside.is_empty() {
                    continue;
                }
                let f = outside[self.rng.random_range(0..outside.len())];
                let b = *ev.boxes.values().next().expect("validated event");
                let j = shift_box(&b, s.jitter, &mut self.rng);
                push(self, d, z, f, j);
            }
        }
        if !self.pool.is_empty() {
            for _ in 0..s.temporal_hard {
                let h = self.pool[self.rng.random_range(0..self.pool.len())];
                let n = self.sets[h.dataset].data.volume.dims().t;
                let f =
                    (h.t as i64 + self.rng.random_range(-1i64..=1)).clamp(0, n as i64 - 1) as usize;
                let j = shift_box(&h.bbox, s.jitter, &mut self.rng);
                push(self, h.dataset, h.z, f, j);
            }
        }
        for _ in 0..s.temporal_bright {
            let (d, z, f, b) = self.bright_window();
            push(self, d, z, f, b);
        }
        for _ in 0..s.temporal_random {
            let d = self.rng.random_range(0..self.sets.len());
            let dims = self.sets[d].data.volume.dims();
            let side = 12.0;
            let cx = self.rng.random_range(0.0..dims.x as f64);
            let cy = self.rng.random_range(0.0..dims.y as f64);
            let b = BBox::from_center(cx, cy, side, side);
            let z = self.rng.random_range(0..dims.z);
            let f = self.rng.random_range(0..dims.t);
            push(self, d, z, f, b);
        }
        items
    }

    fn temporal_batch(&mut self, cascade: &Cascade) -> Result<(f64, GradMap)> {
        let net = &cascade.stage2;
        let w = self.config.loss_weights.temporal_classification;
        let items = self.temporal_items();
        let mut grads = GradMap::new();
        if items.is_empty() {
            return Ok((0.0, grads));
        }
        let n = items.len() as f64;
        let [lo, hi] = self.config.sampling.temporal_noise_percent_range;
        let mut loss = 0.0;
        for it in &items {
            let volume = &self.sets[it.dataset].data.volume;
            let stack = temporal_stack(volume, it.z, it.f, it.cx, it.cy, net.config.crop_size)?;
            let mut stack = dihedral(&stack, self.rng.random_range(0..8u8));
            let sigma = if lo == hi {
                lo
            } else {
                self.rng.random_range(lo..=hi)
            } / 100.0;
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                for v in stack.values_mut() {
                    *v += noise.sample(&mut self.rng);
                }
            }
            let fwd = net.forward(&stack)?;
            let l = softmax_cross_entropy(&fwd.logits, usize::from(it.positive))?;
            loss += l.loss / n;
            net.backward(&fwd, &l.grad.scale(w / n), &mut grads)?;
        }
        Ok((w * loss, grads))
    }
}

/// Top-scoring anchors regardless of the score threshold, decoded,
/// clipped and suppressed at IoU 0.7.
fn ranked_proposals(
    net: &crate::stage1::Stage1Net,
    fwd: &crate::stage1::Stage1Forward,
    count: usize,
) -> Vec<BBox> {
    let (anchors, probs) = net.anchor_scores(fwd);
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let boxes: Vec<BBox> = order
        .into_iter()
        .take(count * 4)
        .filter_map(|i| {
            decode_deltas(&anchors[i].with_score(probs[i]), &net.anchor_deltas(fwd, i))
                .clip(fwd.width as f64, fwd.height as f64)
        })
        .filter(|b| b.width() >= 1.0 && b.height() >= 1.0)
        .collect();
    let mut kept = nms(&boxes, 0.7);
    kept.truncate(count);
    kept
}

/// Axis-aligned bounds of the ellipse inscribed in `b` after `affine`.
fn ellipse_box(b: &BBox, affine: &Affine) -> BBox {
    let (cx, cy) = b.center();
    let (u, v) = affine.apply(cx, cy);
    let (a, c) = (b.width() / 2.0, b.height() / 2.0);
    let m = &affine.m;
    let hw = (m[0][0] * a).hypot(m[0][1] * c);
    let hh = (m[1][0] * a).hypot(m[1][1] * c);
    BBox::unscored(u - hw, v - hh, u + hw, v + hh).with_score(b.score)
}

/// Random shift of up to `frac` of the box size per coordinate, with a
/// matching random rescale.
fn jitter_box<R: Rng>(b: &BBox, frac: f64, rng: &mut R) -> BBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let dx = rng.random_range(-frac..=frac) * w;
    let dy = rng.random_range(-frac..=frac) * h;
    let sw = 1.0 + rng.random_range(-frac..=frac);
    let sh = 1.0 + rng.random_range(-frac..=frac);
    BBox::from_center(cx + dx, cy + dy, w * sw, h * sh)
}

fn shift_box<R: Rng>(b: &BBox, max: f64, rng: &mut R) -> BBox {
    if max <= 0.0 {
        return *b;
    }
    let (cx, cy) = b.center();
    BBox::from_center(
        cx + rng.random_range(-max..=max),
        cy + rng.random_range(-max..=max),
        b.width(),
        b.height(),
    )
}

/// One of the eight symmetries of the square applied to each channel of
/// a `[C, S, S]` tensor: bit 0 transposes, bit 1 flips x, bit 2 flips y.
pub fn dihedral(t: &Tensor, k: u8) -> Tensor {
    let s = t.shape()[1];
    let c = t.shape()[0];
    let v = t.values();
    let mut out = vec![0.0; v.len()];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let (mut sx, mut sy) = (x, y);
                if k & 2 != 0 {
                    sx = s - 1 - sx;
                }
                if k & 4 != 0 {
                    sy = s - 1 - sy;
                }
                if k & 1 != 0 {
                    std::mem::swap(&mut sx, &mut sy);
                }
                out[(ch * s + y) * s + x] = v[(ch * s + sy) * s + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, GeneratorConfig};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.network.stage1.backbone_channels = [4, 8];
        c.network.stage1.fused_channels = 8;
        c.network.stage1.head_channels = 8;
        c.network.stage1.roi_hidden = 16;
        c.network.stage2.channels = [4, 4];
        c.network.stage2.crop_size = 24;
        c.augment.crop_size = [32, 32];
        c.max_batches = 3;
        c.batch_slices = 2;
        c.optimizer.lr_initial = 1e-3;
        c.optimizer.lr_after = 1e-4;
        c.optimizer.lr_switch_batch = 2;
        c
    }

    fn tiny_data() -> Dataset {
        let g = GeneratorConfig {
            dims: [64, 64, 4],
            frame_count: 8,
            event_count_range: [1, 1],
            normal_cell_count_range: [2, 3],
            border_margin: 8.0,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let (v, e) = generate_sequence(&g).unwrap();
        Dataset::new(v, e)
    }

    #[test]
    fn deterministic_and_logged() {
        let d = tiny_data();
        let cfg = tiny_config();
        let (a, la) = train_cascade(&[&d], &cfg).unwrap();
        let (b, lb) = train_cascade(&[&d], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let lrs: Vec<f64> = la.rows.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-4]);
        let csv = la.to_csv();
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn rejects_empty_and_bad_configs() {
        assert!(matches!(
            train_cascade(&[], &tiny_config()),
            Err(Error::Empty(_))
        ));
        let d = tiny_data();
        let mut c = tiny_config();
        c.batch_slices = 0;
        assert!(train_cascade(&[&d], &c).is_err());
        let mut c = tiny_config();
        c.augment.crop_size = [36, 36];
        assert!(train_cascade(&[&d], &c).is_err());
        let mut c = tiny_config();
        c.augment.crop_size = [64, 64];
        assert!(matches!(
            train_cascade(&[&d], &c),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn huge_rate_diverges() {
        let d = tiny_data();
        let mut c = tiny_config();
        c.optimizer.lr_initial = 1e300;
        c.optimizer.lr_after = 1e300;
        c.max_batches = 20;
        let r = train_cascade(&[&d], &c);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn dihedral_group() {
        let t = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(dihedral(&t, 0), t);
        for k in 0..8u8 {
            let d = dihedral(&t, k);
            let mut v = d.values().to_vec();
            v.sort_by(f64::total_cmp);
            assert_eq!(v, t.values());
        }
        // transpose
        assert_eq!(dihedral(&t, 1).values()[1], 3.0);
        // mirror in x twice is identity
        assert_eq!(dihedral(&dihedral(&t, 2), 2), t);
    }
}
