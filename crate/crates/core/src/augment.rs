//! Training-time augmentation of slice triplets with consistent box
//! transforms.
//!
//! Coordinates are continuous with pixel `i` covering `[i, i + 1)`, so
//! pixel centres sit at `i + 0.5`. All geometric steps are composed into a
//! single affine map and the output is resampled once through its inverse.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::volume::{Slice, SliceTriplet};

/// Boxes keeping less than this fraction of their transformed area after
/// the crop are dropped.
pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// `(width, height)` of the output crop.
    pub crop_size: [usize; 2],
    /// Degrees.
    pub rotation_range: [f64; 2],
    /// Noise standard deviation as a percentage of the intensity range.
    pub noise_percent_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub mirror_prob: f64,
    /// Offset as a fraction of the (resized) image extent.
    pub translate_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: [224, 224],
            rotation_range: [0.0, 180.0],
            noise_percent_range: [1.0, 3.0],
            scale_range: [0.9, 1.1],
            mirror_prob: 0.5,
            translate_range: [-0.1, 0.1],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op settings for an image of the given size.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop_size: [width, height],
            rotation_range: [0.0, 0.0],
            noise_percent_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            mirror_prob: 0.0,
            translate_range: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(ordered(self.rotation_range)
            && ordered(self.noise_percent_range)
            && ordered(self.scale_range)
            && ordered(self.translate_range))
        {
            return Err(Error::Config(
                "augment: ranges must satisfy lo <= hi".into(),
            ));
        }
        if self.scale_range[0] <= 0.0 || self.noise_percent_range[0] < 0.0 {
            return Err(Error::Config(
                "augment: scale must be positive and noise non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config("augment: mirror_prob outside [0, 1]".into()));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Config("augment: crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// `p' = M · (x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Counter-clockwise rotation in image coordinates about `(cx, cy)`.
    /// Multiples of 90° use exact sines and cosines.
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = exact_sin_cos(degrees);
        // p' = R (p - c) + c
        Self {
            m: [[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]],
        }
    }

    /// Horizontal mirror inside an image of the given width: `x' = W - x`.
    pub fn mirror_x(width: f64) -> Self {
        Self {
            m: [[-1.0, 0.0, width], [0.0, 1.0, 0.0]],
        }
    }

    /// The map applying `self` first, then `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        let a = &next.m;
        let b = &self.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine { m }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::SingularMatrix);
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }
}

fn exact_sin_cos(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        degrees.to_radians().sin_cos()
    }
}

/// Axis-aligned hull of the transformed corners, clipped to
/// `[0, width) × [0, height)`. `None` when nothing remains.
pub fn transform_box(b: &BBox, affine: &Affine, clip: (f64, f64)) -> Result<Option<BBox>> {
    Ok(transform_box_hull(b, affine)?.and_then(|h| h.clip(clip.0, clip.1)))
}

fn transform_box_hull(b: &BBox, affine: &Affine) -> Result<Option<BBox>> {
    affine.inverse()?;
    let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)];
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (u, v) = affine.apply(x, y);
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    Ok((x0 < x1 && y0 < y1).then_some(BBox {
        x0,
        y0,
        x1,
        y1,
        score: b.score,
    }))
}

/// Resamples `src` into a `width × height` image through `affine`
/// (source → destination) with bilinear interpolation and zero fill.
pub fn warp_slice(src: &Slice, affine: &Affine, width: usize, height: usize) -> Result<Slice> {
    let inv = affine.inverse()?;
    let mut out = Slice::zeros(width, height);
    for v in 0..height {
        for u in 0..width {
            let (sx, sy) = inv.apply(u as f64 + 0.5, v as f64 + 0.5);
            out.pixels[v * width + u] = bilinear(src, sx - 0.5, sy - 0.5);
        }
    }
    Ok(out)
}

/// Bilinear sample at continuous pixel-index coordinates, zero outside.
fn bilinear(src: &Slice, x: f64, y: f64) -> f32 {
    let fx = x.floor();
    let fy = y.floor();
    let (ax, ay) = (x - fx, y - fy);
    let (ix, iy) = (fx as isize, fy as isize);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            if wx == 0.0 {
                continue;
            }
            acc += wx * wy * f64::from(src.get_or_zero(ix + dx, iy + dy));
        }
    }
    acc as f32
}

/// Parameters drawn for one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub angle_degrees: f64,
    pub mirror: bool,
    pub translate: (f64, f64),
    pub crop_origin: (usize, usize),
    pub noise_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub triplet: SliceTriplet,
    pub boxes: Vec<BBox>,
    /// Index into the input boxes for each surviving output box.
    pub kept: Vec<usize>,
    /// Original image coordinates → crop coordinates.
    pub affine: Affine,
    pub params: AugmentParams,
}

fn draw<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

pub fn augment_sample<R: Rng>(
    triplet: &SliceTriplet,
    boxes: &[BBox],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(SliceTriplet, Vec<BBox>)> {
    let s = augment_sample_detailed(triplet, boxes, config, None, rng)?;
    Ok((s.triplet, s.boxes))
}

/// Like [`augment_sample`], additionally returning the transform. When
/// `focus` is given the crop is placed so that the focus box centre lies
/// inside it whenever possible.
pub fn augment_sample_detailed<R: Rng>(
    triplet: &SliceTriplet,
    boxes: &[BBox],
    config: &AugmentConfig,
    focus: Option<&BBox>,
    rng: &mut R,
) -> Result<AugmentedSample> {
    config.validate()?;
    let (w, h) = (triplet.width(), triplet.height());
    let scale = draw(rng, config.scale_range);
    let w1 = ((w as f64 * scale).round() as usize).max(1);
    let h1 = ((h as f64 * scale).round() as usize).max(1);
    let [cw, ch] = config.crop_size;
    if cw > w1 || ch > h1 {
        return Err(Error::CropTooLarge {
            crop_w: cw,
            crop_h: ch,
            image_w: w1,
            image_h: h1,
        });
    }
    let angle = draw(rng, config.rotation_range);
    let mirror = config.mirror_prob > 0.0 && rng.random::<f64>() < config.mirror_prob;
    let tx = draw(rng, config.translate_range) * w1 as f64;
    let ty = draw(rng, config.translate_range) * h1 as f64;

    let (w1f, h1f) = (w1 as f64, h1 as f64);
    let mut affine = Affine::scale(w1f / w as f64, h1f / h as f64).then(&Affine::rotation_about(
        angle,
        w1f / 2.0,
        h1f / 2.0,
    ));
    if mirror {
        affine = affine.then(&Affine::mirror_x(w1f));
    }
    affine = affine.then(&Affine::translation(tx, ty));

    let focus_centre = focus.map(|f| {
        let (cx, cy) = f.center();
        affine.apply(cx, cy)
    });
    let ox = crop_offset(rng, w1 - cw, cw, focus_centre.map(|c| c.0));
    let oy = crop_offset(rng, h1 - ch, ch, focus_centre.map(|c| c.1));
    affine = affine.then(&Affine::translation(-(ox as f64), -(oy as f64)));

    let noise_percent = draw(rng, config.noise_percent_range);
    let sigma = noise_percent / 100.0;
    let noise =
        Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;

    let mut slices = Vec::with_capacity(3);
    for src in &triplet.slices {
        let mut out = warp_slice(src, &affine, cw, ch)?;
        if sigma > 0.0 {
            for p in out.pixels.iter_mut() {
                *p = (f64::from(*p) + noise.sample(rng)) as f32;
            }
        }
        slices.push(out);
    }
    let slices: [Slice; 3] = slices.try_into().expect("three slices");

    let mut out_boxes = Vec::new();
    let mut kept = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let Some(hull) = transform_box_hull(b, &affine)? else {
            continue;
        };
        if let Some(c) = hull.clip(cw as f64, ch as f64) {
            if c.area() >= MIN_VISIBLE_FRACTION * hull.area() {
                out_boxes.push(c);
                kept.push(i);
            }
        }
    }

    Ok(AugmentedSample {
        triplet: SliceTriplet {
            slices,
            center_z: triplet.center_z,
            t: triplet.t,
        },
        boxes: out_boxes,
        kept,
        affine,
        params: AugmentParams {
            scale,
            angle_degrees: angle,
            mirror,
            translate: (tx, ty),
            crop_origin: (ox, oy),
            noise_sigma: sigma,
        },
    })
}

/// Crop origin in `0..=max`. With a focus coordinate, restricts the
/// origin so the focus lies at least a quarter crop from either edge.
fn crop_offset<R: Rng>(rng: &mut R, max: usize, crop: usize, focus: Option<f64>) -> usize {
    let (mut lo, mut hi) = (0usize, max);
    if let Some(f) = focus {
        let margin = crop as f64 / 4.0;
        let flo = (f + margin - crop as f64).ceil().max(0.0) as usize;
        let fhi = (f - margin).floor().max(0.0) as usize;
        let (a, b) = (flo.max(lo), fhi.min(hi));
        if a <= b {
            lo = a;
            hi = b;
        } else {
            let target = (f - crop as f64 / 2.0).round().clamp(0.0, max as f64) as usize;
            lo = target;
            hi = target;
        }
    }
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}
