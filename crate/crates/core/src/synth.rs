//! Synthetic 4D sequences with annotated mitosis events.
//!
//! Cells are anisotropic Gaussian blobs. A dividing cell is round before its
//! event, then brightens and splits into two lobes along a random axis over
//! the event's frames, and afterwards persists as two dim daughters. Normal
//! cells are static, but each frame may independently show a transient
//! division-like appearance, so single frames cannot separate the two.
//!
//! A blob with half-peak radius `r` has value `A * exp(-ln2 * d² / r²)`, so
//! it drops to `A / 2` at distance `r`.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::volume::{Dims, GroundTruthEvent, Volume4D};

/// Values below `A / 2^9` are treated as zero when rendering.
const SUPPORT_RADII: f64 = 3.0;
/// Final lobe separation in units of the cell radius.
const SPLIT_SEPARATION: f64 = 2.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `(X, Y, Z)` extents.
    pub dims: [usize; 3],
    pub frame_count: usize,
    pub event_count_range: [usize; 2],
    pub normal_cell_count_range: [usize; 2],
    pub noise_sigma: f64,
    /// In-plane half-peak radius, pixels.
    pub cell_radius_range: [f64; 2],
    /// Half-peak radius along z, slices.
    pub z_radius_range: [f64; 2],
    pub division_duration_range: [usize; 2],
    pub background: f64,
    pub normal_amplitude_range: [f64; 2],
    pub event_amplitude_range: [f64; 2],
    /// Per normal cell and frame probability of a transient division-like
    /// appearance.
    pub transient_rate: f64,
    /// Minimum distance between an event centre and the x/y border, pixels.
    pub border_margin: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dims: [128, 128, 12],
            frame_count: 20,
            event_count_range: [1, 3],
            normal_cell_count_range: [20, 30],
            noise_sigma: 0.02,
            cell_radius_range: [4.0, 5.5],
            z_radius_range: [1.3, 1.8],
            division_duration_range: [4, 6],
            background: 0.1,
            normal_amplitude_range: [0.35, 0.5],
            event_amplitude_range: [0.7, 0.85],
            transient_rate: 0.02,
            border_margin: 16.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn volume_dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2], self.frame_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        let ordered_u = |r: [usize; 2]| r[0] <= r[1];
        let ordered_f = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if self.dims.contains(&0) || self.frame_count == 0 {
            return bad("dims and frame_count must be positive");
        }
        if !ordered_u(self.event_count_range)
            || !ordered_u(self.normal_cell_count_range)
            || !ordered_u(self.division_duration_range)
            || !ordered_f(self.cell_radius_range)
            || !ordered_f(self.z_radius_range)
            || !ordered_f(self.normal_amplitude_range)
            || !ordered_f(self.event_amplitude_range)
        {
            return bad("ranges must satisfy lo <= hi");
        }
        if self.cell_radius_range[0] <= 0.0 || self.z_radius_range[0] <= 0.0 {
            return bad("radii must be positive");
        }
        if self.division_duration_range[0] < 2 {
            return bad("division must last at least two frames");
        }
        if self.division_duration_range[1] > self.frame_count {
            return bad("division longer than the sequence");
        }
        if !(0.0..=1.0).contains(&self.transient_rate) || self.noise_sigma < 0.0 {
            return bad("transient_rate must be in [0, 1] and noise_sigma >= 0");
        }
        let extent = self.max_event_half_extent() + self.border_margin;
        if 2.0 * extent > self.dims[0].min(self.dims[1]) as f64 {
            return Err(Error::Config(format!(
                "generator: infeasible, a dividing cell needs {:.1} px but the volume is {}x{}",
                2.0 * extent,
                self.dims[0],
                self.dims[1]
            )));
        }
        Ok(())
    }

    fn max_event_half_extent(&self) -> f64 {
        self.cell_radius_range[1] * (SPLIT_SEPARATION * 1.15 / 2.0 + 1.0)
    }
}

/// One elliptical lobe in the x/y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Lobe {
    fn exponent(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u * u / (self.rx * self.rx) + v * v / (self.ry * self.ry)
    }

    fn reach(&self) -> f64 {
        self.rx.max(self.ry) * SUPPORT_RADII
    }
}

/// Appearance of a cell at one frame: the maximum over its lobes times a
/// z profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellShape {
    pub lobes: Vec<Lobe>,
    pub cz: f64,
    pub rz: f64,
    pub amplitude: f64,
}

impl CellShape {
    /// Field value at a voxel centre (`x + 0.5`, `y + 0.5`, `z + 0.5`).
    pub fn value_at(&self, x: usize, y: usize, z: usize) -> f64 {
        let (px, py, pz) = (x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
        let dz = (pz - self.cz) / self.rz;
        let e = self
            .lobes
            .iter()
            .map(|l| l.exponent(px, py))
            .fold(f64::INFINITY, f64::min);
        self.amplitude * (-LN_2 * (e + dz * dz)).exp()
    }

    /// Voxel window `[x0, x1) × [y0, y1) × [z0, z1)` outside which the field
    /// is negligible.
    fn support(&self, dims: Dims) -> [(usize, usize); 3] {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for l in &self.lobes {
            let r = l.reach();
            lo = (lo.0.min(l.cx - r), lo.1.min(l.cy - r));
            hi = (hi.0.max(l.cx + r), hi.1.max(l.cy + r));
        }
        let rz = self.rz * SUPPORT_RADII;
        let span = |a: f64, b: f64, n: usize| {
            let a = (a - 0.5).floor().max(0.0) as usize;
            let b = ((b - 0.5).ceil() + 1.0).clamp(0.0, n as f64) as usize;
            (a.min(n), b)
        };
        [
            span(lo.0, hi.0, dims.x),
            span(lo.1, hi.1, dims.y),
            span(self.cz - rz, self.cz + rz, dims.z),
        ]
    }

    /// Adds the field into one frame buffer (x-fastest, `X*Y*Z` values).
    fn splat(&self, frame: &mut [f64], dims: Dims) {
        let [(x0, x1), (y0, y1), (z0, z1)] = self.support(dims);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    frame[x + dims.x * (y + dims.y * z)] += self.value_at(x, y, z);
                }
            }
        }
    }

    /// Per-slice tight boxes around voxels whose value exceeds half of the
    /// frame peak.
    pub fn half_peak_boxes(&self, dims: Dims) -> BTreeMap<usize, BBox> {
        let [(x0, x1), (y0, y1), (z0, z1)] = self.support(dims);
        let mut peak = 0.0f64;
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    peak = peak.max(self.value_at(x, y, z));
                }
            }
        }
        let mut out = BTreeMap::new();
        if peak <= 0.0 {
            return out;
        }
        for z in z0..z1 {
            let mut hull: Option<(usize, usize, usize, usize)> = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    if self.value_at(x, y, z) > peak / 2.0 {
                        hull = Some(match hull {
                            None => (x, y, x, y),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                        });
                    }
                }
            }
            if let Some((a, b, c, d)) = hull {
                out.insert(
                    z,
                    BBox::unscored(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64),
                );
            }
        }
        out
    }
}

/// A cell that divides during `[start, start + duration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DividingCell {
    pub event_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub radius: f64,
    pub rz: f64,
    pub axis: f64,
    pub event_amplitude: f64,
    pub rest_amplitude: f64,
    pub start: usize,
    pub duration: usize,
}

/// Two lobes separated by `separation` along `axis`.
#[allow(clippy::too_many_arguments)]
fn split_shape(
    cx: f64,
    cy: f64,
    cz: f64,
    axis: f64,
    separation: f64,
    lobe_radius: f64,
    rz: f64,
    amplitude: f64,
) -> CellShape {
    let (s, c) = axis.sin_cos();
    let h = separation / 2.0;
    let lobe = |sign: f64| Lobe {
        cx: cx + sign * h * c,
        cy: cy + sign * h * s,
        rx: lobe_radius,
        ry: lobe_radius,
        angle: 0.0,
    };
    CellShape {
        lobes: vec![lobe(1.0), lobe(-1.0)],
        cz,
        rz,
        amplitude,
    }
}

/// Appearance at division progress `phase` in `(0, 1)`.
#[allow(clippy::too_many_arguments)]
fn division_shape(
    cx: f64,
    cy: f64,
    cz: f64,
    radius: f64,
    rz: f64,
    axis: f64,
    phase: f64,
    amplitude: f64,
) -> CellShape {
    split_shape(
        cx,
        cy,
        cz,
        axis,
        phase * SPLIT_SEPARATION * radius,
        radius * (1.0 - 0.2 * phase),
        rz,
        amplitude,
    )
}

impl DividingCell {
    pub fn is_dividing(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.duration
    }

    pub fn phase(&self, t: usize) -> f64 {
        (t - self.start + 1) as f64 / (self.duration + 1) as f64
    }

    pub fn shape_at(&self, t: usize) -> CellShape {
        if t < self.start {
            CellShape {
                lobes: vec![Lobe {
                    cx: self.cx,
                    cy: self.cy,
                    rx: self.radius,
                    ry: self.radius,
                    angle: 0.0,
                }],
                cz: self.cz,
                rz: self.rz,
                amplitude: self.rest_amplitude,
            }
        } else if self.is_dividing(t) {
            division_shape(
                self.cx,
                self.cy,
                self.cz,
                self.radius,
                self.rz,
                self.axis,
                self.phase(t),
                self.event_amplitude,
            )
        } else {
            split_shape(
                self.cx,
                self.cy,
                self.cz,
                self.axis,
                SPLIT_SEPARATION * 1.15 * self.radius,
                0.8 * self.radius,
                self.rz,
                self.rest_amplitude,
            )
        }
    }

    /// Ground-truth boxes over the division frames.
    pub fn annotation(&self, dims: Dims) -> GroundTruthEvent {
        let mut boxes = BTreeMap::new();
        for t in self.start..(self.start + self.duration).min(dims.t) {
            for (z, b) in self.shape_at(t).half_peak_boxes(dims) {
                boxes.insert((z, t), b);
            }
        }
        GroundTruthEvent {
            event_id: self.event_id,
            boxes,
        }
    }
}

/// A non-dividing cell, static apart from transient frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalCell {
    pub shape: CellShape,
    /// Frames showing a division-like appearance, with its phase and axis.
    pub transients: BTreeMap<usize, (f64, f64)>,
    pub transient_amplitude: f64,
}

impl NormalCell {
    pub fn shape_at(&self, t: usize) -> CellShape {
        match self.transients.get(&t) {
            Some(&(phase, axis)) => {
                let l = self.shape.lobes[0];
                division_shape(
                    l.cx,
                    l.cy,
                    self.shape.cz,
                    l.rx.max(l.ry),
                    self.shape.rz,
                    axis,
                    phase,
                    self.transient_amplitude,
                )
            }
            None => self.shape.clone(),
        }
    }
}

/// Generator output including the parameters behind every cell.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub volume: Volume4D,
    pub events: Vec<GroundTruthEvent>,
    pub dividing: Vec<DividingCell>,
    pub normal: Vec<NormalCell>,
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn uniform_usize<R: Rng>(rng: &mut R, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Places cell centres with a minimum separation from earlier ones.
struct Placer {
    placed: Vec<(f64, f64, f64, f64)>,
}

impl Placer {
    fn fits(&self, x: f64, y: f64, z: f64, clearance: f64) -> bool {
        self.placed.iter().all(|&(px, py, pz, pc)| {
            let dz = (z - pz).abs();
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            dz > 4.0 || d > clearance + pc
        })
    }
}

pub fn generate_scene(config: &GeneratorConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let dims = config.volume_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut placer = Placer { placed: Vec::new() };
    let (fx, fy, fz) = (dims.x as f64, dims.y as f64, dims.z as f64);

    let n_events = uniform_usize(&mut rng, config.event_count_range);
    let mut dividing = Vec::with_capacity(n_events);
    let reach = config.max_event_half_extent();
    for i in 0..n_events {
        let radius = uniform(&mut rng, config.cell_radius_range);
        let margin = config.border_margin + reach;
        let mut attempt = 0;
        let (cx, cy, cz) = loop {
            let c = (
                rng.random_range(margin..=fx - margin),
                rng.random_range(margin..=fy - margin),
                rng.random_range(0.5..=fz - 0.5),
            );
            if placer.fits(c.0, c.1, c.2, reach) {
                break c;
            }
            attempt += 1;
            if attempt > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Config(
                    "generator: cannot place events without overlap".into(),
                ));
            }
        };
        placer.placed.push((cx, cy, cz, reach));
        let duration = uniform_usize(&mut rng, config.division_duration_range);
        let latest = dims.t - duration;
        let start = if latest >= 2 {
            rng.random_range(1..latest)
        } else {
            rng.random_range(0..=latest)
        };
        dividing.push(DividingCell {
            event_id: i as u32 + 1,
            cx,
            cy,
            cz,
            radius,
            rz: uniform(&mut rng, config.z_radius_range),
            axis: rng.random_range(0.0..PI),
            event_amplitude: uniform(&mut rng, config.event_amplitude_range),
            rest_amplitude: uniform(&mut rng, config.normal_amplitude_range),
            start,
            duration,
        });
    }

    let n_normal = uniform_usize(&mut rng, config.normal_cell_count_range);
    let mut normal = Vec::with_capacity(n_normal);
    for _ in 0..n_normal {
        let r = uniform(&mut rng, config.cell_radius_range);
        let clearance = r * 1.6;
        let mut attempt = 0;
        let (cx, cy, cz) = loop {
            let c = (
                rng.random_range(r..=fx - r),
                rng.random_range(r..=fy - r),
                rng.random_range(0.5..=fz - 0.5),
            );
            if placer.fits(c.0, c.1, c.2, clearance) {
                break c;
            }
            attempt += 1;
            if attempt > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Config(
                    "generator: too many cells for the volume".into(),
                ));
            }
        };
        placer.placed.push((cx, cy, cz, clearance));
        let aniso = rng.random_range(0.8..1.0);
        let shape = CellShape {
            lobes: vec![Lobe {
                cx,
                cy,
                rx: r,
                ry: r * aniso,
                angle: rng.random_range(0.0..PI),
            }],
            cz,
            rz: uniform(&mut rng, config.z_radius_range),
            amplitude: uniform(&mut rng, config.normal_amplitude_range),
        };
        let mut transients = BTreeMap::new();
        for t in 0..dims.t {
            if rng.random::<f64>() < config.transient_rate {
                transients.insert(t, (rng.random_range(0.15..0.85), rng.random_range(0.0..PI)));
            }
        }
        normal.push(NormalCell {
            shape,
            transients,
            transient_amplitude: uniform(&mut rng, config.event_amplitude_range),
        });
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut intensities = Vec::with_capacity(dims.voxels());
    let mut frame = vec![0.0f64; dims.frame_len()];
    for t in 0..dims.t {
        frame.fill(config.background);
        for cell in &dividing {
            cell.shape_at(t).splat(&mut frame, dims);
        }
        for cell in &normal {
            cell.shape_at(t).splat(&mut frame, dims);
        }
        for v in &frame {
            let n = if config.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            intensities.push(quantize(v + n));
        }
    }

    let events = dividing.iter().map(|d| d.annotation(dims)).collect();
    let volume = Volume4D::new(format!("synthetic-{}", config.seed), dims, intensities)?;
    Ok(SyntheticScene {
        volume,
        events,
        dividing,
        normal,
    })
}

/// Clamps to `[0, 1]` and snaps to the 16-bit grid used on disk.
pub fn quantize(v: f64) -> f32 {
    let k = (v.clamp(0.0, 1.0) * 65535.0).round();
    (k / 65535.0) as f32
}

pub fn generate_sequence(config: &GeneratorConfig) -> Result<(Volume4D, Vec<GroundTruthEvent>)> {
    let scene = generate_scene(config)?;
    Ok((scene.volume, scene.events))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            dims: [64, 64, 8],
            frame_count: 12,
            normal_cell_count_range: [5, 8],
            border_margin: 4.0,
            seed: 7,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_sequence(&small()).unwrap();
        let b = generate_sequence(&small()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_sequence(&GeneratorConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn forced_event_count() {
        let cfg = GeneratorConfig {
            event_count_range: [2, 2],
            ..small()
        };
        let (_, events) = generate_sequence(&cfg).unwrap();
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = GeneratorConfig {
            dims: [16, 16, 4],
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_sequence(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn events_are_valid_annotations() {
        let (v, events) = generate_sequence(&small()).unwrap();
        for e in &events {
            e.validate(v.dims()).unwrap();
        }
    }

    #[test]
    fn half_peak_box_of_round_blob() {
        let shape = CellShape {
            lobes: vec![Lobe {
                cx: 10.0,
                cy: 10.0,
                rx: 3.0,
                ry: 3.0,
                angle: 0.0,
            }],
            cz: 0.5,
            rz: 1.5,
            amplitude: 1.0,
        };
        let boxes = shape.half_peak_boxes(Dims::new(20, 20, 1, 1));
        // voxel centres strictly inside radius 3 of (10, 10): x in 7..=12
        assert_eq!(boxes[&0], BBox::unscored(7.0, 7.0, 13.0, 13.0));
    }

    #[test]
    fn quantization_is_on_u16_grid() {
        for v in [0.0, 0.3, 0.5, 1.0, 1.7, -0.2] {
            let q = quantize(v);
            let k = (q as f64 * 65535.0).round();
            assert_eq!(quantize(k / 65535.0), q);
            assert!((0.0..=1.0).contains(&q));
        }
    }
}
