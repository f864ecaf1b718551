//! 4D intensity volumes, annotated events and slice triplets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Volume extents `(X, Y, Z, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub t: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize, t: usize) -> Self {
        Self { x, y, z, t }
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z * self.t
    }

    pub fn frame_len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn slice_len(&self) -> usize {
        self.x * self.y
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x, self.y, self.z, self.t]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.x, self.y, self.z, self.t)
    }
}

/// One 2D image, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Slice {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "slice {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Value at integer coordinates, zero outside the image.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    /// Window of `size × size` centred on `(cx, cy)` with zero padding.
    pub fn crop_centered(&self, cx: f64, cy: f64, size: usize) -> Slice {
        let x0 = (cx - size as f64 / 2.0).round() as isize;
        let y0 = (cy - size as f64 / 2.0).round() as isize;
        let mut out = Slice::zeros(size, size);
        for v in 0..size {
            for u in 0..size {
                out.pixels[v * size + u] = self.get_or_zero(x0 + u as isize, y0 + v as isize);
            }
        }
        out
    }
}

/// Scalar field over `(x, y, z, t)` with intensities in `[0, 1]`, stored
/// x-fastest then y, z, t.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub id: String,
    dims: Dims,
    intensities: Vec<f32>,
}

impl Volume4D {
    pub fn new(id: impl Into<String>, dims: Dims, intensities: Vec<f32>) -> Result<Self> {
        if dims.voxels() == 0 {
            return Err(Error::Shape(format!("degenerate dims {dims}")));
        }
        if intensities.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "dims {dims} need {} voxels, got {}",
                dims.voxels(),
                intensities.len()
            )));
        }
        if let Some(v) = intensities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            dims,
            intensities,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, t: usize) -> usize {
        x + self.dims.x * (y + self.dims.y * (z + self.dims.z * t))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> f32 {
        self.intensities[self.index(x, y, z, t)]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.frame_len();
        &self.intensities[t * n..(t + 1) * n]
    }

    pub fn slice(&self, z: usize, t: usize) -> Result<Slice> {
        self.check_index(z, t)?;
        let n = self.dims.slice_len();
        let start = self.index(0, 0, z, t);
        Slice::new(
            self.dims.x,
            self.dims.y,
            self.intensities[start..start + n].to_vec(),
        )
    }

    pub fn check_index(&self, z: usize, t: usize) -> Result<()> {
        if z >= self.dims.z || t >= self.dims.t {
            return Err(Error::OutOfRange(format!(
                "(z={z}, t={t}) outside volume with Z={}, T={}",
                self.dims.z, self.dims.t
            )));
        }
        Ok(())
    }
}

/// Neighbour index with boundary replication: `clamp(i + offset, 0, n - 1)`.
pub fn replicate_index(i: usize, offset: isize, n: usize) -> usize {
    (i as isize + offset).clamp(0, n as isize - 1) as usize
}

/// The slices `(z-1, z, z+1)` at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub slices: [Slice; 3],
    pub center_z: usize,
    pub t: usize,
}

impl SliceTriplet {
    pub fn width(&self) -> usize {
        self.slices[0].width
    }

    pub fn height(&self) -> usize {
        self.slices[0].height
    }

    /// The z indices actually used after boundary replication.
    pub fn source_indices(center_z: usize, depth: usize) -> [usize; 3] {
        [
            replicate_index(center_z, -1, depth),
            center_z,
            replicate_index(center_z, 1, depth),
        ]
    }
}

/// Slices `(z-1, z, z+1)` at frame `t`; neighbours outside the volume
/// replicate the boundary slice.
pub fn extract_slice_triplet(volume: &Volume4D, z: usize, t: usize) -> Result<SliceTriplet> {
    volume.check_index(z, t)?;
    let [a, b, c] = SliceTriplet::source_indices(z, volume.dims().z);
    Ok(SliceTriplet {
        slices: [
            volume.slice(a, t)?,
            volume.slice(b, t)?,
            volume.slice(c, t)?,
        ],
        center_z: z,
        t,
    })
}

/// One annotated mitosis: a box on every `(z, t)` slice the event covers.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthEvent {
    pub event_id: u32,
    pub boxes: BTreeMap<(usize, usize), BBox>,
}

impl GroundTruthEvent {
    pub fn frames(&self) -> std::collections::BTreeSet<usize> {
        self.boxes.keys().map(|&(_, t)| t).collect()
    }

    pub fn slices(&self) -> std::collections::BTreeSet<usize> {
        self.boxes.keys().map(|&(z, _)| z).collect()
    }

    /// Non-empty, inside `dims`, and 8-connected on the `(z, t)` grid.
    pub fn validate(&self, dims: Dims) -> Result<()> {
        let err = |m: String| Error::Annotation(format!("event {}: {m}", self.event_id));
        if self.boxes.is_empty() {
            return Err(err("no boxes".into()));
        }
        for (&(z, t), b) in &self.boxes {
            if z >= dims.z || t >= dims.t {
                return Err(err(format!("(z={z}, t={t}) outside {dims}")));
            }
            if !b.is_valid() || !b.within(dims.x as f64, dims.y as f64) {
                return Err(err(format!(
                    "box {b:?} at (z={z}, t={t}) invalid for {dims}"
                )));
            }
        }
        if !is_connected(self.boxes.keys().copied()) {
            return Err(err("(z, t) extent is not connected".into()));
        }
        Ok(())
    }
}

/// Whether a set of grid cells is connected under the 8-neighbourhood.
pub fn is_connected(cells: impl IntoIterator<Item = (usize, usize)>) -> bool {
    let cells: std::collections::BTreeSet<(usize, usize)> = cells.into_iter().collect();
    let Some(&start) = cells.iter().next() else {
        return true;
    };
    let mut seen = std::collections::BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some((z, t)) = stack.pop() {
        for dz in -1isize..=1 {
            for dt in -1isize..=1 {
                let (nz, nt) = (z as isize + dz, t as isize + dt);
                if nz < 0 || nt < 0 {
                    continue;
                }
                let n = (nz as usize, nt as usize);
                if cells.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
    }
    seen.len() == cells.len()
}
