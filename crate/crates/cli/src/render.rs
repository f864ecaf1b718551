//! Grayscale slice images with box outlines burned in.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use mitodet::detections::VolumeDetections;
use mitodet::geometry::BBox;
use mitodet::volume::{GroundTruthEvent, Slice, Volume4D};

pub const DETECTION_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const TRUTH_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

pub fn file_name(z: usize, t: usize) -> String {
    format!("slice_z{z:03}_t{t:04}.png")
}

fn to_image(s: &Slice) -> RgbImage {
    RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let v = (f64::from(s.get(x as usize, y as usize)).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// One-pixel outline along the border pixels of `b`: columns
/// `floor(x0) ..= ceil(x1) - 1` and rows `floor(y0) ..= ceil(y1) - 1`,
/// clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    let left = b.x0.floor() as i64;
    let top = b.y0.floor() as i64;
    let right = b.x1.ceil() as i64 - 1;
    let bottom = b.y1.ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in left..=right {
        put(x, top);
        put(x, bottom);
    }
    for y in top..=bottom {
        put(left, y);
        put(right, y);
    }
}

/// Renders the requested slices; with no index given on an axis, every
/// slice holding a detection or truth box is rendered.
pub fn render_slices(
    volume: &Volume4D,
    detections: &VolumeDetections,
    truth: &[GroundTruthEvent],
    z: Option<usize>,
    t: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let dims = volume.dims();
    let keys: BTreeSet<(usize, usize)> = match (z, t) {
        (Some(z), Some(t)) => BTreeSet::from([(z, t)]),
        _ => detections
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(k, _)| *k)
            .chain(truth.iter().flat_map(|e| e.boxes.keys().copied()))
            .filter(|&(kz, kt)| z.is_none_or(|z| z == kz) && t.is_none_or(|t| t == kt))
            .collect(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::with_capacity(keys.len());
    // keys are (z, t); write in (t, z) order for stable listings
    let mut ordered: Vec<_> = keys.into_iter().collect();
    ordered.sort_by_key(|&(z, t)| (t, z));
    for (z, t) in ordered {
        debug_assert!(z < dims.z && t < dims.t);
        let mut img = to_image(&volume.slice(z, t)?);
        for e in truth {
            if let Some(b) = e.boxes.get(&(z, t)) {
                draw_box(&mut img, b, TRUTH_COLOR);
            }
        }
        if let Some(s) = detections.get(&(z, t)) {
            for b in &s.boxes {
                draw_box(&mut img, b, DETECTION_COLOR);
            }
        }
        let path = out.join(file_name(z, t));
        img.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
