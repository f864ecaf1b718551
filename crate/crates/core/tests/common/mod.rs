//! Brute-force references shared by the oracle tests and the acceptance
//! run.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use mitodet::geometry::{iou, BBox};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 20;

/// Pixels covered by the half-open interval `[a, b)`, counted one by one.
fn covered(a: usize, b: usize) -> Vec<bool> {
    (0..GRID).map(|p| p >= a && p < b).collect()
}

/// Compares `iou` with pixel counting on every unordered pair of integer
/// boxes inside the grid, both argument orders. Returns the number of pairs
/// checked and the first disagreement.
pub fn iou_grid_sweep() -> (u64, Option<String>) {
    let intervals: Vec<(usize, usize)> = (0..GRID)
        .flat_map(|a| (a + 1..=GRID).map(move |b| (a, b)))
        .collect();
    let masks: Vec<Vec<bool>> = intervals.iter().map(|&(a, b)| covered(a, b)).collect();
    let n = intervals.len();
    // A box's pixel set is the product of its column and row sets, so pixel
    // counts of intersections factor into per-axis counts.
    let mut overlap = vec![0u32; n * n];
    let mut len = vec![0u32; n];
    for i in 0..n {
        len[i] = masks[i].iter().filter(|&&c| c).count() as u32;
        for j in 0..n {
            overlap[i * n + j] = masks[i]
                .iter()
                .zip(&masks[j])
                .filter(|(p, q)| **p && **q)
                .count() as u32;
        }
    }
    let boxes: Vec<(usize, usize, BBox)> = (0..n)
        .flat_map(|xi| (0..n).map(move |yi| (xi, yi)))
        .map(|(xi, yi)| {
            let (x0, x1) = intervals[xi];
            let (y0, y1) = intervals[yi];
            let f = |v: usize| v as f64;
            (xi, yi, BBox::unscored(f(x0), f(y0), f(x1), f(y1)))
        })
        .collect();
    let mut checked = 0u64;
    for (a, &(ax, ay, ba)) in boxes.iter().enumerate() {
        let area_a = len[ax] * len[ay];
        for &(bx, by, bb) in &boxes[a..] {
            let inter = overlap[ax * n + bx] * overlap[ay * n + by];
            let union = area_a + len[bx] * len[by] - inter;
            let expected = if inter == 0 {
                0.0
            } else {
                f64::from(inter) / f64::from(union)
            };
            let got = iou(&ba, &bb);
            if got != expected || iou(&bb, &ba) != got {
                return (
                    checked,
                    Some(format!("{ba:?} vs {bb:?}: {got} != {expected}")),
                );
            }
            checked += 1;
        }
    }
    (checked, None)
}

/// Tie-break order written out independently: higher score first, then
/// lexicographically smaller corners.
pub fn before(a: &BBox, b: &BBox) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    let ka = [a.x0, a.y0, a.x1, a.y1];
    let kb = [b.x0, b.y0, b.x1, b.y1];
    ka.partial_cmp(&kb) == Some(Ordering::Less)
}

/// Classic formulation: repeatedly take the best remaining box and delete
/// everything it suppresses.
pub fn brute_nms(boxes: &[BBox], threshold: f64) -> Vec<BBox> {
    let mut remaining = boxes.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if before(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        let b = remaining.swap_remove(best);
        remaining.retain(|r| iou(&b, r) < threshold);
        kept.push(b);
    }
    kept
}

/// Up to 200 boxes on an integer grid with few distinct scores, so overlaps
/// and ties are common.
pub fn nms_scene(rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let n = rng.random_range(0..=200);
    (0..n)
        .map(|_| {
            let x0 = rng.random_range(0..60) as f64;
            let y0 = rng.random_range(0..60) as f64;
            let w = rng.random_range(1..20) as f64;
            let h = rng.random_range(1..20) as f64;
            let score = rng.random_range(0..8) as f64 / 8.0;
            BBox::unscored(x0, y0, x0 + w, y0 + h).with_score(score)
        })
        .collect()
}

pub fn nms_threshold(trial: usize) -> f64 {
    [0.3, 0.5, 0.7][trial % 3]
}

/// Greedy matching spelled out over explicit candidate lists: at every
/// step the best-scored remaining detection claims its best remaining
/// truth.
pub fn brute_greedy(dets: &[BBox], truths: &[BBox], threshold: f64) -> usize {
    let mut dets_left: Vec<usize> = (0..dets.len()).collect();
    let mut truths_left: BTreeSet<usize> = (0..truths.len()).collect();
    let mut tp = 0;
    while !dets_left.is_empty() {
        let pos = (0..dets_left.len())
            .max_by(|&a, &b| {
                let (da, db) = (&dets[dets_left[a]], &dets[dets_left[b]]);
                da.score
                    .total_cmp(&db.score)
                    .then_with(|| {
                        [db.x0, db.y0, db.x1, db.y1]
                            .partial_cmp(&[da.x0, da.y0, da.x1, da.y1])
                            .unwrap()
                    })
                    .then(dets_left[b].cmp(&dets_left[a]))
            })
            .unwrap();
        let d = dets_left.remove(pos);
        let best = truths_left
            .iter()
            .map(|&g| (g, iou(&dets[d], &truths[g])))
            .filter(|&(_, v)| v >= threshold)
            .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, _)) = best {
            truths_left.remove(&g);
            tp += 1;
        }
    }
    tp
}

/// Largest number of detection-truth pairs with IoU ≥ `threshold` under a
/// one-to-one assignment, by exhaustive search.
pub fn optimal_tp(dets: &[BBox], truths: &[BBox], threshold: f64) -> usize {
    fn go(d: usize, dets: &[BBox], truths: &[BBox], used: &mut Vec<bool>, t: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, dets, truths, used, t);
        for g in 0..truths.len() {
            if !used[g] && iou(&dets[d], &truths[g]) >= t {
                used[g] = true;
                best = best.max(1 + go(d + 1, dets, truths, used, t));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, truths, &mut vec![false; truths.len()], threshold)
}

pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..30) as f64;
            let y = rng.random_range(0..30) as f64;
            let w = rng.random_range(4..14) as f64;
            let h = rng.random_range(4..14) as f64;
            BBox::unscored(x, y, x + w, y + h).with_score(rng.random_range(0..5) as f64 / 4.0)
        })
        .collect()
}

/// A scene of at most six boxes per side.
pub fn match_scene(rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<BBox>) {
    let nd = rng.random_range(0..=6);
    let ng = rng.random_range(0..=6);
    (random_boxes(rng, nd), random_boxes(rng, ng))
}

pub fn match_threshold(trial: usize) -> f64 {
    [0.3, 0.5][trial % 2]
}
