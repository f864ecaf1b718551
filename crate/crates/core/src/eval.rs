//! Slice-level matching, precision/recall, and event-level aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detections::{Stage, VolumeDetections};
use crate::geometry::{iou, score_order, BBox};
use crate::volume::GroundTruthEvent;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_LINK_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, truth index, iou)` for every match.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching: detections in score order each take the
/// unmatched truth box of highest IoU, if that IoU reaches `threshold`.
pub fn match_detections(detections: &[BBox], truths: &[BBox], threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| score_order(&detections[a], &detections[b]).then(a.cmp(&b)));
    let mut taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in truths.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&detections[d], t);
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            pairs.push((d, g, v));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: detections.len() - tp,
        fn_: truths.len() - tp,
        pairs,
    }
}

/// Raw true-positive, false-positive and false-negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn ground_truth(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

impl From<&MatchResult> for Counts {
    fn from(m: &MatchResult) -> Self {
        Counts {
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

impl PrecisionRecall {
    pub fn f1(&self) -> f64 {
        if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision `tp / (tp + fp)` and recall `tp / (tp + fn)`, with `0/0 = 1`.
pub fn precision_recall(counts: &Counts) -> PrecisionRecall {
    PrecisionRecall {
        precision: ratio(counts.tp, counts.tp + counts.fp),
        recall: ratio(counts.tp, counts.tp + counts.fn_),
    }
}

/// Truth boxes per `(z, t)`.
pub fn truth_by_slice(events: &[GroundTruthEvent]) -> BTreeMap<(usize, usize), Vec<BBox>> {
    let mut out: BTreeMap<(usize, usize), Vec<BBox>> = BTreeMap::new();
    for e in events {
        for (&k, b) in &e.boxes {
            out.entry(k).or_default().push(*b);
        }
    }
    out
}

/// Summed slice-level counts over every slice with detections or truth.
pub fn evaluate_slices(
    detections: &VolumeDetections,
    events: &[GroundTruthEvent],
    threshold: f64,
) -> Counts {
    let truth = truth_by_slice(events);
    let keys: BTreeSet<(usize, usize)> = detections.keys().chain(truth.keys()).copied().collect();
    let mut total = Counts::default();
    for k in keys {
        let dets = detections
            .get(&k)
            .map(|d| d.boxes.as_slice())
            .unwrap_or(&[]);
        let gts = truth.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        total.add(&Counts::from(&match_detections(dets, gts, threshold)));
    }
    total
}

/// Detections linked across neighbouring slices and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MitosisEvent {
    pub event_id: u32,
    pub boxes: BTreeMap<(usize, usize), BBox>,
    /// Highest member score.
    pub score: f64,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the graph linking detections at
/// `|Δz| ≤ 1`, `|Δt| ≤ 1`, `(Δz, Δt) ≠ (0, 0)` with IoU ≥ `link_iou`.
/// Within one event, only the best-scoring box per `(z, t)` is kept.
/// Events are numbered from 1 in order of their first detection.
pub fn aggregate_events(sets: &VolumeDetections, link_iou: f64) -> Vec<MitosisEvent> {
    let mut nodes: Vec<((usize, usize), BBox)> = Vec::new();
    for (&k, s) in sets {
        for b in &s.boxes {
            nodes.push((k, *b));
        }
    }
    let mut by_key: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (k, _)) in nodes.iter().enumerate() {
        by_key.entry(*k).or_default().push(i);
    }
    let mut ds = DisjointSet::new(nodes.len());
    for (i, &((z, t), b)) in nodes.iter().enumerate() {
        for dz in 0..=2usize {
            for dt in 0..=2usize {
                if (dz, dt) == (1, 1) || z + dz < 1 || t + dt < 1 {
                    continue;
                }
                let Some(others) = by_key.get(&(z + dz - 1, t + dt - 1)) else {
                    continue;
                };
                for &j in others {
                    if j > i && iou(&b, &nodes[j].1) >= link_iou {
                        ds.union(i, j);
                    }
                }
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..nodes.len() {
        let r = ds.find(i);
        comps.entry(r).or_default().push(i);
    }
    let mut events: Vec<MitosisEvent> = comps
        .into_values()
        .map(|members| {
            let mut boxes: BTreeMap<(usize, usize), BBox> = BTreeMap::new();
            for i in members {
                let (k, b) = nodes[i];
                let keep = boxes.get(&k).is_none_or(|cur| score_order(&b, cur).is_lt());
                if keep {
                    boxes.insert(k, b);
                }
            }
            let score = boxes.values().map(|b| b.score).fold(0.0, f64::max);
            MitosisEvent {
                event_id: 0,
                boxes,
                score,
            }
        })
        .collect();
    events.sort_by(|a, b| a.boxes.keys().next().cmp(&b.boxes.keys().next()));
    for (i, e) in events.iter_mut().enumerate() {
        e.event_id = i as u32 + 1;
    }
    events
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
}

impl EventCounts {
    pub fn add(&mut self, o: &EventCounts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
    }

    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

fn events_overlap(pred: &MitosisEvent, truth: &GroundTruthEvent, threshold: f64) -> bool {
    pred.boxes
        .iter()
        .any(|(k, b)| truth.boxes.get(k).is_some_and(|g| iou(b, g) >= threshold))
}

/// Greedy one-to-one event matching by descending event score: a predicted
/// event matches an unmatched truth event if any pair of their boxes at the
/// same `(z, t)` reaches `threshold` IoU.
pub fn event_metrics(
    events: &[MitosisEvent],
    truth: &[GroundTruthEvent],
    threshold: f64,
) -> EventCounts {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| events[b].score.total_cmp(&events[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; truth.len()];
    let mut tp = 0;
    for i in order {
        if let Some(g) = (0..truth.len())
            .find(|&g| !taken[g] && events_overlap(&events[i], &truth[g], threshold))
        {
            taken[g] = true;
            tp += 1;
        }
    }
    EventCounts {
        tp,
        fn_: truth.len() - tp,
        fp: events.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub match_iou: f64,
    pub link_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_iou: DEFAULT_MATCH_IOU,
            link_iou: DEFAULT_LINK_IOU,
        }
    }
}

/// Results for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    /// Slice-level counts per pipeline stage present.
    pub slices: BTreeMap<Stage, Counts>,
    /// Event counts for the last stage evaluated.
    pub events: EventCounts,
}

impl DatasetReport {
    /// Evaluates every provided stage; events are aggregated from the
    /// latest stage given.
    pub fn evaluate(
        dataset: impl Into<String>,
        stages: &BTreeMap<Stage, &VolumeDetections>,
        truth: &[GroundTruthEvent],
        config: &EvalConfig,
    ) -> Self {
        let slices = stages
            .iter()
            .map(|(&s, d)| (s, evaluate_slices(d, truth, config.match_iou)))
            .collect();
        let events = stages
            .iter()
            .next_back()
            .map(|(_, d)| {
                event_metrics(
                    &aggregate_events(d, config.link_iou),
                    truth,
                    config.match_iou,
                )
            })
            .unwrap_or(EventCounts {
                tp: 0,
                fn_: truth.len(),
                fp: 0,
            });
        Self {
            dataset: dataset.into(),
            slices,
            events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    /// From pooled counts.
    pub micro: PrecisionRecall,
    /// Mean of per-dataset values.
    pub macro_: PrecisionRecall,
    pub pooled: Counts,
}

/// Per-dataset results plus pooled summaries, shaped like the usual
/// count / precision-recall / event tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: Vec<DatasetReport>,
    pub summary: BTreeMap<Stage, StageSummary>,
    pub events: EventCounts,
}

impl Report {
    pub fn new(datasets: Vec<DatasetReport>) -> Self {
        let stages: BTreeSet<Stage> = datasets
            .iter()
            .flat_map(|d| d.slices.keys().copied())
            .collect();
        let mut summary = BTreeMap::new();
        for s in stages {
            let mut pooled = Counts::default();
            let mut p_sum = 0.0;
            let mut r_sum = 0.0;
            let mut n = 0usize;
            for d in &datasets {
                if let Some(c) = d.slices.get(&s) {
                    pooled.add(c);
                    let pr = precision_recall(c);
                    p_sum += pr.precision;
                    r_sum += pr.recall;
                    n += 1;
                }
            }
            summary.insert(
                s,
                StageSummary {
                    micro: precision_recall(&pooled),
                    macro_: PrecisionRecall {
                        precision: p_sum / n as f64,
                        recall: r_sum / n as f64,
                    },
                    pooled,
                },
            );
        }
        let mut events = EventCounts::default();
        for d in &datasets {
            events.add(&d.events);
        }
        Self {
            datasets,
            summary,
            events,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    /// Aligned-column text tables: slice counts, precision/recall, events.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let stages: Vec<Stage> = self.summary.keys().copied().collect();
        let name_w = self
            .datasets
            .iter()
            .map(|d| d.dataset.len())
            .chain(["Dataset".len(), "Total".len()])
            .max()
            .unwrap_or(7);

        let _ = writeln!(out, "Slice-level detections");
        let _ = write!(out, "{:<name_w$}", "Dataset");
        for s in &stages {
            let _ = write!(
                out,
                " | {:>12} {:>6} {:>6} {:>6}",
                s.as_str(),
                "TP",
                "FP",
                "GT"
            );
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, counts: &dyn Fn(Stage) -> Option<Counts>| {
            let _ = write!(out, "{name:<name_w$}");
            for &s in &stages {
                match counts(s) {
                    Some(c) => {
                        let _ = write!(
                            out,
                            " | {:>12} {:>6} {:>6} {:>6}",
                            "",
                            c.tp,
                            c.fp,
                            c.ground_truth()
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>12} {:>6} {:>6} {:>6}", "", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        };
        for d in &self.datasets {
            row(&mut out, &d.dataset, &|s| d.slices.get(&s).copied());
        }
        row(&mut out, "Total", &|s| {
            self.summary.get(&s).map(|x| x.pooled)
        });

        let _ = writeln!(out, "\nPrecision and recall");
        let _ = writeln!(
            out,
            "{:<12} {:>15} {:>12} {:>15} {:>12}",
            "Stage", "Precision(micro)", "Recall(micro)", "Precision(macro)", "Recall(macro)"
        );
        for (s, x) in &self.summary {
            let _ = writeln!(
                out,
                "{:<12} {:>16.4} {:>13.4} {:>16.4} {:>13.4}",
                s.as_str(),
                x.micro.precision,
                x.micro.recall,
                x.macro_.precision,
                x.macro_.recall
            );
        }

        let _ = writeln!(out, "\nEvent-level detections");
        let _ = writeln!(
            out,
            "{:<name_w$} {:>4} {:>4} {:>4}",
            "Dataset", "TP", "FN", "FP"
        );
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "{:<name_w$} {:>4} {:>4} {:>4}",
                d.dataset, d.events.tp, d.events.fn_, d.events.fp
            );
        }
        let _ = writeln!(
            out,
            "{:<name_w$} {:>4} {:>4} {:>4}",
            "Total", self.events.tp, self.events.fn_, self.events.fp
        );
        out
    }
}
