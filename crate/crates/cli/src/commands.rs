use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mitodet::dataset_io::{load_dataset, save_dataset};
use mitodet::detections::DetectionsDocument;
use mitodet::error::Error;
use mitodet::eval::{DatasetReport, EvalConfig, Report};
use mitodet::pipeline::{run_cascade, Cascade};
use mitodet::synth::{generate_sequence, GeneratorConfig};
use mitodet::train::{train_cascade, Dataset, TrainConfig};
use mitodet::volume::{Dims, GroundTruthEvent, Volume4D};

use crate::{usage, DetectArgs, EvalArgs, GenerateArgs, RenderArgs, TrainArgs};

/// Errors that reflect malformed inputs rather than a failed run.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::Config(_)
        | Error::Manifest(_)
        | Error::Annotation(_)
        | Error::Detections(_)
        | Error::Json { .. }
        | Error::MissingFrame { .. }
        | Error::FrameSize { .. } => usage(e.to_string()),
        other => other.into(),
    }
}

fn existing_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!(
            "dataset directory {} not found",
            path.display()
        )))
    }
}

fn load(dir: &Path) -> Result<(Volume4D, Vec<GroundTruthEvent>)> {
    existing_dir(dir)?;
    load_dataset(dir)
        .map_err(classify)
        .with_context(|| format!("loading {}", dir.display()))
}

fn load_detections(path: &Path) -> Result<DetectionsDocument> {
    if !path.is_file() {
        return Err(usage(format!(
            "detections file {} not found",
            path.display()
        )));
    }
    DetectionsDocument::load(path).map_err(classify)
}

fn check_dims(doc: &DetectionsDocument, dims: Dims) -> Result<()> {
    if doc.dims() != dims {
        return Err(usage(format!(
            "dims mismatch: detections are for {}, dataset is {}",
            doc.dims(),
            dims
        )));
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let [x, y, z, t] = a.dims;
    let cfg = GeneratorConfig {
        dims: [x, y, z],
        frame_count: t,
        event_count_range: [a.events.0, a.events.1],
        normal_cell_count_range: [a.normal.0, a.normal.1],
        noise_sigma: a.noise,
        border_margin: a.border_margin,
        seed: a.seed,
        ..GeneratorConfig::default()
    };
    let (volume, events) = generate_sequence(&cfg).map_err(classify)?;
    let manifest = save_dataset(&volume, &events, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

pub fn train(a: &TrainArgs) -> Result<()> {
    for d in &a.data {
        existing_dir(d)?;
    }
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(classify)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.max_batches {
        cfg.max_batches = n;
    }
    cfg.validate().map_err(classify)?;
    let datasets = a
        .data
        .iter()
        .map(|d| load(d).map(|(v, e)| Dataset::new(v, e)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let (cascade, log) = train_cascade(&refs, &cfg)?;
    let extra = serde_json::json!({
        "batches": cfg.max_batches,
        "seed": cfg.seed,
        "datasets": datasets.iter().map(|d| d.volume.id.clone()).collect::<Vec<_>>(),
    });
    cascade.save(&a.out, extra)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    log.save_csv(&log_path)?;
    let n = log.rows.len();
    let k = n.min(10);
    println!(
        "trained {n} batches: mean loss {:.4} (first {k}) -> {:.4} (last {k})",
        log.mean_total(0..k),
        log.mean_total(n - k..n)
    );
    println!("checkpoint {}", a.out.display());
    println!("loss log {}", log_path.display());
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let (volume, _) = load(&a.data)?;
    let cascade = Cascade::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let out = run_cascade(&volume, &cascade)?;
    let doc = DetectionsDocument::from_sets(volume.dims(), a.stage, out.stage(a.stage));
    doc.save(&a.out)?;
    println!(
        "{} {} detections written to {}",
        doc.detections.len(),
        a.stage,
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    for v in [a.iou, a.link_iou] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage(format!("IoU thresholds must lie in (0, 1], got {v}")));
        }
    }
    let doc = load_detections(&a.detections)?;
    let (volume, truth) = load(&a.truth)?;
    check_dims(&doc, volume.dims())?;
    let sets = doc.to_sets().map_err(classify)?;
    let config = EvalConfig {
        match_iou: a.iou,
        link_iou: a.link_iou,
    };
    let stages = BTreeMap::from([(doc.stage, &sets)]);
    let report = Report::new(vec![DatasetReport::evaluate(
        volume.id.clone(),
        &stages,
        &truth,
        &config,
    )]);
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let doc = load_detections(&a.detections)?;
    let (volume, truth) = load(&a.data)?;
    let dims = volume.dims();
    check_dims(&doc, dims)?;
    if let Some(t) = a.t.filter(|&t| t >= dims.t) {
        return Err(usage(format!("--t {t} out of range (T = {})", dims.t)));
    }
    if let Some(z) = a.z.filter(|&z| z >= dims.z) {
        return Err(usage(format!("--z {z} out of range (Z = {})", dims.z)));
    }
    let sets = doc.to_sets().map_err(classify)?;
    let written = crate::render::render_slices(&volume, &sets, &truth, a.z, a.t, &a.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
