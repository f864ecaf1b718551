//! End-to-end runs of the `mitodet` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mitodet::dataset_io::{frame_file_name, load_dataset, save_dataset, ANNOTATIONS_FILE};
use mitodet::detections::{DetectionSet, DetectionsDocument, Stage, VolumeDetections};
use mitodet::geometry::BBox;
use mitodet::train::TrainConfig;
use mitodet::volume::{Dims, GroundTruthEvent, Volume4D};
use serde_json::Value;
use tempfile::TempDir;

fn mitodet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitodet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset: 64×64×4 over 8 frames.
fn generate(dir: &Path, seed: u64, events: &str) -> Output {
    mitodet(&[
        "generate",
        "--out",
        s(dir),
        "--seed",
        &seed.to_string(),
        "--dims",
        "64x64x4x8",
        "--events",
        events,
        "--normal",
        "2..3",
        "--border-margin",
        "8",
    ])
}

#[test]
fn help_documents_every_flag() {
    let top = mitodet(&["--help"]);
    assert_eq!(code(&top), 0);
    for sub in ["generate", "train", "detect", "eval", "render"] {
        assert!(stdout(&top).contains(sub));
    }
    let flags: [(&str, &[&str]); 5] = [
        (
            "generate",
            &[
                "--out",
                "--seed",
                "--dims",
                "--events",
                "--normal",
                "--noise",
                "--border-margin",
            ],
        ),
        (
            "train",
            &["--data", "--config", "--out", "--log", "--max-batches"],
        ),
        ("detect", &["--data", "--ckpt", "--out", "--stage"]),
        (
            "eval",
            &["--detections", "--truth", "--iou", "--link-iou", "--json"],
        ),
        ("render", &["--data", "--detections", "--out", "--t", "--z"]),
    ];
    for (sub, expected) in flags {
        let o = mitodet(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        for f in expected {
            assert!(stdout(&o).contains(f), "{sub} --help lacks {f}");
        }
        let bad = mitodet(&[sub, "--no-such-flag"]);
        assert_eq!(code(&bad), 1, "{sub}");
    }
    assert_eq!(code(&mitodet(&[])), 1);
    assert_eq!(code(&mitodet(&["frobnicate"])), 1);
}

#[test]
fn generate_is_deterministic_and_validates_flags() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = generate(&a, 7, "2..2");
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert!(stdout(&oa).trim().ends_with("manifest.json"));
    assert_eq!(code(&generate(&b, 7, "2..2")), 0);
    for t in 0..8 {
        let name = frame_file_name(t);
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
    }
    let ann: Value =
        serde_json::from_str(&std::fs::read_to_string(a.join(ANNOTATIONS_FILE)).unwrap()).unwrap();
    assert_eq!(ann.as_array().unwrap().len(), 2);

    let missing_out = mitodet(&["generate", "--seed", "1"]);
    assert_eq!(code(&missing_out), 1);
    for dims in ["64x64x4", "64x64x0x8", "ax64x4x8"] {
        let o = mitodet(&[
            "generate",
            "--out",
            s(&tmp.path().join("c")),
            "--dims",
            dims,
        ]);
        assert_eq!(code(&o), 1, "{dims}");
    }
    let o = mitodet(&[
        "generate",
        "--out",
        s(&tmp.path().join("d")),
        "--events",
        "3..1",
    ]);
    assert_eq!(code(&o), 1);
}

fn smoke_config(dir: &Path, batches: u64, lr: f64) -> PathBuf {
    let mut c = TrainConfig::default();
    c.network.stage1.backbone_channels = [4, 8];
    c.network.stage1.fused_channels = 8;
    c.network.stage1.head_channels = 8;
    c.network.stage1.roi_hidden = 16;
    c.network.stage2.channels = [4, 4];
    c.network.stage2.crop_size = 24;
    c.augment.crop_size = [32, 32];
    c.max_batches = batches;
    c.batch_slices = 2;
    c.optimizer.lr_initial = lr;
    c.optimizer.lr_after = lr / 10.0;
    c.optimizer.lr_switch_batch = 150;
    let path = dir.join(format!("config_{batches}_{lr:e}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn parse_log(path: &Path) -> Vec<(u64, f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "batch,lr,total,objectness,box_regression,roi_classification,temporal_classification"
    );
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            )
        })
        .collect()
}

fn count_records(path: &Path) -> usize {
    DetectionsDocument::load(path).unwrap().detections.len()
}

#[test]
fn train_then_detect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, 3, "1..1")), 0);
    let cfg = smoke_config(tmp.path(), 200, 1e-3);
    let ckpt = tmp.path().join("model.ckpt");
    let o = mitodet(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = parse_log(&ckpt.with_extension("csv"));
    assert_eq!(log.len(), 200);
    for (i, &(batch, lr, _)) in log.iter().enumerate() {
        assert_eq!(batch, i as u64);
        assert_eq!(lr, if batch < 150 { 1e-3 } else { 1e-4 }, "batch {batch}");
    }
    let mean = |r: std::ops::Range<usize>| {
        log[r.clone()].iter().map(|x| x.2).sum::<f64>() / r.len() as f64
    };
    assert!(mean(180..200) < mean(0..20), "loss did not decrease");

    let out = |name: &str| tmp.path().join(name);
    for stage in ["raw", "volume_fused", "final"] {
        let o = mitodet(&[
            "detect",
            "--data",
            s(&data),
            "--ckpt",
            s(&ckpt),
            "--out",
            s(&out(&format!("{stage}.json"))),
            "--stage",
            stage,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = mitodet(&[
        "detect",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out("default.json")),
    ]);
    assert_eq!(code(&o), 0);
    let default_doc = DetectionsDocument::load(&out("default.json")).unwrap();
    assert_eq!(default_doc.stage, Stage::Final);
    assert_eq!(
        std::fs::read(out("default.json")).unwrap(),
        std::fs::read(out("final.json")).unwrap()
    );
    assert!(count_records(&out("final.json")) <= count_records(&out("raw.json")));

    // all-zero volume of the same geometry
    let zeros = tmp.path().join("zeros");
    let vol = Volume4D::new("zeros", Dims::new(64, 64, 4, 8), vec![0.0; 64 * 64 * 4 * 8]).unwrap();
    save_dataset(&vol, &[], &zeros).unwrap();
    let o = mitodet(&[
        "detect",
        "--data",
        s(&zeros),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out("zeros.json")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(count_records(&out("zeros.json")), 0);

    // a checkpoint that is not one
    std::fs::write(out("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = mitodet(&[
        "detect",
        "--data",
        s(&data),
        "--ckpt",
        s(&out("junk.ckpt")),
        "--out",
        s(&out("x.json")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_errors() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = mitodet(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&tmp.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, 3, "1..1")), 0);
    let wild = smoke_config(tmp.path(), 20, 1e300);
    let o = mitodet(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&wild),
        "--out",
        s(&tmp.path().join("w.ckpt")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn write_detections(path: &Path, dims: Dims, stage: Stage, boxes: &[((usize, usize), BBox)]) {
    let mut sets = VolumeDetections::new();
    for &((z, t), b) in boxes {
        sets.entry((z, t))
            .or_insert_with(|| DetectionSet::empty(z, t, stage))
            .boxes
            .push(b);
    }
    DetectionsDocument::from_sets(dims, stage, &sets)
        .save(path)
        .unwrap();
}

fn eval_json(dets: &Path, truth: &Path, dir: &Path) -> Value {
    let json = dir.join("report.json");
    let o = mitodet(&[
        "eval",
        "--detections",
        s(dets),
        "--truth",
        s(truth),
        "--json",
        s(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("Slice-level detections"));
    serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap()
}

#[test]
fn eval_reports() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, 2, "2..2")), 0);
    let (vol, truth) = load_dataset(&data).unwrap();
    let dims = vol.dims();

    let perfect: Vec<_> = truth
        .iter()
        .flat_map(|e| e.boxes.iter().map(|(k, b)| (*k, b.with_score(1.0))))
        .collect();
    let p = tmp.path().join("perfect.json");
    write_detections(&p, dims, Stage::Final, &perfect);
    let r = eval_json(&p, &data, tmp.path());
    let micro = &r["summary"]["final"]["micro"];
    assert_eq!(
        (micro["precision"].as_f64(), micro["recall"].as_f64()),
        (Some(1.0), Some(1.0))
    );
    assert_eq!(r["events"]["fp"], 0);
    assert_eq!(r["events"]["fn"], 0);
    assert_eq!(r["events"]["tp"], 2);

    let e = tmp.path().join("empty.json");
    write_detections(&e, dims, Stage::Final, &[]);
    let r = eval_json(&e, &data, tmp.path());
    assert_eq!(r["summary"]["final"]["micro"]["recall"].as_f64(), Some(0.0));
    assert_eq!(r["events"]["fn"], 2);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 1, "dims": [1, 2]}"#).unwrap();
    let o = mitodet(&["eval", "--detections", s(&bad), "--truth", s(&data)]);
    assert_eq!(code(&o), 1);
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    doc["detections"][0]["z"] = Value::from(99);
    std::fs::write(&bad, doc.to_string()).unwrap();
    assert_eq!(
        code(&mitodet(&[
            "eval",
            "--detections",
            s(&bad),
            "--truth",
            s(&data)
        ])),
        1
    );
}

/// Five truth boxes on one slice; three are hit, one detection is stray.
#[test]
fn eval_hand_built_scene() {
    let tmp = TempDir::new().unwrap();
    let dims = Dims::new(128, 64, 1, 1);
    let sq = |x: f64, y: f64| BBox::unscored(x, y, x + 10.0, y + 10.0);
    let truths = [
        sq(0.0, 0.0),
        sq(30.0, 0.0),
        sq(60.0, 0.0),
        sq(0.0, 40.0),
        sq(30.0, 40.0),
    ];
    let events: Vec<GroundTruthEvent> = truths
        .iter()
        .enumerate()
        .map(|(i, b)| GroundTruthEvent {
            event_id: i as u32 + 1,
            boxes: BTreeMap::from([((0, 0), *b)]),
        })
        .collect();
    let data = tmp.path().join("data");
    let vol = Volume4D::new("hand", dims, vec![0.0; 128 * 64]).unwrap();
    save_dataset(&vol, &events, &data).unwrap();
    let dets = [
        sq(1.0, 0.0).with_score(0.9),
        sq(30.0, 1.0).with_score(0.8),
        sq(61.0, 1.0).with_score(0.7),
        sq(100.0, 50.0).with_score(0.6),
    ];
    let p = tmp.path().join("dets.json");
    write_detections(&p, dims, Stage::Final, &dets.map(|b| ((0, 0), b)));
    let r = eval_json(&p, &data, tmp.path());
    let c = &r["summary"]["final"]["pooled"];
    assert_eq!(
        (c["tp"].as_u64(), c["fp"].as_u64(), c["fn"].as_u64()),
        (Some(3), Some(1), Some(2))
    );
    let micro = &r["summary"]["final"]["micro"];
    assert_eq!(micro["precision"].as_f64(), Some(0.75));
    assert_eq!(micro["recall"].as_f64(), Some(0.6));
}

#[test]
fn render_overlays() {
    let tmp = TempDir::new().unwrap();
    let dims = Dims::new(40, 30, 2, 3);
    let data = tmp.path().join("data");
    let vol = Volume4D::new("r", dims, vec![0.25; 40 * 30 * 2 * 3]).unwrap();
    let truth = GroundTruthEvent {
        event_id: 1,
        boxes: BTreeMap::from([((0, 2), BBox::unscored(2.0, 2.0, 8.0, 8.0))]),
    };
    save_dataset(&vol, &[truth], &data).unwrap();
    let dets = tmp.path().join("dets.json");
    let b = BBox::unscored(10.0, 5.0, 20.0, 12.0).with_score(0.9);
    write_detections(&dets, dims, Stage::Final, &[((1, 1), b)]);

    let out = tmp.path().join("png");
    let o = mitodet(&[
        "render",
        "--data",
        s(&data),
        "--detections",
        s(&dets),
        "--out",
        s(&out),
        "--t",
        "1",
        "--z",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(out.join("slice_z001_t0001.png"))
        .unwrap()
        .to_rgb8();
    let red = |x: u32, y: u32| img.get_pixel(x, y).0 == [255, 0, 0];
    let mut edge = Vec::new();
    for y in 0..30 {
        for x in 0..40 {
            let on_box = (10..=19).contains(&x)
                && (5..=11).contains(&y)
                && (x == 10 || x == 19 || y == 5 || y == 11);
            assert_eq!(red(x, y), on_box, "pixel ({x}, {y})");
            if on_box {
                edge.push((x, y));
            }
        }
    }
    assert_eq!(edge.len(), 2 * 10 + 2 * 7 - 4);
    assert_eq!(img.get_pixel(0, 0).0, [64, 64, 64]);

    // without indices: the detection slice and the truth slice
    let all = tmp.path().join("all");
    let o = mitodet(&[
        "render",
        "--data",
        s(&data),
        "--detections",
        s(&dets),
        "--out",
        s(&all),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&all)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["slice_z000_t0002.png", "slice_z001_t0001.png"]);

    let o = mitodet(&[
        "render",
        "--data",
        s(&data),
        "--detections",
        s(&dets),
        "--out",
        s(&all),
        "--t",
        "3",
    ]);
    assert_eq!(code(&o), 1);
    let o = mitodet(&[
        "render",
        "--data",
        s(&data),
        "--detections",
        s(&dets),
        "--out",
        s(&all),
        "--z",
        "2",
    ]);
    assert_eq!(code(&o), 1);

    let other = tmp.path().join("other.json");
    write_detections(&other, Dims::new(40, 30, 2, 4), Stage::Final, &[]);
    let o = mitodet(&[
        "render",
        "--data",
        s(&data),
        "--detections",
        s(&other),
        "--out",
        s(&all),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dims mismatch"), "{}", stderr(&o));
}
