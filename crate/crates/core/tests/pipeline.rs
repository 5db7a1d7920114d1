//! Command-line pipeline on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};

use agregnet::annotations::load_annotations;
use agregnet::cli::{dispatch, EvalReport, RunManifest, EXIT_IO, EXIT_OK, EXIT_VALIDATION};
use agregnet::raster;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("agregnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("data");
    assert_eq!(run(&["synth", "--count", &n.to_string(), "--out", s(&out)]), EXIT_OK);
    out
}

#[test]
fn gt_as_prediction_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 4);
    let ann = data.join("annotations.json");
    let gt = tmp.path().join("gt");
    assert_eq!(run(&["gen-gt", "--annotations", s(&ann), "--out", s(&gt), "--sigma-ratio", "0.15"]), EXIT_OK);

    let set = load_annotations(&ann).unwrap();
    assert_eq!(set.images.len(), 4);
    for img in &set.images {
        let d = raster::read_f32(&gt.join(img.image_path.with_extension("density.fmap"))).unwrap();
        assert!((d.total() - img.count() as f64).abs() < 1e-3);
        let m = raster::read_binary(&gt.join(img.image_path.with_extension("seg.fmap"))).unwrap();
        assert_eq!(m.dims(), d.dims());
    }

    let report = tmp.path().join("run").join("report.json");
    let figs = tmp.path().join("figs");
    let code = run(&[
        "eval", "--pred-dir", s(&gt), "--gt-dir", s(&gt), "--annotations", s(&ann),
        "--report", s(&report), "--figures", s(&figs), "--label", "oracle",
    ]);
    assert_eq!(code, EXIT_OK);
    let rep: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.metrics.map, 1.0);
    assert_eq!(rep.metrics.mar, 1.0);
    assert!(rep.metrics.mae < 1e-3);
    assert_eq!(rep.metrics.ssim, 1.0);
    assert!(figs.join("count_scatter.png").exists());
    assert!(figs.join("img_0000.points.png").exists());

    let md = fs::read_to_string(report.with_extension("md")).unwrap();
    assert!(md.contains("| oracle |"), "{md}");
    assert!(md.contains("| 1.00 | 1.00 |"), "{md}");

    let table = tmp.path().join("table.md");
    let run_dir = report.parent().unwrap();
    assert_eq!(run(&["report", s(run_dir), s(&report), "--out", s(&table)]), EXIT_OK);
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 4);

    let loc = tmp.path().join("loc.json");
    let density = gt.join("img_0002.density.fmap");
    assert_eq!(run(&["localize", "--density", s(&density), "--annotations", s(&ann), "--out", s(&loc)]), EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&loc).unwrap()).unwrap();
    let n = set.images[2].count();
    assert_eq!(v["peaks"].as_array().unwrap().len(), n);
    assert_eq!(v["pairs"].as_array().unwrap().len(), n);
    assert!(v["unmatched_gt"].as_array().unwrap().is_empty());
    assert!(tmp.path().join("loc.json.manifest.json").exists());
}

#[test]
fn outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let data = synth(dir, 3);
        let ann = data.join("annotations.json");
        assert_eq!(run(&["gen-gt", "--annotations", s(&ann), "--out", s(&dir.join("gt"))]), EXIT_OK);
    }
    for rel in [
        "data/annotations.json",
        "data/img_0001.png",
        "gt/img_0001.density.fmap",
        "gt/img_0001.seg.fmap",
    ] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.path().join("gt/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "gen-gt");
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.settings["ratio"], 0.15);
    assert_eq!(m.outputs.len(), 6);
}

#[test]
fn train_predict_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 4);
    let ann = data.join("annotations.json");
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"network": {"stage_blocks": [1, 1, 1, 1, 1], "stage_channels": [8, 16, 32, 64, 128],
            "stage5_dilation": 2, "decoder_dilation": 2, "use_cbam": false, "use_segmentation_branch": true,
            "cbam_reduction": 8, "cbam_spatial_kernel": 7},
           "train": {"max_epochs": 2, "train_size": [64, 48], "val_crop": [64, 48]},
           "train_fraction": 0.5}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--annotations", s(&ann), "--out", s(&out)]), EXIT_OK);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,lr,train_loss,val_mae,val_ssim");
    assert_eq!(history.lines().count(), 3);

    let pred = tmp.path().join("pred");
    let code = run(&[
        "predict", "--checkpoint", s(&out.join("best.ckpt")), "--annotations", s(&ann),
        "--split", s(&out.join("split.json")), "--out", s(&pred),
    ]);
    assert_eq!(code, EXIT_OK);
    let maps = fs::read_dir(&pred).unwrap().filter(|e| {
        e.as_ref().unwrap().path().to_string_lossy().ends_with(".density.fmap")
    });
    assert_eq!(maps.count(), 2);

    let gt = tmp.path().join("gt");
    assert_eq!(run(&["gen-gt", "--annotations", s(&ann), "--out", s(&gt)]), EXIT_OK);
    let report = tmp.path().join("report.json");
    let code = run(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&gt), "--annotations", s(&ann), "--report", s(&report)]);
    assert_eq!(code, EXIT_OK);
    let rep: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.label, "Mod.ConvNeXt-T+Seg.");
    assert_eq!(rep.metrics.per_image.len(), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--version"]), EXIT_OK);
    assert_eq!(run(&["no-such-command"]), EXIT_VALIDATION);
    // Missing required flag.
    assert_eq!(run(&["eval", "--gt-dir", "g", "--annotations", "a.json", "--report", "r.json"]), EXIT_VALIDATION);
    // Missing file.
    let absent = tmp.path().join("absent.json");
    assert_eq!(run(&["gen-gt", "--annotations", s(&absent), "--out", s(tmp.path())]), EXIT_IO);
    assert_eq!(run(&["report", s(&tmp.path().join("nothing"))]), EXIT_IO);
    // Invalid value.
    let data = synth(tmp.path(), 1);
    let ann = data.join("annotations.json");
    assert_eq!(
        run(&["gen-gt", "--annotations", s(&ann), "--out", s(&tmp.path().join("gt")), "--sigma-ratio", "-1"]),
        EXIT_VALIDATION
    );
    // Malformed annotation file.
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"version\": \"1.0\", \"images\": [{\"file\": 3}]}").unwrap();
    assert_eq!(run(&["gen-gt", "--annotations", s(&bad), "--out", s(&tmp.path().join("gt2"))]), EXIT_VALIDATION);
    // --drop-later needs --out.
    assert_eq!(run(&["dedup", "--annotations", s(&ann), "--drop-later"]), EXIT_VALIDATION);
}

#[test]
fn dedup_drops_the_later_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2);
    let ann = data.join("annotations.json");
    fs::copy(data.join("img_0000.png"), data.join("img_0000_copy.png")).unwrap();
    let mut text = fs::read_to_string(&ann).unwrap();
    let mut set: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut dup = set["images"][0].clone();
    dup["file"] = "img_0000_copy.png".into();
    set["images"].as_array_mut().unwrap().push(dup);
    text = serde_json::to_string(&set).unwrap();
    fs::write(&ann, text).unwrap();

    let out = data.join("dedup.json");
    assert_eq!(run(&["dedup", "--annotations", s(&ann), "--drop-later", "--out", s(&out)]), EXIT_OK);
    let kept = load_annotations(&out).unwrap();
    let names: Vec<_> = kept.images.iter().map(|i| i.image_path.clone()).collect();
    assert_eq!(names, vec![PathBuf::from("img_0000.png"), PathBuf::from("img_0001.png")]);
}
