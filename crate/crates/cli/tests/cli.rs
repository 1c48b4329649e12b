use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = "model_width = 16\nmodel_init_layers = 2\nmodel_blocks = 1\nmodel_units = 1\nmodel_groups = 2\n";

fn nrreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn nrreg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nrreg(dir, args);
    assert!(
        out.status.success(),
        "nrreg {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn spec(points: usize, kind: &str, ratio: f64, seed: u64) -> String {
    format!(
        r#"{{"point_count": {points}, "surface": "two-lobe-blob", "warp_kind": "{kind}",
            "warp_magnitude": {{"rotation": 0.17, "translation": 0.1, "deformation": 0.0}},
            "inlier_ratio": {ratio}, "inlier_noise_std": 0.0, "outlier_mode": "uniform-in-bbox", "seed": {seed}}}"#
    )
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn synth_writes_bundle_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), spec(120, "smooth-graph", 0.5, 3)).unwrap();
    ok(d, &["synth", "spec.json", "--out", "a"]);
    ok(d, &["synth", "spec.json", "--out", "b"]);
    for f in ["source.ply", "target.ply", "corr.csv", "warp.txt", "spec.json"] {
        assert!(d.join("a").join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read(d.join("a/corr.csv")).unwrap(), fs::read(d.join("b/corr.csv")).unwrap());
    ok(d, &["--seed", "4", "synth", "spec.json", "--out", "c"]);
    assert_ne!(fs::read(d.join("a/corr.csv")).unwrap(), fs::read(d.join("c/corr.csv")).unwrap());
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), spec(100, "global-rigid", 1.2, 0)).unwrap();
    let out = nrreg(d, &["synth", "bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inlier_ratio"));

    fs::write(d.join("bad.toml"), "tau_s = 0.5\nbogus_key = 1\n").unwrap();
    let out = nrreg(d, &["--config", "bad.toml", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let out = nrreg(d, &["register", "missing.csv", "--source", "missing.ply", "--out", "r"]);
    assert_eq!(out.status.code(), Some(4));

    fs::write(d.join("broken.csv"), "sx,sy,sz,tx,ty,tz\n1,2,3,4,5\n").unwrap();
    fs::write(d.join("src.xyz"), "0 0 0\n").unwrap();
    let out = nrreg(d, &["register", "broken.csv", "--source", "src.xyz", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rigid_register_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), spec(300, "global-rigid", 1.0, 11)).unwrap();
    ok(d, &["synth", "spec.json", "--out", "scene"]);
    let printed = ok(
        d,
        &["register", "scene/corr.csv", "--source", "scene/source.ply", "--out", "reg", "--gt", "scene/warp.txt"],
    );
    assert!(printed.contains("EPE"), "{printed}");
    for f in ["warp.txt", "warped.ply", "cost-trace.csv"] {
        assert!(d.join("reg").join(f).is_file());
    }
    ok(d, &["eval", "--scene", "scene", "--result", "reg", "--out", "ev"]);
    let report = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let row = report.lines().nth(1).unwrap();
    let epe: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!(epe < 1e-4, "{report}");
    assert!(d.join("ev/histogram.svg").is_file() && d.join("ev/histogram.csv").is_file());

    // the ground truth evaluated against itself
    let printed = ok(d, &["eval", "--scene", "scene", "--result", "scene", "--out", "self"]);
    assert!(printed.contains("0.000"), "{printed}");
    let report = fs::read_to_string(d.join("self/report.csv")).unwrap();
    assert_eq!(report.lines().nth(1).unwrap().split(',').nth(1), Some("0"));
}

#[test]
fn identity_correspondences_stop_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pts: Vec<[f64; 3]> = (0..40).map(|i| [0.01 * i as f64, 0.02 * (i % 7) as f64, 0.005 * (i % 5) as f64]).collect();
    let xyz: String = pts.iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect();
    let csv: String = std::iter::once("sx,sy,sz,tx,ty,tz\n".to_string())
        .chain(pts.iter().map(|p| format!("{0},{1},{2},{0},{1},{2}\n", p[0], p[1], p[2])))
        .collect();
    fs::write(d.join("src.xyz"), xyz).unwrap();
    fs::write(d.join("corr.csv"), csv).unwrap();
    ok(d, &["register", "corr.csv", "--source", "src.xyz", "--out", "reg"]);
    assert_eq!(data_rows(&d.join("reg/cost-trace.csv")), 1);
}

#[test]
fn train_prune_and_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("micro.toml"), MICRO).unwrap();
    fs::write(d.join("spec.json"), spec(40, "smooth-graph", 0.5, 0)).unwrap();
    ok(d, &["synth", "spec.json", "--out", "data", "--count", "20"]);
    ok(d, &["--config", "micro.toml", "train", "data", "--model", "m.bin"]);
    // default epoch count
    assert_eq!(data_rows(&d.join("loss.csv")), 40);

    let printed = ok(d, &["--config", "micro.toml", "prune", "data/scene-0003", "--model", "m.bin", "--out", "p"]);
    assert!(printed.contains("precision"));
    assert_eq!(data_rows(&d.join("p/scores.csv")), 40);

    fs::write(d.join("strict.toml"), format!("{MICRO}tau_s = 1.0\n")).unwrap();
    ok(d, &["--config", "strict.toml", "prune", "data/scene-0003", "--model", "m.bin", "--out", "q"]);
    assert_eq!(data_rows(&d.join("q/corr.csv")), 8);

    // an architecture other than the file's is refused
    let out = nrreg(d, &["prune", "data/scene-0003", "--model", "m.bin", "--out", "r"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn bundled_specs_round_trip() {
    let specs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config.to_str().unwrap();
    fs::write(d.join("train.json"), spec(60, "smooth-graph", 0.5, 1)).unwrap();
    ok(d, &["--config", cfg, "synth", "train.json", "--out", "train", "--count", "3"]);
    ok(d, &["--config", cfg, "train", "train", "--model", "m.bin"]);
    let mut entries: Vec<_> = fs::read_dir(&specs).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    assert!(!entries.is_empty());
    for path in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let name = path.file_stem().unwrap().to_str().unwrap();
        let p = path.to_str().unwrap();
        ok(d, &["--config", cfg, "synth", p, "--out", name]);
        let pruned = format!("{name}-pruned");
        ok(d, &["--config", cfg, "prune", name, "--model", "m.bin", "--out", &pruned]);
        let reg = format!("{name}-reg");
        ok(
            d,
            &["--config", cfg, "register", &format!("{pruned}/corr.csv"), "--source", &format!("{name}/source.ply"), "--out", &reg],
        );
        let ev = format!("{name}-eval");
        ok(d, &["eval", "--scene", name, "--result", &reg, "--out", &ev]);
        assert!(d.join(&ev).join("report.csv").is_file());
    }
}

#[test]
fn gradcheck_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(d, &["gradcheck"]).contains("PASS"));
    fs::write(d.join("spec.json"), spec(80, "articulated-two-part", 0.5, 2)).unwrap();
    ok(d, &["synth", "spec.json", "--out", "s"]);
    let printed = ok(d, &["inspect-graph", "s", "--out", "g"]);
    assert!(printed.contains("nodes"));
    assert!(d.join("g/graph.txt").is_file() && d.join("g/consistency.csv").is_file());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("micro.toml"), format!("{MICRO}epochs = 3\n")).unwrap();
    fs::write(d.join("spec.json"), spec(150, "smooth-graph", 0.5, 5)).unwrap();
    ok(d, &["synth", "spec.json", "--out", "data", "--count", "3"]);
    for t in ["1", "3"] {
        ok(d, &["--threads", t, "--config", "micro.toml", "train", "data", "--model", &format!("m{t}.bin")]);
        ok(d, &["--threads", t, "register", "data/scene-0000/corr.csv", "--source", "data/scene-0000/source.ply", "--out", &format!("r{t}")]);
    }
    assert_eq!(fs::read(d.join("m1.bin")).unwrap(), fs::read(d.join("m3.bin")).unwrap());
    assert_eq!(fs::read(d.join("r1/warp.txt")).unwrap(), fs::read(d.join("r3/warp.txt")).unwrap());
}
