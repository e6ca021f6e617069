use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relsparse::dataset::SceneDataset;
use relsparse::metrics::{Detection, DetectionRecord};

const SMALL: &str = r#"
tkr = 0.5

[model]
grid_h = 8
grid_w = 8
anchor_stride = 2

[synthetic]
scenes = 2
duration = 1.0

[relevance_training.optim]
iterations = 10

[curve]
keep_ratios = [1.0, 0.5]
train_scenes = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relsparse"))
        .args(args)
        .current_dir(dir)
        .env("STORE3D_THREADS", "1")
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_deterministic_with_provenance() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&run(dir.path(), &["gen", "--config", c, "--out", "a"]));
    let first = fs::read(dir.path().join("a/dataset.json")).unwrap();
    ok(&run(dir.path(), &["gen", "--config", c, "--out", "a"]));
    assert_eq!(first, fs::read(dir.path().join("a/dataset.json")).unwrap());
    let v = json(&dir.path().join("a/dataset.json"));
    assert!(v["tool_version"].is_string() && v["config_hash"].as_str().unwrap().len() == 64);

    ok(&run(dir.path(), &["gen", "--config", c, "--out", "b", "--seed", "9"]));
    assert_ne!(first, fs::read(dir.path().join("b/dataset.json")).unwrap());
}

#[test]
fn perfect_detections_score_one() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&run(dir.path(), &["gen", "--config", c, "--out", "o"]));
    let mut v = json(&dir.path().join("o/dataset.json"));
    let obj = v.as_object_mut().unwrap();
    obj.remove("tool_version");
    obj.remove("config_hash");
    let ds: SceneDataset = serde_json::from_value(v).unwrap();
    let lines: Vec<String> = ds
        .frames()
        .flat_map(|(_, f)| f.gt_boxes.iter().map(|g| serde_json::to_string(&DetectionRecord::from(&Detection::from_gt(&f.frame_id, g, 0.9)))).collect::<Vec<_>>())
        .map(Result::unwrap)
        .collect();
    fs::write(dir.path().join("dets.jsonl"), lines.join("\n") + "\n").unwrap();
    ok(&run(dir.path(), &["eval", "--config", c, "--out", "o", "--dataset", "o/dataset.json", "--detections", "dets.jsonl"]));
    let m = json(&dir.path().join("o/metrics.json"));
    for k in ["mAP", "NDS", "mAP_RA", "NDS_RA"] {
        assert_eq!(m[k].as_f64(), Some(1.0), "{k}");
    }
    let csv = fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    let mut rows = csv.lines();
    assert!(rows.next().unwrap().starts_with("# tool_version="));
    assert!(rows.next().unwrap().starts_with("mAP,NDS"));
    assert!(rows.next().unwrap().starts_with("1,1,1,1"));
}

#[test]
fn exit_codes_and_error_json() {
    let (dir, _) = setup();
    fs::write(dir.path().join("bad.toml"), "tkr = 0.5\nbogus = 1\n").unwrap();
    let o = run(dir.path(), &["gen", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].is_string());

    let o = run(dir.path(), &["eval", "--out", "y", "--dataset", "missing.json", "--detections", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
    let left = fs::read_dir(dir.path().join("y")).map(|d| d.count()).unwrap_or(0);
    assert_eq!(left, 0);

    let o = run(dir.path(), &["gen", "--tkr", "1.5", "--out", "z"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let (dir, _) = setup();
    let o = run(dir.path(), &["gradcheck", "--out", "g"]);
    ok(&o);
    let v = json(&dir.path().join("g/gradcheck.json"));
    assert!(v["config_hash"].is_string());
}

#[test]
fn profile_reports_large_shape() {
    let (dir, _) = setup();
    ok(&run(dir.path(), &["profile", "--out", "p", "--tkr", "0.5"]));
    let v = json(&dir.path().join("p/profile.json"));
    assert!(v["sensitivity"].is_object() || v["sensitivity"].is_array());
    assert!(dir.path().join("p/stages.csv").exists());
}

#[test]
fn curve_has_one_row_per_keep_ratio() {
    let (dir, cfg) = setup();
    ok(&run(dir.path(), &["curve", "--config", cfg.to_str().unwrap(), "--out", "c"]));
    let csv = fs::read_to_string(dir.path().join("c/curve.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 2, "{csv}");
}
