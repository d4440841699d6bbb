use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_glimpse-pad");

const TINY: &str = r#"
[synth]
image_size = 16
n_genuine = 10
n_attack = 10
artifact_size = 5
artifact_amplitude = 0.4
[model]
preset = "reduced"
[train]
epochs_stage1 = 1
epochs_stage2 = 1
batch_size = 4
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn trained(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("train");
    ok(&["train", "--config", p(cfg), "--out", p(&out)]);
    out
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let (dir, cfg) = setup();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["synth", "--config", p(&cfg), "--out", p(&b)]);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 20);
    for f in ["manifest.csv", "train.csv", "dev.csv", "test.csv", "images/a00003.png", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let parts: usize = ["train.csv", "dev.csv", "test.csv"]
        .iter()
        .map(|f| fs::read_to_string(a.join(f)).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(parts, 20);
}

#[test]
fn config_errors_exit_2_with_the_key_path() {
    let (_dir, cfg) = setup();
    let out = run(&["synth", "--config", p(&cfg), "--set", "synth.artifact_sise=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.artifact_sise"));
    let out = run(&["train", "--config", p(&cfg), "--set", "train.batch_size=\"big\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn train_writes_checkpoints_log_and_dev_scores() {
    let (dir, cfg) = setup();
    let out = trained(dir.path(), &cfg);
    for f in ["stage1.ckpt", "model.ckpt", "train_log.jsonl", "dev_scores.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let again = dir.path().join("again");
    ok(&["train", "--config", p(&cfg), "--out", p(&again)]);
    let last = |d: &Path| fs::read_to_string(d.join("train_log.jsonl")).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last(&out), last(&again));
}

#[test]
fn stage_one_only_and_resumed_stage_two() {
    let (dir, cfg) = setup();
    let s1 = dir.path().join("s1");
    ok(&["train", "--config", p(&cfg), "--out", p(&s1), "--stage", "1"]);
    assert!(s1.join("stage1.ckpt").exists());
    assert!(!s1.join("model.ckpt").exists());
    let s2 = dir.path().join("s2");
    let ckpt = s1.join("stage1.ckpt");
    ok(&["train", "--config", p(&cfg), "--out", p(&s2), "--stage", "2", "--stage1-checkpoint", p(&ckpt)]);
    assert!(s2.join("model.ckpt").exists());
    let full = trained(dir.path(), &cfg);
    assert_eq!(fs::read(s2.join("model.ckpt")).unwrap(), fs::read(full.join("model.ckpt")).unwrap());
}

#[test]
fn training_from_manifests_allows_an_empty_dev_set() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    fs::write(data.join("dev.csv"), "id,path,label,pai_type,group_id\n").unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--set", &format!("data.dir={}", p(&data)), "--out", p(&out)]);
    let dev = fs::read_to_string(out.join("dev_scores.csv")).unwrap();
    assert_eq!(dev.lines().count(), 1);
}

#[test]
fn eval_is_byte_identical_and_dev_equal_to_test_gives_hter_eer() {
    let (dir, cfg) = setup();
    let model = trained(dir.path(), &cfg).join("model.ckpt");
    let a = dir.path().join("e1");
    let b = dir.path().join("e2");
    for out in [&a, &b] {
        ok(&["eval", "--config", p(&cfg), "--checkpoint", p(&model), "--data", "test", "--dev", "test", "--out", p(out)]);
    }
    for f in ["scores.csv", "report.json", "far_frr.csv", "false_accepts.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["threshold_source"], "dev");
    assert_eq!(report["hter"], report["eer"]);
}

#[test]
fn eval_exit_codes() {
    let (dir, cfg) = setup();
    let model = trained(dir.path(), &cfg).join("model.ckpt");
    let out = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&model), "--set", "model.fusion=average"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusion"));

    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    let text = fs::read_to_string(data.join("test.csv")).unwrap();
    let bona: String = text.lines().filter(|l| !l.contains(",attack,")).map(|l| format!("{l}\n")).collect();
    let only = data.join("bona.csv");
    fs::write(&only, bona).unwrap();
    let out = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&model), "--data", p(&only)]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attack"));

    let mut bytes = fs::read(&model).unwrap();
    bytes.truncate(bytes.len() - 7);
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let out = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&broken)]);
    assert_eq!(out.status.code(), Some(4));
}

fn table_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("ablation.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ablation_tables_and_row_snapshots() {
    let (dir, cfg) = setup();
    let steps = dir.path().join("steps");
    ok(&["ablate", "--config", p(&cfg), "--axis", "steps", "--values", "2,4,8", "--out", p(&steps)]);
    let rows = table_rows(&steps);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["2", "4", "8"]);
    for (i, v) in ["2", "4", "8"].iter().enumerate() {
        let snap = fs::read_to_string(steps.join(format!("rows/{i:02}-{v}/config.toml"))).unwrap();
        assert!(snap.contains(&format!("steps = {v}")), "{snap}");
    }
    let macs: Vec<i64> = rows.iter().map(|r| r[9].parse().unwrap()).collect();
    assert_eq!(macs[2] - macs[1], 2 * (macs[1] - macs[0]));

    let fusion = dir.path().join("fusion");
    ok(&["ablate", "--config", p(&cfg), "--axis", "fusion", "--out", p(&fusion)]);
    let names: Vec<String> = table_rows(&fusion).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(names, ["average", "weighted_average", "concat"]);

    let out = run(&["ablate", "--config", p(&cfg), "--axis", "colour"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trajectory_overlay_and_confidence_series() {
    let (dir, cfg) = setup();
    let model = trained(dir.path(), &cfg).join("model.ckpt");
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    let image = data.join("images/a00001.png");
    let viz = dir.path().join("viz");
    let stdout = ok(&["viz-traj", "--checkpoint", p(&model), "--image", p(&image), "--out", p(&viz)]).stdout;
    let series = fs::read_to_string(viz.join("confidence.csv")).unwrap();
    let rows: Vec<&str> = series.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let overlay = image::open(viz.join("trajectory.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (64, 64));
    assert!(viz.join("config.toml").exists());

    let single = data.join("single.csv");
    let row = fs::read_to_string(data.join("manifest.csv"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("a00001,"))
        .unwrap()
        .to_string();
    let other = fs::read_to_string(data.join("manifest.csv"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("g00000,"))
        .unwrap()
        .to_string();
    fs::write(&single, format!("id,path,label,pai_type,group_id\n{row}\n{other}\n")).unwrap();
    let ev = dir.path().join("ev");
    ok(&["eval", "--config", p(&cfg), "--checkpoint", p(&model), "--data", p(&single), "--out", p(&ev)]);
    let scores = fs::read_to_string(ev.join("scores.csv")).unwrap();
    let score = scores.lines().nth(1).unwrap().rsplit(',').next().unwrap();
    let c_t = rows.last().unwrap().rsplit(',').next().unwrap();
    assert_eq!(score, c_t);
    let printed = String::from_utf8_lossy(&stdout);
    assert!(printed.contains("score"));
}

#[test]
fn cam_heatmap_matches_the_input_size() {
    let (dir, cfg) = setup();
    let model = trained(dir.path(), &cfg).join("model.ckpt");
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    let cam = dir.path().join("cam");
    ok(&["viz-cam", "--checkpoint", p(&model), "--image", p(&data.join("images/g00002.png")), "--out", p(&cam)]);
    let img = image::open(cam.join("cam.png")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}

#[test]
fn compute_report_is_affine_in_steps() {
    let (dir, cfg) = setup();
    let macs = |t: usize| -> (u64, u64) {
        let out = ok(&["report-compute", "--config", p(&cfg), "--set", &format!("model.steps={t}")]);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        (v["macs_per_episode"].as_u64().unwrap(), v["macs"]["per_step"].as_u64().unwrap())
    };
    let (m4, step) = macs(4);
    let (m8, _) = macs(8);
    let (m6, _) = macs(6);
    assert_eq!(m8 - m4, 2 * (m6 - m4));
    assert!(m8 - m4 >= 4 * step);
    let model = trained(dir.path(), &cfg).join("model.ckpt");
    let report = dir.path().join("compute.json");
    ok(&["report-compute", "--checkpoint", p(&model), "--out", p(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["parameters"].as_u64().unwrap() > 0);
}
