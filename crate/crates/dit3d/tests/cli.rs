//! End-to-end checks of the command-line interface: artifact layout,
//! config echo, exit codes, determinism, and bit-equality between report
//! values and direct library calls.

use dit3d::data::read_cloud;
use dit3d::metrics::{coverage, one_nna, DistKind};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dit3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dit3d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn xyz_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".xyz"))
        .collect();
    names.sort();
    names
}

fn gen_small(dir: &Path, seed: u64) {
    let out = dit3d(&[
        "gen-data",
        "--per-class",
        "5",
        "--points",
        "32",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
}

const TINY_TOML: &str = r#"
model.size = "custom"
model.depth = 2
model.d = 12
model.heads = 2
model.p = 4
model.v = 8
model.r = 2
model.window_blocks = [1]

diffusion.t = 50

train.lr = 1e-3
train.batch_size = 8
train.seed = 5
"#;

fn train_tiny(dir: &Path, dataset: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY_TOML).unwrap();
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--epochs",
        "2",
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dit3d(&refs)
}

#[test]
fn gen_data_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_small(&a, 9);
    gen_small(&b, 9);

    let files = xyz_files(&a);
    assert_eq!(files.len(), 20);
    assert_eq!(files, xyz_files(&b));
    for f in &files {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs between identical seeds"
        );
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );

    let echo = json_file(&a.join("run.json"));
    assert_eq!(echo["command"], "gen-data");
    assert_eq!(echo["per_class"], 5);
    assert_eq!(echo["points"], 32);
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["classes"].as_array().unwrap().len(), 4);

    let bad = dit3d(&["gen-data", "--per-class", "0", "--out", a.to_str().unwrap()]);
    assert_exit(&bad, 1);
    let bad = dit3d(&[
        "gen-data",
        "--classes",
        "pyramid",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_exit(&bad, 1);
}

#[test]
fn train_writes_checkpoint_log_and_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, 10);
    let ckpt = tmp.path().join("model.ckpt");
    let out = train_tiny(tmp.path(), &data.join("manifest.json"), &ckpt, &[]);
    assert_exit(&out, 0);
    assert!(ckpt.exists());

    let meta = json_file(&tmp.path().join("model.ckpt.json"));
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["epochs_run"], 2);
    // 20 clouds minus 4 held out, batch 8 -> 2 steps per epoch.
    assert_eq!(meta["steps"], 4);
    assert_eq!(meta["config"]["model"]["size"], "custom");
    assert_eq!(meta["config"]["train"]["epochs"], 2);
    assert_eq!(meta["config"]["train"]["lr"], 1e-3);
    assert_eq!(meta["reference_defaults"]["batch_size"], 128);
    assert_eq!(meta["model"]["d"], 12);
    let initial = meta["initial_loss"].as_f64().unwrap();
    assert!((initial - 1.0).abs() < 0.2, "initial loss {initial}");
    let fraction = meta["trainable_fraction"].as_f64().unwrap();
    assert!(fraction < 1.0);

    let log = fs::read_to_string(tmp.path().join("model.ckpt.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["event"], "start");
    assert!(lines[0]["trainable_fraction"].as_f64().unwrap() < 1.0);
    for (i, line) in lines[1..].iter().enumerate() {
        assert_eq!(line["epoch"], i);
        assert!(line["mean_loss"].as_f64().unwrap().is_finite());
    }

    let missing = dit3d(&[
        "train",
        "--out-checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_exit(&missing, 1);
}

#[test]
fn efficient_training_freezes_most_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, 11);
    let ckpt = tmp.path().join("eff.ckpt");
    let out = train_tiny(
        tmp.path(),
        &data.join("manifest.json"),
        &ckpt,
        &["--efficient"],
    );
    assert_exit(&out, 0);
    let meta = json_file(&tmp.path().join("eff.ckpt.json"));
    assert_eq!(meta["efficient"], true);
    let fraction = meta["trainable_fraction"].as_f64().unwrap();
    assert!(
        fraction > 0.0 && fraction < 0.10,
        "efficient fraction {fraction}"
    );
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("trainable parameters"), "stdout: {stdout}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, 12);
    let ckpt = tmp.path().join("model.ckpt");
    assert_exit(
        &train_tiny(tmp.path(), &data.join("manifest.json"), &ckpt, &[]),
        0,
    );

    let sample = |out_dir: &Path, seed: &str| {
        let out = dit3d(&[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--count",
            "2",
            "--class",
            "torus",
            "--steps",
            "10",
            "--seed",
            seed,
            "--points",
            "20",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    };
    let s1 = tmp.path().join("s1");
    let s2 = tmp.path().join("s2");
    let s3 = tmp.path().join("s3");
    sample(&s1, "11");
    sample(&s2, "11");
    sample(&s3, "12");

    assert_eq!(xyz_files(&s1).len(), 2);
    for f in xyz_files(&s1) {
        let cloud = read_cloud(&s1.join(&f)).unwrap();
        assert_eq!(cloud.len(), 20);
        assert_eq!(
            fs::read(s1.join(&f)).unwrap(),
            fs::read(s2.join(&f)).unwrap(),
            "{f} differs between identical seeds"
        );
    }
    assert_ne!(
        fs::read(s1.join("sample_0000.xyz")).unwrap(),
        fs::read(s3.join("sample_0000.xyz")).unwrap()
    );

    let echo = json_file(&s1.join("run.json"));
    assert_eq!(echo["command"], "sample");
    assert_eq!(echo["class"], "torus");
    assert_eq!(echo["steps"], 10);
    assert_eq!(echo["points"], 20);
    assert!(echo["wall_time_s"].as_f64().unwrap() >= 0.0);

    let missing = dit3d(&[
        "sample",
        "--checkpoint",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
        "--class",
        "0",
        "--out",
        s1.to_str().unwrap(),
    ]);
    assert_exit(&missing, 2);
}

#[test]
fn eval_report_matches_library_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_small(&a, 13);
    gen_small(&b, 14);
    let report = tmp.path().join("report.json");
    let out = dit3d(&[
        "eval",
        "--generated",
        a.to_str().unwrap(),
        "--reference",
        b.to_str().unwrap(),
        "--metrics",
        "cd,emd",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let gen: Vec<_> = xyz_files(&a)
        .iter()
        .map(|f| read_cloud(&a.join(f)).unwrap())
        .collect();
    let refc: Vec<_> = xyz_files(&b)
        .iter()
        .map(|f| read_cloud(&b.join(f)).unwrap())
        .collect();

    let rep = json_file(&report);
    assert_eq!(rep["degenerate_overlap"], false);
    assert_eq!(rep["generated_count"], 20);
    for (i, kind) in [DistKind::Chamfer, DistKind::Emd].into_iter().enumerate() {
        let want_nna = one_nna(&gen, &refc, kind).unwrap();
        let want_cov = coverage(&gen, &refc, kind).unwrap();
        let row = &rep["results"][i];
        assert_eq!(
            row["one_nna_percent"].as_f64().unwrap().to_bits(),
            want_nna.to_bits(),
            "1-NNA mismatch for {kind:?}"
        );
        assert_eq!(
            row["coverage_percent"].as_f64().unwrap().to_bits(),
            want_cov.to_bits(),
            "coverage mismatch for {kind:?}"
        );
    }

    let self_report = tmp.path().join("self.json");
    let out = dit3d(&[
        "eval",
        "--generated",
        a.to_str().unwrap(),
        "--reference",
        a.to_str().unwrap(),
        "--out",
        self_report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let rep = json_file(&self_report);
    assert_eq!(rep["degenerate_overlap"], true);
    assert_eq!(rep["results"][0]["coverage_percent"], 100.0);

    let bad = dit3d(&[
        "eval",
        "--generated",
        a.to_str().unwrap(),
        "--reference",
        b.to_str().unwrap(),
        "--metrics",
        "hausdorff",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_exit(&bad, 1);
}

#[test]
fn gradcheck_exit_codes_follow_the_verdict() {
    let ok = dit3d(&["gradcheck"]);
    assert_exit(&ok, 0);
    let stdout = String::from_utf8_lossy(&ok.stdout).to_string();
    assert!(stdout.contains("gradient checks passed"), "stdout: {stdout}");

    let fault = dit3d(&["gradcheck", "--inject-fault"]);
    assert_exit(&fault, 2);
    let stdout = String::from_utf8_lossy(&fault.stdout).to_string();
    assert!(stdout.contains("FAIL injected-fault"), "stdout: {stdout}");
}
