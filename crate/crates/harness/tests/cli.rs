use std::fs;
use std::path::Path;
use std::process::Command;

use flatmin_harness::report::Manifest;

fn flatmin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_flatmin"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into(),
        String::from_utf8_lossy(&out.stderr).into(),
    )
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(flatmin(&[]).0, 1);
    assert_eq!(flatmin(&["bogus"]).0, 1);
    assert_eq!(flatmin(&["train", "--format", "xml"]).0, 1);
    assert_eq!(flatmin(&["--help"]).0, 0);
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = write(
        tmp.path(),
        "bad.cfg",
        "model.hidden = 8\noptimizer.lrr = 0.1\n",
    );
    let (code, _, err) = flatmin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(
        err.contains("optimizer.lrr") && err.contains("bad.cfg:2:"),
        "{err}"
    );

    let cfg = write(tmp.path(), "bad2.cfg", "optimizer.lr = fast\n");
    assert_eq!(
        flatmin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).0,
        2
    );
    assert_eq!(
        flatmin(&[
            "train",
            "--config",
            "/nonexistent.cfg",
            "--out",
            out.to_str().unwrap()
        ])
        .0,
        2
    );
}

#[test]
fn numeric_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // a checkpoint whose weights overflow the forward pass
    let cfg = write(
        tmp.path(),
        "c.cfg",
        "dataset.n = 20\nmodel.hidden = 3\nstop.max_epochs = 1\nmeasures.list = lpf\n",
    );
    assert_eq!(
        flatmin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).0,
        0
    );
    let ckpt = out.join("checkpoints/s0.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    fn blow_up(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Number(n) if n.is_f64() => *v = serde_json::Value::from(1e300),
            serde_json::Value::Array(a) => a.iter_mut().for_each(blow_up),
            serde_json::Value::Object(o) => o.values_mut().for_each(blow_up),
            _ => {}
        }
    }
    blow_up(&mut v);
    fs::write(&ckpt, v.to_string()).unwrap();
    let m = tmp.path().join("m");
    let (code, _, err) = flatmin(&[
        "measure",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        m.to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(m.join("manifest.json").exists());
}

#[test]
fn train_then_measure_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let cfg = write(
        tmp.path(),
        "c.cfg",
        "dataset.n = 200\ndataset.separation = 6\ndataset.noise = 0.5\nmodel.hidden = 8\nstop.max_epochs = 200\n\
         measures.list = lpf, frn, lambda_max\nmeasures.lpf_samples = 50\nmeasures.lanczos_steps = 10\nmeasures.lanczos_probes = 2\nrun.seeds = 0, 1\n",
    );
    let (code, stdout, _) = flatmin(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.trim().ends_with("manifest.json"));
    let m = manifest(&out);
    assert_eq!(m.command, "train");
    assert_eq!(m.run_ids, vec!["s0", "s1"]);
    for a in &m.artifacts {
        assert!(out.join(&a.path).exists(), "{:?}", a.path);
    }
    // separable blobs converge well inside the budget
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    assert!(runs.lines().skip(1).all(|l| l.contains(",true,")), "{runs}");
    let measured = fs::read_to_string(out.join("measures.csv")).unwrap();
    assert_eq!(measured.lines().count(), 1 + 2 * 3);

    // re-measuring the saved checkpoint reproduces the trained run's numbers
    let re = tmp.path().join("m");
    let ckpt = out.join("checkpoints/s0.json");
    let args = [
        "measure",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        re.to_str().unwrap(),
    ];
    assert_eq!(flatmin(&args).0, 0);
    let value = |text: &str, name: &str| -> String {
        let line = text
            .lines()
            .find(|l| l.split(',').nth(1) == Some(name))
            .unwrap();
        line.split(',').nth(2).unwrap().to_string()
    };
    let again = fs::read_to_string(re.join("measures.csv")).unwrap();
    let first: String = measured
        .lines()
        .filter(|l| l.starts_with("s0,"))
        .collect::<Vec<_>>()
        .join("\n");
    for name in ["lpf", "frn", "lambda_max"] {
        assert_eq!(value(&first, name), value(&again, name), "{name}");
    }
    assert!(re.join("balance.json").exists());
}

#[test]
fn json_format_and_csv_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::new();
    for i in 0..60 {
        let x = i as f64 / 60.0;
        csv.push_str(&format!("{},{},{}\n", x, 1.0 - x, usize::from(x > 0.5)));
    }
    let data = write(tmp.path(), "d.csv", &csv);
    let cfg = write(
        tmp.path(),
        "c.cfg",
        &format!("dataset.source = csv\ndataset.path = {data}\ndataset.test_path = {data}\nmodel.hidden = 4\nstop.max_epochs = 3\n"),
    );
    let out = tmp.path().join("j");
    assert_eq!(
        flatmin(&[
            "train",
            "--config",
            &cfg,
            "--format",
            "json",
            "--out",
            out.to_str().unwrap()
        ])
        .0,
        0
    );
    let runs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("runs.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 1);
    assert_eq!(runs[0]["epochs"], serde_json::Value::from(3));
    assert!(out.join("logs/s0.json").exists());
}

#[test]
fn sweep_manifest_counts_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "s.cfg",
        "dataset.n = 80\ndataset.separation = 5\ndataset.noise = 0.5\nmodel.hidden = 4\nstop.max_epochs = 100\nstop.loss_threshold = 0.05\n\
         measures.list = lpf, frn\nmeasures.lpf_samples = 20\nrun.seeds = 0, 1, 2\n\
         sweep.axis = hyperparam\nsweep.param = optimizer.lr\nsweep.values = 0.01, 0.05\n",
    );
    let out = tmp.path().join("s");
    assert_eq!(
        flatmin(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]).0,
        0
    );
    let m = manifest(&out);
    assert_eq!(m.run_ids.len(), 2 * 3);
    assert_eq!(
        m.artifacts.iter().filter(|a| a.kind == "step_log").count(),
        6
    );
    let points = fs::read_to_string(out.join("points.csv")).unwrap();
    assert_eq!(points.lines().count(), 3);
    assert!(points.starts_with("axis,value,runs,converged,"));
}

#[test]
fn width_sweep_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "w.cfg",
        "dataset.n = 100\ndataset.label_noise = 0.2\nmodel.hidden = 4, 4\nstop.max_epochs = 60\nstop.loss_threshold = 0.2\n\
         measures.list = lpf, shannon_entropy\nmeasures.lpf_samples = 10\nsweep.axis = width\nsweep.values = 4, 8, 16, 32\n",
    );
    let out = tmp.path().join("w");
    assert_eq!(
        flatmin(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]).0,
        0
    );
    let m = manifest(&out);
    assert_eq!(m.run_ids.len(), 4);
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(out.join("correlation.csv").exists());
}

#[test]
fn offline_commands() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["check", "theory", "landscape"] {
        let out = tmp.path().join(cmd);
        let (code, _, err) = flatmin(&[cmd, "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{cmd}: {err}");
        let m = manifest(&out);
        assert_eq!(m.command, cmd);
        assert_eq!(m.artifacts.len(), 1);
    }
    let check = fs::read_to_string(tmp.path().join("check/check.csv")).unwrap();
    assert!(!check.contains(",false"), "{check}");
}
