use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dclstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dclstm")).args(args).env("DCLSTM_LOG", "quiet").output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Value of a `key: value` line.
fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no {key} in:\n{text}"))
}

const SMALL: &str = "frames=8\nheight=16\nwidth=16\nconv3d_channels=4,4\nconvlstm_hidden=4\n\
                     deformable_per_quartile=1\nhead_channels=4,4\nnum_classes=4\nbatch_size=4\n";

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn synth(dir: &Path, clips: usize) -> String {
    let data = dir.join("data");
    let out = dclstm(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--clips",
        &clips.to_string(),
        "--classes",
        "4",
        "--frames",
        "8",
        "--size",
        "16x16",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(field(&stdout(&out), "clips"), clips.to_string());
    data.to_str().unwrap().to_string()
}

#[test]
fn every_subcommand_has_help() {
    for cmd in ["synth", "train", "eval", "gradcheck", "ablate", "inspect"] {
        let out = dclstm(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(stdout(&out).contains("Usage"), "{cmd}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dclstm(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(dclstm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dclstm(&[]).status.code(), Some(2));
    assert_eq!(dclstm(&["synth", "--out", "x", "--size", "12"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = dclstm(&["inspect", "--ckpt", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(dclstm(&["gradcheck", "--kernel", "nope"]).status.code(), Some(1));
}

#[test]
fn gradcheck_deformable_passes() {
    let out = dclstm(&["gradcheck", "--kernel", "deformable_conv2d", "--trials", "5", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("deformable_conv2d: trials=5"), "{text}");
    assert!(text.contains("(< 1e-3)"), "{text}");
    assert_eq!(field(&text, "result"), "pass");
}

#[test]
fn untrained_model_scores_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 80);
    let config = write_config(dir.path(), "epochs=0\n");
    let ckpt = dir.path().join("m.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = dclstm(&["train", "--data", &data, "--config", &config, "--out", ckpt]);
    assert!(out.status.success(), "{out:?}");
    let out = dclstm(&["eval", "--data", &data, "--ckpt", ckpt]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let acc: f64 = field(&text, "accuracy").parse().unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "{text}");
    assert_eq!(field(&text, "samples"), "80");

    let out = dclstm(&["eval", "--data", &data, "--ckpt", ckpt, "--split", "val", "--config", &config]);
    assert_eq!(field(&stdout(&out), "samples"), "16");
}

#[test]
fn train_is_reproducible_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 24);
    let config = write_config(dir.path(), "epochs=2\n");
    let run = |tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let log = dir.path().join(format!("{tag}.tsv"));
        let out = dclstm(&[
            "--threads",
            "1",
            "train",
            "--data",
            &data,
            "--config",
            &config,
            "--out",
            ckpt.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
        (fs::read(&ckpt).unwrap(), fs::read_to_string(&log).unwrap(), ckpt)
    };
    let (a_ckpt, a_log, path) = run("a");
    let (b_ckpt, b_log, _) = run("b");
    assert_eq!(a_ckpt, b_ckpt);
    assert_eq!(a_log, b_log);
    assert_eq!(a_log.lines().count(), 2);

    let out = dclstm(&["inspect", "--ckpt", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(field(&text, "config.num_classes"), "4");
    assert_eq!(field(&text, "param.fc.weight"), "[4, 4]");
    assert_eq!(field(&text, "shape.gap"), "[4]");
    let count: usize = field(&text, "param_count").parse().unwrap();
    assert!(count > 0);

    let base = dir.path().join("base.ckpt");
    let out = dclstm(&["train", "--data", &data, "--config", &config, "--out", base.to_str().unwrap(), "--baseline"]);
    assert_eq!(field(&stdout(&out), "variant"), "normal_convlstm");
    let text = stdout(&dclstm(&["inspect", "--ckpt", base.to_str().unwrap()]));
    assert_eq!(field(&text, "config.deformable_per_quartile"), "0");
    assert!(!text.contains("offset"));
}

#[test]
fn ablate_prints_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 24);
    let config = write_config(dir.path(), "epochs=1\n");
    let out = dclstm(&["ablate", "--data", &data, "--config", &config, "--seeds", "1,2"]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let rows: Vec<_> = text.lines().collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].contains("seed=1") && rows[0].contains("seed=2"));
    assert!(rows[1].starts_with("normal_convlstm"));
    assert!(rows[2].starts_with("deformable_convlstm"));
    for row in &rows[1..] {
        let cols: Vec<f64> = row.split_whitespace().skip(1).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 3);
        assert!(cols.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
