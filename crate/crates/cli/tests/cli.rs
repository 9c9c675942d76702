use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 3

[data]
dir = "{}"
train_images = 6
eval_images = 4
size = 48

[model]
trunk = [4]
head = 4
desc_dim = 8
init_images = 4

[train]
iterations = 6
grid_stride = 4

[distill]
iterations = 3

[eval]
bench_sizes = [32]
bench_reps = 10
sweep_step_deg = 90
"#,
        dir.join("data").display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn rkf(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rkf"))
        .arg("--config")
        .arg(cfg)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = rkf(cfg, args);
    assert!(
        out.status.success(),
        "rkf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(cfg: &Path, args: &[&str]) -> i32 {
    rkf(cfg, args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_values(text: &str) -> Vec<f64> {
    text.lines()
        .skip(1)
        .flat_map(|l| l.split(',').filter_map(|v| v.parse::<f64>().ok()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn full_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let p = |name: &str| tmp.path().join(name);
    ok(&cfg, &["gen-data"]);
    assert!(p("data/train.txt").exists() && p("data/upright.txt").exists() && p("data/rotated.txt").exists());
    assert_eq!(fs::read_to_string(p("data/train.txt")).unwrap().lines().count(), 6);

    ok(&cfg, &["train-base", "--variant", "base", "--out", s(&p("base.ckpt")), "--report", s(&p("base.csv"))]);
    ok(&cfg, &["train-base", "--variant", "rkf", "--out", s(&p("rkf.ckpt"))]);
    let report = fs::read_to_string(p("base.csv")).unwrap();
    assert!(report.starts_with("iteration,l_ori,l_desc,l_score,total\n"));
    assert_eq!(report.lines().count(), 7);

    ok(&cfg, &["distill", "--teacher", s(&p("base.ckpt")), "--student", "rkf", "--out", s(&p("drkf.ckpt"))]);
    ok(
        &cfg,
        &["distill", "--teacher", s(&p("base.ckpt")), "--init", s(&p("rkf.ckpt")), "--out", s(&p("drkf2.ckpt")), "--report", s(&p("d.csv"))],
    );
    assert_eq!(fs::read_to_string(p("d.csv")).unwrap().lines().count(), 4);

    ok(&cfg, &["reparam", "--input", s(&p("rkf.ckpt")), "--out", s(&p("rkf_fused.ckpt"))]);
    for mode in ["upright", "rotated", "sweep"] {
        ok(&cfg, &["eval", "--checkpoint", s(&p("rkf.ckpt")), "--branched", "--mode", mode, "--out", s(&p(&format!("{mode}.csv")))]);
    }
    assert!(fs::read_to_string(p("upright.csv")).unwrap().starts_with("threshold,accuracy\n"));
    assert!(fs::read_to_string(p("sweep.csv")).unwrap().lines().count() > 1);
    ok(&cfg, &["eval", "--checkpoint", s(&p("base.ckpt")), "--mode", "rotated", "--mofa", "--out", s(&p("mofa.csv"))]);

    ok(&cfg, &["eval", "--checkpoint", s(&p("rkf_fused.ckpt")), "--mode", "rotated", "--out", s(&p("fused.csv"))]);
    let (a, b) = (csv_values(&fs::read_to_string(p("rotated.csv")).unwrap()), csv_values(&fs::read_to_string(p("fused.csv")).unwrap()));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-4), "{a:?} vs {b:?}");

    ok(&cfg, &["bench", "--base", s(&p("base.ckpt")), "--rkf", s(&p("rkf.ckpt")), "--out", s(&p("timing.csv"))]);
    assert!(fs::read_to_string(p("timing.csv")).unwrap().lines().count() > 1);
    assert_eq!(code(&cfg, &["bench", "--base", s(&p("base.ckpt")), "--rkf", s(&p("rkf_fused.ckpt")), "--out", s(&p("t2.csv"))]), 4);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let p = |name: &str| tmp.path().join(name);

    assert_eq!(code(&cfg, &["--set", "train.bogus=1", "gen-data"]), 2);
    assert_eq!(code(&cfg, &["--set", "train.lr=-1", "gen-data"]), 2);
    assert_eq!(code(&cfg, &["no-such-command"]), 2);
    assert_eq!(code(&p("missing.toml"), &["gen-data"]), 3);
    assert_eq!(code(&cfg, &["eval", "--checkpoint", "x", "--mode", "upright", "--mofa", "--branched", "--out", "y"]), 2);
    assert_eq!(code(&cfg, &["reparam", "--input", s(&p("none.ckpt")), "--out", s(&p("x.ckpt"))]), 3);
    assert_eq!(code(&cfg, &["train-base", "--out", s(&p("x.ckpt"))]), 3);

    fs::write(p("junk.ckpt"), b"not a checkpoint at all").unwrap();
    assert_eq!(code(&cfg, &["reparam", "--input", s(&p("junk.ckpt")), "--out", s(&p("x.ckpt"))]), 4);

    ok(&cfg, &["gen-data"]);
    ok(&cfg, &["train-base", "--out", s(&p("base.ckpt"))]);
    let mut bytes = fs::read(p("base.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(p("flipped.ckpt"), bytes).unwrap();
    assert_eq!(code(&cfg, &["eval", "--checkpoint", s(&p("flipped.ckpt")), "--mode", "upright", "--out", s(&p("e.csv"))]), 4);

    fs::write(p("data/upright/0000_a.pgm"), b"P5\n4 4\n65535\nshort").unwrap();
    assert_eq!(code(&cfg, &["eval", "--checkpoint", s(&p("base.ckpt")), "--mode", "upright", "--out", s(&p("e.csv"))]), 5);
    fs::write(p("data/rotated.txt"), "a.pgm b.pgm 1 0\n").unwrap();
    assert_eq!(code(&cfg, &["eval", "--checkpoint", s(&p("base.ckpt")), "--mode", "rotated", "--out", s(&p("e.csv"))]), 5);
}

#[test]
fn effective_config_is_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_rkf"))
        .args(["--config", s(&cfg), "--seed", "17", "--set", "train.lr=0.02", "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 17"), "{text}");
    assert!(text.contains("lr = 0.02"), "{text}");
}

#[test]
fn ablation_writes_every_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    ok(&cfg, &["ablation", "--out", s(&out_dir)]);
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variant,condition,pairs,empty_pairs,mma1,mma2,mma3,mma4,mma5,mma6,mma7,mma8,mma9,mma10"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for v in ["base", "rkf", "mofa", "dbase", "drkf"] {
        for c in ["upright", "rotated"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{v},{c},4,"))), "{v} {c}");
        }
    }
    for name in ["base", "rkf", "dbase", "drkf", "drkf_fused"] {
        assert!(out_dir.join(format!("{name}.ckpt")).exists(), "{name}");
    }
}
