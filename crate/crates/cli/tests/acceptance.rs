//! Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Criteria 6 and 8 run the full desk-scale ablation twice through the
//! `rkf` binary with the checked-in default config; artifacts stay under the target
//! tmp directory for inspection.

#[path = "../../core/tests/grad_cases/mod.rs"]
mod grad_cases;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rkf_core::distill::{desc_distill_loss, score_distill_loss};
use rkf_core::geometry::{rotate_image, RotationAngle};
use rkf_core::mofa::MofaTeacher;
use rkf_core::net::{Model, ModelConfig, Variant};
use rkf_core::rkf::{check_equivariance, RkfLayer};
use rkf_core::tensor::{conv2d, relu, ConvKernel, Padding, Shape, Tensor};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
/// Dataset location relative to each run directory.
const DATA: &str = "data.dir=data";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn uniform(shape: Shape, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn he_kernel(c_out: usize, c_in: usize, k: usize, scale: f32, rng: &mut ChaCha8Rng) -> ConvKernel<f32> {
    let bound = scale * (6.0 / (c_in * k * k) as f32).sqrt();
    let w = uniform(Shape::new(c_out, c_in, k, k), rng, -bound, bound);
    ConvKernel::new(w, (0..c_out).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()
}

/// Runs the binary inside `run` so both runs issue byte-identical command lines.
fn rkf_bin(run: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rkf"))
        .current_dir(run)
        .args(["--config", CONFIG, "--deterministic", "--quiet"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("rkf {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn csv_numbers(path: &Path) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').filter_map(|v| v.parse::<f64>().ok()).collect::<Vec<_>>())
        .collect())
}

/// Criterion 1, kernel level: 100 random (kernel, input) cases, N = 4, k in {3, 5}, f32.
fn reparam_kernels() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f32;
    for case in 0..100 {
        let k = if case % 2 == 0 { 3 } else { 5 };
        let (c_in, c_out) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let size = rng.gen_range(8..33);
        let kern = ConvKernel::new(
            uniform(Shape::new(c_out, c_in, k, k), &mut rng, -1.0, 1.0),
            (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let layer = RkfLayer::new(kern, 4).unwrap();
        let x = uniform(Shape::new(1, c_in, size, size), &mut rng, 0.0, 1.0);
        let branched = layer.forward(&x).unwrap();
        let fused = conv2d(&x, &layer.reparameterize().unwrap(), Padding::SameZero).unwrap();
        worst = worst.max(branched.max_abs_diff(&fused).unwrap());
    }
    (worst <= 1e-4, format!("kernel level max |fused - branched| {worst:.2e} over 100 cases"))
}

/// Criterion 1, model level: reparameterize the trained DRKF and compare every metric.
fn reparam_model(run: &Path) -> Result<(bool, String), String> {
    rkf_bin(run, &["reparam", "--input", "abl/drkf.ckpt", "--out", "drkf_fused_cli.ckpt"])?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for mode in ["upright", "rotated", "sweep"] {
        let (a, b) = (format!("eval_branched_{mode}.csv"), format!("eval_fused_{mode}.csv"));
        rkf_bin(run, &["--set", DATA, "eval", "--checkpoint", "abl/drkf.ckpt", "--branched", "--mode", mode, "--out", &a])?;
        rkf_bin(run, &["--set", DATA, "eval", "--checkpoint", "drkf_fused_cli.ckpt", "--mode", mode, "--out", &b])?;
        let (va, vb) = (csv_numbers(&run.join(a))?, csv_numbers(&run.join(b))?);
        if va.len() != vb.len() || va.is_empty() {
            return Ok((false, format!("{mode}: metric count {} vs {}", va.len(), vb.len())));
        }
        count += va.len();
        worst = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok((worst <= 1e-4, format!("model level max metric difference {worst:.2e} over {count} values")))
}

fn stack_forward(layers: &[ConvKernel<f32>], rkf: bool, x: &Tensor<f32>) -> rkf_core::Result<Tensor<f32>> {
    let mut h = x.clone();
    for (i, k) in layers.iter().enumerate() {
        h = if rkf {
            RkfLayer::new(k.clone(), 4)?.forward(&h)?
        } else {
            conv2d(&h, k, Padding::SameZero)?
        };
        if i + 1 < layers.len() {
            h = relu(&h);
        }
    }
    Ok(h)
}

/// Criterion 2.
fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let crop = 3;
    let mut worst = 0.0f32;
    let mut control_hits = 0;
    for _ in 0..100 {
        let layers = vec![
            he_kernel(8, 1, 3, 0.25, &mut rng),
            he_kernel(8, 8, 3, 0.25, &mut rng),
            he_kernel(8, 8, 3, 0.25, &mut rng),
        ];
        let x = uniform(Shape::new(1, 1, 64, 64), &mut rng, 0.0, 1.0);
        for m in 0..4 {
            let dev = check_equivariance(|t| stack_forward(&layers, true, t), &x, RotationAngle::quarter_turns_of(m), crop).unwrap();
            worst = worst.max(dev);
        }
        let m = rng.gen_range(1..4);
        let dev = check_equivariance(|t| stack_forward(&layers, false, t), &x, RotationAngle::quarter_turns_of(m), crop).unwrap();
        if dev >= 1e-3 {
            control_hits += 1;
        }
    }
    outcome(
        worst <= 1e-4 && control_hits >= 95,
        format!("RKF stack max interior deviation {worst:.2e} (<= 1e-4); plain-conv control >= 1e-3 on {control_hits}/100 (>= 95)"),
    )
}

/// Criterion 3.
fn mofa_group() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f32;
    let mut checksum_ok = true;
    for case in 0..50 {
        let variant = if case % 2 == 0 { Variant::Base } else { Variant::Rkf { n_rotations: 4 } };
        let model = Model::<f32>::init(ModelConfig::default().with_variant(variant), case).unwrap();
        let before = model.param_checksum();
        let teacher = MofaTeacher::new(model, 4).unwrap();
        let x = uniform(Shape::new(1, 1, 64, 64), &mut rng, 0.0, 1.0);
        let angle = RotationAngle::quarter_turns_of(rng.gen_range(1..4));
        let plain = teacher.forward(&x).unwrap();
        let of_rotated = teacher.forward(&rotate_image(&x, angle).0).unwrap();
        worst = worst
            .max(of_rotated.desc.max_abs_diff(&rotate_image(&plain.desc, angle).0).unwrap())
            .max(of_rotated.score.max_abs_diff(&rotate_image(&plain.score, angle).0).unwrap());
        checksum_ok &= teacher.model().param_checksum() == before;
    }
    outcome(
        worst <= 1e-5 && checksum_ok,
        format!("max |MOFA(rot x) - rot MOFA(x)| {worst:.2e} over 50 cases (<= 1e-5); teacher checksum unchanged: {checksum_ok}"),
    )
}

/// Criterion 4.
fn gradients() -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (name, case) in grad_cases::ALL {
        let mut report = grad_cases::GradReport::default();
        case(&mut report);
        checks += report.checks.len();
        worst = worst.max(report.worst());
        failures.extend(report.failures().into_iter().map(|(n, e)| format!("{name}/{n} {e:.2e}")));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{checks} backward checks, worst relative error {worst:.2e} (<= 1e-3)")
    } else {
        format!("failing: {}", failures.join(", "))
    };
    outcome(pass, detail)
}

/// Criterion 5, closed-form values.
fn loss_identities() -> (bool, String) {
    let a = Tensor::from_fn(Shape::new(1, 2, 8, 8), |_, c, _, _| if c == 0 { 1.0f64 } else { 0.0 });
    let b = Tensor::from_fn(Shape::new(1, 2, 8, 8), |_, c, _, _| if c == 1 { 1.0f64 } else { 0.0 });
    let (desc, _) = desc_distill_loss(&a, &b).unwrap();
    let constant = Tensor::full(Shape::new(1, 1, 16, 16), 0.37f64);
    let (score, _) = score_distill_loss(&constant, &constant, 4).unwrap();
    let pass = (desc - 2f64.sqrt()).abs() < 1e-12 && (score - 16f64.ln()).abs() < 1e-12 && (score - 2.7726).abs() < 5e-5;
    (pass, format!("descriptor loss {desc:.6} (sqrt 2), score loss {score:.4} (log 16)"))
}

/// Criterion 5, decomposition at every logged training step.
fn decomposition(abl: &Path) -> Result<(bool, String), String> {
    let (l1, l2) = (1.0, 1.0);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for name in ["base", "rkf", "dbase", "drkf"] {
        let path = abl.join(format!("{name}_report.csv"));
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        for line in text.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
            let (l_ori, l_desc, l_score, total) = (v[1], v[2], v[3], v[4]);
            worst = worst.max((total - (l_ori + l2 * (l_desc + l1 * l_score))).abs());
            steps += 1;
        }
    }
    Ok((worst <= 1e-6, format!("total = L_ori + l2 (L_desc + l1 L_score) to {worst:.1e} at {steps} logged steps")))
}

fn ablation_table(path: &Path) -> Result<BTreeMap<(String, String), f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty ablation table")?.split(',').collect();
    let col = header.iter().position(|h| *h == "mma5").ok_or("no mma5 column")?;
    Ok(lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), f[col].parse().unwrap_or(f64::NAN))
        })
        .collect())
}

/// Criterion 6.
fn ablation(abl: &Path, seconds: f64) -> Result<Outcome, String> {
    let t = ablation_table(&abl.join("ablation.csv"))?;
    let get = |v: &str, c: &str| t.get(&(v.to_string(), c.to_string())).copied().unwrap_or(f64::NAN);
    let (bu, br) = (get("base", "upright"), get("base", "rotated"));
    let checks = [
        ("a", br < bu - 0.10),
        ("b", get("rkf", "rotated") >= br),
        ("c", get("mofa", "rotated") >= br),
        ("d", get("drkf", "rotated") >= br && get("drkf", "rotated") >= get("dbase", "rotated")),
        ("e", get("drkf", "upright") >= 0.9 * bu),
        ("runtime", seconds < 900.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let mut detail = String::from("MMA@5 upright/rotated:");
    for v in ["base", "rkf", "mofa", "dbase", "drkf"] {
        detail.push_str(&format!(" {v} {:.3}/{:.3}", get(v, "upright"), get(v, "rotated")));
    }
    detail.push_str(&format!("; {seconds:.0}s"));
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(",")));
    }
    Ok(outcome(failed.is_empty(), detail))
}

/// Criterion 7.
fn timing(run: &Path) -> Result<Outcome, String> {
    let csv = run.join("timing.csv");
    rkf_bin(run, &["--set", "eval.bench_reps=30", "bench", "--base", "abl/base.ckpt", "--rkf", "abl/rkf.ckpt", "--out", "timing.csv"])?;
    let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let ratio = |variant: &str, size: &str| -> f64 {
        text.lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|f| f[0] == variant && f[1] == size)
            .and_then(|f| f[3].parse().ok())
            .unwrap_or(f64::NAN)
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for size in ["64", "256"] {
        let (fused, branched, mofa) = (ratio("rkf_fused", size), ratio("rkf_branched", size), ratio("mofa", size));
        pass &= fused <= 1.15 && branched >= 2.0 && mofa >= 2.0;
        detail.push(format!("{size}px fused {fused:.2}x branched {branched:.2}x MOFA {mofa:.2}x"));
    }
    Ok(outcome(pass, format!("{} (fused <= 1.15, others >= 2.0)", detail.join("; "))))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Criterion 8: every checkpoint, dataset file and CSV of two runs, except wall-clock timing.
fn determinism(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (files_under(a), files_under(b));
    let compared: Vec<&PathBuf> = fa.iter().filter(|f| !f.ends_with("timing.csv")).collect();
    let mut differing = Vec::new();
    for f in &compared {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let same_set = fa.iter().filter(|f| !f.ends_with("timing.csv")).eq(fb.iter().filter(|f| !f.ends_with("timing.csv")));
    let ckpts = compared.iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")).count();
    let csvs = compared.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    let pass = same_set && differing.is_empty() && ckpts > 0 && csvs > 0;
    let mut detail = format!("{} files compared ({ckpts} checkpoints, {csvs} CSVs)", compared.len());
    if !same_set {
        detail.push_str("; file sets differ");
    }
    if !differing.is_empty() {
        detail.push_str(&format!("; differing: {}", differing.join(", ")));
    }
    outcome(pass, detail)
}

/// Dataset generation and the full ablation into `run/`; returns the ablation wall time.
fn pipeline(run: &Path) -> Result<f64, String> {
    fs::create_dir_all(run).map_err(|e| e.to_string())?;
    let start = Instant::now();
    rkf_bin(run, &["--set", DATA, "gen-data"])?;
    rkf_bin(run, &["--set", DATA, "ablation", "--out", "abl"])?;
    Ok(start.elapsed().as_secs_f64())
}

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).expect("work directory");
    let (run_a, run_b) = (work.join("run_a"), work.join("run_b"));
    let mut results: BTreeMap<u8, (&str, Outcome)> = BTreeMap::new();
    let failed = |e: String| outcome(false, e);

    eprintln!("acceptance: property checks");
    let kernel_level = reparam_kernels();
    results.insert(2, ("equivariance", equivariance()));
    results.insert(3, ("MOFA group property", mofa_group()));
    results.insert(4, ("gradient suite", gradients()));
    let identities = loss_identities();

    eprintln!("acceptance: ablation run 1 of 2 (about 5 minutes)");
    let pipeline_a = pipeline(&run_a);
    eprintln!("acceptance: ablation run 2 of 2");
    let pipeline_b = pipeline(&run_b);

    let c6 = match &pipeline_a {
        Ok(seconds) => ablation(&run_a.join("abl"), *seconds).unwrap_or_else(failed),
        Err(e) => failed(e.clone()),
    };
    results.insert(6, ("desk-scale ablation", c6));

    let c5 = match decomposition(&run_a.join("abl")) {
        Ok((ok, d)) => outcome(identities.0 && ok, format!("{}; {d}", identities.1)),
        Err(e) => outcome(false, format!("{}; {e}", identities.1)),
    };
    results.insert(5, ("loss identities", c5));

    eprintln!("acceptance: model-level reparameterization");
    let model_level = pipeline_a.as_ref().map_err(|e| e.clone()).and_then(|_| reparam_model(&run_a));
    let model_level_b = pipeline_b.as_ref().map_err(|e| e.clone()).and_then(|_| reparam_model(&run_b));
    let c1 = match model_level {
        Ok((ok, d)) => outcome(kernel_level.0 && ok, format!("{}; {d}", kernel_level.1)),
        Err(e) => outcome(false, format!("{}; {e}", kernel_level.1)),
    };
    results.insert(1, ("reparameterization", c1));

    eprintln!("acceptance: timing");
    let c7 = match &pipeline_a {
        Ok(_) => timing(&run_a).unwrap_or_else(failed),
        Err(e) => failed(e.clone()),
    };
    results.insert(7, ("timing ratios", c7));

    let c8 = match (&pipeline_a, &pipeline_b, &model_level_b) {
        (Ok(_), Ok(_), Ok(_)) => determinism(&run_a, &run_b),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failed(e.clone()),
    };
    results.insert(8, ("determinism", c8));

    let mut all = true;
    for (id, (name, o)) in &results {
        all &= o.pass;
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if !all {
        std::process::exit(1);
    }
}
