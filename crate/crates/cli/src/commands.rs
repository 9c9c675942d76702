use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rkf_core::distill::{train_base, train_distilled, TrainReport};
use rkf_core::eval::{default_thresholds, evaluate_model, rotation_sweep, sweep_angles, timing_compare, MmaCurve, TimingReport};
use rkf_core::io::{load_checkpoint, save_checkpoint};
use rkf_core::mofa::MofaTeacher;
use rkf_core::net::{FeatureExtractor, FeatureOutput, ForwardMode, Model, ModelConfig, Variant};
use rkf_core::tensor::Tensor;

use crate::config::{RunConfig, Stream};
use crate::dataset::{dataset_exists, gen_data, load_eval_images, load_pairs, load_train, EvalSet};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Upright,
    Rotated,
    Sweep,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upright" => Ok(EvalMode::Upright),
            "rotated" => Ok(EvalMode::Rotated),
            "sweep" => Ok(EvalMode::Sweep),
            _ => Err(format!("unknown eval mode {s:?}; expected upright, rotated or sweep")),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn save(path: &Path, model: &Model<f32>, provenance: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_checkpoint(path, model, provenance).map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>, CliError> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    load_checkpoint(path).map(|(m, _)| m).map_err(|e| match CliError::from(e) {
        CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn provenance(cfg: &RunConfig, what: &str) -> String {
    format!("# {what}\n{}", cfg.echo())
}

/// Random initialization followed by the data-dependent rescaling on the first training images.
pub fn init_model(cfg: &RunConfig, variant: &str, seed: u64, train: &[Tensor<f32>]) -> Result<Model<f32>, CliError> {
    let mut model = Model::init(cfg.model_config(variant)?, seed)?;
    let n = cfg.model.init_images.min(train.len());
    model.standardize(&train[..n])?;
    Ok(model)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    gen_data(cfg)?;
    println!(
        "wrote {} training images and {} evaluation pairs per set to {}",
        cfg.data.train_images,
        cfg.data.eval_images,
        cfg.data.dir.display()
    );
    Ok(())
}

fn report_summary(name: &str, report: &TrainReport) {
    if let Some((head, tail)) = report.head_tail_means(0.1) {
        println!(
            "{name}: {} iterations in {:.1}s, ranking loss {head:.4} (first 10%) -> {tail:.4} (last 10%)",
            report.records.len(),
            report.wall_time.as_secs_f64()
        );
    } else {
        println!("{name}: 0 iterations");
    }
}

fn train_variant(cfg: &RunConfig, variant: &str, train: &[Tensor<f32>]) -> Result<(Model<f32>, TrainReport), CliError> {
    let (init, stream) = match variant {
        "rkf" => (Stream::InitRkf, Stream::TrainRkf),
        _ => (Stream::InitBase, Stream::TrainBase),
    };
    let model = init_model(cfg, variant, cfg.stream_seed(init), train)?;
    let mut tc = cfg.train_config();
    tc.seed = cfg.stream_seed(stream);
    Ok(train_base(model, train, &tc)?)
}

fn distill_student(
    cfg: &RunConfig,
    student: &str,
    init: Option<Model<f32>>,
    teacher: &MofaTeacher<f32>,
    train: &[Tensor<f32>],
) -> Result<(Model<f32>, TrainReport), CliError> {
    let model = match init {
        Some(m) => m,
        None => {
            let stream = if student == "rkf" { Stream::InitDRkf } else { Stream::InitDBase };
            init_model(cfg, student, cfg.stream_seed(stream), train)?
        }
    };
    let mut tc = cfg.distill_train_config();
    tc.seed = cfg.stream_seed(Stream::Distill);
    Ok(train_distilled(model, teacher, train, &tc, cfg.distill_config())?)
}

/// Trains `model.variant` on the dataset; writes the checkpoint and optionally the loss CSV.
pub fn cmd_train_base(cfg: &RunConfig, out: &Path, report: Option<&Path>) -> Result<Model<f32>, CliError> {
    let train = load_train(cfg)?;
    let (model, rep) = train_variant(cfg, &cfg.model.variant, &train)?;
    save(out, &model, &provenance(cfg, &format!("train-base variant={}", cfg.model.variant)))?;
    if let Some(p) = report {
        write_text(p, &rep.to_csv())?;
    }
    report_summary(&cfg.model.variant, &rep);
    println!("checkpoint {}", out.display());
    Ok(model)
}

/// Distils a `distill.student` model under the MOFA teacher built from `teacher`. The
/// student starts from `init` when given, else from a fresh initialization.
pub fn cmd_distill(cfg: &RunConfig, teacher: &Path, init: Option<&Path>, out: &Path, report: Option<&Path>) -> Result<Model<f32>, CliError> {
    let student = cfg.student_variant()?;
    let teacher = MofaTeacher::new(load(teacher)?, cfg.distill.teacher_rotations)?;
    let init = init.map(load).transpose()?;
    let train = load_train(cfg)?;
    let (model, rep) = distill_student(cfg, student, init, &teacher, &train)?;
    save(out, &model, &provenance(cfg, &format!("distill student={student}")))?;
    if let Some(p) = report {
        write_text(p, &rep.to_csv())?;
    }
    report_summary(&format!("distill {student}"), &rep);
    println!("checkpoint {}", out.display());
    Ok(model)
}

pub fn cmd_reparam(input: &Path, out: &Path) -> Result<Model<f32>, CliError> {
    let model = load(input)?;
    let fused = model.reparameterize()?;
    let prov = load_checkpoint(input).map(|(_, p)| p).unwrap_or_default();
    save(out, &fused, &format!("{prov}# reparam of {}\n", input.display()))?;
    println!("fused {} -> {}", model.config().variant.name(), out.display());
    Ok(fused)
}

/// CSV text of one evaluation.
pub fn evaluate(cfg: &RunConfig, extractor: &dyn FeatureExtractor<f32>, mode: EvalMode) -> Result<String, CliError> {
    let params = cfg.detector();
    match mode {
        EvalMode::Upright | EvalMode::Rotated => {
            let set = if mode == EvalMode::Upright { EvalSet::Upright } else { EvalSet::Rotated };
            let pairs = load_pairs(cfg, set)?;
            let curve = evaluate_model(extractor, &pairs, &params, &default_thresholds())?;
            println!("{}: MMA@5px {:.4} over {} pairs ({} without matches)", set.name(), curve.at(5.0).unwrap_or(f64::NAN), curve.pairs, curve.empty_pairs);
            Ok(curve.to_csv())
        }
        EvalMode::Sweep => {
            let images = load_eval_images(cfg)?;
            let angles = sweep_angles(cfg.eval.sweep_step_deg).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(rotation_sweep(extractor, &images, &angles, &params)?.to_csv())
        }
    }
}

/// Runs RKF layers branch by branch instead of through the fused kernel.
struct Branched(Model<f32>);

impl FeatureExtractor<f32> for Branched {
    fn extract(&self, image: &Tensor<f32>) -> rkf_core::Result<FeatureOutput<f32>> {
        self.0.forward(image, ForwardMode::Branched)
    }

    fn config(&self) -> &ModelConfig {
        self.0.config()
    }
}

/// Evaluates a checkpoint, or the MOFA ensemble over it when `mofa` is set.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, mode: EvalMode, mofa: bool, branched: bool, out: &Path) -> Result<String, CliError> {
    if mofa && branched {
        return Err(CliError::Config("--branched does not combine with --mofa".into()));
    }
    let model = load(checkpoint)?;
    let csv = if mofa {
        evaluate(cfg, &MofaTeacher::new(model, cfg.distill.teacher_rotations)?, mode)?
    } else if branched {
        evaluate(cfg, &Branched(model), mode)?
    } else {
        evaluate(cfg, &model, mode)?
    };
    write_text(out, &csv)?;
    Ok(csv)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub condition: String,
    pub curve: MmaCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_VARIANTS: [&str; 5] = ["base", "rkf", "mofa", "dbase", "drkf"];

impl Ablation {
    pub fn mma5(&self, variant: &str, condition: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.condition == condition)
            .and_then(|r| r.curve.at(5.0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,condition,pairs,empty_pairs");
        if let Some(r) = self.rows.first() {
            for t in &r.curve.thresholds {
                let _ = write!(out, ",mma{t}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.variant, r.condition, r.curve.pairs, r.curve.empty_pairs);
            for a in &r.curve.accuracy {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains base and RKF, continues each under the MOFA teacher over base (DBase and
/// DRKF), and evaluates all five variants on both evaluation sets. Generates the dataset first
/// when `data.dir` holds none.
pub fn cmd_ablation(cfg: &RunConfig, out_dir: &Path) -> Result<Ablation, CliError> {
    let start = Instant::now();
    if !dataset_exists(cfg) {
        cmd_gen_data(cfg)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let train = load_train(cfg)?;
    let upright = load_pairs(cfg, EvalSet::Upright)?;
    let rotated = load_pairs(cfg, EvalSet::Rotated)?;
    let file = |name: &str| -> PathBuf { out_dir.join(name) };

    let finish = |name: &str, model: Model<f32>, rep: TrainReport| -> Result<Model<f32>, CliError> {
        save(&file(&format!("{name}.ckpt")), &model, &provenance(cfg, &format!("ablation {name}")))?;
        write_text(&file(&format!("{name}_report.csv")), &rep.to_csv())?;
        report_summary(name, &rep);
        Ok(model)
    };
    let (m, rep) = train_variant(cfg, "base", &train)?;
    let base = finish("base", m, rep)?;
    let (m, rep) = train_variant(cfg, "rkf", &train)?;
    let rkf = finish("rkf", m, rep)?;
    let teacher = MofaTeacher::new(base.clone(), cfg.distill.teacher_rotations)?;
    let (m, rep) = distill_student(cfg, "base", Some(base.clone()), &teacher, &train)?;
    let dbase = finish("dbase", m, rep)?;
    let (m, rep) = distill_student(cfg, "rkf", Some(rkf.clone()), &teacher, &train)?;
    let drkf = finish("drkf", m, rep)?;
    let drkf_fused = drkf.reparameterize()?;
    save(&file("drkf_fused.ckpt"), &drkf_fused, &provenance(cfg, "ablation drkf reparameterized"))?;

    let extractors: [(&str, &dyn FeatureExtractor<f32>); 5] =
        [("base", &base), ("rkf", &rkf), ("mofa", &teacher), ("dbase", &dbase), ("drkf", &drkf_fused)];
    let params = cfg.detector();
    let mut rows = Vec::new();
    for (name, ex) in extractors {
        for (condition, pairs) in [("upright", &upright), ("rotated", &rotated)] {
            let curve = evaluate_model(ex, pairs, &params, &default_thresholds())?;
            println!("{name:>6} {condition:>8}: MMA@5px {:.4}", curve.at(5.0).unwrap_or(f64::NAN));
            rows.push(AblationRow {
                variant: name.to_string(),
                condition: condition.to_string(),
                curve,
            });
        }
    }
    let table = Ablation { rows };
    write_text(&file("ablation.csv"), &table.to_csv())?;
    println!("ablation finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(table)
}

/// Times base, branched and fused RKF, and MOFA; `rkf` must be an unfused RKF checkpoint.
pub fn cmd_bench(cfg: &RunConfig, base: &Path, rkf: &Path, out: &Path) -> Result<TimingReport, CliError> {
    let base = load(base)?;
    let rkf_model = load(rkf)?;
    let Variant::Rkf { n_rotations } = rkf_model.config().variant else {
        return Err(CliError::Checkpoint(format!(
            "{} holds a {} model; bench needs an unfused rkf checkpoint",
            rkf.display(),
            rkf_model.config().variant.name()
        )));
    };
    let report = timing_compare(&base, &rkf_model, n_rotations, &cfg.eval.bench_sizes, cfg.eval.bench_reps, cfg.stream_seed(Stream::Bench))?;
    for r in &report.rows {
        println!("{:>13} {:>4}px: {:8.3} ms ({:.2}x base)", r.variant, r.size, r.median_ms, r.ratio_to_base);
    }
    write_text(out, &report.to_csv())?;
    Ok(report)
}
