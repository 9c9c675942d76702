//! On-disk synthetic dataset.
//!
//! ```text
//! <dir>/train.txt          one training image file name per line
//! <dir>/train/0000.pgm ...
//! <dir>/eval/0000.pgm ...  source images of both evaluation sets and of the sweep
//! <dir>/upright.txt        pair manifest, paths relative to <dir>
//! <dir>/upright/0000_a.pgm, 0000_b.pgm ...
//! <dir>/rotated.txt
//! <dir>/rotated/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rkf_core::io::{read_manifest, read_pgm, write_manifest, write_pgm, ManifestEntry};
use rkf_core::synth::{gen_image, make_pair, pair_from_parts, PairRecord};
use rkf_core::tensor::Tensor;

use crate::config::{RunConfig, Stream};
use crate::error::CliError;

pub const TRAIN_LIST: &str = "train.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSet {
    Upright,
    Rotated,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Upright => "upright",
            EvalSet::Rotated => "rotated",
        }
    }

    pub fn manifest(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.txt", self.name()))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_image(path: &Path) -> Result<Tensor<f32>, CliError> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    read_pgm(path).map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn store_image(path: &Path, img: &Tensor<f32>) -> Result<(), CliError> {
    write_pgm(path, img).map_err(|e| io_err(path, e))
}

pub fn gen_train_images(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>, CliError> {
    let style = cfg.style()?;
    cfg.stream_seeds(Stream::TrainImages, cfg.data.train_images)
        .into_iter()
        .map(|s| Ok(gen_image(&style.with_seed(s), cfg.data.size, cfg.data.size)?))
        .collect()
}

pub fn gen_eval_images(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>, CliError> {
    let style = cfg.style()?;
    cfg.stream_seeds(Stream::EvalImages, cfg.data.eval_images)
        .into_iter()
        .map(|s| Ok(gen_image(&style.with_seed(s), cfg.data.size, cfg.data.size)?))
        .collect()
}

pub fn gen_pairs(cfg: &RunConfig, images: &[Tensor<f32>], set: EvalSet) -> Result<Vec<PairRecord<f32>>, CliError> {
    let (aug, stream) = match set {
        EvalSet::Upright => (cfg.augment(), Stream::UprightPairs),
        EvalSet::Rotated => (cfg.rotated_augment(), Stream::RotatedPairs),
    };
    images
        .iter()
        .zip(cfg.stream_seeds(stream, images.len()))
        .map(|(img, s)| Ok(make_pair(img, &aug, s)?))
        .collect()
}

/// Writes the whole dataset under `cfg.data.dir`, replacing earlier files of the same name.
pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.data.dir;
    for sub in ["train", "eval", "upright", "rotated"] {
        mkdir(&dir.join(sub))?;
    }
    let train = gen_train_images(cfg)?;
    let mut list = String::new();
    for (i, img) in train.iter().enumerate() {
        let name = format!("train/{i:04}.pgm");
        store_image(&dir.join(&name), img)?;
        list.push_str(&name);
        list.push('\n');
    }
    let list_path = dir.join(TRAIN_LIST);
    fs::write(&list_path, list).map_err(|e| io_err(&list_path, e))?;

    let eval = gen_eval_images(cfg)?;
    for (i, img) in eval.iter().enumerate() {
        store_image(&dir.join(format!("eval/{i:04}.pgm")), img)?;
    }
    for set in [EvalSet::Upright, EvalSet::Rotated] {
        let pairs = gen_pairs(cfg, &eval, set)?;
        let mut entries = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let a = PathBuf::from(format!("{}/{i:04}_a.pgm", set.name()));
            let b = PathBuf::from(format!("{}/{i:04}_b.pgm", set.name()));
            store_image(&dir.join(&a), &p.a)?;
            store_image(&dir.join(&b), &p.b)?;
            entries.push(ManifestEntry { a, b, h: p.h, seed: p.seed });
        }
        let comments = vec![format!("{} pairs, run seed {}", set.name(), cfg.seed)];
        let path = set.manifest(dir);
        write_manifest(&path, &entries, &comments).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

pub fn dataset_exists(cfg: &RunConfig) -> bool {
    let dir = &cfg.data.dir;
    dir.join(TRAIN_LIST).exists() && EvalSet::Upright.manifest(dir).exists() && EvalSet::Rotated.manifest(dir).exists()
}

pub fn load_train(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>, CliError> {
    let dir = &cfg.data.dir;
    let list_path = dir.join(TRAIN_LIST);
    let text = fs::read_to_string(&list_path).map_err(|e| io_err(&list_path, e))?;
    let images = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| load_image(&dir.join(l)))
        .collect::<Result<Vec<_>, _>>()?;
    if images.is_empty() {
        return Err(CliError::Data(format!("{} lists no images", list_path.display())));
    }
    Ok(images)
}

pub fn load_eval_images(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>, CliError> {
    let dir = cfg.data.dir.join("eval");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{} holds no images", dir.display())));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

pub fn load_pairs(cfg: &RunConfig, set: EvalSet) -> Result<Vec<PairRecord<f32>>, CliError> {
    let dir = &cfg.data.dir;
    let path = set.manifest(dir);
    if !path.exists() {
        return Err(io_err(&path, "no such file"));
    }
    let entries = read_manifest(&path).map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })?;
    entries
        .into_iter()
        .map(|e| {
            let a = load_image(&dir.join(&e.a))?;
            let b = load_image(&dir.join(&e.b))?;
            Ok(pair_from_parts(a, b, e.h, e.seed)?)
        })
        .collect()
}
