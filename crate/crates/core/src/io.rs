//! File formats: 16-bit PGM images, model checkpoints and pair manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::net::{Model, ModelConfig, Variant};
use crate::synth::MAXVAL;
use crate::tensor::{real, ConvKernel, Real, Shape, Tensor};

/// Encodes batch 0, channel 0 as binary PGM (`P5`, maxval 65535, big-endian samples).
pub fn encode_pgm<T: Real>(img: &Tensor<T>) -> Vec<u8> {
    let s = img.shape();
    let mut out = format!("P5\n{} {}\n{}\n", s.w, s.h, MAXVAL).into_bytes();
    out.reserve(2 * s.h * s.w);
    for &v in img.plane(0, 0) {
        let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
        let q = (v * MAXVAL as f64 + 0.5).floor() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat(format!("bad PGM {what}: {:?}", String::from_utf8_lossy(tok))))
}

/// Decodes a binary PGM (8- or 16-bit) into a `1 x 1 x h x w` tensor with values in `[0, 1]`.
pub fn decode_pgm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    match magic {
        b"P5" => {}
        b"P2" => return Err(Error::ImageFormat("ASCII PGM (P2) is not supported; use binary P5".into())),
        other => {
            return Err(Error::ImageFormat(format!(
                "not a binary PGM (magic {:?})",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::ImageFormat(format!("unsupported PGM geometry {w}x{h}, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::ImageFormat("truncated PGM header".into()));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bps;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::ImageFormat(format!("PGM raster truncated: {} of {need} bytes", raster.len())));
    }
    let scale = maxval as f64;
    let data = (0..w * h)
        .map(|i| {
            let v = if bps == 2 {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
            } else {
                raster[i] as f64
            };
            real(v.min(scale) / scale)
        })
        .collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

pub fn write_pgm<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img))?)
}

pub fn read_pgm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_pgm(&fs::read(path)?)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DRKF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::Base => 0,
        Variant::Rkf { .. } => 1,
        Variant::Fused { .. } => 2,
    }
}

/// Serializes a model (parameters as `f32`) with free-form `key=value` provenance lines.
///
/// Layout, little-endian: magic `DRKF`, version u32, variant u8, N u32, r u32,
/// layer count u32, `(c_out, c_in, k)` u32 triples, weights then bias of every
/// layer as f32, provenance length u32 and UTF-8 bytes, CRC32 of everything before it.
pub fn encode_checkpoint<T: Real>(model: &Model<T>, provenance: &str) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(variant_tag(cfg.variant));
    out.extend_from_slice(&(cfg.variant.n_rotations() as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.r as u32).to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for l in model.layers() {
        let k = l.kernel();
        for d in [k.c_out(), k.c_in(), k.k()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for l in model.layers() {
        let k = l.kernel();
        for &v in k.weights().data().iter().chain(k.bias()) {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out.extend_from_slice(&(provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(provenance.as_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses and validates a checkpoint; returns the model and its provenance text.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, String)> {
    if bytes.len() < 4 {
        return Err(Error::CheckpointFormat("file shorter than the magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(Error::CheckpointFormat("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointCrc { stored, computed });
    }

    let mut rd = Reader { bytes: body, pos: 8 };
    let tag = rd.take(1)?[0];
    let n_rot = rd.u32()? as usize;
    let r = rd.u32()? as usize;
    let variant = match tag {
        0 => Variant::Base,
        1 => Variant::Rkf { n_rotations: n_rot },
        2 => Variant::Fused { n_rotations: n_rot },
        t => return Err(Error::CheckpointFormat(format!("unknown variant tag {t}"))),
    };
    let n_layers = rd.u32()? as usize;
    if n_layers > 4096 {
        return Err(Error::CheckpointFormat(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..n_layers)
        .map(|_| Ok((rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let config = config_from_dims(&dims, r, variant)?;
    let mut kernels = Vec::with_capacity(n_layers);
    for &(c_out, c_in, k) in &dims {
        let numel = c_out
            .checked_mul(c_in)
            .and_then(|v| v.checked_mul(k * k))
            .filter(|&v| v <= body.len())
            .ok_or_else(|| Error::CheckpointFormat("layer larger than the file".into()))?;
        let w = (0..numel).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
        let b = (0..c_out).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
        let w = Tensor::from_vec(Shape::new(c_out, c_in, k, k), w)?;
        kernels.push(ConvKernel::new(w, b).map_err(|e| Error::CheckpointFormat(e.to_string()))?);
    }
    let plen = rd.u32()? as usize;
    let prov = std::str::from_utf8(rd.take(plen)?)
        .map_err(|_| Error::CheckpointFormat("provenance is not UTF-8".into()))?
        .to_string();
    if rd.pos != body.len() {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", body.len() - rd.pos)));
    }
    let model = Model::from_kernels(config, kernels).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    Ok((model, prov))
}

fn config_from_dims(dims: &[(usize, usize, usize)], r: usize, variant: Variant) -> Result<ModelConfig> {
    let bad = |m: &str| Error::CheckpointFormat(m.to_string());
    if r == 0 || !r.is_power_of_two() {
        return Err(bad("r is not a power of two"));
    }
    let stages = r.trailing_zeros() as usize;
    if dims.len() < stages + 3 {
        return Err(bad("too few layers for the stored r"));
    }
    let trunk_len = dims.len() - stages - 2;
    let kernel = dims[0].2;
    let trunk: Vec<usize> = dims[..trunk_len].iter().map(|d| d.0).collect();
    let head = if stages > 0 { dims[trunk_len].0 } else { 16 };
    let desc_dim = dims[dims.len() - 2].0;
    let cfg = ModelConfig {
        trunk,
        head,
        desc_dim,
        r,
        kernel,
        variant,
    };
    let expected: Vec<_> = cfg.layer_dims().into_iter().map(|(o, i)| (o, i, kernel)).collect();
    if expected != dims {
        return Err(bad("layer dimensions do not form a valid network"));
    }
    Ok(cfg)
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, provenance: &str) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model, provenance))?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, String)> {
    decode_checkpoint(&fs::read(path)?)
}

/// One line of a pair manifest: image paths (relative to the manifest), homography and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub a: PathBuf,
    pub b: PathBuf,
    pub h: Homography,
    pub seed: u64,
}

/// `a_path b_path h00 h01 h02 h10 h11 h12 h20 h21 h22 seed`, one record per line.
/// Lines starting with `#` are comments.
pub fn encode_manifest(entries: &[ManifestEntry], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    for e in entries {
        let _ = write!(out, "{} {}", e.a.display(), e.b.display());
        for v in e.h.entries() {
            let _ = write!(out, " {v:?}");
        }
        let _ = writeln!(out, " {}", e.seed);
    }
    out
}

pub fn decode_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, line)| {
            let err = |m: &str| Error::Manifest(format!("line {}: {m}", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 12 {
                return Err(err(&format!("expected 12 fields, got {}", f.len())));
            }
            let mut e = [0.0; 9];
            for (slot, tok) in e.iter_mut().zip(&f[2..11]) {
                *slot = tok.parse().map_err(|_| err(&format!("bad number '{tok}'")))?;
            }
            let h = Homography::from_entries(e).map_err(|x| err(&x.to_string()))?;
            let seed = f[11].parse().map_err(|_| err(&format!("bad seed '{}'", f[11])))?;
            Ok(ManifestEntry {
                a: PathBuf::from(f[0]),
                b: PathBuf::from(f[1]),
                h,
                seed,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry], comments: &[String]) -> Result<()> {
    Ok(fs::write(path, encode_manifest(entries, comments))?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    decode_manifest(&fs::read_to_string(path)?)
}
