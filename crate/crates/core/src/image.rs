//! Binary PGM (P5) decoding/encoding, registered image-pair loading, and
//! deterministic patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{GrayImage, Range};
use crate::tensor::Tensor;

fn parse_error(path: &Path, offset: usize, message: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        message: message.to_string(),
    }
}

/// Reads one whitespace-delimited ASCII token starting at `pos`, skipping
/// leading whitespace and `#` comment lines. Returns (token, next position).
fn next_token(bytes: &[u8], mut pos: usize) -> Option<(&[u8], usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    if pos >= bytes.len() {
        return None;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    Some((&bytes[start..pos], pos))
}

/// Decodes a binary PGM (P5, maxval 255) file into a byte-range image.
pub fn load_gray_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        if bytes.len() >= 2 && &bytes[..2] == b"P2" {
            return Err(parse_error(path, 0, "ASCII PGM (P2) is not supported, use binary P5"));
        }
        return Err(parse_error(path, 0, "not a binary PGM (P5) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let (tok, next) = next_token(&bytes, pos)
            .ok_or_else(|| parse_error(path, bytes.len(), &format!("missing {name}")))?;
        let text = std::str::from_utf8(tok)
            .map_err(|_| parse_error(path, pos, &format!("non-ASCII {name}")))?;
        fields[i] = text
            .parse()
            .map_err(|_| parse_error(path, pos, &format!("invalid {name} '{text}'")))?;
        pos = next;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(parse_error(path, pos, &format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_error(path, pos, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_error(path, pos, "missing header/payload separator"));
    }
    pos += 1;
    let expected = width * height;
    if bytes.len() - pos < expected {
        return Err(parse_error(
            path,
            bytes.len(),
            &format!(
                "truncated payload: expected {expected} bytes, found {}",
                bytes.len() - pos
            ),
        ));
    }
    let data = bytes[pos..pos + expected].iter().map(|&b| b as f64).collect();
    GrayImage::new(width, height, Range::Byte, data)
}

/// Writes a byte-range P5 file; unit-range values are scaled by 255 and
/// rounded to nearest (half away from zero), then clamped.
pub fn save_gray_image(img: &GrayImage, path: &Path) -> Result<()> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Parameter {
            name: "image",
            message: "cannot save a zero-size image".to_string(),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        let byte = match img.range {
            Range::Byte => v,
            Range::Unit => v * 255.0,
        };
        out.push(byte.round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Registered infrared/visible pair sharing an identifier.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub identifier: String,
    pub infrared: GrayImage,
    pub visible: GrayImage,
}

/// Pairs discovered in a directory plus files that had no partner.
#[derive(Debug)]
pub struct PairSet {
    pub pairs: Vec<ImagePair>,
    pub orphans: Vec<PathBuf>,
}

/// Scans `dir` for `<id><ir_suffix>.pgm` / `<id><vis_suffix>.pgm` pairs,
/// sorted by identifier. Unmatched .pgm files are collected as orphans.
pub fn load_pairs(dir: &Path, ir_suffix: &str, vis_suffix: &str) -> Result<PairSet> {
    let mut ir_files = std::collections::BTreeMap::new();
    let mut vis_files = std::collections::BTreeMap::new();
    let mut orphans = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))? {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".pgm"))
        else {
            continue;
        };
        if let Some(id) = stem.strip_suffix(ir_suffix) {
            ir_files.insert(id.to_string(), path);
        } else if let Some(id) = stem.strip_suffix(vis_suffix) {
            vis_files.insert(id.to_string(), path);
        } else {
            orphans.push(path);
        }
    }
    let mut pairs = Vec::new();
    for (id, ir_path) in &ir_files {
        let Some(vis_path) = vis_files.remove(id) else {
            orphans.push(ir_path.clone());
            continue;
        };
        let infrared = load_gray_image(ir_path)?;
        let visible = load_gray_image(&vis_path)?;
        if infrared.width != visible.width || infrared.height != visible.height {
            return Err(Error::Data {
                path: ir_path.display().to_string(),
                message: format!(
                    "pair '{id}' is not registered: infrared {}x{}, visible {}x{}",
                    infrared.width, infrared.height, visible.width, visible.height
                ),
            });
        }
        pairs.push(ImagePair {
            identifier: id.clone(),
            infrared,
            visible,
        });
    }
    orphans.extend(vis_files.into_values());
    orphans.sort();
    Ok(PairSet { pairs, orphans })
}

/// One square patch cut at identical coordinates from both images of a pair.
#[derive(Debug, Clone)]
pub struct Patch {
    pub identifier: String,
    pub infrared: Tensor,
    pub visible: Tensor,
}

#[derive(Debug)]
pub struct PatchSet {
    pub side: usize,
    pub seed: u64,
    pub patches: Vec<Patch>,
}

fn crop_unit(img: &GrayImage, top: usize, left: usize, side: usize) -> Tensor {
    let mut t = Tensor::zeros(1, 1, side, side);
    for r in 0..side {
        for c in 0..side {
            let v = match img.range {
                Range::Unit => img.at(top + r, left + c),
                Range::Byte => img.at(top + r, left + c) / 255.0,
            };
            t.set(0, 0, r, c, v);
        }
    }
    t
}

/// Draws `count` patches of the given side across the pairs round-robin,
/// with seeded uniform top-left corners applied identically to both images.
pub fn sample_patches(pairs: &[ImagePair], side: usize, count: usize, seed: u64) -> Result<PatchSet> {
    for p in pairs {
        if side > p.infrared.width || side > p.infrared.height {
            return Err(Error::Parameter {
                name: "side",
                message: format!(
                    "patch side {side} exceeds image '{}' ({}x{})",
                    p.identifier, p.infrared.width, p.infrared.height
                ),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    if pairs.is_empty() && count > 0 {
        return Err(Error::Data {
            path: String::new(),
            message: "no image pairs to sample patches from".to_string(),
        });
    }
    for k in 0..count {
        let pair = &pairs[k % pairs.len()];
        let top = rng.gen_range(0..=pair.infrared.height - side);
        let left = rng.gen_range(0..=pair.infrared.width - side);
        patches.push(Patch {
            identifier: pair.identifier.clone(),
            infrared: crop_unit(&pair.infrared, top, left, side),
            visible: crop_unit(&pair.visible, top, left, side),
        });
    }
    Ok(PatchSet {
        side,
        seed,
        patches,
    })
}

/// Unit-range [0,1] view of a byte image as a 1×1×H×W tensor.
pub fn to_unit_tensor(img: &GrayImage) -> Tensor {
    img.to_unit_tensor()
}

/// Converts a 1×1×H×W tensor back to a unit-range image.
pub fn tensor_to_unit_image(t: &Tensor) -> Result<GrayImage> {
    if t.batch != 1 || t.channels != 1 {
        return Err(Error::dimension("channels", 1, t.batch * t.channels));
    }
    GrayImage::new(t.width, t.height, Range::Unit, t.data.clone())
}
