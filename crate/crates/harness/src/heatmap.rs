//! Attention heatmaps as binary PGM (P5) and colour-mapped PPM (P6).

use std::path::{Path, PathBuf};

use crate::{HarnessError, Result};

/// Maps `mask` to 8-bit levels with a min-max over the whole mask, so
/// pixels of different pyramid levels stay comparable. Levels are floored,
/// so only cells equal to the maximum reach 255. A constant mask becomes
/// mid gray.
pub fn quantize(mask: &[f64]) -> Vec<u8> {
    let lo = mask.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mask.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; mask.len()];
    }
    mask.iter().map(|&v| if v == hi { 255 } else { ((v - lo) / (hi - lo) * 255.0).floor().min(254.0) as u8 }).collect()
}

/// Blue, cyan, yellow, red ramp.
pub fn colormap(v: u8) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 128.0], [0.0, 200.0, 255.0], [255.0, 230.0, 0.0], [220.0, 0.0, 0.0]];
    let t = v as f64 / 255.0 * 3.0;
    let k = (t.floor() as usize).min(2);
    let f = t - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    [0, 1, 2].map(|i| (a[i] + (b[i] - a[i]) * f).round() as u8)
}

pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().flat_map(|&v| colormap(v)));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Parses binary P5/P6 with maxval 255.
pub fn parse_pnm(buf: &[u8]) -> Result<Image> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(HarnessError::Image("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(HarnessError::Image(format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| HarnessError::Image(format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(HarnessError::Image(format!("maxval {maxval} unsupported")));
    }
    let n = width * height * channels;
    if buf.len() < pos || buf.len() - pos != n {
        return Err(HarnessError::Image(format!("expected {n} pixel bytes")));
    }
    Ok(Image { width, height, channels, pixels: buf[pos..].to_vec() })
}

/// Writes `<stem>_l{k}.pgm` and `.ppm` for every level. `shapes` are the
/// `(stride, H, W)` of each level in flattening order.
pub fn write_mask(dir: &Path, stem: &str, mask: &[f64], shapes: &[(usize, usize, usize)]) -> Result<Vec<PathBuf>> {
    let total: usize = shapes.iter().map(|&(_, h, w)| h * w).sum();
    if total != mask.len() {
        return Err(HarnessError::Image(format!("mask of {} cells for {total} pyramid cells", mask.len())));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let q = quantize(mask);
    let mut written = Vec::new();
    let mut off = 0;
    for (k, &(_, h, w)) in shapes.iter().enumerate() {
        let px = &q[off..off + h * w];
        off += h * w;
        for (ext, bytes) in [("pgm", encode_pgm(w, h, px)), ("ppm", encode_ppm(w, h, px))] {
            let path = dir.join(format!("{stem}_l{k}.{ext}"));
            std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
