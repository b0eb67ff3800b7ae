//! Plain-text and image artifacts: PPM frames, box lists, mask and
//! attention matrices, JSON lines.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use ulast_core::scenes::Image;
use ulast_core::tensor::Tensor;
use ulast_core::BoxF;

use crate::error::{Error, Result};

/// Binary PPM (P6, maxval 255) of a 3-channel image in `[0,1]`.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Parse(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    for i in 0..plane {
        for c in 0..3 {
            out.push((img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos, detail: "truncated PPM header".into() });
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string()));
    }
    if fields[0].1 != "P6" {
        return Err(Error::Format { offset: 0, detail: "not a binary PPM".into() });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Format { offset: fields[i].0, detail: format!("bad number {:?}", fields[i].1) })
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::Format { offset: fields[3].0, detail: format!("unsupported maxval {max}") });
    }
    pos += 1;
    let plane = w * h;
    if bytes.len() < pos + 3 * plane {
        return Err(Error::Format { offset: bytes.len(), detail: "truncated PPM pixels".into() });
    }
    let mut img = Image::new(3, h, w);
    for i in 0..plane {
        for c in 0..3 {
            img.data[c * plane + i] = bytes[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Ok(img)
}

/// One `x1 y1 x2 y2` line per box.
pub fn format_boxes(boxes: &[BoxF]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{:.4} {:.4} {:.4} {:.4}", b.x1, b.y1, b.x2, b.y2);
    }
    s
}

pub fn parse_boxes(text: &str) -> Result<Vec<BoxF>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("box line {}: {e}", n + 1)))?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("box line {}: expected 4 numbers, got {}", n + 1, v.len())));
        }
        out.push(BoxF::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Rank-2 tensor as whitespace-separated rows, four decimals.
pub use ulast_core::mask::format_matrix;

pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("matrix line {}: {e}", n + 1)))?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Parse(format!("matrix line {}: ragged row", n + 1)));
        }
        rows.push(row);
    }
    let (r, c) = (rows.len(), rows.first().map_or(0, |r| r.len()));
    Ok(Tensor::new(&[r, c], rows.concat())?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Appends one JSON document per line.
pub struct JsonLines {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonLines { file: std::io::BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}
