//! Attention-span maps: fused-key attention traced back to the map
//! positions that produced each key.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fasa::GroupTrace;
use crate::model::{self, ForwardOptions, ModelParams};
use crate::tensor::{Tape, Tensor};

/// Attention of one query, spread over the map of one group.
#[derive(Debug, Clone)]
pub struct SpanMap {
    pub group: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub query: (usize, usize),
    /// Head-averaged weight of each fused key, length `M^2`.
    pub key_weights: Vec<f64>,
    /// Attributed weight per map position, row-major.
    pub weights: Vec<f64>,
    /// Weight credited to zero-padded samples.
    pub padding_mass: f64,
}

impl SpanMap {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.padding_mass
    }

    /// Positions that received any weight.
    pub fn support(&self) -> Vec<(usize, usize)> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| (i / self.map_w, i % self.map_w))
            .collect()
    }

    /// Weights scaled so the largest becomes 255.
    pub fn to_gray(&self) -> Vec<u8> {
        let max = self.weights.iter().cloned().fold(0.0, f64::max);
        self.weights
            .iter()
            .map(|&w| {
                if max > 0.0 {
                    (255.0 * w / max).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Attributes query `(row, col)` of batch item 0.
///
/// Max fusion credits each channel of a fused key to the window that won
/// the max; mean fusion splits it evenly over the in-bounds windows.
pub fn attribute(trace: &GroupTrace, query: (usize, usize)) -> Result<SpanMap> {
    let (h, w) = (trace.windows.map_h, trace.windows.map_w);
    if query.0 >= h || query.1 >= w {
        return Err(Error::Index {
            row: query.0,
            col: query.1,
            rows: h,
            cols: w,
        });
    }
    let attn = trace.head_mean_attention(0);
    let m2 = trace.sample_grid.len();
    let cp = trace.fused_keys.shape()[1];
    let q = query.0 * w + query.1;
    let key_weights = attn.data()[q * m2..(q + 1) * m2].to_vec();
    let mut weights = vec![0.0; h * w];
    let mut padding_mass = 0.0;
    let windows = trace.window_count();
    for (s, &kw) in key_weights.iter().enumerate() {
        match &trace.key_argmax {
            Some(arg) => {
                let share = kw / cp as f64;
                for e in 0..cp {
                    let j = arg[s * cp + e] as usize;
                    match trace.sample_position(j, s) {
                        Some((r, c)) => weights[r * w + c] += share,
                        None => padding_mass += share,
                    }
                }
            }
            None => {
                let positions: Vec<_> = (0..windows)
                    .filter_map(|j| trace.sample_position(j, s))
                    .collect();
                if positions.is_empty() {
                    padding_mass += kw;
                } else {
                    let share = kw / positions.len() as f64;
                    for (r, c) in positions {
                        weights[r * w + c] += share;
                    }
                }
            }
        }
    }
    Ok(SpanMap {
        group: trace.group,
        map_h: h,
        map_w: w,
        query,
        key_weights,
        weights,
        padding_mass,
    })
}

pub fn write_pgm<W: Write>(mut out: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", &[height, width], &[pixels.len()]));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated image header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a binary PPM (P6) or PGM (P5) with maxval 255 into a
/// `[1, H, W, 3]` tensor scaled to `[0, 1]`. Gray images are replicated
/// across the three channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported image type {other}"))),
    };
    let parse = |t: String| {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad header field `{t}`")))
    };
    let width = parse(next_token(&bytes, &mut pos)?)?;
    let height = parse(next_token(&bytes, &mut pos)?)?;
    let maxval = parse(next_token(&bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported, need 255"
        )));
    }
    pos += 1;
    let need = width * height * channels;
    let raw = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format("truncated pixel data".into()))?;
    let mut data = Vec::with_capacity(width * height * 3);
    for px in raw.chunks_exact(channels) {
        for k in 0..3 {
            data.push(px[k % channels] as f64 / 255.0);
        }
    }
    Tensor::new(&[1, height, width, 3], data)
}

/// Traces the first block of `stage` (1-based) and returns one span map
/// per group.
pub fn stage_spans(
    model: &ModelParams,
    stage: usize,
    query: (usize, usize),
    image: Tensor,
) -> Result<Vec<SpanMap>> {
    if !(1..=model::STAGES).contains(&stage) {
        return Err(Error::config(format!("stage {stage} is not in 1..=4")));
    }
    let shape = image.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::config(format!(
            "expected a single [1, H, W, C] image, got {shape:?}"
        )));
    }
    let red = model.spec.reduction(stage - 1);
    if !shape[1].is_multiple_of(32) || !shape[2].is_multiple_of(32) {
        return Err(Error::config(format!(
            "image extents {}x{} are not divisible by 32",
            shape[1], shape[2]
        )));
    }
    let (h, w) = (shape[1] / red, shape[2] / red);
    if query.0 >= h || query.1 >= w {
        return Err(Error::config(format!(
            "query ({}, {}) is outside the {h}x{w} stage {stage} map",
            query.0, query.1
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let opts = ForwardOptions {
        inference: true,
        trace_block: Some((stage - 1, 0)),
        stop_after_stage: Some(stage),
    };
    let out = model::favit_forward(&mut tape, model, x, &opts)?;
    out.traces.iter().map(|t| attribute(t, query)).collect()
}

pub const CSV_HEADER: &str = "group,query_row,query_col,key_index,weight";

/// Writes one PGM per group plus a CSV of fused-key weights; returns the
/// paths written.
pub fn write_spans(out_dir: &Path, stage: usize, spans: &[SpanMap]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let Some(first) = spans.first() else {
        return Ok(written);
    };
    let (qr, qc) = first.query;
    let stem = format!("attnmap_stage{stage}_q{qr}_{qc}");
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut csv = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    for span in spans {
        for (k, w) in span.key_weights.iter().enumerate() {
            writeln!(csv, "{},{qr},{qc},{k},{w:e}", span.group)?;
        }
        let path = out_dir.join(format!("{stem}_group{}.pgm", span.group));
        let f = std::io::BufWriter::new(fs::File::create(&path)?);
        write_pgm(f, span.map_w, span.map_h, &span.to_gray())?;
        written.push(path);
    }
    csv.flush()?;
    written.insert(0, csv_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 1, &[0, 255]).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
        assert!(write_pgm(&mut Vec::new(), 2, 2, &[0]).is_err());
    }

    #[test]
    fn image_reader_handles_comments_and_gray() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        let t = read_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        fs::write(&p, b"P6\n1 1\n255\n\x01\x02").unwrap();
        assert!(read_image(&p).is_err());
    }
}
