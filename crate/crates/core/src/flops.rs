//! Closed-form attention costs, instrumented MAC measurement and
//! resolution sweeps.
//!
//! Counting convention: one MAC per multiply-accumulate inside a matrix
//! product or convolution. Softmax, normalization, activations and
//! element-wise additions are free. Under this convention
//!
//! - dense attention costs `4NC^2 + 2N^2C`,
//! - window attention with `M x M` windows costs `4NC^2 + 2M^2NC`,
//! - factorization attention is bounded by `4NC^2 + 2M^2NC`.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fasa::{self, FasaConfig, FasaParams};
use crate::model::{self, ForwardOptions, ModelParams, VariantSpec, PATCH_KERNEL};
use crate::params::{Initializer, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    DenseSa,
    WindowSa,
    Fasa,
    FavitVariant,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::DenseSa => "dense_sa",
            Mechanism::WindowSa => "window_sa",
            Mechanism::Fasa => "fasa",
            Mechanism::FavitVariant => "favit_variant",
        })
    }
}

fn checked(parts: &[u128]) -> Result<u128> {
    parts
        .iter()
        .try_fold(1u128, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| Error::config("MAC count overflows 128 bits"))
}

/// Closed-form attention cost for `tokens` tokens of `channels` channels.
///
/// `side` is the window side for window attention and the sample side for
/// factorization attention; it is ignored for dense attention.
pub fn formula_macs(mech: Mechanism, tokens: u64, channels: u64, side: u64) -> Result<u128> {
    if tokens == 0 || channels == 0 {
        return Err(Error::config("token and channel counts must be positive"));
    }
    let (n, c, m) = (tokens as u128, channels as u128, side as u128);
    let projections = checked(&[4, n, c, c])?;
    let products = match mech {
        Mechanism::DenseSa => checked(&[2, n, n, c])?,
        Mechanism::WindowSa | Mechanism::Fasa => {
            if side == 0 {
                return Err(Error::config("window/sample side must be positive"));
            }
            checked(&[2, m, m, n, c])?
        }
        Mechanism::FavitVariant => {
            return Err(Error::config("use variant_formula_macs for whole models"))
        }
    };
    projections
        .checked_add(products)
        .ok_or_else(|| Error::config("MAC count overflows 128 bits"))
}

/// Analytical cost of a whole model at `size x size` input: every block's
/// attention bounded by the factorization formula, plus MLP, embedding,
/// downsampling and classifier products.
pub fn variant_formula_macs(spec: &VariantSpec, size: usize) -> Result<u128> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::config(format!(
            "size {size} is not a positive multiple of 32"
        )));
    }
    let m = spec.sample_side as u64;
    let half = (size / 2) as u128;
    let c1 = spec.stages[0].channels as u128;
    let k = PATCH_KERNEL as u128;
    let mut total = checked(&[half, half, k, k, spec.in_channels as u128, c1])?;
    total += checked(&[half / 2, half / 2, 4, c1, c1])?;
    let mut prev = c1;
    for (s, st) in spec.stages.iter().enumerate() {
        let side = (size / spec.reduction(s)) as u128;
        let n = side * side;
        let c = st.channels as u128;
        if s > 0 {
            total += checked(&[n, 4, prev, c])?;
        }
        let block = formula_macs(Mechanism::Fasa, n as u64, c as u64, m)?
            + checked(&[2, st.mlp_ratio as u128, n, c, c])?;
        total += checked(&[block, st.blocks as u128])?;
        prev = c;
    }
    Ok(total + checked(&[prev, spec.num_classes as u128])?)
}

/// MAC total recorded by an instrumented tape.
pub fn measure_macs(tape: &Tape) -> Result<u64> {
    tape.macs()
}

fn random_map(init: &mut Initializer, side: usize, channels: usize) -> Tensor {
    init.normal(&[1, side, side, channels])
}

/// Dense attention with query/key/value/output projections on the tape.
pub fn dense_attention(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let q = tape.matmul_nt(x, wq)?;
    let k = tape.matmul_nt(x, wk)?;
    let v = tape.matmul_nt(x, wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = tape.softmax_rows(scores)?;
    let out = tape.matmul(attn, v)?;
    tape.matmul_nt(out, wo)
}

/// Window attention over an `[H, W, C]` map flattened to `[H*W, C]`.
pub fn window_attention(
    tape: &mut Tape,
    x: Var,
    map: (usize, usize),
    window: usize,
    weights: [Var; 4],
) -> Result<Var> {
    let (h, w) = map;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::config(format!(
            "window {window} does not divide {h}x{w}"
        )));
    }
    let [wq, wk, wv, wo] = weights;
    let c = tape.shape(x)[1];
    let q = tape.matmul_nt(x, wq)?;
    let k = tape.matmul_nt(x, wk)?;
    let v = tape.matmul_nt(x, wv)?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut index = Vec::with_capacity(h * w);
    let mut outs = Vec::new();
    for wr in 0..h / window {
        for wc in 0..w / window {
            let rows: Vec<Option<usize>> = (0..window * window)
                .map(|t| Some((wr * window + t / window) * w + wc * window + t % window))
                .collect();
            index.extend(rows.iter().map(|r| r.unwrap()));
            let qw = tape.gather_rows(q, rows.clone())?;
            let kw = tape.gather_rows(k, rows.clone())?;
            let vw = tape.gather_rows(v, rows)?;
            let s = tape.matmul_nt(qw, kw)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vw)?);
        }
    }
    let stacked = tape.concat_rows(&outs)?;
    // back to raster order
    let mut inverse = vec![None; h * w];
    for (pos, &src) in index.iter().enumerate() {
        inverse[src] = Some(pos);
    }
    let raster = tape.gather_rows(stacked, inverse)?;
    tape.matmul_nt(raster, wo)
}

/// What a sweep evaluates at each input size.
#[derive(Debug, Clone)]
pub enum SweepTarget {
    /// Whole backbone on a `size x size` RGB image.
    Variant(VariantSpec),
    /// One attention layer on the stage-1 map (`size / 4` per side).
    Mechanism {
        mechanism: Mechanism,
        config: FasaConfig,
    },
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Timed repetitions (best-of); zero disables timing.
    pub repeats: usize,
    /// Dense attention is only executed up to this many tokens; above it the
    /// measured column is left empty.
    pub dense_token_limit: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            repeats: 5,
            dense_token_limit: 4096,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub mechanism: String,
    pub size: usize,
    pub tokens: u64,
    pub channels: u64,
    pub side: u64,
    pub formula_macs: u128,
    pub measured_macs: Option<u64>,
    pub wall_seconds: f64,
}

fn timed<T>(repeats: usize, mut run: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let first = run()?;
    let mut best = start.elapsed().as_secs_f64();
    for _ in 1..repeats {
        let t = Instant::now();
        run()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok((first, if repeats == 0 { 0.0 } else { best }))
}

/// Instrumented forward of the whole model; returns the MAC total.
pub fn measure_variant(model: &ModelParams, size: usize, seed: u64) -> Result<u64> {
    let mut init = Initializer::new(seed);
    let image = init.normal(&[1, size, size, model.spec.in_channels]);
    let mut tape = Tape::instrumented();
    let x = tape.constant(image);
    let opts = ForwardOptions {
        inference: true,
        ..ForwardOptions::default()
    };
    model::favit_forward(&mut tape, model, x, &opts)?;
    measure_macs(&tape)
}

/// Instrumented single attention layer on a `side x side` map.
pub fn measure_mechanism(mech: Mechanism, cfg: &FasaConfig, side: usize, seed: u64) -> Result<u64> {
    let mut init = Initializer::new(seed);
    let c = cfg.channels;
    let x = random_map(&mut init, side, c);
    let mut tape = Tape::instrumented();
    match mech {
        Mechanism::Fasa => {
            let mut store = ParamStore::new();
            let params = FasaParams::register(&mut store, "core", cfg, &mut init)?;
            let xv = tape.constant(x);
            fasa::fasa_forward(&mut tape, &store, &params, cfg, xv, false)?;
        }
        Mechanism::DenseSa | Mechanism::WindowSa => {
            let flat = tape.constant(x.reshape(&[side * side, c])?);
            let w: Vec<Var> = (0..4)
                .map(|_| tape.constant(init.trunc_normal(&[c, c], INIT_STD)))
                .collect();
            if mech == Mechanism::DenseSa {
                dense_attention(&mut tape, flat, w[0], w[1], w[2], w[3])?;
            } else {
                window_attention(
                    &mut tape,
                    flat,
                    (side, side),
                    cfg.sample_side,
                    [w[0], w[1], w[2], w[3]],
                )?;
            }
        }
        Mechanism::FavitVariant => {
            return Err(Error::config("use measure_variant for whole models"))
        }
    }
    measure_macs(&tape)
}

/// One report per size, sizes sorted ascending.
pub fn sweep(
    target: &SweepTarget,
    sizes: &[usize],
    opts: &SweepOptions,
) -> Result<Vec<FlopReport>> {
    if sizes.is_empty() {
        return Err(Error::config("no sizes given"));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::with_capacity(sizes.len());
    match target {
        SweepTarget::Variant(spec) => {
            spec.validate()?;
            let model = ModelParams::build(spec, opts.seed)?;
            for &size in &sizes {
                if size == 0 || size % 32 != 0 {
                    return Err(Error::config(format!("size {size} is not divisible by 32")));
                }
                let (macs, secs) =
                    timed(opts.repeats, || measure_variant(&model, size, opts.seed))?;
                let side = (size / 4) as u64;
                out.push(FlopReport {
                    mechanism: format!("{}:{}", Mechanism::FavitVariant, spec.name),
                    size,
                    tokens: side * side,
                    channels: spec.stages[0].channels as u64,
                    side: spec.sample_side as u64,
                    formula_macs: variant_formula_macs(spec, size)?,
                    measured_macs: Some(macs),
                    wall_seconds: secs,
                });
            }
        }
        SweepTarget::Mechanism { mechanism, config } => {
            config.validate()?;
            for &size in &sizes {
                if size == 0 || size % 4 != 0 {
                    return Err(Error::config(format!("size {size} is not divisible by 4")));
                }
                let side = size / 4;
                let tokens = (side * side) as u64;
                let c = config.channels as u64;
                let m = config.sample_side as u64;
                let formula = formula_macs(*mechanism, tokens, c, m)?;
                let skip = *mechanism == Mechanism::DenseSa && side * side > opts.dense_token_limit;
                let (measured, secs) = if skip {
                    (None, 0.0)
                } else {
                    let (macs, secs) = timed(opts.repeats, || {
                        measure_mechanism(*mechanism, config, side, opts.seed)
                    })?;
                    (Some(macs), secs)
                };
                out.push(FlopReport {
                    mechanism: mechanism.to_string(),
                    size,
                    tokens,
                    channels: c,
                    side: m,
                    formula_macs: formula,
                    measured_macs: measured,
                    wall_seconds: secs,
                });
            }
        }
    }
    Ok(out)
}

/// Largest relative residual of the least-squares fit `y = a * N^power`
/// (through the origin), using measured MACs where present.
pub fn fit_residual(reports: &[FlopReport], power: i32) -> f64 {
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| {
            let y = r.measured_macs.map_or(r.formula_macs as f64, |m| m as f64);
            ((r.tokens as f64).powi(power), y)
        })
        .collect();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let a = sxy / sxx;
    pts.iter()
        .map(|(x, y)| ((y - a * x) / y).abs())
        .fold(0.0, f64::max)
}

pub const CSV_HEADER: &str = "mechanism,size,N,C,M,formula_macs,measured_macs,wall_seconds";

pub fn write_csv<W: Write>(mut w: W, reports: &[FlopReport]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        let measured = r.measured_macs.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.6}",
            r.mechanism,
            r.size,
            r.tokens,
            r.channels,
            r.side,
            r.formula_macs,
            measured,
            r.wall_seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(formula_macs(Mechanism::Fasa, 49, 8, 7).unwrap(), 50_960);
        assert_eq!(formula_macs(Mechanism::DenseSa, 49, 8, 0).unwrap(), 50_960);
        assert_eq!(
            formula_macs(Mechanism::WindowSa, 3136, 64, 7).unwrap(),
            formula_macs(Mechanism::Fasa, 3136, 64, 7).unwrap()
        );
        assert!(formula_macs(Mechanism::Fasa, 0, 8, 7).is_err());
        assert!(formula_macs(Mechanism::FavitVariant, 1, 1, 1).is_err());
    }

    #[test]
    fn huge_arguments_use_wide_integers() {
        let n = u64::MAX / 2;
        let v = formula_macs(Mechanism::Fasa, n, 4, 7).unwrap();
        assert_eq!(v, 4 * (n as u128) * 16 + 2 * 49 * (n as u128) * 4);
        assert!(formula_macs(Mechanism::DenseSa, u64::MAX, u64::MAX, 1).is_err());
    }

    #[test]
    fn csv_format_is_fixed() {
        let r = FlopReport {
            mechanism: "fasa".into(),
            size: 224,
            tokens: 3136,
            channels: 64,
            side: 7,
            formula_macs: 10,
            measured_macs: None,
            wall_seconds: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{CSV_HEADER}\nfasa,224,3136,64,7,10,,0.000000\n")
        );
    }

    #[test]
    fn fit_residual_is_zero_for_exact_laws() {
        let mk = |n: u64, y: u64| FlopReport {
            mechanism: "x".into(),
            size: 0,
            tokens: n,
            channels: 1,
            side: 1,
            formula_macs: y as u128,
            measured_macs: Some(y),
            wall_seconds: 0.0,
        };
        let lin = [mk(10, 30), mk(40, 120), mk(160, 480)];
        assert!(fit_residual(&lin, 1) < 1e-12);
        let quad = [mk(10, 100), mk(40, 1600)];
        assert!(fit_residual(&quad, 2) < 1e-12);
        assert!(fit_residual(&quad, 1) > 0.1);
    }
}
