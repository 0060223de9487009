//! Reference implementations written with plain scalar loops.
//!
//! Nothing in this module calls the tensor kernels or the tape; the only
//! shared code is `f64` arithmetic and parameter storage. That keeps each
//! oracle an independent check on the primary path:
//!
//! - [`dense_sa`]: single-head scaled dot-product self-attention.
//! - [`window_sa`]: [`dense_sa`] applied inside non-overlapping windows.
//! - [`brute_force_fasa`]: factorization attention from explicit indices.
//! - [`fd_check`]: central finite differences against analytic gradients.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fasa::{FasaConfig, FasaParams, Fusion};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative-error denominator floor.
pub const REL_FLOOR: f64 = 1e-8;

/// Deviation summary of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seeds: Vec<u64>,
}

impl OracleReport {
    /// Pass when every deviation stays under `tolerance`; `relative`
    /// selects which deviation the tolerance applies to.
    pub fn new(
        case: impl Into<String>,
        max_abs: f64,
        max_rel: f64,
        tolerance: f64,
        relative: bool,
        seeds: Vec<u64>,
    ) -> Self {
        let measured = if relative { max_rel } else { max_abs };
        OracleReport {
            case: case.into(),
            max_abs,
            max_rel,
            tolerance,
            pass: measured < tolerance,
            seeds,
        }
    }

    /// Element-wise comparison of two same-shaped tensors, judged on the
    /// absolute deviation.
    pub fn compare(
        case: impl Into<String>,
        got: &Tensor,
        want: &Tensor,
        tolerance: f64,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        if got.shape() != want.shape() {
            return Err(Error::shape("compare", got.shape(), want.shape()));
        }
        let (abs, rel) = deviations(got.data(), want.data());
        Ok(OracleReport::new(case, abs, rel, tolerance, false, seeds))
    }

    /// Folds another report into this one (worst deviations, all seeds).
    pub fn merge(&mut self, other: &OracleReport) {
        self.max_abs = self.max_abs.max(other.max_abs);
        self.max_rel = self.max_rel.max(other.max_rel);
        self.pass &= other.pass;
        self.seeds.extend_from_slice(&other.seeds);
    }
}

/// `(max |a - b|, max |a - b| / max(|a|, |b|, floor))`.
pub fn deviations(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter()
        .zip(b)
        .fold((0.0f64, 0.0f64), |(abs, rel), (&x, &y)| {
            let d = (x - y).abs();
            let denom = x.abs().max(y.abs()).max(REL_FLOOR);
            (abs.max(d), rel.max(d / denom))
        })
}

/// Writes `case,max_abs,max_rel,pass`, sorted by case id.
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[OracleReport]) -> Result<()> {
    let mut sorted: Vec<&OracleReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.case.cmp(&b.case));
    writeln!(w, "case,max_abs,max_rel,pass")?;
    for r in sorted {
        writeln!(w, "{},{:e},{:e},{}", r.case, r.max_abs, r.max_rel, r.pass)?;
    }
    Ok(())
}

fn square(t: &Tensor, what: &str) -> Result<usize> {
    match *t.shape() {
        [a, b] if a == b => Ok(a),
        _ => Err(Error::Contract(format!(
            "{what} must be square, got {:?}",
            t.shape()
        ))),
    }
}

/// `y[o] = sum_i w[o][i] * x[i]` for every row of `x`.
fn project(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let c_out = w.shape()[0];
    let c_in = w.shape()[1];
    let wd = w.data();
    let mut y = vec![0.0; rows * c_out];
    for n in 0..rows {
        for o in 0..c_out {
            let mut acc = 0.0;
            for i in 0..c_in {
                acc += wd[o * c_in + i] * x[n * c_in + i];
            }
            y[n * c_out + o] = acc;
        }
    }
    y
}

/// Softmax of `scores` against `values`, one query row at a time.
fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    dim: usize,
    divisor: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_q * dim];
    let mut p = vec![0.0; n_k];
    for n in 0..n_q {
        let mut max = f64::NEG_INFINITY;
        for s in 0..n_k {
            let mut dot = 0.0;
            for t in 0..dim {
                dot += q[n * dim + t] * k[s * dim + t];
            }
            p[s] = dot / divisor;
            max = max.max(p[s]);
        }
        let mut total = 0.0;
        for ps in p.iter_mut() {
            *ps = (*ps - max).exp();
            total += *ps;
        }
        for s in 0..n_k {
            let w = p[s] / total;
            for t in 0..dim {
                out[n * dim + t] += w * v[s * dim + t];
            }
        }
    }
    out
}

/// Dense single-head self-attention of `x: [N, C]` with `[out, in]`
/// projections, logits divided by `scale`.
pub fn dense_sa(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, scale: f64) -> Result<Tensor> {
    let &[n, c] = x.shape() else {
        return Err(Error::Contract(format!(
            "dense_sa expects [N, C], got {:?}",
            x.shape()
        )));
    };
    for w in [wq, wk, wv] {
        if square(w, "projection")? != c {
            return Err(Error::shape("dense_sa", x.shape(), w.shape()));
        }
    }
    let q = project(x.data(), n, wq);
    let k = project(x.data(), n, wk);
    let v = project(x.data(), n, wv);
    Tensor::new(&[n, c], attend(&q, &k, &v, n, n, c, scale))
}

/// Applies an `[out, in]` projection to every row of a `[..., C]` tensor.
pub fn dense_projection(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if w.shape() != [c, c] {
        return Err(Error::shape("dense_projection", x.shape(), w.shape()));
    }
    let rows = x.numel() / c;
    Tensor::new(x.shape(), project(x.data(), rows, w))
}

/// Projection weights for [`dense_sa`] and [`window_sa`].
#[derive(Debug, Clone)]
pub struct DenseWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub scale: f64,
}

/// Dense attention restricted to non-overlapping `window x window` tiles of
/// an `[H, W, C]` map.
pub fn window_sa(x: &Tensor, window: usize, weights: &DenseWeights) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::Contract(format!(
            "window_sa expects [H, W, C], got {:?}",
            x.shape()
        )));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::config(format!(
            "window {window} does not divide a {h}x{w} map"
        )));
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    let tokens = window * window;
    for wr in 0..h / window {
        for wc in 0..w / window {
            let mut rows = Vec::with_capacity(tokens * c);
            for a in 0..window {
                for b in 0..window {
                    let (r, cc) = (wr * window + a, wc * window + b);
                    rows.extend_from_slice(&x.data()[(r * w + cc) * c..(r * w + cc + 1) * c]);
                }
            }
            let local = Tensor::new(&[tokens, c], rows)?;
            let y = dense_sa(&local, &weights.wq, &weights.wk, &weights.wv, weights.scale)?;
            for a in 0..window {
                for b in 0..window {
                    let (r, cc) = (wr * window + a, wc * window + b);
                    let t = a * window + b;
                    out.data_mut()[(r * w + cc) * c..(r * w + cc + 1) * c]
                        .copy_from_slice(&y.data()[t * c..(t + 1) * c]);
                }
            }
        }
    }
    Ok(out)
}

fn weight<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
}

/// Factorization attention over `[B, H, W, C]` written from explicit index
/// arithmetic: channel groups, zero-padded windows, dilated samples,
/// cross-window fusion, per-head attention, concatenation and output
/// projection.
pub fn brute_force_fasa(
    x: &Tensor,
    cfg: &FasaConfig,
    store: &ParamStore,
    params: &FasaParams,
) -> Result<Tensor> {
    cfg.validate()?;
    let &[batch, h, w, c] = x.shape() else {
        return Err(Error::Contract(format!(
            "brute_force_fasa expects [B, H, W, C], got {:?}",
            x.shape()
        )));
    };
    if c != cfg.channels {
        return Err(Error::config("channel count mismatch"));
    }
    let g_count = cfg.dilations.len();
    let cp = c / g_count;
    let m = cfg.sample_side;
    let keys = m * m;
    let heads = cfg.heads_per_group;
    let d = cp / heads;
    let divisor = (d as f64).sqrt();
    let n = h * w;
    let xd = x.data();
    let mut out = vec![0.0; batch * n * c];

    for b in 0..batch {
        let mut concat = vec![0.0; n * c];
        for g in 0..g_count {
            let wq = weight(store, &params.wq(g))?.data();
            let wk = weight(store, &params.wk(g))?.data();
            let wv = weight(store, &params.wv(g))?.data();
            let embed = |wt: &[f64], r: usize, col: usize, o: usize| -> f64 {
                let base = ((b * h + r) * w + col) * c + g * cp;
                (0..cp).map(|i| wt[o * cp + i] * xd[base + i]).sum()
            };

            let mut q = vec![0.0; n * cp];
            for r in 0..h {
                for col in 0..w {
                    for o in 0..cp {
                        q[(r * w + col) * cp + o] = embed(wq, r, col, o);
                    }
                }
            }

            let dil = cfg.dilations[g];
            let side = dil * (m - 1) + 1;
            if side < m {
                return Err(Error::config("window smaller than sample grid"));
            }
            let down = h.div_ceil(side);
            let across = w.div_ceil(side);
            let windows = down * across;
            let mut k = vec![0.0; keys * cp];
            let mut v = vec![0.0; keys * cp];
            for a in 0..m {
                for bb in 0..m {
                    let s = a * m + bb;
                    for o in 0..cp {
                        let (mut kf, mut vf) = match cfg.fusion {
                            Fusion::Max => (f64::NEG_INFINITY, f64::NEG_INFINITY),
                            Fusion::Mean => (0.0, 0.0),
                        };
                        for j in 0..windows {
                            let r = (j / across) * side + a * dil;
                            let col = (j % across) * side + bb * dil;
                            let (kv, vv) = if r < h && col < w {
                                (embed(wk, r, col, o), embed(wv, r, col, o))
                            } else {
                                (0.0, 0.0)
                            };
                            match cfg.fusion {
                                Fusion::Max => {
                                    kf = kf.max(kv);
                                    vf = vf.max(vv);
                                }
                                Fusion::Mean => {
                                    kf += kv;
                                    vf += vv;
                                }
                            }
                        }
                        if cfg.fusion == Fusion::Mean {
                            kf /= windows as f64;
                            vf /= windows as f64;
                        }
                        k[s * cp + o] = kf;
                        v[s * cp + o] = vf;
                    }
                }
            }

            for head in 0..heads {
                let pick = |src: &[f64], rows: usize| -> Vec<f64> {
                    (0..rows)
                        .flat_map(|r| src[r * cp + head * d..r * cp + (head + 1) * d].to_vec())
                        .collect()
                };
                let y = attend(
                    &pick(&q, n),
                    &pick(&k, keys),
                    &pick(&v, keys),
                    n,
                    keys,
                    d,
                    divisor,
                );
                for p in 0..n {
                    for t in 0..d {
                        concat[p * c + g * cp + head * d + t] = y[p * d + t];
                    }
                }
            }
        }
        let projected = project(&concat, n, weight(store, &params.wo())?);
        out[b * n * c..(b + 1) * n * c].copy_from_slice(&projected);
    }
    Tensor::new(&[batch, h, w, c], out)
}

/// Default finite-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// Central differences of `f` at `theta`, one coordinate at a time,
/// compared against `analytic`. The report passes when the maximum
/// relative error is below `tolerance`.
pub fn fd_check(
    case: impl Into<String>,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> Result<OracleReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(Error::shape("fd_check", &[theta.len()], &[analytic.len()]));
    }
    let numeric = central_differences(&mut f, theta, eps)?;
    let (abs, rel) = deviations(&numeric, analytic);
    Ok(OracleReport::new(
        case,
        abs,
        rel,
        tolerance,
        true,
        Vec::new(),
    ))
}

/// Numeric gradient of `f` at `theta` by central differences.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = f(&probe)?;
        probe[i] = theta[i] - eps;
        let down = f(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_central_difference_is_exact() {
        let eps = 2f64.powi(-16);
        let g = central_differences(|t| Ok(t[0] * t[0]), &[3.0], eps).unwrap();
        assert_eq!(g, vec![6.0]);
        let g = central_differences(|t| Ok(t[0] * t[0]), &[3.0], FD_EPSILON).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_objective_has_no_error() {
        let r = fd_check(
            "lin",
            |t| Ok(2.0 * t[0] - 3.0 * t[1]),
            &[0.3, -1.2],
            &[2.0, -3.0],
            FD_EPSILON,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel < 1e-9 && r.pass);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = fd_check("nan", |t| Ok(t[0].ln()), &[0.0], &[1.0], FD_EPSILON, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(fd_check("eps", |t| Ok(t[0]), &[0.0], &[1.0], 0.0, 1e-4).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let wq = Tensor::new(&[2, 2], vec![0.3, -0.1, 0.2, 0.5]).unwrap();
        let wv = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dense_sa(&x, &wq, &wq, &wv, 2f64.sqrt()).unwrap();
        assert_eq!(y.data(), &[5.0, 11.0]);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let x = Tensor::new(&[3, 2], vec![0.4, -0.7, 0.4, -0.7, 0.4, -0.7]).unwrap();
        let w = Tensor::new(&[2, 2], vec![0.9, 0.1, -0.3, 0.8]).unwrap();
        let y = dense_sa(&x, &w, &w, &w, 1.0).unwrap();
        assert_eq!(y.data()[..2], y.data()[2..4]);
        assert_eq!(y.data()[..2], y.data()[4..]);
    }

    #[test]
    fn window_sa_rejects_indivisible_maps() {
        let x = Tensor::zeros(&[5, 4, 1]);
        let w = DenseWeights {
            wq: Tensor::eye(1),
            wk: Tensor::eye(1),
            wv: Tensor::eye(1),
            scale: 1.0,
        };
        assert!(window_sa(&x, 2, &w).is_err());
    }

    #[test]
    fn report_csv_is_sorted() {
        let reports = vec![
            OracleReport::new("b", 1e-12, 1e-11, 1e-10, false, vec![1]),
            OracleReport::new("a", 2.0, 1.0, 1e-10, false, vec![2]),
        ];
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "case,max_abs,max_rel,pass\na,2e0,1e0,false\nb,1e-12,1e-11,true\n"
        );
    }
}
