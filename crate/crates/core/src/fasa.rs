//! Factorization self-attention.
//!
//! Channels are split into `G` groups. Inside group `i` every position is a
//! query, while keys come from a fixed `M x M` dilated sample taken in each
//! non-overlapping `S_i x S_i` window and fused across windows with a
//! symmetric reduction, so every group attends to exactly `M^2` keys no
//! matter how large the map is. Group outputs are concatenated and
//! projected back to `C` channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, INIT_STD};
use crate::tensor::{kernels, IndexGrid, Tape, Tensor, Var};

/// Default sample grid side.
pub const DEFAULT_SAMPLE_SIDE: usize = 7;

/// Symmetric reduction applied across windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Fusion::Max),
            "mean" => Ok(Fusion::Mean),
            other => Err(Error::config(format!("unknown fusion `{other}`"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Max => "max",
            Fusion::Mean => "mean",
        })
    }
}

/// How the attention logits are scaled. Only the per-head dimension is
/// supported: logits are divided by `sqrt(C' / H)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    PerHeadDim,
}

/// Per-layer mechanism settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FasaConfig {
    pub sample_side: usize,
    /// One dilation rate per group.
    pub dilations: Vec<usize>,
    pub heads_per_group: usize,
    pub channels: usize,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub scale_mode: ScaleMode,
}

impl FasaConfig {
    pub fn new(
        channels: usize,
        dilations: Vec<usize>,
        heads_per_group: usize,
        sample_side: usize,
        fusion: Fusion,
    ) -> Result<Self> {
        let cfg = FasaConfig {
            sample_side,
            dilations,
            heads_per_group,
            channels,
            fusion,
            scale_mode: ScaleMode::PerHeadDim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_side < 2 {
            return Err(Error::config(format!(
                "sample side M must be at least 2, got {}",
                self.sample_side
            )));
        }
        if self.dilations.is_empty() {
            return Err(Error::config("dilation set is empty"));
        }
        if let Some(&d) = self.dilations.iter().find(|&&d| d == 0) {
            return Err(Error::config(format!(
                "dilation rate {d} must be at least 1"
            )));
        }
        let g = self.groups();
        if self.channels == 0 || !self.channels.is_multiple_of(g) {
            return Err(Error::config(format!(
                "{} channels do not split into {g} groups",
                self.channels
            )));
        }
        if self.heads_per_group == 0 || !self.group_channels().is_multiple_of(self.heads_per_group)
        {
            return Err(Error::config(format!(
                "{} group channels do not split into {} heads",
                self.group_channels(),
                self.heads_per_group
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.dilations.len()
    }

    /// `C' = C / G`.
    pub fn group_channels(&self) -> usize {
        self.channels / self.groups()
    }

    pub fn head_dim(&self) -> usize {
        self.group_channels() / self.heads_per_group
    }

    /// `S_i = D_i * (M - 1) + 1`.
    pub fn window_side(&self, group: usize) -> usize {
        self.dilations[group] * (self.sample_side - 1) + 1
    }

    pub fn window_sides(&self) -> Vec<usize> {
        (0..self.groups()).map(|g| self.window_side(g)).collect()
    }

    pub fn keys_per_group(&self) -> usize {
        self.sample_side * self.sample_side
    }
}

/// Dilation that spreads `sample_side` samples over a window edge to edge.
pub fn dilation_for(window_side: usize, sample_side: usize) -> Result<usize> {
    if sample_side < 2
        || window_side < sample_side
        || !(window_side - 1).is_multiple_of(sample_side - 1)
    {
        return Err(Error::config(format!(
            "window side {window_side} cannot hold {sample_side} evenly dilated samples"
        )));
    }
    Ok((window_side - 1) / (sample_side - 1))
}

/// Parameter names of one FaSA layer inside a [`ParamStore`].
///
/// Every per-group projection is a `C' x C'` 1x1 convolution kernel stored
/// as `[out, in]`, applied as `x * W^T`. `wo` is the `C x C` output
/// projection after group concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FasaParams {
    prefix: String,
    groups: usize,
}

impl FasaParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &FasaConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        FasaParams::register_with(store, prefix, cfg, |shape| {
            init.trunc_normal(shape, INIT_STD)
        })
    }

    pub fn register_with(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &FasaConfig,
        mut make: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = FasaParams {
            prefix: prefix.to_string(),
            groups: cfg.groups(),
        };
        let cp = cfg.group_channels();
        for g in 0..p.groups {
            store.insert(p.wq(g), make(&[cp, cp]))?;
            store.insert(p.wk(g), make(&[cp, cp]))?;
            store.insert(p.wv(g), make(&[cp, cp]))?;
        }
        store.insert(p.wo(), make(&[cfg.channels, cfg.channels]))?;
        Ok(p)
    }

    pub fn wq(&self, group: usize) -> String {
        format!("{}.wq.{group}", self.prefix)
    }

    pub fn wk(&self, group: usize) -> String {
        format!("{}.wk.{group}", self.prefix)
    }

    pub fn wv(&self, group: usize) -> String {
        format!("{}.wv.{group}", self.prefix)
    }

    pub fn wo(&self) -> String {
        format!("{}.wo", self.prefix)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.groups)
            .flat_map(|g| [self.wq(g), self.wk(g), self.wv(g)])
            .collect();
        v.push(self.wo());
        v
    }
}

/// Non-overlapping `side x side` tiling of an `h x w` map, zero-padded at
/// the bottom and right up to the next multiple of `side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub side: usize,
    pub map_h: usize,
    pub map_w: usize,
    /// Windows along the vertical axis.
    pub down: usize,
    /// Windows along the horizontal axis.
    pub across: usize,
}

impl WindowGrid {
    pub fn new(map_h: usize, map_w: usize, side: usize, sample_side: usize) -> Result<Self> {
        if side < sample_side {
            return Err(Error::config(format!(
                "window side {side} is smaller than the sample side {sample_side}"
            )));
        }
        Ok(WindowGrid {
            side,
            map_h,
            map_w,
            down: map_h.div_ceil(side),
            across: map_w.div_ceil(side),
        })
    }

    /// Total window count.
    pub fn count(&self) -> usize {
        self.down * self.across
    }

    /// Top-left map position of window `j` (row-major window order).
    pub fn origin(&self, j: usize) -> (usize, usize) {
        ((j / self.across) * self.side, (j % self.across) * self.side)
    }

    /// Map position of a window-local offset, or `None` inside padding.
    pub fn locate(&self, j: usize, offset: (usize, usize)) -> Option<(usize, usize)> {
        let (r0, c0) = self.origin(j);
        let (r, c) = (r0 + offset.0, c0 + offset.1);
        (r < self.map_h && c < self.map_w).then_some((r, c))
    }
}

/// Materializes every window of an `[H, W, C']` map as an `[S, S, C']`
/// tensor, padded with zeros where the tiling overhangs the map.
pub fn partition_windows(
    x: &Tensor,
    side: usize,
    sample_side: usize,
) -> Result<(WindowGrid, Vec<Tensor>)> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::Contract(format!(
            "partition_windows expects [H, W, C], got {:?}",
            x.shape()
        )));
    };
    let grid = WindowGrid::new(h, w, side, sample_side)?;
    let windows = (0..grid.count())
        .map(|j| {
            let mut t = Tensor::zeros(&[side, side, c]);
            for a in 0..side {
                for b in 0..side {
                    if let Some((r, cc)) = grid.locate(j, (a, b)) {
                        let src = &x.data()[(r * w + cc) * c..(r * w + cc + 1) * c];
                        t.data_mut()[(a * side + b) * c..(a * side + b + 1) * c]
                            .copy_from_slice(src);
                    }
                }
            }
            t
        })
        .collect();
    Ok((grid, windows))
}

/// Picks the `M x M` dilated sample of one `[S, S, C']` window.
pub fn dilated_sample(
    window: &Tensor,
    sample_side: usize,
    dilation: usize,
) -> Result<(IndexGrid, Tensor)> {
    let &[s, s2, c] = window.shape() else {
        return Err(Error::Contract(format!(
            "dilated_sample expects [S, S, C], got {:?}",
            window.shape()
        )));
    };
    if s != s2 || sample_side < 2 || dilation * (sample_side - 1) + 1 != s {
        return Err(Error::config(format!(
            "window side S={s} does not match M={sample_side}, D={dilation} (need D*(M-1)+1 = S)"
        )));
    }
    let grid = IndexGrid::dilated(s, sample_side, dilation)?;
    let mut data = Vec::with_capacity(grid.len() * c);
    for &(r, cc) in grid.offsets() {
        data.extend_from_slice(&window.data()[(r * s + cc) * c..(r * s + cc + 1) * c]);
    }
    let rows = grid.len();
    Ok((grid, Tensor::new(&[rows, c], data)?))
}

/// Contiguous channel slices, one per group, keeping leading axes.
pub fn split_groups(tape: &mut Tape, x: Var, cfg: &FasaConfig) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::Contract("split_groups on a scalar".into()))?;
    let g = cfg.groups();
    if c % g != 0 {
        return Err(Error::config(format!(
            "{c} channels do not split into {g} groups"
        )));
    }
    if g == 1 {
        return Ok(vec![x]);
    }
    let rows = tape.value(x).numel() / c;
    let cp = c / g;
    let flat = tape.reshape(x, &[rows, c])?;
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = cp;
    (0..g)
        .map(|i| {
            let s = tape.slice(flat, 0..rows, i * cp..(i + 1) * cp)?;
            tape.reshape(s, &out_shape)
        })
        .collect()
}

fn flatten_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() == 2 {
        return Ok(x);
    }
    let c = *shape.last().unwrap();
    let rows = tape.value(x).numel() / c;
    tape.reshape(x, &[rows, c])
}

/// Query embedding: 1x1 convolution then row-major flattening to `[N, C']`.
pub fn embed_queries(tape: &mut Tape, x: Var, wq: Var) -> Result<Var> {
    let flat = flatten_rows(tape, x)?;
    tape.matmul_nt(flat, wq)
}

/// Key and value embeddings of sampled points; any leading shape is kept.
pub fn embed_keys_values(tape: &mut Tape, samples: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(samples).to_vec();
    let flat = flatten_rows(tape, samples)?;
    let k = tape.matmul_nt(flat, wk)?;
    let v = tape.matmul_nt(flat, wv)?;
    if shape.len() == 2 {
        return Ok((k, v));
    }
    Ok((tape.reshape(k, &shape)?, tape.reshape(v, &shape)?))
}

/// Reduces a `[windows, positions, C']` stack over its window axis.
pub fn cross_window_fuse(tape: &mut Tape, stack: Var, fusion: Fusion) -> Result<Var> {
    match fusion {
        Fusion::Max => tape.max_reduce_over_windows(stack),
        Fusion::Mean => tape.mean_reduce_over_windows(stack),
    }
}

/// Multi-head attention of `N` queries against the `M^2` fused keys of one
/// group. Returns the `[N, C']` output and one `[N, M^2]` attention matrix
/// per head.
pub fn group_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let &[n, cp] = tape.shape(q) else {
        return Err(Error::Contract(
            "group_attention expects rank-2 queries".into(),
        ));
    };
    let &[keys, kc] = tape.shape(k) else {
        return Err(Error::Contract(
            "group_attention expects rank-2 keys".into(),
        ));
    };
    if kc != cp || tape.shape(v) != [keys, cp] {
        return Err(Error::shape(
            "group_attention",
            tape.shape(q),
            tape.shape(k),
        ));
    }
    if heads == 0 || cp % heads != 0 {
        return Err(Error::config(format!(
            "{cp} channels do not split into {heads} heads"
        )));
    }
    let d = cp / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 0..n, cols.clone())?,
                tape.slice(k, 0..keys, cols.clone())?,
                tape.slice(v, 0..keys, cols)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
        attns.push(attn);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, attns))
}

/// Concatenates `[N, C']` group outputs along channels, applies the output
/// projection and reshapes to `[B, H, W, C]`.
pub fn merge_groups(tape: &mut Tape, outputs: &[Var], wo: Var, spatial: [usize; 3]) -> Result<Var> {
    let first = *outputs
        .first()
        .ok_or_else(|| Error::Contract("merge_groups needs at least one group".into()))?;
    let n = tape.shape(first)[0];
    if let Some(&bad) = outputs.iter().find(|&&o| tape.shape(o)[0] != n) {
        return Err(Error::shape(
            "merge_groups",
            tape.shape(first),
            tape.shape(bad),
        ));
    }
    let cat = if outputs.len() == 1 {
        first
    } else {
        tape.concat_cols(outputs)?
    };
    let c = tape.shape(cat)[1];
    let projected = tape.matmul_nt(cat, wo)?;
    let [b, h, w] = spatial;
    tape.reshape(projected, &[b, h, w, c])
}

/// Intermediates of one group, recorded when tracing is on.
#[derive(Debug, Clone)]
pub struct GroupTrace {
    pub group: usize,
    pub window_side: usize,
    pub dilation: usize,
    pub windows: WindowGrid,
    /// Window-local sample offsets, identical for every window.
    pub sample_grid: IndexGrid,
    /// Fused keys, `[B * M^2, C']`, batch-major.
    pub fused_keys: Tensor,
    /// Fused values, `[B * M^2, C']`, batch-major.
    pub fused_values: Tensor,
    /// For max fusion: the window index that supplied each fused key element.
    pub key_argmax: Option<Vec<u32>>,
    /// Smallest gap between the best and runner-up window over all max-fused
    /// key and value elements; infinite for mean fusion or a single window.
    pub fusion_margin: f64,
    /// Attention matrices indexed `[batch][head]`, each `[N, M^2]`.
    pub attention: Vec<Vec<Tensor>>,
}

impl GroupTrace {
    pub fn window_count(&self) -> usize {
        self.windows.count()
    }

    /// In-bounds sample positions of window `j` in map coordinates.
    pub fn sampled_grid(&self, j: usize) -> IndexGrid {
        let offsets = self
            .sample_grid
            .offsets()
            .iter()
            .filter_map(|&o| self.windows.locate(j, o))
            .collect();
        IndexGrid::new(self.windows.map_h, self.windows.map_w, offsets)
            .expect("window samples stay ordered and in bounds")
    }

    /// Map position of sample `s` in window `j`, if it is not padding.
    pub fn sample_position(&self, j: usize, s: usize) -> Option<(usize, usize)> {
        self.windows.locate(j, self.sample_grid.offsets()[s])
    }

    /// Mean over heads of batch item `b`'s attention, `[N, M^2]`.
    pub fn head_mean_attention(&self, b: usize) -> Tensor {
        let heads = &self.attention[b];
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            acc.data_mut()
                .iter_mut()
                .zip(h.data())
                .for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

fn max_margin(stack: &[f64], windows: usize, inner: usize) -> f64 {
    if windows < 2 {
        return f64::INFINITY;
    }
    let mut margin = f64::INFINITY;
    for e in 0..inner {
        let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for w in 0..windows {
            let v = stack[w * inner + e];
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        margin = margin.min(best - second);
    }
    margin
}

/// Full FaSA layer over a `[B, H, W, C]` map.
///
/// Padded window positions enter fusion as zero rows. Key and value
/// embeddings are only evaluated on in-bounds samples; since the
/// embeddings have no bias, padded rows stay zero after embedding.
pub fn fasa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FasaParams,
    cfg: &FasaConfig,
    x: Var,
    trace: bool,
) -> Result<(Var, Vec<GroupTrace>)> {
    cfg.validate()?;
    let &[batch, h, w, c] = tape.shape(x) else {
        return Err(Error::Contract(format!(
            "fasa_forward expects [B, H, W, C], got {:?}",
            tape.shape(x)
        )));
    };
    if c != cfg.channels {
        return Err(Error::config(format!(
            "input has {c} channels, layer expects {}",
            cfg.channels
        )));
    }
    if params.groups() != cfg.groups() {
        return Err(Error::config(
            "parameter groups do not match the configuration",
        ));
    }
    let hw = h * w;
    let m = cfg.sample_side;
    let m2 = m * m;
    let cp = cfg.group_channels();

    let groups = split_groups(tape, x, cfg)?;
    let mut outputs = Vec::with_capacity(groups.len());
    let mut traces = Vec::new();
    for (gi, xg) in groups.into_iter().enumerate() {
        let flat = flatten_rows(tape, xg)?;
        let wq = tape.param(store, &params.wq(gi))?;
        let wk = tape.param(store, &params.wk(gi))?;
        let wv = tape.param(store, &params.wv(gi))?;
        let q = embed_queries(tape, flat, wq)?;

        let side = cfg.window_side(gi);
        let dilation = cfg.dilations[gi];
        let windows = WindowGrid::new(h, w, side, m)?;
        let local = IndexGrid::dilated(side, m, dilation)?;

        // Stack slots are ordered [window][batch][sample].
        let mut sources = Vec::new();
        let mut slots = Vec::with_capacity(windows.count() * batch * m2);
        for j in 0..windows.count() {
            for b in 0..batch {
                for &offset in local.offsets() {
                    match windows.locate(j, offset) {
                        Some((r, cc)) => {
                            slots.push(Some(sources.len()));
                            sources.push(Some(b * hw + r * w + cc));
                        }
                        None => slots.push(None),
                    }
                }
            }
        }
        let samples = tape.gather_rows(flat, sources)?;
        let (kc, vc) = embed_keys_values(tape, samples, wk, wv)?;
        let stack_shape = [windows.count(), batch * m2, cp];
        let kstack = tape.gather_rows(kc, slots.clone())?;
        let kstack = tape.reshape(kstack, &stack_shape)?;
        let vstack = tape.gather_rows(vc, slots)?;
        let vstack = tape.reshape(vstack, &stack_shape)?;
        let k = cross_window_fuse(tape, kstack, cfg.fusion)?;
        let v = cross_window_fuse(tape, vstack, cfg.fusion)?;

        let mut rows = Vec::with_capacity(batch);
        let mut attention = Vec::new();
        for b in 0..batch {
            let (qb, kb, vb) = if batch == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, b * hw..(b + 1) * hw, 0..cp)?,
                    tape.slice(k, b * m2..(b + 1) * m2, 0..cp)?,
                    tape.slice(v, b * m2..(b + 1) * m2, 0..cp)?,
                )
            };
            let (out, attns) = group_attention(tape, qb, kb, vb, cfg.heads_per_group)?;
            rows.push(out);
            if trace {
                attention.push(attns.iter().map(|&a| tape.value(a).clone()).collect());
            }
        }
        outputs.push(if batch == 1 {
            rows[0]
        } else {
            tape.concat_rows(&rows)?
        });

        if trace {
            let inner = batch * m2 * cp;
            let (key_argmax, fusion_margin) = match cfg.fusion {
                Fusion::Max => {
                    let ks = tape.value(kstack).data();
                    let vs = tape.value(vstack).data();
                    let (_, arg) = kernels::max_over_windows(ks, windows.count(), inner);
                    let margin = max_margin(ks, windows.count(), inner).min(max_margin(
                        vs,
                        windows.count(),
                        inner,
                    ));
                    (Some(arg), margin)
                }
                Fusion::Mean => (None, f64::INFINITY),
            };
            traces.push(GroupTrace {
                group: gi,
                window_side: side,
                dilation,
                windows,
                sample_grid: local,
                fused_keys: tape.value(k).clone(),
                fused_values: tape.value(v).clone(),
                key_argmax,
                fusion_margin,
                attention,
            });
        }
    }
    let wo = tape.param(store, &params.wo())?;
    let out = merge_groups(tape, &outputs, wo, [batch, h, w])?;
    Ok((out, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, d: Vec<usize>, heads: usize, m: usize) -> FasaConfig {
        FasaConfig::new(c, d, heads, m, Fusion::Max).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(FasaConfig::new(6, vec![1, 2], 1, 3, Fusion::Max).is_ok());
        assert!(FasaConfig::new(5, vec![1, 2], 1, 3, Fusion::Max).is_err());
        assert!(FasaConfig::new(8, vec![1, 2], 3, 3, Fusion::Max).is_err());
        assert!(FasaConfig::new(8, vec![0], 1, 3, Fusion::Max).is_err());
        assert!(FasaConfig::new(8, vec![1], 1, 1, Fusion::Max).is_err());
        assert_eq!(cfg(32, vec![1, 8], 1, 7).window_sides(), vec![7, 49]);
    }

    #[test]
    fn dilation_inverts_window_side() {
        assert_eq!(dilation_for(5, 3).unwrap(), 2);
        assert_eq!(dilation_for(49, 7).unwrap(), 8);
        assert_eq!(dilation_for(7, 7).unwrap(), 1);
        assert!(dilation_for(6, 3).is_err());
        assert!(dilation_for(2, 3).is_err());
    }

    #[test]
    fn window_grid_counts_and_origins() {
        let g = WindowGrid::new(4, 4, 2, 2).unwrap();
        assert_eq!(g.count(), 4);
        let origins: Vec<_> = (0..4).map(|j| g.origin(j)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        let g = WindowGrid::new(56, 56, 49, 7).unwrap();
        assert_eq!((g.down, g.across, g.count()), (2, 2, 4));
        assert!(WindowGrid::new(8, 8, 2, 3).is_err());
    }

    #[test]
    fn dilated_sample_rejects_mismatched_rate() {
        let w = Tensor::zeros(&[5, 5, 1]);
        let err = dilated_sample(&w, 3, 1).unwrap_err().to_string();
        assert!(
            err.contains("S=5") && err.contains("M=3") && err.contains("D=1"),
            "{err}"
        );
        let (grid, rows) = dilated_sample(&w, 3, 2).unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(rows.shape(), &[9, 1]);
    }

    #[test]
    fn fusion_parses() {
        assert_eq!("max".parse::<Fusion>().unwrap(), Fusion::Max);
        assert_eq!("mean".parse::<Fusion>().unwrap(), Fusion::Mean);
        assert!("sum".parse::<Fusion>().is_err());
    }

    #[test]
    fn params_are_named_per_group() {
        let mut store = ParamStore::new();
        let c = cfg(8, vec![1, 2], 2, 3);
        let p = FasaParams::register(&mut store, "blk", &c, &mut Initializer::new(0)).unwrap();
        assert_eq!(store.len(), 7);
        assert_eq!(store.get(&p.wq(1)).unwrap().shape(), &[4, 4]);
        assert_eq!(store.get(&p.wo()).unwrap().shape(), &[8, 8]);
        assert!(FasaParams::register(&mut store, "blk", &c, &mut Initializer::new(0)).is_err());
    }
}
