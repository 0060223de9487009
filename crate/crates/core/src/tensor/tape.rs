use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::kernels::{self, ConvGeometry, MatRef};
use crate::tensor::{IndexGrid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    MatMulNt {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    MaxWindows {
        a: usize,
        argmax: Vec<u32>,
    },
    MeanWindows {
        a: usize,
        windows: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    GatherRows {
        a: usize,
        index: Vec<Option<usize>>,
    },
    Slice {
        a: usize,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    SpatialMean {
        a: usize,
        spatial: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation eagerly and replays it backwards.
///
/// Shapes are validated at call time. One tape belongs to one thread; the
/// optional multiply-accumulate counter is local to the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: Option<u64>,
    params: HashMap<(u64, usize), Var>,
}

fn rank2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match *s {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a rank-2 tensor, got {s:?}"
        ))),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match dst {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *dst = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Tape whose matmul and convolution calls add to a MAC counter.
    pub fn instrumented() -> Self {
        Tape {
            macs: Some(0),
            ..Tape::default()
        }
    }

    pub fn is_instrumented(&self) -> bool {
        self.macs.is_some()
    }

    /// Multiply-accumulates recorded so far.
    pub fn macs(&self) -> Result<u64> {
        self.macs
            .ok_or_else(|| Error::Contract("MAC instrumentation is disabled on this tape".into()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn count(&mut self, macs: u64) {
        if let Some(total) = self.macs.as_mut() {
            *total += macs;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let key = (store.id(), idx);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let mut value = store.tensor_at(idx).clone();
        value.zero_grad();
        let v = self.leaf(value);
        self.params.insert(key, v);
        Ok(v)
    }

    /// Parameter bindings for `store` as `(param index, var)` pairs.
    pub fn param_vars(&self, store: &ParamStore) -> Vec<(usize, Var)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|((id, _), _)| *id == store.id())
            .map(|(&(_, idx), &v)| (idx, v))
            .collect();
        out.sort_unstable();
        out
    }

    /// Position marker for [`Tape::detach_since`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded at or after `mark`, keeping only the value
    /// of `keep` as a fresh constant. Used to bound memory in forward-only
    /// evaluation; gradients do not flow across the cut.
    pub fn detach_since(&mut self, mark: usize, keep: Var) -> Var {
        let value = if keep.0 >= mark {
            std::mem::replace(&mut self.nodes[keep.0].value, Tensor::scalar(0.0))
        } else {
            self.nodes[keep.0].value.clone()
        };
        self.nodes.truncate(mark);
        self.grads.clear();
        self.params.retain(|_, v| v.0 < mark);
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = rank2("matmul", sa)?;
        let (k2, n) = rank2("matmul", sb)?;
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        self.count((m * k * n) as u64);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = rank2("matmul_nt", sa)?;
        let (n, k2) = rank2("matmul_nt", sb)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), n, k).t(),
            &mut out,
            0.0,
        );
        self.count((m * k * n) as u64);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMulNt { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Scale { a: a.0, factor }, &[a.0]))
    }

    /// Adds a rank-1 bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(
            t,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            &[x.0, bias.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        let data = kernels::softmax_rows(self.value(a).data(), cols);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Softmax { a: a.0 }, &[a.0]))
    }

    fn window_stack_dims(&self, op: &'static str, a: Var) -> Result<(usize, Vec<usize>)> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::Contract(format!(
                "{op} expects [windows, ...], got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::EmptyFusion);
        }
        Ok((s[0], s[1..].to_vec()))
    }

    /// Elementwise maximum over the leading (window) axis.
    pub fn max_reduce_over_windows(&mut self, a: Var) -> Result<Var> {
        let (windows, rest) = self.window_stack_dims("max_reduce_over_windows", a)?;
        let inner = rest.iter().product();
        let (data, argmax) = kernels::max_over_windows(self.value(a).data(), windows, inner);
        let t = Tensor::new(&rest, data)?;
        Ok(self.push(t, Op::MaxWindows { a: a.0, argmax }, &[a.0]))
    }

    /// Elementwise arithmetic mean over the leading (window) axis.
    pub fn mean_reduce_over_windows(&mut self, a: Var) -> Result<Var> {
        let (windows, rest) = self.window_stack_dims("mean_reduce_over_windows", a)?;
        let inner = rest.iter().product();
        let data = kernels::mean_over_windows(self.value(a).data(), windows, inner);
        let t = Tensor::new(&rest, data)?;
        Ok(self.push(t, Op::MeanWindows { a: a.0, windows }, &[a.0]))
    }

    /// NHWC convolution with an HWIO kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        let t = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        self.count(geom.macs());
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
            },
            &[x.0, w.0],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            c,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(self.shape(x), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        Ok(self.push(t, op, &[x.0, gain.0, bias.0]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Gelu { a: a.0 }, &[a.0]))
    }

    /// Picks rows of a matrix; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (n, c) = rank2("gather_rows", self.shape(a))?;
        if index.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one row".into()));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; index.len() * c];
        for (dst, ix) in data.chunks_exact_mut(c).zip(&index) {
            if let Some(r) = *ix {
                if r >= n {
                    return Err(Error::Index {
                        row: r,
                        col: 0,
                        rows: n,
                        cols: c,
                    });
                }
                dst.copy_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::new(&[index.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { a: a.0, index }, &[a.0]))
    }

    /// Gathers grid positions from each batch item of a `[B, H, W, C]` map.
    ///
    /// Output is `[B * |grid|, C]`, batch-major, rows in grid order.
    pub fn gather(&mut self, x: Var, grid: &IndexGrid) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [batch, h, w, c] = s[..] else {
            return Err(Error::Contract(format!(
                "gather expects [B, H, W, C], got {s:?}"
            )));
        };
        if let Some(&(row, col)) = grid.offsets().iter().find(|&&(r, cc)| r >= h || cc >= w) {
            return Err(Error::Index {
                row,
                col,
                rows: h,
                cols: w,
            });
        }
        let index = (0..batch)
            .flat_map(|b| {
                grid.offsets()
                    .iter()
                    .map(move |&(r, cc)| Some(b * h * w + r * w + cc))
            })
            .collect();
        let flat = self.reshape(x, &[batch * h * w, c])?;
        self.gather_rows(flat, index)
    }

    /// Rectangular block of a matrix.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (n, c) = rank2("slice", self.shape(a))?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > n || cols.end > c {
            return Err(Error::Contract(format!(
                "slice {rows:?} x {cols:?} outside a {n}x{c} matrix"
            )));
        }
        let src = self.value(a).data();
        let width = cols.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows.clone() {
            data.extend_from_slice(&src[r * c + cols.start..r * c + cols.end]);
        }
        let t = Tensor::new(&[rows.len(), width], data)?;
        Ok(self.push(t, Op::Slice { a: a.0, rows, cols }, &[a.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let (n, _) = rank2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = rank2("concat_cols", self.shape(p))?;
            if pn != n {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let t = Tensor::new(&[n, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatCols { parts: ids.clone() }, &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let (_, c) = rank2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pn, pc) = rank2("concat_rows", self.shape(p))?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += pn;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatRows { parts: ids.clone() }, &ids))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, &[a.0]))
    }

    /// Global average over the spatial axes of `[B, H, W, C]`, giving `[B, C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [batch, h, w, c] = s[..] else {
            return Err(Error::Contract(format!(
                "spatial_mean expects [B, H, W, C], got {s:?}"
            )));
        };
        let spatial = h * w;
        let src = self.value(a).data();
        let mut data = vec![0.0; batch * c];
        for b in 0..batch {
            let dst = &mut data[b * c..(b + 1) * c];
            for p in 0..spatial {
                let row = &src[(b * spatial + p) * c..(b * spatial + p + 1) * c];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= spatial as f64);
        }
        let t = Tensor::new(&[batch, c], data)?;
        Ok(self.push(t, Op::SpatialMean { a: a.0, spatial }, &[a.0]))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = rank2("cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!("label {bad} outside {k} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// Reverse sweep from a scalar root; gradients are readable via
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, target: usize, delta: Vec<f64>) {
        if self.nodes[target].needs_grad {
            add_into(&mut self.grads[target], delta);
        }
    }

    fn wants(&self, target: usize) -> bool {
        self.nodes[target].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                let gm = MatRef::new(g, m, n);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        gm,
                        MatRef::new(nodes[b].value.data(), k, n).t(),
                        &mut da,
                        0.0,
                    );
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        MatRef::new(nodes[a].value.data(), m, k).t(),
                        gm,
                        &mut db,
                        0.0,
                    );
                    out.push((b, db));
                }
            }
            &Op::MatMulNt { a, b } => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[0];
                let gm = MatRef::new(g, m, n);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(gm, MatRef::new(nodes[b].value.data(), n, k), &mut da, 0.0);
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(
                        gm.t(),
                        MatRef::new(nodes[a].value.data(), m, k),
                        &mut db,
                        0.0,
                    );
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                out.push((a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            &Op::Scale { a, factor } => out.push((a, g.iter().map(|v| v * factor).collect())),
            &Op::AddBias { x, bias } => {
                let c = nodes[bias].value.numel();
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((x, g.to_vec()));
                out.push((bias, db));
            }
            &Op::Reshape { a } => out.push((a, g.to_vec())),
            &Op::Softmax { a } => {
                let y = &nodes[i].value;
                let cols = *y.shape().last().unwrap();
                out.push((a, kernels::softmax_rows_backward(y.data(), g, cols)));
            }
            Op::MaxWindows { a, argmax } => {
                let inner = g.len();
                let mut da = vec![0.0; nodes[*a].value.numel()];
                for (e, (&w, &gv)) in argmax.iter().zip(g).enumerate() {
                    da[w as usize * inner + e] += gv;
                }
                out.push((*a, da));
            }
            &Op::MeanWindows { a, windows } => {
                let inv = 1.0 / windows as f64;
                let slab: Vec<f64> = g.iter().map(|v| v * inv).collect();
                out.push((a, slab.repeat(windows)));
            }
            &Op::Conv2d { x, w, geom } => {
                let gm = MatRef::new(g, geom.out_rows(), geom.cout);
                let cols = kernels::im2col(nodes[x].value.data(), &geom);
                if self.wants(w) {
                    let mut dw = vec![0.0; geom.patch_len() * geom.cout];
                    kernels::gemm(
                        MatRef::new(&cols, geom.out_rows(), geom.patch_len()).t(),
                        gm,
                        &mut dw,
                        0.0,
                    );
                    out.push((w, dw));
                }
                if self.wants(x) {
                    let mut dcols = cols;
                    kernels::gemm(
                        gm,
                        MatRef::new(nodes[w].value.data(), geom.patch_len(), geom.cout).t(),
                        &mut dcols,
                        0.0,
                    );
                    out.push((x, kernels::col2im(&dcols, &geom)));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = nodes[*gain].value.data();
                let (dx, dg, db) = kernels::layer_norm_backward(xhat, inv_std, gv, g, gv.len());
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            &Op::Gelu { a } => {
                let x = nodes[a].value.data();
                out.push((
                    a,
                    x.iter()
                        .zip(g)
                        .map(|(&x, gv)| gv * kernels::gelu_derivative(x))
                        .collect(),
                ));
            }
            Op::GatherRows { a, index } => {
                let c = nodes[*a].value.shape()[1];
                let mut da = vec![0.0; nodes[*a].value.numel()];
                for (row, ix) in g.chunks_exact(c).zip(index) {
                    if let Some(r) = *ix {
                        da[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                out.push((*a, da));
            }
            Op::Slice { a, rows, cols } => {
                let c = nodes[*a].value.shape()[1];
                let mut da = vec![0.0; nodes[*a].value.numel()];
                for (r, row) in rows.clone().zip(g.chunks_exact(cols.len())) {
                    da[r * c + cols.start..r * c + cols.end].copy_from_slice(row);
                }
                out.push((*a, da));
            }
            Op::ConcatCols { parts } => {
                let total = nodes[i].value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let (n, wd) = (nodes[p].value.shape()[0], nodes[p].value.shape()[1]);
                    let mut dp = Vec::with_capacity(n * wd);
                    for r in 0..n {
                        dp.extend_from_slice(&g[r * total + start..r * total + start + wd]);
                    }
                    out.push((p, dp));
                    start += wd;
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    out.push((p, g[start..start + len].to_vec()));
                    start += len;
                }
            }
            &Op::Sum { a } => out.push((a, vec![g[0]; nodes[a].value.numel()])),
            &Op::SpatialMean { a, spatial } => {
                let c = nodes[i].value.shape()[1];
                let inv = 1.0 / spatial as f64;
                let mut da = Vec::with_capacity(nodes[a].value.numel());
                for row in g.chunks_exact(c) {
                    let scaled: Vec<f64> = row.iter().map(|v| v * inv).collect();
                    for _ in 0..spatial {
                        da.extend_from_slice(&scaled);
                    }
                }
                out.push((a, da));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = nodes[*logits].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] -= scale;
                }
                out.push((*logits, dl));
            }
        }
        for (target, delta) in out {
            self.send(target, delta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_trivial_cases() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn mac_counter_only_when_instrumented() {
        let mut plain = Tape::new();
        assert!(plain.macs().is_err());

        let mut tape = Tape::instrumented();
        let a = tape.leaf(Tensor::zeros(&[4, 5]));
        let b = tape.leaf(Tensor::zeros(&[5, 3]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs().unwrap(), 60);
        let x = plain.leaf(Tensor::zeros(&[1, 1]));
        plain.matmul(x, x).unwrap();
        assert!(plain.macs().is_err());
    }

    #[test]
    fn backward_of_sum_and_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 4.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(-7.0));
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-7.0]);
        assert_eq!(tape.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn max_fusion_routes_gradient_to_first_argmax() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[3, 1, 2], &[1.0, 2.0, 3.0, 2.0, 3.0, 0.0]));
        let y = tape.max_reduce_over_windows(s).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_fusion_spreads_gradient() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 0.0]));
        let y = tape.mean_reduce_over_windows(s).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[0.5; 4]);
    }

    #[test]
    fn gather_reports_offending_offset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 1]));
        let grid = IndexGrid::new(3, 3, vec![(0, 0), (2, 1)]).unwrap();
        let err = tape.gather(x, &grid).unwrap_err();
        assert!(err.to_string().contains("(2, 1)"), "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn detach_keeps_value_and_counter() {
        let mut tape = Tape::instrumented();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let mark = tape.mark();
        let b = tape.matmul(a, a).unwrap();
        let c = tape.scale(b, 2.0).unwrap();
        let kept = tape.detach_since(mark, c);
        assert_eq!(tape.len(), mark + 1);
        assert_eq!(tape.value(kept).data(), &[4.0; 4]);
        assert_eq!(tape.macs().unwrap(), 8);
    }
}
