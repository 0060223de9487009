//! Randomized property suites behind the `check` command.
//!
//! Every property is a pure function of `(seed, trials)` and reports one
//! deterministic line, so repeated runs print identical bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fasa::{self, FasaConfig, FasaParams, Fusion, GroupTrace};
use crate::flops::{formula_macs, Mechanism};
use crate::model::{self, BlockParams, ModelParams, VARIANT_NAMES};
use crate::oracle::{self, deviations, FD_EPSILON};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{io, Tape, Tensor, Var};

pub const DEFAULT_TRIALS: usize = 100;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Smallest fusion margin accepted for finite differences; closer
/// competitors are re-drawn so the max stays differentiable.
pub const FD_MIN_MARGIN: f64 = 1e-4;

/// Reference parameter counts of B0-B3.
pub const REFERENCE_PARAMS: [f64; 4] = [3.0e6, 13.0e6, 24.0e6, 48.0e6];
pub const PARAM_BAND: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Fasa,
    Model,
    Grads,
    Oracles,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fasa" => Scope::Fasa,
            "model" => Scope::Model,
            "grads" => Scope::Grads,
            "oracles" => Scope::Oracles,
            "all" => Scope::All,
            other => return Err(Error::config(format!("unknown check scope `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub trials: usize,
    pub pass: bool,
    pub detail: String,
    /// First failing case, when any.
    pub counterexample: Option<Value>,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} trials={} {}",
            self.name, self.trials, self.detail
        )
    }
}

/// Accumulates trial results for one property.
struct Tally {
    name: &'static str,
    trials: usize,
    worst: f64,
    failure: Option<Value>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            trials: 0,
            worst: 0.0,
            failure: None,
        }
    }

    fn record(&mut self, ok: bool, measure: f64, case: impl FnOnce() -> Value) {
        self.trials += 1;
        self.worst = self.worst.max(measure);
        if !ok && self.failure.is_none() {
            self.failure = Some(case());
        }
    }

    fn finish(self, detail: String) -> Outcome {
        Outcome {
            name: self.name.to_string(),
            trials: self.trials,
            pass: self.failure.is_none(),
            detail,
            counterexample: self.failure,
        }
    }

    fn finish_worst(self, label: &str) -> Outcome {
        let detail = format!("{label}={:.3e}", self.worst);
        self.finish(detail)
    }
}

fn trial_seed(seed: u64, salt: u64, t: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt << 32)
        .wrapping_add(t as u64)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// A random FaSA layer plus input.
#[derive(Debug, Clone)]
pub struct Case {
    pub cfg: FasaConfig,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

impl Case {
    pub fn to_json(&self) -> Value {
        json!({
            "seed": self.seed,
            "batch": self.batch,
            "height": self.h,
            "width": self.w,
            "config": serde_json::to_value(&self.cfg).unwrap_or(Value::Null),
        })
    }

    /// Parameters and input drawn from the case seed.
    pub fn materialize(&self) -> Result<(ParamStore, FasaParams, Tensor)> {
        let mut init = Initializer::new(self.seed);
        let mut store = ParamStore::new();
        // Unit-scale weights keep the attention far from uniform.
        let params = FasaParams::register_with(&mut store, "fasa", &self.cfg, |s| init.normal(s))?;
        let x = init.normal(&[self.batch, self.h, self.w, self.cfg.channels]);
        Ok((store, params, x))
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Small random configuration: `M` in {2, 3}, one or two groups, map sides
/// up to 16. With `divisible` every window side divides the map.
pub fn random_case(seed: u64, divisible: bool, fusion: Option<Fusion>) -> Case {
    let mut init = Initializer::new(seed);
    let rng = init.rng();
    let m = *[2usize, 3].choose(rng).unwrap();
    let groups = rng.gen_range(1..=2);
    let mut dilations = vec![1];
    if groups == 2 {
        dilations.push(2);
    }
    let heads = rng.gen_range(1..=2);
    let head_dim = rng.gen_range(1..=3);
    let channels = groups * heads * head_dim;
    let fusion = fusion.unwrap_or(if rng.gen_bool(0.5) {
        Fusion::Max
    } else {
        Fusion::Mean
    });
    let cfg = FasaConfig::new(channels, dilations, heads, m, fusion).expect("valid random config");
    let unit = cfg.window_sides().into_iter().fold(1, lcm);
    let mut side = || {
        if divisible {
            unit * rng.gen_range(1..=16 / unit)
        } else {
            rng.gen_range(m..=16)
        }
    };
    let (h, w) = (side(), side());
    let batch = rng.gen_range(1..=2);
    Case {
        cfg,
        batch,
        h,
        w,
        seed,
    }
}

fn run_fasa(
    store: &ParamStore,
    params: &FasaParams,
    cfg: &FasaConfig,
    x: Tensor,
    trace: bool,
) -> Result<(Tensor, Vec<GroupTrace>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (y, traces) = fasa::fasa_forward(&mut tape, store, params, cfg, xv, trace)?;
    Ok((tape.value(y).clone(), traces))
}

pub fn key_count(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("fasa.key_count");
    for t in 0..trials {
        let case = random_case(trial_seed(seed, 1, t), false, None);
        let (store, params, x) = case.materialize()?;
        let (_, traces) = run_fasa(&store, &params, &case.cfg, x, true)?;
        let m2 = case.cfg.keys_per_group();
        let n = case.h * case.w;
        let ok = traces.len() == case.cfg.groups()
            && traces.iter().all(|tr| {
                tr.fused_keys.shape()[0] == case.batch * m2
                    && tr.fused_values.shape()[0] == case.batch * m2
                    && tr.attention.iter().flatten().all(|a| a.shape() == [n, m2])
            });
        tally.record(ok, 0.0, || case.to_json());
    }
    Ok(tally.finish("keys=M^2 attention=NxM^2".into()))
}

pub fn fusion_permutation(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("fasa.fusion_permutation");
    for t in 0..trials {
        let s = trial_seed(seed, 2, t);
        let mut init = Initializer::new(s);
        let windows = init.rng().gen_range(1..=9);
        let rows = init.rng().gen_range(1..=9);
        let cols = init.rng().gen_range(1..=4);
        let fusion = if t % 2 == 0 {
            Fusion::Max
        } else {
            Fusion::Mean
        };
        let stack = init.normal(&[windows, rows, cols]);
        let mut order: Vec<usize> = (0..windows).collect();
        order.shuffle(init.rng());
        let inner = rows * cols;
        let mut permuted = Vec::with_capacity(stack.numel());
        for &j in &order {
            permuted.extend_from_slice(&stack.data()[j * inner..(j + 1) * inner]);
        }
        let permuted = Tensor::new(&[windows, rows, cols], permuted)?;
        let mut tape = Tape::new();
        let a = tape.constant(stack);
        let b = tape.constant(permuted);
        let fa = fasa::cross_window_fuse(&mut tape, a, fusion)?;
        let fb = fasa::cross_window_fuse(&mut tape, b, fusion)?;
        let ok = bits_equal(tape.value(fa).data(), tape.value(fb).data());
        tally.record(
            ok,
            0.0,
            || json!({"seed": s, "fusion": fusion.to_string(), "order": order}),
        );
    }
    Ok(tally.finish("bit-identical".into()))
}

fn roll(x: &Tensor, axis: usize, by: usize) -> Tensor {
    let &[b, h, w, c] = x.shape() else {
        unreachable!()
    };
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for bi in 0..b {
        for r in 0..h {
            for col in 0..w {
                let (r2, c2) = if axis == 1 {
                    ((r + by) % h, col)
                } else {
                    (r, (col + by) % w)
                };
                let src = ((bi * h + r) * w + col) * c;
                let dst = ((bi * h + r2) * w + c2) * c;
                out[dst..dst + c].copy_from_slice(&d[src..src + c]);
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn shift_covariance(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("fasa.shift_covariance");
    for t in 0..trials {
        let s = trial_seed(seed, 3, t);
        let mut case = random_case(s, true, None);
        let dilation = case.cfg.dilations[0];
        case.cfg = FasaConfig::new(
            case.cfg.group_channels(),
            vec![dilation],
            case.cfg.heads_per_group,
            case.cfg.sample_side,
            case.cfg.fusion,
        )?;
        let (store, params, x) = case.materialize()?;
        let side = case.cfg.window_side(0);
        let shifted = roll(&x, 1 + t % 2, side);
        let (_, a) = run_fasa(&store, &params, &case.cfg, x, true)?;
        let (_, b) = run_fasa(&store, &params, &case.cfg, shifted, true)?;
        let ok = bits_equal(a[0].fused_keys.data(), b[0].fused_keys.data())
            && bits_equal(a[0].fused_values.data(), b[0].fused_values.data());
        tally.record(ok, 0.0, || case.to_json());
    }
    Ok(tally.finish("fused keys/values bit-identical".into()))
}

pub fn softmax_rows(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("fasa.softmax_rows");
    for t in 0..trials {
        let case = random_case(trial_seed(seed, 4, t), false, None);
        let (store, params, x) = case.materialize()?;
        let (_, traces) = run_fasa(&store, &params, &case.cfg, x, true)?;
        let mut worst = 0.0f64;
        for a in traces.iter().flat_map(|tr| tr.attention.iter().flatten()) {
            let k = a.shape()[1];
            for row in a.data().chunks_exact(k) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        tally.record(worst <= 1e-12, worst, || case.to_json());
    }
    Ok(tally.finish_worst("max_dev"))
}

pub fn channel_locality(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("fasa.channel_locality");
    for t in 0..trials {
        let s = trial_seed(seed, 5, t);
        let mut case = random_case(s, false, None);
        if case.cfg.groups() == 1 {
            let c = case.cfg.channels;
            case.cfg = FasaConfig::new(
                2 * c,
                vec![1, 2],
                case.cfg.heads_per_group,
                case.cfg.sample_side,
                case.cfg.fusion,
            )?;
        }
        let (mut store, params, x) = case.materialize()?;
        // identity output projection exposes the pre-merge group outputs
        store.set(&params.wo(), Tensor::eye(case.cfg.channels))?;
        let g = t % case.cfg.groups();
        let cp = case.cfg.group_channels();
        let mut zeroed = x.clone();
        for px in zeroed.data_mut().chunks_exact_mut(case.cfg.channels) {
            px[g * cp..(g + 1) * cp].iter_mut().for_each(|v| *v = 0.0);
        }
        let (a, _) = run_fasa(&store, &params, &case.cfg, x, false)?;
        let (b, _) = run_fasa(&store, &params, &case.cfg, zeroed, false)?;
        let c = case.cfg.channels;
        let ok = a
            .data()
            .chunks_exact(c)
            .zip(b.data().chunks_exact(c))
            .all(|(pa, pb)| {
                (0..c)
                    .filter(|ch| ch / cp != g)
                    .all(|ch| pa[ch].to_bits() == pb[ch].to_bits())
            });
        tally.record(
            ok,
            0.0,
            || json!({"case": case.to_json(), "zeroed_group": g}),
        );
    }
    Ok(tally.finish("other groups bit-identical".into()))
}

pub fn serialization_round_trip(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("model.serialization_round_trip");
    for t in 0..trials {
        let s = trial_seed(seed, 6, t);
        let mut init = Initializer::new(s);
        let count = init.rng().gen_range(1..=5);
        let mut store = ParamStore::new();
        for i in 0..count {
            let rank = init.rng().gen_range(1..=4);
            let shape: Vec<usize> = (0..rank).map(|_| init.rng().gen_range(1..=4)).collect();
            let mut tensor = init.normal(&shape);
            // exercise special values too
            if i == 0 {
                tensor.data_mut()[0] = [-0.0, f64::MIN_POSITIVE, 1e300, f64::EPSILON][t % 4];
            }
            store.insert(format!("p{i}.w"), tensor)?;
        }
        let mut buf = Vec::new();
        io::write_to(&mut buf, store.iter())?;
        let back = io::read_from(&buf[..])?;
        let mut copy = ParamStore::new();
        for (name, tensor) in back {
            copy.insert(name, tensor)?;
        }
        tally.record(store.bit_identical(&copy), 0.0, || json!({"seed": s}));
    }
    Ok(tally.finish("bit-identical".into()))
}

pub fn determinism(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("model.determinism");
    for t in 0..trials {
        let case = random_case(trial_seed(seed, 7, t), false, None);
        let (store, params, x) = case.materialize()?;
        let (store2, _, x2) = case.materialize()?;
        let (a, _) = run_fasa(&store, &params, &case.cfg, x, false)?;
        let (b, _) = run_fasa(&store2, &params, &case.cfg, x2, false)?;
        let ok = store.bit_identical(&store2) && bits_equal(a.data(), b.data());
        tally.record(ok, 0.0, || case.to_json());
    }
    let b0 = model::load_variant("B0")?;
    let m1 = ModelParams::build(&b0, seed)?;
    let m2 = ModelParams::build(&b0, seed)?;
    let logits = |m: &ModelParams| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let img = Initializer::new(seed).normal(&[1, 32, 32, 3]);
        let x = tape.constant(img);
        let out = model::favit_forward(&mut tape, m, x, &Default::default())?;
        Ok(tape.value(out.logits.expect("full model")).data().to_vec())
    };
    let ok = m1.store.bit_identical(&m2.store) && bits_equal(&logits(&m1)?, &logits(&m2)?);
    tally.record(ok, 0.0, || json!({"variant": "B0", "seed": seed}));
    Ok(tally.finish("bit-identical".into()))
}

pub fn stage_extents(seed: u64) -> Result<Outcome> {
    let mut tally = Tally::new("model.stage_extents");
    let b0 = ModelParams::build(&model::load_variant("B0")?, seed)?;
    for size in [32, 64, 96] {
        let mut tape = Tape::new();
        let x = tape.constant(Initializer::new(seed).normal(&[1, size, size, 3]));
        let out = model::favit_forward(&mut tape, &b0, x, &Default::default())?;
        let shapes: Vec<Vec<usize>> = out
            .pyramid
            .iter()
            .map(|&v| tape.shape(v).to_vec())
            .collect();
        let want: Vec<Vec<usize>> = (0..model::STAGES)
            .map(|s| {
                let side = size >> (s + 2);
                vec![1, side, side, b0.spec.stages[s].channels]
            })
            .collect();
        tally.record(
            shapes == want,
            0.0,
            || json!({"size": size, "shapes": shapes}),
        );
    }
    Ok(tally.finish("H/4 H/8 H/16 H/32".into()))
}

pub fn param_counts(seed: u64) -> Result<Outcome> {
    let mut tally = Tally::new("model.param_counts");
    let mut parts = Vec::new();
    for (name, reference) in VARIANT_NAMES.iter().zip(REFERENCE_PARAMS) {
        let m = ModelParams::build(&model::load_variant(name)?, seed)?;
        let count = model::count_params(&m);
        let dev = (count as f64 - reference).abs() / reference;
        parts.push(format!("{name}={count}"));
        tally.record(
            dev <= PARAM_BAND,
            dev,
            || json!({"variant": name, "count": count}),
        );
    }
    let detail = format!("{} max_dev={:.3}", parts.join(" "), tally.worst);
    Ok(tally.finish(detail))
}

/// Tiny block: two groups (`D = [1, 2]`), `M = 2`, on a map that needs
/// padding for the coarse group.
pub fn tiny_block(seed: u64) -> Result<(ParamStore, BlockParams, Tensor)> {
    let cfg = FasaConfig::new(4, vec![1, 2], 1, 2, Fusion::Max)?;
    let mut store = ParamStore::new();
    let block = BlockParams::standalone(&mut store, "block", cfg, 2, seed)?;
    let mut init = Initializer::new(seed ^ 0x5EED);
    for i in 0..store.len() {
        let shape = store.tensor_at(i).shape().to_vec();
        // scale up so every path contributes at FD resolution
        let t = init.normal(&shape);
        *store.tensor_at_mut(i) = t;
    }
    let x = init.normal(&[1, 4, 4, 4]);
    Ok((store, block, x))
}

fn block_objective(
    store: &ParamStore,
    block: &BlockParams,
    x: Tensor,
    weights: &Tensor,
    trace: bool,
) -> Result<(f64, Tape, [Var; 2], Vec<GroupTrace>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (y, traces) = model::block_forward(&mut tape, store, block, xv, trace)?;
    let r = tape.constant(weights.clone());
    let weighted = tape.mul(y, r)?;
    let loss = tape.sum(weighted)?;
    Ok((tape.value(loss).data()[0], tape, [xv, loss], traces))
}

/// Analytic vs central-difference gradients of a weighted output sum of a
/// full block, over every parameter and the input.
pub fn block_gradients(seed: u64) -> Result<Outcome> {
    let mut tally = Tally::new("grads.fasa_block");
    let mut attempt = 0u64;
    let (store, block, x, weights) = loop {
        let (store, block, x) = tiny_block(seed.wrapping_add(attempt))?;
        let weights = Initializer::new(seed.wrapping_add(attempt) ^ 0xFD).normal(x.shape());
        let (_, _, _, traces) = block_objective(&store, &block, x.clone(), &weights, true)?;
        let margin = traces
            .iter()
            .map(|t| t.fusion_margin)
            .fold(f64::INFINITY, f64::min);
        if margin >= FD_MIN_MARGIN || attempt >= 100 {
            break (store, block, x, weights);
        }
        attempt += 1;
    };

    let (_, mut tape, [input, loss], _) =
        block_objective(&store, &block, x.clone(), &weights, false)?;
    tape.backward(loss)?;
    let bound = tape.param_vars(&store);
    let mut analytic = Vec::new();
    let mut theta = Vec::new();
    for i in 0..store.len() {
        let t = store.tensor_at(i);
        theta.extend_from_slice(t.data());
        match bound
            .iter()
            .find(|(idx, _)| *idx == i)
            .and_then(|(_, v)| tape.grad(*v))
        {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    theta.extend_from_slice(x.data());
    analytic.extend_from_slice(tape.grad(input).expect("input is a leaf"));

    let shapes: Vec<Vec<usize>> = (0..store.len())
        .map(|i| store.tensor_at(i).shape().to_vec())
        .collect();
    let objective = |th: &[f64]| -> Result<f64> {
        let mut s = store.clone();
        let mut off = 0;
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            s.tensor_at_mut(i)
                .data_mut()
                .copy_from_slice(&th[off..off + n]);
            off += n;
        }
        let xi = Tensor::new(x.shape(), th[off..].to_vec())?;
        Ok(block_objective(&s, &block, xi, &weights, false)?.0)
    };
    let report = oracle::fd_check(
        "block",
        objective,
        &theta,
        &analytic,
        FD_EPSILON,
        GRAD_TOLERANCE,
    )?;
    tally.record(report.pass, report.max_rel, || {
        json!({"seed": seed, "attempt": attempt, "max_abs": report.max_abs, "max_rel": report.max_rel})
    });
    let detail = format!("coords={} max_rel_err={:.3e}", theta.len(), report.max_rel);
    Ok(tally.finish(detail))
}

/// Single-window layers (`G = 1`, `D = [1]`, map `M x M`) against dense
/// attention followed by the output projection.
pub fn dense_equivalence(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("oracles.dense_equivalence");
    for t in 0..trials {
        let s = trial_seed(seed, 8, t);
        let m = [3, 5, 7][t % 3];
        let mut init = Initializer::new(s);
        let c = init.rng().gen_range(1..=8);
        let case = Case {
            cfg: FasaConfig::new(c, vec![1], 1, m, Fusion::Max)?,
            batch: 1,
            h: m,
            w: m,
            seed: s,
        };
        let (store, params, x) = case.materialize()?;
        let (got, _) = run_fasa(&store, &params, &case.cfg, x.clone(), false)?;
        let get = |n: String| store.get(&n).expect("registered").clone();
        let flat = x.reshape(&[m * m, c])?;
        let attn = oracle::dense_sa(
            &flat,
            &get(params.wq(0)),
            &get(params.wk(0)),
            &get(params.wv(0)),
            (c as f64).sqrt(),
        )?;
        let want = oracle::dense_projection(&attn, &get(params.wo()))?;
        let (abs, _) = deviations(got.data(), want.data());
        tally.record(abs < EQUIVALENCE_TOLERANCE, abs, || case.to_json());
    }
    Ok(tally.finish_worst("max_abs"))
}

/// Random divisible configurations against the scalar-loop reference.
pub fn brute_force(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("oracles.brute_force");
    for t in 0..trials {
        let fusion = if t % 2 == 0 {
            Fusion::Max
        } else {
            Fusion::Mean
        };
        let case = random_case(trial_seed(seed, 9, t), true, Some(fusion));
        let (store, params, x) = case.materialize()?;
        let want = oracle::brute_force_fasa(&x, &case.cfg, &store, &params)?;
        let (got, _) = run_fasa(&store, &params, &case.cfg, x, false)?;
        let (abs, _) = deviations(got.data(), want.data());
        tally.record(abs < EQUIVALENCE_TOLERANCE, abs, || case.to_json());
    }
    Ok(tally.finish_worst("max_abs"))
}

/// Dense and factorized cost formulas coincide when the map is one window.
pub fn degenerate_cost(seed: u64, trials: usize) -> Result<Outcome> {
    let mut tally = Tally::new("oracles.degenerate_cost");
    let mut init = Initializer::new(trial_seed(seed, 10, 0));
    for _ in 0..trials {
        let m: u64 = init.rng().gen_range(1..=64);
        let c: u64 = init.rng().gen_range(1..=4096);
        let dense = formula_macs(Mechanism::DenseSa, m * m, c, 0)?;
        let fasa = formula_macs(Mechanism::Fasa, m * m, c, m)?;
        tally.record(dense == fasa, 0.0, || json!({"M": m, "C": c}));
    }
    Ok(tally.finish("exact".into()))
}

pub fn run_scope(scope: Scope, seed: u64, trials: usize) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    let all = scope == Scope::All;
    if all || scope == Scope::Fasa {
        out.push(key_count(seed, trials)?);
        out.push(fusion_permutation(seed, trials)?);
        out.push(shift_covariance(seed, trials)?);
        out.push(softmax_rows(seed, trials)?);
        out.push(channel_locality(seed, trials)?);
    }
    if all || scope == Scope::Model {
        out.push(stage_extents(seed)?);
        out.push(param_counts(seed)?);
        out.push(serialization_round_trip(seed, trials)?);
        out.push(determinism(seed, trials)?);
    }
    if all || scope == Scope::Grads {
        out.push(block_gradients(seed)?);
    }
    if all || scope == Scope::Oracles {
        out.push(dense_equivalence(seed, trials)?);
        out.push(brute_force(seed, trials)?);
        out.push(degenerate_cost(seed, trials)?);
    }
    Ok(out)
}

/// Writes the first failing case to `counterexample.json`; returns its
/// path when one was written.
pub fn write_counterexample(out_dir: &Path, outcomes: &[Outcome]) -> Result<Option<PathBuf>> {
    let Some(first) = outcomes.iter().find(|o| !o.pass) else {
        return Ok(None);
    };
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("counterexample.json");
    let body = json!({
        "property": first.name,
        "detail": first.detail,
        "case": first.counterexample,
    });
    fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(Some(path))
}
