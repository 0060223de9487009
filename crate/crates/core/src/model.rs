//! The four-stage FaViT backbone and its B0-B3 variants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fasa::{self, FasaConfig, FasaParams, Fusion, GroupTrace, DEFAULT_SAMPLE_SIDE};
use crate::params::{Initializer, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

pub const STAGES: usize = 4;
pub const DEFAULT_CLASSES: usize = 1000;
pub const PATCH_KERNEL: usize = 7;

/// One stage of an architecture variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Total spatial reduction of the embedding that opens the stage.
    pub patch_size: usize,
    pub channels: usize,
    /// Heads inside each dilation group.
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    pub dilations: Vec<usize>,
}

/// An architecture variant: four stages plus mechanism-wide settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_sample_side")]
    pub sample_side: usize,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_sample_side() -> usize {
    DEFAULT_SAMPLE_SIDE
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

fn default_in_channels() -> usize {
    3
}

fn stage(patch: usize, c: usize, h: usize, e: usize, b: usize, d: &[usize]) -> StageSpec {
    StageSpec {
        patch_size: patch,
        channels: c,
        heads: h,
        mlp_ratio: e,
        blocks: b,
        dilations: d.to_vec(),
    }
}

pub const VARIANT_NAMES: [&str; 4] = ["B0", "B1", "B2", "B3"];

/// Built-in architecture table.
pub fn load_variant(name: &str) -> Result<VariantSpec> {
    let (widths, blocks): ([usize; 4], [usize; 4]) = match name {
        "B0" => ([32, 64, 128, 256], [2, 2, 6, 2]),
        "B1" => ([64, 128, 256, 512], [2, 2, 6, 2]),
        "B2" => ([64, 128, 256, 512], [2, 3, 18, 3]),
        "B3" => ([96, 192, 384, 768], [2, 3, 14, 3]),
        other => return Err(Error::UnknownVariant(other.to_string())),
    };
    let heads = [1, 2, 4, 8];
    let ratios = [8, 6, 4, 4];
    let dilations: [&[usize]; 4] = [&[1, 8], &[1, 4], &[1, 2], &[1]];
    let patches = [4, 2, 2, 2];
    let stages = (0..STAGES)
        .map(|s| {
            stage(
                patches[s],
                widths[s],
                heads[s],
                ratios[s],
                blocks[s],
                dilations[s],
            )
        })
        .collect();
    Ok(VariantSpec {
        name: name.to_string(),
        stages,
        sample_side: DEFAULT_SAMPLE_SIDE,
        fusion: Fusion::Max,
        num_classes: DEFAULT_CLASSES,
        in_channels: 3,
    })
}

impl VariantSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: VariantSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_config(path: impl AsRef<Path>) -> Result<Self> {
        VariantSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("variant spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::config(format!(
                "expected {STAGES} stages, found {}",
                self.stages.len()
            )));
        }
        let patches: Vec<usize> = self.stages.iter().map(|s| s.patch_size).collect();
        if patches != [4, 2, 2, 2] {
            return Err(Error::config(format!(
                "stage patch sizes must be [4, 2, 2, 2], got {patches:?}"
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config(
                "class and input channel counts must be positive",
            ));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.mlp_ratio == 0 {
                return Err(Error::config(format!(
                    "stage {} has no blocks or MLP width",
                    i + 1
                )));
            }
            self.fasa_config(i)?;
        }
        Ok(())
    }

    /// Mechanism settings shared by every block of stage `s` (0-based).
    pub fn fasa_config(&self, s: usize) -> Result<FasaConfig> {
        let st = &self.stages[s];
        FasaConfig::new(
            st.channels,
            st.dilations.clone(),
            st.heads,
            self.sample_side,
            self.fusion,
        )
    }

    /// Cumulative downsampling factor at the output of stage `s` (0-based).
    pub fn reduction(&self, s: usize) -> usize {
        self.stages[..=s].iter().map(|st| st.patch_size).product()
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }
}

/// Parameter names of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    prefix: String,
    pub attn: FasaParams,
    pub cfg: FasaConfig,
    pub hidden: usize,
}

impl BlockParams {
    fn register(
        store: &mut ParamStore,
        prefix: String,
        cfg: FasaConfig,
        mlp_ratio: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let c = cfg.channels;
        let hidden = mlp_ratio * c;
        store.insert(format!("{prefix}.norm1.gain"), Tensor::full(&[c], 1.0))?;
        store.insert(format!("{prefix}.norm1.bias"), Tensor::zeros(&[c]))?;
        let attn = FasaParams::register(store, &format!("{prefix}.attn"), &cfg, init)?;
        store.insert(format!("{prefix}.norm2.gain"), Tensor::full(&[c], 1.0))?;
        store.insert(format!("{prefix}.norm2.bias"), Tensor::zeros(&[c]))?;
        store.insert(
            format!("{prefix}.mlp.expand"),
            init.trunc_normal(&[c, hidden], INIT_STD),
        )?;
        store.insert(
            format!("{prefix}.mlp.contract"),
            init.trunc_normal(&[hidden, c], INIT_STD),
        )?;
        Ok(BlockParams {
            prefix,
            attn,
            cfg,
            hidden,
        })
    }

    /// Standalone block in a fresh store, for tests and tooling.
    pub fn standalone(
        store: &mut ParamStore,
        prefix: &str,
        cfg: FasaConfig,
        mlp_ratio: usize,
        seed: u64,
    ) -> Result<Self> {
        BlockParams::register(
            store,
            prefix.to_string(),
            cfg,
            mlp_ratio,
            &mut Initializer::new(seed),
        )
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Names of the attention and MLP weights (everything but the norms).
    pub fn mixing_weights(&self) -> Vec<String> {
        let mut v = self.attn.names();
        v.push(self.name("mlp.expand"));
        v.push(self.name("mlp.contract"));
        v
    }
}

/// Every tensor of a FaViT model plus the layout that names them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub store: ParamStore,
    pub spec: VariantSpec,
    pub blocks: Vec<Vec<BlockParams>>,
}

impl ModelParams {
    /// Creates all tensors in a fixed order from a seeded generator.
    pub fn build(spec: &VariantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let c1 = spec.stages[0].channels;
        let cin = spec.in_channels;
        store.insert(
            "patch_embed.conv.weight",
            init.trunc_normal(&[PATCH_KERNEL, PATCH_KERNEL, cin, c1], INIT_STD),
        )?;
        store.insert("patch_embed.conv.bias", Tensor::zeros(&[c1]))?;
        store.insert(
            "patch_embed.proj.weight",
            init.trunc_normal(&[2, 2, c1, c1], INIT_STD),
        )?;
        store.insert("patch_embed.proj.bias", Tensor::zeros(&[c1]))?;

        let mut blocks = Vec::with_capacity(STAGES);
        for (s, st) in spec.stages.iter().enumerate() {
            if s > 0 {
                let prev = spec.stages[s - 1].channels;
                store.insert(
                    format!("downsample.{s}.weight"),
                    init.trunc_normal(&[2, 2, prev, st.channels], INIT_STD),
                )?;
                store.insert(
                    format!("downsample.{s}.bias"),
                    Tensor::zeros(&[st.channels]),
                )?;
            }
            let cfg = spec.fasa_config(s)?;
            let stage_blocks = (0..st.blocks)
                .map(|b| {
                    BlockParams::register(
                        &mut store,
                        format!("stages.{s}.blocks.{b}"),
                        cfg.clone(),
                        st.mlp_ratio,
                        &mut init,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(stage_blocks);
            store.insert(
                format!("stages.{s}.norm.gain"),
                Tensor::full(&[st.channels], 1.0),
            )?;
            store.insert(
                format!("stages.{s}.norm.bias"),
                Tensor::zeros(&[st.channels]),
            )?;
        }
        let c4 = spec.stages[STAGES - 1].channels;
        store.insert(
            "head.weight",
            init.trunc_normal(&[c4, spec.num_classes], INIT_STD),
        )?;
        store.insert("head.bias", Tensor::zeros(&[spec.num_classes]))?;
        Ok(ModelParams {
            store,
            spec: spec.clone(),
            blocks,
        })
    }
}

/// Exact scalar parameter count of a model.
pub fn count_params(model: &ModelParams) -> usize {
    model.store.count()
}

/// Overlapping 7x7 stride-2 convolution followed by a 2x2 stride-2
/// projection; quarters both spatial extents.
pub fn patch_embed(tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
    let &[_, h, w, _] = tape.shape(image) else {
        return Err(Error::Contract(format!(
            "patch_embed expects [B, H, W, C], got {:?}",
            tape.shape(image)
        )));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::config(format!(
            "image extents {h}x{w} are not divisible by 4"
        )));
    }
    let k = tape.param(store, "patch_embed.conv.weight")?;
    let b = tape.param(store, "patch_embed.conv.bias")?;
    let x = tape.conv2d(image, k, 2, PATCH_KERNEL / 2)?;
    let x = tape.add_bias(x, b)?;
    let k = tape.param(store, "patch_embed.proj.weight")?;
    let b = tape.param(store, "patch_embed.proj.bias")?;
    let x = tape.conv2d(x, k, 2, 0)?;
    tape.add_bias(x, b)
}

/// `y = x + FaSA(norm1(x))`, then `y + MLP(norm2(y))`.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    x: Var,
    trace: bool,
) -> Result<(Var, Vec<GroupTrace>)> {
    let shape = tape.shape(x).to_vec();
    let c = block.cfg.channels;
    if shape.len() != 4 || shape[3] != c {
        return Err(Error::config(format!(
            "block expects [B, H, W, {c}], got {shape:?}"
        )));
    }
    let rows = shape[..3].iter().product();

    let g1 = tape.param(store, &block.name("norm1.gain"))?;
    let b1 = tape.param(store, &block.name("norm1.bias"))?;
    let normed = tape.layer_norm(x, g1, b1)?;
    let (attn, traces) = fasa::fasa_forward(tape, store, &block.attn, &block.cfg, normed, trace)?;
    let y = tape.add(x, attn)?;

    let g2 = tape.param(store, &block.name("norm2.gain"))?;
    let b2 = tape.param(store, &block.name("norm2.bias"))?;
    let normed = tape.layer_norm(y, g2, b2)?;
    let flat = tape.reshape(normed, &[rows, c])?;
    let expand = tape.param(store, &block.name("mlp.expand"))?;
    let contract = tape.param(store, &block.name("mlp.contract"))?;
    let hidden = tape.matmul(flat, expand)?;
    let hidden = tape.gelu(hidden)?;
    let mlp = tape.matmul(hidden, contract)?;
    let mlp = tape.reshape(mlp, &shape)?;
    Ok((tape.add(y, mlp)?, traces))
}

/// 2x2 stride-2 convolution into the channel width of stage `s` (1-based
/// index of the receiving stage, 1..=3).
pub fn downsample(tape: &mut Tape, store: &ParamStore, s: usize, x: Var) -> Result<Var> {
    let &[_, h, w, _] = tape.shape(x) else {
        return Err(Error::Contract(format!(
            "downsample expects [B, H, W, C], got {:?}",
            tape.shape(x)
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("cannot halve odd extents {h}x{w}")));
    }
    let k = tape.param(store, &format!("downsample.{s}.weight"))?;
    let b = tape.param(store, &format!("downsample.{s}.bias"))?;
    let y = tape.conv2d(x, k, 2, 0)?;
    tape.add_bias(y, b)
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Detach after every block to bound memory; no gradients flow.
    pub inference: bool,
    /// Record group traces of block `(stage, block)` (0-based).
    pub trace_block: Option<(usize, usize)>,
    /// Stop after this many stages (1..=4); logits are skipped when < 4.
    pub stop_after_stage: Option<usize>,
}

#[derive(Debug)]
pub struct FaVitOutput {
    /// Stage outputs `F_1..F_4` (fewer if stopped early).
    pub pyramid: Vec<Var>,
    pub logits: Option<Var>,
    pub traces: Vec<GroupTrace>,
}

pub fn favit_forward(
    tape: &mut Tape,
    model: &ModelParams,
    image: Var,
    opts: &ForwardOptions,
) -> Result<FaVitOutput> {
    let spec = &model.spec;
    let store = &model.store;
    let &[_, h, w, cin] = tape.shape(image) else {
        return Err(Error::Contract(format!(
            "favit_forward expects [B, H, W, C], got {:?}",
            tape.shape(image)
        )));
    };
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!(
            "image extents {h}x{w} are not divisible by 32"
        )));
    }
    if cin != spec.in_channels {
        return Err(Error::config(format!(
            "image has {cin} channels, model expects {}",
            spec.in_channels
        )));
    }
    let stages = opts.stop_after_stage.unwrap_or(STAGES).clamp(1, STAGES);
    let mut x = patch_embed(tape, store, image)?;
    let mut pyramid = Vec::with_capacity(stages);
    let mut traces = Vec::new();
    for s in 0..stages {
        if s > 0 {
            x = downsample(tape, store, s, x)?;
        }
        for (b, block) in model.blocks[s].iter().enumerate() {
            let mark = tape.mark();
            let trace = opts.trace_block == Some((s, b));
            let (y, t) = block_forward(tape, store, block, x, trace)?;
            traces.extend(t);
            x = if opts.inference {
                tape.detach_since(mark, y)
            } else {
                y
            };
        }
        let g = tape.param(store, &format!("stages.{s}.norm.gain"))?;
        let bias = tape.param(store, &format!("stages.{s}.norm.bias"))?;
        x = tape.layer_norm(x, g, bias)?;
        pyramid.push(x);
    }
    let logits = if stages == STAGES {
        let pooled = tape.spatial_mean(x)?;
        let wh = tape.param(store, "head.weight")?;
        let bh = tape.param(store, "head.bias")?;
        let l = tape.matmul(pooled, wh)?;
        Some(tape.add_bias(l, bh)?)
    } else {
        None
    };
    Ok(FaVitOutput {
        pyramid,
        logits,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_load() {
        let b0 = load_variant("B0").unwrap();
        let s1 = &b0.stages[0];
        assert_eq!(
            (
                s1.channels,
                s1.heads,
                s1.mlp_ratio,
                s1.blocks,
                s1.dilations.clone()
            ),
            (32, 1, 8, 2, vec![1, 8])
        );
        let s3 = &load_variant("B3").unwrap().stages[2];
        assert_eq!(
            (
                s3.channels,
                s3.heads,
                s3.mlp_ratio,
                s3.blocks,
                s3.dilations.clone()
            ),
            (384, 4, 4, 14, vec![1, 2])
        );
        let s4 = &load_variant("B2").unwrap().stages[3];
        assert_eq!(
            (
                s4.channels,
                s4.heads,
                s4.mlp_ratio,
                s4.blocks,
                s4.dilations.clone()
            ),
            (512, 8, 4, 3, vec![1])
        );
        assert!(matches!(load_variant("BX"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn every_variant_validates_and_doubles_width() {
        for name in VARIANT_NAMES {
            let v = load_variant(name).unwrap();
            v.validate().unwrap();
            for s in 1..STAGES {
                assert_eq!(v.stages[s].channels, 2 * v.stages[s - 1].channels, "{name}");
            }
            assert_eq!(
                (0..4).map(|s| v.reduction(s)).collect::<Vec<_>>(),
                vec![4, 8, 16, 32]
            );
        }
    }

    #[test]
    fn json_config_round_trips() {
        let v = load_variant("B1").unwrap();
        assert_eq!(VariantSpec::from_json(&v.to_json()).unwrap(), v);
        let mut broken = v.clone();
        broken.stages[0].channels = 33;
        assert!(VariantSpec::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn odd_extents_are_rejected() {
        let spec = load_variant("B0").unwrap();
        let model = ModelParams::build(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[1, 48, 48, 3]));
        assert!(favit_forward(&mut tape, &model, img, &ForwardOptions::default()).is_err());
        let odd = tape.constant(Tensor::zeros(&[1, 7, 7, 64]));
        assert!(downsample(&mut tape, &model.store, 2, odd).is_err());
        let img = tape.constant(Tensor::zeros(&[1, 30, 30, 3]));
        assert!(patch_embed(&mut tape, &model.store, img).is_err());
    }
}
