use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;
use crate::vit::ModelConfig;

/// A model parameter. Values are always exactly representable as `f32`, so
/// checkpoints (which store `f32`) round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Param(Tensor);

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param(snap_f32(value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    /// Replaces the value, keeping the shape.
    pub fn assign(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.0.shape() {
            return Err(Error::shape("Param::assign", self.0.shape(), value.shape()));
        }
        self.0 = snap_f32(value);
        Ok(())
    }
}

fn snap_f32(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`; the layer computes `x · W + b`.
    pub weight: Param,
    pub bias: Option<Param>,
    pub weight_quant: Option<QuantParams>,
}

impl Linear {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(normal(rng, &[fan_in, fan_out], std)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[fan_out]))),
            weight_quant: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[dim], 1.0)),
            beta: Param::new(Tensor::zeros(&[dim])),
        }
    }
}

/// Activation quantizers inside one encoder block. Every linear layer input
/// is quantized, plus the post-softmax attention probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActQuant {
    pub qkv_in: QuantParams,
    pub attn_probs: QuantParams,
    pub proj_in: QuantParams,
    pub fc1_in: QuantParams,
    pub fc2_in: QuantParams,
}

impl BlockActQuant {
    pub const SITES: [&'static str; 5] = ["qkv_in", "attn_probs", "proj_in", "fc1_in", "fc2_in"];

    pub fn sites(&self) -> [&QuantParams; 5] {
        [
            &self.qkv_in,
            &self.attn_probs,
            &self.proj_in,
            &self.fc1_in,
            &self.fc2_in,
        ]
    }
}

/// The six linear layers of a block, in the order their outputs are reported.
pub const BLOCK_LAYERS: [&str; 6] = ["q", "k", "v", "proj", "fc1", "fc2"];

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub act_quant: Option<BlockActQuant>,
}

impl BlockParams {
    fn init(rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        Self {
            ln1: LayerNormParams::init(d),
            q: Linear::init(rng, d, d, false),
            k: Linear::init(rng, d, d, false),
            v: Linear::init(rng, d, d, false),
            proj: Linear::init(rng, d, d, false),
            ln2: LayerNormParams::init(d),
            fc1: Linear::init(rng, d, h, true),
            fc2: Linear::init(rng, h, d, true),
            act_quant: None,
        }
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.proj, &self.fc1, &self.fc2]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.proj,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    /// Every trainable tensor of the block with its local name, in a fixed
    /// order shared by [`BlockParams::params_mut`].
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("ln1.gamma".to_string(), &self.ln1.gamma),
            ("ln1.beta".to_string(), &self.ln1.beta),
        ];
        for (name, lin) in BLOCK_LAYERS.iter().zip(self.linears()) {
            out.push((format!("{name}.weight"), &lin.weight));
            if let Some(b) = &lin.bias {
                out.push((format!("{name}.bias"), b));
            }
            if *name == "proj" {
                out.push(("ln2.gamma".to_string(), &self.ln2.gamma));
                out.push(("ln2.beta".to_string(), &self.ln2.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self {
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            fc1,
            fc2,
            ..
        } = self;
        let mut out = vec![&mut ln1.gamma, &mut ln1.beta];
        for lin in [q, k, v] {
            out.push(&mut lin.weight);
            out.extend(lin.bias.as_mut());
        }
        out.push(&mut proj.weight);
        out.extend(proj.bias.as_mut());
        out.push(&mut ln2.gamma);
        out.push(&mut ln2.beta);
        for lin in [fc1, fc2] {
            out.push(&mut lin.weight);
            out.extend(lin.bias.as_mut());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    FullPrecision,
    /// Weights pass through fake quantization on every forward; activation
    /// sites do too wherever quantizers are present.
    FakeQuantized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ModelConfig,
    pub embed: Linear,
    pub embed_in_quant: Option<QuantParams>,
    pub pos: Option<Param>,
    pub pos_quant: Option<QuantParams>,
    pub blocks: Vec<BlockParams>,
    pub head: Linear,
    pub head_in_quant: Option<QuantParams>,
    pub mode: Mode,
}

impl ViTModel {
    /// Random full-precision initialization.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let embed = Linear::init(rng, config.patch_dim(), d, true);
        let pos = config
            .pos_embed
            .then(|| Param::new(normal(rng, &[config.tokens(), d], 0.02)));
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(rng, config))
            .collect();
        let head = Linear::init(rng, d, config.classes, true);
        Ok(Self {
            config: config.clone(),
            embed,
            embed_in_quant: None,
            pos,
            pos_quant: None,
            blocks,
            head,
            head_in_quant: None,
            mode: Mode::FullPrecision,
        })
    }

    pub fn is_quantized(&self) -> bool {
        self.mode == Mode::FakeQuantized
    }

    /// Structural checks: block count, shapes, and quantizer presence.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.blocks {
            return Err(Error::contract(format!(
                "{} blocks for a {}-block config",
                self.blocks.len(),
                c.blocks
            )));
        }
        let d = c.embed_dim;
        let expect = |name: &str, p: &Param, shape: &[usize]| -> Result<()> {
            if p.shape() != shape {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
            Ok(())
        };
        let linear = |name: &str, l: &Linear, i: usize, o: usize, bias: bool| -> Result<()> {
            expect(&format!("{name}.weight"), &l.weight, &[i, o])?;
            match (&l.bias, bias) {
                (Some(b), true) => expect(&format!("{name}.bias"), b, &[o]),
                (None, false) => Ok(()),
                _ => Err(Error::Contract(format!("{name}: unexpected bias layout"))),
            }
        };
        linear("embed", &self.embed, c.patch_dim(), d, true)?;
        match (&self.pos, c.pos_embed) {
            (Some(p), true) => expect("pos", p, &[c.tokens(), d])?,
            (None, false) => {}
            _ => return Err(Error::contract("positional embedding presence disagrees with config")),
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for ln in [&b.ln1, &b.ln2] {
                expect(&format!("blocks.{i}.ln.gamma"), &ln.gamma, &[d])?;
                expect(&format!("blocks.{i}.ln.beta"), &ln.beta, &[d])?;
            }
            for (name, l) in ["q", "k", "v", "proj"].iter().zip([&b.q, &b.k, &b.v, &b.proj]) {
                linear(&format!("blocks.{i}.{name}"), l, d, d, false)?;
            }
            linear(&format!("blocks.{i}.fc1"), &b.fc1, d, c.mlp_hidden, true)?;
            linear(&format!("blocks.{i}.fc2"), &b.fc2, c.mlp_hidden, d, true)?;
        }
        linear("head", &self.head, d, c.classes, true)?;

        if self.is_quantized() {
            let missing = self.all_linears().into_iter().any(|l| l.weight_quant.is_none())
                || (self.pos.is_some() && self.pos_quant.is_none());
            if missing {
                return Err(Error::contract("quantized model has a weight without quantizer"));
            }
        }
        Ok(())
    }

    pub fn all_linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.extend(b.linears());
        }
        out.push(&self.head);
        out
    }

    /// Every parameter with its fully qualified name, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![("embed.weight".to_string(), &self.embed.weight)];
        if let Some(b) = &self.embed.bias {
            out.push(("embed.bias".to_string(), b));
        }
        if let Some(p) = &self.pos {
            out.push(("pos".to_string(), p));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, p) in block.params() {
                out.push((format!("blocks.{i}.{name}"), p));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".to_string(), b));
        }
        out
    }

    /// Mutable view in the same order as [`ViTModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embed.weight];
        out.extend(self.embed.bias.as_mut());
        out.extend(self.pos.as_mut());
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        out.push(&mut self.head.weight);
        out.extend(self.head.bias.as_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.tensor().numel()).sum()
    }

    /// Weight quantizer owned by the named parameter, if any.
    pub fn weight_quant(&self, name: &str) -> Option<&QuantParams> {
        if name == "pos" {
            return self.pos_quant.as_ref();
        }
        let stem = name.strip_suffix(".weight")?;
        match stem {
            "embed" => self.embed.weight_quant.as_ref(),
            "head" => self.head.weight_quant.as_ref(),
            _ => {
                let rest = stem.strip_prefix("blocks.")?;
                let (idx, layer) = rest.split_once('.')?;
                let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
                let pos = BLOCK_LAYERS.iter().position(|l| *l == layer)?;
                block.linears()[pos].weight_quant.as_ref()
            }
        }
    }

    pub fn weight_quant_mut(&mut self, name: &str) -> Option<&mut Option<QuantParams>> {
        if name == "pos" {
            return Some(&mut self.pos_quant);
        }
        let stem = name.strip_suffix(".weight")?;
        match stem {
            "embed" => Some(&mut self.embed.weight_quant),
            "head" => Some(&mut self.head.weight_quant),
            _ => {
                let rest = stem.strip_prefix("blocks.")?;
                let (idx, layer) = rest.split_once('.')?;
                let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
                let pos = BLOCK_LAYERS.iter().position(|l| *l == layer)?;
                Some(&mut block.linears_mut()[pos].weight_quant)
            }
        }
    }

    /// Activation quantizers by site name, in checkpoint order.
    pub fn activation_sites(&self) -> Vec<(String, &QuantParams)> {
        let mut out = Vec::new();
        if let Some(q) = &self.embed_in_quant {
            out.push(("embed.input".to_string(), q));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.act_quant {
                for (site, q) in BlockActQuant::SITES.iter().zip(a.sites()) {
                    out.push((format!("blocks.{i}.{site}"), q));
                }
            }
        }
        if let Some(q) = &self.head_in_quant {
            out.push(("head.input".to_string(), q));
        }
        out
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}
