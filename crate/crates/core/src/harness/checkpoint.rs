//! Model checkpoints.
//!
//! Layout (little-endian, lengths as u64):
//!
//! ```text
//! magic      b"MGRQCKPT"
//! version    u32
//! config     8 × u64 (image, patch, channels, dim, heads, blocks, mlp, classes),
//!            u8 pos_embed, f64 ln_eps, 6 × u8 bit widths
//! mode       u8 (0 full precision, 1 fake-quantized)
//! tensors    u64 count, then per tensor: name, u64 rank, rank × u64 dims,
//!            f32 values, u8 has-quantizer, [quantizer]
//! sites      u64 count, then per activation site: name, quantizer
//! digest     32-byte SHA-256 of everything above
//! quantizer  u8 bits, u8 granularity (0 tensor, 1 channel), u64 axis,
//!            u64 n, n × f64 scales, n × i32 zero points
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::io::{read_file, Reader, Writer};
use crate::quant::{Granularity, QuantParams};
use crate::tensor::Tensor;
use crate::vit::{BitWidths, BlockActQuant, Mode, ModelConfig, ViTModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGRQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn write_quant(w: &mut Writer, qp: &QuantParams) {
    w.u8(qp.bits());
    match qp.granularity() {
        Granularity::PerTensor => {
            w.u8(0);
            w.u64(0);
        }
        Granularity::PerChannel { axis } => {
            w.u8(1);
            w.u64(axis as u64);
        }
    }
    w.u64(qp.scales().len() as u64);
    for &s in qp.scales() {
        w.f64(s);
    }
    for &z in qp.zero_points() {
        w.i32(z);
    }
}

fn read_quant(r: &mut Reader) -> Result<QuantParams> {
    let bits = r.u8()?;
    let granularity = match (r.u8()?, r.usize()?) {
        (0, _) => Granularity::PerTensor,
        (1, axis) => Granularity::PerChannel { axis },
        (g, _) => return Err(r.format(format!("unknown granularity tag {g}"))),
    };
    let n = r.usize()?;
    let scales = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let zeros = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    QuantParams::new(bits, granularity, scales, zeros).map_err(|e| r.format(e.to_string()))
}

pub fn checkpoint_bytes(model: &ViTModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = &model.config;
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.embed_dim,
        c.heads,
        c.blocks,
        c.mlp_hidden,
        c.classes,
    ] {
        w.u64(v as u64);
    }
    w.u8(c.pos_embed as u8);
    w.f64(c.ln_eps);
    for b in c.bits.all() {
        w.u8(b);
    }
    w.u8(match model.mode {
        Mode::FullPrecision => 0,
        Mode::FakeQuantized => 1,
    });

    let params = model.named_params();
    w.u64(params.len() as u64);
    for (name, p) in &params {
        w.string(name);
        w.u64(p.shape().len() as u64);
        for &d in p.shape() {
            w.u64(d as u64);
        }
        for &v in p.tensor().data() {
            w.f32(v as f32);
        }
        match model.weight_quant(name) {
            Some(qp) => {
                w.u8(1);
                write_quant(&mut w, qp);
            }
            None => w.u8(0),
        }
    }
    let sites = model.activation_sites();
    w.u64(sites.len() as u64);
    for (name, qp) in &sites {
        w.string(name);
        write_quant(&mut w, qp);
    }
    let digest = Sha256::digest(&w.bytes);
    w.bytes.extend_from_slice(&digest);
    w.bytes
}

/// Hex SHA-256 of the model's checkpoint bytes.
pub fn checksum(model: &ViTModel) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(model)))
}

pub fn save_checkpoint(model: &ViTModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ViTModel> {
    checkpoint_from_bytes(&read_file(path.as_ref())?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ViTModel> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let pos_embed = r.u8()? != 0;
    let ln_eps = r.f64()?;
    let b = r.take(6)?;
    let config = ModelConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        embed_dim: dims[3],
        heads: dims[4],
        blocks: dims[5],
        mlp_hidden: dims[6],
        classes: dims[7],
        pos_embed,
        ln_eps,
        bits: BitWidths {
            block_weight: b[0],
            block_act: b[1],
            embed_weight: b[2],
            embed_act: b[3],
            head_weight: b[4],
            head_act: b[5],
        },
    };
    config.validate().map_err(|e| r.format(e.to_string()))?;
    let mode = match r.u8()? {
        0 => Mode::FullPrecision,
        1 => Mode::FakeQuantized,
        m => return Err(r.format(format!("unknown mode {m}"))),
    };

    let mut model = ViTModel::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.mode = mode;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let count = r.usize()?;
    if count != names.len() {
        return Err(r.format(format!("{count} tensors, expected {}", names.len())));
    }
    for (i, expected) in names.iter().enumerate() {
        let name = r.string()?;
        if &name != expected {
            return Err(r.format(format!("tensor {i} is {name:?}, expected {expected:?}")));
        }
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| r.format(format!("{name}: shape {shape:?} overflows")))?;
        if numel.checked_mul(4).map_or(true, |n| n > bytes.len()) {
            return Err(Error::Truncated {
                what: "checkpoint",
                detail: format!("{name}: {numel} values do not fit in the file"),
            });
        }
        let data = (0..numel).map(|_| Ok(r.f32()? as f64)).collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| r.format(format!("{name}: {e}")))?;
        model.params_mut()[i]
            .assign(value)
            .map_err(|e| r.format(format!("{name}: {e}")))?;
        if r.u8()? != 0 {
            let qp = read_quant(&mut r)?;
            let slot = model
                .weight_quant_mut(&name)
                .ok_or_else(|| r.format(format!("{name} cannot carry a quantizer")))?;
            *slot = Some(qp);
        }
    }

    let sites = r.usize()?;
    let mut block_sites: Vec<Vec<Option<QuantParams>>> = vec![vec![None; 5]; config.blocks];
    for _ in 0..sites {
        let name = r.string()?;
        let qp = read_quant(&mut r)?;
        match name.as_str() {
            "embed.input" => model.embed_in_quant = Some(qp),
            "head.input" => model.head_in_quant = Some(qp),
            other => {
                let slot = other
                    .strip_prefix("blocks.")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(i, site)| {
                        let i = i.parse::<usize>().ok()?;
                        let s = BlockActQuant::SITES.iter().position(|x| *x == site)?;
                        block_sites.get_mut(i)?.get_mut(s)
                    })
                    .ok_or_else(|| r.format(format!("unknown activation site {other:?}")))?;
                *slot = Some(qp);
            }
        }
    }
    for (block, sites) in model.blocks.iter_mut().zip(block_sites) {
        if sites.iter().all(Option::is_none) {
            continue;
        }
        let mut it = sites.into_iter();
        let mut next = || it.next().flatten().ok_or_else(|| r.format("incomplete block activation sites".into()));
        block.act_quant = Some(BlockActQuant {
            qkv_in: next()?,
            attn_probs: next()?,
            proj_in: next()?,
            fc1_in: next()?,
            fc2_in: next()?,
        });
    }

    let body = r.position();
    let digest = r.take(DIGEST_LEN)?;
    r.finish()?;
    if Sha256::digest(&bytes[..body]).as_slice() != digest {
        return Err(r.format("digest mismatch".into()));
    }
    model.validate().map_err(|e| r.format(e.to_string()))?;
    Ok(model)
}
