//! Uniform affine quantization.
//!
//! Codes live in `[0, 2^b − 1]`. A real value maps to
//! `clip(round(x / s) + z, 0, 2^b − 1)` and back to `s · (code − z)`, with
//! `s = (max − min) / (2^b − 1)` and `z = round(−min / s)` taken from the
//! observed range. Rounding is half-to-even everywhere.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Lower clamp for the step size of a degenerate (constant) range.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One `(s, z)` pair per index along `axis`.
    PerChannel { axis: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    bits: u8,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

/// Step size and zero point for an observed `[min, max]` range.
pub fn scale_zero_point(min: f64, max: f64, bits: u8) -> (f64, i32) {
    let qmax = ((1u32 << bits) - 1) as f64;
    let scale = ((max - min) / qmax).max(MIN_SCALE);
    let zero = (-min / scale).round_ties_even().clamp(0.0, qmax);
    (scale, zero as i32)
}

impl QuantParams {
    /// Validating constructor, used when params come from outside (checkpoints).
    pub fn new(
        bits: u8,
        granularity: Granularity,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::contract(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(Error::contract("per-tensor params need exactly one scale"));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::contract(format!("scale must be positive and finite, got {s}")));
        }
        let qmax = (1i32 << bits) - 1;
        if let Some(z) = zero_points.iter().find(|z| !(0..=qmax).contains(*z)) {
            return Err(Error::contract(format!("zero point {z} outside [0, {qmax}]")));
        }
        Ok(Self {
            bits,
            granularity,
            scales,
            zero_points,
        })
    }

    /// Per-tensor params from an observed range.
    pub fn from_range(min: f64, max: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::contract(format!("invalid range [{min}, {max}]")));
        }
        let (s, z) = scale_zero_point(min, max, bits);
        Ok(Self {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zero_points: vec![z],
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    /// Largest code, `2^b − 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Representable real interval `[s·(0 − z), s·(qmax − z)]` of channel `c`.
    pub fn range(&self, c: usize) -> (f64, f64) {
        let (s, z) = (self.scales[c], self.zero_points[c] as f64);
        (s * -z, s * (self.qmax() as f64 - z))
    }

    /// Maps each flat element index of a tensor of `shape` to its channel.
    fn channel_map(&self, shape: &[usize]) -> Result<ChannelMap> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelMap { stride: 1, count: 1 }),
            Granularity::PerChannel { axis } => {
                let extent = *shape.get(axis).ok_or_else(|| {
                    Error::contract(format!("axis {axis} invalid for shape {shape:?}"))
                })?;
                if extent != self.scales.len() {
                    return Err(Error::contract(format!(
                        "{} channel params for extent {extent} along axis {axis}",
                        self.scales.len()
                    )));
                }
                let stride = shape[axis + 1..].iter().product();
                Ok(ChannelMap {
                    stride,
                    count: extent,
                })
            }
        }
    }

    fn code(&self, x: f64, c: usize) -> u8 {
        let q = (x / self.scales[c]).round_ties_even() + self.zero_points[c] as f64;
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    fn value(&self, code: u8, c: usize) -> f64 {
        self.scales[c] * (code as i32 - self.zero_points[c]) as f64
    }
}

struct ChannelMap {
    stride: usize,
    count: usize,
}

impl ChannelMap {
    fn of(&self, index: usize) -> usize {
        if self.count == 1 {
            0
        } else {
            (index / self.stride) % self.count
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

/// Per-tensor calibration from the tensor's own min/max.
pub fn calibrate(x: &Tensor, bits: u8) -> Result<QuantParams> {
    if !x.is_finite() {
        return Err(Error::contract("calibrate: non-finite input"));
    }
    QuantParams::from_range(x.min(), x.max(), bits)
}

/// Calibrates each slice along `axis` independently.
pub fn calibrate_per_channel(w: &Tensor, bits: u8, axis: usize) -> Result<QuantParams> {
    check_bits(bits)?;
    let shape = w.shape();
    let extent = *shape.get(axis).ok_or_else(|| {
        Error::contract(format!("axis {axis} invalid for shape {shape:?}"))
    })?;
    if !w.is_finite() {
        return Err(Error::contract("calibrate_per_channel: non-finite input"));
    }
    let stride: usize = shape[axis + 1..].iter().product();
    let mut lo = vec![f64::INFINITY; extent];
    let mut hi = vec![f64::NEG_INFINITY; extent];
    for (i, &v) in w.data().iter().enumerate() {
        let c = (i / stride) % extent;
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let (scales, zero_points) = lo
        .iter()
        .zip(&hi)
        .map(|(&l, &h)| scale_zero_point(l, h, bits))
        .unzip();
    Ok(QuantParams {
        bits,
        granularity: Granularity::PerChannel { axis },
        scales,
        zero_points,
    })
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    let map = params.channel_map(x.shape())?;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.code(v, map.of(i)))
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params: params.clone(),
    })
}

pub fn dequantize(xq: &QuantizedTensor) -> Tensor {
    let params = &xq.params;
    let map = params
        .channel_map(&xq.shape)
        .expect("quantized tensor built against its own params");
    let data = xq
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| params.value(c, map.of(i)))
        .collect();
    Tensor::new(xq.shape.clone(), data).expect("shape carried from a valid tensor")
}

/// `dequantize(quantize(x))` plus the straight-through mask (true where `x`
/// lies inside the representable range).
fn fake_quant_values(x: &[f64], shape: &[usize], params: &QuantParams) -> Result<(Vec<f64>, Vec<bool>)> {
    let map = params.channel_map(shape)?;
    let ranges: Vec<(f64, f64)> = (0..params.channels()).map(|c| params.range(c)).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let c = map.of(i);
        out.push(params.value(params.code(v, c), c));
        let (lo, hi) = ranges[c];
        mask.push(v >= lo && v <= hi);
    }
    Ok((out, mask))
}

/// Quantize-dequantize without gradient tracking.
pub fn fake_quant(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    let (out, _) = fake_quant_values(x.data(), x.shape(), params)?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Quantize-dequantize on the tape with a clipping-aware straight-through
/// gradient: identity inside the representable range, zero outside.
pub fn fake_quant_var(tape: &mut Tape, x: Var, params: &QuantParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    // Surface channel-shape errors before touching the tape.
    params.channel_map(&shape)?;
    tape.straight_through(x, |values| {
        fake_quant_values(values, &shape, params).expect("channel map checked above")
    })
}

/// Running min/max over several batches, for activation calibration.
#[derive(Clone, Copy, Debug)]
pub struct RangeObserver {
    min: f64,
    max: f64,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RangeObserver {
    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        (!self.is_empty()).then_some((self.min, self.max))
    }

    pub fn params(&self, bits: u8) -> Result<QuantParams> {
        let (lo, hi) = self
            .range()
            .ok_or_else(|| Error::contract("range observer saw no values"))?;
        QuantParams::from_range(lo, hi, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn calibrate_examples() {
        let qp = calibrate(&t(&[0.0, 1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(qp.scales(), &[1.0]);
        assert_eq!(qp.zero_points(), &[0]);

        let qp = calibrate(&t(&[-1.0, 2.0]), 8).unwrap();
        assert!((qp.scales()[0] - 3.0 / 255.0).abs() < 1e-15);
        assert_eq!(qp.zero_points(), &[85]);
    }

    #[test]
    fn constant_tensor_clamps_scale() {
        let x = t(&[5.0, 5.0, 5.0]);
        let qp = calibrate(&x, 8).unwrap();
        assert_eq!(qp.scales(), &[MIN_SCALE]);
        assert_eq!(qp.zero_points(), &[0]);
        let q = quantize(&x, &qp).unwrap();
        assert!(q.codes().iter().all(|&c| c == q.codes()[0]));
        let back = dequantize(&q);
        assert!(back.data().iter().all(|&v| v == back.data()[0] && v.abs() < 1e-5));
    }

    #[test]
    fn calibrate_rejects_empty_range_and_bad_bits() {
        assert!(calibrate(&t(&[1.0]), 1).is_err());
        assert!(calibrate(&t(&[1.0]), 9).is_err());
        assert!(RangeObserver::default().params(8).is_err());
        assert!(calibrate(&t(&[f64::NAN, 1.0]), 8).is_err());
    }

    #[test]
    fn quantize_examples_and_clipping() {
        let qp = QuantParams::new(2, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        let q = quantize(&t(&[0.0, 1.0, 2.0, 3.0]), &qp).unwrap();
        assert_eq!(q.codes(), &[0, 1, 2, 3]);
        assert_eq!(dequantize(&q).data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(quantize(&t(&[-10.0]), &qp).unwrap().codes(), &[0]);
        assert_eq!(quantize(&t(&[10.0]), &qp).unwrap().codes(), &[3]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        let qp = QuantParams::new(4, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        let q = quantize(&t(&[0.5, 1.5, 2.5, 3.5]), &qp).unwrap();
        assert_eq!(q.codes(), &[0, 2, 2, 4]);
    }

    #[test]
    fn zero_point_code_dequantizes_to_zero() {
        let s = 3.0 / 255.0;
        let qp = QuantParams::new(8, Granularity::PerTensor, vec![s], vec![85]).unwrap();
        let q = quantize(&t(&[0.0]), &qp).unwrap();
        assert_eq!(q.codes(), &[85]);
        assert_eq!(dequantize(&q).data(), &[0.0]);
    }

    #[test]
    fn fake_quant_rounding_examples() {
        let qp = QuantParams::new(2, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        assert_eq!(fake_quant(&t(&[0.4]), &qp).unwrap().data(), &[0.0]);
        assert_eq!(fake_quant(&t(&[0.6]), &qp).unwrap().data(), &[1.0]);
        let on_grid = t(&[0.0, 2.0, 3.0]);
        assert_eq!(fake_quant(&on_grid, &qp).unwrap(), on_grid);
    }

    #[test]
    fn per_channel_examples() {
        let w = Tensor::from_rows(&[&[0.0, 3.0], &[0.0, 6.0]]);
        let qp = calibrate_per_channel(&w, 2, 0).unwrap();
        assert_eq!(qp.scales(), &[1.0, 2.0]);
        assert_eq!(qp.zero_points(), &[0, 0]);

        let twin = Tensor::from_rows(&[&[-1.0, 0.5, 2.0], &[-1.0, 0.5, 2.0]]);
        let qp = calibrate_per_channel(&twin, 4, 0).unwrap();
        assert_eq!(qp.scales()[0], qp.scales()[1]);
        assert_eq!(qp.zero_points()[0], qp.zero_points()[1]);

        let single = Tensor::from_rows(&[&[-0.3, 0.9, 0.1]]);
        let pc = calibrate_per_channel(&single, 6, 0).unwrap();
        let pt = calibrate(&single, 6).unwrap();
        assert_eq!(pc.scales(), pt.scales());
        assert_eq!(pc.zero_points(), pt.zero_points());

        assert!(calibrate_per_channel(&w, 4, 2).is_err());
    }

    #[test]
    fn per_channel_uses_column_params_for_axis_one() {
        let w = Tensor::from_rows(&[&[0.0, 0.0], &[3.0, 6.0]]);
        let qp = calibrate_per_channel(&w, 2, 1).unwrap();
        assert_eq!(qp.scales(), &[1.0, 2.0]);
        let probe = Tensor::from_rows(&[&[2.0, 2.0], &[1.0, 5.0]]);
        let fq = fake_quant(&probe, &qp).unwrap();
        assert_eq!(fq.data(), &[2.0, 2.0, 1.0, 4.0]);
    }

    #[test]
    fn new_validates() {
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![0.0], vec![0]).is_err());
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![1.0], vec![16]).is_err());
        assert!(QuantParams::new(4, Granularity::PerTensor, vec![1.0, 1.0], vec![0, 0]).is_err());
        assert!(QuantParams::new(4, Granularity::PerChannel { axis: 0 }, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn ste_mask_follows_representable_range() {
        let qp = QuantParams::new(2, Granularity::PerTensor, vec![1.0], vec![1]).unwrap();
        // representable [-1, 2]
        let mut tape = Tape::new();
        let x = tape.param(t(&[-3.0, -0.7, 0.2, 1.9, 2.6]));
        let y = fake_quant_var(&mut tape, x, &qp).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(tape.value(y).data(), &[-1.0, -1.0, 0.0, 2.0, 2.0]);
    }
}
