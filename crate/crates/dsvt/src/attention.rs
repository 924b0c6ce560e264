//! Masked multi-head self-attention, feed-forward, layer normalization, and
//! sinusoidal positional encoding over inner-window coordinates.
//!
//! All dot products accumulate in f64 and round once to f32, so batched and
//! per-row reference paths agree tightly. The `naive` submodule holds an
//! independent loop implementation used by `check` and the test oracles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{tensor_rng, LayerNormParams, Linear};
use crate::tensor::FeatureTensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// GELU, tanh form.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let inner = 0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

/// Weights of one transformer layer: four attention projections, a two-layer
/// feed-forward, and two layer norms.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub channels: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl AttentionParams {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        let c = self.channels;
        for (name, lin, out, inp) in [
            ("wq", &self.wq, c, c),
            ("wk", &self.wk, c, c),
            ("wv", &self.wv, c, c),
            ("wo", &self.wo, c, c),
            ("ffn1", &self.ffn1, self.ffn1.out_dim(), c),
            ("ffn2", &self.ffn2, c, self.ffn1.out_dim()),
        ] {
            if lin.out_dim() != out || lin.in_dim() != inp {
                return Err(Error::Config(format!(
                    "{name}: expected ({out}, {inp}), got ({}, {})",
                    lin.out_dim(),
                    lin.in_dim()
                )));
            }
        }
        if self.ln1.dim() != c || self.ln2.dim() != c {
            return Err(Error::Config("layer norm width mismatch".into()));
        }
        Ok(())
    }

    /// Deterministic pseudo-random weights, uniform in `±1/sqrt(fan_in)`.
    pub fn seeded(channels: usize, heads: usize, ffn: usize, seed: u64) -> Self {
        Self {
            channels,
            heads,
            wq: Linear::seeded(channels, channels, &mut tensor_rng(seed, "wq")),
            wk: Linear::seeded(channels, channels, &mut tensor_rng(seed, "wk")),
            wv: Linear::seeded(channels, channels, &mut tensor_rng(seed, "wv")),
            wo: Linear::seeded(channels, channels, &mut tensor_rng(seed, "wo")),
            ffn1: Linear::seeded(ffn, channels, &mut tensor_rng(seed, "ffn1")),
            ffn2: Linear::seeded(channels, ffn, &mut tensor_rng(seed, "ffn2")),
            ln1: LayerNormParams::identity(channels),
            ln2: LayerNormParams::identity(channels),
        }
    }

    /// Identity projections and a zero feed-forward; useful in tests where
    /// attention output must be analyzable by hand.
    pub fn identity(channels: usize, heads: usize) -> Self {
        let zero = Linear {
            weight: FeatureTensor::zeros(&[channels, channels]),
            bias: vec![0.0; channels],
        };
        Self {
            channels,
            heads,
            wq: Linear::identity(channels),
            wk: Linear::identity(channels),
            wv: Linear::identity(channels),
            wo: Linear::identity(channels),
            ffn1: zero.clone(),
            ffn2: zero,
            ln1: LayerNormParams::identity(channels),
            ln2: LayerNormParams::identity(channels),
        }
    }
}

/// Sinusoidal encoding of inner-window coordinates.
///
/// Coordinates are normalized to `[0, 1)` per axis by the window size and
/// expanded into `C/6` sine/cosine pairs per axis on a geometric frequency
/// ladder; trailing remainder channels stay zero.
pub fn positional_encoding(
    coords: &FeatureTensor,
    window_size: [usize; 3],
    channels: usize,
) -> Result<FeatureTensor> {
    if channels < 6 {
        return Err(Error::Config(format!(
            "positional encoding needs at least 6 channels, got {channels}"
        )));
    }
    let shape = coords.shape();
    if shape.last() != Some(&3) {
        return Err(Error::Contract(format!(
            "coords must have a trailing axis of 3, got {shape:?}"
        )));
    }
    let pairs = channels / 6;
    let rows = coords.len() / 3;
    let mut out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
    out_shape.push(channels);
    let mut out = FeatureTensor::zeros(&out_shape);

    let two_pi = std::f64::consts::TAU;
    let cdata = coords.data();
    out.data_mut()
        .par_chunks_mut(channels)
        .enumerate()
        .for_each(|(r, row)| {
            debug_assert!(r < rows);
            for axis in 0..3 {
                let u = cdata[r * 3 + axis] as f64 / window_size[axis] as f64;
                let base = axis * 2 * pairs;
                for p in 0..pairs {
                    let freq = two_pi * 10000f64.powf(-(p as f64) / pairs as f64);
                    let theta = u * freq;
                    row[base + 2 * p] = theta.sin() as f32;
                    row[base + 2 * p + 1] = theta.cos() as f32;
                }
            }
        });
    Ok(out)
}

/// Layer normalization over the trailing channel axis.
pub fn layer_norm(x: &FeatureTensor, params: &LayerNormParams) -> FeatureTensor {
    let c = x.last_dim();
    debug_assert_eq!(params.dim(), c);
    let mut out = FeatureTensor::zeros(x.shape());
    out.data_mut()
        .par_chunks_mut(c)
        .zip(x.data().par_chunks(c))
        .for_each(|(orow, xrow)| {
            let mut mean = 0.0f64;
            for v in xrow {
                mean += *v as f64;
            }
            mean /= c as f64;
            let mut var = 0.0f64;
            for v in xrow {
                let d = *v as f64 - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            for i in 0..c {
                let norm = (xrow[i] as f64 - mean) * inv;
                orow[i] = (norm * params.gamma[i] as f64 + params.beta[i] as f64) as f32;
            }
        });
    out
}

fn add(a: &FeatureTensor, b: &FeatureTensor) -> FeatureTensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    FeatureTensor::from_vec(a.shape(), data).expect("add shape")
}

/// Batched scaled dot-product attention with masked keys excluded from the
/// softmax. Outputs are produced for every query slot, masked or not.
pub fn masked_mhsa(
    x: &FeatureTensor,
    key_mask: &[bool],
    params: &AttentionParams,
) -> Result<FeatureTensor> {
    params.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != params.channels {
        return Err(Error::Contract(format!(
            "masked_mhsa expects (B, tau, {}), got {shape:?}",
            params.channels
        )));
    }
    let (batch, tau, c) = (shape[0], shape[1], shape[2]);
    if key_mask.len() != batch * tau {
        return Err(Error::Contract(format!(
            "key_mask has {} entries for a ({batch}, {tau}) batch",
            key_mask.len()
        )));
    }
    for b in 0..batch {
        if !key_mask[b * tau..(b + 1) * tau].iter().any(|m| *m) {
            return Err(Error::Contract(format!("batch row {b} has no valid key")));
        }
    }
    let heads = params.heads;
    let d = params.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    let mut out = FeatureTensor::zeros(&[batch, tau, c]);
    out.data_mut()
        .par_chunks_mut(tau * c)
        .enumerate()
        .for_each(|(b, orow)| {
            let mask = &key_mask[b * tau..(b + 1) * tau];
            let mut q = vec![0.0f32; tau * c];
            let mut k = vec![0.0f32; tau * c];
            let mut v = vec![0.0f32; tau * c];
            for t in 0..tau {
                let xr = x.row3(b, t);
                params.wq.apply(xr, &mut q[t * c..(t + 1) * c]);
                params.wk.apply(xr, &mut k[t * c..(t + 1) * c]);
                params.wv.apply(xr, &mut v[t * c..(t + 1) * c]);
            }
            let mut attn = vec![0.0f32; tau * c];
            let mut scores = vec![0.0f64; tau];
            for h in 0..heads {
                let off = h * d;
                for i in 0..tau {
                    let qrow = &q[i * c + off..i * c + off + d];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tau {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &k[j * c + off..j * c + off + d];
                        let mut dot = 0.0f64;
                        for (qa, ka) in qrow.iter().zip(krow) {
                            dot += *qa as f64 * *ka as f64;
                        }
                        let s = dot * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = 0.0f64;
                    for j in 0..tau {
                        if mask[j] {
                            scores[j] = (scores[j] - max).exp();
                            denom += scores[j];
                        }
                    }
                    let arow = &mut attn[i * c + off..i * c + off + d];
                    for a in 0..d {
                        let mut acc = 0.0f64;
                        for j in 0..tau {
                            if mask[j] {
                                acc += scores[j] * v[j * c + off + a] as f64;
                            }
                        }
                        arow[a] = (acc / denom) as f32;
                    }
                }
            }
            for t in 0..tau {
                params
                    .wo
                    .apply(&attn[t * c..(t + 1) * c], &mut orow[t * c..(t + 1) * c]);
            }
        });
    debug_assert!(out.all_finite());
    Ok(out)
}

/// One transformer layer: post-norm attention and feed-forward with residual
/// connections. The positional encoding, when given, is added to the
/// attention input only; the residual carries the raw features.
pub fn transformer_layer(
    x: &FeatureTensor,
    key_mask: &[bool],
    pos: Option<&FeatureTensor>,
    params: &AttentionParams,
) -> Result<FeatureTensor> {
    let attn_in = match pos {
        Some(p) => {
            if p.shape() != x.shape() {
                return Err(Error::Contract(format!(
                    "positional encoding shape {:?} != input {:?}",
                    p.shape(),
                    x.shape()
                )));
            }
            add(x, p)
        }
        None => x.clone(),
    };
    let attn = masked_mhsa(&attn_in, key_mask, params)?;
    let y1 = layer_norm(&add(x, &attn), &params.ln1);

    let c = params.channels;
    let hidden = params.ffn1.out_dim();
    let mut ff = FeatureTensor::zeros(x.shape());
    ff.data_mut()
        .par_chunks_mut(c)
        .zip(y1.data().par_chunks(c))
        .for_each(|(frow, yrow)| {
            let mut h = vec![0.0f32; hidden];
            params.ffn1.apply(yrow, &mut h);
            for v in &mut h {
                *v = gelu(*v);
            }
            params.ffn2.apply(&h, frow);
        });
    let y = layer_norm(&add(&y1, &ff), &params.ln2);
    debug_assert!(y.all_finite());
    Ok(y)
}

/// Independent reference implementations used by `check` and the oracles.
/// These reimplement every step as plain per-row loops; masked keys are
/// physically dropped rather than score-masked.
pub mod naive {
    use super::AttentionParams;
    use crate::params::LayerNormParams;

    fn matvec(weight: &[f32], bias: &[f32], inp: &[f32], out: &mut [f32]) {
        let cols = inp.len();
        for (o, y) in out.iter_mut().enumerate() {
            let mut acc = bias[o] as f64;
            for (i, x) in inp.iter().enumerate() {
                acc += weight[o * cols + i] as f64 * *x as f64;
            }
            *y = acc as f32;
        }
    }

    fn gelu(x: f32) -> f32 {
        let x = x as f64;
        let inner = 0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x);
        (0.5 * x * (1.0 + inner.tanh())) as f32
    }

    /// One sequence of `tau` slots; keys at mask-false slots are dropped
    /// before the softmax. Returns outputs for every query slot.
    pub fn mhsa(
        x: &[f32],
        tau: usize,
        mask: &[bool],
        params: &AttentionParams,
    ) -> Vec<f32> {
        let c = params.channels;
        let heads = params.heads;
        let d = c / heads;
        assert_eq!(x.len(), tau * c);
        let valid: Vec<usize> = (0..tau).filter(|j| mask[*j]).collect();
        assert!(!valid.is_empty());

        let mut q = vec![0.0f32; tau * c];
        let mut k = vec![0.0f32; tau * c];
        let mut v = vec![0.0f32; tau * c];
        for t in 0..tau {
            matvec(
                params.wq.weight.data(),
                &params.wq.bias,
                &x[t * c..(t + 1) * c],
                &mut q[t * c..(t + 1) * c],
            );
            matvec(
                params.wk.weight.data(),
                &params.wk.bias,
                &x[t * c..(t + 1) * c],
                &mut k[t * c..(t + 1) * c],
            );
            matvec(
                params.wv.weight.data(),
                &params.wv.bias,
                &x[t * c..(t + 1) * c],
                &mut v[t * c..(t + 1) * c],
            );
        }

        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0f32; tau * c];
        for h in 0..heads {
            let off = h * d;
            for i in 0..tau {
                let mut scores = Vec::with_capacity(valid.len());
                for &j in &valid {
                    let mut dot = 0.0f64;
                    for a in 0..d {
                        dot += q[i * c + off + a] as f64 * k[j * c + off + a] as f64;
                    }
                    scores.push(dot * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for a in 0..d {
                    let mut acc = 0.0f64;
                    for (si, &j) in valid.iter().enumerate() {
                        acc += scores[si] * v[j * c + off + a] as f64;
                    }
                    attn[i * c + off + a] = (acc / denom) as f32;
                }
            }
        }

        let mut out = vec![0.0f32; tau * c];
        for t in 0..tau {
            matvec(
                params.wo.weight.data(),
                &params.wo.bias,
                &attn[t * c..(t + 1) * c],
                &mut out[t * c..(t + 1) * c],
            );
        }
        out
    }

    fn layer_norm_row(x: &mut [f32], params: &LayerNormParams) {
        let c = x.len();
        let mut mean = 0.0f64;
        for v in x.iter() {
            mean += *v as f64;
        }
        mean /= c as f64;
        let mut var = 0.0f64;
        for v in x.iter() {
            let d = *v as f64 - mean;
            var += d * d;
        }
        var /= c as f64;
        let inv = 1.0 / (var + super::LAYER_NORM_EPS as f64).sqrt();
        for i in 0..c {
            let norm = (x[i] as f64 - mean) * inv;
            x[i] = (norm * params.gamma[i] as f64 + params.beta[i] as f64) as f32;
        }
    }

    /// One sequence through a full layer: attention (with optional position
    /// added to the attention input), residual, norm, feed-forward,
    /// residual, norm.
    pub fn transformer_layer(
        x: &[f32],
        tau: usize,
        mask: &[bool],
        pos: Option<&[f32]>,
        params: &AttentionParams,
    ) -> Vec<f32> {
        let c = params.channels;
        let attn_in: Vec<f32> = match pos {
            Some(p) => x.iter().zip(p).map(|(a, b)| a + b).collect(),
            None => x.to_vec(),
        };
        let attn = mhsa(&attn_in, tau, mask, params);
        let mut y1: Vec<f32> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        for t in 0..tau {
            layer_norm_row(&mut y1[t * c..(t + 1) * c], &params.ln1);
        }
        let hidden = params.ffn1.out_dim();
        let mut y = vec![0.0f32; tau * c];
        for t in 0..tau {
            let mut h = vec![0.0f32; hidden];
            matvec(
                params.ffn1.weight.data(),
                &params.ffn1.bias,
                &y1[t * c..(t + 1) * c],
                &mut h,
            );
            for v in &mut h {
                *v = gelu(*v);
            }
            let mut f = vec![0.0f32; c];
            matvec(params.ffn2.weight.data(), &params.ffn2.bias, &h, &mut f);
            for i in 0..c {
                y[t * c + i] = y1[t * c + i] + f[i];
            }
            layer_norm_row(&mut y[t * c..(t + 1) * c], &params.ln2);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> FeatureTensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureTensor::from_vec(shape, data).unwrap()
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn encoding_of_origin_is_sin_zero_cos_one() {
        let coords = FeatureTensor::zeros(&[1, 1, 3]);
        let pe = positional_encoding(&coords, [12, 12, 1], 12).unwrap();
        let row = pe.row3(0, 0);
        // pairs = 2 per axis: channels alternate sin, cos within each block.
        for axis in 0..3 {
            for p in 0..2 {
                assert_eq!(row[axis * 4 + 2 * p], 0.0);
                assert_eq!(row[axis * 4 + 2 * p + 1], 1.0);
            }
        }
    }

    #[test]
    fn encoding_remainder_channels_are_zero() {
        let coords =
            FeatureTensor::from_vec(&[1, 1, 3], vec![3.0, 5.0, 0.0]).unwrap();
        let pe = positional_encoding(&coords, [12, 12, 1], 14).unwrap();
        // pairs = 14/6 = 2, so 12 encoded channels and 2 zero channels.
        let row = pe.row3(0, 0);
        assert_eq!(row[12], 0.0);
        assert_eq!(row[13], 0.0);
    }

    #[test]
    fn identical_coords_identical_encodings() {
        let coords =
            FeatureTensor::from_vec(&[1, 2, 3], vec![4.0, 7.0, 0.0, 4.0, 7.0, 0.0]).unwrap();
        let pe = positional_encoding(&coords, [12, 12, 1], 24).unwrap();
        assert_eq!(pe.row3(0, 0), pe.row3(0, 1));
    }

    #[test]
    fn encoding_injective_on_window_grid() {
        // Enumerate all 144 cells of a 12x12x1 window at C = 192 and check
        // pairwise distinctness.
        let mut vals = Vec::new();
        for y in 0..12 {
            for x in 0..12 {
                vals.extend_from_slice(&[x as f32, y as f32, 0.0]);
            }
        }
        let coords = FeatureTensor::from_vec(&[144, 1, 3], vals).unwrap();
        let pe = positional_encoding(&coords, [12, 12, 1], 192).unwrap();
        for a in 0..144 {
            for b in (a + 1)..144 {
                assert!(
                    max_abs_diff(pe.row3(a, 0), pe.row3(b, 0)) > 1e-6,
                    "cells {a} and {b} collide"
                );
            }
        }
    }

    #[test]
    fn encoding_needs_six_channels() {
        let coords = FeatureTensor::zeros(&[1, 1, 3]);
        assert!(positional_encoding(&coords, [4, 4, 1], 5).is_err());
    }

    #[test]
    fn single_token_identity_attention_is_identity() {
        let params = AttentionParams::identity(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[1, 1, 8], &mut rng);
        let y = masked_mhsa(&x, &[true], &params).unwrap();
        assert!(max_abs_diff(x.data(), y.data()) < 1e-6);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let params = AttentionParams::seeded(16, 4, 32, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let x = FeatureTensor::from_vec(&[1, 5, 16], data).unwrap();
        let y = masked_mhsa(&x, &[true; 5], &params).unwrap();
        for t in 1..5 {
            assert!(max_abs_diff(y.row3(0, 0), y.row3(0, t)) < 1e-6);
        }
    }

    #[test]
    fn batched_matches_naive_with_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let tau = rng.random_range(1..=16);
            let heads = [1usize, 2, 4][rng.random_range(0..3)];
            let c = heads * rng.random_range(1..=8);
            let batch = rng.random_range(1..=3);
            let params = AttentionParams::seeded(c, heads, 2 * c, trial);
            let x = random_tensor(&[batch, tau, c], &mut rng);
            let mut mask = vec![false; batch * tau];
            for b in 0..batch {
                mask[b * tau] = true; // first slot always valid
                for t in 1..tau {
                    mask[b * tau + t] = rng.random_bool(0.7);
                }
            }
            let y = masked_mhsa(&x, &mask, &params).unwrap();
            for b in 0..batch {
                let xrow = &x.data()[b * tau * c..(b + 1) * tau * c];
                let expect = naive::mhsa(xrow, tau, &mask[b * tau..(b + 1) * tau], &params);
                let got = &y.data()[b * tau * c..(b + 1) * tau * c];
                assert!(
                    max_abs_diff(got, &expect) < 1e-5,
                    "trial {trial} batch row {b} diverges"
                );
            }
        }
    }

    #[test]
    fn all_masked_row_is_rejected() {
        let params = AttentionParams::identity(8, 1);
        let x = FeatureTensor::zeros(&[1, 2, 8]);
        assert!(masked_mhsa(&x, &[false, false], &params).is_err());
    }

    #[test]
    fn attention_outputs_stay_in_convex_hull() {
        // With identity value/output projections and no bias, each output row
        // is a convex combination of the unmasked input rows.
        let params = AttentionParams::identity(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[1, 6, 8], &mut rng);
        let mask = [true, true, false, true, false, true];
        let y = masked_mhsa(&x, &mask, &params).unwrap();
        for ch in 0..8 {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for t in 0..6 {
                if mask[t] {
                    lo = lo.min(x.row3(0, t)[ch]);
                    hi = hi.max(x.row3(0, t)[ch]);
                }
            }
            for t in 0..6 {
                let v = y.row3(0, t)[ch];
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn masked_slot_features_are_irrelevant() {
        let params = AttentionParams::seeded(12, 3, 24, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&[2, 5, 12], &mut rng);
        let mask = [
            true, true, false, true, false, // row 0
            true, false, true, true, true, // row 1
        ];
        let base = transformer_layer(&x, &mask, None, &params).unwrap();
        let mut poisoned = x.clone();
        for b in 0..2 {
            for t in 0..5 {
                if !mask[b * 5 + t] {
                    for v in poisoned.row3_mut(b, t) {
                        *v = rng.random_range(-100.0..100.0);
                    }
                }
            }
        }
        let out = transformer_layer(&poisoned, &mask, None, &params).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                if mask[b * 5 + t] {
                    assert!(
                        max_abs_diff(base.row3(b, t), out.row3(b, t)) <= 1e-6,
                        "valid output ({b},{t}) moved"
                    );
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[4, 32], &mut rng);
        let y = layer_norm(&x, &LayerNormParams::identity(32));
        for r in 0..4 {
            let row = y.row(r);
            let mean: f64 = row.iter().map(|v| *v as f64).sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn layer_output_shape_matches_input() {
        let params = AttentionParams::seeded(8, 2, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[3, 4, 8], &mut rng);
        let y = transformer_layer(&x, &[true; 12], None, &params).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn zero_ffn_reduces_to_double_norm() {
        // With a zero feed-forward the layer is LN2(LN1(x + attn)).
        let params = AttentionParams::identity(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&[1, 3, 8], &mut rng);
        let mask = [true; 3];
        let attn = masked_mhsa(&x, &mask, &params).unwrap();
        let y1 = layer_norm(&add(&x, &attn), &params.ln1);
        let expect = layer_norm(&y1, &params.ln2);
        let got = transformer_layer(&x, &mask, None, &params).unwrap();
        assert!(max_abs_diff(got.data(), expect.data()) < 1e-6);
    }

    #[test]
    fn layer_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..20 {
            let tau = rng.random_range(1..=10);
            let c = 12;
            let params = AttentionParams::seeded(c, 3, 20, 100 + trial);
            let x = random_tensor(&[1, tau, c], &mut rng);
            let coords = random_tensor(&[1, tau, 3], &mut rng);
            let pe = positional_encoding(&coords, [4, 4, 4], c).unwrap();
            let mut mask = vec![true; tau];
            for m in mask.iter_mut().skip(1) {
                *m = rng.random_bool(0.6);
            }
            let got = transformer_layer(&x, &mask, Some(&pe), &params).unwrap();
            let expect =
                naive::transformer_layer(x.data(), tau, &mask, Some(pe.data()), &params);
            assert!(max_abs_diff(got.data(), &expect) < 1e-5, "trial {trial}");
        }
    }
}
