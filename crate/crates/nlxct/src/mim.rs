//! Masked image modeling: patch-aligned mask generation, corrupted-view
//! construction, the masked-region L1 objective, and a lightweight
//! reconstruction decoder.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{unpatchify, Projection};
use crate::params::{ParamGroup, Params};
use crate::rng;
use crate::ssm::{MixerBlock, MixerConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Loss denominator guard; the masked-pixel count is never negative.
pub const MIM_EPS: f64 = 1e-8;

/// Mask construction parameters. Masks are binary with 1 = visible and
/// 0 = masked, constant within each patch cell.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    /// Pixels per square mask cell.
    pub patch_size: usize,
    /// Fraction of patches masked; the masked count is
    /// round(mask_ratio * total_patches), exact.
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(patch_size: usize, mask_ratio: f64, seed: u64) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::config("mask patch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&mask_ratio) {
            return Err(Error::config(format!("mask_ratio {mask_ratio} outside [0,1]")));
        }
        Ok(MaskSpec { patch_size, mask_ratio, seed })
    }
}

/// Sample a patch-aligned binary mask for an h x w image. Patches are drawn
/// uniformly without replacement; deterministic per seed.
pub fn make_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Tensor> {
    let p = spec.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by mask patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let total = gh * gw;
    let k = (spec.mask_ratio * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    let mut gen: ChaCha8Rng = rng::stream(spec.seed, "mask", 0);
    order.shuffle(&mut gen);
    let mut mask = vec![1.0; h * w];
    for &cell in order.iter().take(k) {
        let (cy, cx) = (cell / gw, cell % gw);
        for y in cy * p..(cy + 1) * p {
            for x in cx * p..(cx + 1) * p {
                mask[y * w + x] = 0.0;
            }
        }
    }
    Tensor::new(vec![h, w], mask)
}

/// Corrupted view: x~ = M .* x + (1 - M) .* t.
pub fn corrupt(x: &Tensor, mask: &Tensor, t: f64) -> Result<Tensor> {
    if x.numel() != mask.numel() {
        return Err(Error::dim(format!(
            "corrupt image {:?} vs mask {:?}",
            x.shape, mask.shape
        )));
    }
    let data: Vec<f64> = x
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(xv, m)| m * xv + (1.0 - m) * t)
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Masked-region reconstruction loss on the tape:
/// ||(1-M) .* (x_hat - x)||_1 / (||1-M||_1 + eps).
/// Gradient flows to `x_hat` only; target and mask enter as constants.
pub fn mim_loss(tape: &mut Tape, x_hat: NodeId, x: &Tensor, mask: &Tensor) -> Result<NodeId> {
    if tape.numel(x_hat) != x.numel() || x.numel() != mask.numel() {
        return Err(Error::dim(format!(
            "mim_loss pred {} vs target {} vs mask {}",
            tape.numel(x_hat),
            x.numel(),
            mask.numel()
        )));
    }
    let shape = tape.shape(x_hat).to_vec();
    let inv: Vec<f64> = mask.data.iter().map(|m| 1.0 - m).collect();
    let denom: f64 = inv.iter().sum();
    let target = tape.constant(x.data.clone(), shape.clone());
    let inv_mask = tape.constant(inv, shape);
    let diff = tape.sub(x_hat, target)?;
    let masked = tape.mul(diff, inv_mask)?;
    let l1 = tape.abs(masked);
    let total = tape.sum(l1);
    Ok(tape.mul_const(total, 1.0 / (denom + MIM_EPS)))
}

/// Reconstruction decoder: one mixer block over the encoder tokens, a
/// per-token projection to patch pixels, then block-to-pixel unfolding.
pub struct Decoder {
    mixer: MixerBlock,
    to_pixels: Projection,
    pub d_model: usize,
    /// Pixels per token side; image H = grid_h * patch.
    pub patch: usize,
}

impl Decoder {
    pub fn build(
        params: &mut Params,
        d_model: usize,
        d_state: usize,
        patch: usize,
        nl_enabled: bool,
        alpha: f64,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mcfg = MixerConfig {
            d_model,
            d_state,
            nl_enabled,
            alpha,
            lambda,
            token_gate: false,
        };
        let mixer = MixerBlock::build(params, "decoder.mixer", mcfg, ParamGroup::Backbone, rng)?;
        let std = (1.0 / d_model as f64).sqrt();
        let to_pixels = if nl_enabled {
            Projection::continuum(
                params,
                "decoder.to_pixels",
                d_model,
                patch * patch,
                std,
                alpha,
                lambda,
                ParamGroup::Backbone,
                rng,
            )?
        } else {
            Projection::plain(
                params,
                "decoder.to_pixels",
                d_model,
                patch * patch,
                std,
                ParamGroup::Backbone,
                rng,
            )
        };
        Ok(Decoder { mixer, to_pixels, d_model, patch })
    }

    /// tokens [B,N,D] over a (gh, gw) grid -> image [B,1,gh*patch,gw*patch].
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        tokens: NodeId,
        grid: (usize, usize),
    ) -> Result<NodeId> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::dim(format!(
                "decoder expects [B,N,{}], got {s:?}",
                self.d_model
            )));
        }
        if s[1] != grid.0 * grid.1 {
            return Err(Error::dim(format!(
                "decoder N={} vs token grid {}x{}",
                s[1], grid.0, grid.1
            )));
        }
        let tok = self.mixer.forward(tape, params, tokens)?;
        let pix = self.to_pixels.forward_tokens(tape, params, tok)?;
        let maps = unpatchify(tape, pix, grid.0, grid.1)?;
        tape.depth_to_space(maps, self.patch)
    }

    pub fn slow_update(&self, params: &mut Params) {
        self.mixer.slow_update(params);
        self.to_pixels.slow_update(params);
    }
}
