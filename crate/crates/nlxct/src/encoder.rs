//! Four-stage hybrid encoder: conv bottleneck stages feeding state-space
//! mixer stages over the patch-token grid, global pooling, and a linear
//! classifier head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{patchify, unpatchify, Conv, Norm, Projection, RegNetBlock};
use crate::params::{ParamGroup, Params};
use crate::ssm::{MixerBlock, MixerConfig};
use crate::tape::{NodeId, Tape};

/// Encoder hyperparameters. Exactly four stages; the first two are
/// convolutional, the last two mix tokens.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub patch_stride: [usize; 4],
    pub num_classes: usize,
    pub d_state: usize,
    /// Toggles the fast/slow projections (the ablation switch).
    pub nl_enabled: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub token_gate: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            in_channels: 1,
            stage_channels: [16, 32, 48, 64],
            stage_depths: [1, 1, 2, 2],
            patch_stride: [4, 2, 2, 2],
            num_classes: 7,
            d_state: 8,
            nl_enabled: true,
            alpha: 0.01,
            lambda: 0.5,
            token_gate: false,
        }
    }
}

impl EncoderConfig {
    /// Tiny configuration for exhaustive gradient verification.
    pub fn micro() -> Self {
        EncoderConfig {
            image_size: 8,
            in_channels: 1,
            stage_channels: [4, 4, 6, 6],
            stage_depths: [1, 1, 1, 1],
            patch_stride: [2, 1, 2, 1],
            num_classes: 3,
            d_state: 2,
            nl_enabled: true,
            alpha: 0.05,
            lambda: 0.5,
            token_gate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.in_channels == 0 {
            return Err(Error::config("image_size and in_channels must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.stage_depths.iter().any(|&d| d == 0)
            || self.patch_stride.iter().any(|&s| s == 0)
        {
            return Err(Error::config("stage channels, depths, strides must be positive"));
        }
        let total_stride: usize = self.patch_stride.iter().product();
        if self.image_size % total_stride != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by cumulative stride {total_stride}",
                self.image_size
            )));
        }
        let mut size = self.image_size;
        for s in self.patch_stride {
            if size % s != 0 {
                return Err(Error::config(format!(
                    "spatial size {size} not divisible by stage stride {s}"
                )));
            }
            size /= s;
        }
        if size == 0 {
            return Err(Error::config("strides collapse the grid to zero"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.d_state == 0 {
            return Err(Error::config("d_state must be positive"));
        }
        if self.nl_enabled {
            if !(self.alpha > 0.0 && self.alpha < 1.0) {
                return Err(Error::config(format!("alpha {} outside (0,1)", self.alpha)));
            }
            if !(0.0..=1.0).contains(&self.lambda) {
                return Err(Error::config(format!("lambda {} outside [0,1]", self.lambda)));
            }
        }
        Ok(())
    }

    /// Token grid side length after all four stages.
    pub fn final_grid(&self) -> usize {
        self.image_size / self.patch_stride.iter().product::<usize>()
    }

    /// Feature width of the final stage.
    pub fn final_dim(&self) -> usize {
        self.stage_channels[3]
    }
}

struct Stage {
    embed: Conv,
    embed_norm: Norm,
    conv_blocks: Vec<RegNetBlock>,
    mixer_blocks: Vec<MixerBlock>,
}

/// Encoder output: final token sequence plus pooled features.
pub struct EncoderOut {
    pub tokens: NodeId,
    pub pooled: NodeId,
    pub grid: (usize, usize),
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn build(params: &mut Params, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.in_channels;
        for si in 0..4 {
            let c_out = cfg.stage_channels[si];
            let stride = cfg.patch_stride[si];
            let name = format!("encoder.stage{}", si + 1);
            let embed = Conv::build(
                params,
                &format!("{name}.embed"),
                c_in,
                c_out,
                stride,
                stride,
                0,
                1,
                ParamGroup::Backbone,
                rng,
            );
            let embed_norm = Norm::build(params, &format!("{name}.embed_norm"), c_out, ParamGroup::Backbone);
            let mut conv_blocks = Vec::new();
            let mut mixer_blocks = Vec::new();
            if si < 2 {
                for bi in 0..cfg.stage_depths[si] {
                    conv_blocks.push(RegNetBlock::build(
                        params,
                        &format!("{name}.block{bi}"),
                        c_out,
                        c_out,
                        ParamGroup::Backbone,
                        rng,
                    ));
                }
            } else {
                let mcfg = MixerConfig {
                    d_model: c_out,
                    d_state: cfg.d_state,
                    nl_enabled: cfg.nl_enabled,
                    alpha: cfg.alpha,
                    lambda: cfg.lambda,
                    token_gate: cfg.token_gate,
                };
                for bi in 0..cfg.stage_depths[si] {
                    mixer_blocks.push(MixerBlock::build(
                        params,
                        &format!("{name}.block{bi}"),
                        mcfg,
                        ParamGroup::Backbone,
                        rng,
                    )?);
                }
            }
            stages.push(Stage { embed, embed_norm, conv_blocks, mixer_blocks });
            c_in = c_out;
        }
        Ok(Encoder { cfg: cfg.clone(), stages })
    }

    /// x is [B, in_channels, H, W].
    pub fn forward(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<EncoderOut> {
        let sh = tape.shape(x).to_vec();
        if sh.len() != 4 || sh[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "encoder expects [B,{},H,W], got {sh:?}",
                self.cfg.in_channels
            )));
        }
        let mut cur = x;
        let mut size = sh[2];
        let mut tokens = None;
        for (si, stage) in self.stages.iter().enumerate() {
            cur = stage.embed.forward(tape, params, cur)?;
            cur = stage.embed_norm.forward_channels(tape, params, cur)?;
            size /= self.cfg.patch_stride[si];
            for block in &stage.conv_blocks {
                cur = block.forward(tape, params, cur)?;
            }
            if !stage.mixer_blocks.is_empty() {
                let mut tok = patchify(tape, cur)?;
                for block in &stage.mixer_blocks {
                    tok = block.forward(tape, params, tok)?;
                }
                if si == 3 {
                    tokens = Some(tok);
                } else {
                    cur = unpatchify(tape, tok, size, size)?;
                }
            }
        }
        let tokens = tokens.expect("stage 4 always produces tokens");
        let pooled = tape.mean_tokens(tokens)?;
        Ok(EncoderOut { tokens, pooled, grid: (size, size) })
    }

    /// EMA-consolidate every fast/slow projection (values only).
    pub fn slow_update(&self, params: &mut Params) {
        for stage in &self.stages {
            for block in &stage.mixer_blocks {
                block.slow_update(params);
            }
        }
    }
}

/// Mean-pool-then-project classifier head; a fast/slow projection when
/// `nl_enabled`.
pub struct Head {
    pub proj: Projection,
}

impl Head {
    pub fn build(params: &mut Params, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.final_dim();
        let std = (1.0 / d as f64).sqrt();
        let proj = if cfg.nl_enabled {
            Projection::continuum(
                params,
                "head",
                d,
                cfg.num_classes,
                std,
                cfg.alpha,
                cfg.lambda,
                ParamGroup::Head,
                rng,
            )?
        } else {
            Projection::plain(params, "head", d, cfg.num_classes, std, ParamGroup::Head, rng)
        };
        Ok(Head { proj })
    }

    /// pooled [B,D] -> logits [B,num_classes]
    pub fn forward(&self, tape: &mut Tape, params: &Params, pooled: NodeId) -> Result<NodeId> {
        self.proj.forward(tape, params, pooled)
    }

    pub fn slow_update(&self, params: &mut Params) {
        self.proj.slow_update(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn config_validation_catches_bad_grids() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.image_size = 60; // not divisible by 32
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.stage_depths[2] = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.lambda = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let cfg = EncoderConfig::micro();
        let mut params = Params::new();
        let mut rng = stream(3, "init", 0);
        let enc = Encoder::build(&mut params, &cfg, &mut rng).unwrap();
        let head = Head::build(&mut params, &cfg, &mut rng).unwrap();
        let n = 2 * cfg.image_size * cfg.image_size;
        let x: Vec<f64> = (0..n).map(|i| ((i * 17 + 5) as f64 * 0.013).sin()).collect();
        let mut tape = Tape::new();
        let xn = tape.constant(x, vec![2, 1, cfg.image_size, cfg.image_size]);
        let out = enc.forward(&mut tape, &params, xn).unwrap();
        let g = cfg.final_grid();
        assert_eq!(tape.shape(out.tokens), &[2, g * g, cfg.final_dim()]);
        assert_eq!(tape.shape(out.pooled), &[2, cfg.final_dim()]);
        let logits = head.forward(&mut tape, &params, out.pooled).unwrap();
        assert_eq!(tape.shape(logits), &[2, cfg.num_classes]);
        assert!(tape.value(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn nl_lambda_zero_encoder_matches_plain_bitwise() {
        // the ablation identity: nl_enabled with lambda = 0 must equal the
        // plain encoder bit for bit given identical draws
        let build = |nl: bool| {
            let mut cfg = EncoderConfig::micro();
            cfg.nl_enabled = nl;
            cfg.lambda = 0.0;
            let mut params = Params::new();
            let mut rng = stream(77, "init", 0);
            let enc = Encoder::build(&mut params, &cfg, &mut rng).unwrap();
            let head = Head::build(&mut params, &cfg, &mut rng).unwrap();
            (cfg, params, enc, head)
        };
        let (cfg, params_nl, enc_nl, head_nl) = build(true);
        let (_, params_pl, enc_pl, head_pl) = build(false);
        let n = cfg.image_size * cfg.image_size;
        let x: Vec<f64> = (0..n).map(|i| ((i * 31 + 11) as f64 * 0.017).cos()).collect();
        let run = |params: &Params, enc: &Encoder, head: &Head| -> Vec<f64> {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone(), vec![1, 1, cfg.image_size, cfg.image_size]);
            let out = enc.forward(&mut tape, params, xn).unwrap();
            let logits = head.forward(&mut tape, params, out.pooled).unwrap();
            tape.value(logits).to_vec()
        };
        let a = run(&params_nl, &enc_nl, &head_nl);
        let b = run(&params_pl, &enc_pl, &head_pl);
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_head_zero_features_zero_logits() {
        let cfg = EncoderConfig::micro();
        let mut params = Params::new();
        let mut rng = stream(4, "init", 0);
        let head = Head::build(&mut params, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let feats = tape.constant(vec![0.0; 2 * cfg.final_dim()], vec![2, cfg.final_dim()]);
        let logits = head.forward(&mut tape, &params, feats).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_head_matches_manual_matmul_oracle() {
        let cfg = EncoderConfig::micro();
        let mut params = Params::new();
        let mut rng = stream(5, "init", 0);
        let head = Head::build(&mut params, &cfg, &mut rng).unwrap();
        let d = cfg.final_dim();
        let feats: Vec<f64> = (0..2 * d).map(|i| ((i * 3 + 1) as f64 * 0.21).sin()).collect();
        let mut tape = Tape::new();
        let fn_ = tape.constant(feats.clone(), vec![2, d]);
        let logits = head.forward(&mut tape, &params, fn_).unwrap();
        let w = &params.get(head.proj.w_fast).data;
        let b = &params.get(head.proj.b_fast).data;
        for i in 0..2 {
            for c in 0..cfg.num_classes {
                let mut acc = b[c];
                for k in 0..d {
                    acc += feats[i * d + k] * w[c * d + k];
                }
                let got = tape.value(logits)[i * cfg.num_classes + c];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}
