//! Parameterized layers: fast/slow linear projections, conv bottleneck
//! blocks, patch embedding, normalization, and the classifier head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, Params};
use crate::tape::{NodeId, NormLayout, Tape};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data")
}

// ── Linear projection with optional slow trace ──────────────────────

/// Linear projection `u = W h + b`, optionally carrying a slow EMA trace of
/// its fast weights.
///
/// With the trace enabled the forward pass blends
/// `W~ = W_fast + lambda * sg(W_slow - W_fast)` (likewise for the bias),
/// where `sg` is a stop-gradient: the blend term enters as a constant, so
/// the fast weights receive exactly the gradient a plain linear layer
/// evaluated at `W~` would receive, and the slow weights receive none.
pub struct Projection {
    pub w_fast: ParamId,
    pub b_fast: ParamId,
    /// (w_slow, b_slow) buffers; `None` for a plain projection.
    pub slow: Option<(ParamId, ParamId)>,
    pub alpha: f64,
    pub lambda: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl Projection {
    pub fn plain(
        params: &mut Params,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = normal_tensor(rng, vec![d_out, d_in], std);
        let b = Tensor::zeros(vec![d_out]);
        Projection {
            w_fast: params.add(format!("{name}.weight"), group, w),
            b_fast: params.add(format!("{name}.bias"), group, b),
            slow: None,
            alpha: 0.0,
            lambda: 0.0,
            d_in,
            d_out,
        }
    }

    /// Two-timescale projection. The slow trace starts equal to the fast
    /// weights so the blend term is zero at step 0.
    #[allow(clippy::too_many_arguments)]
    pub fn continuum(
        params: &mut Params,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        alpha: f64,
        lambda: f64,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!("lambda must lie in [0,1], got {lambda}")));
        }
        let w = normal_tensor(rng, vec![d_out, d_in], std);
        let b = Tensor::zeros(vec![d_out]);
        let w_slow = w.clone();
        let b_slow = b.clone();
        let w_fast = params.add(format!("{name}.weight.fast"), group, w);
        let b_fast = params.add(format!("{name}.bias.fast"), group, b);
        let ws = params.add_buffer(format!("{name}.weight.slow"), group, w_slow);
        let bs = params.add_buffer(format!("{name}.bias.slow"), group, b_slow);
        Ok(Projection {
            w_fast,
            b_fast,
            slow: Some((ws, bs)),
            alpha,
            lambda,
            d_in,
            d_out,
        })
    }

    /// Effective (weight, bias) nodes for this step.
    fn effective(&self, tape: &mut Tape, params: &Params) -> (NodeId, NodeId) {
        let wf = params.node(tape, self.w_fast);
        let bf = params.node(tape, self.b_fast);
        match self.slow {
            // lambda == 0 takes the plain path so it is bit-identical to a
            // plain projection with the same fast weights
            Some((ws, bs)) if self.lambda != 0.0 => {
                let lam = self.lambda;
                let wdelta: Vec<f64> = params
                    .get(ws)
                    .data
                    .iter()
                    .zip(params.get(self.w_fast).data.iter())
                    .map(|(s, f)| lam * (s - f))
                    .collect();
                let bdelta: Vec<f64> = params
                    .get(bs)
                    .data
                    .iter()
                    .zip(params.get(self.b_fast).data.iter())
                    .map(|(s, f)| lam * (s - f))
                    .collect();
                let wd = tape.constant(wdelta, vec![self.d_out, self.d_in]);
                let bd = tape.constant(bdelta, vec![self.d_out]);
                let we = tape.add(wf, wd).expect("blend shapes");
                let be = tape.add(bf, bd).expect("blend shapes");
                (we, be)
            }
            _ => (wf, bf),
        }
    }

    /// x is [M, d_in]; returns [M, d_out].
    pub fn forward(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let sx = tape.shape(x);
        if sx.len() != 2 || sx[1] != self.d_in {
            return Err(Error::dim(format!(
                "projection expects [M,{}], got {sx:?}",
                self.d_in
            )));
        }
        let (w, b) = self.effective(tape, params);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    /// Tokens [B,N,D_in] -> [B,N,D_out].
    pub fn forward_tokens(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("forward_tokens expects rank 3, got {s:?}")));
        }
        let flat = tape.reshape(x, vec![s[0] * s[1], s[2]])?;
        let y = self.forward(tape, params, flat)?;
        tape.reshape(y, vec![s[0], s[1], self.d_out])
    }

    /// EMA consolidation: slow <- (1-alpha) slow + alpha fast. Values only;
    /// never recorded on a tape. Call once per optimizer step, after the
    /// fast weights moved.
    pub fn slow_update(&self, params: &mut Params) {
        if let Some((ws, bs)) = self.slow {
            let a = self.alpha;
            for (slow_id, fast_id) in [(ws, self.w_fast), (bs, self.b_fast)] {
                let fast = params.get(fast_id).data.clone();
                let slow = &mut params.get_mut(slow_id).data;
                for (s, f) in slow.iter_mut().zip(fast.iter()) {
                    *s = (1.0 - a) * *s + a * f;
                }
            }
        }
    }
}

// ── Normalization ────────────────────────────────────────────────────

/// Layer normalization with learnable scale (init 1) and shift (init 0).
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

impl Norm {
    pub fn build(params: &mut Params, name: &str, d: usize, group: ParamGroup) -> Self {
        let gamma = Tensor::new(vec![d], vec![1.0; d]).expect("norm scale");
        let beta = Tensor::zeros(vec![d]);
        Norm {
            gamma: params.add(format!("{name}.scale"), group, gamma),
            beta: params.add(format!("{name}.shift"), group, beta),
            d,
        }
    }

    /// Normalize the trailing feature axis of [..., D].
    pub fn forward_tokens(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let n = tape.numel(x);
        if n % self.d != 0 {
            return Err(Error::dim(format!("norm d={} on {n} elements", self.d)));
        }
        let g = params.node(tape, self.gamma);
        let b = params.node(tape, self.beta);
        tape.layer_norm(x, g, b, NormLayout::LastDim { groups: n / self.d, d: self.d }, LN_EPS)
    }

    /// Normalize the channel axis of a [B,C,H,W] map.
    pub fn forward_channels(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.d {
            return Err(Error::dim(format!("channel norm d={} on {s:?}", self.d)));
        }
        let g = params.node(tape, self.gamma);
        let b = params.node(tape, self.beta);
        tape.layer_norm(
            x,
            g,
            b,
            NormLayout::Channels { b: s[0], c: s[1], h: s[2], w: s[3] },
            LN_EPS,
        )
    }
}

// ── Convolution layers ───────────────────────────────────────────────

pub struct Conv {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        params: &mut Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = normal_tensor(rng, vec![c_out, c_in / groups, k, k], std);
        Conv {
            w: params.add(format!("{name}.weight"), group, w),
            stride,
            pad,
            groups,
            c_in,
            c_out,
            k,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let w = params.node(tape, self.w);
        tape.conv2d(x, w, self.stride, self.pad, self.groups)
    }
}

/// Largest divisor of `c` not exceeding `cap`; the RegNet group-width rule
/// at toy channel counts.
pub fn group_width(c: usize, cap: usize) -> usize {
    (1..=cap.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Bottleneck residual block: 1x1 reduce, 3x3 grouped conv, 1x1 expand,
/// each followed by channel normalization and gelu; projected shortcut when
/// the channel count changes.
pub struct RegNetBlock {
    reduce: Conv,
    norm1: Norm,
    grouped: Conv,
    norm2: Norm,
    expand: Conv,
    norm3: Norm,
    shortcut: Option<Conv>,
    pub c_in: usize,
    pub c_out: usize,
}

impl RegNetBlock {
    pub fn build(
        params: &mut Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cb = (c_out / 2).max(1);
        let gw = group_width(cb, 8);
        let reduce = Conv::build(params, &format!("{name}.reduce"), c_in, cb, 1, 1, 0, 1, group, rng);
        let norm1 = Norm::build(params, &format!("{name}.norm1"), cb, group);
        let grouped = Conv::build(
            params,
            &format!("{name}.grouped"),
            cb,
            cb,
            3,
            1,
            1,
            cb / gw,
            group,
            rng,
        );
        let norm2 = Norm::build(params, &format!("{name}.norm2"), cb, group);
        let expand = Conv::build(params, &format!("{name}.expand"), cb, c_out, 1, 1, 0, 1, group, rng);
        let norm3 = Norm::build(params, &format!("{name}.norm3"), c_out, group);
        let shortcut = if c_in != c_out {
            Some(Conv::build(params, &format!("{name}.shortcut"), c_in, c_out, 1, 1, 0, 1, group, rng))
        } else {
            None
        };
        RegNetBlock { reduce, norm1, grouped, norm2, expand, norm3, shortcut, c_in, c_out }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.c_in {
            return Err(Error::dim(format!(
                "regnet block expects {} channels, got {s:?}",
                self.c_in
            )));
        }
        let y = self.reduce.forward(tape, params, x)?;
        let y = self.norm1.forward_channels(tape, params, y)?;
        let y = tape.gelu(y);
        let y = self.grouped.forward(tape, params, y)?;
        let y = self.norm2.forward_channels(tape, params, y)?;
        let y = tape.gelu(y);
        let y = self.expand.forward(tape, params, y)?;
        let y = self.norm3.forward_channels(tape, params, y)?;
        let y = tape.gelu(y);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(tape, params, x)?,
            None => x,
        };
        tape.add(y, sc)
    }
}

// ── Token/map reshaping ──────────────────────────────────────────────

/// [B,D,H,W] -> [B,N,D] with N = H*W, row-major over the spatial grid.
pub fn patchify(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("patchify expects rank 4, got {s:?}")));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(x, vec![b, d, h * w])?;
    tape.swap_last2(flat)
}

/// [B,N,D] -> [B,D,H,W]; errors when N != h*w.
pub fn unpatchify(tape: &mut Tape, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("unpatchify expects rank 3, got {s:?}")));
    }
    if s[1] != h * w {
        return Err(Error::dim(format!(
            "unpatchify N={} vs grid {h}x{w}",
            s[1]
        )));
    }
    let swapped = tape.swap_last2(x)?;
    tape.reshape(swapped, vec![s[0], s[2], h, w])
}
