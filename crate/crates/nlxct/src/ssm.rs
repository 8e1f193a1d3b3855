//! Selective state-space sequence mixing over patch tokens.
//!
//! The mixer applies a diagonal linear recurrence per channel lane with
//! input-dependent multiplicative gating. The sequential scan is the
//! contract; the chunked variant is an algebraically equal reformulation
//! that must match it within 1e-10.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Norm, Projection};
use crate::params::{ParamGroup, ParamId, Params};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── Pure scan kernels ────────────────────────────────────────────────

/// Sequential reference scan.
///
/// u is [B,N,D]; a, b, c are [D*S] lane parameters; out is [B,N,D] with
/// y_n[d] = sum_j c[d,j] * s_n[d,j], s_n = a .* s_{n-1} + b .* u_n.
#[allow(clippy::too_many_arguments)]
pub fn scan_sequential(
    u: &[f64],
    batch: usize,
    n: usize,
    d: usize,
    s: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(u.len(), batch * n * d);
    debug_assert_eq!(out.len(), batch * n * d);
    for bi in 0..batch {
        let mut state = vec![0.0; d * s];
        for ni in 0..n {
            let off = (bi * n + ni) * d;
            for dd in 0..d {
                let uv = u[off + dd];
                let mut y = 0.0;
                for j in 0..s {
                    let idx = dd * s + j;
                    let sv = a[idx] * state[idx] + b[idx] * uv;
                    state[idx] = sv;
                    y += c[idx] * sv;
                }
                out[off + dd] = y;
            }
        }
    }
}

/// Chunked scan: each chunk is scanned from a zero state, then the carried
/// state is folded in through powered decays. Equal to the sequential scan
/// up to floating-point reassociation.
#[allow(clippy::too_many_arguments)]
pub fn scan_chunked(
    u: &[f64],
    batch: usize,
    n: usize,
    d: usize,
    s: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    chunk: usize,
    out: &mut [f64],
) {
    debug_assert!(chunk >= 1);
    let lanes = d * s;
    let mut local = vec![0.0; lanes];
    let mut carry = vec![0.0; lanes];
    let mut decay_pow = vec![0.0; lanes];
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = 0.0);
        let mut start = 0usize;
        while start < n {
            let len = chunk.min(n - start);
            local.iter_mut().for_each(|v| *v = 0.0);
            decay_pow.copy_from_slice(a);
            for k in 0..len {
                let off = (bi * n + start + k) * d;
                for dd in 0..d {
                    let uv = u[off + dd];
                    let mut y = 0.0;
                    for j in 0..s {
                        let idx = dd * s + j;
                        let lv = a[idx] * local[idx] + b[idx] * uv;
                        local[idx] = lv;
                        // fold the carried state through a^(k+1)
                        y += c[idx] * (lv + decay_pow[idx] * carry[idx]);
                    }
                    out[off + dd] = y;
                }
                if k + 1 < len {
                    for idx in 0..lanes {
                        decay_pow[idx] *= a[idx];
                    }
                }
            }
            for idx in 0..lanes {
                carry[idx] = local[idx] + decay_pow[idx] * carry[idx];
            }
            start += len;
        }
    }
}

// ── Mixer block ──────────────────────────────────────────────────────

/// Configuration for one mixer block.
#[derive(Clone, Copy, Debug)]
pub struct MixerConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub nl_enabled: bool,
    pub alpha: f64,
    pub lambda: f64,
    /// Config-gated global token gate (off by default).
    pub token_gate: bool,
}

/// Pre-norm gated SSM block:
/// norm -> input/gate projections -> scan -> gated combine -> output
/// projection -> residual add. Projections carry slow traces when
/// `nl_enabled`.
pub struct MixerBlock {
    pub norm: Norm,
    pub in_proj: Projection,
    pub gate_proj: Projection,
    pub out_proj: Projection,
    pub decay_logit: ParamId,
    pub input_vec: ParamId,
    pub readout_vec: ParamId,
    pub token_gate: Option<Projection>,
    pub d_model: usize,
    pub d_state: usize,
}

impl MixerBlock {
    pub fn build(
        params: &mut Params,
        name: &str,
        cfg: MixerConfig,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let s = cfg.d_state;
        let std = (1.0 / d as f64).sqrt();
        let proj = |params: &mut Params, nm: &str, scale: f64, rng: &mut ChaCha8Rng| -> Result<Projection> {
            if cfg.nl_enabled {
                Projection::continuum(
                    params, nm, d, d, std * scale, cfg.alpha, cfg.lambda, group, rng,
                )
            } else {
                Ok(Projection::plain(params, nm, d, d, std * scale, group, rng))
            }
        };
        let in_proj = proj(params, &format!("{name}.in_proj"), 1.0, rng)?;
        let gate_proj = proj(params, &format!("{name}.gate_proj"), 1.0, rng)?;
        let out_proj = proj(params, &format!("{name}.out_proj"), 0.5, rng)?;
        let norm = Norm::build(params, &format!("{name}.norm"), d, group);

        // lane parameters: decays spread over (0.5, 0.95) per state lane,
        // unit input vector, readout scaled for unit DC gain
        let lanes = d * s;
        let mut logits = vec![0.0; lanes];
        let mut bvec = vec![1.0; lanes];
        let mut cvec = vec![0.0; lanes];
        for dd in 0..d {
            for j in 0..s {
                let frac = if s > 1 { j as f64 / (s - 1) as f64 } else { 0.5 };
                let decay: f64 = 0.5 + 0.45 * frac;
                logits[dd * s + j] = (decay / (1.0 - decay)).ln();
                bvec[dd * s + j] = 1.0;
                cvec[dd * s + j] = (1.0 - decay) / s as f64;
            }
        }
        let decay_logit = params.add(
            format!("{name}.decay_logit"),
            group,
            Tensor::new(vec![lanes], logits).expect("lane shape"),
        );
        let input_vec = params.add(
            format!("{name}.input_vec"),
            group,
            Tensor::new(vec![lanes], bvec).expect("lane shape"),
        );
        let readout_vec = params.add(
            format!("{name}.readout_vec"),
            group,
            Tensor::new(vec![lanes], cvec).expect("lane shape"),
        );
        let token_gate = if cfg.token_gate {
            Some(proj(params, &format!("{name}.token_gate"), 1.0, rng)?)
        } else {
            None
        };
        Ok(MixerBlock {
            norm,
            in_proj,
            gate_proj,
            out_proj,
            decay_logit,
            input_vec,
            readout_vec,
            token_gate,
            d_model: d,
            d_state: s,
        })
    }

    /// tokens [B,N,D] -> [B,N,D]
    pub fn forward(&self, tape: &mut Tape, params: &Params, tokens: NodeId) -> Result<NodeId> {
        let sh = tape.shape(tokens).to_vec();
        if sh.len() != 3 || sh[2] != self.d_model {
            return Err(Error::dim(format!(
                "mixer expects [B,N,{}], got {sh:?}",
                self.d_model
            )));
        }
        let h = self.norm.forward_tokens(tape, params, tokens)?;
        let u = self.in_proj.forward_tokens(tape, params, h)?;
        let g_lin = self.gate_proj.forward_tokens(tape, params, h)?;
        let gate = tape.sigmoid(g_lin);
        let logit = params.node(tape, self.decay_logit);
        let decay = tape.sigmoid(logit);
        let bvec = params.node(tape, self.input_vec);
        let cvec = params.node(tape, self.readout_vec);
        let y = tape.ssm_scan(u, decay, bvec, cvec, self.d_state)?;
        let y = tape.mul(y, gate)?;
        let y = self.out_proj.forward_tokens(tape, params, y)?;
        let y = match &self.token_gate {
            Some(proj) => {
                let pooled = tape.mean_tokens(h)?;
                let glob = proj.forward(tape, params, pooled)?;
                let glob = tape.sigmoid(glob);
                tape.mul_bd(y, glob)?
            }
            None => y,
        };
        tape.add(tokens, y)
    }

    pub fn slow_update(&self, params: &mut Params) {
        self.in_proj.slow_update(params);
        self.gate_proj.slow_update(params);
        self.out_proj.slow_update(params);
        if let Some(p) = &self.token_gate {
            p.slow_update(params);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
    }

    #[test]
    fn chunked_matches_sequential_small() {
        let mut rng = stream(5, "test", 0);
        for &(n, d, s, chunk) in &[(7usize, 3usize, 2usize, 3usize), (16, 2, 4, 5), (33, 1, 1, 8)] {
            let u = rand_vec(&mut rng, 2 * n * d, 1.0);
            let a: Vec<f64> = (0..d * s).map(|_| rng.gen::<f64>() * 0.9 + 0.05).collect();
            let b = rand_vec(&mut rng, d * s, 1.0);
            let c = rand_vec(&mut rng, d * s, 1.0);
            let mut seq = vec![0.0; u.len()];
            let mut chk = vec![0.0; u.len()];
            scan_sequential(&u, 2, n, d, s, &a, &b, &c, &mut seq);
            scan_chunked(&u, 2, n, d, s, &a, &b, &c, chunk, &mut chk);
            for (x, y) in seq.iter().zip(chk.iter()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn scan_is_linear_in_input() {
        let mut rng = stream(6, "test", 0);
        let (n, d, s) = (9, 2, 3);
        let u = rand_vec(&mut rng, n * d, 1.0);
        let v = rand_vec(&mut rng, n * d, 1.0);
        let a: Vec<f64> = (0..d * s).map(|_| rng.gen::<f64>() * 0.9).collect();
        let b = rand_vec(&mut rng, d * s, 1.0);
        let c = rand_vec(&mut rng, d * s, 1.0);
        let run = |input: &[f64]| {
            let mut out = vec![0.0; input.len()];
            scan_sequential(input, 1, n, d, s, &a, &b, &c, &mut out);
            out
        };
        let yu = run(&u);
        let yv = run(&v);
        let sum: Vec<f64> = u.iter().zip(v.iter()).map(|(x, y)| x + y).collect();
        let ysum = run(&sum);
        let scaled: Vec<f64> = u.iter().map(|x| 2.5 * x).collect();
        let yscaled = run(&scaled);
        for i in 0..u.len() {
            assert!((ysum[i] - (yu[i] + yv[i])).abs() < 1e-12);
            assert!((yscaled[i] - 2.5 * yu[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_is_causal() {
        let mut rng = stream(7, "test", 0);
        let (n, d, s) = (12, 2, 2);
        let u = rand_vec(&mut rng, n * d, 1.0);
        let a: Vec<f64> = (0..d * s).map(|_| rng.gen::<f64>() * 0.9).collect();
        let b = rand_vec(&mut rng, d * s, 1.0);
        let c = rand_vec(&mut rng, d * s, 1.0);
        let mut base = vec![0.0; u.len()];
        scan_sequential(&u, 1, n, d, s, &a, &b, &c, &mut base);
        // perturb position m; outputs before m must be bit-identical
        let m = 5;
        let mut pert = u.clone();
        for dd in 0..d {
            pert[m * d + dd] += 10.0;
        }
        let mut out = vec![0.0; u.len()];
        scan_sequential(&pert, 1, n, d, s, &a, &b, &c, &mut out);
        for i in 0..m * d {
            assert_eq!(base[i], out[i]);
        }
        assert!(out[m * d] != base[m * d]);
    }

    #[test]
    fn scan_geometric_stability_bound() {
        let mut rng = stream(8, "test", 0);
        let (n, d, s) = (256, 3, 2);
        let m = 1.0;
        let u = rand_vec(&mut rng, n * d, m);
        let a: Vec<f64> = (0..d * s).map(|_| rng.gen::<f64>() * 0.94 + 0.01).collect();
        let b = rand_vec(&mut rng, d * s, 1.5);
        let c = rand_vec(&mut rng, d * s, 1.5);
        let mut out = vec![0.0; u.len()];
        scan_sequential(&u, 1, n, d, s, &a, &b, &c, &mut out);
        let amax = a.iter().cloned().fold(0.0, f64::max);
        let mut bound = 0.0f64;
        for dd in 0..d {
            let lane_sum: f64 = (0..s).map(|j| (c[dd * s + j] * b[dd * s + j]).abs()).sum();
            bound = bound.max(m * lane_sum / (1.0 - amax));
        }
        for v in &out {
            assert!(v.abs() <= bound + 1e-9, "{v} vs bound {bound}");
        }
    }

    #[test]
    fn mixer_with_zero_out_proj_is_identity() {
        let mut params = Params::new();
        let mut rng = stream(9, "init", 0);
        let cfg = MixerConfig {
            d_model: 6,
            d_state: 2,
            nl_enabled: false,
            alpha: 0.01,
            lambda: 0.5,
            token_gate: false,
        };
        let block = MixerBlock::build(&mut params, "mix", cfg, ParamGroup::Backbone, &mut rng).unwrap();
        for v in params.get_mut(block.out_proj.w_fast).data.iter_mut() {
            *v = 0.0;
        }
        let x: Vec<f64> = (0..2 * 4 * 6).map(|i| ((i * 3 + 1) as f64 * 0.11).sin()).collect();
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone(), vec![2, 4, 6]);
        let y = block.forward(&mut tape, &params, xn).unwrap();
        assert_eq!(tape.value(y), &x[..]);
    }

    #[test]
    fn mixer_nl_lambda_zero_equals_plain() {
        let x: Vec<f64> = (0..1 * 5 * 4).map(|i| ((i * 7 + 2) as f64 * 0.19).cos()).collect();
        let build = |nl: bool| -> (Params, MixerBlock) {
            let mut params = Params::new();
            let mut rng = stream(42, "init", 0);
            let cfg = MixerConfig {
                d_model: 4,
                d_state: 2,
                nl_enabled: nl,
                alpha: 0.05,
                lambda: 0.0,
                token_gate: false,
            };
            let b = MixerBlock::build(&mut params, "mix", cfg, ParamGroup::Backbone, &mut rng).unwrap();
            (params, b)
        };
        let (params_nl, block_nl) = build(true);
        let (params_pl, block_pl) = build(false);
        let mut t1 = Tape::new();
        let x1 = t1.constant(x.clone(), vec![1, 5, 4]);
        let y1 = block_nl.forward(&mut t1, &params_nl, x1).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(x, vec![1, 5, 4]);
        let y2 = block_pl.forward(&mut t2, &params_pl, x2).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn mixer_gradients_pass_finite_difference_check() {
        use crate::fdcheck::{finite_diff_check, specs_for_trainable};
        let mut params = Params::new();
        let mut rng = stream(11, "init", 0);
        let cfg = MixerConfig {
            d_model: 4,
            d_state: 2,
            nl_enabled: true,
            alpha: 0.05,
            lambda: 0.5,
            token_gate: true,
        };
        let block = MixerBlock::build(&mut params, "mix", cfg, ParamGroup::Backbone, &mut rng).unwrap();
        // desynchronize traces so the blend path is exercised
        if let Some((ws, _)) = block.in_proj.slow {
            for (i, v) in params.get_mut(ws).data.iter_mut().enumerate() {
                *v += 0.05 * ((i % 5) as f64 - 2.0);
            }
        }
        let x: Vec<f64> = (0..1 * 6 * 4).map(|i| ((i * 13 + 3) as f64 * 0.07).sin()).collect();
        let run = |tape: &mut Tape, params: &Params| -> f64 {
            let xn = tape.constant(x.clone(), vec![1, 6, 4]);
            let y = block.forward(tape, params, xn).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq);
            tape.value(l)[0]
        };
        let mut tape = Tape::new();
        {
            let xn = tape.constant(x.clone(), vec![1, 6, 4]);
            let y = block.forward(&mut tape, &params, xn).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
        }
        params.write_grads(&tape);
        let specs = specs_for_trainable(&params);
        let report = finite_diff_check(&mut params, &specs, 1e-5, |p| {
            let mut t = Tape::new();
            run(&mut t, p)
        });
        assert!(
            report.max_rel_err() < 1e-4,
            "max rel err {}",
            report.max_rel_err()
        );
    }
}
