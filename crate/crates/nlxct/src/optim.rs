//! Optimizers: momentum SGD with a slow parameter trajectory, classical
//! momentum SGD, and decoupled-weight-decay Adam for pretraining.
//!
//! The deep-momentum update per step, in order:
//!   g   <- grad + wd * theta          (coupled decay inside the gradient)
//!   v   <- mu * v + g
//!   fast = theta - lr' * v            (lr' = lr * group multiplier)
//!   s   <- rho * s + (1 - rho) * fast (values only, no gradient)
//!   theta = (1 - gamma) * fast + gamma * s
//!
//! With gamma = 0 the mix is skipped outright, so the floating-point path
//! is identical to classical momentum SGD in velocity form; the classical
//! m-form trace relates by m = -lr * v.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, Params};

fn lr_mult(group: ParamGroup, backbone: f64, head: f64) -> f64 {
    match group {
        ParamGroup::Backbone => backbone,
        ParamGroup::Head => head,
    }
}

fn take_grad<'p>(params: &'p Params, id: ParamId) -> Result<&'p [f64]> {
    match &params.get(id).grad {
        Some(g) => Ok(&g.data),
        None => Err(Error::contract(format!(
            "parameter {} has no gradient; run backward first",
            params.name(id)
        ))),
    }
}

// ── Deep momentum ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct DeepMomentumCfg {
    pub lr: f64,
    pub mu: f64,
    pub rho: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub backbone_mult: f64,
    pub head_mult: f64,
}

impl Default for DeepMomentumCfg {
    fn default() -> Self {
        DeepMomentumCfg {
            lr: 1e-2,
            mu: 0.9,
            rho: 0.99,
            gamma: 0.1,
            weight_decay: 0.0,
            backbone_mult: 1.0,
            head_mult: 1.0,
        }
    }
}

impl DeepMomentumCfg {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::config(format!("mu {} outside [0,1)", self.mu)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("rho {} outside (0,1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        Ok(())
    }
}

/// Momentum SGD with an EMA slow trajectory mixed back into the update.
pub struct DeepMomentum {
    pub cfg: DeepMomentumCfg,
    ids: Vec<ParamId>,
    velocity: Vec<Vec<f64>>,
    /// Slow trajectory, initialized to the starting parameters.
    slow: Vec<Vec<f64>>,
}

impl DeepMomentum {
    pub fn new(cfg: DeepMomentumCfg, ids: Vec<ParamId>, params: &Params) -> Result<Self> {
        cfg.validate()?;
        let velocity = ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        let slow = ids.iter().map(|&id| params.get(id).data.clone()).collect();
        Ok(DeepMomentum { cfg, ids, velocity, slow })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        let c = self.cfg;
        for (i, &id) in self.ids.iter().enumerate() {
            let mult = lr_mult(params.group(id), c.backbone_mult, c.head_mult);
            let lr = c.lr * mult;
            let grad = take_grad(params, id)?.to_vec();
            let v = &mut self.velocity[i];
            let s = &mut self.slow[i];
            let theta = &mut params.get_mut(id).data;
            for k in 0..theta.len() {
                let g = grad[k] + c.weight_decay * theta[k];
                v[k] = c.mu * v[k] + g;
                let fast = theta[k] - lr * v[k];
                s[k] = c.rho * s[k] + (1.0 - c.rho) * fast;
                theta[k] = if c.gamma == 0.0 {
                    fast
                } else {
                    (1.0 - c.gamma) * fast + c.gamma * s[k]
                };
            }
        }
        Ok(())
    }

    /// Slow-trajectory snapshot for one parameter (testing hook).
    pub fn slow_of(&self, idx: usize) -> &[f64] {
        &self.slow[idx]
    }
}

// ── Classical momentum SGD ───────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct MomentumCfg {
    pub lr: f64,
    /// The momentum coefficient (the alpha of the m-form recursion).
    pub mu: f64,
    pub weight_decay: f64,
    pub backbone_mult: f64,
    pub head_mult: f64,
}

impl Default for MomentumCfg {
    fn default() -> Self {
        MomentumCfg { lr: 1e-2, mu: 0.9, weight_decay: 0.0, backbone_mult: 1.0, head_mult: 1.0 }
    }
}

/// Classical momentum SGD: m <- alpha m - lr g, W <- W + m.
/// Stored in velocity form (m = -lr * v) so the arithmetic matches the
/// deep-momentum fast path exactly.
pub struct MomentumSgd {
    pub cfg: MomentumCfg,
    ids: Vec<ParamId>,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(cfg: MomentumCfg, ids: Vec<ParamId>, params: &Params) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.mu) {
            return Err(Error::config(format!("momentum {} outside [0,1)", cfg.mu)));
        }
        let velocity = ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        Ok(MomentumSgd { cfg, ids, velocity })
    }

    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        let c = self.cfg;
        for (i, &id) in self.ids.iter().enumerate() {
            let mult = lr_mult(params.group(id), c.backbone_mult, c.head_mult);
            let lr = c.lr * mult;
            let grad = take_grad(params, id)?.to_vec();
            let v = &mut self.velocity[i];
            let theta = &mut params.get_mut(id).data;
            for k in 0..theta.len() {
                let g = grad[k] + c.weight_decay * theta[k];
                v[k] = c.mu * v[k] + g;
                theta[k] -= lr * v[k];
            }
        }
        Ok(())
    }

    /// The m-form momentum trace for one parameter: m = -lr * v.
    pub fn m_trace(&self, idx: usize, params: &Params) -> Vec<f64> {
        let id = self.ids[idx];
        let mult = lr_mult(params.group(id), self.cfg.backbone_mult, self.cfg.head_mult);
        self.velocity[idx].iter().map(|v| -self.cfg.lr * mult * v).collect()
    }
}

// ── Adam with decoupled weight decay ─────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamWCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        AdamWCfg { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamW {
    pub cfg: AdamWCfg,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWCfg, ids: Vec<ParamId>, params: &Params) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::config("betas must lie in [0,1)"));
        }
        let m = ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        Ok(AdamW { cfg, ids, m, v, t: 0 })
    }

    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        let c = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let grad = take_grad(params, id)?.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = &mut params.get_mut(id).data;
            for k in 0..theta.len() {
                // decoupled decay before the adaptive update
                theta[k] *= 1.0 - c.lr * c.weight_decay;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> (Params, ParamId) {
        let mut params = Params::new();
        let id = params.add("w", ParamGroup::Backbone, Tensor::scalar(v));
        (params, id)
    }

    fn set_grad(params: &mut Params, id: ParamId, g: Vec<f64>) {
        let shape = params.get(id).shape.clone();
        params.get_mut(id).grad = Some(Box::new(Tensor::new(shape, g).unwrap()));
    }

    #[test]
    fn deep_momentum_gamma_zero_bit_equals_classical_momentum() {
        // 100 steps on a random quadratic f = 0.5 * sum(a_k w_k^2)
        let n = 6;
        let a: Vec<f64> = (0..n).map(|i| 0.5 + 0.3 * i as f64).collect();
        let w0: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) as f64 * 0.29).sin()).collect();

        let mut p1 = Params::new();
        let id1 = p1.add("w", ParamGroup::Backbone, Tensor::new(vec![n], w0.clone()).unwrap());
        let mut dm = DeepMomentum::new(
            DeepMomentumCfg { lr: 0.05, mu: 0.9, gamma: 0.0, rho: 0.99, weight_decay: 0.01, ..Default::default() },
            vec![id1],
            &p1,
        )
        .unwrap();

        let mut p2 = Params::new();
        let id2 = p2.add("w", ParamGroup::Backbone, Tensor::new(vec![n], w0).unwrap());
        let mut ms = MomentumSgd::new(
            MomentumCfg { lr: 0.05, mu: 0.9, weight_decay: 0.01, ..Default::default() },
            vec![id2],
            &p2,
        )
        .unwrap();

        for _ in 0..100 {
            let g1: Vec<f64> = p1.get(id1).data.iter().zip(a.iter()).map(|(w, av)| av * w).collect();
            set_grad(&mut p1, id1, g1);
            dm.step(&mut p1).unwrap();
            let g2: Vec<f64> = p2.get(id2).data.iter().zip(a.iter()).map(|(w, av)| av * w).collect();
            set_grad(&mut p2, id2, g2);
            ms.step(&mut p2).unwrap();
            assert_eq!(p1.get(id1).data, p2.get(id2).data);
        }
    }

    #[test]
    fn gamma_zero_mu_zero_is_plain_gradient_descent() {
        let (mut params, id) = scalar_param(2.0);
        let mut dm = DeepMomentum::new(
            DeepMomentumCfg { lr: 0.1, mu: 0.0, gamma: 0.0, ..Default::default() },
            vec![id],
            &params,
        )
        .unwrap();
        set_grad(&mut params, id, vec![3.0]);
        dm.step(&mut params).unwrap();
        assert_eq!(params.get(id).data[0], 2.0 - 0.1 * 3.0);
    }

    #[test]
    fn deep_momentum_five_step_scalar_matches_independent_recursion() {
        // theta0 = 1, s0 = 1, g = 1 each step,
        // mu = 0.9, lr = 0.1, rho = 0.99, gamma = 0.1
        let (mut params, id) = scalar_param(1.0);
        let cfg = DeepMomentumCfg {
            lr: 0.1,
            mu: 0.9,
            rho: 0.99,
            gamma: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut dm = DeepMomentum::new(cfg, vec![id], &params).unwrap();
        for _ in 0..5 {
            set_grad(&mut params, id, vec![1.0]);
            dm.step(&mut params).unwrap();
        }
        // independent oracle: the same recursion tracked by hand
        let (mut theta, mut s, mut v) = (1.0f64, 1.0f64, 0.0f64);
        for _ in 0..5 {
            v = 0.9 * v + 1.0;
            let fast = theta - 0.1 * v;
            s = 0.99 * s + 0.01 * fast;
            theta = 0.9 * fast + 0.1 * s;
        }
        assert!((params.get(id).data[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn slow_trajectory_is_exact_ema_of_fast_proposals() {
        // unrolled: s_T = rho^T s0 + (1-rho) sum_t rho^(T-1-t) fast_{t+1}
        let (mut params, id) = scalar_param(0.7);
        let cfg = DeepMomentumCfg { lr: 0.05, mu: 0.8, rho: 0.95, gamma: 0.2, ..Default::default() };
        let mut dm = DeepMomentum::new(cfg, vec![id], &params).unwrap();
        let s0 = 0.7;
        let mut fasts = Vec::new();
        let (mut theta, mut v) = (0.7f64, 0.0f64);
        let mut s_shadow = s0;
        for t in 0..12 {
            let g = (t as f64 * 0.37).sin() + 0.2;
            set_grad(&mut params, id, vec![g]);
            dm.step(&mut params).unwrap();
            v = 0.8 * v + g;
            let fast = theta - 0.05 * v;
            fasts.push(fast);
            s_shadow = 0.95 * s_shadow + 0.05 * fast;
            theta = 0.8 * fast + 0.2 * s_shadow;
        }
        let t_total = fasts.len();
        let mut unrolled = 0.95f64.powi(t_total as i32) * s0;
        for (t, f) in fasts.iter().enumerate() {
            unrolled += 0.05 * 0.95f64.powi((t_total - 1 - t) as i32) * f;
        }
        assert!((dm.slow_of(0)[0] - unrolled).abs() < 1e-12);
    }

    #[test]
    fn deep_momentum_converges_on_convex_quadratic() {
        // f(theta) = 0.5 theta' A theta, well-conditioned diagonal A
        let n = 4;
        let a = [1.0, 1.3, 0.8, 1.1];
        let w0: Vec<f64> = vec![0.5; n]; // norm 1
        let mut params = Params::new();
        let id = params.add("w", ParamGroup::Backbone, Tensor::new(vec![n], w0).unwrap());
        let mut dm = DeepMomentum::new(
            DeepMomentumCfg { lr: 0.1, ..Default::default() },
            vec![id],
            &params,
        )
        .unwrap();
        let mut fval = f64::INFINITY;
        for _ in 0..2000 {
            let w = params.get(id).data.clone();
            fval = 0.5 * w.iter().zip(a.iter()).map(|(x, av)| av * x * x).sum::<f64>();
            if fval < 1e-6 {
                break;
            }
            let g: Vec<f64> = w.iter().zip(a.iter()).map(|(x, av)| av * x).collect();
            set_grad(&mut params, id, g);
            dm.step(&mut params).unwrap();
        }
        assert!(fval < 1e-6, "f stayed at {fval}");
    }

    #[test]
    fn slow_mix_damps_oscillation_on_stiff_quadratic() {
        // momentum picks eta, mu at the oscillatory edge; mixing in the slow
        // trajectory must shrink the variance of the final iterates
        let run = |gamma: f64| -> f64 {
            let (mut params, id) = scalar_param(1.0);
            let cfg = DeepMomentumCfg {
                lr: 3.0,
                mu: 0.9,
                rho: 0.9,
                gamma,
                ..Default::default()
            };
            let mut dm = DeepMomentum::new(cfg, vec![id], &params).unwrap();
            let mut tail = Vec::new();
            for t in 0..400 {
                let w = params.get(id).data[0];
                set_grad(&mut params, id, vec![w]);
                dm.step(&mut params).unwrap();
                if t >= 300 {
                    tail.push(params.get(id).data[0]);
                }
            }
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            tail.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / tail.len() as f64
        };
        let var_plain = run(0.0);
        let var_mixed = run(0.3);
        assert!(
            var_mixed < var_plain,
            "gamma=0.3 variance {var_mixed} not below gamma=0 variance {var_plain}"
        );
    }

    #[test]
    fn momentum_sgd_alpha_zero_and_zero_grad_behaviour() {
        let (mut params, id) = scalar_param(1.0);
        let mut ms = MomentumSgd::new(
            MomentumCfg { lr: 0.2, mu: 0.0, ..Default::default() },
            vec![id],
            &params,
        )
        .unwrap();
        set_grad(&mut params, id, vec![0.5]);
        ms.step(&mut params).unwrap();
        assert_eq!(params.get(id).data[0], 1.0 - 0.2 * 0.5);

        // zero gradient stream: W constant, the m-trace decays geometrically
        let (mut params, id) = scalar_param(2.0);
        let mut ms = MomentumSgd::new(
            MomentumCfg { lr: 0.2, mu: 0.5, ..Default::default() },
            vec![id],
            &params,
        )
        .unwrap();
        set_grad(&mut params, id, vec![1.0]);
        ms.step(&mut params).unwrap();
        let m1 = ms.m_trace(0, &params)[0];
        let w1 = params.get(id).data[0];
        for k in 1..=4 {
            set_grad(&mut params, id, vec![0.0]);
            ms.step(&mut params).unwrap();
            let mk = ms.m_trace(0, &params)[0];
            assert!((mk - m1 * 0.5f64.powi(k)).abs() < 1e-15);
        }
        // W moves by the decaying momentum only
        let expect = w1 + m1 * (0.5 + 0.25 + 0.125 + 0.0625);
        assert!((params.get(id).data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn momentum_sgd_three_step_trace_matches_hand_recursion() {
        // hand recursion in the m-form: m <- alpha m - lr g; W <- W + m
        let (mut params, id) = scalar_param(0.3);
        let (lr, alpha) = (0.07, 0.6);
        let mut ms = MomentumSgd::new(
            MomentumCfg { lr, mu: alpha, ..Default::default() },
            vec![id],
            &params,
        )
        .unwrap();
        let grads = [0.9, -0.4, 0.15];
        let (mut w, mut m) = (0.3f64, 0.0f64);
        for &g in &grads {
            set_grad(&mut params, id, vec![g]);
            ms.step(&mut params).unwrap();
            m = alpha * m - lr * g;
            w += m;
        }
        assert!((params.get(id).data[0] - w).abs() < 1e-15);
        assert!((ms.m_trace(0, &params)[0] - m).abs() < 1e-15);
    }

    #[test]
    fn group_multipliers_touch_only_their_group() {
        let mut params = Params::new();
        let wb = params.add("backbone.w", ParamGroup::Backbone, Tensor::scalar(1.0));
        let wh = params.add("head.w", ParamGroup::Head, Tensor::scalar(1.0));
        let cfg = DeepMomentumCfg {
            lr: 0.1,
            mu: 0.0,
            gamma: 0.0,
            backbone_mult: 0.1,
            head_mult: 20.0,
            ..Default::default()
        };
        let mut dm = DeepMomentum::new(cfg, vec![wb, wh], &params).unwrap();
        set_grad(&mut params, wb, vec![1.0]);
        set_grad(&mut params, wh, vec![1.0]);
        dm.step(&mut params).unwrap();
        assert!((params.get(wb).data[0] - (1.0 - 0.1 * 0.1)).abs() < 1e-15);
        assert!((params.get(wh).data[0] - (1.0 - 0.1 * 20.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grads_and_pure_decay() {
        let (mut params, id) = scalar_param(1.5);
        let mut ad = AdamW::new(AdamWCfg::default(), vec![id], &params).unwrap();
        set_grad(&mut params, id, vec![0.0]);
        ad.step(&mut params).unwrap();
        assert_eq!(params.get(id).data[0], 1.5);

        let (mut params, id) = scalar_param(2.0);
        let cfg = AdamWCfg { lr: 0.1, weight_decay: 0.05, ..Default::default() };
        let mut ad = AdamW::new(cfg, vec![id], &params).unwrap();
        for _ in 0..3 {
            set_grad(&mut params, id, vec![0.0]);
            ad.step(&mut params).unwrap();
        }
        let expect = 2.0 * (1.0 - 0.1 * 0.05f64).powi(3);
        assert!((params.get(id).data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // first step with constant grad g: theta -= lr * g / (|g| + eps)
        let (mut params, id) = scalar_param(0.4);
        let cfg = AdamWCfg { lr: 0.01, eps: 1e-8, weight_decay: 0.0, ..Default::default() };
        let mut ad = AdamW::new(cfg, vec![id], &params).unwrap();
        let g = -0.7;
        set_grad(&mut params, id, vec![g]);
        ad.step(&mut params).unwrap();
        let expect = 0.4 - 0.01 * g / (g.abs() + 1e-8);
        assert!((params.get(id).data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut params, id) = scalar_param(1.0);
        let mut dm = DeepMomentum::new(DeepMomentumCfg::default(), vec![id], &params).unwrap();
        assert!(matches!(
            dm.step(&mut params),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
