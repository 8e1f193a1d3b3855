//! Central finite-difference gradient verification.
//!
//! The checker reports relative errors and never throws; callers decide what
//! tolerance to enforce. Relative error uses
//! |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
//!
//! Parameters tied to a stop-gradient trace are perturbed jointly with
//! their trace (same coordinate, same offset), which keeps the sg-captured
//! difference constant. The differenced function is then exactly the one
//! the backward pass differentiates.

use crate::params::{ParamId, Params};

/// One parameter to verify, with an optional companion buffer that must be
/// shifted in lockstep (the slow trace of a fast weight).
#[derive(Clone, Copy)]
pub struct FdSpec {
    pub id: ParamId,
    pub companion: Option<ParamId>,
}

/// Per-parameter verification result.
pub struct FdEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8)
}

/// Coordinates where both sides sit below this are auto-passed: central
/// differences bottom out at ~eps/(2h) of roundoff noise, so a tiny
/// analytic zero against that noise is not a disagreement.
const ABS_FLOOR: f64 = 1e-7;

/// Build specs for every trainable parameter, pairing `*.fast` entries with
/// their `*.slow` trace by name.
pub fn specs_for_trainable(params: &Params) -> Vec<FdSpec> {
    params
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let name = params.name(id);
            let companion = name
                .strip_suffix(".fast")
                .and_then(|stem| params.by_name(&format!("{stem}.slow")));
            FdSpec { id, companion }
        })
        .collect()
}

/// Compare analytic gradients against central differences.
///
/// `loss` evaluates the scalar objective at the current parameter values;
/// it must be deterministic. Analytic gradients are read from each
/// parameter's `grad` field, so run the backward pass (and `write_grads`)
/// before calling. Parameters are restored exactly on exit.
pub fn finite_diff_check(
    params: &mut Params,
    specs: &[FdSpec],
    h: f64,
    mut loss: impl FnMut(&Params) -> f64,
) -> FdReport {
    let mut entries = Vec::new();
    for spec in specs {
        let id = spec.id;
        let name = params.name(id).to_string();
        let n = params.get(id).numel();
        let analytic: Vec<f64> = match &params.get(id).grad {
            Some(g) => g.data.clone(),
            None => vec![0.0; n],
        };
        let mut max_err = 0.0f64;
        for i in 0..n {
            let orig = params.get(id).data[i];
            let orig_c = spec.companion.map(|c| params.get(c).data[i]);
            let mut set = |params: &mut Params, delta: f64| {
                params.get_mut(id).data[i] = orig + delta;
                if let (Some(c), Some(ov)) = (spec.companion, orig_c) {
                    params.get_mut(c).data[i] = ov + delta;
                }
            };
            set(params, h);
            let fplus = loss(params);
            set(params, -h);
            let fminus = loss(params);
            set(params, 0.0);
            let fd = (fplus - fminus) / (2.0 * h);
            if analytic[i].abs() < ABS_FLOOR && fd.abs() < ABS_FLOOR {
                continue;
            }
            let e = rel_err(analytic[i], fd);
            if e > max_err {
                max_err = e;
            }
        }
        entries.push(FdEntry { name, checked: n, max_rel_err: max_err });
    }
    FdReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    // quadratic f(w) = w.w is exact for central differences up to h^2
    #[test]
    fn quadratic_is_exact() {
        let mut params = Params::new();
        let w = params.add(
            "w",
            ParamGroup::Backbone,
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let wn = params.node(&mut tape, w);
        let sq = tape.mul(wn, wn).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        params.write_grads(&tape);
        let specs = [FdSpec { id: w, companion: None }];
        let report = finite_diff_check(&mut params, &specs, 1e-5, |p| {
            let mut t = Tape::new();
            let wn = p.node(&mut t, w);
            let sq = t.mul(wn, wn).unwrap();
            let l = t.sum(sq);
            t.value(l)[0]
        });
        assert!(report.max_rel_err() < 1e-8, "err {}", report.max_rel_err());
    }

    #[test]
    fn gelu_layer_passes_at_1e6() {
        let mut params = Params::new();
        let w = params.add(
            "w",
            ParamGroup::Backbone,
            Tensor::new(vec![3], vec![0.4, -1.3, 0.9]).unwrap(),
        );
        let eval = |p: &Params, grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new();
            let wn = p.node(&mut t, w);
            let g = t.gelu(wn);
            let l = t.sum(g);
            let v = t.value(l)[0];
            if grad {
                t.backward(l).unwrap();
                (v, Some(t.grad(wn).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };
        let (_, g) = eval(&params, true);
        params.get_mut(w).grad = Some(Box::new(
            Tensor::new(vec![3], g.unwrap()).unwrap(),
        ));
        let specs = specs_for_trainable(&params);
        let report = finite_diff_check(&mut params, &specs, 1e-5, |p| eval(p, false).0);
        assert!(report.max_rel_err() < 1e-6, "err {}", report.max_rel_err());
    }
}
