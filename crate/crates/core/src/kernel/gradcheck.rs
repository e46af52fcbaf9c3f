//! Central finite-difference check of the analytic backward pass.
//!
//! The scalar probed is a fixed random linear readout of all logits. ReLU
//! and max-pool make the network piecewise linear; when a `±h` step crosses
//! a kink (some gate or pooling switch flips) the difference is taken on
//! the linear piece of the unperturbed point instead, which is the
//! derivative the backward pass is defined to return.

use rayon::prelude::*;

use super::arch::{Model, ModelSpec, Trace};
use super::tensor::Tensor3;
use crate::error::Result;
use crate::rng::Lcg64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub worst_param: String,
    /// Parameters whose step crossed a kink.
    pub kink_crossings: usize,
}

fn readout(trace: &Trace<f64>, r: &[Tensor3<f64>]) -> f64 {
    trace.logits.iter().zip(r).map(|(l, r)| l.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()).sum()
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks every parameter of a freshly built `spec` model on a random
/// `in_channels x size x size` input.
pub fn gradient_check(spec: &ModelSpec, size: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    let model = Model::<f64>::build(spec, seed)?;
    let mut rng = Lcg64::derive(seed, 7);
    let n = spec.in_channels * size * size;
    let input = Tensor3::from_vec(spec.in_channels, size, size, (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect());
    let base = model.forward(&input)?;
    let r: Vec<Tensor3<f64>> = base
        .logits
        .iter()
        .map(|l| Tensor3::from_vec(l.c, l.h, l.w, (0..l.data.len()).map(|_| rng.next_f64() * 2.0 - 1.0).collect()))
        .collect();
    let mut grads = model.zero_grads();
    model.backward(&base, &r, &mut grads);

    let index: Vec<(usize, usize)> =
        model.params.tensors.iter().enumerate().flat_map(|(t, p)| (0..p.data.len()).map(move |i| (t, i))).collect();
    let arch = &model.arch;
    let results: Vec<(f64, bool)> = index
        .par_iter()
        .map_init(
            || model.params.clone(),
            |params, &(t, i)| {
                let orig = params.tensors[t].data[i];
                let mut eval = |x: f64| {
                    params.tensors[t].data[i] = x;
                    let tr = arch.forward(spec, params, &input);
                    let out = if tr.same_pattern(&base) {
                        (readout(&tr, &r), false)
                    } else {
                        (readout(&arch.forward_linearized(spec, params, &input, &base), &r), true)
                    };
                    params.tensors[t].data[i] = orig;
                    out
                };
                let (lp, kp) = eval(orig + h);
                let (lm, km) = eval(orig - h);
                let (lp, lm) = if kp || km {
                    let mut lin = |x: f64| {
                        params.tensors[t].data[i] = x;
                        let v = readout(&arch.forward_linearized(spec, params, &input, &base), &r);
                        params.tensors[t].data[i] = orig;
                        v
                    };
                    (lin(orig + h), lin(orig - h))
                } else {
                    (lp, lm)
                };
                let numeric = (lp - lm) / (2.0 * h);
                (relative_error(grads.tensors[t].data[i], numeric), kp || km)
            },
        )
        .collect();

    let mut report = GradCheckReport { checked: results.len(), worst_relative: 0.0, worst_param: String::new(), kink_crossings: 0 };
    for (&(t, i), &(rel, kink)) in index.iter().zip(&results) {
        report.kink_crossings += kink as usize;
        if rel > report.worst_relative || report.worst_param.is_empty() {
            report.worst_relative = rel;
            report.worst_param = format!("{}[{i}]", model.params.tensors[t].info.name);
        }
    }
    Ok(report)
}
