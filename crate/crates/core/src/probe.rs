//! Analytic gradients of scalar probes `L = sum(w * f(x))` for each network,
//! with respect to the input and every parameter. Used to verify backprop
//! against finite differences.

use crate::attention::{self, CbamSpec};
use crate::error::Result;
use crate::networks::{discriminator_graph, generator_graph, DiscriminatorSpec, GeneratorSpec};
use crate::params::{Bound, NetParams};
use crate::segnet::{unet_logits_graph, UNetSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ProbeGrads {
    pub value: f64,
    pub input: Tensor,
    /// Parameter gradients in parameter order.
    pub params: Vec<Tensor>,
}

fn run(
    x: &Tensor,
    params: &NetParams,
    w: &Tensor,
    graph: impl FnOnce(&mut Tape, Var, &Bound) -> Result<Var>,
) -> Result<ProbeGrads> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let p = params.bind(&mut tape, true);
    let out = graph(&mut tape, xv, &p)?;
    let loss = tape.dot_const(out, w)?;
    let g = tape.backward(loss)?;
    Ok(ProbeGrads {
        value: tape.value(loss).item(),
        input: g.get(xv),
        params: p.grads(&g),
    })
}

/// Output of the probed network, to size the probe weights.
fn forward(
    x: &Tensor,
    params: &NetParams,
    graph: impl FnOnce(&mut Tape, Var, &Bound) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = params.bind(&mut tape, false);
    let out = graph(&mut tape, xv, &p)?;
    Ok(tape.value(out).clone())
}

pub fn cbam(x: &Tensor, spec: &CbamSpec, params: &NetParams, w: &Tensor) -> Result<ProbeGrads> {
    run(x, params, w, |t, x, p| attention::cbam(t, x, p, "", spec))
}

pub fn generator(x: &Tensor, spec: &GeneratorSpec, params: &NetParams, w: &Tensor) -> Result<ProbeGrads> {
    run(x, params, w, |t, x, p| generator_graph(t, x, p, spec))
}

pub fn discriminator(
    x: &Tensor,
    spec: &DiscriminatorSpec,
    params: &NetParams,
    w: &Tensor,
) -> Result<ProbeGrads> {
    run(x, params, w, |t, x, p| discriminator_graph(t, x, p, spec))
}

/// Probe on the segmenter's pre-logistic logits.
pub fn unet_logits(x: &Tensor, spec: &UNetSpec, params: &NetParams, w: &Tensor) -> Result<ProbeGrads> {
    run(x, params, w, |t, x, p| unet_logits_graph(t, x, p, spec))
}

/// The segmenter's logits without the logistic head.
pub fn unet_logits_forward(x: &Tensor, spec: &UNetSpec, params: &NetParams) -> Result<Tensor> {
    forward(x, params, |t, x, p| unet_logits_graph(t, x, p, spec))
}

pub fn cbam_forward_raw(x: &Tensor, spec: &CbamSpec, params: &NetParams) -> Result<Tensor> {
    forward(x, params, |t, x, p| attention::cbam(t, x, p, "", spec))
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Over the entries that were compared.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose stencil straddles a kink (ReLU, max-pool switch):
    /// differences at `h` and `h / 2` disagree, so neither is a derivative.
    pub kinks: usize,
    /// `input[i]` or `param_name[i]` of the worst compared entry.
    pub worst: String,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from amplifying rounding noise.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Stencils at `h` and `h / 2` agreeing to this relative level lie inside
/// one smooth piece; smooth truncation and rounding error sit far below it.
pub const KINK_THRESHOLD: f64 = 1e-5;

fn sample_indices(len: usize, per_tensor: usize) -> Vec<usize> {
    let n = per_tensor.min(len);
    (0..n).map(|i| i * len / n).collect()
}

/// Compare `grads` with central differences of `value(x, params)` at step
/// `h`, over up to `per_tensor` evenly spaced entries of the input and of
/// every parameter tensor.
pub fn finite_difference_check(
    x: &Tensor,
    params: &NetParams,
    grads: &ProbeGrads,
    per_tensor: usize,
    h: f64,
    floor: f64,
    value: impl Fn(&Tensor, &NetParams) -> Result<f64>,
) -> Result<GradCheck> {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        worst: String::new(),
    };
    let mut record = |analytic: f64, numeric: f64, half: f64, what: String| {
        report.checked += 1;
        if rel_error(numeric, half, floor) > KINK_THRESHOLD {
            report.kinks += 1;
            return;
        }
        let e = rel_error(analytic, numeric, floor);
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = what;
        }
    };
    let central = |f: &dyn Fn(f64) -> Result<f64>, step: f64| -> Result<f64> {
        Ok((f(step)? - f(-step)?) / (2.0 * step))
    };
    for i in sample_indices(x.len(), per_tensor) {
        let at = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            value(&xp, params)
        };
        let (n, n2) = (central(&at, h)?, central(&at, h / 2.0)?);
        record(grads.input.data()[i], n, n2, format!("input[{i}]"));
    }
    let names: Vec<String> = params.names().map(String::from).collect();
    for (k, name) in names.iter().enumerate() {
        let len = params.get(name)?.len();
        for i in sample_indices(len, per_tensor) {
            let at = |d: f64| {
                let mut pp = params.clone();
                pp.get_mut(name)?.data_mut()[i] += d;
                value(x, &pp)
            };
            let (n, n2) = (central(&at, h)?, central(&at, h / 2.0)?);
            record(grads.params[k].data()[i], n, n2, format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
