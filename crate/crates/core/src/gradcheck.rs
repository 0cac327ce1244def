//! Central-difference gradient checking, for whole networks and for single
//! layers in isolation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layers::{
    conv1x1_forward, conv_backward, conv_forward, fc_backward, fc_forward, lrn_backward_with,
    lrn_forward, maxpool_backward, maxpool_forward, relu, relu_backward, softmax_xent, ConvParams,
    LrnAdjoint, LrnParams,
};
use crate::tensor::Tensor;

/// Default tolerance for the whole-network check.
pub const NETWORK_TOLERANCE: f64 = 1e-5;
/// Default tolerance for single-layer checks.
pub const LAYER_TOLERANCE: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Multi-index of the worst element.
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose perturbation flipped a ReLU or a pooling winner.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn entry(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error < tolerance))
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<22} max_rel_err {:.3e} at {:?} analytic {:.6e} numeric {:.6e} ({} checked, {} skipped)",
                e.name, e.max_rel_error, e.index, e.analytic, e.numeric, e.checked, e.skipped
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub epsilon: f64,
    /// Elements checked per tensor (all of them if the tensor is smaller).
    pub samples: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            epsilon: 1e-5,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Default)]
struct Tally {
    worst: f64,
    at: usize,
    analytic: f64,
    numeric: f64,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn record(&mut self, at: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if self.checked == 0 || err > self.worst || err.is_nan() {
            self.worst = err;
            self.at = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }

    fn entry(self, name: &str, value: &Tensor) -> GradEntry {
        GradEntry {
            name: name.to_string(),
            max_rel_error: self.worst,
            index: if value.is_empty() { vec![] } else { value.unravel(self.at) },
            analytic: self.analytic,
            numeric: self.numeric,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

/// Compares the analytic gradients of the mean softmax cross-entropy on
/// `batch` with central differences, for every trainable parameter.
///
/// Elements are visited in a seeded random order until `opts.samples` have
/// been checked. An element is skipped when `p +- epsilon` changes a ReLU
/// sign or a pooling winner anywhere in the network, because the loss is not
/// differentiable across such a kink.
pub fn grad_check(
    net: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
    opts: &CheckOptions,
) -> Result<GradReport> {
    let (logits, base) = net.forward(batch)?;
    let (_, grad) = softmax_xent(&logits, labels)?;
    let grads = net.backward(&base, &grad)?;

    let mut probe = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = opts.epsilon;
    let mut report = GradReport::default();
    let names: Vec<String> = net.trainable().map(|p| p.name.clone()).collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::Mismatch(format!("backward pass produced no gradient for {name}")))?;
        let len = analytic.len();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for &j in &order {
            if tally.checked >= opts.samples {
                break;
            }
            let orig = probe.param(&name).unwrap().value.data()[j];
            let mut eval = |v: f64| -> Result<(f64, bool)> {
                probe.param_mut(&name).unwrap().value.data_mut()[j] = v;
                let (logits, cache) = probe.forward(batch)?;
                Ok((softmax_xent(&logits, labels)?.0, cache.same_branches(&base)))
            };
            let (up, smooth_up) = eval(orig + eps)?;
            let (down, smooth_down) = eval(orig - eps)?;
            probe.param_mut(&name).unwrap().value.data_mut()[j] = orig;
            if !(smooth_up && smooth_down) {
                tally.skipped += 1;
                continue;
            }
            tally.record(j, analytic.data()[j], (up - down) / (2.0 * eps));
        }
        report.entries.push(tally.entry(&name, analytic));
    }
    Ok(report)
}

/// Seeded batch of `n` uniform `[0, 1)` images at the network input size,
/// with labels cycling through the classes.
pub fn probe_batch(net: &NetworkGraph, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = net.config().input_shape();
    let x = uniform(&[n, h, w, c], 0.0, 1.0, &mut rng);
    let labels = (0..n).map(|i| i % net.classes()).collect();
    (x, labels)
}

/// Layers with a standalone check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Conv1x1,
    Fc,
    Lrn,
    Pool,
    Relu,
    SoftmaxXent,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv,
        LayerKind::Conv1x1,
        LayerKind::Fc,
        LayerKind::Lrn,
        LayerKind::Pool,
        LayerKind::Relu,
        LayerKind::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Fc => "fc",
            LayerKind::Lrn => "lrn",
            LayerKind::Pool => "pool",
            LayerKind::Relu => "relu",
            LayerKind::SoftmaxXent => "softmax-xent",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "layer",
                name: s.to_string(),
            })
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero: `|x|` in `[0.1, 1)`, random sign.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values spaced 0.01 apart in random order, so no pooling window
/// holds a near tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches")
}

/// Scalar objective and its analytic gradients with respect to each
/// variable, for one layer under test.
type Objective<'a> = Box<dyn Fn(&[Tensor]) -> Result<f64> + 'a>;
type Adjoint<'a> = Box<dyn Fn(&[Tensor]) -> Result<Vec<Tensor>> + 'a>;

fn check_vars(
    prefix: &str,
    names: &[&str],
    vars: Vec<Tensor>,
    objective: Objective<'_>,
    adjoint: Adjoint<'_>,
    eps: f64,
) -> Result<Vec<GradEntry>> {
    let analytic = adjoint(&vars)?;
    let mut vars = vars;
    let mut entries = Vec::new();
    for (v, name) in names.iter().enumerate() {
        let mut tally = Tally::default();
        for j in 0..vars[v].len() {
            let orig = vars[v].data()[j];
            vars[v].data_mut()[j] = orig + eps;
            let up = objective(&vars)?;
            vars[v].data_mut()[j] = orig - eps;
            let down = objective(&vars)?;
            vars[v].data_mut()[j] = orig;
            tally.record(j, analytic[v].data()[j], (up - down) / (2.0 * eps));
        }
        entries.push(tally.entry(&format!("{prefix}.{name}"), &vars[v]));
    }
    Ok(entries)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks one layer on small random data against the objective
/// `L = sum(w * layer(x))` with fixed random weights `w` (softmax-xent is
/// checked on its own loss). Every input and parameter tensor is checked
/// element by element. `lrn_adjoint` selects the LRN backward under test.
pub fn layer_check(
    layer: LayerKind,
    opts: &CheckOptions,
    lrn_adjoint: LrnAdjoint,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6c_6179_6572);
    let eps = opts.epsilon;
    let prefix = layer.name();
    let entries = match layer {
        LayerKind::Conv | LayerKind::Conv1x1 => {
            let (x_shape, k_shape, stride, pad) = if layer == LayerKind::Conv {
                ([2, 7, 7, 3], [3, 3, 3, 4], 2, 1)
            } else {
                ([2, 4, 4, 5], [1, 1, 5, 3], 1, 0)
            };
            let x = uniform(&x_shape, -1.0, 1.0, &mut rng);
            let k = uniform(&k_shape, -1.0, 1.0, &mut rng);
            let b = uniform(&[k_shape[3]], -1.0, 1.0, &mut rng);
            let params = |v: &[Tensor]| ConvParams::new(v[1].clone(), v[2].clone(), stride, pad);
            let fwd = move |v: &[Tensor]| -> Result<Tensor> {
                let p = params(v)?;
                if layer == LayerKind::Conv {
                    conv_forward(&v[0], &p)
                } else {
                    conv1x1_forward(&v[0], &p)
                }
            };
            let y = fwd(&[x.clone(), k.clone(), b.clone()])?;
            let w = uniform(y.shape(), -1.0, 1.0, &mut rng);
            let w2 = w.clone();
            check_vars(
                prefix,
                &["input", "weight", "bias"],
                vec![x, k, b],
                Box::new(move |v| Ok(dot(&fwd(v)?, &w))),
                Box::new(move |v| {
                    let g = conv_backward(&v[0], &params(v)?, &w2)?;
                    Ok(vec![g.input.expect("input gradient requested"), g.kernel, g.bias])
                }),
                eps,
            )?
        }
        LayerKind::Fc => {
            let x = uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut rng);
            let wt = uniform(&[12, 4], -1.0, 1.0, &mut rng);
            let b = uniform(&[4], -1.0, 1.0, &mut rng);
            let w = uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let w2 = w.clone();
            check_vars(
                prefix,
                &["input", "weight", "bias"],
                vec![x, wt, b],
                Box::new(move |v| Ok(dot(&fc_forward(&v[0], &v[1], &v[2])?, &w))),
                Box::new(move |v| {
                    let g = fc_backward(&v[0], &v[1], &w2, true)?;
                    let gx = g.input.expect("input gradient requested");
                    Ok(vec![gx.reshape(v[0].shape())?, g.weight, g.bias])
                }),
                eps,
            )?
        }
        LayerKind::Lrn => {
            // the default constants make the cross-channel terms tiny, so a
            // second parameter set with a strong normalizer is checked too
            let mut out = Vec::new();
            for (tag, p) in [
                ("input", LrnParams::default()),
                ("input.strong", LrnParams::new(5, 1.0, 1.0, 0.75)?),
            ] {
                let x = uniform(&[2, 3, 3, 7], -2.0, 2.0, &mut rng);
                let w = uniform(&[2, 3, 3, 7], -1.0, 1.0, &mut rng);
                let w2 = w.clone();
                out.extend(check_vars(
                    prefix,
                    &[tag],
                    vec![x],
                    Box::new(move |v| Ok(dot(&lrn_forward(&v[0], &p)?, &w))),
                    Box::new(move |v| Ok(vec![lrn_backward_with(&v[0], &p, &w2, lrn_adjoint)?])),
                    eps,
                )?);
            }
            out
        }
        LayerKind::Pool => {
            let x = distinct(&[2, 5, 5, 3], &mut rng);
            let w = uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
            let w2 = w.clone();
            check_vars(
                prefix,
                &["input"],
                vec![x],
                Box::new(move |v| Ok(dot(&maxpool_forward(&v[0], 3, 2)?.0, &w))),
                Box::new(move |v| {
                    let (_, map) = maxpool_forward(&v[0], 3, 2)?;
                    Ok(vec![maxpool_backward(&map, &w2)?])
                }),
                eps,
            )?
        }
        LayerKind::Relu => {
            let x = off_zero(&[2, 3, 3, 4], &mut rng);
            let w = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
            let w2 = w.clone();
            check_vars(
                prefix,
                &["input"],
                vec![x],
                Box::new(move |v| Ok(dot(&relu(&v[0]), &w))),
                Box::new(move |v| Ok(vec![relu_backward(&v[0], &w2)?])),
                eps,
            )?
        }
        LayerKind::SoftmaxXent => {
            let x = uniform(&[4, 5], -3.0, 3.0, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let l2 = labels.clone();
            check_vars(
                prefix,
                &["logits"],
                vec![x],
                Box::new(move |v| Ok(softmax_xent(&v[0], &labels)?.0)),
                Box::new(move |v| Ok(vec![softmax_xent(&v[0], &l2)?.1])),
                eps,
            )?
        }
    };
    Ok(GradReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn layer_names_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(k.name().parse::<LayerKind>().unwrap(), k);
        }
        assert!("dropout".parse::<LayerKind>().is_err());
    }

    #[test]
    fn every_layer_passes() {
        for k in LayerKind::ALL {
            let r = layer_check(k, &CheckOptions::default(), LrnAdjoint::Exact).unwrap();
            assert!(r.passes(LAYER_TOLERANCE), "{k}\n{r}");
        }
    }

    #[test]
    fn fc_is_exact_to_rounding() {
        let r = layer_check(LayerKind::Fc, &CheckOptions::default(), LrnAdjoint::Exact).unwrap();
        assert!(r.max_error() < 1e-9, "{r}");
    }

    #[test]
    fn broken_lrn_adjoint_is_caught() {
        let r = layer_check(
            LayerKind::Lrn,
            &CheckOptions::default(),
            LrnAdjoint::DropCrossTerms,
        )
        .unwrap();
        assert!(!r.passes(LAYER_TOLERANCE), "{r}");
        assert!(r.entry("lrn.input.strong").unwrap().max_rel_error > 1e-2);
    }
}
