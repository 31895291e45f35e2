//! Self-contained differentiable multilayer perceptron.
//!
//! Every client trains the same architecture: dense layers with a fixed
//! hidden nonlinearity, inverted dropout after each hidden layer, and a
//! softmax output. Parameters live in one flat `f64` vector in layer-major
//! order (weights row-major, then biases, per layer), which makes model
//! transfer and weighted aggregation trivial.
//!
//! All arithmetic runs in double precision with a fixed reduction order
//! (ascending sample index), so identical inputs and seeds produce
//! bit-identical results.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::uncertainty::PredictiveDistribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Log arguments are clamped below at this value in both losses.
pub const LOG_EPS: f64 = 1e-12;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture description: layer widths from input to class count,
/// dropout rate applied after each hidden layer, and the hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        dropout_rate: f64,
        activation: Activation,
    ) -> Result<Self> {
        let spec = NetSpec {
            layer_widths,
            dropout_rate,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(
                "layer_widths needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.class_count() < 2 {
            return Err(Error::Config(
                "output width (class count) must be >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Number of dense layers.
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector bound to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: NetSpec,
    values: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let count = spec.param_count();
        Ok(ModelParams {
            spec,
            values: vec![0.0; count],
        })
    }

    /// Glorot-uniform weights, zero biases, drawn from a seeded stream.
    pub fn init_random(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ModelParams::zeros(spec)?;
        let mut rng = rng_from_seed(seed);
        for layer in 0..params.spec.layer_count() {
            let fan_in = params.spec.layer_widths[layer] as f64;
            let fan_out = params.spec.layer_widths[layer + 1] as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let (w_range, _) = params.layer_ranges(layer);
            for idx in w_range {
                params.values[idx] = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn from_values(spec: NetSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters for spec, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(ModelParams { spec, values })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Copy with one coordinate shifted by `delta` (finite-difference probes).
    pub fn nudged(&self, index: usize, delta: f64) -> ModelParams {
        let mut out = self.clone();
        out.values[index] += delta;
        out
    }

    /// Index ranges of layer `l`: `(weights, biases)`. Weights are row-major
    /// `(out_dim, in_dim)`.
    fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for l in 0..layer {
            let in_dim = self.spec.layer_widths[l];
            let out_dim = self.spec.layer_widths[l + 1];
            offset += in_dim * out_dim + out_dim;
        }
        let in_dim = self.spec.layer_widths[layer];
        let out_dim = self.spec.layer_widths[layer + 1];
        let w = offset..offset + in_dim * out_dim;
        let b = w.end..w.end + out_dim;
        (w, b)
    }

    /// Weight of layer `l`, output row `o`, input column `i`.
    pub fn weight(&self, layer: usize, out: usize, inp: usize) -> f64 {
        let in_dim = self.spec.layer_widths[layer];
        let (w, _) = self.layer_ranges(layer);
        self.values[w.start + out * in_dim + inp]
    }

    /// Bias of layer `l`, output row `o`.
    pub fn bias(&self, layer: usize, out: usize) -> f64 {
        let (_, b) = self.layer_ranges(layer);
        self.values[b.start + out]
    }
}

/// Inference mode: expectation-scaled deterministic pass, or one dropout
/// sample drawn from the given seed. Inverted dropout scales kept units by
/// `1/(1-rate)` at sample time, so the deterministic pass applies no scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    DropoutSample(u64),
}

/// SGD-with-momentum state owned by a single client.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub momentum_buffer: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimState {
    pub fn new(param_count: usize, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(OptimState {
            momentum_buffer: vec![0.0; param_count],
            learning_rate,
            momentum,
        })
    }
}

/// Loss selector for batched training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Hard-label cross entropy.
    CrossEntropy,
    /// KL divergence against a soft target distribution.
    KlDivergence,
}

/// Per-example training target.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Label(usize),
    Soft(&'a [f64]),
}

/// One training example: borrowed features plus target.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub input: &'a [f64],
    pub target: Target<'a>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Dropout scale factors for one hidden layer: 0 for dropped units,
/// `1/(1-rate)` for kept units.
fn dropout_mask(seed: u64, layer: usize, width: usize, rate: f64) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &[layer as u64]));
    let keep_scale = 1.0 / (1.0 - rate);
    (0..width)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

/// Everything the backward pass needs from one forward evaluation.
struct ForwardTrace {
    /// Pre-activation vectors per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation (and post-mask) vectors per layer; the last entry is
    /// the raw logits.
    post: Vec<Vec<f64>>,
    /// Scale masks per hidden layer (`None` in deterministic mode).
    masks: Vec<Option<Vec<f64>>>,
    probs: Vec<f64>,
}

#[allow(clippy::needless_range_loop)] // layer index drives widths, ranges, and masks together
fn forward_trace(params: &ModelParams, x: &[f64], mode: ForwardMode) -> Result<ForwardTrace> {
    let spec = params.spec();
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input length {} does not match input width {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let layer_count = spec.layer_count();
    let mut pre = Vec::with_capacity(layer_count);
    let mut post = Vec::with_capacity(layer_count);
    let mut masks = Vec::with_capacity(layer_count.saturating_sub(1));

    let mut activ: Vec<f64> = x.to_vec();
    for layer in 0..layer_count {
        let in_dim = spec.layer_widths[layer];
        let out_dim = spec.layer_widths[layer + 1];
        let (w, b) = params.layer_ranges(layer);
        let weights = &params.values[w];
        let biases = &params.values[b];

        let mut z = vec![0.0; out_dim];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = biases[o];
            let row = o * in_dim;
            for (i, &a) in activ.iter().enumerate() {
                acc += weights[row + i] * a;
            }
            *zo = acc;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation in layer {layer}"
            )));
        }
        pre.push(z.clone());

        if layer + 1 < layer_count {
            let mut h: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            let mask = match mode {
                ForwardMode::Deterministic => None,
                ForwardMode::DropoutSample(seed) => {
                    if spec.dropout_rate == 0.0 {
                        None
                    } else {
                        Some(dropout_mask(seed, layer, out_dim, spec.dropout_rate))
                    }
                }
            };
            if let Some(m) = &mask {
                for (hv, &s) in h.iter_mut().zip(m.iter()) {
                    *hv *= s;
                }
            }
            masks.push(mask);
            post.push(h.clone());
            activ = h;
        } else {
            post.push(z.clone());
            activ = z;
        }
    }

    let probs = softmax(&activ);
    Ok(ForwardTrace {
        pre,
        post,
        masks,
        probs,
    })
}

/// Forward pass to a softmax predictive distribution.
pub fn forward(
    params: &ModelParams,
    x: &[f64],
    mode: ForwardMode,
) -> Result<PredictiveDistribution> {
    let trace = forward_trace(params, x, mode)?;
    PredictiveDistribution::from_probs(trace.probs)
}

/// Pre-softmax logits under explicit per-hidden-layer scale masks.
/// Test hook for mask-enumeration checks.
#[cfg(test)]
#[allow(clippy::needless_range_loop)]
fn logits_with_masks(params: &ModelParams, x: &[f64], masks: &[Vec<f64>]) -> Vec<f64> {
    let spec = params.spec();
    let layer_count = spec.layer_count();
    assert_eq!(masks.len(), layer_count - 1);
    let mut activ: Vec<f64> = x.to_vec();
    for layer in 0..layer_count {
        let in_dim = spec.layer_widths[layer];
        let out_dim = spec.layer_widths[layer + 1];
        let (w, b) = params.layer_ranges(layer);
        let weights = &params.values[w];
        let biases = &params.values[b];
        let mut z = vec![0.0; out_dim];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = biases[o];
            let row = o * in_dim;
            for (i, &a) in activ.iter().enumerate() {
                acc += weights[row + i] * a;
            }
            *zo = acc;
        }
        if layer + 1 < layer_count {
            activ = z
                .iter()
                .zip(masks[layer].iter())
                .map(|(&v, &s)| spec.activation.apply(v) * s)
                .collect();
        } else {
            activ = z;
        }
    }
    activ
}

/// Cross entropy of a prediction against a hard label: `-ln pred[label]`.
pub fn cross_entropy(pred: &PredictiveDistribution, label: usize) -> Result<f64> {
    let probs = pred.probs();
    if label >= probs.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[label].max(LOG_EPS).ln())
}

/// KL divergence of `student` from `target`:
/// `sum_c target[c] * (ln target[c] - ln student[c])`.
pub fn kl_divergence(
    student: &PredictiveDistribution,
    target: &PredictiveDistribution,
) -> Result<f64> {
    let s = student.probs();
    let t = target.probs();
    if s.len() != t.len() {
        return Err(Error::Domain(format!(
            "distribution lengths differ: {} vs {}",
            s.len(),
            t.len()
        )));
    }
    let mut total = 0.0;
    for (sc, tc) in s.iter().zip(t.iter()) {
        if *tc > 0.0 {
            total += tc * (tc.max(LOG_EPS).ln() - sc.max(LOG_EPS).ln());
        }
    }
    Ok(total)
}

fn check_targets(batch: &[TrainExample<'_>], loss: LossKind, class_count: usize) -> Result<()> {
    for (i, example) in batch.iter().enumerate() {
        match (loss, &example.target) {
            (LossKind::CrossEntropy, Target::Label(label)) => {
                if *label >= class_count {
                    return Err(Error::Domain(format!(
                        "example {i}: label {label} out of range for {class_count} classes"
                    )));
                }
            }
            (LossKind::KlDivergence, Target::Soft(target)) => {
                if target.len() != class_count {
                    return Err(Error::Domain(format!(
                        "example {i}: soft target length {} does not match {class_count} classes",
                        target.len()
                    )));
                }
            }
            _ => {
                return Err(Error::Domain(format!(
                    "example {i}: target kind does not match loss kind"
                )));
            }
        }
    }
    Ok(())
}

/// Per-sample dropout seed within a batch.
fn sample_mode(mode: ForwardMode, sample: usize) -> ForwardMode {
    match mode {
        ForwardMode::Deterministic => ForwardMode::Deterministic,
        ForwardMode::DropoutSample(seed) => {
            ForwardMode::DropoutSample(derive_seed(seed, &[sample as u64]))
        }
    }
}

/// Mean loss over a batch.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[TrainExample<'_>],
    loss: LossKind,
    mode: ForwardMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let class_count = params.spec().class_count();
    check_targets(batch, loss, class_count)?;
    let mut total = 0.0;
    for (i, example) in batch.iter().enumerate() {
        let pred = forward(params, example.input, sample_mode(mode, i))?;
        total += match example.target {
            Target::Label(label) => cross_entropy(&pred, label)?,
            Target::Soft(target) => {
                let target = PredictiveDistribution::from_probs(target.to_vec())?;
                kl_divergence(&pred, &target)?
            }
        };
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the mean batch loss with respect to the flat parameters.
pub fn backward(
    params: &ModelParams,
    batch: &[TrainExample<'_>],
    loss: LossKind,
    mode: ForwardMode,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let spec = params.spec();
    let class_count = spec.class_count();
    check_targets(batch, loss, class_count)?;

    let layer_count = spec.layer_count();
    let mut grads = vec![0.0; params.values.len()];

    for (i, example) in batch.iter().enumerate() {
        let trace = forward_trace(params, example.input, sample_mode(mode, i))?;

        // dL/dlogits for both losses: probs - target.
        let mut delta: Vec<f64> = match example.target {
            Target::Label(label) => {
                let mut d = trace.probs.clone();
                d[label] -= 1.0;
                d
            }
            Target::Soft(target) => trace
                .probs
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| p - t)
                .collect(),
        };

        for layer in (0..layer_count).rev() {
            let in_dim = spec.layer_widths[layer];
            let out_dim = spec.layer_widths[layer + 1];
            let (w, b) = params.layer_ranges(layer);
            let weights = &params.values[w.clone()];
            let inputs: &[f64] = if layer == 0 {
                example.input
            } else {
                &trace.post[layer - 1]
            };

            for o in 0..out_dim {
                let d = delta[o];
                let row = o * in_dim;
                for (ii, &a) in inputs.iter().enumerate() {
                    grads[w.start + row + ii] += d * a;
                }
                grads[b.start + o] += d;
            }

            if layer > 0 {
                let mut next = vec![0.0; in_dim];
                for (ii, nv) in next.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for o in 0..out_dim {
                        acc += weights[o * in_dim + ii] * delta[o];
                    }
                    // Through the dropout mask, then the activation.
                    if let Some(mask) = &trace.masks[layer - 1] {
                        acc *= mask[ii];
                    }
                    *nv = acc * spec.activation.grad(trace.pre[layer - 1][ii]);
                }
                delta = next;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    Ok(grads)
}

/// One SGD-with-momentum step:
/// `buffer <- momentum * buffer + grads; params <- params - lr * buffer`.
pub fn sgd_step(params: &mut ModelParams, grads: &[f64], opt: &mut OptimState) -> Result<()> {
    if grads.len() != params.values.len() || opt.momentum_buffer.len() != params.values.len() {
        return Err(Error::Domain(format!(
            "shape mismatch: params {}, grads {}, buffer {}",
            params.values.len(),
            grads.len(),
            opt.momentum_buffer.len()
        )));
    }
    for ((buf, &g), p) in opt
        .momentum_buffer
        .iter_mut()
        .zip(grads.iter())
        .zip(params.values.iter_mut())
    {
        *buf = opt.momentum * *buf + g;
        *p -= opt.learning_rate * *buf;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], rate: f64, act: Activation) -> NetSpec {
        NetSpec::new(widths.to_vec(), rate, act).unwrap()
    }

    fn dist(probs: &[f64]) -> PredictiveDistribution {
        PredictiveDistribution::from_probs(probs.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_prediction() {
        let params = ModelParams::zeros(spec(&[3, 5, 4], 0.5, Activation::Relu)).unwrap();
        let pred = forward(&params, &[0.3, -1.0, 2.0], ForwardMode::Deterministic).unwrap();
        for &p in pred.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_zero_weights_yields_softmax_of_bias() {
        let s = spec(&[2, 3], 0.0, Activation::Relu);
        let mut params = ModelParams::zeros(s).unwrap();
        // Layout: 6 weights then 3 biases.
        params.values_mut()[6] = 1.0;
        params.values_mut()[7] = 2.0;
        params.values_mut()[8] = 3.0;
        let pred = forward(&params, &[0.4, 0.6], ForwardMode::Deterministic).unwrap();
        let expected = softmax(&[1.0, 2.0, 3.0]);
        for (p, e) in pred.probs().iter().zip(expected.iter()) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn random_net_matches_scalar_oracle() {
        let params = ModelParams::init_random(spec(&[2, 4, 3], 0.0, Activation::Tanh), 99).unwrap();
        let x = [0.7, -0.2];

        // Re-evaluate the same formulas with scalar arithmetic via the
        // public accessors.
        let mut hidden = [0.0; 4];
        for (o, h) in hidden.iter_mut().enumerate() {
            let mut z = params.bias(0, o);
            for (i, &xi) in x.iter().enumerate() {
                z += params.weight(0, o, i) * xi;
            }
            *h = z.tanh();
        }
        let mut logits = [0.0; 3];
        for (o, l) in logits.iter_mut().enumerate() {
            let mut z = params.bias(1, o);
            for (i, &h) in hidden.iter().enumerate() {
                z += params.weight(1, o, i) * h;
            }
            *l = z;
        }
        let expected = softmax(&logits);

        let pred = forward(&params, &x, ForwardMode::Deterministic).unwrap();
        for (p, e) in pred.probs().iter().zip(expected.iter()) {
            assert!((p - e).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let params = ModelParams::zeros(spec(&[3, 2], 0.0, Activation::Relu)).unwrap();
        let err = forward(&params, &[1.0, 2.0], ForwardMode::Deterministic).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn dropout_sample_is_reproducible_and_differs_across_seeds() {
        let params =
            ModelParams::init_random(spec(&[3, 8, 8, 2], 0.5, Activation::Relu), 5).unwrap();
        let x = [0.1, 0.2, 0.3];
        let a = forward(&params, &x, ForwardMode::DropoutSample(77)).unwrap();
        let b = forward(&params, &x, ForwardMode::DropoutSample(77)).unwrap();
        let c = forward(&params, &x, ForwardMode::DropoutSample(78)).unwrap();
        assert_eq!(a.probs(), b.probs());
        assert_ne!(a.probs(), c.probs());
    }

    #[test]
    fn mask_enumeration_average_equals_deterministic_logits_for_linear_net() {
        // rate 0.5 makes all masks equiprobable; with an identity activation
        // the logits are linear in the mask, so the plain average over all
        // 2^k masks must equal the deterministic pass.
        let k = 4;
        let params =
            ModelParams::init_random(spec(&[2, k, 3], 0.5, Activation::Identity), 21).unwrap();
        let x = [0.9, -1.3];
        let scale = 2.0;

        let mut mean = [0.0; 3];
        let combos = 1usize << k;
        for bits in 0..combos {
            let mask: Vec<f64> = (0..k)
                .map(|u| if bits >> u & 1 == 1 { scale } else { 0.0 })
                .collect();
            let logits = logits_with_masks(&params, &x, &[mask]);
            for (m, l) in mean.iter_mut().zip(logits.iter()) {
                *m += l / combos as f64;
            }
        }

        let det = logits_with_masks(&params, &x, &[vec![1.0; k]]);
        for (m, d) in mean.iter().zip(det.iter()) {
            assert!((m - d).abs() < 1e-12, "mean {m} vs deterministic {d}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = dist(&[0.0, 1.0, 0.0]);
        assert!(cross_entropy(&one_hot, 1).unwrap().abs() < 1e-12);

        let uniform = dist(&[0.1; 10]);
        assert!((cross_entropy(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);

        let skewed = dist(&[0.7, 0.2, 0.1]);
        assert!((cross_entropy(&skewed, 1).unwrap() - 1.6094379124341003).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&skewed, 3).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn kl_divergence_examples() {
        let p = dist(&[0.3, 0.7]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);

        // One-hot target degenerates to cross entropy.
        let student = dist(&[0.7, 0.2, 0.1]);
        let target = dist(&[0.0, 1.0, 0.0]);
        let kl = kl_divergence(&student, &target).unwrap();
        let ce = cross_entropy(&student, 1).unwrap();
        assert!((kl - ce).abs() < 1e-12);

        let s = dist(&[0.9, 0.1]);
        let t = dist(&[0.5, 0.5]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&s, &t).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5108256237659907).abs() < 1e-12);

        let short = dist(&[0.5, 0.5]);
        let long = dist(&[0.2, 0.3, 0.5]);
        assert!(matches!(
            kl_divergence(&short, &long).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn kl_gradient_vanishes_when_target_equals_prediction() {
        let params = ModelParams::init_random(spec(&[2, 4, 3], 0.0, Activation::Tanh), 1).unwrap();
        let x = [0.2, -0.4];
        let pred = forward(&params, &x, ForwardMode::Deterministic).unwrap();
        let target: Vec<f64> = pred.probs().to_vec();
        let batch = [TrainExample {
            input: &x,
            target: Target::Soft(&target),
        }];
        let grads = backward(
            &params,
            &batch,
            LossKind::KlDivergence,
            ForwardMode::Deterministic,
        )
        .unwrap();
        let max = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max < 1e-8, "gradient max {max}");
    }

    #[test]
    fn single_layer_ce_gradient_matches_closed_form() {
        // dL/dW = (pred - onehot) x^T, dL/db = pred - onehot.
        let params = ModelParams::init_random(spec(&[3, 2], 0.0, Activation::Relu), 4).unwrap();
        let x = [0.5, -1.0, 2.0];
        let label = 1;
        let pred = forward(&params, &x, ForwardMode::Deterministic).unwrap();
        let batch = [TrainExample {
            input: &x,
            target: Target::Label(label),
        }];
        let grads = backward(
            &params,
            &batch,
            LossKind::CrossEntropy,
            ForwardMode::Deterministic,
        )
        .unwrap();

        let mut expected = [0.0; 8];
        for o in 0..2 {
            let d = pred.probs()[o] - if o == label { 1.0 } else { 0.0 };
            for i in 0..3 {
                expected[o * 3 + i] = d * x[i];
            }
            expected[6 + o] = d;
        }
        for (g, e) in grads.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_dropout() {
        let s = spec(&[3, 6, 4], 0.4, Activation::Tanh);
        let params = ModelParams::init_random(s, 17).unwrap();
        let x0 = [0.3, -0.6, 1.1];
        let x1 = [-0.2, 0.8, 0.05];
        let batch = [
            TrainExample {
                input: &x0,
                target: Target::Label(2),
            },
            TrainExample {
                input: &x1,
                target: Target::Label(0),
            },
        ];
        let mode = ForwardMode::DropoutSample(31);
        let grads = backward(&params, &batch, LossKind::CrossEntropy, mode).unwrap();

        let h = 1e-5;
        for idx in (0..params.values().len()).step_by(3) {
            let plus =
                batch_loss(&params.nudged(idx, h), &batch, LossKind::CrossEntropy, mode).unwrap();
            let minus = batch_loss(
                &params.nudged(idx, -h),
                &batch,
                LossKind::CrossEntropy,
                mode,
            )
            .unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let scale = grads[idx].abs().max(numeric.abs()).max(1e-2);
            assert!(
                (grads[idx] - numeric).abs() / scale < 1e-5,
                "idx {idx}: analytic {} numeric {numeric}",
                grads[idx]
            );
        }
    }

    #[test]
    fn backward_rejects_empty_batch_and_mismatched_targets() {
        let params = ModelParams::zeros(spec(&[2, 3], 0.0, Activation::Relu)).unwrap();
        let err = backward(
            &params,
            &[],
            LossKind::CrossEntropy,
            ForwardMode::Deterministic,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));

        let x = [0.0, 0.0];
        let soft = [0.2, 0.3, 0.5];
        let batch = [TrainExample {
            input: &x,
            target: Target::Soft(&soft),
        }];
        let err = backward(
            &params,
            &batch,
            LossKind::CrossEntropy,
            ForwardMode::Deterministic,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn sgd_step_examples() {
        let s = spec(&[2, 2], 0.0, Activation::Relu);

        // Zero gradient, zero buffer: parameters unchanged.
        let mut params = ModelParams::init_random(s.clone(), 8).unwrap();
        let before = params.values().to_vec();
        let mut opt = OptimState::new(params.values().len(), 0.5, 0.9).unwrap();
        sgd_step(&mut params, &vec![0.0; before.len()], &mut opt).unwrap();
        assert_eq!(params.values(), before.as_slice());

        // lr = 1, momentum = 0: exact decrement by the gradient.
        let mut params = ModelParams::zeros(s.clone()).unwrap();
        let mut opt = OptimState::new(params.values().len(), 1.0, 0.0).unwrap();
        let grads: Vec<f64> = (0..params.values().len()).map(|i| i as f64).collect();
        sgd_step(&mut params, &grads, &mut opt).unwrap();
        for (p, g) in params.values().iter().zip(grads.iter()) {
            assert_eq!(*p, -g);
        }

        // Two steps with momentum 0.9: second effective step is
        // lr * (0.9 * g1 + g2).
        let mut params = ModelParams::zeros(s).unwrap();
        let n = params.values().len();
        let mut opt = OptimState::new(n, 0.1, 0.9).unwrap();
        let g1 = vec![1.0; n];
        let g2 = vec![2.0; n];
        sgd_step(&mut params, &g1, &mut opt).unwrap();
        let after_first = params.values().to_vec();
        sgd_step(&mut params, &g2, &mut opt).unwrap();
        for (i, p) in params.values().iter().enumerate() {
            let second_step = 0.1 * (0.9 * 1.0 + 2.0);
            assert!((after_first[i] - second_step - p).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_normalized_and_positive() {
        let mut rng = rng_from_seed(123);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }
}
