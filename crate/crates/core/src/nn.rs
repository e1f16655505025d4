//! Dense-network substrate: affine layers, ReLU, softmax cross-entropy,
//! hand-written backward passes, parameter banks and Adam.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor2D, Trans};

/// `x * w + b` for `x: B x I`, `w: I x O`, `b: 1 x O`.
pub fn affine_forward(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
        return shape_err(
            "affine_forward",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        );
    }
    let mut out = Tensor2D::zeros(x.rows(), w.cols());
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(b.data());
    }
    gemm(1.0, x, Trans::No, w, Trans::No, 1.0, &mut out)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AffineGrads {
    pub dx: Tensor2D,
    pub dw: Tensor2D,
    pub db: Tensor2D,
}

/// Gradients of an affine layer given the upstream gradient of its output.
pub fn affine_backward(x: &Tensor2D, w: &Tensor2D, upstream: &Tensor2D) -> Result<AffineGrads> {
    let (dw, db) = affine_param_grads(x, w, upstream)?;
    let dx = affine_input_grad(w, upstream)?;
    Ok(AffineGrads { dx, dw, db })
}

fn affine_param_grads(
    x: &Tensor2D,
    w: &Tensor2D,
    upstream: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D)> {
    if x.cols() != w.rows() || upstream.cols() != w.cols() || upstream.rows() != x.rows() {
        return shape_err(
            "affine_backward",
            format!(
                "x {:?}, w {:?}, upstream {:?}",
                x.shape(),
                w.shape(),
                upstream.shape()
            ),
        );
    }
    let mut dw = Tensor2D::zeros(w.rows(), w.cols());
    gemm(1.0, x, Trans::Yes, upstream, Trans::No, 0.0, &mut dw)?;
    Ok((dw, upstream.column_sums()))
}

fn affine_input_grad(w: &Tensor2D, upstream: &Tensor2D) -> Result<Tensor2D> {
    let mut dx = Tensor2D::zeros(upstream.rows(), w.rows());
    gemm(1.0, upstream, Trans::No, w, Trans::Yes, 0.0, &mut dx)?;
    Ok(dx)
}

pub fn relu(x: &Tensor2D) -> Tensor2D {
    x.map(|v| v.max(0.0))
}

/// Masks `upstream` where `x <= 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &Tensor2D, upstream: &Tensor2D) -> Result<Tensor2D> {
    if !x.same_shape(upstream) {
        return shape_err(
            "relu_backward",
            format!("x {:?}, upstream {:?}", x.shape(), upstream.shape()),
        );
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2D::new(x.rows(), x.cols(), data)
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax(logits: &Tensor2D) -> Tensor2D {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    probs
}

/// Row-wise `log softmax`.
pub fn log_softmax(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SoftmaxXent {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    pub probs: Tensor2D,
    /// Gradient of `loss` with respect to the logits, `(probs - onehot) / B`.
    pub dlogits: Tensor2D,
}

pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

pub fn softmax_xent(logits: &Tensor2D, labels: &[usize]) -> Result<SoftmaxXent> {
    if labels.len() != logits.rows() {
        return shape_err(
            "softmax_xent",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        );
    }
    check_labels(labels, logits.cols())?;
    let batch = logits.rows().max(1) as f64;
    let logp = log_softmax(logits);
    let probs = logp.map(f64::exp);
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        loss -= logp.get(r, label);
        let row = dlogits.row_mut(r);
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= batch);
    }
    Ok(SoftmaxXent {
        loss: loss / batch,
        probs,
        dlogits,
    })
}

/// One parameter tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub adam_m: Tensor2D,
    pub adam_v: Tensor2D,
}

impl Param {
    pub fn new(value: Tensor2D) -> Self {
        let zeros = Tensor2D::zeros_like(&value);
        Self {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Named parameters of one parameter group, plus the Adam step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamBank {
    entries: BTreeMap<String, Param>,
    pub step_count: u64,
}

impl ParamBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) {
        self.entries.insert(name.into(), Param::new(value));
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor2D {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2D {
        &mut self.entries.get_mut(name).expect("unknown parameter").value
    }

    pub fn grad(&self, name: &str) -> &Tensor2D {
        &self.entries[name].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor2D) -> Result<()> {
        let param = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        param.grad.add_assign(grad).map_err(|_| Error::ShapeMismatch {
            op: "ParamBank::accumulate",
            detail: format!("{name}: {:?} vs {:?}", param.grad.shape(), grad.shape()),
        })
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Snapshot of the parameter values only.
    pub fn values(&self) -> BTreeMap<String, Tensor2D> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam config {self:?}")))
        }
    }
}

/// Bias-corrected Adam update over every entry of `bank`. Gradients are left
/// in place; callers zero them.
pub fn adam_step(bank: &mut ParamBank, cfg: &AdamConfig) {
    bank.step_count += 1;
    let t = bank.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in bank.entries.values_mut() {
        let Param {
            value,
            grad,
            adam_m,
            adam_v,
        } = p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(adam_m.data_mut())
            .zip(adam_v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// He-normal weight matrix, `N(0, sqrt(2 / fan_in))`.
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor2D {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor2D::new(fan_in, fan_out, data).expect("length matches")
}

pub fn init_bias(fan_out: usize) -> Tensor2D {
    Tensor2D::zeros(1, fan_out)
}

/// A stack of affine layers with ReLU between them (and optionally after the
/// last one). Parameters live in `bank` as `l{i}.weight` / `l{i}.bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    relu_output: bool,
    pub bank: ParamBank,
}

/// Activations cached by [`Mlp::forward_cached`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Tensor2D>,
    /// Pre-activation output of each layer that is followed by a ReLU.
    pre: Vec<Option<Tensor2D>>,
}

/// Parameter gradients of one [`Mlp`], in bank order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub grads: Vec<(String, Tensor2D)>,
}

impl GradSet {
    pub fn sum_squares(&self) -> f64 {
        self.grads.iter().map(|(_, g)| g.sum_squares()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.grads.iter().map(|(_, g)| g.len()).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|(_, g)| g.scale_in_place(s));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("l{layer}.bias")
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; at least one layer.
    pub fn new(sizes: &[usize], relu_output: bool, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MLP sizes must have >= 2 positive entries, got {sizes:?}"
            )));
        }
        let mut bank = ParamBank::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            bank.insert(weight_name(i), init_weight(pair[0], pair[1], rng));
            bank.insert(bias_name(i), init_bias(pair[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            relu_output,
            bank,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn relu_output(&self) -> bool {
        self.relu_output
    }

    fn has_relu(&self, layer: usize) -> bool {
        layer + 1 < self.num_layers() || self.relu_output
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut h = x.clone();
        for layer in 0..self.num_layers() {
            let z = affine_forward(
                &h,
                self.bank.value(&weight_name(layer)),
                self.bank.value(&bias_name(layer)),
            )?;
            h = if self.has_relu(layer) { relu(&z) } else { z };
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor2D) -> Result<(Tensor2D, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for layer in 0..self.num_layers() {
            let z = affine_forward(
                &h,
                self.bank.value(&weight_name(layer)),
                self.bank.value(&bias_name(layer)),
            )?;
            inputs.push(h);
            if self.has_relu(layer) {
                h = relu(&z);
                pre.push(Some(z));
            } else {
                h = z;
                pre.push(None);
            }
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Backpropagates `upstream` (gradient of the output). Returns the
    /// parameter gradients and, if requested, the gradient of the input.
    /// Nothing is accumulated into the bank.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Tensor2D,
        need_dx: bool,
    ) -> Result<(GradSet, Option<Tensor2D>)> {
        let mut grads = Vec::with_capacity(2 * self.num_layers());
        let mut g = upstream.clone();
        for layer in (0..self.num_layers()).rev() {
            if let Some(z) = &cache.pre[layer] {
                g = relu_backward(z, &g)?;
            }
            let w = self.bank.value(&weight_name(layer));
            let (dw, db) = affine_param_grads(&cache.inputs[layer], w, &g)?;
            grads.push((bias_name(layer), db));
            grads.push((weight_name(layer), dw));
            if layer > 0 || need_dx {
                g = affine_input_grad(w, &g)?;
            }
        }
        grads.reverse();
        let dx = need_dx.then_some(g);
        Ok((GradSet { grads }, dx))
    }

    /// Like [`Mlp::backward`] but returns, for every parameter, the sum over
    /// rows of the squared per-row gradient. Rows must not interact through
    /// the upstream gradient (true for per-sample log-likelihoods).
    pub fn backward_per_row_squares(
        &self,
        cache: &MlpCache,
        upstream: &Tensor2D,
        need_dx: bool,
    ) -> Result<(GradSet, Option<Tensor2D>)> {
        let mut grads = Vec::with_capacity(2 * self.num_layers());
        let mut g = upstream.clone();
        for layer in (0..self.num_layers()).rev() {
            if let Some(z) = &cache.pre[layer] {
                g = relu_backward(z, &g)?;
            }
            let w = self.bank.value(&weight_name(layer));
            // Per-row weight gradient is the outer product x_r g_r^T, so the sum
            // of its squares is (x∘x)^T (g∘g).
            let x_sq = cache.inputs[layer].map(|v| v * v);
            let g_sq = g.map(|v| v * v);
            let mut dw = Tensor2D::zeros(w.rows(), w.cols());
            gemm(1.0, &x_sq, Trans::Yes, &g_sq, Trans::No, 0.0, &mut dw)?;
            grads.push((bias_name(layer), g_sq.column_sums()));
            grads.push((weight_name(layer), dw));
            if layer > 0 || need_dx {
                g = affine_input_grad(w, &g)?;
            }
        }
        grads.reverse();
        let dx = need_dx.then_some(g);
        Ok((GradSet { grads }, dx))
    }

    pub fn accumulate(&mut self, grads: &GradSet) -> Result<()> {
        for (name, g) in &grads.grads {
            self.bank.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.bank.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity_and_bias() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0]]);
        let out = affine_forward(&x, &Tensor2D::identity(2), &Tensor2D::zeros(1, 2)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let zero = Tensor2D::zeros(1, 2);
        let w = Tensor2D::from_rows(&[vec![5.0, -1.0], vec![2.0, 7.0]]);
        let b = Tensor2D::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(affine_forward(&zero, &w, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_matmul() {
        let x = Tensor2D::from_rows(&[vec![1.0, 1.0]]);
        let w = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = affine_forward(&x, &w, &Tensor2D::zeros(1, 2)).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor2D::zeros(1, 3);
        let w = Tensor2D::zeros(2, 2);
        let b = Tensor2D::zeros(1, 2);
        assert!(matches!(
            affine_forward(&x, &w, &b),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(affine_backward(&x, &w, &Tensor2D::zeros(1, 2)).is_err());
    }

    #[test]
    fn affine_backward_scalar_chain_rule() {
        let g = affine_backward(
            &Tensor2D::from_rows(&[vec![1.0]]),
            &Tensor2D::from_rows(&[vec![1.0]]),
            &Tensor2D::from_rows(&[vec![2.0]]),
        )
        .unwrap();
        assert_eq!(g.dw.data(), &[2.0]);
        assert_eq!(g.db.data(), &[2.0]);
        assert_eq!(g.dx.data(), &[2.0]);
    }

    #[test]
    fn affine_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = init_weight(3, 4, &mut rng);
        let w = init_weight(4, 2, &mut rng);
        let g = affine_backward(&x, &w, &Tensor2D::zeros(3, 2)).unwrap();
        assert!(g.dx.data().iter().chain(g.dw.data()).chain(g.db.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor2D::from_rows(&[vec![-1.0, 2.0]]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let neg = Tensor2D::from_rows(&[vec![-1.0, -3.0, 0.0]]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let back = relu_backward(&neg, &Tensor2D::filled(1, 3, 5.0)).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_two_classes() {
        let out = softmax_xent(&Tensor2D::zeros(1, 2), &[0]).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let out = softmax_xent(&Tensor2D::from_rows(&[vec![1000.0, -1000.0]]), &[0]).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.probs.all_finite() && out.dlogits.all_finite());
    }

    #[test]
    fn softmax_label_out_of_range() {
        assert!(matches!(
            softmax_xent(&Tensor2D::zeros(1, 2), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    fn scalar_bank(value: f64) -> ParamBank {
        let mut bank = ParamBank::new();
        bank.insert("w", Tensor2D::from_rows(&[vec![value]]));
        bank
    }

    #[test]
    fn adam_zero_grad_leaves_values() {
        let mut bank = scalar_bank(0.75);
        adam_step(&mut bank, &AdamConfig::default());
        assert_eq!(bank.value("w").data(), &[0.75]);
        assert_eq!(bank.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut bank = scalar_bank(0.0);
        bank.accumulate("w", &Tensor2D::from_rows(&[vec![1.0]])).unwrap();
        adam_step(&mut bank, &AdamConfig::default());
        // m_hat = 1, v_hat = 1, step = lr * 1 / (1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((bank.value("w").get(0, 0) - expected).abs() < 1e-15);
        // gradient left intact
        assert_eq!(bank.grad("w").data(), &[1.0]);
    }

    #[test]
    fn adam_symmetric_params() {
        let mut bank = ParamBank::new();
        bank.insert("a", Tensor2D::from_rows(&[vec![0.3]]));
        bank.insert("b", Tensor2D::from_rows(&[vec![0.3]]));
        for _ in 0..5 {
            bank.accumulate("a", &Tensor2D::from_rows(&[vec![0.7]])).unwrap();
            bank.accumulate("b", &Tensor2D::from_rows(&[vec![0.7]])).unwrap();
            adam_step(&mut bank, &AdamConfig::default());
            bank.zero_grads();
        }
        assert_eq!(bank.value("a"), bank.value("b"));
    }

    #[test]
    fn accumulate_adds() {
        let mut bank = scalar_bank(0.0);
        let g = Tensor2D::from_rows(&[vec![1.5]]);
        bank.accumulate("w", &g).unwrap();
        bank.accumulate("w", &g).unwrap();
        assert_eq!(bank.grad("w").data(), &[3.0]);
        bank.zero_grads();
        assert_eq!(bank.grad("w").data(), &[0.0]);
        assert!(bank.accumulate("w", &Tensor2D::zeros(2, 1)).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bias_zero() {
        let a = init_weight(5, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_weight(5, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(init_bias(7).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_std_matches_he() {
        let w = init_weight(1000, 100, &mut ChaCha8Rng::seed_from_u64(3));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 1000.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.05);
    }

    #[test]
    fn mlp_rejects_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mlp::new(&[3], false, &mut rng).is_err());
        assert!(Mlp::new(&[3, 0, 2], false, &mut rng).is_err());
    }

    #[test]
    fn per_row_squares_match_single_row_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(&[3, 4, 2], false, &mut rng).unwrap();
        let x = init_weight(5, 3, &mut rng);
        let up = init_weight(5, 2, &mut rng);
        let (_, cache) = mlp.forward_cached(&x).unwrap();
        let (sq, _) = mlp.backward_per_row_squares(&cache, &up, false).unwrap();
        let mut expected: Vec<Tensor2D> = Vec::new();
        for r in 0..5 {
            let (_, c) = mlp.forward_cached(&x.gather_rows(&[r])).unwrap();
            let (g, _) = mlp.backward(&c, &up.gather_rows(&[r]), false).unwrap();
            for (i, (_, t)) in g.grads.iter().enumerate() {
                let t2 = t.map(|v| v * v);
                if r == 0 {
                    expected.push(t2);
                } else {
                    expected[i].add_assign(&t2).unwrap();
                }
            }
        }
        for ((_, got), want) in sq.grads.iter().zip(&expected) {
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
