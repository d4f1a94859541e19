//! Small batch-norm-equipped multilayer perceptron with hand-rolled
//! backpropagation, the workload the training harness drives.
//!
//! Architecture: `input -> [linear -> (bn) -> relu]* -> linear -> softmax`
//! with mean cross-entropy loss. Parameters are exposed as a named map so
//! the trainer can all-reduce gradients and step each tensor independently.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::syncbn::{bn_backward, bn_forward_eval, bn_forward_train, BnLayerState};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Shape of the perceptron: layer sizes from input to classes, a batch-norm
/// flag per hidden layer, and the weight-init scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    batchnorm: Vec<bool>,
    init_scale: f64,
}

impl ModelSpec {
    /// `layer_sizes` runs input -> hidden... -> classes and needs at least
    /// one hidden layer; `batchnorm` applies to every hidden layer.
    pub fn new(layer_sizes: Vec<usize>, batchnorm: bool, init_scale: f64) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::ModelSpec(format!(
                "need input, >=1 hidden, and class sizes; got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::ModelSpec(format!("zero-sized layer in {layer_sizes:?}")));
        }
        let classes = *layer_sizes.last().expect("non-empty");
        if classes < 2 {
            return Err(Error::ModelSpec(format!("need >= 2 classes, got {classes}")));
        }
        if init_scale.is_nan() || init_scale <= 0.0 {
            return Err(Error::ModelSpec(format!("init_scale must be positive, got {init_scale}")));
        }
        let hidden = layer_sizes.len() - 2;
        Ok(Self {
            layer_sizes,
            batchnorm: vec![batchnorm; hidden],
            init_scale,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn hidden_count(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn uses_batchnorm(&self) -> bool {
        self.batchnorm.iter().any(|&b| b)
    }
}

/// One model instance: linear layers plus optional per-hidden-layer
/// batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    /// weights[i]: `[fan_in, fan_out]`, biases[i]: `[fan_out]`
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    bn: Vec<Option<BnLayerState>>,
}

/// Named parameter or gradient collection; BTreeMap ordering keeps every
/// traversal deterministic.
pub type ParamMap = BTreeMap<String, Tensor>;

impl Mlp {
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..spec.layer_sizes.len() - 1 {
            let fan_in = spec.layer_sizes[i];
            let fan_out = spec.layer_sizes[i + 1];
            let stddev = spec.init_scale * (2.0 / fan_in as f64).sqrt();
            weights.push(rng.normal_tensor(&[fan_in, fan_out], 0.0, stddev));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        let bn = (0..spec.hidden_count())
            .map(|i| spec.batchnorm[i].then(|| BnLayerState::new(spec.layer_sizes[i + 1])))
            .collect();
        Self { spec, weights, biases, bn }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn bn_layer_mut(&mut self, hidden_index: usize) -> Option<&mut BnLayerState> {
        self.bn[hidden_index].as_mut()
    }

    pub fn bn_layer(&self, hidden_index: usize) -> Option<&BnLayerState> {
        self.bn[hidden_index].as_ref()
    }

    /// Snapshot of parameters, including batch-norm scale/shift.
    pub fn param_map(&self) -> ParamMap {
        let mut map = ParamMap::new();
        for i in 0..self.weights.len() {
            map.insert(format!("layer{i}.weight"), self.weights[i].clone());
            map.insert(format!("layer{i}.bias"), self.biases[i].clone());
        }
        for (i, bn) in self.bn.iter().enumerate() {
            if let Some(state) = bn {
                map.insert(format!("layer{i}.bn_gamma"), state.gamma.clone());
                map.insert(format!("layer{i}.bn_beta"), state.beta.clone());
            }
        }
        map
    }

    /// Overwrite parameters from a map produced by [`Mlp::param_map`].
    pub fn apply_params(&mut self, params: &ParamMap) -> Result<()> {
        for i in 0..self.weights.len() {
            self.weights[i] = fetch(params, &format!("layer{i}.weight"), self.weights[i].shape())?;
            self.biases[i] = fetch(params, &format!("layer{i}.bias"), self.biases[i].shape())?;
        }
        for (i, bn) in self.bn.iter_mut().enumerate() {
            if let Some(state) = bn {
                state.gamma = fetch(params, &format!("layer{i}.bn_gamma"), state.gamma.shape())?;
                state.beta = fetch(params, &format!("layer{i}.bn_beta"), state.beta.shape())?;
            }
        }
        Ok(())
    }

    /// Total number of parameter elements (the gradient payload size).
    pub fn param_elements(&self) -> usize {
        self.param_map().values().map(Tensor::len).sum()
    }

    /// Name of the first parameter that differs bit-for-bit from `other`,
    /// if any. Used to enforce replica consistency without cloning.
    pub fn param_difference(&self, other: &Mlp) -> Option<String> {
        for i in 0..self.weights.len() {
            if self.weights[i] != other.weights[i] {
                return Some(format!("layer{i}.weight"));
            }
            if self.biases[i] != other.biases[i] {
                return Some(format!("layer{i}.bias"));
            }
        }
        for (i, (a, b)) in self.bn.iter().zip(&other.bn).enumerate() {
            if let (Some(a), Some(b)) = (a, b) {
                if a.gamma != b.gamma {
                    return Some(format!("layer{i}.bn_gamma"));
                }
                if a.beta != b.beta {
                    return Some(format!("layer{i}.bn_beta"));
                }
            }
        }
        None
    }

    /// Training-mode forward and backward over one minibatch. Returns the
    /// mean cross-entropy loss and the gradient of that mean for every named
    /// parameter. Updates batch-norm last-minibatch statistics as a side
    /// effect.
    pub fn forward_backward(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, ParamMap)> {
        let batch = self.check_batch(x, labels)?;
        let sizes = self.spec.layer_sizes.clone();
        let hidden = self.spec.hidden_count();

        // forward, keeping what backward needs
        let mut activations: Vec<Tensor> = vec![x.clone()]; // inputs to each linear layer
        let mut pre_bn: Vec<Tensor> = Vec::with_capacity(hidden);
        let mut post_bn: Vec<Tensor> = Vec::with_capacity(hidden);
        for i in 0..hidden {
            let z = linear_forward(&activations[i], &self.weights[i], &self.biases[i]);
            let bn_out = match self.bn[i].as_mut() {
                Some(state) => bn_forward_train(&z, state, BN_EPS)?,
                None => z.clone(),
            };
            let act = relu(&bn_out);
            pre_bn.push(z);
            post_bn.push(bn_out);
            activations.push(act);
        }
        let logits = linear_forward(
            &activations[hidden],
            &self.weights[hidden],
            &self.biases[hidden],
        );

        let classes = sizes[sizes.len() - 1];
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, classes)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
                index: first_bad_layer(&activations, &logits),
            });
        }

        // backward
        let mut grads = ParamMap::new();
        let (gw, gb, dx) = linear_backward(&activations[hidden], &self.weights[hidden], &dlogits);
        grads.insert(format!("layer{hidden}.weight"), gw);
        grads.insert(format!("layer{hidden}.bias"), gb);
        let mut upstream = dx;

        for i in (0..hidden).rev() {
            // through relu
            relu_backward_inplace(&mut upstream, &post_bn[i]);
            // through batch norm if present
            let dz = match self.bn[i].as_ref() {
                Some(state) => {
                    let g = bn_backward(&upstream, &pre_bn[i], state, BN_EPS)?;
                    grads.insert(format!("layer{i}.bn_gamma"), g.grad_gamma);
                    grads.insert(format!("layer{i}.bn_beta"), g.grad_beta);
                    g.grad_x
                }
                None => upstream,
            };
            let (gw, gb, dx) = linear_backward(&activations[i], &self.weights[i], &dz);
            grads.insert(format!("layer{i}.weight"), gw);
            grads.insert(format!("layer{i}.bias"), gb);
            upstream = dx;
        }

        debug_assert_eq!(batch, x.shape()[0]);
        Ok((loss, grads))
    }

    /// Evaluation-mode forward: batch norm layers use their synchronized
    /// statistics. Returns summed loss and correct top-1 count so callers
    /// can aggregate across batches.
    pub fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        self.check_batch(x, labels)?;
        let hidden = self.spec.hidden_count();
        let mut act = x.clone();
        for i in 0..hidden {
            let z = linear_forward(&act, &self.weights[i], &self.biases[i]);
            let bn_out = match self.bn[i].as_ref() {
                Some(state) => bn_forward_eval(&z, state, BN_EPS)?,
                None => z,
            };
            act = relu(&bn_out);
        }
        let logits = linear_forward(&act, &self.weights[hidden], &self.biases[hidden]);
        let classes = self.spec.classes();
        let batch = labels.len();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for row in 0..batch {
            let l = &logits.data()[row * classes..(row + 1) * classes];
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - l[labels[row]];
            let argmax = l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("classes >= 2");
            if argmax == labels[row] {
                correct += 1;
            }
        }
        Ok((loss_sum, correct))
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<usize> {
        let (batch, dim) = match x.shape() {
            [b, d] => (*b, *d),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![labels.len(), self.spec.input_dim()],
                    got: x.shape().to_vec(),
                })
            }
        };
        if dim != self.spec.input_dim() || batch != labels.len() || batch == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), self.spec.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        let classes = self.spec.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range 0..{classes}")));
        }
        Ok(batch)
    }
}

fn fetch(params: &ParamMap, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(t.clone())
}

/// `y = x W + b` for `x: [batch, k]`, `W: [k, n]`.
fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, k) = (x.shape()[0], x.shape()[1]);
    let n = w.shape()[1];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; batch * n];
    for row in 0..batch {
        let y = &mut out[row * n..(row + 1) * n];
        y.copy_from_slice(bd);
        let xrow = &xd[row * k..(row + 1) * k];
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[kk * n..(kk + 1) * n];
            for (yv, &wv) in y.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    }
    Tensor::new(vec![batch, n], out).expect("consistent dims")
}

/// Given upstream `dy: [batch, n]`, produce `(dW, db, dx)`.
fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, k) = (x.shape()[0], x.shape()[1]);
    let n = w.shape()[1];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    let mut dw = vec![0.0; k * n];
    let mut db = vec![0.0; n];
    let mut dx = vec![0.0; batch * k];
    for row in 0..batch {
        let dyrow = &dyd[row * n..(row + 1) * n];
        for (j, &dv) in dyrow.iter().enumerate() {
            db[j] += dv;
        }
        let xrow = &xd[row * k..(row + 1) * k];
        for kk in 0..k {
            let dwrow = &mut dw[kk * n..(kk + 1) * n];
            let xv = xrow[kk];
            for (dwv, &dv) in dwrow.iter_mut().zip(dyrow) {
                *dwv += xv * dv;
            }
        }
        let dxrow = &mut dx[row * k..(row + 1) * k];
        for (kk, dxv) in dxrow.iter_mut().enumerate() {
            let wrow = &wd[kk * n..(kk + 1) * n];
            *dxv = wrow.iter().zip(dyrow).map(|(&wv, &dv)| wv * dv).sum();
        }
    }
    (
        Tensor::new(vec![k, n], dw).expect("consistent dims"),
        Tensor::from_vec(db),
        Tensor::new(vec![batch, k], dx).expect("consistent dims"),
    )
}

fn relu(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
    .expect("shape preserved")
}

fn relu_backward_inplace(upstream: &mut Tensor, pre_activation: &Tensor) {
    for (g, &z) in upstream.data_mut().iter_mut().zip(pre_activation.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Mean cross-entropy of row-wise softmax plus its gradient w.r.t. logits.
fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Tensor)> {
    let batch = labels.len();
    let ld = logits.data();
    let mut dlogits = vec![0.0; batch * classes];
    let mut loss_sum = 0.0;
    for row in 0..batch {
        let l = &ld[row * classes..(row + 1) * classes];
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = l.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss_sum += lse - l[labels[row]];
        let drow = &mut dlogits[row * classes..(row + 1) * classes];
        for (j, dv) in drow.iter_mut().enumerate() {
            let p = (l[j] - lse).exp();
            *dv = (p - if j == labels[row] { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((
        loss_sum / batch as f64,
        Tensor::new(vec![batch, classes], dlogits).expect("consistent dims"),
    ))
}

/// Diagnostic for a non-finite loss: index of the first layer whose
/// activations contain a non-finite value.
fn first_bad_layer(activations: &[Tensor], logits: &Tensor) -> usize {
    for (i, a) in activations.iter().enumerate() {
        if a.first_nonfinite().is_some() {
            return i;
        }
    }
    if logits.first_nonfinite().is_some() {
        return activations.len();
    }
    activations.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], bn: bool) -> ModelSpec {
        ModelSpec::new(sizes.to_vec(), bn, 1.0).unwrap()
    }

    fn random_batch(rng: &mut Rng, batch: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
        let x = rng.normal_tensor(&[batch, dim], 0.0, 1.0);
        let labels = (0..batch).map(|_| rng.next_below(classes as u64) as usize).collect();
        (x, labels)
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(vec![4, 2], false, 1.0).is_err()); // no hidden
        assert!(ModelSpec::new(vec![4, 8, 1], false, 1.0).is_err()); // 1 class
        assert!(ModelSpec::new(vec![4, 0, 2], false, 1.0).is_err());
        assert!(ModelSpec::new(vec![4, 8, 3], false, 0.0).is_err());
        let s = spec(&[4, 8, 3], true);
        assert_eq!(s.hidden_count(), 1);
        assert_eq!(s.classes(), 3);
        assert!(s.uses_batchnorm());
    }

    #[test]
    fn untrained_loss_is_log_classes() {
        // small init keeps the softmax near uniform
        for classes in [2usize, 10] {
            let mut rng = Rng::new(515);
            let model_spec = ModelSpec::new(vec![8, 16, classes], false, 0.05).unwrap();
            let mut model = Mlp::init(model_spec, &mut rng);
            let (x, labels) = random_batch(&mut rng, 512, 8, classes);
            let (loss, _) = model.forward_backward(&x, &labels).unwrap();
            let expected = (classes as f64).ln();
            assert!(
                (loss - expected).abs() < 0.1,
                "classes={classes}: loss {loss}, expected about {expected}"
            );
        }
    }

    #[test]
    fn duplicating_the_minibatch_changes_nothing_without_bn() {
        let mut rng = Rng::new(99);
        let mut model = Mlp::init(spec(&[6, 12, 4], false), &mut rng);
        let (x, labels) = random_batch(&mut rng, 8, 6, 4);

        let (loss1, grads1) = model.forward_backward(&x, &labels).unwrap();

        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let x2 = Tensor::new(vec![16, 6], doubled).unwrap();
        let mut labels2 = labels.clone();
        labels2.extend_from_slice(&labels);
        let (loss2, grads2) = model.forward_backward(&x2, &labels2).unwrap();

        assert!((loss1 - loss2).abs() < 1e-12);
        for (name, g1) in &grads1 {
            let g2 = &grads2[name];
            for (a, b) in g1.data().iter().zip(g2.data()) {
                assert!((a - b).abs() < 1e-12, "{name} gradient differs");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(2024);
        let model_spec = spec(&[3, 5, 4, 3], true);
        let mut model = Mlp::init(model_spec, &mut rng);
        let (x, labels) = random_batch(&mut rng, 6, 3, 3);
        let (_, grads) = model.forward_backward(&x, &labels).unwrap();

        let h = 1e-5;
        let params = model.param_map();
        for (name, tensor) in &params {
            // subsample elements of big tensors
            let stride = (tensor.len() / 6).max(1);
            for k in (0..tensor.len()).step_by(stride) {
                let mut up = params.clone();
                up.get_mut(name).expect("exists").data_mut()[k] += h;
                let mut down = params.clone();
                down.get_mut(name).expect("exists").data_mut()[k] -= h;

                let mut m = model.clone();
                m.apply_params(&up).unwrap();
                let (lp, _) = m.forward_backward(&x, &labels).unwrap();
                m.apply_params(&down).unwrap();
                let (lm, _) = m.forward_backward(&x, &labels).unwrap();

                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads[name].data()[k];
                let denom = numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    ((numeric - analytic) / denom).abs() < 1e-4,
                    "{name}[{k}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn param_map_roundtrip_is_identity() {
        let mut rng = Rng::new(8);
        let mut model = Mlp::init(spec(&[4, 6, 2], true), &mut rng);
        let original = model.param_map();
        model.apply_params(&original).unwrap();
        assert_eq!(model.param_map(), original);
        assert_eq!(
            model.param_elements(),
            original.values().map(Tensor::len).sum::<usize>()
        );
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut rng = Rng::new(1);
        let mut model = Mlp::init(spec(&[2, 3, 2], false), &mut rng);
        let x = rng.normal_tensor(&[2, 2], 0.0, 1.0);
        assert!(model.forward_backward(&x, &[0, 2]).is_err());
    }

    #[test]
    fn evaluate_without_sync_fails_only_with_bn() {
        let mut rng = Rng::new(6);
        let (x, labels) = random_batch(&mut rng, 4, 3, 2);

        let mut plain = Mlp::init(spec(&[3, 4, 2], false), &mut rng);
        plain.forward_backward(&x, &labels).unwrap();
        assert!(plain.evaluate(&x, &labels).is_ok());

        let mut with_bn = Mlp::init(spec(&[3, 4, 2], true), &mut rng);
        with_bn.forward_backward(&x, &labels).unwrap();
        assert!(matches!(
            with_bn.evaluate(&x, &labels),
            Err(Error::MissingSyncedStats)
        ));
    }
}
