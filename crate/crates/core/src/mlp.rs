//! Fully connected network on top of shallow descriptors: ReLU hidden layers,
//! inverted dropout at the input of every layer, softmax cross-entropy loss,
//! momentum SGD. Hidden activations double as transferable features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

/// One affine layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks drawn from a generator seeded with this value.
    Train { seed: u64 },
}

/// Activations of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Post-ReLU output of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
    /// Pre-activation of every layer, the last one being the logits.
    pub pre_activations: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    found: l.bias.len(),
                });
            }
        }
        if layers.last().map(|l| l.output_dim()).unwrap_or(0) < 2 {
            return Err(Error::invalid("need at least 2 output classes"));
        }
        Ok(MlpModel { layers, dropout })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-a..a)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::new(layers, dropout)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_width(&self, layer: usize) -> usize {
        self.layers[layer - 1].output_dim()
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: d,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<Forward> {
        self.check_input(x.len())?;
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let pass = self.forward_batch(input, rng.as_mut());
        let last = pass.pre.len() - 1;
        Ok(Forward {
            logits: pass.pre[last].row(0).to_vec(),
            hidden: pass.acts[1..].iter().map(|a| a.row(0).to_vec()).collect(),
            pre_activations: pass.pre.iter().map(|z| z.row(0).to_vec()).collect(),
        })
    }

    /// Class scores in eval mode.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn forward_batch(&self, x: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> BatchPass {
        let keep = 1.0 - self.dropout;
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let a = &acts[i];
            let (input, mask) = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let mask = Array2::from_shape_fn(a.raw_dim(), |_| {
                        if r.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    (a * &mask, Some(mask))
                }
                _ => (a.clone(), None),
            };
            let z = input.dot(&layer.weights.t()) + &layer.bias;
            if i + 1 < self.layers.len() {
                acts.push(z.mapv(|v| v.max(0.0)));
            }
            inputs.push(input);
            masks.push(mask);
            pre.push(z);
        }
        BatchPass {
            acts,
            inputs,
            masks,
            pre,
        }
    }

    /// L2-normalized post-ReLU output of hidden layer `layer` (1-based).
    pub fn extract_activation(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.hidden_count() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range 1..={}",
                self.hidden_count()
            )));
        }
        let f = self.forward(x, Mode::Eval)?;
        Ok(linalg::l2_normalize(&f.hidden[layer - 1]))
    }
}

struct BatchPass {
    /// `acts[0]` is the batch input, `acts[i]` the output of hidden layer `i`.
    acts: Vec<Array2<f64>>,
    /// Input to each layer after dropout.
    inputs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    pre: Vec<Array2<f64>>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[label]` with max subtraction.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradients of the mean batch loss, one entry per layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
    pub loss: f64,
}

fn batch_gradients(
    model: &MlpModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Gradients> {
    let b = x.nrows();
    let pass = model.forward_batch(x, rng);
    let logits = pass.pre.last().unwrap();
    let mut loss = 0.0;
    let mut delta = Array2::zeros(logits.raw_dim());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r).to_vec();
        loss += softmax_cross_entropy(&row, y)?;
        let p = softmax(&row);
        for (c, pc) in p.into_iter().enumerate() {
            delta[[r, c]] = (pc - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("batch loss is {loss}")));
    }

    let n = model.layers.len();
    let mut gw = vec![Array2::zeros((0, 0)); n];
    let mut gb = vec![Array1::zeros(0); n];
    for i in (0..n).rev() {
        gw[i] = delta.t().dot(&pass.inputs[i]);
        gb[i] = delta.sum_axis(Axis(0));
        if i == 0 {
            break;
        }
        let mut d_in = delta.dot(&model.layers[i].weights);
        if let Some(m) = &pass.masks[i] {
            d_in *= m;
        }
        d_in.zip_mut_with(&pass.pre[i - 1], |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        delta = d_in;
    }
    if gw.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(Gradients {
        weights: gw,
        bias: gb,
        loss,
    })
}

/// Exact gradients of the mean cross-entropy over `(xs, labels)` in eval mode
/// (no dropout).
pub fn gradients(model: &MlpModel, xs: &Matrix, labels: &[usize]) -> Result<Gradients> {
    check_batch(model, xs, labels)?;
    let view = ArrayView2::from_shape((xs.rows(), xs.cols()), xs.as_slice()).expect("shape");
    batch_gradients(model, view, labels, None)
}

/// Mean cross-entropy over a batch in eval mode.
pub fn batch_loss(model: &MlpModel, xs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(model, xs, labels)?;
    let mut total = 0.0;
    for (x, &y) in xs.iter_rows().zip(labels) {
        total += softmax_cross_entropy(&model.logits(x)?, y)?;
    }
    Ok(total / xs.rows() as f64)
}

fn check_batch(model: &MlpModel, xs: &Matrix, labels: &[usize]) -> Result<()> {
    if xs.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if xs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.rows(),
            found: labels.len(),
        });
    }
    model.check_input(xs.cols())?;
    if let Some(&y) = labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    Ok(())
}

/// Momentum SGD state: velocities plus the dropout mask generator.
pub struct Sgd {
    momentum: f64,
    vel_w: Vec<Array2<f64>>,
    vel_b: Vec<Array1<f64>>,
    rng: ChaCha8Rng,
}

impl Sgd {
    pub fn new(model: &MlpModel, momentum: f64, seed: u64) -> Self {
        Sgd {
            momentum,
            vel_w: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            vel_b: model.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One update on a mini-batch: `v ← m·v − lr·g; θ ← θ + v`. Returns the
    /// batch loss measured before the update.
    pub fn step(&mut self, model: &mut MlpModel, xs: &Matrix, labels: &[usize], lr: f64) -> Result<f64> {
        check_batch(model, xs, labels)?;
        let view = ArrayView2::from_shape((xs.rows(), xs.cols()), xs.as_slice()).expect("shape");
        let g = batch_gradients(model, view, labels, Some(&mut self.rng))?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let m = self.momentum;
            self.vel_w[i].zip_mut_with(&g.weights[i], |v, &gi| *v = m * *v - lr * gi);
            self.vel_b[i].zip_mut_with(&g.bias[i], |v, &gi| *v = m * *v - lr * gi);
            layer.weights += &self.vel_w[i];
            layer.bias += &self.vel_b[i];
        }
        Ok(g.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_width: 256,
            hidden_layers: 1,
            dropout: 0.35,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 60,
            lr_decay: 0.1,
            lr_step: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "learning rate, batch size and epochs must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.lr_step == 0 || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("lr_step and lr_decay must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation accuracy per epoch, when a validation set was given.
    pub val_accuracy: Vec<f64>,
    /// Epoch whose model was returned.
    pub selected_epoch: usize,
}

pub fn accuracy(model: &MlpModel, xs: &Matrix, labels: &[usize]) -> Result<f64> {
    if xs.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, &y) in xs.iter_rows().zip(labels) {
        hits += (model.predict(x)? == y) as usize;
    }
    Ok(hits as f64 / xs.rows() as f64)
}

/// Trains from scratch with seeded shuffling, initialization and dropout.
/// With a validation set the best-scoring epoch is returned (earliest on ties).
pub fn train(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    config: &TrainConfig,
    validation: Option<(&Matrix, &[usize])>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            found: labels.len(),
        });
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has no training samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hidden = vec![config.hidden_width; config.hidden_layers];
    let mut model = MlpModel::init(features.cols(), &hidden, classes, config.dropout, &mut rng)?;
    let mut sgd = Sgd::new(&model, config.momentum, rng.gen());

    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut val_accuracy = Vec::new();
    let mut best: Option<(f64, usize, MlpModel)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xs = features.select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            total += sgd.step(&mut model, &xs, &ys, lr)? * chunk.len() as f64;
        }
        epoch_loss.push(total / features.rows() as f64);
        if let Some((vx, vy)) = validation {
            let acc = accuracy(&model, vx, vy)?;
            val_accuracy.push(acc);
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs - 1),
    };
    Ok(TrainOutcome {
        model,
        epoch_loss,
        val_accuracy,
        selected_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(seed: u64, dropout: f64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel::init(5, &[4], 3, dropout, &mut rng).unwrap()
    }

    fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ys = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        (xs, ys)
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut m = tiny(0, 0.0);
        for l in m.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let f = m.forward(&[1.0, -2.0, 3.0, 0.5, 0.0], Mode::Eval).unwrap();
        assert_eq!(f.logits, vec![0.0; 3]);
        let p = softmax(&f.logits);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn no_dropout_means_train_equals_eval() {
        let m = tiny(1, 0.0);
        let x = [0.3, -0.1, 0.8, 0.0, -0.5];
        assert_eq!(
            m.forward(&x, Mode::Eval).unwrap(),
            m.forward(&x, Mode::Train { seed: 7 }).unwrap()
        );
    }

    #[test]
    fn identity_layer() {
        let layer = DenseLayer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let m = MlpModel::new(vec![layer], 0.0).unwrap();
        assert_eq!(m.logits(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((softmax_cross_entropy(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap() < 1e-300);
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..5);
            let direct = -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
            assert!((softmax_cross_entropy(&z, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny(3, 0.0);
        let (xs, ys) = random_batch(6, 5, 3, 4);
        let g = gradients(&model, &xs, &ys).unwrap();
        let eps = 1e-5;
        for li in 0..model.layers().len() {
            let shape = model.layers()[li].weights.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut p = model.clone();
                    p.layers_mut()[li].weights[[r, c]] += eps;
                    let mut q = model.clone();
                    q.layers_mut()[li].weights[[r, c]] -= eps;
                    let num = (batch_loss(&p, &xs, &ys).unwrap() - batch_loss(&q, &xs, &ys).unwrap()) / (2.0 * eps);
                    let ana = g.weights[li][[r, c]];
                    assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{num} vs {ana}");
                }
                let mut p = model.clone();
                p.layers_mut()[li].bias[r] += eps;
                let mut q = model.clone();
                q.layers_mut()[li].bias[r] -= eps;
                let num = (batch_loss(&p, &xs, &ys).unwrap() - batch_loss(&q, &xs, &ys).unwrap()) / (2.0 * eps);
                let ana = g.bias[li][r];
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn gradient_descent_decreases_convex_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = MlpModel::init(4, &[], 3, 0.0, &mut rng).unwrap();
        let (xs, ys) = random_batch(20, 4, 3, 6);
        let mut sgd = Sgd::new(&model, 0.0, 0);
        let mut prev = batch_loss(&model, &xs, &ys).unwrap();
        for _ in 0..20 {
            sgd.step(&mut model, &xs, &ys, 1e-2).unwrap();
            let now = batch_loss(&model, &xs, &ys).unwrap();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn sgd_is_deterministic() {
        let (xs, ys) = random_batch(10, 5, 3, 8);
        let run = || {
            let mut m = tiny(9, 0.4);
            let mut sgd = Sgd::new(&m, 0.9, 11);
            for _ in 0..5 {
                sgd.step(&mut m, &xs, &ys, 0.05).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut m = tiny(0, 0.0);
        m.layers_mut()[1].weights.fill(f64::NAN);
        let (xs, ys) = random_batch(2, 5, 3, 0);
        let mut sgd = Sgd::new(&m, 0.9, 0);
        assert!(matches!(sgd.step(&mut m, &xs, &ys, 0.1), Err(Error::Numerical(_))));
    }

    #[test]
    fn separable_points_without_hidden_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let off = if y == 0 { -1.5 } else { 1.5 };
            rows.push(vec![off + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            ys.push(y);
        }
        let xs = Matrix::from_rows(&rows).unwrap();
        let cfg = TrainConfig {
            hidden_layers: 0,
            dropout: 0.0,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 8,
            lr_step: 1000,
            ..TrainConfig::default()
        };
        let out = train(&xs, &ys, 2, &cfg, None).unwrap();
        assert_eq!(accuracy(&out.model, &xs, &ys).unwrap(), 1.0);
    }

    #[test]
    fn xor_with_one_hidden_layer() {
        let xs = Matrix::new(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let ys = vec![0, 1, 1, 0];
        let solved = (0..5u64).any(|seed| {
            let cfg = TrainConfig {
                hidden_width: 8,
                hidden_layers: 1,
                dropout: 0.0,
                learning_rate: 0.1,
                batch_size: 4,
                epochs: 2000,
                lr_step: 10_000,
                seed,
                ..TrainConfig::default()
            };
            let out = train(&xs, &ys, 2, &cfg, None).unwrap();
            accuracy(&out.model, &xs, &ys).unwrap() == 1.0
        });
        assert!(solved);
    }

    #[test]
    fn two_point_fit() {
        let xs = Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap();
        let cfg = TrainConfig {
            hidden_width: 4,
            dropout: 0.0,
            learning_rate: 0.1,
            epochs: 100,
            ..TrainConfig::default()
        };
        let out = train(&xs, &[0, 1], 2, &cfg, None).unwrap();
        assert_eq!(accuracy(&out.model, &xs, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let xs = Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap();
        assert!(train(&xs, &[0, 0], 3, &TrainConfig::default(), None).is_err());
        assert!(train(&xs, &[0, 0], 1, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn validation_selects_best_epoch() {
        let (xs, ys) = random_batch(30, 5, 3, 12);
        let (vx, vy) = random_batch(10, 5, 3, 13);
        let cfg = TrainConfig {
            hidden_width: 6,
            epochs: 15,
            ..TrainConfig::default()
        };
        let out = train(&xs, &ys, 3, &cfg, Some((&vx, &vy))).unwrap();
        let best = out.val_accuracy.iter().cloned().fold(0.0, f64::max);
        assert_eq!(out.val_accuracy[out.selected_epoch], best);
        assert_eq!(accuracy(&out.model, &vx, &vy).unwrap(), best);
    }

    #[test]
    fn activation_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = MlpModel::init(6, &[16, 8], 3, 0.3, &mut rng).unwrap();
        assert_eq!(m.extract_activation(&[0.5; 6], 1).unwrap().len(), 16);
        assert_eq!(m.extract_activation(&[0.5; 6], 2).unwrap().len(), 8);
        assert!(m.extract_activation(&[0.5; 6], 0).is_err());
        assert!(m.extract_activation(&[0.5; 6], 3).is_err());
        assert_eq!(m.extract_activation(&[0.0; 6], 1).unwrap(), vec![0.0; 16]);
        let a = m.extract_activation(&[0.3, -0.2, 0.9, 0.1, 0.4, -0.7], 1).unwrap();
        let n = linalg::l2_norm(&a);
        assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut m = MlpModel::init(20, &[5], 2, 0.4, &mut rng).unwrap();
        // positive weights and inputs keep the pre-activations away from zero
        m.layers_mut()[0].weights.mapv_inplace(|w| 0.5 + w.abs());
        let x: Vec<f64> = (0..20).map(|i| 0.5 + 0.5 * (i as f64 * 0.37).sin().abs()).collect();
        let eval = m.forward(&x, Mode::Eval).unwrap().pre_activations[0].clone();
        let mut mean = vec![0.0; 5];
        let n = 10_000;
        for s in 0..n {
            let f = m.forward(&x, Mode::Train { seed: s }).unwrap();
            mean.iter_mut().zip(&f.pre_activations[0]).for_each(|(a, b)| *a += b / n as f64);
        }
        for (a, b) in mean.iter().zip(&eval) {
            assert!((a - b).abs() <= 0.02 * b.abs().max(0.1), "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn softmax_properties(z in proptest::collection::vec(-50f64..50.0, 2..10), y in 0usize..2) {
            let s: f64 = softmax(&z).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(softmax_cross_entropy(&z, y).unwrap() >= 0.0);
        }

        #[test]
        fn eval_ignores_seed(seed in any::<u64>()) {
            let m = tiny(16, 0.5);
            let x = [0.1, 0.2, -0.3, 0.4, 0.5];
            let a = m.forward(&x, Mode::Eval).unwrap();
            let b = m.forward(&x, Mode::Eval).unwrap();
            prop_assert_eq!(a, b);
            let _ = m.forward(&x, Mode::Train { seed }).unwrap();
        }
    }
}
