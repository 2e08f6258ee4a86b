//! Toy supervised training demo.
//!
//! A three-stage channel-mixing network with switchable-whitening layers
//! after the first and second stages, trained by plain SGD on synthetic data
//! whose per-sample "style" diversity is controllable. The point is the
//! selection dynamics: logging how the importance weights drift as style
//! diversity grows.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sw::{
    backward, forward_eval, forward_train, importance_weights, merge_groups, split_groups,
    SwConfig, SwState,
};
use crate::tensor::{Matrix, Tensor4};

/// Pixel noise applied to every sample regardless of style strength.
const PIXEL_NOISE: f64 = 0.1;

/// Synthetic dataset description.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the per-sample channel-wise affine distortion:
    /// `x_c -> exp(s * u_c) * x_c + s * v_c` with standard-normal `u, v`.
    /// Zero means all samples of a class are identical up to pixel noise.
    pub style_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::ConfigError("need at least two classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::ConfigError("need at least one sample per class".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::ConfigError("degenerate sample shape".into()));
        }
        if self.channels > self.height * self.width {
            return Err(Error::ConfigError(
                "channel templates cannot be decorrelated: channels > H*W".into(),
            ));
        }
        if !(self.style_strength >= 0.0) {
            return Err(Error::ConfigError("style strength must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.samples_per_class
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            samples_per_class: 256,
            channels: 8,
            height: 4,
            width: 4,
            style_strength: 0.0,
            seed: 0,
        }
    }
}

/// Labeled synthetic data, one tensor for the whole set.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub x: Tensor4<S>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Deterministic synthetic data: one template per class (channel patterns
/// decorrelated across channels so instance whitening can strip the style
/// distortion exactly), plus the per-sample style affine and pixel noise.
pub fn generate_dataset<S: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let hw = h * w;

    // Class templates: centered, Gram-Schmidt-decorrelated channel patterns,
    // each channel scaled by a class-specific factor, plus a per-channel
    // class offset. The decorrelation means a channel-wise style affine
    // stays removable by per-sample whitening; the class-specific channel
    // variances are signal that batch statistics preserve and per-sample
    // whitening erases.
    let mut templates = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut t = Matrix::<f64>::zeros(c, hw);
        for v in t.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
        for r in 0..c {
            let mean: f64 = t.row(r).iter().sum::<f64>() / hw as f64;
            for v in t.row_mut(r) {
                *v -= mean;
            }
            for prev in 0..r {
                let proj: f64 = t
                    .row(r)
                    .iter()
                    .zip(t.row(prev))
                    .map(|(&a, &b)| a * b)
                    .sum();
                let prev_row: Vec<f64> = t.row(prev).to_vec();
                for (v, &p) in t.row_mut(r).iter_mut().zip(prev_row.iter()) {
                    *v -= proj * p;
                }
            }
            let norm: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(Error::NumericalFailure(
                    "degenerate template draw during orthogonalization".into(),
                ));
            }
            let class_scale: f64 = 0.5 + rng.random::<f64>(); // in [0.5, 1.5)
            let scale = class_scale * (hw as f64).sqrt() / norm;
            for v in t.row_mut(r) {
                *v *= scale;
            }
            let offset: f64 = rng.sample(StandardNormal);
            for v in t.row_mut(r) {
                *v += offset;
            }
        }
        templates.push(t);
    }

    let total = spec.total_samples();
    let mut x = Tensor4::<S>::zeros((total, c, h, w));
    let mut labels = Vec::with_capacity(total);
    let s = spec.style_strength;
    for i in 0..total {
        let class = i % spec.classes;
        labels.push(class);
        let t = &templates[class];
        for ci in 0..c {
            let (gain, shift) = if s > 0.0 {
                let u: f64 = rng.sample(StandardNormal);
                let v: f64 = rng.sample(StandardNormal);
                ((s * u).exp(), s * v)
            } else {
                (1.0, 0.0)
            };
            for hi in 0..h {
                for wi in 0..w {
                    let noise: f64 = rng.sample(StandardNormal);
                    let value = gain * t.get(ci, hi * w + wi) + shift + PIXEL_NOISE * noise;
                    x.set(i, ci, hi, wi, S::from_f64(value));
                }
            }
        }
    }
    Ok(Dataset {
        x,
        labels,
        classes: spec.classes,
    })
}

/// Training hyperparameters for the demo loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate for network weights and the affine parameters.
    pub lr: f64,
    /// Learning rate for the importance weights; set to zero to freeze the
    /// mixture.
    pub lr_phi: f64,
    pub seed: u64,
    pub sw: SwConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 0.05,
            lr_phi: 0.05,
            seed: 0,
            sw: SwConfig {
                group_size: 4,
                path: crate::whitening::WhiteningPath::newton_default(),
                ..SwConfig::default()
            },
        }
    }
}

/// Importance-weight snapshot of one layer at one step.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub omega: Vec<f64>,
    pub omega_prime: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    pub layers: Vec<LayerWeights>,
}

/// Per-step loss and importance-weight trajectories.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    /// Mean of a method's covariance weight across layers at the last step.
    pub fn final_mean_omega_prime(&self, method_index: usize) -> f64 {
        let last = self.steps.last().expect("non-empty log");
        let sum: f64 = last
            .layers
            .iter()
            .map(|l| l.omega_prime[method_index])
            .sum();
        sum / last.layers.len() as f64
    }
}

/// Three-stage network: channel mix, SW, ReLU, channel mix, SW, ReLU,
/// global average pool, linear classifier.
#[derive(Debug, Clone)]
pub struct DemoNet<S> {
    pub w1: Matrix<S>,
    pub sw1: SwState<S>,
    pub w2: Matrix<S>,
    pub sw2: SwState<S>,
    pub w3: Matrix<S>,
    pub b3: Vec<S>,
    pub sw_config: SwConfig,
    channels: usize,
    classes: usize,
}

impl<S: Scalar> DemoNet<S> {
    pub fn new(channels: usize, classes: usize, sw_config: &SwConfig, seed: u64) -> Result<Self> {
        sw_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b73);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut init = |rows: usize, cols: usize| -> Matrix<S> {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = S::from_f64(rng.sample::<f64, _>(StandardNormal) * scale);
            }
            m
        };
        Ok(Self {
            w1: init(channels, channels),
            sw1: SwState::new(channels, sw_config)?,
            w2: init(channels, channels),
            sw2: SwState::new(channels, sw_config)?,
            w3: init(classes, channels),
            b3: vec![S::zero(); classes],
            sw_config: sw_config.clone(),
            channels,
            classes,
        })
    }

    pub fn layer_states(&self) -> [&SwState<S>; 2] {
        [&self.sw1, &self.sw2]
    }

    /// Inference forward: logits for a batch, using the running buffers.
    pub fn logits_eval(&self, x: &Tensor4<S>) -> Result<Matrix<S>> {
        let shape = x.shape();
        let m0 = as_channel_matrix(x)?;
        let t1 = self.w1.matmul(&m0)?;
        let y1 = forward_eval(&to_tensor(&t1, shape)?, &self.sw1, &self.sw_config)?;
        let r1 = relu(&y1);
        let t2 = self.w2.matmul(&as_channel_matrix(&r1)?)?;
        let y2 = forward_eval(&to_tensor(&t2, shape)?, &self.sw2, &self.sw_config)?;
        let r2 = relu(&y2);
        let feats = global_average_pool(&r2);
        let mut logits = self.w3.matmul(&feats)?;
        add_col_bias(&mut logits, &self.b3);
        Ok(logits)
    }

    /// Fraction of samples whose argmax logit matches the label.
    pub fn accuracy(&self, data: &Dataset<S>) -> Result<f64> {
        let logits = self.logits_eval(&data.x)?;
        let mut correct = 0usize;
        for (i, &label) in data.labels.iter().enumerate() {
            let mut best = 0usize;
            for k in 1..self.classes {
                if logits.get(k, i) > logits.get(best, i) {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.labels.len() as f64)
    }
}

/// `C x N*H*W` view of a tensor (copy).
fn as_channel_matrix<S: Scalar>(x: &Tensor4<S>) -> Result<Matrix<S>> {
    let (_, c, _, _) = x.shape();
    Ok(split_groups(x, c)?.pop().expect("single group"))
}

fn to_tensor<S: Scalar>(m: &Matrix<S>, shape: (usize, usize, usize, usize)) -> Result<Tensor4<S>> {
    merge_groups(core::slice::from_ref(m), shape)
}

fn relu<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    out
}

fn relu_backward<S: Scalar>(pre: &Tensor4<S>, upstream: &Tensor4<S>) -> Tensor4<S> {
    let mut out = upstream.clone();
    for (g, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= S::zero() {
            *g = S::zero();
        }
    }
    out
}

/// Mean over H, W: returns `C x N`.
fn global_average_pool<S: Scalar>(x: &Tensor4<S>) -> Matrix<S> {
    let (n, c, h, w) = x.shape();
    let inv = S::one() / S::from_usize(h * w);
    let mut out = Matrix::zeros(c, n);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::zero();
            for hi in 0..h {
                for wi in 0..w {
                    acc += x.get(ni, ci, hi, wi);
                }
            }
            out.set(ci, ni, acc * inv);
        }
    }
    out
}

fn add_col_bias<S: Scalar>(m: &mut Matrix<S>, bias: &[S]) {
    for (r, &b) in bias.iter().enumerate() {
        for v in m.row_mut(r) {
            *v += b;
        }
    }
}

/// Softmax cross-entropy over columns; returns (mean loss, dlogits).
fn softmax_cross_entropy<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> (f64, Matrix<S>) {
    let (k, n) = (logits.rows(), logits.cols());
    let mut dlogits = Matrix::zeros(k, n);
    let mut loss = 0.0f64;
    let inv_n = S::one() / S::from_usize(n);
    for j in 0..n {
        let mut max = S::neg_infinity();
        for i in 0..k {
            max = max.max(logits.get(i, j));
        }
        let mut z = S::zero();
        for i in 0..k {
            z += (logits.get(i, j) - max).exp();
        }
        let log_z = z.ln() + max;
        loss += (log_z - logits.get(labels[j], j)).as_f64();
        for i in 0..k {
            let p = (logits.get(i, j) - log_z).exp();
            let grad = if i == labels[j] { p - S::one() } else { p };
            dlogits.set(i, j, grad * inv_n);
        }
    }
    (loss / n as f64, dlogits)
}

fn snapshot<S: Scalar>(state: &SwState<S>) -> LayerWeights {
    LayerWeights {
        omega: importance_weights(&state.lambda_mean)
            .iter()
            .map(|w| w.as_f64())
            .collect(),
        omega_prime: importance_weights(&state.lambda_cov)
            .iter()
            .map(|w| w.as_f64())
            .collect(),
    }
}

/// Joint SGD over network weights and importance weights.
///
/// Logs loss and per-layer importance weights every step; the logged weights
/// are the ones the step's forward actually used, so the trajectory starts
/// exactly uniform.
pub fn train<S: Scalar>(
    net: &mut DemoNet<S>,
    data: &Dataset<S>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if config.batch_size == 0 || config.steps == 0 {
        return Err(Error::ConfigError("steps and batch size must be >= 1".into()));
    }
    let total = data.labels.len();
    if total < config.batch_size {
        return Err(Error::ConfigError(
            "batch size exceeds the dataset".into(),
        ));
    }
    let (_, c, h, w) = data.x.shape();
    if c != net.channels {
        return Err(Error::StateError("network/data channel mismatch".into()));
    }
    let lr = S::from_f64(config.lr);
    let lr_phi = S::from_f64(config.lr_phi);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x8ad5_6c41_77f1_9eb1);
    let mut order: Vec<usize> = (0..total).collect();
    shuffle(&mut order, &mut rng);
    let mut cursor = 0usize;

    let mut log = TrainLog { steps: Vec::with_capacity(config.steps) };
    let hw = h * w;
    let batch_shape = (config.batch_size, c, h, w);

    for step in 0..config.steps {
        if cursor + config.batch_size > total {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + config.batch_size];
        cursor += config.batch_size;

        let mut xb = Tensor4::<S>::zeros(batch_shape);
        let mut yb = Vec::with_capacity(config.batch_size);
        for (bi, &si) in idx.iter().enumerate() {
            yb.push(data.labels[si]);
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        xb.set(bi, ci, hi, wi, data.x.get(si, ci, hi, wi));
                    }
                }
            }
        }

        // Forward.
        let m0 = as_channel_matrix(&xb)?;
        let t1 = net.w1.matmul(&m0)?;
        let x1 = to_tensor(&t1, batch_shape)?;
        let weights1 = snapshot(&net.sw1);
        let (y1, cache1) = forward_train(&x1, &mut net.sw1, &net.sw_config)?;
        let r1 = relu(&y1);
        let m1 = as_channel_matrix(&r1)?;
        let t2 = net.w2.matmul(&m1)?;
        let x2 = to_tensor(&t2, batch_shape)?;
        let weights2 = snapshot(&net.sw2);
        let (y2, cache2) = forward_train(&x2, &mut net.sw2, &net.sw_config)?;
        let r2 = relu(&y2);
        let feats = global_average_pool(&r2);
        let mut logits = net.w3.matmul(&feats)?;
        add_col_bias(&mut logits, &net.b3);

        let (loss, dlogits) = softmax_cross_entropy(&logits, &yb);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        log.steps.push(TrainStep {
            step,
            loss,
            layers: vec![weights1, weights2],
        });

        // Backward.
        let dw3 = dlogits.matmul_bt(&feats)?;
        let db3 = dlogits.row_sums();
        let dfeats = net.w3.matmul_at(&dlogits)?;

        // Pool backward: spread over pixels.
        let mut dr2 = Tensor4::<S>::zeros(batch_shape);
        let inv_hw = S::one() / S::from_usize(hw);
        for bi in 0..config.batch_size {
            for ci in 0..c {
                let g = dfeats.get(ci, bi) * inv_hw;
                for hi in 0..h {
                    for wi in 0..w {
                        dr2.set(bi, ci, hi, wi, g);
                    }
                }
            }
        }
        let dy2 = relu_backward(&y2, &dr2);
        let g2 = backward(&dy2, &cache2, &net.sw2, &net.sw_config)?;
        let dt2 = as_channel_matrix(&g2.dx)?;
        let dw2 = dt2.matmul_bt(&m1)?;
        let dm1 = net.w2.matmul_at(&dt2)?;
        let dy1 = relu_backward(&y1, &to_tensor(&dm1, batch_shape)?);
        let g1 = backward(&dy1, &cache1, &net.sw1, &net.sw_config)?;
        let dt1 = as_channel_matrix(&g1.dx)?;
        let dw1 = dt1.matmul_bt(&m0)?;

        // SGD updates.
        net.w1.add_scaled(-lr, &dw1)?;
        net.w2.add_scaled(-lr, &dw2)?;
        net.w3.add_scaled(-lr, &dw3)?;
        for (b, g) in net.b3.iter_mut().zip(db3.iter()) {
            *b = *b - lr * *g;
        }
        net.sw1.sgd_step(&g1, lr, lr_phi);
        net.sw2.sgd_step(&g2, lr, lr_phi);
    }
    Ok(log)
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_given_seed() {
        let spec = SyntheticSpec {
            samples_per_class: 8,
            ..SyntheticSpec::default()
        };
        let a: Dataset<f64> = generate_dataset(&spec).unwrap();
        let b: Dataset<f64> = generate_dataset(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn dataset_rejects_bad_specs() {
        let mut spec = SyntheticSpec::default();
        spec.classes = 1;
        assert!(generate_dataset::<f64>(&spec).is_err());
        let mut spec = SyntheticSpec::default();
        spec.channels = 64; // > H*W = 16
        assert!(generate_dataset::<f64>(&spec).is_err());
    }

    #[test]
    fn style_zero_samples_identical_up_to_pixel_noise() {
        let spec = SyntheticSpec {
            samples_per_class: 4,
            style_strength: 0.0,
            ..SyntheticSpec::default()
        };
        let data: Dataset<f64> = generate_dataset(&spec).unwrap();
        let (_, c, h, w) = data.x.shape();
        // Samples 0 and 2 share a class; their difference is pure pixel noise.
        assert_eq!(data.labels[0], data.labels[2]);
        let mut max_diff = 0.0f64;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let d = (data.x.get(0, ci, hi, wi) - data.x.get(2, ci, hi, wi)).abs();
                    max_diff = max_diff.max(d);
                }
            }
        }
        assert!(max_diff < 6.0 * PIXEL_NOISE * 2.0, "diff {max_diff}");
        assert!(max_diff > 0.0);
    }

    #[test]
    fn frozen_phi_keeps_weights_uniform() {
        let spec = SyntheticSpec {
            samples_per_class: 32,
            ..SyntheticSpec::default()
        };
        let data: Dataset<f64> = generate_dataset(&spec).unwrap();
        let config = TrainConfig {
            steps: 10,
            lr_phi: 0.0,
            ..TrainConfig::default()
        };
        let mut net = DemoNet::new(8, 2, &config.sw, 3).unwrap();
        let log = train(&mut net, &data, &config).unwrap();
        for s in &log.steps {
            for l in &s.layers {
                for &w in l.omega.iter().chain(l.omega_prime.iter()) {
                    assert_eq!(w, 0.5);
                }
            }
        }
        assert_eq!(net.sw1.lambda_mean, vec![1.0, 1.0]);
    }

    #[test]
    fn trajectories_stay_on_simplex_and_start_uniform() {
        let spec = SyntheticSpec {
            samples_per_class: 32,
            style_strength: 1.0,
            ..SyntheticSpec::default()
        };
        let data: Dataset<f64> = generate_dataset(&spec).unwrap();
        let config = TrainConfig {
            steps: 25,
            ..TrainConfig::default()
        };
        let mut net = DemoNet::new(8, 2, &config.sw, 1).unwrap();
        let log = train(&mut net, &data, &config).unwrap();
        let first = &log.steps[0];
        for l in &first.layers {
            assert_eq!(l.omega, vec![0.5, 0.5]);
            assert_eq!(l.omega_prime, vec![0.5, 0.5]);
        }
        for s in &log.steps {
            for l in &s.layers {
                for ws in [&l.omega, &l.omega_prime] {
                    assert!((ws.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    assert!(ws.iter().all(|&w| w > 0.0 && w < 1.0));
                }
            }
        }
    }
}
