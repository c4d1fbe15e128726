//! The simulated client model: an identity-initialized conv stack, an
//! optional normalization layer, the attacked linear layer with ReLU, and a
//! small classifier head.
//!
//! Forward passes record everything the attack and defense modules need
//! (pre-activations, activation mask, post-normalization inputs), and
//! gradients are computed analytically as the batch average of a single
//! FedSGD step under softmax cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};

/// Fully connected layer; weights are row-major `N x M` (one row per neuron).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} != weight rows {}",
                bias.len(),
                weights.rows()
            )));
        }
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("bias contains non-finite values".into()));
        }
        Ok(Self { weights, bias })
    }

    /// Standard normal weights, zero bias.
    pub fn gaussian(neurons: usize, input_width: usize, rng: &mut RngStream) -> Self {
        Self {
            weights: rng.normal_matrix(neurons, input_width),
            bias: vec![0.0; neurons],
        }
    }

    /// Weights drawn from N(0, sigma^2), zero bias.
    pub fn scaled_gaussian(
        neurons: usize,
        input_width: usize,
        sigma: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut weights = rng.normal_matrix(neurons, input_width);
        for w in weights.data_mut() {
            *w *= sigma;
        }
        Self {
            weights,
            bias: vec![0.0; neurons],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Pre-activations `x W^T + b` for a batch of row vectors.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} != layer input width {}",
                input.cols(),
                self.in_dim()
            )));
        }
        let b_rows = input.rows();
        let n = self.out_dim();
        let mut pre = Matrix::zeros(b_rows, n);
        // Tile over neuron blocks so a block of weight rows stays cache-hot
        // across the whole batch.
        const BLOCK: usize = 64;
        let mut nb = 0;
        while nb < n {
            let hi = (nb + BLOCK).min(n);
            for b in 0..b_rows {
                let x = input.row(b);
                let out = pre.row_mut(b);
                for i in nb..hi {
                    out[i] = dot(x, self.weights.row(i)) + self.bias[i];
                }
            }
            nb = hi;
        }
        Ok(pre)
    }
}

/// Geometry of the identity-initialized convolution stack.
#[derive(Debug, Clone)]
pub struct ConvIdentitySpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub extra_random_filters: usize,
}

impl Default for ConvIdentitySpec {
    fn default() -> Self {
        Self {
            channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
            extra_random_filters: 0,
        }
    }
}

/// Literal 2-D convolution, kept around to demonstrate that the identity
/// initialization really is an identity; the model forward path uses the
/// equivalent flattened identity map instead.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][k][k]` flattened.
    pub weight: Vec<f64>,
}

impl Conv2d {
    /// Identity initialization: filter `i` is all zeros except a 1 at the
    /// kernel center of input channel `i`; any extra filters are random.
    pub fn identity_init(spec: &ConvIdentitySpec, rng: &mut RngStream) -> Self {
        let c = spec.channels;
        let k = spec.kernel;
        let out_channels = c + spec.extra_random_filters;
        let mut weight = vec![0.0; out_channels * c * k * k];
        let center = k / 2;
        for i in 0..c {
            let idx = ((i * c + i) * k + center) * k + center;
            weight[idx] = 1.0;
        }
        for f in c..out_channels {
            for j in 0..c * k * k {
                weight[f * c * k * k + j] = rng.normal();
            }
        }
        Self {
            in_channels: c,
            out_channels,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            weight,
        }
    }

    /// Applies the convolution to one channel-major image.
    pub fn forward(&self, image: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        if image.len() != self.in_channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image length {} != {}x{}x{}",
                image.len(),
                self.in_channels,
                height,
                width
            )));
        }
        let k = self.kernel;
        let pad = self.padding as isize;
        let out_h = (height + 2 * self.padding - k) / self.stride + 1;
        let out_w = (width + 2 * self.padding - k) / self.stride + 1;
        let mut out = vec![0.0; self.out_channels * out_h * out_w];
        for f in 0..self.out_channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ic in 0..self.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * self.stride + ky) as isize - pad;
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize
                                {
                                    continue;
                                }
                                let w = self.weight[((f * self.in_channels + ic) * k + ky) * k + kx];
                                acc += w * image[(ic * height + iy as usize) * width + ix as usize];
                            }
                        }
                    }
                    out[(f * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// Running state of a batch-normalization layer over `M` flattened features.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNormState {
    /// Framework defaults: running mean 0, running var 1, momentum 0.1,
    /// epsilon 1e-5, gamma 1, beta 0.
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            epsilon: 1e-5,
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }
}

/// Training-mode batch normalization: normalizes with the batch statistics
/// and returns the state with updated running estimates.
///
/// The same (biased) per-feature batch variance is used both for the
/// normalization and for the running update, so the update can be inverted
/// exactly after a first step from defaults.
pub fn batchnorm_forward(state: &BatchNormState, batch: &Matrix) -> Result<(Matrix, BatchNormState)> {
    if batch.cols() != state.width() {
        return Err(Error::ShapeMismatch(format!(
            "batch width {} != batchnorm width {}",
            batch.cols(),
            state.width()
        )));
    }
    let b = batch.rows();
    if b < 2 {
        return Err(Error::Domain(
            "batch normalization needs at least 2 samples".into(),
        ));
    }
    let m = batch.cols();
    let inv_b = 1.0 / b as f64;
    let mut mean = vec![0.0; m];
    let mut var = vec![0.0; m];
    for r in 0..b {
        for (j, &v) in batch.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for mj in &mut mean {
        *mj *= inv_b;
    }
    for r in 0..b {
        for (j, &v) in batch.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for vj in &mut var {
        *vj *= inv_b;
    }

    let mut out = Matrix::zeros(b, m);
    for r in 0..b {
        let src = batch.row(r);
        let dst = out.row_mut(r);
        for j in 0..m {
            let norm = (src[j] - mean[j]) / (var[j] + state.epsilon).sqrt();
            dst[j] = norm * state.gamma[j] + state.beta[j];
        }
    }

    let mut next = state.clone();
    for j in 0..m {
        next.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
        next.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j];
    }
    Ok((out, next))
}

/// Layer normalization over the flattened feature vector of each sample.
#[derive(Debug, Clone)]
pub struct LayerNormConfig {
    pub normalized_shape: usize,
    pub epsilon: f64,
}

impl LayerNormConfig {
    pub fn new(width: usize) -> Self {
        Self {
            normalized_shape: width,
            epsilon: 1e-8,
        }
    }
}

/// Standardizes every row to mean 0 and (epsilon-regularized) variance 1.
pub fn layernorm_forward(cfg: &LayerNormConfig, batch: &Matrix) -> Result<Matrix> {
    if batch.cols() != cfg.normalized_shape {
        return Err(Error::ShapeMismatch(format!(
            "batch width {} != layernorm width {}",
            batch.cols(),
            cfg.normalized_shape
        )));
    }
    if cfg.normalized_shape < 2 {
        return Err(Error::Domain(
            "layer normalization needs at least 2 features".into(),
        ));
    }
    let m = batch.cols();
    let mut out = Matrix::zeros(batch.rows(), m);
    for r in 0..batch.rows() {
        let src = batch.row(r);
        let mean = src.iter().sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + cfg.epsilon).sqrt();
        let dst = out.row_mut(r);
        for j in 0..m {
            dst[j] = (src[j] - mean) * inv;
        }
    }
    Ok(out)
}

/// Normalization layer placed in front of the attack layer.
#[derive(Debug, Clone)]
pub enum NormLayer {
    None,
    Batch(BatchNormState),
    Layer(LayerNormConfig),
}

/// Boolean `B x N` activation pattern of the attack layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMask {
    batch: usize,
    neurons: usize,
    data: Vec<bool>,
}

impl ActivationMask {
    pub fn new(batch: usize, neurons: usize) -> Self {
        Self {
            batch,
            neurons,
            data: vec![false; batch * neurons],
        }
    }

    pub fn from_pre_activations(pre: &Matrix) -> Self {
        Self {
            batch: pre.rows(),
            neurons: pre.cols(),
            data: pre.data().iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn get(&self, b: usize, n: usize) -> bool {
        self.data[b * self.neurons + n]
    }

    #[inline]
    pub fn set(&mut self, b: usize, n: usize, v: bool) {
        self.data[b * self.neurons + n] = v;
    }

    /// Number of samples activating each neuron (`a_n`).
    pub fn activation_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.neurons];
        for b in 0..self.batch {
            let row = &self.data[b * self.neurons..(b + 1) * self.neurons];
            for (n, &on) in row.iter().enumerate() {
                if on {
                    counts[n] += 1;
                }
            }
        }
        counts
    }

    /// The unique activating sample of neuron `n`, if exactly one exists.
    pub fn isolated_sample(&self, n: usize) -> Option<usize> {
        let mut found = None;
        for b in 0..self.batch {
            if self.get(b, n) {
                if found.is_some() {
                    return None;
                }
                found = Some(b);
            }
        }
        found
    }
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// The batch as the attack layer saw it (after the identity conv stack
    /// and any normalization layer).
    pub attack_input: Matrix,
    pub pre_activations: Matrix,
    pub post_relu: Matrix,
    pub activation_mask: ActivationMask,
    pub head_logits: Matrix,
    /// Updated running statistics when a batch-norm layer is configured.
    pub batchnorm_state: Option<BatchNormState>,
}

/// Batch-averaged gradients of the attack layer for one FedSGD step.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
    pub activation_counts: Vec<usize>,
}

/// Gradient report plus the classifier-head gradients and loss, used by the
/// finite-difference checks.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub report: GradientReport,
    pub head_grad_w: Matrix,
    pub head_grad_b: Vec<f64>,
    pub loss: f64,
    pub trace: ForwardTrace,
}

/// Client model under attack: conv identity stack, optional norm layer,
/// attack layer with ReLU, linear classifier head.
#[derive(Debug, Clone)]
pub struct MaliciousModel {
    pub conv: ConvIdentitySpec,
    pub norm: NormLayer,
    pub attack: LinearLayer,
    pub head: LinearLayer,
}

impl MaliciousModel {
    /// Wraps an attack layer with a small random classifier head
    /// (weights ~ N(0, 0.01), zero bias).
    pub fn new(attack: LinearLayer, classes: usize, norm: NormLayer, rng: &mut RngStream) -> Self {
        let head = LinearLayer::scaled_gaussian(classes, attack.out_dim(), 0.1, rng);
        Self {
            conv: ConvIdentitySpec::default(),
            norm,
            attack,
            head,
        }
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Runs the batch through the model and records the full trace.
    ///
    /// The conv stack is an exact identity on the flattened input, so the
    /// attack layer sees the batch directly, after normalization if any.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.rows() == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let (attack_input, bn_state) = match &self.norm {
            NormLayer::None => (batch.clone(), None),
            NormLayer::Batch(state) => {
                let (out, next) = batchnorm_forward(state, batch)?;
                (out, Some(next))
            }
            NormLayer::Layer(cfg) => (layernorm_forward(cfg, batch)?, None),
        };
        let pre = self.attack.forward(&attack_input)?;
        let mask = ActivationMask::from_pre_activations(&pre);
        let mut post = pre.clone();
        for v in post.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let logits = self.head.forward(&post)?;
        Ok(ForwardTrace {
            attack_input,
            pre_activations: pre,
            post_relu: post,
            activation_mask: mask,
            head_logits: logits,
            batchnorm_state: bn_state,
        })
    }

    /// Mean softmax cross-entropy of the batch.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let trace = self.forward(batch)?;
        self.validate_labels(batch, labels)?;
        let mut total = 0.0;
        for b in 0..batch.rows() {
            total += cross_entropy(trace.head_logits.row(b), labels[b]).0;
        }
        Ok(total / batch.rows() as f64)
    }

    /// Batch-averaged attack-layer gradients of one local step.
    pub fn compute_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<GradientReport> {
        Ok(self.compute_gradients_full(batch, labels)?.report)
    }

    /// Full analytic backward pass, including head gradients and loss.
    pub fn compute_gradients_full(&self, batch: &Matrix, labels: &[usize]) -> Result<GradientBundle> {
        self.validate_labels(batch, labels)?;
        if self.head.weights.data().iter().all(|&w| w == 0.0) {
            return Err(Error::Degenerate(
                "all-zero head weights null the loss gradient at the attack layer".into(),
            ));
        }
        let trace = self.forward(batch)?;
        let b_rows = batch.rows();
        let n = self.attack.out_dim();
        let m = self.attack.in_dim();
        let c = self.classes();
        let inv_b = 1.0 / b_rows as f64;

        let mut grad_w = Matrix::zeros(n, m);
        let mut grad_b = vec![0.0; n];
        let mut head_grad_w = Matrix::zeros(c, n);
        let mut head_grad_b = vec![0.0; c];
        let mut loss = 0.0;

        let mut dlogits = vec![0.0; c];
        for b in 0..b_rows {
            let (sample_loss, probs) = cross_entropy(trace.head_logits.row(b), labels[b]);
            loss += sample_loss;
            for cc in 0..c {
                dlogits[cc] = probs[cc] - if cc == labels[b] { 1.0 } else { 0.0 };
            }

            let post = trace.post_relu.row(b);
            for cc in 0..c {
                let d = dlogits[cc] * inv_b;
                head_grad_b[cc] += d;
                let row = head_grad_w.row_mut(cc);
                for i in 0..n {
                    row[i] += d * post[i];
                }
            }

            // delta at the attack pre-activation; zero where ReLU is dead,
            // so only active (sample, neuron) pairs contribute.
            let x = trace.attack_input.row(b);
            for i in 0..n {
                if !trace.activation_mask.get(b, i) {
                    continue;
                }
                let mut delta = 0.0;
                for cc in 0..c {
                    delta += dlogits[cc] * self.head.weights.get(cc, i);
                }
                let scaled = delta * inv_b;
                grad_b[i] += scaled;
                let row = grad_w.row_mut(i);
                for (w, &xv) in row.iter_mut().zip(x) {
                    *w += scaled * xv;
                }
            }
        }
        loss *= inv_b;

        let activation_counts = trace.activation_mask.activation_counts();
        Ok(GradientBundle {
            report: GradientReport {
                grad_w,
                grad_b,
                activation_counts,
            },
            head_grad_w,
            head_grad_b,
            loss,
            trace,
        })
    }

    fn validate_labels(&self, batch: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != batch.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                batch.rows()
            )));
        }
        let c = self.classes();
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(())
    }
}

/// Free-function forms of the model operations.
pub fn forward(model: &MaliciousModel, batch: &Matrix) -> Result<ForwardTrace> {
    model.forward(batch)
}

pub fn compute_gradients(
    model: &MaliciousModel,
    batch: &Matrix,
    labels: &[usize],
) -> Result<GradientReport> {
    model.compute_gradients(batch, labels)
}

/// Per-sample softmax cross-entropy; returns (loss, probabilities).
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let loss = sum.ln() + max - logits[label];
    (loss, probs)
}
