//! Malicious initialization of the attacked linear layer.
//!
//! QBI solves for the bias that gives every neuron an activation probability
//! of 1/B on normalized data; PAIRS additionally re-randomizes weight rows
//! against auxiliary data until each neuron isolates a distinct sample; the
//! trap-weights baseline skews weight signs instead of touching the bias.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::model::LinearLayer;
use crate::numerics::{dot, normal_quantile, RngStream};

/// Parameters of quantile-based bias initialization.
#[derive(Debug, Clone, Copy)]
pub struct QbiParams {
    pub batch_size: usize,
    pub input_width: usize,
}

impl QbiParams {
    pub fn new(batch_size: usize, input_width: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidConfig(
                "QBI needs batch size >= 2 (B = 1 would need an infinite bias)".into(),
            ));
        }
        if input_width == 0 {
            return Err(Error::InvalidConfig("input width must be >= 1".into()));
        }
        Ok(Self {
            batch_size,
            input_width,
        })
    }

    /// The closed-form bias: `Phi^-1(1/B) * sqrt(M)`.
    pub fn bias(&self) -> Result<f64> {
        let q = normal_quantile(1.0 / self.batch_size as f64)?;
        Ok(q * (self.input_width as f64).sqrt())
    }
}

/// Re-initializes a layer with standard-normal weights and the QBI bias on
/// every neuron.
pub fn qbi_init(layer: &LinearLayer, params: &QbiParams, rng: &mut RngStream) -> Result<LinearLayer> {
    if layer.in_dim() != params.input_width {
        return Err(Error::ShapeMismatch(format!(
            "layer input width {} != QBI input width {}",
            layer.in_dim(),
            params.input_width
        )));
    }
    let bias = params.bias()?;
    let n = layer.out_dim();
    let weights = rng.normal_matrix(n, params.input_width);
    LinearLayer::new(weights, vec![bias; n])
}

/// Parameters of the pattern-aware iterative random search.
#[derive(Debug, Clone)]
pub struct PairsParams {
    /// Maximum re-randomizations per neuron.
    pub retries: usize,
    /// Auxiliary pool from the target domain, normalized like the target
    /// data; needs at least as many samples as the layer has neurons.
    pub auxiliary: crate::numerics::Matrix,
    /// Neuron group size, equal to the client batch size B.
    pub neuron_group_size: usize,
}

impl PairsParams {
    pub fn new(retries: usize, auxiliary: crate::numerics::Matrix, group_size: usize) -> Self {
        Self {
            retries,
            auxiliary,
            neuron_group_size: group_size,
        }
    }
}

/// Per-group search diagnostics from a PAIRS run.
#[derive(Debug, Clone, Default)]
pub struct PairsTrace {
    /// For each group, the auxiliary-batch indices frozen as isolated.
    pub frozen: Vec<Vec<usize>>,
    /// Neuron indices whose weight row was re-randomized at least once.
    pub reinitialized_rows: Vec<usize>,
}

/// PAIRS on a QBI-initialized layer; bias values are never modified.
pub fn pairs_init(
    layer: &LinearLayer,
    params: &PairsParams,
    rng: &mut RngStream,
) -> Result<LinearLayer> {
    Ok(pairs_init_traced(layer, params, rng)?.0)
}

/// PAIRS with search diagnostics, for soundness checks and experiments.
pub fn pairs_init_traced(
    layer: &LinearLayer,
    params: &PairsParams,
    rng: &mut RngStream,
) -> Result<(LinearLayer, PairsTrace)> {
    let n = layer.out_dim();
    let m = layer.in_dim();
    let pool = &params.auxiliary;
    if pool.rows() < n {
        return Err(Error::InvalidConfig(format!(
            "PAIRS needs at least N = {n} auxiliary samples, got {}",
            pool.rows()
        )));
    }
    if pool.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "auxiliary width {} != layer input width {m}",
            pool.cols()
        )));
    }
    let b = params.neuron_group_size;
    if b == 0 {
        return Err(Error::InvalidConfig("neuron group size must be >= 1".into()));
    }

    let mut out = layer.clone();
    let mut trace = PairsTrace::default();
    let groups = n.div_ceil(b);
    for k in 0..groups {
        let first = k * b;
        let last = ((k + 1) * b).min(n);
        // Group k consumes the next B pool samples, wrapping around when the
        // pool holds exactly N.
        let batch_rows: Vec<&[f64]> = (0..b).map(|j| pool.row((first + j) % pool.rows())).collect();

        let mut frozen: HashSet<usize> = HashSet::new();
        for neuron in first..last {
            let mut touched = false;
            for _ in 0..params.retries {
                let row = out.weights.row(neuron);
                let bias = out.bias[neuron];
                let mut isolated = None;
                let mut active = 0usize;
                for (j, x) in batch_rows.iter().enumerate() {
                    if dot(row, x) + bias > 0.0 {
                        active += 1;
                        if active > 1 {
                            break;
                        }
                        isolated = Some(j);
                    }
                }
                match isolated {
                    Some(s) if active == 1 && !frozen.contains(&s) => {
                        frozen.insert(s);
                        break;
                    }
                    _ => {
                        for w in out.weights.row_mut(neuron) {
                            *w = rng.normal();
                        }
                        touched = true;
                    }
                }
            }
            if touched {
                trace.reinitialized_rows.push(neuron);
            }
        }
        let mut frozen: Vec<usize> = frozen.into_iter().collect();
        frozen.sort_unstable();
        trace.frozen.push(frozen);
    }
    Ok((out, trace))
}

/// Trap-weights baseline: per row, a random half of the entries is made
/// positive and the other half negative with magnitudes scaled by
/// `1 + negative_shift`; the bias stays zero. The published method's scaling
/// factor is experimentally determined, so this is a configurable
/// approximation only.
pub fn trap_weights_init(
    layer: &LinearLayer,
    negative_shift: f64,
    rng: &mut RngStream,
) -> Result<LinearLayer> {
    if !(negative_shift >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "negative shift must be >= 0, got {negative_shift}"
        )));
    }
    let n = layer.out_dim();
    let m = layer.in_dim();
    let mut weights = rng.normal_matrix(n, m);
    let scale = 1.0 + negative_shift;
    for i in 0..n {
        let negatives = rng.sample_indices(m, m / 2);
        let mut negative = vec![false; m];
        for idx in negatives {
            negative[idx] = true;
        }
        for (j, w) in weights.row_mut(i).iter_mut().enumerate() {
            *w = if negative[j] {
                -w.abs() * scale
            } else {
                w.abs()
            };
        }
    }
    LinearLayer::new(weights, vec![0.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearLayer, MaliciousModel, NormLayer};
    use crate::numerics::{normal_cdf, Matrix, RngStream};

    fn blank_layer(n: usize, m: usize) -> LinearLayer {
        LinearLayer::new(Matrix::zeros(n, m), vec![0.0; n]).unwrap()
    }

    /// Kolmogorov-Smirnov statistic of a sample against the standard normal.
    fn ks_statistic(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = normal_cdf(x);
            d = d.max((cdf - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - cdf).abs());
        }
        d
    }

    #[test]
    fn qbi_bias_is_zero_for_batch_of_two() {
        let params = QbiParams::new(2, 100).unwrap();
        assert_eq!(params.bias().unwrap(), 0.0);
    }

    #[test]
    fn qbi_bias_cifar_scale() {
        let params = QbiParams::new(20, 3072).unwrap();
        let want = -1.6448536269514722 * (3072f64).sqrt();
        assert!((params.bias().unwrap() - want).abs() <= 1e-9);
    }

    #[test]
    fn qbi_rejects_tiny_batches() {
        assert!(QbiParams::new(1, 10).is_err());
        assert!(QbiParams::new(0, 10).is_err());
    }

    #[test]
    fn qbi_init_bias_uniform_and_deterministic() {
        let params = QbiParams::new(20, 64).unwrap();
        let base = blank_layer(10, 64);
        let mut rng_a = RngStream::new(42);
        let mut rng_b = RngStream::new(42);
        let a = qbi_init(&base, &params, &mut rng_a).unwrap();
        let b = qbi_init(&base, &params, &mut rng_b).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.bias.iter().all(|&v| v == a.bias[0]));
        assert!((a.bias[0] - params.bias().unwrap()).abs() == 0.0);
    }

    #[test]
    fn qbi_activation_rate_near_inverse_batch_size() {
        let params = QbiParams::new(20, 3072).unwrap();
        let base = blank_layer(8, 3072);
        let mut rng = RngStream::new(7);
        let layer = qbi_init(&base, &params, &mut rng).unwrap();
        let rows = 100_000;
        let mut active = vec![0usize; 8];
        let mut x = vec![0.0; 3072];
        for _ in 0..rows {
            for v in &mut x {
                *v = rng.normal();
            }
            for (i, count) in active.iter_mut().enumerate() {
                if dot(layer.weights.row(i), &x) + layer.bias[i] > 0.0 {
                    *count += 1;
                }
            }
        }
        for (i, count) in active.iter().enumerate() {
            let rate = *count as f64 / rows as f64;
            assert!(
                (0.045..=0.055).contains(&rate),
                "neuron {i} activation rate {rate}"
            );
        }
    }

    #[test]
    fn pairs_with_zero_retries_is_identity() {
        let mut rng = RngStream::new(1);
        let params = QbiParams::new(4, 8).unwrap();
        let layer = qbi_init(&blank_layer(8, 8), &params, &mut rng).unwrap();
        let aux = rng.normal_matrix(8, 8);
        let pairs = PairsParams::new(0, aux, 4);
        let out = pairs_init(&layer, &pairs, &mut rng).unwrap();
        assert_eq!(out.weights, layer.weights);
        assert_eq!(out.bias, layer.bias);
    }

    #[test]
    fn pairs_leaves_already_isolating_layer_untouched() {
        // W = 5*I, bias = -2.5 on one-hot samples: neuron i isolates sample i.
        let mut weights = Matrix::zeros(3, 3);
        for i in 0..3 {
            weights.set(i, i, 5.0);
        }
        let layer = LinearLayer::new(weights, vec![-2.5; 3]).unwrap();
        let aux = Matrix::identity(3);
        let mut rng = RngStream::new(2);
        let (out, trace) = pairs_init_traced(&layer, &PairsParams::new(50, aux, 3), &mut rng).unwrap();
        assert_eq!(out.weights, layer.weights);
        assert!(trace.reinitialized_rows.is_empty());
        assert_eq!(trace.frozen, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn pairs_requires_enough_auxiliary_samples() {
        let mut rng = RngStream::new(3);
        let layer = blank_layer(10, 4);
        let aux = rng.normal_matrix(9, 4);
        assert!(pairs_init(&layer, &PairsParams::new(10, aux, 5), &mut rng).is_err());
    }

    #[test]
    fn pairs_never_modifies_bias_and_frozen_set_is_sound() {
        let mut rng = RngStream::new(4);
        let (n, m, b) = (40, 16, 10);
        let params = QbiParams::new(b, m).unwrap();
        let qbi = qbi_init(&blank_layer(n, m), &params, &mut rng).unwrap();
        let aux = rng.normal_matrix(n, m);
        let pairs_params = PairsParams::new(200, aux.clone(), b);
        let (out, trace) = pairs_init_traced(&qbi, &pairs_params, &mut rng).unwrap();
        assert_eq!(out.bias, qbi.bias);

        // Replay: every frozen sample must be isolated by some neuron of its
        // group on that group's auxiliary batch.
        for (k, frozen) in trace.frozen.iter().enumerate() {
            let first = k * b;
            let last = ((k + 1) * b).min(n);
            for &s in frozen {
                let x = aux.row((first + s) % aux.rows());
                let mut isolated_by_some = false;
                for neuron in first..last {
                    let act = |row: &[f64]| dot(out.weights.row(neuron), row) + out.bias[neuron];
                    if act(x) <= 0.0 {
                        continue;
                    }
                    let sole = (0..b)
                        .filter(|&j| j != s)
                        .all(|j| act(aux.row((first + j) % aux.rows())) <= 0.0);
                    if sole {
                        isolated_by_some = true;
                        break;
                    }
                }
                assert!(isolated_by_some, "group {k} sample {s} not isolated");
            }
        }
    }

    #[test]
    fn pairs_weights_stay_marginally_gaussian() {
        let mut rng = RngStream::new(5);
        let (n, m, b) = (50, 2000, 10);
        let params = QbiParams::new(b, m).unwrap();
        let qbi = qbi_init(&blank_layer(n, m), &params, &mut rng).unwrap();
        let aux = rng.normal_matrix(n, m);
        let out = pairs_init(&qbi, &PairsParams::new(30, aux, b), &mut rng).unwrap();
        let d = ks_statistic(out.weights.data().to_vec());
        // 1% critical value for the KS statistic at n = 1e5.
        let critical = 1.63 / (out.weights.data().len() as f64).sqrt();
        assert!(d < critical, "KS {d} >= {critical}");
    }

    #[test]
    fn pairs_matches_qbi_recall_on_iid_data() {
        let mut rng = RngStream::new(6);
        let (n, m, b) = (60, 32, 12);
        let params = QbiParams::new(b, m).unwrap();
        let qbi = qbi_init(&blank_layer(n, m), &params, &mut rng).unwrap();
        let aux = rng.normal_matrix(n, m);
        let pairs = pairs_init(&qbi, &PairsParams::new(100, aux, b), &mut rng).unwrap();

        let mut head_rng = RngStream::new(7);
        let qbi_model = MaliciousModel::new(qbi, 10, NormLayer::None, &mut head_rng);
        let mut head_rng = RngStream::new(7);
        let pairs_model = MaliciousModel::new(pairs, 10, NormLayer::None, &mut head_rng);

        let recall_of = |model: &MaliciousModel, batch: &Matrix| {
            let trace = model.forward(batch).unwrap();
            let mask = &trace.activation_mask;
            let mut hit = vec![false; b];
            for neuron in 0..n {
                if let Some(s) = mask.isolated_sample(neuron) {
                    hit[s] = true;
                }
            }
            hit.iter().filter(|&&h| h).count() as f64 / b as f64
        };
        let mut recalls = [0.0f64; 2];
        let batches = 20;
        for _ in 0..batches {
            let batch = rng.normal_matrix(b, m);
            recalls[0] += recall_of(&qbi_model, &batch);
            recalls[1] += recall_of(&pairs_model, &batch);
        }
        let qbi_r = recalls[0] / batches as f64;
        let pairs_r = recalls[1] / batches as f64;
        assert!(
            (qbi_r - pairs_r).abs() <= 0.1,
            "QBI R {qbi_r} vs PAIRS R {pairs_r}"
        );
    }

    #[test]
    fn trap_weights_zero_shift_is_plain_gaussian() {
        let mut rng = RngStream::new(8);
        let layer = trap_weights_init(&blank_layer(40, 2500), 0.0, &mut rng).unwrap();
        let data = layer.weights.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        let d = ks_statistic(data.to_vec());
        assert!(d < 1.63 / (data.len() as f64).sqrt(), "KS {d}");
        assert!(layer.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trap_weights_row_structure() {
        let mut rng = RngStream::new(9);
        let shift = 2.0;
        let layer = trap_weights_init(&blank_layer(6, 1000), shift, &mut rng).unwrap();
        for i in 0..6 {
            let row = layer.weights.row(i);
            let negatives: Vec<f64> = row.iter().copied().filter(|&v| v < 0.0).collect();
            let positives: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
            assert_eq!(negatives.len(), 500);
            let neg_mean = negatives.iter().sum::<f64>() / negatives.len() as f64;
            let pos_mean = positives.iter().sum::<f64>() / positives.len() as f64;
            // Half-normal mean is ~0.798; the negative half is scaled by (1 + shift).
            assert!((pos_mean - 0.798).abs() < 0.1, "pos mean {pos_mean}");
            assert!((neg_mean + 0.798 * (1.0 + shift)).abs() < 0.3, "neg mean {neg_mean}");
        }
    }

    #[test]
    fn trap_weights_rejects_negative_shift() {
        let mut rng = RngStream::new(10);
        assert!(trap_weights_init(&blank_layer(2, 4), -0.5, &mut rng).is_err());
    }
}
