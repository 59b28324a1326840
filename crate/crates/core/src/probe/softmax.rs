use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::cv::CvMetrics;
use super::{DistressLevel, ProbeError};

const CLASSES: usize = 3;
pub const MIN_TRAINING_EXAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyperparams {
    /// L2 penalty on the weight matrix (bias unpenalized).
    pub l2: f64,
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm.
    pub grad_tol: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        ProbeHyperparams {
            l2: 1.0,
            max_iter: 200,
            grad_tol: 1e-6,
            memory: 10,
        }
    }
}

/// Base-16 encoding of little-endian f64 payloads.
mod f64_hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("payload length not a multiple of 8"));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Per-dimension z-scoring fit on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    #[serde(with = "f64_hex")]
    pub mean: Vec<f64>,
    #[serde(with = "f64_hex")]
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f32]], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply_into(&self, row: &[f32], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.scale) {
            *o = (v as f64 - m) / s;
        }
    }
}

/// Mean cross-entropy plus `l2 / (2n) * ||W||^2` over standardized rows.
/// Parameters are laid out as `W` (3 x d, row-major) followed by the bias.
pub struct SoftmaxProblem {
    x: Vec<f64>,
    y: Vec<usize>,
    dim: usize,
    l2: f64,
}

fn softmax_in_place(z: &mut [f64; CLASSES]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl SoftmaxProblem {
    pub fn new(x: Vec<f64>, y: Vec<usize>, dim: usize, l2: f64) -> Self {
        assert_eq!(x.len(), y.len() * dim, "feature matrix shape");
        SoftmaxProblem { x, y, dim, l2 }
    }

    pub fn n_params(&self) -> usize {
        CLASSES * self.dim + CLASSES
    }

    fn logits(&self, theta: &[f64], row: &[f64]) -> [f64; CLASSES] {
        let d = self.dim;
        let mut z = [0.0; CLASSES];
        for (k, zk) in z.iter_mut().enumerate() {
            let w = &theta[k * d..(k + 1) * d];
            *zk = theta[CLASSES * d + k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        z
    }

    pub fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let n = self.y.len() as f64;
        let mut grad = vec![0.0; self.n_params()];
        let mut loss = 0.0;
        for (row, &yi) in self.x.chunks_exact(d).zip(&self.y) {
            let z = self.logits(theta, row);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[yi];
            for k in 0..CLASSES {
                let r = (z[k] - lse).exp() - if k == yi { 1.0 } else { 0.0 };
                for (g, x) in grad[k * d..(k + 1) * d].iter_mut().zip(row) {
                    *g += r * x;
                }
                grad[CLASSES * d + k] += r;
            }
        }
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        let penalty = self.l2 / n;
        let weights = &theta[..CLASSES * d];
        loss += 0.5 * penalty * weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grad.iter_mut().zip(weights) {
            *g += penalty * w;
        }
        (loss, grad)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub iterations: usize,
    pub converged: bool,
    pub grad_max_norm: f64,
    /// Objective after each accepted step, starting at the initial point.
    pub loss_history: Vec<f64>,
}

/// L-BFGS with Armijo backtracking; every accepted step lowers the objective.
fn minimize(problem: &SoftmaxProblem, hyper: &ProbeHyperparams) -> (Vec<f64>, TrainingSummary) {
    let mut theta = vec![0.0; problem.n_params()];
    let (mut f, mut g) = problem.loss_grad(&theta);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut summary = TrainingSummary {
        iterations: 0,
        converged: false,
        grad_max_norm: max_abs(&g),
        loss_history: vec![f],
    };
    while summary.iterations < hyper.max_iter {
        if max_abs(&g) < hyper.grad_tol {
            summary.converged = true;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        } else {
            let norm = dot(&g, &g).sqrt();
            q.iter_mut().for_each(|qi| *qi /= norm.max(1.0));
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (ft, gt) = problem.loss_grad(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((next, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == hyper.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        theta = next;
        f = fn_;
        g = gn;
        summary.iterations += 1;
        summary.loss_history.push(f);
        summary.grad_max_norm = max_abs(&g);
    }
    if max_abs(&g) < hyper.grad_tol {
        summary.converged = true;
    }
    summary.grad_max_norm = max_abs(&g);
    (theta, summary)
}

/// A fitted single-layer probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub layer: u16,
    pub dim: usize,
    /// 3 x dim, row-major, in standardized feature space.
    #[serde(with = "f64_hex")]
    pub weights: Vec<f64>,
    #[serde(with = "f64_hex")]
    pub bias: Vec<f64>,
    pub standardization: Standardizer,
    pub cv_metrics: Option<CvMetrics>,
    pub training: TrainingSummary,
}

impl ProbeModel {
    pub fn predict_proba(&self, vector: &[f32]) -> Result<[f64; 3], ProbeError> {
        if vector.len() != self.dim {
            return Err(ProbeError::Dimension {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let mut row = vec![0.0; self.dim];
        self.standardization.apply_into(vector, &mut row);
        let mut z = [0.0; CLASSES];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = self.bias[k] + dot(&self.weights[k * self.dim..(k + 1) * self.dim], &row);
        }
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn predict(&self, vector: &[f32]) -> Result<DistressLevel, ProbeError> {
        Ok(super::ensemble::argmax_high(&self.predict_proba(vector)?))
    }
}

/// Fit a softmax probe for one layer.
pub fn train_probe(
    layer: u16,
    features: &[&[f32]],
    labels: &[DistressLevel],
    hyper: &ProbeHyperparams,
) -> Result<ProbeModel, ProbeError> {
    assert_eq!(features.len(), labels.len(), "one label per feature row");
    if features.len() < MIN_TRAINING_EXAMPLES {
        return Err(ProbeError::TooFewExamples {
            min: MIN_TRAINING_EXAMPLES,
            got: features.len(),
        });
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(ProbeError::SingleClass);
    }
    let dim = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != dim {
            return Err(ProbeError::Dimension {
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite(format!("row {i}")));
        }
    }
    let standardization = Standardizer::fit(features, dim);
    let mut x = vec![0.0; features.len() * dim];
    for (row, out) in features.iter().zip(x.chunks_exact_mut(dim.max(1))) {
        standardization.apply_into(row, out);
    }
    if dim == 0 {
        x.clear();
    }
    let problem = SoftmaxProblem::new(x, labels.iter().map(|l| l.index()).collect(), dim, hyper.l2);
    let (theta, training) = minimize(&problem, hyper);
    Ok(ProbeModel {
        layer,
        dim,
        weights: theta[..CLASSES * dim].to_vec(),
        bias: theta[CLASSES * dim..].to_vec(),
        standardization,
        cv_metrics: None,
        training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(n: usize, d: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<DistressLevel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let row: Vec<f32> = (0..d)
                .map(|j| rng.random_range(-1.0..1.0) + if j == c { 1.5 } else { 0.0 })
                .collect();
            xs.push(row);
            ys.push(DistressLevel::from_index(c).unwrap());
        }
        (xs, ys)
    }

    #[test]
    fn loss_is_non_increasing_and_converges() {
        let (xs, ys) = fixture(90, 5, 1);
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let m = train_probe(0, &rows, &ys, &ProbeHyperparams::default()).unwrap();
        assert!(m.training.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.training.converged, "{:?}", m.training.grad_max_norm);
        assert!(m.training.grad_max_norm < 1e-6);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (xs, ys) = fixture(60, 4, 2);
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let m = train_probe(3, &rows, &ys, &ProbeHyperparams::default()).unwrap();
        for r in &xs {
            let p = m.predict_proba(r).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(m.predict_proba(&[0.0; 3]).is_err());
    }

    #[test]
    fn preconditions() {
        let (xs, ys) = fixture(30, 2, 3);
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let h = ProbeHyperparams::default();
        assert!(matches!(train_probe(0, &rows[..9], &ys[..9], &h), Err(ProbeError::TooFewExamples { .. })));
        let same = vec![DistressLevel::Mild; 30];
        assert!(matches!(train_probe(0, &rows, &same, &h), Err(ProbeError::SingleClass)));
        let mut bad = xs.clone();
        bad[4][1] = f32::INFINITY;
        let bad_rows: Vec<&[f32]> = bad.iter().map(Vec::as_slice).collect();
        assert!(matches!(train_probe(0, &bad_rows, &ys, &h), Err(ProbeError::NonFinite(_))));
    }

    #[test]
    fn strong_penalty_gives_priors() {
        let (xs, mut ys) = fixture(40, 3, 4);
        // priors 0.5 / 0.25 / 0.25
        for (i, y) in ys.iter_mut().enumerate() {
            *y = DistressLevel::from_index(match i % 4 {
                0 | 1 => 0,
                2 => 1,
                _ => 2,
            })
            .unwrap();
        }
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let h = ProbeHyperparams {
            l2: 1e9,
            ..Default::default()
        };
        let m = train_probe(0, &rows, &ys, &h).unwrap();
        assert!(max_abs(&m.weights) < 1e-6);
        let p = m.predict_proba(&xs[0]).unwrap();
        for (got, want) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn serialized_model_roundtrips_bit_exact() {
        let (xs, ys) = fixture(30, 3, 5);
        let rows: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let m = train_probe(7, &rows, &ys, &ProbeHyperparams::default()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"weights\":\""));
        let back: ProbeModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
