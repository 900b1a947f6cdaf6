//! Linear SVM on pooled MFCC features.

use crate::error::{Error, Result};

/// Per-dimension z-score fitted on the training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::Empty("no feature vectors".into()))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // constant dimensions pass through centred but unscaled
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.mean.len() {
            return Err(Error::Shape(format!("{} features, expected {}", f.len(), self.mean.len())));
        }
        Ok(f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// L2 regularization constant.
    pub regularization: f64,
    pub iterations: usize,
    /// Step size at iteration 0; decays as `1 / sqrt(1 + t)`.
    pub learning_rate: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            regularization: 1e-3,
            iterations: 1000,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }

    /// Logistic squashing of the margin: above 0.5 exactly when `predict` is true.
    pub fn score(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.decision(x)).exp())
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Full-batch subgradient descent on `reg / 2 |w|^2 + mean(hinge)`; the bias
/// is not regularized.
pub fn mfcc_svm_train(features: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<LinearSvm> {
    if features.is_empty() {
        return Err(Error::Empty("no training features".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features, {} labels", features.len(), labels.len())));
    }
    if !(cfg.regularization >= 0.0 && cfg.learning_rate > 0.0) {
        return Err(Error::InvalidParam(format!("bad svm config {cfg:?}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut svm = LinearSvm {
        weights: vec![0.0; d],
        bias: 0.0,
    };
    let mut gw = vec![0.0; d];
    for t in 0..cfg.iterations {
        gw.iter_mut().zip(&svm.weights).for_each(|(g, w)| *g = cfg.regularization * w);
        let mut gb = 0.0;
        for (x, &l) in features.iter().zip(labels) {
            let y = if l { 1.0 } else { -1.0 };
            if y * svm.decision(x) < 1.0 {
                for (g, v) in gw.iter_mut().zip(x) {
                    *g -= y * v / n;
                }
                gb -= y / n;
            }
        }
        let lr = cfg.learning_rate / (1.0 + t as f64).sqrt();
        svm.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        svm.bias -= lr * gb;
    }
    Ok(svm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy(seed: u64, n: usize, gap: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let l = i % 2 == 0;
                let c = if l { gap } else { -gap };
                (vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], l)
            })
            .unzip()
    }

    #[test]
    fn separable_toy_data_is_fit_exactly() {
        let (x, y) = toy(1, 200, 1.5);
        let svm = mfcc_svm_train(&x, &y, &SvmConfig::default()).unwrap();
        let correct = x.iter().zip(&y).filter(|(f, &l)| svm.predict(f) == l).count();
        assert_eq!(correct, x.len());
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let (x, y) = toy(2, 200, 0.5);
        let norms: Vec<f64> = [1e-3, 1e-2, 1e-1, 1.0, 10.0]
            .iter()
            .map(|&r| {
                let cfg = SvmConfig {
                    regularization: r,
                    iterations: 3000,
                    learning_rate: 0.1,
                };
                mfcc_svm_train(&x, &y, &cfg).unwrap().weight_norm()
            })
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "{norms:?}");
        }
    }

    #[test]
    fn zero_features_predict_the_sign_of_the_bias() {
        let svm = LinearSvm {
            weights: vec![3.0, -1.0],
            bias: -0.25,
        };
        assert!(!svm.predict(&[0.0, 0.0]));
        assert!(svm.score(&[0.0, 0.0]) < 0.5);
        let svm = LinearSvm { bias: 0.25, ..svm };
        assert!(svm.predict(&[0.0, 0.0]));
    }

    #[test]
    fn standardizer_gives_zero_mean_unit_variance() {
        let (x, _) = toy(3, 100, 2.0);
        let s = Standardizer::fit(&x).unwrap();
        let z: Vec<Vec<f64>> = x.iter().map(|f| s.apply(f).unwrap()).collect();
        for d in 0..2 {
            let m: f64 = z.iter().map(|f| f[d]).sum::<f64>() / 100.0;
            let v: f64 = z.iter().map(|f| (f[d] - m).powi(2)).sum::<f64>() / 100.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(s.apply(&[1.0]).is_err());
        assert!(mfcc_svm_train(&[], &[], &SvmConfig::default()).is_err());
    }
}
