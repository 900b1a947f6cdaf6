use std::collections::BTreeMap;

use super::model::ModelParams;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v`.
pub fn sgd_update<T: Real>(p: &mut [T], v: &mut [T], g: &[T], opt: &Sgd) {
    let (lr, m, wd) = (T::of(opt.learning_rate), T::of(opt.momentum), T::of(opt.weight_decay));
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

pub fn sgd_step<T: Real>(model: &mut ModelParams<T>, grads: &BTreeMap<String, Vec<T>>, opt: &Sgd) -> Result<()> {
    for (name, g) in grads {
        let p = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
        let v = model
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no momentum buffer for {name}")))?;
        if g.len() != p.len() || v.len() != p.len() {
            return Err(Error::Shape(format!(
                "{name}: gradient {} / buffer {} for {} values",
                g.len(),
                v.len(),
                p.len()
            )));
        }
        sgd_update(&mut p.data, v, g, opt);
    }
    Ok(())
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.values_mut().flat_map(|g| g.iter_mut()) {
            *g *= k;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let opt = Sgd {
            learning_rate: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let (mut p, mut v) = (vec![1.0f64, -2.0], vec![0.0; 2]);
        sgd_update(&mut p, &mut v, &[0.2, -0.4], &opt);
        assert_eq!(p, vec![0.9, -1.8]);
    }

    #[test]
    fn momentum_on_a_quadratic_matches_the_recurrence() {
        // f(w) = w^2 / 2, so g = w; closed-form two-term recurrence
        let opt = Sgd {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut p, mut v) = (vec![1.0f64], vec![0.0]);
        let expected = [0.9, 0.72, 0.486, 0.2268, -0.02916];
        for want in expected {
            let g = p.clone();
            sgd_update(&mut p, &mut v, &g, &opt);
            assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters() {
        let opt = Sgd {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let (mut p, mut v) = (vec![3.0f64, -2.0], vec![0.0; 2]);
        let mut last = p.clone();
        for _ in 0..50 {
            sgd_update(&mut p, &mut v, &[0.0, 0.0], &opt);
            for (a, b) in p.iter().zip(&last) {
                assert!(a.abs() < b.abs() && a.signum() == b.signum());
            }
            last = p.clone();
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0f64, 0.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"], vec![3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-12 && (g["b"][0] - 0.8).abs() < 1e-12);
    }
}
