use std::fmt;
use std::str::FromStr;

use crate::dsp::StftConfig;
use crate::error::{Error, Result};

/// Per-band floor; fewer bits erase the signal's dynamic range.
pub const MIN_BITS: u8 = 5;
pub const MAX_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AllocMethod {
    Learned,
    Human,
    Uniform,
}

impl AllocMethod {
    pub const ALL: [AllocMethod; 3] = [AllocMethod::Learned, AllocMethod::Human, AllocMethod::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            AllocMethod::Learned => "learned",
            AllocMethod::Human => "human",
            AllocMethod::Uniform => "uniform",
        }
    }
}

impl fmt::Display for AllocMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown allocation method {s:?}")))
    }
}

/// Bit widths per frequency band under a total budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub bits: Vec<u8>,
    /// The learned vector the plan was derived from, if any.
    pub lambda: Option<Vec<f64>>,
    pub budget: u32,
    pub method: AllocMethod,
    pub floor: u8,
}

impl AllocationPlan {
    pub fn bands(&self) -> usize {
        self.bits.len()
    }

    pub fn total_bits(&self) -> u32 {
        self.bits.iter().map(|&b| u32::from(b)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor == 0 || self.floor > MAX_BITS {
            return Err(Error::InvalidParam(format!("floor {} outside 1..=32", self.floor)));
        }
        if let Some(b) = self.bits.iter().find(|&&b| b < self.floor || b > MAX_BITS) {
            return Err(Error::InvalidParam(format!("band width {b} outside [{}, 32]", self.floor)));
        }
        if self.total_bits() != self.budget {
            return Err(Error::InvalidParam(format!(
                "bits sum to {} but budget is {}",
                self.total_bits(),
                self.budget
            )));
        }
        if let Some(l) = &self.lambda {
            if l.len() != self.bits.len() {
                return Err(Error::Shape(format!("{} lambdas for {} bands", l.len(), self.bits.len())));
            }
        }
        Ok(())
    }
}

pub fn check_budget(bands: usize, budget: u32, floor: u8) -> Result<()> {
    let min = u32::from(floor) * bands as u32;
    let max = u32::from(MAX_BITS) * bands as u32;
    if bands == 0 || budget < min || budget > max || floor == 0 || floor > MAX_BITS {
        return Err(Error::Budget {
            budget,
            min,
            max,
            bands,
        });
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` units proportionally to
/// `weights`, with per-entry caps. Entries whose share would exceed their cap
/// are pinned to it and the rest is re-apportioned among the others. Ties in
/// the remainder go to the lower index. Negative weights count as zero; if all
/// active weights are zero the split is uniform.
///
/// # Panics
/// If the caps cannot absorb `total` or the slices differ in length.
pub fn apportion(total: u32, weights: &[f64], caps: &[u32]) -> Vec<u32> {
    assert_eq!(weights.len(), caps.len());
    assert!(caps.iter().map(|&c| u64::from(c)).sum::<u64>() >= u64::from(total));
    let n = weights.len();
    let mut out = vec![0u32; n];
    let mut active: Vec<bool> = caps.iter().map(|&c| c > 0).collect();
    let mut remaining = total;
    while remaining > 0 {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| weights[i].max(0.0)).collect();
        let wsum: f64 = w.iter().sum();
        let w: Vec<f64> = if wsum > 0.0 && wsum.is_finite() {
            w.iter().map(|x| x / wsum).collect()
        } else {
            vec![1.0 / idx.len() as f64; idx.len()]
        };
        let quotas: Vec<f64> = w.iter().map(|x| x * f64::from(remaining)).collect();
        let pinned: Vec<usize> = idx
            .iter()
            .zip(&quotas)
            .filter(|(&i, &q)| q >= f64::from(caps[i]))
            .map(|(&i, _)| i)
            .collect();
        if !pinned.is_empty() {
            for i in pinned {
                out[i] = caps[i];
                remaining -= caps[i];
                active[i] = false;
            }
            continue;
        }
        let mut assigned = 0u32;
        let mut rema: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        for (&i, &q) in idx.iter().zip(&quotas) {
            let f = q.floor() as u32;
            out[i] = f;
            assigned += f;
            rema.push((q - q.floor(), i));
        }
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut left = remaining - assigned;
        // quotas sum to `remaining`, so one pass suffices up to rounding
        while left > 0 {
            let before = left;
            for &(_, i) in &rema {
                if left == 0 {
                    break;
                }
                if out[i] < caps[i] {
                    out[i] += 1;
                    left -= 1;
                }
            }
            assert!(left < before, "caps exhausted during apportionment");
        }
        remaining = 0;
    }
    out
}

/// Builds a plan giving every band `floor` bits and apportioning the rest by
/// `weights`.
pub fn proportional_plan(
    weights: &[f64],
    budget: u32,
    floor: u8,
    method: AllocMethod,
    lambda: Option<Vec<f64>>,
) -> Result<AllocationPlan> {
    check_budget(weights.len(), budget, floor)?;
    let extra = budget - u32::from(floor) * weights.len() as u32;
    let caps = vec![u32::from(MAX_BITS - floor); weights.len()];
    let shares = apportion(extra, weights, &caps);
    let plan = AllocationPlan {
        bits: shares.iter().map(|&s| floor + s as u8).collect(),
        lambda,
        budget,
        method,
        floor,
    };
    plan.validate()?;
    Ok(plan)
}

/// Absolute threshold of hearing in dB SPL (Terhardt's approximation).
pub fn ath_db(freq_hz: f64) -> f64 {
    let f = freq_hz / 1000.0;
    3.64 * f.powf(-0.8) - 6.5 * (-0.6 * (f - 3.3).powi(2)).exp() + 1e-3 * f.powi(4)
}

/// Linear sensitivity `10^(-ATH/20)`.
pub fn hearing_sensitivity(freq_hz: f64) -> f64 {
    10f64.powf(-ath_db(freq_hz) / 20.0)
}

pub fn human_allocation(band_freqs_hz: &[f64], budget: u32) -> Result<AllocationPlan> {
    human_allocation_with_floor(band_freqs_hz, budget, MIN_BITS)
}

pub fn human_allocation_with_floor(band_freqs_hz: &[f64], budget: u32, floor: u8) -> Result<AllocationPlan> {
    if let Some(f) = band_freqs_hz.iter().find(|f| !(**f > 0.0)) {
        return Err(Error::InvalidParam(format!("band frequency {f} must be > 0")));
    }
    let s: Vec<f64> = band_freqs_hz.iter().map(|&f| hearing_sensitivity(f)).collect();
    proportional_plan(&s, budget, floor, AllocMethod::Human, None)
}

pub fn uniform_allocation(bands: usize, budget: u32) -> Result<AllocationPlan> {
    uniform_allocation_with_floor(bands, budget, MIN_BITS)
}

/// `budget / bands` bits everywhere, one more for the first `budget % bands`.
pub fn uniform_allocation_with_floor(bands: usize, budget: u32, floor: u8) -> Result<AllocationPlan> {
    check_budget(bands, budget, floor)?;
    let base = budget / bands as u32;
    let extra = (budget % bands as u32) as usize;
    let plan = AllocationPlan {
        bits: (0..bands).map(|i| (base + u32::from(i < extra)) as u8).collect(),
        lambda: None,
        budget,
        method: AllocMethod::Uniform,
        floor,
    };
    plan.validate()?;
    Ok(plan)
}

/// Raw 32-bit float samples per second over coded bits per second:
/// `(fs * 32) / (budget * fs / hop)`. Header bytes are not counted.
pub fn compression_ratio(plan: &AllocationPlan, cfg: &StftConfig) -> f64 {
    compression_ratio_for_budget(plan.budget, cfg)
}

pub fn compression_ratio_for_budget(budget: u32, cfg: &StftConfig) -> f64 {
    let fs = f64::from(cfg.sample_rate);
    (fs * 32.0) / (f64::from(budget) * cfg.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_allocation(47, 235).unwrap().bits, vec![5; 47]);
        assert_eq!(uniform_allocation(2, 10).unwrap().bits, vec![5, 5]);
        assert_eq!(uniform_allocation(2, 11).unwrap().bits, vec![6, 5]);
        assert_eq!(uniform_allocation(2, 64).unwrap().bits, vec![32, 32]);
        assert!(matches!(uniform_allocation(2, 9), Err(Error::Budget { .. })));
        assert!(uniform_allocation(2, 65).is_err());
    }

    #[test]
    fn human_at_floor_budget_is_flat() {
        let freqs = StftConfig::default().band_freqs_hz();
        assert_eq!(human_allocation(&freqs, 235).unwrap().bits, vec![5; 47]);
        assert!(human_allocation(&freqs, 234).is_err());
    }

    #[test]
    fn human_budget_is_exact_over_sweep() {
        let freqs = StftConfig::default().band_freqs_hz();
        for budget in 235..=47 * 32 {
            let plan = human_allocation(&freqs, budget).unwrap();
            assert_eq!(plan.total_bits(), budget);
            assert!(plan.bits.iter().all(|&b| (5..=32).contains(&b)));
        }
    }

    #[test]
    fn human_favors_higher_bands_below_100_hz() {
        let freqs = StftConfig::default().band_freqs_hz();
        // the threshold of hearing falls monotonically across 8-100 Hz
        for w in freqs.windows(2) {
            assert!(ath_db(w[0]) > ath_db(w[1]));
        }
        let plan = human_allocation(&freqs, 329).unwrap();
        let low_max = freqs.iter().zip(&plan.bits).filter(|(f, _)| **f < 20.0).map(|(_, b)| *b).max().unwrap();
        let high_min = freqs.iter().zip(&plan.bits).filter(|(f, _)| **f >= 80.0).map(|(_, b)| *b).min().unwrap();
        assert!(low_max <= high_min);
    }

    #[test]
    fn ath_reference_values() {
        // 1 kHz: 3.64 - 6.5 exp(-0.6 * 2.3^2) + 1e-3
        let expected = 3.64 - 6.5 * (-0.6f64 * 2.3 * 2.3).exp() + 1e-3;
        assert!((ath_db(1000.0) - expected).abs() < 1e-12);
        assert!(ath_db(20.0) > 70.0);
    }

    #[test]
    fn apportion_caps_and_reapportions() {
        assert_eq!(apportion(10, &[1.0, 0.0, 0.0], &[4, 10, 10]), vec![4, 3, 3]);
        assert_eq!(apportion(5, &[1.0, 1.0], &[10, 10]), vec![3, 2]);
        assert_eq!(apportion(0, &[1.0, 2.0], &[1, 1]), vec![0, 0]);
        assert_eq!(apportion(3, &[0.0, 0.0, 0.0], &[5, 5, 5]), vec![1, 1, 1]);
    }

    #[test]
    fn compression_ratio_examples() {
        let cfg = StftConfig::default();
        let plan = uniform_allocation(47, 47 * 32).unwrap();
        let r = compression_ratio(&plan, &cfg);
        assert!((r - 32_000.0 / (1504.0 * 1000.0 / 384.0)).abs() < 1e-12);
        assert!((r - 8.17).abs() < 0.01);
        let half = compression_ratio_for_budget(752, &cfg);
        assert!((half - 2.0 * r).abs() < 1e-9);
    }

    #[test]
    fn plan_validation_catches_inconsistency() {
        let mut plan = uniform_allocation(3, 20).unwrap();
        plan.budget = 21;
        assert!(plan.validate().is_err());
        plan.budget = 20;
        plan.bits = vec![4, 8, 8];
        assert!(plan.validate().is_err());
    }

    proptest! {
        #[test]
        fn apportion_is_exact_and_capped(
            weights in proptest::collection::vec(0.0f64..10.0, 1..40),
            frac in 0.0f64..=1.0,
        ) {
            let caps: Vec<u32> = (0..weights.len()).map(|i| 27 - (i as u32 % 5)).collect();
            let total = (caps.iter().sum::<u32>() as f64 * frac).floor() as u32;
            let out = apportion(total, &weights, &caps);
            prop_assert_eq!(out.iter().sum::<u32>(), total);
            prop_assert!(out.iter().zip(&caps).all(|(o, c)| o <= c));
        }

        #[test]
        fn uniform_is_exact(bands in 1usize..60, per in 5.0f64..=32.0) {
            let budget = (bands as f64 * per).floor() as u32;
            let plan = uniform_allocation(bands, budget).unwrap();
            prop_assert_eq!(plan.total_bits(), budget);
            let (lo, hi) = (plan.bits.iter().min().unwrap(), plan.bits.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
