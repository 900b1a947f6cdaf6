use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Largest magnitude of the fixed-point representation, `2^31 - 1`.
pub const FULL_SCALE: f64 = 2_147_483_647.0;

/// Spectrogram in 32-bit signed fixed point. `scale` maps to full range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntSpectrogram {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<i32>,
    pub scale: ScaleF32,
}

/// A positive, finite `f32` scale. Stored as `f32` because the wire header
/// carries it at that width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleF32(f32);

impl Eq for ScaleF32 {}

impl ScaleF32 {
    pub fn new(scale: f64) -> Result<Self> {
        let s = scale as f32;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidParam(format!("scale {scale} must be positive and finite")));
        }
        Ok(Self(s))
    }

    pub fn get(self) -> f64 {
        f64::from(self.0)
    }

    pub fn as_f32(self) -> f32 {
        self.0
    }
}

/// `round(clamp(x / scale, -1, 1) * (2^31 - 1))`, saturating.
pub fn float_to_fixed(s: &Spectrogram, scale: ScaleF32) -> IntSpectrogram {
    let sc = scale.get();
    let data = s
        .data
        .iter()
        .map(|&x| {
            let r = (x / sc).clamp(-1.0, 1.0);
            // NaN saturates to zero through the `as` cast
            (r * FULL_SCALE).round() as i32
        })
        .collect();
    IntSpectrogram {
        frames: s.frames,
        bands: s.bands,
        data,
        scale,
    }
}

pub fn fixed_to_float(x: &IntSpectrogram) -> Spectrogram {
    let sc = x.scale.get();
    let data = x.data.iter().map(|&v| f64::from(v) / FULL_SCALE * sc).collect();
    Spectrogram::new(x.frames, x.bands, data).expect("IntSpectrogram shape is consistent")
}

/// Keeps the sign bit and the top `bits - 1` magnitude bits, rounding toward
/// zero. One bit carries no magnitude and yields zero.
///
/// # Panics
/// If `bits` is outside `1..=32`.
pub fn truncate(v: i32, bits: u32) -> i32 {
    assert!((1..=32).contains(&bits), "bit width {bits} outside 1..=32");
    match bits {
        32 => v,
        1 => 0,
        _ => {
            let step = 1i32 << (32 - bits);
            (v / step) * step
        }
    }
}

/// Step between representable values at `bits` bits, in fixed-point units.
pub fn step(bits: u32) -> u64 {
    1u64 << (32 - bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fixed_point_anchors() {
        let s = Spectrogram::new(1, 4, vec![0.0, 2.5, -2.5, 10.0]).unwrap();
        let x = float_to_fixed(&s, ScaleF32::new(2.5).unwrap());
        assert_eq!(x.data, vec![0, i32::MAX, -i32::MAX, i32::MAX]);
        assert!(ScaleF32::new(0.0).is_err());
        assert!(ScaleF32::new(f64::NAN).is_err());
    }

    #[test]
    fn fixed_point_round_trip_error_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scale = ScaleF32::new(7.3).unwrap();
        let data: Vec<f64> = (0..64 * 47).map(|_| rng.gen_range(-7.3..7.3)).collect();
        let s = Spectrogram::new(64, 47, data).unwrap();
        let back = fixed_to_float(&float_to_fixed(&s, scale));
        let bound = scale.get() * 2f64.powi(-30);
        for (a, b) in s.data.iter().zip(&back.data) {
            assert!((a - b).abs() < bound, "{a} vs {b}");
        }
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(123_456_789, 32), 123_456_789);
        assert_eq!(truncate(-5, 32), -5);
        for b in 1..=32 {
            assert_eq!(truncate(0, b), 0);
        }
        assert_eq!(truncate((1 << 30) + 12345, 2), 1 << 30);
        assert_eq!(truncate(-(1 << 30) - 12345, 2), -(1 << 30));
        assert_eq!(truncate(i32::MAX, 1), 0);
        assert_eq!(truncate(i32::MIN, 2), i32::MIN);
    }

    #[test]
    fn truncate_is_idempotent_on_a_million_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1_000_000 {
            let v: i32 = rng.gen();
            let b = rng.gen_range(1..=32);
            let once = truncate(v, b);
            assert_eq!(truncate(once, b), once, "v={v} b={b}");
        }
    }

    proptest! {
        #[test]
        fn truncation_error_is_below_one_step(v in any::<i32>(), b in 2u32..=32) {
            let err = (i64::from(v) - i64::from(truncate(v, b))).unsigned_abs();
            prop_assert!(err < step(b));
        }

        #[test]
        fn truncation_shrinks_toward_zero(v in any::<i32>(), b in 1u32..=32) {
            let q = truncate(v, b);
            prop_assert!(i64::from(q).abs() <= i64::from(v).abs());
            prop_assert!(q == 0 || q.signum() == v.signum());
        }

        #[test]
        fn coarse_truncation_factors_through_fine(v in any::<i32>(), b1 in 1u32..=32, b2 in 1u32..=32) {
            let (lo, hi) = (b1.min(b2), b1.max(b2));
            prop_assert_eq!(truncate(truncate(v, hi), lo), truncate(v, lo));
            let e_lo = (i64::from(v) - i64::from(truncate(v, lo))).abs();
            let e_hi = (i64::from(v) - i64::from(truncate(v, hi))).abs();
            prop_assert!(e_hi <= e_lo + step(hi) as i64);
        }
    }
}
