//! Per-band bit truncation, the block wire format, and the fixed allocation
//! baselines.

pub mod alloc;
pub mod quant;
pub mod wire;

pub use alloc::{
    apportion, check_budget, compression_ratio, compression_ratio_for_budget, human_allocation,
    human_allocation_with_floor, proportional_plan, uniform_allocation, uniform_allocation_with_floor, AllocMethod,
    AllocationPlan, MAX_BITS, MIN_BITS,
};
pub use quant::{fixed_to_float, float_to_fixed, truncate, IntSpectrogram, ScaleF32, FULL_SCALE};
pub use wire::{decode, decode_bytes, decode_fixed, encode, EncodedBlock};

use crate::dsp::Spectrogram;
use crate::error::Result;

/// Plan plus the float-to-fixed scale: everything needed to push a
/// spectrogram through the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct Compression {
    pub plan: AllocationPlan,
    pub scale: ScaleF32,
}

impl Compression {
    /// `decode(encode(float_to_fixed(s)))`, keeping the input's axes.
    pub fn apply(&self, s: &Spectrogram) -> Result<Spectrogram> {
        let block = encode(&float_to_fixed(s, self.scale), &self.plan)?;
        Ok(decode(&block)?.with_axes_from(s))
    }
}
