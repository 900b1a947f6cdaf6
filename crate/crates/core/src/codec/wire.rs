//! Bit-exact block format.
//!
//! ```text
//! "PAMC"            4 bytes
//! version           u8 (= 1)
//! frames            u16 LE
//! bands             u16 LE
//! scale             f32 LE
//! bits              bands x u8
//! payload           for band in 0..bands, for frame in 0..frames:
//!                   the top bits[band] bits of the truncated value,
//!                   MSB first, zero-padded to a byte boundary
//! ```

use crate::codec::alloc::AllocationPlan;
use crate::codec::quant::{fixed_to_float, truncate, IntSpectrogram, ScaleF32};
use crate::dsp::Spectrogram;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"PAMC";
pub const VERSION: u8 = 1;
const FIXED_HEADER: usize = 4 + 1 + 2 + 2 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBlock {
    pub frames: u16,
    pub bands: u16,
    pub scale: ScaleF32,
    pub bits: Vec<u8>,
    pub payload: Vec<u8>,
}

impl EncodedBlock {
    pub fn payload_bits(&self) -> u64 {
        payload_bits(self.frames, &self.bits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FIXED_HEADER + self.bits.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.frames.to_le_bytes());
        out.extend_from_slice(&self.bands.to_le_bytes());
        out.extend_from_slice(&self.scale.as_f32().to_le_bytes());
        out.extend_from_slice(&self.bits);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(FormatError::TruncatedHeader {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic { expected: "PAMC" });
        }
        need(5)?;
        if bytes[4] != VERSION {
            return Err(FormatError::Version {
                found: bytes[4],
                expected: VERSION,
            });
        }
        need(FIXED_HEADER)?;
        let frames = u16::from_le_bytes([bytes[5], bytes[6]]);
        let bands = u16::from_le_bytes([bytes[7], bytes[8]]);
        let scale = f32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let scale = ScaleF32::new(f64::from(scale)).map_err(|_| FormatError::InvalidField {
            field: "scale",
            reason: format!("{scale} is not positive and finite"),
        })?;
        let header = FIXED_HEADER + usize::from(bands);
        need(header)?;
        let bits = bytes[FIXED_HEADER..header].to_vec();
        if let Some(b) = bits.iter().find(|&&b| !(1..=32).contains(&b)) {
            return Err(FormatError::InvalidField {
                field: "bits",
                reason: format!("band width {b} outside 1..=32"),
            });
        }
        let payload_len = payload_bits(frames, &bits).div_ceil(8) as usize;
        let available = bytes.len() - header;
        if available < payload_len {
            return Err(FormatError::TruncatedPayload {
                needed: payload_len,
                available,
            });
        }
        if available > payload_len {
            return Err(FormatError::TrailingBytes {
                extra: available - payload_len,
            });
        }
        let block = Self {
            frames,
            bands,
            scale,
            bits,
            payload: bytes[header..].to_vec(),
        };
        let pad = (payload_len as u64 * 8 - block.payload_bits()) as u32;
        if pad > 0 && block.payload.last().is_some_and(|&b| b & ((1u8 << pad) - 1) != 0) {
            return Err(FormatError::InvalidField {
                field: "payload",
                reason: "non-zero padding bits".into(),
            });
        }
        Ok(block)
    }
}

fn payload_bits(frames: u16, bits: &[u8]) -> u64 {
    u64::from(frames) * bits.iter().map(|&b| u64::from(b)).sum::<u64>()
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        Self {
            out: Vec::with_capacity(bytes),
            acc: 0,
            n: 0,
        }
    }

    /// Appends the low `width` bits of `value`, most significant first.
    fn put(&mut self, value: u32, width: u32) {
        let masked = if width == 32 { u64::from(value) } else { u64::from(value) & ((1u64 << width) - 1) };
        self.acc = (self.acc << width) | masked;
        self.n += width;
        while self.n >= 8 {
            self.n -= 8;
            self.out.push((self.acc >> self.n) as u8);
        }
        self.acc &= (1u64 << self.n) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.out.push((self.acc << (8 - self.n)) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    n: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            acc: 0,
            n: 0,
        }
    }

    fn take(&mut self, width: u32) -> Option<u32> {
        while self.n < width {
            let b = *self.bytes.get(self.pos)?;
            self.pos += 1;
            self.acc = (self.acc << 8) | u64::from(b);
            self.n += 8;
        }
        self.n -= width;
        let v = (self.acc >> self.n) as u32 & if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
        self.acc &= (1u64 << self.n) - 1;
        Some(v)
    }
}

pub fn encode(x: &IntSpectrogram, plan: &AllocationPlan) -> Result<EncodedBlock> {
    if plan.bands() != x.bands {
        return Err(Error::Shape(format!("plan has {} bands, spectrogram {}", plan.bands(), x.bands)));
    }
    if let Some(b) = plan.bits.iter().find(|&&b| !(1..=32).contains(&b)) {
        return Err(Error::InvalidParam(format!("band width {b} outside 1..=32")));
    }
    let frames = u16::try_from(x.frames).map_err(|_| Error::Shape(format!("{} frames exceed u16", x.frames)))?;
    let bands = u16::try_from(x.bands).map_err(|_| Error::Shape(format!("{} bands exceed u16", x.bands)))?;
    let total = payload_bits(frames, &plan.bits);
    let mut w = BitWriter::with_capacity(total.div_ceil(8) as usize);
    for (f, &b) in plan.bits.iter().enumerate() {
        let b = u32::from(b);
        for t in 0..x.frames {
            let q = truncate(x.data[t * x.bands + f], b) as u32;
            w.put(q >> (32 - b), b);
        }
    }
    let payload = w.finish();
    debug_assert_eq!(payload.len() as u64, total.div_ceil(8));
    Ok(EncodedBlock {
        frames,
        bands,
        scale: x.scale,
        bits: plan.bits.clone(),
        payload,
    })
}

/// Unpacks the payload; dropped low bits come back as zeros.
pub fn decode_fixed(e: &EncodedBlock) -> Result<IntSpectrogram> {
    let (frames, bands) = (usize::from(e.frames), usize::from(e.bands));
    if e.bits.len() != bands {
        return Err(FormatError::InvalidField {
            field: "bits",
            reason: format!("{} widths for {bands} bands", e.bits.len()),
        }
        .into());
    }
    let mut data = vec![0i32; frames * bands];
    let mut r = BitReader::new(&e.payload);
    for (f, &b) in e.bits.iter().enumerate() {
        let b = u32::from(b);
        if !(1..=32).contains(&b) {
            return Err(FormatError::InvalidField {
                field: "bits",
                reason: format!("band width {b} outside 1..=32"),
            }
            .into());
        }
        for t in 0..frames {
            let v = r.take(b).ok_or(FormatError::TruncatedPayload {
                needed: e.payload_bits().div_ceil(8) as usize,
                available: e.payload.len(),
            })?;
            data[t * bands + f] = (v << (32 - b)) as i32;
        }
    }
    Ok(IntSpectrogram {
        frames,
        bands,
        data,
        scale: e.scale,
    })
}

/// Decodes to floats using the scale stored in the header. Axis metadata is
/// not part of the block and is left empty.
pub fn decode(e: &EncodedBlock) -> Result<Spectrogram> {
    Ok(fixed_to_float(&decode_fixed(e)?))
}

pub fn decode_bytes(bytes: &[u8]) -> Result<Spectrogram> {
    decode(&EncodedBlock::from_bytes(bytes)?)
}
