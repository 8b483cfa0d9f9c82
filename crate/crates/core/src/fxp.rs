//! 16-bit fixed-point arithmetic.
//!
//! All tensor data in the toolchain is a two's-complement `i16` raw value
//! paired with a [`QFormat`] giving the binary-point position. Products are
//! held exactly in a 32-bit [`Accum`] whose fraction width is the sum of the
//! operand fraction widths; narrowing back to 16 bits goes through a single
//! [`Rounder::requantize`] call that rounds (nearest-even by default,
//! seeded-stochastic opt-in) and saturates. Saturation never wraps and every
//! saturation event is counted.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number format of a 16-bit value: `frac_bits` fractional bits, the rest
/// (including sign) integer bits. Representable range is
/// `[-2^(15-frac_bits), 2^(15-frac_bits) - 2^-frac_bits]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QFormat {
    frac_bits: u8,
}

impl Serialize for QFormat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for QFormat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        QFormat::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl QFormat {
    pub const TOTAL_BITS: u32 = 16;

    /// Activations and local gradients default: Q8.8, range [-128, 128).
    pub const Q8_8: QFormat = QFormat { frac_bits: 8 };
    /// Weights and weight gradients default: Q2.14, range [-2, 2).
    pub const Q2_14: QFormat = QFormat { frac_bits: 14 };
    /// Learning-rate / momentum scalars default: Q0.15, range [-1, 1).
    pub const Q0_15: QFormat = QFormat { frac_bits: 15 };

    pub fn new(frac_bits: u8) -> crate::Result<QFormat> {
        if frac_bits > 15 {
            return Err(crate::Error::Config(format!(
                "frac_bits must be 0..=15, got {frac_bits}"
            )));
        }
        Ok(QFormat { frac_bits })
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    /// Scale factor 2^frac_bits.
    pub fn scale(&self) -> f64 {
        (1i64 << self.frac_bits) as f64
    }

    /// Value of one least-significant bit.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn max_real(&self) -> f64 {
        i16::MAX as f64 / self.scale()
    }

    pub fn min_real(&self) -> f64 {
        i16::MIN as f64 / self.scale()
    }

    /// Parses "q8.8" / "Q2.14" style names; integer + fraction widths must
    /// total 16.
    pub fn parse(s: &str) -> crate::Result<QFormat> {
        let body = s
            .strip_prefix('q')
            .or_else(|| s.strip_prefix('Q'))
            .ok_or_else(|| crate::Error::Config(format!("bad format name {s:?}")))?;
        let (int_s, frac_s) = body
            .split_once('.')
            .ok_or_else(|| crate::Error::Config(format!("bad format name {s:?}")))?;
        let int: u32 = int_s
            .parse()
            .map_err(|_| crate::Error::Config(format!("bad format name {s:?}")))?;
        let frac: u32 = frac_s
            .parse()
            .map_err(|_| crate::Error::Config(format!("bad format name {s:?}")))?;
        if int + frac != Self::TOTAL_BITS {
            return Err(crate::Error::Config(format!(
                "format {s:?} widths must total 16"
            )));
        }
        QFormat::new(frac as u8)
    }

    pub fn name(&self) -> String {
        format!("q{}.{}", 16 - self.frac_bits as u32, self.frac_bits)
    }
}

/// A 16-bit fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fxp {
    raw: i16,
    fmt: QFormat,
}

impl Fxp {
    pub fn zero(fmt: QFormat) -> Fxp {
        Fxp { raw: 0, fmt }
    }

    pub fn from_raw(raw: i16, fmt: QFormat) -> Fxp {
        Fxp { raw, fmt }
    }

    pub fn raw(&self) -> i16 {
        self.raw
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    /// Exact: every i16 raw value is representable in f64.
    pub fn to_real(&self) -> f64 {
        self.raw as f64 / self.fmt.scale()
    }
}

/// 32-bit product accumulator. `frac_bits` is the sum of the operand
/// fraction widths (up to 30) and never changes during accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accum {
    pub raw: i32,
    pub frac_bits: u8,
}

impl Accum {
    pub fn zero(frac_bits: u8) -> Accum {
        Accum { raw: 0, frac_bits }
    }

    /// Exact product; i16 * i16 always fits in i32.
    pub fn mul(a: Fxp, b: Fxp) -> Accum {
        Accum {
            raw: a.raw as i32 * b.raw as i32,
            frac_bits: a.fmt.frac_bits + b.fmt.frac_bits,
        }
    }

    /// Multiply-accumulate. Overflow of the 32-bit accumulator is a planner
    /// bug (window depth must be checked at plan time), not a data condition,
    /// so it panics rather than saturating.
    pub fn mac(&mut self, a: Fxp, b: Fxp) {
        debug_assert_eq!(a.fmt.frac_bits + b.fmt.frac_bits, self.frac_bits);
        let p = a.raw as i32 * b.raw as i32;
        self.raw = self
            .raw
            .checked_add(p)
            .expect("32-bit accumulator overflow: window too deep for operand formats");
    }

    pub fn to_real(&self) -> f64 {
        self.raw as f64 / (1i64 << self.frac_bits) as f64
    }

    /// Worst-case magnitude bits needed to accumulate `depth` full-scale
    /// products of two 16-bit operands. The planner reports the headroom
    /// `31 - this` per layer; real tensor data sits far below full scale, and
    /// [`Accum::mac`] hard-errors if data ever proves otherwise.
    pub fn worst_case_bits(depth: u64) -> u32 {
        30 + 64 - depth.max(1).leading_zeros() - 1 + u32::from(!depth.is_power_of_two())
    }
}

/// Rounding rule applied when narrowing an accumulator to 16 bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum Rounding {
    /// Round to nearest, ties to even. Deterministic default.
    #[default]
    NearestEven,
    /// Unbiased stochastic rounding, fully reproducible from the seed.
    Stochastic { seed: u64 },
}

/// Rounding context owned by one worker: the rounding mode, the stochastic
/// PRNG stream (when enabled), and the monotone saturation counter.
#[derive(Debug, Clone)]
pub struct Rounder {
    mode: Rounding,
    rng: Option<ChaCha8Rng>,
    saturations: u64,
}

impl Rounder {
    pub fn new(mode: Rounding) -> Rounder {
        let rng = match mode {
            Rounding::NearestEven => None,
            Rounding::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Rounder { mode, rng, saturations: 0 }
    }

    pub fn nearest_even() -> Rounder {
        Rounder::new(Rounding::NearestEven)
    }

    pub fn mode(&self) -> Rounding {
        self.mode
    }

    /// Total count of saturation events since construction (or the last
    /// [`Rounder::reset_saturations`]). Monotone non-decreasing.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    pub fn reset_saturations(&mut self) {
        self.saturations = 0;
    }

    /// Restore the counter from a checkpoint.
    pub fn set_saturations(&mut self, n: u64) {
        self.saturations = n;
    }

    /// PRNG stream position, for checkpointing. None in nearest-even mode.
    pub fn stream_pos(&self) -> Option<u128> {
        self.rng.as_ref().map(|r| r.get_word_pos())
    }

    pub fn set_stream_pos(&mut self, pos: u128) {
        if let Some(r) = self.rng.as_mut() {
            r.set_word_pos(pos);
        }
    }

    /// Clamp to i16, counting saturation events.
    fn sat16(&mut self, v: i64) -> i16 {
        if v > i16::MAX as i64 {
            self.saturations += 1;
            i16::MAX
        } else if v < i16::MIN as i64 {
            self.saturations += 1;
            i16::MIN
        } else {
            v as i16
        }
    }

    /// Round `v / 2^shift` to an integer under the active mode. `shift > 0`.
    fn round_shift(&mut self, v: i64, shift: u32) -> i64 {
        let floor = v >> shift;
        let rem = (v - (floor << shift)) as u64; // in [0, 2^shift)
        match self.mode {
            Rounding::NearestEven => {
                let half = 1u64 << (shift - 1);
                if rem > half || (rem == half && (floor & 1) == 1) {
                    floor + 1
                } else {
                    floor
                }
            }
            Rounding::Stochastic { .. } => {
                // Round up with probability rem / 2^shift.
                let draw = self.rng.as_mut().expect("stochastic rounder has rng").next_u64()
                    >> (64 - shift);
                if draw < rem {
                    floor + 1
                } else {
                    floor
                }
            }
        }
    }

    /// Narrow an accumulator to the target 16-bit format: round at the new
    /// binary point, then saturate. The only place precision is dropped.
    pub fn requantize(&mut self, acc: Accum, fmt: QFormat) -> Fxp {
        let shift = acc.frac_bits as i32 - fmt.frac_bits as i32;
        let v = if shift > 0 {
            self.round_shift(acc.raw as i64, shift as u32)
        } else {
            // Widening the fraction is exact; only the range can saturate.
            (acc.raw as i64) << (-shift) as u32
        };
        Fxp { raw: self.sat16(v), fmt }
    }

    /// Quantize a real number. Out-of-range inputs saturate (and count).
    pub fn from_real(&mut self, x: f64, fmt: QFormat) -> Fxp {
        let scaled = x * fmt.scale();
        let v = match self.mode {
            Rounding::NearestEven => {
                let r = scaled.round_ties_even();
                if r > i64::MAX as f64 || r < i64::MIN as f64 {
                    // Degenerate inputs (inf/huge); sat16 handles the rest.
                    if r > 0.0 {
                        i64::MAX
                    } else {
                        i64::MIN
                    }
                } else {
                    r as i64
                }
            }
            Rounding::Stochastic { .. } => {
                let floor = scaled.floor();
                let rem = scaled - floor;
                let draw = (self.rng.as_mut().expect("rng").next_u64() >> 11) as f64
                    / (1u64 << 53) as f64;
                let up = if draw < rem { 1.0 } else { 0.0 };
                (floor + up) as i64
            }
        };
        Fxp { raw: self.sat16(v), fmt }
    }

    /// Same-format saturating add (used when accumulating 16-bit gradient
    /// tensors across a batch).
    pub fn add_sat(&mut self, a: Fxp, b: Fxp) -> Fxp {
        debug_assert_eq!(a.fmt, b.fmt);
        let v = a.raw as i64 + b.raw as i64;
        Fxp { raw: self.sat16(v), fmt: a.fmt }
    }

    /// Raw-slice variant of [`Rounder::add_sat`] for hot loops.
    pub fn add_sat_raw(&mut self, a: i16, b: i16) -> i16 {
        self.sat16(a as i64 + b as i64)
    }

    /// Requantize from a wide raw value at `src_frac` fraction bits. Hot-loop
    /// variant of [`Rounder::requantize`] that skips the struct round trip.
    pub fn requantize_raw(&mut self, raw: i64, src_frac: u8, fmt: QFormat) -> i16 {
        let shift = src_frac as i32 - fmt.frac_bits as i32;
        let v = if shift > 0 {
            self.round_shift(raw, shift as u32)
        } else {
            raw << (-shift) as u32
        };
        self.sat16(v)
    }
}
