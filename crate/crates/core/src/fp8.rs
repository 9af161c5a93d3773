//! Software FP8 (E4M3) codec with one symmetric scale per block.
//!
//! Layout: bit 7 sign, bits 6..3 exponent (bias 7), bits 2..0 mantissa.
//! There are no infinities; `S.1111.111` is the only NaN pattern and the
//! encoder never produces it. Exponent field 0 encodes subnormals
//! `m / 8 * 2^-6`, so the smallest positive value is `2^-9`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest finite E4M3 magnitude (`S.1111.110`).
pub const FP8_MAX: f32 = 448.0;
pub const FP8_MAX_CODE: u8 = 0x7E;
const NAN_MAGNITUDE: u8 = 0x7F;
const MIN_NORMAL: f32 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub const ZERO: Fp8Code = Fp8Code(0);

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == NAN_MAGNITUDE
    }

    /// Decoded value, or `None` for the NaN pattern.
    pub fn to_f32(self) -> Option<f32> {
        if self.is_nan() {
            None
        } else {
            Some(decode_table()[self.0 as usize])
        }
    }

    /// Round-to-nearest-even encoding, saturating at ±448.
    ///
    /// `x` must not be NaN; that is checked by the callers that accept
    /// user data.
    pub fn from_f32(x: f32) -> Fp8Code {
        debug_assert!(!x.is_nan());
        let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
        let a = x.abs();
        let magnitude = if a >= FP8_MAX {
            FP8_MAX_CODE
        } else if a < MIN_NORMAL {
            // subnormal grid has spacing 2^-9; adding 2^23 rounds to an
            // integer with ties to even
            ((a * 512.0 + 8_388_608.0) - 8_388_608.0) as u8
        } else {
            // round the f32 mantissa to 3 bits, ties to even; a carry
            // spills into the exponent as it should
            let bits = a.to_bits();
            let rounded = (bits + 0x7_FFFF + ((bits >> 20) & 1)) >> 20;
            // rebias the exponent from 127 to 7
            (rounded - (120 << 3)) as u8
        };
        if magnitude == 0 {
            // negative values that round to zero encode as +0
            return Fp8Code(0);
        }
        Fp8Code(sign | magnitude)
    }
}

fn decode_bits(bits: u8) -> f32 {
    let sign = if bits & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 3) & 0x0F) as i32;
    let mant = (bits & 0x07) as f32;
    let mag = if exp == 0 {
        mant / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + mant / 8.0) * 2f32.powi(exp - 7)
    };
    sign * mag
}

fn decode_table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = if i as u8 & 0x7F == NAN_MAGNITUDE {
                f32::NAN
            } else {
                decode_bits(i as u8)
            };
        }
        t
    })
}

/// A quantized run of values sharing one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fp8Block {
    codes: Vec<Fp8Code>,
    scale: f32,
}

impl Fp8Block {
    /// All-zero block of `len` elements with unit scale.
    pub fn zeroed(len: usize) -> Self {
        Self {
            codes: vec![Fp8Code::ZERO; len],
            scale: 1.0,
        }
    }

    /// Rebuilds a block from raw parts, e.g. when loading a cache dump.
    pub fn from_parts(codes: Vec<Fp8Code>, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fp8 block scale must be finite and positive, got {scale}"
            )));
        }
        Ok(Self { codes, scale })
    }

    pub fn codes(&self) -> &[Fp8Code] {
        &self.codes
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn element_count(&self) -> usize {
        self.codes.len()
    }

    /// Decodes `self.codes[range]` into `out`.
    pub fn dequantize_into(&self, start: usize, out: &mut [f32]) -> Result<()> {
        let table = decode_table();
        let codes = &self.codes[start..start + out.len()];
        // a fold without early exit vectorizes; locate the culprit only on failure
        if codes.iter().fold(false, |bad, c| bad | c.is_nan()) {
            let i = codes.iter().position(|c| c.is_nan()).expect("found above");
            return Err(Error::DataIntegrity {
                code: codes[i].0,
                index: start + i,
            });
        }
        for (o, c) in out.iter_mut().zip(codes) {
            *o = table[c.0 as usize] * self.scale;
        }
        Ok(())
    }

    /// Re-encodes the leading codes from `values` under the scale for
    /// `max_abs`. Codes past `values.len()` must already encode zero.
    pub(crate) fn reencode_prefix(&mut self, values: &[f32], max_abs: f32) {
        self.scale = scale_for(max_abs);
        for (c, &v) in self.codes.iter_mut().zip(values) {
            *c = Fp8Code::from_f32(v / self.scale);
        }
    }

    /// Test hook: overwrite a code without re-encoding.
    #[doc(hidden)]
    pub fn codes_mut(&mut self) -> &mut [Fp8Code] {
        &mut self.codes
    }
}

pub(crate) fn scale_for(max_abs: f32) -> f32 {
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / FP8_MAX };
    // a block whose max is a subnormal f32 would underflow the scale
    if scale > 0.0 {
        scale
    } else {
        f32::MIN_POSITIVE
    }
}

/// Quantizes `values` with `scale = max|v| / 448` (or 1 for an all-zero block).
pub fn quantize_block(values: &[f32]) -> Result<Fp8Block> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot quantize an empty block".into()));
    }
    let mut max = 0.0f32;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "fp8 input {i} is not finite ({v})"
            )));
        }
        max = max.max(v.abs());
    }
    let scale = scale_for(max);
    let codes = values
        .iter()
        .map(|&v| Fp8Code::from_f32(v / scale))
        .collect();
    Ok(Fp8Block { codes, scale })
}

pub fn dequantize_block(block: &Fp8Block) -> Result<Vec<f32>> {
    let mut out = vec![0.0; block.element_count()];
    block.dequantize_into(0, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Every finite non-negative E4M3 value, derived from the bit layout by
    /// plain arithmetic on the fields.
    fn positive_grid() -> Vec<(u8, f64)> {
        (0u8..0x7F)
            .map(|c| {
                let e = (c >> 3) as i32;
                let m = (c & 7) as f64;
                let v = if e == 0 {
                    m * 2f64.powi(-9)
                } else {
                    (8.0 + m) * 2f64.powi(e - 10)
                };
                (c, v)
            })
            .collect()
    }

    /// Brute-force nearest-even encoder over the grid.
    fn encode_oracle(x: f32) -> u8 {
        let a = (x as f64).abs();
        let grid = positive_grid();
        let mut best = grid[0];
        for &(c, v) in &grid {
            let (db, dv) = ((best.1 - a).abs(), (v - a).abs());
            if dv < db || (dv == db && c & 1 == 0 && best.0 & 1 == 1) {
                best = (c, v);
            }
        }
        let sign = if x < 0.0 && best.0 != 0 { 0x80 } else { 0 };
        sign | best.0
    }

    #[test]
    fn decode_table_matches_field_arithmetic() {
        for (c, v) in positive_grid() {
            assert_eq!(Fp8Code(c).to_f32().unwrap() as f64, v);
            assert_eq!(Fp8Code(c | 0x80).to_f32().unwrap() as f64, -v);
        }
        assert!(Fp8Code(0x7F).to_f32().is_none());
        assert!(Fp8Code(0xFF).to_f32().is_none());
        assert_eq!(Fp8Code(0x7E).to_f32(), Some(448.0));
        assert_eq!(Fp8Code(0x01).to_f32(), Some(2f32.powi(-9)));
    }

    #[test]
    fn encoder_matches_brute_force() {
        // every grid point, every midpoint, and a little either side of each
        let grid = positive_grid();
        let mut probes = vec![0.0f32, 500.0, 1.0e6, 464.0, 480.0];
        for w in grid.windows(2) {
            let mid = (w[0].1 + w[1].1) / 2.0;
            probes.extend([w[0].1 as f32, mid as f32]);
            probes.push(f32::from_bits((mid as f32).to_bits() + 1));
            probes.push(f32::from_bits((mid as f32).to_bits() - 1));
        }
        for p in probes {
            for x in [p, -p] {
                let want = if x.abs() >= 448.0 {
                    (if x < 0.0 { 0x80 } else { 0 }) | FP8_MAX_CODE
                } else {
                    encode_oracle(x)
                };
                assert_eq!(Fp8Code::from_f32(x).0, want, "x={x}");
            }
        }
    }

    #[test]
    fn zero_block() {
        let b = quantize_block(&[0.0; 4]).unwrap();
        assert_eq!(b.scale(), 1.0);
        assert_eq!(dequantize_block(&b).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn max_normal_is_exact() {
        let b = quantize_block(&[448.0]).unwrap();
        assert_eq!(b.scale(), 1.0);
        assert_eq!(dequantize_block(&b).unwrap(), vec![448.0]);
    }

    #[test]
    fn unit_block_roundtrips_exactly() {
        let b = quantize_block(&[1.0]).unwrap();
        assert_eq!(dequantize_block(&b).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(quantize_block(&[1.0, f32::NAN]).is_err());
        assert!(quantize_block(&[f32::NEG_INFINITY]).is_err());
        assert!(quantize_block(&[]).is_err());
    }

    #[test]
    fn nan_codepoint_is_integrity_error() {
        let mut b = quantize_block(&[1.0, 2.0]).unwrap();
        b.codes_mut()[1] = Fp8Code(0xFF);
        assert!(matches!(
            dequantize_block(&b),
            Err(Error::DataIntegrity { code: 0xFF, index: 1 })
        ));
    }

    #[test]
    fn gaussian_block_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let v: Vec<f32> = (0..64).map(|_| normal.sample(&mut rng)).collect();
        let b = quantize_block(&v).unwrap();
        let d = dequantize_block(&b).unwrap();
        let floor = b.scale() * 2f32.powi(-6);
        for (x, y) in v.iter().zip(&d) {
            if x.abs() >= floor {
                assert!(((x - y) / x).abs() <= 0.125, "{x} -> {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn requantize_is_idempotent(v in prop::collection::vec(-1.0e3f32..1.0e3, 1..128)) {
            let b = quantize_block(&v).unwrap();
            let again = quantize_block(&dequantize_block(&b).unwrap()).unwrap();
            prop_assert_eq!(b.codes(), again.codes());
        }

        #[test]
        fn sign_and_order_preserved(mut v in prop::collection::vec(-1.0e2f32..1.0e2, 1..64)) {
            v.sort_by(f32::total_cmp);
            let d = dequantize_block(&quantize_block(&v).unwrap()).unwrap();
            for (x, y) in v.iter().zip(&d) {
                prop_assert!(*y == 0.0 || x.signum() == y.signum());
            }
            for w in d.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
