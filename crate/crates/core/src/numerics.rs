//! Precision conversion: row-wise min-max integer quantization, FP16
//! conversion, and the two rounding modes.
//!
//! All arithmetic follows FP32 semantics. A row is quantized with one
//! `(scale, bias)` pair: `bias = min(row)` and
//! `scale = (max(row) - min(row)) / (2^bits - 1)`, and element `i` becomes
//! `round((row[i] - bias) / scale)` clamped to `[0, 2^bits - 1]`.
//!
//! Stochastic rounding consumes exactly one uniform draw per element, whether
//! or not the element is already representable, so stream positions stay
//! aligned between the packed and the emulated (fake-quantized) paths.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::bitpack;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Largest finite binary16 magnitude.
pub const FP16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
    Int4,
    Int2,
}

impl Precision {
    pub const ALL: [Precision; 5] = [
        Precision::Fp32,
        Precision::Fp16,
        Precision::Int8,
        Precision::Int4,
        Precision::Int2,
    ];

    pub fn bitwidth(self) -> u32 {
        match self {
            Precision::Fp32 => 32,
            Precision::Fp16 => 16,
            Precision::Int8 => 8,
            Precision::Int4 => 4,
            Precision::Int2 => 2,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Precision::Int8 | Precision::Int4 | Precision::Int2)
    }

    /// Largest code of an integer precision, `2^bits - 1`.
    pub fn max_code(self) -> Option<u8> {
        self.is_integer()
            .then(|| ((1u16 << self.bitwidth()) - 1) as u8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
            Precision::Int2 => "int2",
        }
    }

    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
            Precision::Int8 => 2,
            Precision::Int4 => 3,
            Precision::Int2 => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            "int2" => Ok(Precision::Int2),
            other => Err(Error::config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    /// Round to nearest, ties to even.
    #[default]
    Nearest,
    /// Pick one of the two bracketing values with probability proportional
    /// to proximity.
    Stochastic,
}

impl RoundingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundingMode::Nearest => "nearest",
            RoundingMode::Stochastic => "stochastic",
        }
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(RoundingMode::Nearest),
            "stochastic" => Ok(RoundingMode::Stochastic),
            other => Err(Error::config(format!("unknown rounding mode '{other}'"))),
        }
    }
}

/// Per-row affine quantization parameters, stored as two FP32 values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub bias: f32,
}

impl QuantParams {
    pub const BYTES: usize = 8;

    /// Min-max parameters for `row`. Constant rows get `scale = 0`.
    pub fn for_row(row: &[f32], precision: Precision) -> Result<Self> {
        let max_code = precision.max_code().ok_or(Error::NotInteger(precision))?;
        check_row(row)?;
        let (min, max) = row
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = max - min;
        if !range.is_finite() {
            return Err(Error::RangeOverflow { min, max });
        }
        // A subnormal range can underflow to a zero scale; treat it as constant.
        let scale = range / max_code as f32;
        Ok(QuantParams {
            scale: if scale > 0.0 { scale } else { 0.0 },
            bias: min,
        })
    }

    #[inline]
    pub fn dequantize(&self, code: u8) -> f32 {
        code as f32 * self.scale + self.bias
    }
}

fn check_row(row: &[f32]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::EmptyRow);
    }
    if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(())
}

/// A quantized row: FP32 `(scale, bias)` header plus bit-packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRow {
    pub params: QuantParams,
    precision: Precision,
    dim: usize,
    payload: Vec<u8>,
}

impl PackedRow {
    pub fn from_codes(params: QuantParams, precision: Precision, codes: &[u8]) -> Result<Self> {
        let max_code = precision.max_code().ok_or(Error::NotInteger(precision))?;
        if let Some(&c) = codes.iter().find(|&&c| c > max_code) {
            return Err(Error::config(format!(
                "code {c} exceeds {max_code} for {precision}"
            )));
        }
        Ok(Self {
            params,
            precision,
            dim: codes.len(),
            payload: bitpack::pack(codes, precision.bitwidth()),
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn code(&self, j: usize) -> u8 {
        bitpack::get(&self.payload, self.precision.bitwidth(), j)
    }

    pub fn codes(&self) -> Vec<u8> {
        bitpack::unpack(&self.payload, self.precision.bitwidth(), self.dim)
    }

    /// Serialized size: 8-byte header plus `ceil(dim * bits / 8)` bytes.
    pub fn byte_len(precision: Precision, dim: usize) -> usize {
        QuantParams::BYTES + bitpack::packed_len(dim, precision.bitwidth())
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.params.scale.to_le_bytes());
        out.extend_from_slice(&self.params.bias.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::byte_len(self.precision, self.dim));
        self.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8], precision: Precision, dim: usize) -> Result<Self> {
        let bits = precision.bitwidth();
        if !precision.is_integer() {
            return Err(Error::NotInteger(precision));
        }
        let want = Self::byte_len(precision, dim);
        if bytes.len() != want {
            return Err(Error::Snapshot(format!(
                "packed row needs {want} bytes, got {}",
                bytes.len()
            )));
        }
        let scale = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let bias = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let payload = bytes[8..].to_vec();
        // Unused high bits of the last byte must be zero.
        let used = dim * bits as usize % 8;
        if used != 0 && payload.last().is_some_and(|b| b >> used != 0) {
            return Err(Error::Snapshot("nonzero padding bits".into()));
        }
        Ok(Self {
            params: QuantParams { scale, bias },
            precision,
            dim,
            payload,
        })
    }
}

/// Rounds `x` to one of its bracketing values: `hi` with probability
/// `(x - lo) / (hi - lo)`, otherwise `lo`. Always consumes one draw.
pub fn stochastic_round_unit(x: f64, lo: f64, hi: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(lo < hi && lo <= x && x <= hi);
    let u = rng.next_unit();
    let p = (x - lo) / (hi - lo);
    if u < p {
        hi
    } else {
        lo
    }
}

/// Rounds a value on the integer grid.
#[inline]
pub(crate) fn round_to_int(v: f32, mode: RoundingMode, rng: &mut RngStream) -> f32 {
    match mode {
        RoundingMode::Nearest => v.round_ties_even(),
        RoundingMode::Stochastic => {
            let lo = v.floor();
            stochastic_round_unit(v as f64, lo as f64, lo as f64 + 1.0, rng) as f32
        }
    }
}

/// Integer code for `v` under `params`, clamped to `[0, max_code]`.
#[inline]
pub(crate) fn code_for(
    v: f32,
    params: QuantParams,
    max_code: u8,
    mode: RoundingMode,
    rng: &mut RngStream,
) -> u8 {
    if params.scale == 0.0 {
        // Constant row: keep the stream position aligned with the general case.
        if mode == RoundingMode::Stochastic {
            rng.next_unit();
        }
        return 0;
    }
    let q = round_to_int((v - params.bias) / params.scale, mode, rng);
    q.clamp(0.0, max_code as f32) as u8
}

pub fn quantize_row(
    row: &[f32],
    precision: Precision,
    mode: RoundingMode,
    rng: &mut RngStream,
) -> Result<PackedRow> {
    let params = QuantParams::for_row(row, precision)?;
    let max_code = precision.max_code().expect("checked by for_row");
    let codes: Vec<u8> = row
        .iter()
        .map(|&v| code_for(v, params, max_code, mode, rng))
        .collect();
    Ok(PackedRow {
        params,
        precision,
        dim: row.len(),
        payload: bitpack::pack(&codes, precision.bitwidth()),
    })
}

pub fn dequantize_row(packed: &PackedRow) -> Vec<f32> {
    let mut out = vec![0.0; packed.dim];
    dequantize_into(packed.params, packed.precision, &packed.payload, &mut out);
    out
}

pub(crate) fn dequantize_into(
    params: QuantParams,
    precision: Precision,
    payload: &[u8],
    out: &mut [f32],
) {
    let bits = precision.bitwidth();
    for (j, o) in out.iter_mut().enumerate() {
        *o = params.dequantize(bitpack::get(payload, bits, j));
    }
}

/// Quantize-then-dequantize without materializing packed codes.
///
/// For integer precisions this is an independent emulation of
/// `dequantize_row(quantize_row(..))` and matches it bit for bit given the same
/// stream position. FP16 routes each element through [`convert_fp16`]; FP32 is
/// the identity.
pub fn fake_quantize_row(
    row: &[f32],
    precision: Precision,
    mode: RoundingMode,
    rng: &mut RngStream,
) -> Result<Vec<f32>> {
    match precision {
        Precision::Fp32 => {
            check_row(row)?;
            Ok(row.to_vec())
        }
        Precision::Fp16 => {
            check_row(row)?;
            row.iter().map(|&x| convert_fp16(x, mode, rng)).collect()
        }
        _ => {
            let params = QuantParams::for_row(row, precision)?;
            let top = precision.max_code().unwrap() as f32;
            Ok(row
                .iter()
                .map(|&v| {
                    let q = if params.scale == 0.0 {
                        if mode == RoundingMode::Stochastic {
                            rng.next_unit();
                        }
                        0.0
                    } else {
                        round_to_int((v - params.bias) / params.scale, mode, rng).clamp(0.0, top)
                    };
                    q * params.scale + params.bias
                })
                .collect())
        }
    }
}

fn f16_next_up(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x0001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits + 1)
    } else {
        f16::from_bits(bits - 1)
    }
}

fn f16_next_down(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x8001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits - 1)
    } else {
        f16::from_bits(bits + 1)
    }
}

/// Rounds `x` to binary16 under `mode` and returns it as FP32. Magnitudes
/// beyond 65504 saturate instead of overflowing to infinity.
pub fn convert_fp16(x: f32, mode: RoundingMode, rng: &mut RngStream) -> Result<f32> {
    Ok(to_fp16(x, mode, rng)?.to_f32())
}

pub(crate) fn to_fp16(x: f32, mode: RoundingMode, rng: &mut RngStream) -> Result<f16> {
    if x.is_nan() {
        return Err(Error::NonFinite { index: 0, value: x });
    }
    if x.abs() >= FP16_MAX {
        if mode == RoundingMode::Stochastic {
            rng.next_unit();
        }
        return Ok(f16::from_f32(FP16_MAX.copysign(x)));
    }
    let nearest = f16::from_f32(x);
    match mode {
        RoundingMode::Nearest => Ok(nearest),
        RoundingMode::Stochastic => {
            let nv = nearest.to_f32();
            if nv == x {
                rng.next_unit();
                return Ok(nearest);
            }
            let (lo, hi) = if nv < x {
                (nearest, f16_next_up(nearest))
            } else {
                (f16_next_down(nearest), nearest)
            };
            let picked = stochastic_round_unit(
                x as f64,
                lo.to_f32() as f64,
                hi.to_f32() as f64,
                rng,
            );
            Ok(if picked == hi.to_f32() as f64 { hi } else { lo })
        }
    }
}
