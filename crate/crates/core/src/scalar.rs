//! Scalar abstraction: the whole engine is generic over the element type.
//!
//! Two precisions are supported. 64-bit is used by the verification and
//! gradient-check suites where tight tolerances matter; 32-bit is used for
//! training and benchmarking where speed matters.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating-point element type for tensors, weights and losses.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Display
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    /// Precision tag used in checkpoint headers and config files.
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Standard normal draw, sampled in the scalar's own width so that a
    /// given seed yields the same stream for a given precision.
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        standard_normal_f64(rng) as f32
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        standard_normal_f64(rng)
    }
}

/// Box-Muller in f64 so f32 and f64 runs consume the RNG stream identically.
fn standard_normal_f64<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Runtime precision selector for configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision '{other}' (expected 32 or 64)")),
        }
    }
}
