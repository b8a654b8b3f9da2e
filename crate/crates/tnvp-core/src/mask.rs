//! Binary coordinate masks for coupling units.
//!
//! A set bit means the coordinate passes through a unit unchanged; clear
//! bits mark the coordinates the unit rescales and shifts.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a default stack lays out its first mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStyle {
    /// First floor(D/2) coordinates pass through.
    Half,
    /// Even-indexed coordinates pass through.
    EvenOdd,
}

impl MaskStyle {
    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u32 {
        match self {
            MaskStyle::Half => 0,
            MaskStyle::EvenOdd => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(MaskStyle::Half),
            1 => Ok(MaskStyle::EvenOdd),
            other => Err(Error::invalid(format!("unknown mask style code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStyle::Half => "half",
            MaskStyle::EvenOdd => "even-odd",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "half" => Ok(MaskStyle::Half),
            "even-odd" => Ok(MaskStyle::EvenOdd),
            other => Err(Error::invalid(format!(
                "unknown mask style {other:?} (expected \"half\" or \"even-odd\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Vec<bool>,
}

impl BinaryMask {
    /// Arbitrary bit pattern. Degenerate all-set / all-clear masks are
    /// allowed here (tests use them); stacks reject them at assembly.
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("mask must have at least one bit"));
        }
        Ok(BinaryMask { bits })
    }

    /// First floor(D/2) coordinates pass through.
    pub fn half(dim: usize) -> Result<Self> {
        let d = dim / 2;
        BinaryMask::from_bits((0..dim).map(|i| i < d).collect())
    }

    /// Even-indexed coordinates pass through.
    pub fn even_odd(dim: usize) -> Result<Self> {
        BinaryMask::from_bits((0..dim).map(|i| i % 2 == 0).collect())
    }

    pub fn styled(style: MaskStyle, dim: usize) -> Result<Self> {
        match style {
            MaskStyle::Half => BinaryMask::half(dim),
            MaskStyle::EvenOdd => BinaryMask::even_odd(dim),
        }
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Number of pass-through coordinates.
    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when the mask passes everything or nothing through.
    pub fn is_degenerate(&self) -> bool {
        let d = self.ones_count();
        d == 0 || d == self.dim()
    }

    /// The mask as a 0/1 tensor, for oracle-side arithmetic.
    pub fn multiplier<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            self.bits
                .iter()
                .map(|&b| if b { S::one() } else { S::zero() })
                .collect(),
        )
    }
}
