//! Min-max bridge between codebook-scaled latents and the `[-1, 1]` range the
//! diffusion model works in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vqgan::Codebook;

/// Global scalar range of the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRange {
    pub lo: f64,
    pub hi: f64,
}

impl LatentRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::DegenerateRange(hi - lo));
        }
        Ok(Self { lo, hi })
    }

    fn check(&self) -> Result<()> {
        Self::new(self.lo, self.hi).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Minimum and maximum over every scalar of the codebook.
pub fn codebook_range<T: Scalar>(codebook: &Codebook<T>) -> Result<LatentRange> {
    let (lo, hi) = codebook.entries.min_max();
    LatentRange::new(lo.as_f64(), hi.as_f64())
}

/// Forward: `2 (clip(z, lo, hi) - lo) / (hi - lo) - 1`. Inverse: the affine
/// inverse of that map.
pub fn minmax_map<T: Scalar>(
    z: &Tensor<T>,
    range: LatentRange,
    direction: Direction,
) -> Result<Tensor<T>> {
    range.check()?;
    let (lo, hi) = (T::lit(range.lo), T::lit(range.hi));
    let width = hi - lo;
    let two = T::lit(2.0);
    Ok(match direction {
        Direction::Forward => z.map(|v| two * (v.max(lo).min(hi) - lo) / width - T::one()),
        Direction::Inverse => z.map(|v| (v + T::one()) / two * width + lo),
    })
}
