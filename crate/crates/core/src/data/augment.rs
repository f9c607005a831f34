use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `clamp(alpha * pixel + beta, 0, 1)` elementwise.
pub fn augment_brightness_contrast(image: &Tensor<f32>, alpha: f64, beta: f64) -> Result<Tensor<f32>> {
    if !(alpha > 0.0) || !beta.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("contrast {alpha} / brightness {beta}")));
    }
    let (a, b) = (alpha as f32, beta as f32);
    Ok(image.map(|p| (a * p + b).clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            alpha: (0.6, 1.4),
            beta: (-0.2, 0.2),
        }
    }
}

impl AugmentRanges {
    /// Ranges that leave images untouched.
    pub fn off() -> Self {
        Self {
            alpha: (1.0, 1.0),
            beta: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.alpha;
        let (b0, b1) = self.beta;
        if !(a0 > 0.0 && a0 <= a1 && b0 <= b1 && b0.is_finite() && b1.is_finite() && a1.is_finite()) {
            return Err(Error::Config(format!("augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let a = draw(rng, self.alpha);
        (a, draw(rng, self.beta))
    }
}
