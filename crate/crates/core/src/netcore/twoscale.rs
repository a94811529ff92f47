use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input augmentation `x -> (x, eps^gamma (x - x_c), eps^gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleConfig {
    pub gamma: f64,
    pub center: Vec<f64>,
}

impl TwoScaleConfig {
    pub fn new(gamma: f64, center: Vec<f64>) -> Result<Self> {
        if !(gamma < 0.0) {
            return Err(Error::config(format!(
                "two-scale exponent gamma must be negative, got {gamma}"
            )));
        }
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::config(format!("invalid two-scale center {center:?}")));
        }
        Ok(TwoScaleConfig { gamma, center })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Width of the augmented feature vector, `2d + 1`.
    pub fn feature_dim(&self) -> usize {
        2 * self.dim() + 1
    }

    /// `eps^gamma`, the stretch factor.
    pub fn scale(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::domain(format!("eps must be positive, got {eps}")));
        }
        Ok(eps.powf(self.gamma))
    }

    pub fn center_within(&self, lower: &[f64], upper: &[f64]) -> bool {
        self.center
            .iter()
            .zip(lower.iter().zip(upper))
            .all(|(c, (lo, hi))| *lo <= *c && *c <= *hi)
    }
}

pub fn two_scale_features(x: &[f64], eps: f64, cfg: &TwoScaleConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.dim() {
        return Err(Error::config(format!(
            "point has dimension {}, two-scale center has dimension {}",
            x.len(),
            cfg.dim()
        )));
    }
    let s = cfg.scale(eps)?;
    let mut out = Vec::with_capacity(cfg.feature_dim());
    out.extend_from_slice(x);
    out.extend(x.iter().zip(&cfg.center).map(|(xi, ci)| s * (xi - ci)));
    out.push(s);
    Ok(out)
}
