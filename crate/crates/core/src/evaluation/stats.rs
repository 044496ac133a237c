use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation of a set of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample (`n - 1`) standard deviation; 0 when `n == 1`.
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Bland–Altman agreement of paired measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanStats {
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// `(mean of pair, pred - gt)` per pair, for plotting.
    pub points: Vec<(f64, f64)>,
}

pub const LOA_Z: f64 = 1.96;

/// Differences are `pred - gt`; limits of agreement are
/// `mean ± 1.96 · sd` with the sample standard deviation.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanStats> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("Bland-Altman needs at least 2 pairs, got {}", pairs.len())));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(p, g)| p - g).collect();
    let s = Summary::of(&diffs).expect("non-empty");
    Ok(BlandAltmanStats {
        mean_difference: s.mean,
        sd_difference: s.sd,
        loa_low: s.mean - LOA_Z * s.sd,
        loa_high: s.mean + LOA_Z * s.sd,
        points: pairs.iter().map(|(p, g)| ((p + g) / 2.0, p - g)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_differences() {
        let ba = bland_altman(&[(2.0, 1.0), (1.0, 2.0)]).unwrap();
        assert_eq!(ba.mean_difference, 0.0);
        assert!((ba.sd_difference - 2f64.sqrt()).abs() < 1e-12);
        assert!((ba.loa_high - 2.7719).abs() < 1e-4);
        assert_eq!(ba.points, vec![(1.5, 1.0), (1.5, -1.0)]);
        assert!(bland_altman(&[(1.0, 1.0)]).is_err());
    }
}
