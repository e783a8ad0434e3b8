//! CIE 1931 2-degree standard observer color matching functions.
//!
//! The table is the canonical 5 nm sampling from 380 to 780 nm. Weights are
//! looked up by linear interpolation and are zero outside the table support.

use crate::error::{Error, Result};

/// Color matching function table: per-wavelength (x̄, ȳ, z̄) weights.
#[derive(Debug, Clone)]
pub struct CmfTable {
    wavelengths_nm: Vec<f64>,
    weights: Vec<[f64; 3]>,
}

impl CmfTable {
    /// Build a table from parallel wavelength/weight lists.
    pub fn new(wavelengths_nm: Vec<f64>, weights: Vec<[f64; 3]>) -> Result<Self> {
        if wavelengths_nm.len() != weights.len() {
            return Err(Error::validation("cmf: wavelength/weight length mismatch"));
        }
        if wavelengths_nm.len() < 2 {
            return Err(Error::validation("cmf: need at least two samples"));
        }
        if !wavelengths_nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation(
                "cmf: wavelengths must be strictly increasing",
            ));
        }
        if weights
            .iter()
            .any(|w| w.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::validation(
                "cmf: weights must be finite and nonnegative",
            ));
        }
        let (lo, hi) = (wavelengths_nm[0], *wavelengths_nm.last().unwrap());
        if lo > 400.0 || hi < 700.0 {
            return Err(Error::validation("cmf: must cover at least 400-700 nm"));
        }
        Ok(CmfTable {
            wavelengths_nm,
            weights,
        })
    }

    /// The CIE 1931 2-degree standard observer.
    pub fn cie_1931_2deg() -> Self {
        let wavelengths = (0..CIE_1931_2DEG.len())
            .map(|i| 380.0 + 5.0 * i as f64)
            .collect();
        CmfTable {
            wavelengths_nm: wavelengths,
            weights: CIE_1931_2DEG.to_vec(),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.wavelengths_nm[0], *self.wavelengths_nm.last().unwrap())
    }

    /// Interpolated (x̄, ȳ, z̄) at `lambda_nm`; zero outside the support.
    pub fn weights_at(&self, lambda_nm: f64) -> [f64; 3] {
        let ws = &self.wavelengths_nm;
        if lambda_nm < ws[0] || lambda_nm > *ws.last().unwrap() {
            return [0.0; 3];
        }
        // partition_point returns the first index with wavelength > lambda.
        let hi = ws.partition_point(|&w| w <= lambda_nm);
        if hi == 0 {
            return self.weights[0];
        }
        if hi == ws.len() {
            return self.weights[ws.len() - 1];
        }
        let lo = hi - 1;
        let t = (lambda_nm - ws[lo]) / (ws[hi] - ws[lo]);
        let a = self.weights[lo];
        let b = self.weights[hi];
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    }
}

/// CIE 1931 2-degree observer, 380..=780 nm step 5 nm: (x̄, ȳ, z̄).
#[rustfmt::skip]
pub const CIE_1931_2DEG: [[f64; 3]; 81] = [
    [0.001368, 0.000039, 0.006450],
    [0.002236, 0.000064, 0.010550],
    [0.004243, 0.000120, 0.020050],
    [0.007650, 0.000217, 0.036210],
    [0.014310, 0.000396, 0.067850],
    [0.023190, 0.000640, 0.110200],
    [0.043510, 0.001210, 0.207400],
    [0.077630, 0.002180, 0.371300],
    [0.134380, 0.004000, 0.645600],
    [0.214770, 0.007300, 1.039050],
    [0.283900, 0.011600, 1.385600],
    [0.328500, 0.016840, 1.622960],
    [0.348280, 0.023000, 1.747060],
    [0.348060, 0.029800, 1.782600],
    [0.336200, 0.038000, 1.772110],
    [0.318700, 0.048000, 1.744100],
    [0.290800, 0.060000, 1.669200],
    [0.251100, 0.073900, 1.528100],
    [0.195360, 0.090980, 1.287640],
    [0.142100, 0.112600, 1.041900],
    [0.095640, 0.139020, 0.812950],
    [0.057950, 0.169300, 0.616200],
    [0.032010, 0.208020, 0.465180],
    [0.014700, 0.258600, 0.353300],
    [0.004900, 0.323000, 0.272000],
    [0.002400, 0.407300, 0.212300],
    [0.009300, 0.503000, 0.158200],
    [0.029100, 0.608200, 0.111700],
    [0.063270, 0.710000, 0.078250],
    [0.109600, 0.793200, 0.057250],
    [0.165500, 0.862000, 0.042160],
    [0.225750, 0.914850, 0.029840],
    [0.290400, 0.954000, 0.020300],
    [0.359700, 0.980300, 0.013400],
    [0.433450, 0.994950, 0.008750],
    [0.512050, 1.000000, 0.005750],
    [0.594500, 0.995000, 0.003900],
    [0.678400, 0.978600, 0.002750],
    [0.762100, 0.952000, 0.002100],
    [0.842500, 0.915400, 0.001800],
    [0.916300, 0.870000, 0.001650],
    [0.978600, 0.816300, 0.001400],
    [1.026300, 0.757000, 0.001100],
    [1.056700, 0.694900, 0.001000],
    [1.062200, 0.631000, 0.000800],
    [1.045600, 0.566800, 0.000600],
    [1.002600, 0.503000, 0.000340],
    [0.938400, 0.441200, 0.000240],
    [0.854450, 0.381000, 0.000190],
    [0.751400, 0.321000, 0.000100],
    [0.642400, 0.265000, 0.000050],
    [0.541900, 0.217000, 0.000030],
    [0.447900, 0.175000, 0.000020],
    [0.360800, 0.138200, 0.000010],
    [0.283500, 0.107000, 0.000000],
    [0.218700, 0.081600, 0.000000],
    [0.164900, 0.061000, 0.000000],
    [0.121200, 0.044580, 0.000000],
    [0.087400, 0.032000, 0.000000],
    [0.063600, 0.023200, 0.000000],
    [0.046770, 0.017000, 0.000000],
    [0.032900, 0.011920, 0.000000],
    [0.022700, 0.008210, 0.000000],
    [0.015840, 0.005723, 0.000000],
    [0.011359, 0.004102, 0.000000],
    [0.008111, 0.002929, 0.000000],
    [0.005790, 0.002091, 0.000000],
    [0.004109, 0.001484, 0.000000],
    [0.002899, 0.001047, 0.000000],
    [0.002049, 0.000740, 0.000000],
    [0.001440, 0.000520, 0.000000],
    [0.001000, 0.000361, 0.000000],
    [0.000690, 0.000249, 0.000000],
    [0.000476, 0.000172, 0.000000],
    [0.000332, 0.000120, 0.000000],
    [0.000235, 0.000085, 0.000000],
    [0.000166, 0.000060, 0.000000],
    [0.000117, 0.000042, 0.000000],
    [0.000083, 0.000030, 0.000000],
    [0.000059, 0.000021, 0.000000],
    [0.000042, 0.000015, 0.000000],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_sane() {
        let t = CmfTable::cie_1931_2deg();
        let (lo, hi) = t.support();
        assert_eq!(lo, 380.0);
        assert_eq!(hi, 780.0);
        // y-bar peaks at 555 nm with value 1.
        assert_eq!(t.weights_at(555.0)[1], 1.0);
    }

    #[test]
    fn exact_grid_points_are_not_interpolated() {
        let t = CmfTable::cie_1931_2deg();
        let w = t.weights_at(550.0);
        assert_eq!(w, [0.433450, 0.994950, 0.008750]);
    }

    #[test]
    fn interpolation_is_linear_between_samples() {
        let t = CmfTable::cie_1931_2deg();
        let a = t.weights_at(550.0);
        let b = t.weights_at(555.0);
        let m = t.weights_at(552.5);
        for c in 0..3 {
            assert!((m[c] - 0.5 * (a[c] + b[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_support_is_zero() {
        let t = CmfTable::cie_1931_2deg();
        assert_eq!(t.weights_at(100.0), [0.0; 3]);
        assert_eq!(t.weights_at(900.0), [0.0; 3]);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(CmfTable::new(vec![400.0, 400.0], vec![[0.0; 3], [0.0; 3]]).is_err());
        assert!(CmfTable::new(vec![400.0, 500.0], vec![[0.0; 3], [-1.0, 0.0, 0.0]]).is_err());
        // 450-600 does not cover the required 400-700 range.
        assert!(CmfTable::new(vec![450.0, 600.0], vec![[0.1; 3], [0.1; 3]]).is_err());
    }
}
