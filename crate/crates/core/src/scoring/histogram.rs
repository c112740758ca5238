use crate::error::{Error, Result};

/// Normalized histogram over `k` equal-width bins spanning `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    densities: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl BinnedDistribution {
    /// Wrap densities that already sum to one.
    pub fn from_densities(densities: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if densities.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 bins".into()));
        }
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("bin range [{lo}, {hi}] is empty")));
        }
        if densities.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument("densities must be finite and >= 0".into()));
        }
        let total: f64 = densities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("densities sum to {total}, not 1")));
        }
        Ok(Self { densities, lo, hi })
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn k(&self) -> usize {
        self.densities.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// Bin `values` into `k` equal-width bins over `[lo, hi]`.
///
/// Bins are half-open `[e_j, e_{j+1})` except the last, which also holds
/// `hi`. Values outside the range land in the nearest edge bin.
pub fn bin_values(values: &[f64], k: usize, lo: f64, hi: f64) -> Result<BinnedDistribution> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot bin an empty value set".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {k}")));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::InvalidArgument(format!("bin range [{lo}, {hi}] is empty")));
    }
    let width = hi - lo;
    let mut counts = vec![0usize; k];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("value to bin".into()));
        }
        let pos = ((v - lo) / width * k as f64).floor();
        let bin = if pos < 0.0 {
            0
        } else {
            (pos as usize).min(k - 1)
        };
        counts[bin] += 1;
    }
    let n = values.len() as f64;
    Ok(BinnedDistribution {
        densities: counts.into_iter().map(|c| c as f64 / n).collect(),
        lo,
        hi,
    })
}

/// `sum_k sqrt(p_k q_k)`, clamped to `[0, 1]`.
pub fn bhattacharyya_coefficient(p: &BinnedDistribution, q: &BinnedDistribution) -> Result<f64> {
    if p.k() != q.k() || p.range() != q.range() {
        return Err(Error::InvalidArgument(format!(
            "mismatched binning: {} bins over {:?} vs {} bins over {:?}",
            p.k(),
            p.range(),
            q.k(),
            q.range()
        )));
    }
    let bc: f64 = p
        .densities
        .iter()
        .zip(&q.densities)
        .map(|(a, b)| (a * b).sqrt())
        .sum();
    Ok(bc.clamp(0.0, 1.0))
}
