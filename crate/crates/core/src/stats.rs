//! Sample statistics for diagnostics.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{IdacError, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation and its two-sided p-value under the null of zero
/// correlation (t-test with `n − 2` degrees of freedom).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(IdacError::InvalidInput(format!(
            "pearson needs two equal samples of at least 3 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    if r.abs() == 1.0 {
        return Ok((r, 0.0));
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| IdacError::InvalidInput(e.to_string()))?;
    Ok((r, 2.0 * dist.sf(t.abs())))
}

/// Population skewness `m₃ / m₂^{3/2}`.
pub fn skewness(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / x.len() as f64;
    m3 / m2.powf(1.5)
}

/// Population excess kurtosis `m₄ / m₂² − 3`.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / x.len() as f64;
    m4 / (m2 * m2) - 3.0
}

/// Pearson chi-square goodness-of-fit p-value against equal cell
/// probabilities.
pub fn chi_square_uniform_p(counts: &[u64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(IdacError::InvalidInput("chi-square needs at least two cells".into()));
    }
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| IdacError::InvalidInput(e.to_string()))?;
    Ok(dist.sf(stat))
}
