//! Small summary statistics used by metrics and checks.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Binomial standard error of a frequency estimated from `n` draws.
pub fn proportion_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Least-squares fit `y ≈ intercept + slope x` with a two-sided t-test of `slope = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeTest {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub p_value: f64,
}

pub fn slope_test(xs: &[f64], ys: &[f64]) -> Result<SlopeTest> {
    let n = xs.len();
    if n != ys.len() || n < 3 {
        return Err(Error::InvalidArgument(format!(
            "slope test needs >= 3 paired values, got {} and {}",
            n,
            ys.len()
        )));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope test needs varying x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let dof = (n - 2) as f64;
    let slope_se = (rss / dof / sxx).sqrt();
    let p_value = if slope_se == 0.0 {
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        2.0 * (1.0 - dist.cdf((slope / slope_se).abs()))
    };
    Ok(SlopeTest {
        slope,
        intercept,
        slope_se,
        p_value,
    })
}
