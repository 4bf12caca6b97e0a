//! Small statistics toolkit for the diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Pearson chi-square test of independence on a contingency table; returns
/// the p-value. Rows or columns with zero total are dropped.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<f64> {
    let rows: Vec<&Vec<u64>> = table.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
    let ncol = rows.first().map_or(0, |r| r.len());
    let col_tot: Vec<u64> = (0..ncol).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let keep: Vec<usize> = (0..ncol).filter(|&j| col_tot[j] > 0).collect();
    if rows.len() < 2 || keep.len() < 2 {
        return Err(Error::DegenerateSample("contingency table needs two non-empty rows and columns".into()));
    }
    let total: f64 = col_tot.iter().sum::<u64>() as f64;
    let mut stat = 0.0;
    for r in &rows {
        let rt: f64 = r.iter().sum::<u64>() as f64;
        for &j in &keep {
            let expected = rt * col_tot[j] as f64 / total;
            stat += (r[j] as f64 - expected).powi(2) / expected;
        }
    }
    let dof = ((rows.len() - 1) * (keep.len() - 1)) as f64;
    let dist = ChiSquared::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(1.0 - dist.cdf(stat))
}

/// Ordinary least squares line with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DegenerateSample("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateSample("all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit { slope, intercept: my - slope * mx, r_squared, points: xs.len() })
}

/// Exponential tail fit: least squares of `log P[X > n]` against `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Fitted decay rate `-slope`.
    pub rate: f64,
    /// `exp(intercept)`.
    pub prefactor: f64,
    pub fit: LineFit,
}

/// Default minimum number of samples strictly above a size for that size to
/// enter the fit.
pub const TAIL_MIN_COUNT: usize = 5;

pub fn tail_fit(sizes: &[u64], min_count: usize) -> Result<TailFit> {
    if sizes.len() < 100 {
        return Err(Error::DegenerateSample(format!("{} samples, need at least 100", sizes.len())));
    }
    let mut xs = sizes.to_vec();
    xs.sort_unstable();
    if xs[0] == xs[xs.len() - 1] {
        return Err(Error::DegenerateSample("all sizes equal".into()));
    }
    let n = xs.len();
    let (mut px, mut py) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < n {
        let v = xs[i];
        while i < n && xs[i] == v {
            i += 1;
        }
        let above = n - i;
        if above >= min_count.max(1) {
            px.push(v as f64);
            py.push((above as f64 / n as f64).ln());
        }
    }
    let fit = linear_fit(&px, &py)?;
    Ok(TailFit { rate: -fit.slope, prefactor: fit.intercept.exp(), fit })
}
