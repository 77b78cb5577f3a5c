//! Ordinary least squares via Householder QR, with classical standard
//! errors and t-based confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::grid::ExperimentRecord;
use super::AnalysisError;
use crate::augment::AugmentArm;
use crate::nn::Architecture;
use crate::train::LabelSource;

/// Raw least-squares solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Upper-triangular `R` of `X = QR`, row-major `p × p`.
    pub r: Vec<f64>,
}

/// Solves `min ||X b - y||` for row-major `x` (`n × p`).
pub fn least_squares(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<LeastSquares, AnalysisError> {
    assert_eq!(x.len(), n * p, "design matrix size");
    assert_eq!(y.len(), n, "response length");
    if n < p {
        return Err(AnalysisError::RankDeficient { column: n });
    }
    // column-major copy for Householder sweeps
    let mut a: Vec<f64> = (0..p).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| x[i * p + j]).collect();
    let mut qty = y.to_vec();
    let col_norms: Vec<f64> = (0..p).map(|j| a[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let scale = col_norms.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for k in 0..p {
        let norm = a[k * n + k..(k + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale {
            return Err(AnalysisError::RankDeficient { column: k });
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k * n + k..(k + 1) * n].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in k..p {
                let col = &mut a[j * n + k..(j + 1) * n];
                let d: f64 = col.iter().zip(&v).map(|(c, t)| c * t).sum::<f64>() * 2.0 / vnorm2;
                col.iter_mut().zip(&v).for_each(|(c, t)| *c -= d * t);
            }
            let d: f64 = qty[k..].iter().zip(&v).map(|(c, t)| c * t).sum::<f64>() * 2.0 / vnorm2;
            qty[k..].iter_mut().zip(&v).for_each(|(c, t)| *c -= d * t);
        }
    }
    let r: Vec<f64> = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| if j >= i { a[j * n + i] } else { 0.0 }).collect();
    let mut b = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| r[i * p + j] * b[j]).sum();
        b[i] = (qty[i] - s) / r[i * p + i];
    }
    let residuals = (0..n).map(|i| y[i] - (0..p).map(|j| x[i * p + j] * b[j]).sum::<f64>()).collect();
    Ok(LeastSquares { coefficients: b, residuals, r })
}

/// `(RᵀR)⁻¹ = R⁻¹ R⁻ᵀ`, the unscaled coefficient covariance.
fn unscaled_covariance(r: &[f64], p: usize) -> Vec<f64> {
    let mut rinv = vec![0.0; p * p];
    for col in 0..p {
        for i in (0..=col).rev() {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (i + 1..=col).map(|j| r[i * p + j] * rinv[j * p + col]).sum();
            rinv[i * p + col] = (rhs - s) / r[i * p + i];
        }
    }
    let mut cov = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            cov[i * p + j] = (i.max(j)..p).map(|k| rinv[i * p + k] * rinv[j * p + k]).sum();
        }
    }
    cov
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    /// `"pooled"` or an architecture name.
    pub scope: String,
    pub coefficients: Vec<Coefficient>,
    pub residual_variance: f64,
    pub df: usize,
    pub n: usize,
    pub r_squared: f64,
    pub reference: Vec<String>,
}

impl RegressionFit {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Fits `y` on named columns (the first is usually the intercept).
pub fn fit(x: &[f64], n: usize, names: &[String], y: &[f64], confidence: f64) -> Result<RegressionFit, AnalysisError> {
    let p = names.len();
    if n <= p {
        return Err(AnalysisError::InsufficientData(format!("{n} observations for {p} coefficients")));
    }
    let ls = least_squares(x, n, p, y)?;
    let df = n - p;
    let rss: f64 = ls.residuals.iter().map(|r| r * r).sum();
    let sigma2 = rss / df as f64;
    let cov = unscaled_covariance(&ls.r, p);
    let t = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let q = t.inverse_cdf(0.5 + confidence / 2.0);
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let estimate = ls.coefficients[j];
            let std_error = (sigma2 * cov[j * p + j]).sqrt();
            Coefficient {
                name: name.clone(),
                estimate,
                std_error,
                t_value: estimate / std_error,
                ci_low: estimate - q * std_error,
                ci_high: estimate + q * std_error,
            }
        })
        .collect();
    Ok(RegressionFit {
        scope: String::new(),
        coefficients,
        residual_variance: sigma2,
        df,
        n,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { 1.0 },
        reference: Vec::new(),
    })
}

pub const INTERCEPT: &str = "intercept";
pub const GOLD: &str = "gold_labels";
pub const LONG_TRAINING: &str = "long_training";

pub fn augment_term(arm: AugmentArm) -> String {
    format!("augment_{arm}")
}

pub fn arch_term(arch: Architecture) -> String {
    format!("arch_{arch}")
}

/// Dummy-coded design for accuracy on the hyperparameters. Reference
/// levels: interviewer labels, no augmentation, the shorter epoch arm and
/// (when controlled for) the first architecture present.
pub fn design(records: &[ExperimentRecord], include_arch: bool) -> Result<(Vec<f64>, Vec<String>, Vec<f64>, Vec<String>), AnalysisError> {
    let mut epochs: Vec<usize> = records.iter().map(|r| r.epochs).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let (short, long) = match epochs[..] {
        [a, b] => (a, b),
        _ => return Err(AnalysisError::InsufficientData(format!("expected two epoch arms, found {epochs:?}"))),
    };
    let mut archs: Vec<Architecture> = records.iter().map(|r| r.arch).collect();
    archs.sort_unstable();
    archs.dedup();
    let arms = [AugmentArm::Transform, AugmentArm::TransformResize];
    let mut names = vec![INTERCEPT.to_string(), GOLD.to_string(), LONG_TRAINING.to_string()];
    names.extend(arms.iter().map(|&a| augment_term(a)));
    if include_arch {
        names.extend(archs[1..].iter().map(|&a| arch_term(a)));
    }
    let levels_ok = |pred: &dyn Fn(&ExperimentRecord) -> bool| {
        let k = records.iter().filter(|r| pred(r)).count();
        k >= 2 && records.len() - k >= 2
    };
    let mut checks: Vec<(String, Box<dyn Fn(&ExperimentRecord) -> bool>)> =
        vec![(GOLD.into(), Box::new(|r| r.label_source == LabelSource::Gold)), (LONG_TRAINING.into(), Box::new(move |r| r.epochs == long))];
    for arm in AugmentArm::ALL {
        checks.push((augment_term(arm), Box::new(move |r| r.augment == arm)));
    }
    if include_arch {
        for &a in &archs {
            checks.push((arch_term(a), Box::new(move |r| r.arch == a)));
        }
    }
    for (name, pred) in &checks {
        if !levels_ok(pred.as_ref()) {
            return Err(AnalysisError::InsufficientData(format!("fewer than two observations on one side of {name}")));
        }
    }
    let dummy = |b: bool| if b { 1.0 } else { 0.0 };
    let mut x = Vec::with_capacity(records.len() * names.len());
    for r in records {
        x.push(1.0);
        x.push(dummy(r.label_source == LabelSource::Gold));
        x.push(dummy(r.epochs == long));
        x.extend(arms.iter().map(|&a| dummy(r.augment == a)));
        if include_arch {
            x.extend(archs[1..].iter().map(|&a| dummy(r.arch == a)));
        }
    }
    let y = records.iter().map(|r| r.val_accuracy).collect();
    let mut reference =
        vec!["label source: interviewer".to_string(), "augmentation: none".to_string(), format!("training: {short} epochs")];
    if include_arch {
        reference.push(format!("architecture: {}", archs[0]));
    }
    Ok((x, names, y, reference))
}

/// Pooled fit, controlling for architecture when several are present.
pub fn ols_fit(records: &[ExperimentRecord], include_arch: bool) -> Result<RegressionFit, AnalysisError> {
    let (x, names, y, reference) = design(records, include_arch)?;
    let mut f = fit(&x, records.len(), &names, &y, 0.95)?;
    f.scope = "pooled".into();
    f.reference = reference;
    Ok(f)
}

/// One fit per architecture plus the pooled fit with architecture dummies.
pub fn ols_fits(records: &[ExperimentRecord]) -> Result<Vec<RegressionFit>, AnalysisError> {
    let mut archs: Vec<Architecture> = records.iter().map(|r| r.arch).collect();
    archs.sort_unstable();
    archs.dedup();
    let mut out = Vec::new();
    for arch in &archs {
        let subset: Vec<ExperimentRecord> = records.iter().filter(|r| r.arch == *arch).cloned().collect();
        let mut f = ols_fit(&subset, false)?;
        f.scope = arch.to_string();
        out.push(f);
    }
    out.push(ols_fit(records, archs.len() > 1)?);
    Ok(out)
}

/// Plain-text coefficient table.
pub fn format_fit(f: &RegressionFit) -> String {
    let mut s = format!("OLS fit ({}) n={} df={} R²={:.4}\n", f.scope, f.n, f.df, f.r_squared);
    s += &format!("reference categories: {}\n", f.reference.join(", "));
    s += &format!("{:<26}{:>10}{:>10}{:>10}{:>22}\n", "term", "estimate", "se", "t", "95% CI");
    for c in &f.coefficients {
        s += &format!(
            "{:<26}{:>10.4}{:>10.4}{:>10.2}{:>22}\n",
            c.name,
            c.estimate,
            c.std_error,
            c.t_value,
            format!("[{:.4}, {:.4}]", c.ci_low, c.ci_high)
        );
    }
    s
}
