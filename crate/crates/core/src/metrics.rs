//! End-point error, D1 outlier rate and bad-σ rates over valid pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bad-σ thresholds in pixels.
pub const SIGMAS: [f64; 3] = [1.0, 2.0, 3.0];

fn check(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<usize> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Invalid("metric over an empty mask".into()));
    }
    Ok(n)
}

fn valid<'a>(pred: &'a [f64], gt: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m).map(|((&p, &g), _)| (p, g))
}

/// D1 outlier test: error above both 3 px and 5 % of the true disparity.
pub fn is_d1_outlier(err: f64, gt: f64) -> bool {
    err > 3.0f64.max(0.05 * gt)
}

/// Mean absolute error over valid pixels.
pub fn epe(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let n = check(pred, gt, mask)?;
    Ok(valid(pred, gt, mask).map(|(p, g)| (p - g).abs()).sum::<f64>() / n as f64)
}

/// Percentage of valid pixels whose error strictly exceeds `sigma`.
pub fn bad_sigma(pred: &[f64], gt: &[f64], mask: &[bool], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("bad-sigma threshold must be positive, got {sigma}")));
    }
    let n = check(pred, gt, mask)?;
    let bad = valid(pred, gt, mask).filter(|(p, g)| (p - g).abs() > sigma).count();
    Ok(100.0 * bad as f64 / n as f64)
}

/// Percentage of valid pixels that are D1 outliers.
pub fn d1(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let n = check(pred, gt, mask)?;
    let bad = valid(pred, gt, mask).filter(|&(p, g)| is_d1_outlier((p - g).abs(), g)).count();
    Ok(100.0 * bad as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixels.
    pub epe: f64,
    /// Percent.
    pub d1: f64,
    /// Threshold (as written by `{}`) → percent.
    pub bad_sigma: BTreeMap<String, f64>,
    pub valid_pixels: usize,
}

impl EvalReport {
    /// One `key=value` per line: `epe`, `d1`, `bad_<σ>`, `valid_pixels`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "epe={}", self.epe).unwrap();
        writeln!(s, "d1={}", self.d1).unwrap();
        for (k, v) in &self.bad_sigma {
            writeln!(s, "bad_{k}={v}").unwrap();
        }
        writeln!(s, "valid_pixels={}", self.valid_pixels).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pools errors over many images so every valid pixel counts equally.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    sigmas: Vec<f64>,
    abs_err: f64,
    d1_bad: usize,
    sigma_bad: Vec<usize>,
    count: usize,
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self::new(&SIGMAS)
    }
}

impl EvalAccumulator {
    pub fn new(sigmas: &[f64]) -> Self {
        EvalAccumulator {
            sigmas: sigmas.to_vec(),
            abs_err: 0.0,
            d1_bad: 0,
            sigma_bad: vec![0; sigmas.len()],
            count: 0,
        }
    }

    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
        check(pred, gt, mask)?;
        for (p, g) in valid(pred, gt, mask) {
            let e = (p - g).abs();
            self.abs_err += e;
            self.d1_bad += is_d1_outlier(e, g) as usize;
            for (bad, &s) in self.sigma_bad.iter_mut().zip(&self.sigmas) {
                *bad += (e > s) as usize;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.abs_err += other.abs_err;
        self.d1_bad += other.d1_bad;
        for (a, b) in self.sigma_bad.iter_mut().zip(&other.sigma_bad) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(Error::Invalid("no valid pixels to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(EvalReport {
            epe: self.abs_err / n,
            d1: 100.0 * self.d1_bad as f64 / n,
            bad_sigma: self.sigmas.iter().zip(&self.sigma_bad).map(|(s, &b)| (format!("{s}"), 100.0 * b as f64 / n)).collect(),
            valid_pixels: self.count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures() {
        assert_eq!(epe(&[1.0, 2.0], &[1.0, 4.0], &[true, true]).unwrap(), 1.0);
        assert_eq!(bad_sigma(&[1.0, 3.0], &[0.0, 0.0], &[true, true], 2.0).unwrap(), 50.0);
        assert_eq!(bad_sigma(&[2.0], &[0.0], &[true], 2.0).unwrap(), 0.0);
        assert!(!is_d1_outlier(4.0, 100.0));
        assert!(is_d1_outlier(4.0, 10.0));
        assert!(epe(&[1.0], &[1.0], &[false]).is_err());
        assert!(bad_sigma(&[1.0], &[1.0], &[true], 0.0).is_err());
    }

    #[test]
    fn accumulator_pools_pixels() {
        let mut acc = EvalAccumulator::default();
        acc.add(&[0.0, 5.0], &[0.0, 0.0], &[true, true]).unwrap();
        acc.add(&[1.0], &[0.0], &[true]).unwrap();
        let r = acc.report().unwrap();
        assert_eq!(r.epe, 2.0);
        assert_eq!(r.valid_pixels, 3);
        assert!((r.d1 - 100.0 / 3.0).abs() < 1e-12);
        assert!(r.to_text().contains("bad_3="));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
