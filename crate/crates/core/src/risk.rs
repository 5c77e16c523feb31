//! Risk measures over P&L samples.

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// A risk or summary statistic of a P&L distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "measure", rename_all = "snake_case")]
pub enum RiskSpec {
    Entropic { risk_aversion: f64 },
    Cvar { level: f64 },
    Mean,
    Std,
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskSpec::Entropic { risk_aversion } if !(risk_aversion > 0.0) => {
                Err(HedgeError::param("entropic risk aversion must be positive"))
            }
            RiskSpec::Cvar { level } if !(level > 0.0 && level <= 1.0) => Err(HedgeError::param(
                format!("CVaR level {level} outside (0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    /// Metric value oriented so that higher is better.
    pub fn score(&self, pnl: &[f64]) -> Result<f64> {
        match *self {
            RiskSpec::Entropic { risk_aversion } => Ok(-entropic_risk(pnl, risk_aversion)?),
            RiskSpec::Cvar { level } => cvar(pnl, level),
            RiskSpec::Mean => mean(pnl),
            RiskSpec::Std => Ok(-summary(pnl)?.1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RiskSpec::Entropic { .. } => "entropic",
            RiskSpec::Cvar { .. } => "cvar",
            RiskSpec::Mean => "mean",
            RiskSpec::Std => "std",
        }
    }
}

fn nonempty(pnl: &[f64]) -> Result<()> {
    if pnl.is_empty() {
        return Err(HedgeError::EmptyInput("P&L vector"));
    }
    Ok(())
}

/// `(1/a) log mean exp(−a·pnl)`, evaluated with a max shift. Lower is better.
pub fn entropic_risk(pnl: &[f64], a: f64) -> Result<f64> {
    nonempty(pnl)?;
    if !(a > 0.0) {
        return Err(HedgeError::param("risk aversion must be positive"));
    }
    let m = pnl.iter().map(|x| -a * x).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = pnl.iter().map(|x| (-a * x - m).exp()).sum();
    Ok((m + (s / pnl.len() as f64).ln()) / a)
}

/// Number of tail observations for a CVaR at `level` over `n` samples.
pub fn tail_count(n: usize, level: f64) -> usize {
    let k = ((level * n as f64) - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Mean of the `ceil(level·n)` smallest values. Higher is better.
pub fn cvar(pnl: &[f64], level: f64) -> Result<f64> {
    nonempty(pnl)?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(HedgeError::param(format!(
            "CVaR level {level} outside (0, 1]"
        )));
    }
    let k = tail_count(pnl.len(), level);
    let mut sorted = pnl.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Indices of the `ceil(level·n)` smallest values (ties broken by index).
pub fn tail_indices(pnl: &[f64], level: f64) -> Vec<usize> {
    let k = tail_count(pnl.len(), level);
    let mut idx: Vec<usize> = (0..pnl.len()).collect();
    idx.sort_by(|&i, &j| pnl[i].total_cmp(&pnl[j]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

pub fn mean(pnl: &[f64]) -> Result<f64> {
    nonempty(pnl)?;
    Ok(pnl.iter().sum::<f64>() / pnl.len() as f64)
}

/// Mean and sample standard deviation (n−1 denominator).
pub fn summary(pnl: &[f64]) -> Result<(f64, f64)> {
    if pnl.len() < 2 {
        return Err(HedgeError::InsufficientData(format!(
            "standard deviation needs at least 2 samples, got {}",
            pnl.len()
        )));
    }
    let m = mean(pnl)?;
    let ss: f64 = pnl.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((m, (ss / (pnl.len() - 1) as f64).sqrt()))
}
