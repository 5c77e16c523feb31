//! Terminal P&L with proportional transaction costs.
//!
//! Positions `δ₀ … δ_{n-1}` are held over `[t, t+1]`. The book starts flat
//! (`δ₋₁ = 0`) and is unwound at expiry (`δ_n = 0`), so trades are
//! `Δδ_t = δ_t − δ_{t−1}` for `t = 0 … n` and costs `Σ c S_t |Δδ_t|`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{HedgeError, Result};
use crate::market_sim::MarketPaths;

/// Per-path, per-step hedge ratios produced by a strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgeSchedule {
    /// `[n_paths × n_steps]`
    pub delta: Array2<f64>,
    pub strategy_label: String,
}

impl HedgeSchedule {
    pub fn new(delta: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        if let Some(bad) = delta.iter().position(|x| !x.is_finite()) {
            return Err(HedgeError::Divergence(format!(
                "non-finite hedge ratio at flat index {bad}"
            )));
        }
        Ok(HedgeSchedule {
            delta,
            strategy_label: label.into(),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.delta.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.delta.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> HedgeSchedule {
        HedgeSchedule {
            delta: self.delta.select(Axis(0), indices),
            strategy_label: self.strategy_label.clone(),
        }
    }

    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.strategy_label = label.into();
        self
    }

    pub fn check_against(&self, paths: &MarketPaths) -> Result<()> {
        if self.n_paths() != paths.n_paths() || self.n_steps() != paths.n_steps() {
            return Err(HedgeError::dim(format!(
                "schedule `{}` is {}x{}, paths are {}x{}",
                self.strategy_label,
                self.n_paths(),
                self.n_steps(),
                paths.n_paths(),
                paths.n_steps()
            )));
        }
        Ok(())
    }
}

/// Proportional transaction cost rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CostSpec {
    pub cost_rate: f64,
}

impl CostSpec {
    pub fn new(cost_rate: f64) -> Result<Self> {
        if !(cost_rate >= 0.0 && cost_rate.is_finite()) {
            return Err(HedgeError::param(format!(
                "cost rate must be >= 0, got {cost_rate}"
            )));
        }
        Ok(CostSpec { cost_rate })
    }

    pub fn frictionless() -> Self {
        CostSpec { cost_rate: 0.0 }
    }
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec { cost_rate: 5e-4 }
    }
}

/// Terminal P&L per path with its components. Costs are positive magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct PnLReport {
    pub strategy_label: String,
    pub pnl: Array1<f64>,
    pub hedge_gains: Array1<f64>,
    pub transaction_costs: Array1<f64>,
    pub payoff: Array1<f64>,
    /// `|Δδ_t|` for `t = 0 … n`, `[n_paths × (n_steps+1)]`
    pub trades: Array2<f64>,
}

impl PnLReport {
    pub fn n_paths(&self) -> usize {
        self.pnl.len()
    }

    pub fn select(&self, indices: &[usize]) -> PnLReport {
        PnLReport {
            strategy_label: self.strategy_label.clone(),
            pnl: self.pnl.select(Axis(0), indices),
            hedge_gains: self.hedge_gains.select(Axis(0), indices),
            transaction_costs: self.transaction_costs.select(Axis(0), indices),
            payoff: self.payoff.select(Axis(0), indices),
            trades: self.trades.select(Axis(0), indices),
        }
    }

    /// Writes `path_id,pnl,gains,costs,payoff`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path_id", "pnl", "gains", "costs", "payoff"])?;
        for p in 0..self.n_paths() {
            w.write_record(&[
                p.to_string(),
                format!("{:.12e}", self.pnl[p]),
                format!("{:.12e}", self.hedge_gains[p]),
                format!("{:.12e}", self.transaction_costs[p]),
                format!("{:.12e}", self.payoff[p]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_strike(strike: f64) -> Result<()> {
    if !(strike > 0.0 && strike.is_finite()) {
        return Err(HedgeError::param(format!(
            "strike must be positive, got {strike}"
        )));
    }
    Ok(())
}

/// Hedged P&L of a short call struck at `strike`.
pub fn compute_pnl(
    paths: &MarketPaths,
    hedges: &HedgeSchedule,
    cost: &CostSpec,
    strike: f64,
) -> Result<PnLReport> {
    hedges.check_against(paths)?;
    check_strike(strike)?;
    let n = paths.n_steps();
    let n_paths = paths.n_paths();
    let c = cost.cost_rate;

    let mut gains = Array1::zeros(n_paths);
    let mut costs = Array1::zeros(n_paths);
    let mut payoff = Array1::zeros(n_paths);
    let mut trades = Array2::zeros((n_paths, n + 1));
    for p in 0..n_paths {
        let s = paths.spot.row(p);
        let d = hedges.delta.row(p);
        let mut g = 0.0;
        let mut tc = 0.0;
        let mut prev = 0.0;
        for t in 0..n {
            g += d[t] * (s[t + 1] - s[t]);
            let dd = (d[t] - prev).abs();
            trades[[p, t]] = dd;
            tc += c * s[t] * dd;
            prev = d[t];
        }
        let unwind = prev.abs();
        trades[[p, n]] = unwind;
        tc += c * s[n] * unwind;
        gains[p] = g;
        costs[p] = tc;
        payoff[p] = (s[n] - strike).max(0.0);
    }
    let pnl = &gains - &costs - &payoff;
    Ok(PnLReport {
        strategy_label: hedges.strategy_label.clone(),
        pnl,
        hedge_gains: gains,
        transaction_costs: costs,
        payoff,
        trades,
    })
}

/// Terminal P&L only, from a borrowed position matrix (no report allocation).
pub(crate) fn pnl_only(
    spot: ArrayView2<f64>,
    delta: ArrayView2<f64>,
    c: f64,
    strike: f64,
) -> Array1<f64> {
    let n = delta.ncols();
    Array1::from_iter((0..delta.nrows()).map(|p| {
        let s = spot.row(p);
        let d = delta.row(p);
        let mut total = 0.0;
        let mut prev = 0.0;
        for t in 0..n {
            total += d[t] * (s[t + 1] - s[t]) - c * s[t] * (d[t] - prev).abs();
            prev = d[t];
        }
        total - c * s[n] * prev.abs() - (s[n] - strike).max(0.0)
    }))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `∂pnl_p / ∂δ_{p,t}` for every position, with `d|x|/dx = 0` at zero.
pub fn pnl_position_gradient(spot: &Array2<f64>, delta: &Array2<f64>, c: f64) -> Array2<f64> {
    let n = delta.ncols();
    let mut grad = Array2::zeros(delta.dim());
    for p in 0..delta.nrows() {
        let s = spot.row(p);
        let d = delta.row(p);
        for t in 0..n {
            let prev = if t == 0 { 0.0 } else { d[t - 1] };
            let next = if t + 1 == n { 0.0 } else { d[t + 1] };
            grad[[p, t]] =
                (s[t + 1] - s[t]) - c * s[t] * sign(d[t] - prev) + c * s[t + 1] * sign(next - d[t]);
        }
    }
    grad
}

/// Mean `|Δδ_t|` over paths and trade dates `t = 0 … n`.
pub fn average_trade_size(report: &PnLReport) -> f64 {
    report.trades.mean().unwrap_or(0.0)
}

/// Mean P&L components of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentMeans {
    pub strategy: String,
    pub hedge_gains: f64,
    pub transaction_costs: f64,
    pub payoff: f64,
    pub net: f64,
    pub avg_trade_size: f64,
}

/// Component means per strategy and differences against a baseline row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub rows: Vec<ComponentMeans>,
    pub baseline: usize,
    /// `rows[i] − rows[baseline]`, component by component.
    pub differences: Vec<ComponentMeans>,
}

/// Decomposes mean P&L; `baseline` indexes the reference strategy.
pub fn decompose_pnl(reports: &[PnLReport], baseline: usize) -> Result<Decomposition> {
    let first = reports
        .first()
        .ok_or(HedgeError::EmptyInput("no reports"))?;
    if baseline >= reports.len() {
        return Err(HedgeError::param("baseline index out of range"));
    }
    if reports.iter().any(|r| r.n_paths() != first.n_paths()) {
        return Err(HedgeError::dim("reports cover different path counts"));
    }
    let mean = |a: &Array1<f64>| a.mean().unwrap_or(0.0);
    let rows: Vec<ComponentMeans> = reports
        .iter()
        .map(|r| ComponentMeans {
            strategy: r.strategy_label.clone(),
            hedge_gains: mean(&r.hedge_gains),
            transaction_costs: mean(&r.transaction_costs),
            payoff: mean(&r.payoff),
            net: mean(&r.pnl),
            avg_trade_size: average_trade_size(r),
        })
        .collect();
    let b = rows[baseline].clone();
    let differences = rows
        .iter()
        .map(|r| ComponentMeans {
            strategy: r.strategy.clone(),
            hedge_gains: r.hedge_gains - b.hedge_gains,
            transaction_costs: r.transaction_costs - b.transaction_costs,
            payoff: r.payoff - b.payoff,
            net: r.net - b.net,
            avg_trade_size: r.avg_trade_size - b.avg_trade_size,
        })
        .collect();
    Ok(Decomposition {
        rows,
        baseline,
        differences,
    })
}
