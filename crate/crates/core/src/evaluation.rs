//! Statistical comparison of hedging strategies and figure data.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::accounting::{Decomposition, PnLReport};
use crate::error::{HedgeError, Result};
use crate::market_sim::MarketPaths;
use crate::risk::{cvar, summary, RiskSpec};
use crate::rng::stream_rng;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(HedgeError::dim(format!(
            "{what}: lengths {a} and {b} differ"
        )));
    }
    Ok(())
}

/// Path indices sorted by ascending `key`, ties by index.
fn order_by(key: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..key.len()).collect();
    idx.sort_by(|&i, &j| key[i].total_cmp(&key[j]).then(i.cmp(&j)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuintileRow {
    pub label: String,
    pub n_paths: usize,
    pub win_rate: f64,
    pub mean_advantage: f64,
    pub avg_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuintileTable {
    pub quintiles: Vec<QuintileRow>,
    pub overall: QuintileRow,
}

impl QuintileTable {
    pub fn win_rates(&self) -> Vec<f64> {
        self.quintiles.iter().map(|q| q.win_rate).collect()
    }

    /// Number of adjacent pairs where the win rate increases from `Qk` to `Qk+1`.
    pub fn inversions(&self) -> usize {
        self.win_rates().windows(2).filter(|w| w[1] > w[0]).count()
    }
}

fn group_row(
    label: String,
    idx: &[usize],
    pnl_a: &[f64],
    pnl_b: &[f64],
    psi_bar: &[f64],
) -> QuintileRow {
    let n = idx.len() as f64;
    let wins = idx.iter().filter(|&&i| pnl_a[i] > pnl_b[i]).count();
    QuintileRow {
        label,
        n_paths: idx.len(),
        win_rate: wins as f64 / n,
        mean_advantage: idx.iter().map(|&i| pnl_a[i] - pnl_b[i]).sum::<f64>() / n,
        avg_uncertainty: idx.iter().map(|&i| psi_bar[i]).sum::<f64>() / n,
    }
}

/// Win rate of A over B by quintile of `psi_bar` (Q1 most confident).
pub fn quintile_analysis(pnl_a: &[f64], pnl_b: &[f64], psi_bar: &[f64]) -> Result<QuintileTable> {
    same_len(pnl_a.len(), pnl_b.len(), "quintile P&L vectors")?;
    same_len(pnl_a.len(), psi_bar.len(), "quintile uncertainty")?;
    let n = pnl_a.len();
    if n < 5 {
        return Err(HedgeError::InsufficientData(format!(
            "quintiles need at least 5 paths, got {n}"
        )));
    }
    let order = order_by(psi_bar);
    let quintiles = (0..5)
        .map(|q| {
            let group = &order[q * n / 5..(q + 1) * n / 5];
            group_row(format!("Q{}", q + 1), group, pnl_a, pnl_b, psi_bar)
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    Ok(QuintileTable {
        quintiles,
        overall: group_row("Overall".into(), &all, pnl_a, pnl_b, psi_bar),
    })
}

/// `(mean psi_bar, win rate)` over every window of `window` consecutive paths
/// in uncertainty order.
pub fn rolling_winrate(
    pnl_a: &[f64],
    pnl_b: &[f64],
    psi_bar: &[f64],
    window: usize,
) -> Result<Vec<(f64, f64)>> {
    same_len(pnl_a.len(), pnl_b.len(), "win-rate P&L vectors")?;
    same_len(pnl_a.len(), psi_bar.len(), "win-rate uncertainty")?;
    if window == 0 {
        return Err(HedgeError::param("rolling window must be >= 1"));
    }
    if window > pnl_a.len() {
        return Err(HedgeError::param(format!(
            "rolling window {window} exceeds {} paths",
            pnl_a.len()
        )));
    }
    let order = order_by(psi_bar);
    let mut wins = vec![0usize; order.len() + 1];
    let mut psi = vec![0.0f64; order.len() + 1];
    for (k, &i) in order.iter().enumerate() {
        wins[k + 1] = wins[k] + usize::from(pnl_a[i] > pnl_b[i]);
        psi[k + 1] = psi[k] + psi_bar[i];
    }
    let w = window as f64;
    Ok((0..=order.len() - window)
        .map(|s| {
            (
                (psi[s + window] - psi[s]) / w,
                (wins[s + window] - wins[s]) as f64 / w,
            )
        })
        .collect())
}

/// Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x.len(), y.len(), "correlation inputs")?;
    if x.len() < 2 {
        return Err(HedgeError::InsufficientData(
            "correlation needs at least 2 points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(HedgeError::Undefined(
            "correlation of a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UncertaintyCorrelations {
    /// Against `S_T/K`.
    pub final_moneyness: f64,
    /// Against the time mean of `√v_t`.
    pub average_volatility: f64,
}

pub fn terminal_moneyness(paths: &MarketPaths, strike: f64) -> Vec<f64> {
    paths.terminal_spot().iter().map(|s| s / strike).collect()
}

/// Time mean of `√v_t` over the grid, per path.
pub fn average_path_volatility(paths: &MarketPaths) -> Vec<f64> {
    paths
        .variance
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.sqrt()).sum::<f64>() / r.len() as f64)
        .collect()
}

pub fn uncertainty_correlations(
    psi_bar: &[f64],
    paths: &MarketPaths,
    strike: f64,
) -> Result<UncertaintyCorrelations> {
    same_len(psi_bar.len(), paths.n_paths(), "uncertainty vs paths")?;
    Ok(UncertaintyCorrelations {
        final_moneyness: pearson(psi_bar, &terminal_moneyness(paths, strike))?,
        average_volatility: pearson(psi_bar, &average_path_volatility(paths))?,
    })
}

/// Mean disagreement binned by moneyness `S_t/K` and time step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub moneyness_edges: Vec<f64>,
    /// Step boundaries; bin `j` covers steps `time_edges[j] .. time_edges[j+1]`.
    pub time_edges: Vec<usize>,
    /// `cells[i][j]` for moneyness bin `i` and time bin `j`; `None` when empty.
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl Heatmap {
    /// `(moneyness bin, time bin, value)` of the largest populated cell with at
    /// least `min_count` observations.
    pub fn argmax(&self, min_count: usize) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if let Some(v) = *c {
                    if self.counts[i][j] >= min_count && best.is_none_or(|b| v > b.2) {
                        best = Some((i, j, v));
                    }
                }
            }
        }
        best
    }

    pub fn moneyness_center(&self, i: usize) -> f64 {
        0.5 * (self.moneyness_edges[i] + self.moneyness_edges[i + 1])
    }
}

/// Heatmap over the observed moneyness range.
pub fn heatmap_data(
    psi: &Array2<f64>,
    paths: &MarketPaths,
    strike: f64,
    moneyness_bins: usize,
    time_bins: usize,
) -> Result<Heatmap> {
    let n = paths.n_steps();
    let m = paths.spot.slice(ndarray::s![.., ..n]);
    let lo = m.iter().fold(f64::INFINITY, |a, &b| a.min(b)) / strike;
    let hi = m.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / strike;
    heatmap_in_range(psi, paths, strike, moneyness_bins, time_bins, (lo, hi))
}

/// Heatmap over a fixed moneyness range; decisions outside it are dropped.
pub fn heatmap_in_range(
    psi: &Array2<f64>,
    paths: &MarketPaths,
    strike: f64,
    moneyness_bins: usize,
    time_bins: usize,
    range: (f64, f64),
) -> Result<Heatmap> {
    let n = paths.n_steps();
    if psi.dim() != (paths.n_paths(), n) {
        return Err(HedgeError::dim(
            "disagreement matrix does not match the paths",
        ));
    }
    if moneyness_bins < 2 || time_bins < 2 || time_bins > n {
        return Err(HedgeError::param(
            "heatmap needs >= 2 bins per axis and at most one time bin per step",
        ));
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(HedgeError::param("heatmap moneyness range is empty"));
    }
    let width = (hi - lo) / moneyness_bins as f64;
    let moneyness_edges: Vec<f64> = (0..=moneyness_bins)
        .map(|i| lo + width * i as f64)
        .collect();
    let time_edges: Vec<usize> = (0..=time_bins).map(|j| j * n / time_bins).collect();
    let mut sums = vec![vec![0.0; time_bins]; moneyness_bins];
    let mut counts = vec![vec![0usize; time_bins]; moneyness_bins];
    for j in 0..time_bins {
        for t in time_edges[j]..time_edges[j + 1] {
            for p in 0..paths.n_paths() {
                let x = paths.spot[[p, t]] / strike;
                if x < lo || x > hi {
                    continue;
                }
                let i = (((x - lo) / width) as usize).min(moneyness_bins - 1);
                sums[i][j] += psi[[p, t]];
                counts[i][j] += 1;
            }
        }
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(&v, &k)| (k > 0).then(|| v / k as f64))
                .collect()
        })
        .collect();
    Ok(Heatmap {
        moneyness_edges,
        time_edges,
        cells,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub mean: f64,
    pub std: f64,
    pub cvar: f64,
}

/// Mean, standard deviation and CVaR at `level` for every report.
pub fn strategy_comparison(reports: &[PnLReport], level: f64) -> Result<Vec<ComparisonRow>> {
    let first = reports
        .first()
        .ok_or(HedgeError::EmptyInput("strategy reports"))?;
    reports
        .iter()
        .map(|r| {
            same_len(r.n_paths(), first.n_paths(), "strategy reports")?;
            let pnl = r.pnl.as_slice().expect("contiguous");
            let (mean, std) = summary(pnl)?;
            Ok(ComparisonRow {
                strategy: r.strategy_label.clone(),
                mean,
                std,
                cvar: cvar(pnl, level)?,
            })
        })
        .collect()
}

/// Paired-bootstrap distribution of a metric difference, in P&L units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Difference `A − B` on the full sample, higher is better for A.
    pub point_diff: f64,
    /// Mean of the resampled differences.
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Share of resamples with a strictly positive difference.
    pub win_fraction: f64,
    pub resamples: usize,
}

impl BootstrapResult {
    pub fn mean_diff_bps(&self) -> f64 {
        self.mean_diff * 1e4
    }

    pub fn ci_bps(&self) -> (f64, f64) {
        (self.ci_low * 1e4, self.ci_high * 1e4)
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Resamples paths with replacement, scoring both strategies on the same draw.
pub fn paired_bootstrap(
    pnl_a: &[f64],
    pnl_b: &[f64],
    metric: &RiskSpec,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    same_len(pnl_a.len(), pnl_b.len(), "bootstrap P&L vectors")?;
    metric.validate()?;
    if resamples < 100 {
        return Err(HedgeError::param(format!(
            "bootstrap needs >= 100 resamples, got {resamples}"
        )));
    }
    let n = pnl_a.len();
    if n == 0 {
        return Err(HedgeError::EmptyInput("bootstrap P&L vectors"));
    }
    let point_diff = metric.score(pnl_a)? - metric.score(pnl_b)?;
    let diffs: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                a.push(pnl_a[i]);
                b.push(pnl_b[i]);
            }
            Ok(metric.score(&a)? - metric.score(&b)?)
        })
        .collect::<Result<_>>()?;
    let mean_diff = diffs.iter().sum::<f64>() / resamples as f64;
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let mut sorted = diffs;
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        point_diff,
        mean_diff,
        ci_low: quantile_sorted(&sorted, 0.025),
        ci_high: quantile_sorted(&sorted, 0.975),
        win_fraction: wins as f64 / resamples as f64,
        resamples,
    })
}

// ---- CSV emitters ----

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn f(x: f64) -> String {
    format!("{x:.10}")
}

pub fn write_quintiles_csv(table: &QuintileTable, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "quintile",
        "n_paths",
        "win_rate",
        "mean_advantage",
        "avg_uncertainty",
    ])?;
    for r in table
        .quintiles
        .iter()
        .chain(std::iter::once(&table.overall))
    {
        w.write_record([
            r.label.clone(),
            r.n_paths.to_string(),
            f(r.win_rate),
            f(r.mean_advantage),
            f(r.avg_uncertainty),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_winrate_csv(curve: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["window_start", "mean_psi_bar", "win_rate"])?;
    for (k, (psi, rate)) in curve.iter().enumerate() {
        w.write_record([k.to_string(), f(*psi), f(*rate)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_heatmap_csv(map: &Heatmap, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "moneyness_lo",
        "moneyness_hi",
        "step_lo",
        "step_hi",
        "count",
        "mean_psi",
    ])?;
    for (i, row) in map.cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            w.write_record([
                f(map.moneyness_edges[i]),
                f(map.moneyness_edges[i + 1]),
                map.time_edges[j].to_string(),
                map.time_edges[j + 1].to_string(),
                map.counts[i][j].to_string(),
                c.map(f).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["strategy", "mean_pnl", "std_pnl", "cvar_5"])?;
    for r in rows {
        w.write_record([r.strategy.clone(), f(r.mean), f(r.std), f(r.cvar)])?;
    }
    w.flush()?;
    Ok(())
}

/// CVaR per strategy with its paired-bootstrap interval against a reference.
pub fn write_cvar_bars_csv(
    rows: &[(String, f64, Option<BootstrapResult>)],
    path: &Path,
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "strategy",
        "cvar_5",
        "diff_vs_reference_bps",
        "ci_low_bps",
        "ci_high_bps",
    ])?;
    for (name, c, boot) in rows {
        let (d, lo, hi) = match boot {
            Some(b) => (f(b.point_diff * 1e4), f(b.ci_low * 1e4), f(b.ci_high * 1e4)),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([name.clone(), f(*c), d, lo, hi])?;
    }
    w.flush()?;
    Ok(())
}

/// A named paired comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapRow {
    pub comparison: String,
    pub metric: String,
    pub result: BootstrapResult,
}

pub fn write_bootstrap_csv(rows: &[BootstrapRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "comparison",
        "metric",
        "resamples",
        "point_diff_bps",
        "mean_diff_bps",
        "ci_low_bps",
        "ci_high_bps",
        "win_fraction",
        "significant",
    ])?;
    for r in rows {
        let b = &r.result;
        w.write_record([
            r.comparison.clone(),
            r.metric.clone(),
            b.resamples.to_string(),
            f(b.point_diff * 1e4),
            f(b.mean_diff_bps()),
            f(b.ci_low * 1e4),
            f(b.ci_high * 1e4),
            f(b.win_fraction),
            b.excludes_zero().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_decomposition_csv(d: &Decomposition, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "strategy",
        "hedge_gains",
        "transaction_costs",
        "payoff",
        "net_pnl",
        "avg_trade_size",
        "d_hedge_gains",
        "d_transaction_costs",
        "d_payoff",
        "d_net_pnl",
    ])?;
    for (r, diff) in d.rows.iter().zip(&d.differences) {
        w.write_record([
            r.strategy.clone(),
            f(r.hedge_gains),
            f(r.transaction_costs),
            f(r.payoff),
            f(r.net),
            f(r.avg_trade_size),
            f(diff.hedge_gains),
            f(diff.transaction_costs),
            f(diff.payoff),
            f(diff.net),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlations_csv(c: &UncertaintyCorrelations, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["driver", "correlation"])?;
    w.write_record(["final_moneyness".to_string(), f(c.final_moneyness)])?;
    w.write_record(["average_volatility".to_string(), f(c.average_volatility)])?;
    w.flush()?;
    Ok(())
}

/// `α` as a function of `ψ` for each fitted blend, over `psi_grid`.
pub fn write_blend_curves_csv(
    psi_grid: &Array1<f64>,
    curves: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["psi".to_string()];
    header.extend(curves.iter().map(|(n, _)| format!("alpha_{n}")));
    w.write_record(&header)?;
    for (k, psi) in psi_grid.iter().enumerate() {
        let mut rec = vec![f(*psi)];
        rec.extend(curves.iter().map(|(_, c)| f(c[k])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
