//! Uncertainty-weighted blend of the ensemble mean hedge with a classical delta.
//!
//! `δ_blend = (1 − α)·δ̄ + α·δ_BS` with `α = sigmoid(β₀ + β₁ψ [+ β₂m + β₃τ̂])`,
//! where `m = S/K` and `τ̂ = τ/T`. The coefficients are fitted by Adam on a
//! training batch with all hedges and disagreements held fixed.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accounting::{pnl_only, CostSpec, HedgeSchedule};
use crate::ensemble::EnsembleOutput;
use crate::error::{HedgeError, Result};
use crate::market_sim::MarketPaths;
use crate::optim::{Adam, AdamConfig};
use crate::risk::{entropic_risk, tail_indices};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendParams {
    pub beta0: f64,
    pub beta1: f64,
    /// Moneyness coefficient of the extended form.
    pub beta2: Option<f64>,
    /// Normalised-time coefficient of the extended form.
    pub beta3: Option<f64>,
}

impl BlendParams {
    pub fn new(beta0: f64, beta1: f64) -> Self {
        BlendParams {
            beta0,
            beta1,
            beta2: None,
            beta3: None,
        }
    }

    pub fn extended(beta0: f64, beta1: f64, beta2: f64, beta3: f64) -> Self {
        BlendParams {
            beta0,
            beta1,
            beta2: Some(beta2),
            beta3: Some(beta3),
        }
    }

    /// The 50/50 starting point.
    pub fn zero(extended: bool) -> Self {
        if extended {
            BlendParams::extended(0.0, 0.0, 0.0, 0.0)
        } else {
            BlendParams::new(0.0, 0.0)
        }
    }

    pub fn is_extended(&self) -> bool {
        self.beta2.is_some() || self.beta3.is_some()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.beta0, self.beta1];
        if self.is_extended() {
            v.push(self.beta2.unwrap_or(0.0));
            v.push(self.beta3.unwrap_or(0.0));
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        match *v {
            [b0, b1] => BlendParams::new(b0, b1),
            [b0, b1, b2, b3] => BlendParams::extended(b0, b1, b2, b3),
            _ => panic!("blend parameters have 2 or 4 entries, got {}", v.len()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.to_vec().iter().any(|b| !b.is_finite()) {
            return Err(HedgeError::param("blend coefficients must be finite"));
        }
        Ok(())
    }
}

/// Objective of the blend fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlendObjective {
    Entropic { risk_aversion: f64 },
    Cvar { level: f64 },
}

impl BlendObjective {
    pub fn entropic() -> Self {
        BlendObjective::Entropic { risk_aversion: 1.0 }
    }

    pub fn cvar() -> Self {
        BlendObjective::Cvar { level: 0.05 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlendObjective::Entropic { .. } => "entropic",
            BlendObjective::Cvar { .. } => "cvar",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BlendObjective::Entropic { risk_aversion } if !(risk_aversion > 0.0) => {
                Err(HedgeError::param("entropic risk aversion must be positive"))
            }
            BlendObjective::Cvar { level } if !(level > 0.0 && level <= 1.0) => Err(
                HedgeError::param(format!("CVaR level {level} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Blending weight for one decision. `features` is `(S/K, τ/T)`.
pub fn alpha_weight(psi: f64, features: Option<(f64, f64)>, params: &BlendParams) -> f64 {
    let mut z = params.beta0 + params.beta1 * psi;
    if let Some((m, tau)) = features {
        z += params.beta2.unwrap_or(0.0) * m + params.beta3.unwrap_or(0.0) * tau;
    }
    sigmoid(z)
}

/// Moneyness `S_t/K` and normalised time to expiry at each decision date.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendFeatures {
    pub moneyness: Array2<f64>,
    pub tau_norm: Vec<f64>,
}

impl BlendFeatures {
    pub fn from_paths(paths: &MarketPaths, strike: f64) -> Self {
        let n = paths.n_steps();
        let moneyness = paths.spot.slice(ndarray::s![.., ..n]).mapv(|s| s / strike);
        let tau_norm = (0..n)
            .map(|t| paths.grid.tau(t) / paths.grid.maturity)
            .collect();
        BlendFeatures {
            moneyness,
            tau_norm,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        BlendFeatures {
            moneyness: self.moneyness.select(ndarray::Axis(0), indices),
            tau_norm: self.tau_norm.clone(),
        }
    }
}

/// Weights `α` for every decision.
pub fn alpha_matrix(
    psi: &Array2<f64>,
    params: &BlendParams,
    features: Option<&BlendFeatures>,
) -> Result<Array2<f64>> {
    params.validate()?;
    if params.is_extended() {
        let f = features
            .ok_or_else(|| HedgeError::param("extended blend needs moneyness and time features"))?;
        if f.moneyness.dim() != psi.dim() {
            return Err(HedgeError::dim(
                "blend features do not match the disagreement matrix",
            ));
        }
        Ok(Array2::from_shape_fn(psi.dim(), |(p, t)| {
            alpha_weight(
                psi[[p, t]],
                Some((f.moneyness[[p, t]], f.tau_norm[t])),
                params,
            )
        }))
    } else {
        Ok(psi.mapv(|v| alpha_weight(v, None, params)))
    }
}

/// Pointwise blend of the ensemble mean and the classical hedge.
pub fn blend_schedules(
    ens_mean: &HedgeSchedule,
    bs: &HedgeSchedule,
    psi: &Array2<f64>,
    params: &BlendParams,
    features: Option<&BlendFeatures>,
) -> Result<HedgeSchedule> {
    if ens_mean.delta.dim() != bs.delta.dim() || psi.dim() != bs.delta.dim() {
        return Err(HedgeError::dim("blend inputs differ in shape"));
    }
    let alpha = alpha_matrix(psi, params, features)?;
    let mut out = Array2::zeros(psi.dim());
    Zip::from(&mut out)
        .and(&alpha)
        .and(&ens_mean.delta)
        .and(&bs.delta)
        .for_each(|o, &a, &e, &b| *o = (1.0 - a) * e + a * b);
    HedgeSchedule::new(out, "blend")
}

/// Fixed inputs of a blend fit.
pub struct BlendProblem<'a> {
    spot: ArrayView2<'a, f64>,
    ens: ArrayView2<'a, f64>,
    bs: ArrayView2<'a, f64>,
    psi: ArrayView2<'a, f64>,
    features: Option<BlendFeatures>,
    cost_rate: f64,
    strike: f64,
    objective: BlendObjective,
}

impl<'a> BlendProblem<'a> {
    pub fn new(
        paths: &'a MarketPaths,
        ens: &'a EnsembleOutput,
        bs: &'a HedgeSchedule,
        cost: &CostSpec,
        strike: f64,
        objective: BlendObjective,
        extended: bool,
    ) -> Result<Self> {
        objective.validate()?;
        bs.check_against(paths)?;
        ens.mean_hedge.check_against(paths)?;
        if ens.psi.dim() != bs.delta.dim() {
            return Err(HedgeError::dim(
                "disagreement matrix does not match the paths",
            ));
        }
        Ok(BlendProblem {
            spot: paths.spot.view(),
            ens: ens.mean_hedge.delta.view(),
            bs: bs.delta.view(),
            psi: ens.psi.view(),
            features: extended.then(|| BlendFeatures::from_paths(paths, strike)),
            cost_rate: cost.cost_rate,
            strike,
            objective,
        })
    }

    pub fn dimension(&self) -> usize {
        if self.features.is_some() {
            4
        } else {
            2
        }
    }

    fn inputs(&self, p: usize, t: usize) -> [f64; 4] {
        match &self.features {
            Some(f) => [1.0, self.psi[[p, t]], f.moneyness[[p, t]], f.tau_norm[t]],
            None => [1.0, self.psi[[p, t]], 0.0, 0.0],
        }
    }

    fn alpha(&self, beta: &[f64], p: usize, t: usize) -> f64 {
        let x = self.inputs(p, t);
        sigmoid(beta.iter().zip(x).map(|(b, xi)| b * xi).sum())
    }

    fn alphas(&self, beta: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn(self.psi.dim(), |(p, t)| self.alpha(beta, p, t))
    }

    fn blended(&self, alpha: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(alpha.dim());
        Zip::from(&mut out)
            .and(alpha)
            .and(self.ens)
            .and(self.bs)
            .for_each(|o, &a, &e, &b| *o = (1.0 - a) * e + a * b);
        out
    }

    fn pnl(&self, delta: &Array2<f64>) -> Array1<f64> {
        pnl_only(self.spot, delta.view(), self.cost_rate, self.strike)
    }

    /// Loss and `∂loss/∂pnl_i`.
    fn loss_and_weights(&self, pnl: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
        let x = pnl.as_slice().expect("contiguous");
        match self.objective {
            BlendObjective::Entropic { risk_aversion: a } => {
                let loss = entropic_risk(x, a)?;
                let m = x.iter().map(|v| -a * v).fold(f64::NEG_INFINITY, f64::max);
                let w = pnl.mapv(|v| (-a * v - m).exp());
                let total = w.sum();
                Ok((loss, w.mapv(|wi| -wi / total)))
            }
            BlendObjective::Cvar { level } => {
                let tail = tail_indices(x, level);
                let k = tail.len() as f64;
                let mut w = Array1::zeros(x.len());
                let mut sum = 0.0;
                for &i in &tail {
                    w[i] = -1.0 / k;
                    sum += x[i];
                }
                Ok((-sum / k, w))
            }
        }
    }

    /// Objective to minimise: entropic risk, or `−CVaR`.
    pub fn objective(&self, beta: &[f64]) -> Result<f64> {
        let pnl = self.pnl(&self.blended(&self.alphas(beta)));
        Ok(self.loss_and_weights(&pnl)?.0)
    }

    /// Objective and its gradient with respect to `β`, tail membership held fixed.
    pub fn objective_and_gradient(&self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let alpha = self.alphas(beta);
        let delta = self.blended(&alpha);
        let pnl = self.pnl(&delta);
        let (loss, w) = self.loss_and_weights(&pnl)?;
        let c = self.cost_rate;
        let n = delta.ncols();
        let mut grad = vec![0.0; beta.len()];
        for p in 0..delta.nrows() {
            if w[p] == 0.0 {
                continue;
            }
            let s = self.spot.row(p);
            let d = delta.row(p);
            for t in 0..n {
                let prev = if t == 0 { 0.0 } else { d[t - 1] };
                let next = if t + 1 == n { 0.0 } else { d[t + 1] };
                let dpnl = (s[t + 1] - s[t]) - c * s[t] * sign(d[t] - prev)
                    + c * s[t + 1] * sign(next - d[t]);
                let a = alpha[[p, t]];
                let chain = w[p] * dpnl * (self.bs[[p, t]] - self.ens[[p, t]]) * a * (1.0 - a);
                for (g, xi) in grad.iter_mut().zip(self.inputs(p, t)) {
                    *g += chain * xi;
                }
            }
        }
        Ok((loss, grad))
    }
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

/// Max relative error of the analytic blend gradient against central differences.
pub fn blend_gradient_check(problem: &BlendProblem, beta: &[f64], step: f64) -> Result<f64> {
    let (_, grad) = problem.objective_and_gradient(beta)?;
    let mut worst = 0.0f64;
    for k in 0..beta.len() {
        let mut up = beta.to_vec();
        up[k] += step;
        let mut dn = beta.to_vec();
        dn[k] -= step;
        let fd = (problem.objective(&up)? - problem.objective(&dn)?) / (2.0 * step);
        worst = worst.max(crate::neural_hedger::relative_error(grad[k], fd));
    }
    Ok(worst)
}

/// Optimiser settings of the blend fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendFitSettings {
    pub iterations: usize,
    pub step_size: f64,
}

impl Default for BlendFitSettings {
    fn default() -> Self {
        BlendFitSettings {
            iterations: 2000,
            step_size: 0.01,
        }
    }
}

/// Fitted coefficients with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendFit {
    pub params: BlendParams,
    pub objective: BlendObjective,
    pub settings: BlendFitSettings,
    /// Objective before each update.
    pub trajectory: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Mean, min and max of `α` over the training decisions.
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl BlendFit {
    pub fn best_objective(&self) -> f64 {
        self.trajectory
            .iter()
            .copied()
            .chain(std::iter::once(self.final_objective))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fits the blend from the 50/50 start with Adam (step 0.01, 2,000 iterations).
pub fn fit_blend(
    train_paths: &MarketPaths,
    ens: &EnsembleOutput,
    bs: &HedgeSchedule,
    cost: &CostSpec,
    strike: f64,
    objective: BlendObjective,
    extended: bool,
) -> Result<BlendFit> {
    fit_blend_with(
        train_paths,
        ens,
        bs,
        cost,
        strike,
        objective,
        extended,
        &BlendFitSettings::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn fit_blend_with(
    train_paths: &MarketPaths,
    ens: &EnsembleOutput,
    bs: &HedgeSchedule,
    cost: &CostSpec,
    strike: f64,
    objective: BlendObjective,
    extended: bool,
    settings: &BlendFitSettings,
) -> Result<BlendFit> {
    if settings.iterations == 0 || !(settings.step_size > 0.0) {
        return Err(HedgeError::param(
            "blend fit needs iterations >= 1 and a positive step",
        ));
    }
    let problem = BlendProblem::new(train_paths, ens, bs, cost, strike, objective, extended)?;
    let mut beta = vec![Array2::zeros((1, problem.dimension()))];
    let mut adam = Adam::new(
        AdamConfig {
            step_size: settings.step_size,
            ..AdamConfig::default()
        },
        [(1, problem.dimension())],
    );
    let mut trajectory = Vec::with_capacity(settings.iterations);
    for it in 0..settings.iterations {
        let b = beta[0].as_slice().expect("contiguous").to_vec();
        let (loss, grad) = problem.objective_and_gradient(&b)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(HedgeError::Divergence(format!(
                "blend fit iteration {it}: non-finite objective"
            )));
        }
        trajectory.push(loss);
        let g = Array2::from_shape_vec((1, grad.len()), grad).expect("shape");
        adam.step(&mut beta, std::slice::from_ref(&g));
    }
    let b = beta[0].as_slice().expect("contiguous").to_vec();
    let final_objective = problem.objective(&b)?;
    let params = BlendParams::from_slice(&b);
    let alpha = alpha_matrix(&ens.psi, &params, problem.features.as_ref())?;
    let (lo, hi) = alpha
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    Ok(BlendFit {
        params,
        objective,
        settings: *settings,
        initial_objective: trajectory[0],
        trajectory,
        final_objective,
        alpha_mean: alpha.mean().unwrap_or(f64::NAN),
        alpha_min: lo,
        alpha_max: hi,
    })
}

/// Deterministic disjoint split of `0..n_paths` into sorted train and eval indices.
pub fn train_eval_split(
    n_paths: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HedgeError::param(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if n_paths < 2 {
        return Err(HedgeError::InsufficientData(
            "a split needs at least two paths".into(),
        ));
    }
    let n_train = ((n_paths as f64 * train_fraction).round() as usize).clamp(1, n_paths - 1);
    let mut idx: Vec<usize> = (0..n_paths).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let mut train = idx[..n_train].to_vec();
    let mut eval = idx[n_train..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::bs_delta_strategy;
    use crate::classical::VolMode;
    use crate::market_sim::{simulate_heston, HestonParams, PathGrid};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_weight(0.37, None, &BlendParams::new(0.0, 0.0)), 0.5);
        let a = alpha_weight(0.039, None, &BlendParams::new(0.92, 0.67));
        assert!((a - 0.720_336_224).abs() < 1e-8, "{a}");
        assert!(a > 0.71 && a < 0.73);
        let p = BlendParams::new(0.1, 2.0);
        assert!(alpha_weight(0.2, None, &p) < alpha_weight(0.3, None, &p));
        let e = BlendParams::extended(0.0, 0.0, 1.0, -1.0);
        assert_eq!(alpha_weight(0.0, Some((1.0, 1.0)), &e), 0.5);
    }

    fn sched(d: Array2<f64>) -> HedgeSchedule {
        HedgeSchedule::new(d, "x").unwrap()
    }

    #[test]
    fn blend_limits_and_midpoint() {
        let ens = sched(array![[0.3, 0.1]]);
        let bs = sched(array![[0.7, 0.9]]);
        let psi = array![[0.05, 0.02]];
        let lo = blend_schedules(&ens, &bs, &psi, &BlendParams::new(-50.0, 0.0), None).unwrap();
        assert!((&lo.delta - &ens.delta).iter().all(|d| d.abs() < 1e-20));
        let hi = blend_schedules(&ens, &bs, &psi, &BlendParams::new(50.0, 0.0), None).unwrap();
        assert!((&hi.delta - &bs.delta).iter().all(|d| d.abs() < 1e-20));
        let mid = blend_schedules(&ens, &bs, &psi, &BlendParams::new(0.0, 0.0), None).unwrap();
        assert!((mid.delta[[0, 0]] - 0.5).abs() < 1e-15);
        assert!(
            blend_schedules(&ens, &bs, &array![[0.0]], &BlendParams::new(0.0, 0.0), None).is_err()
        );
        assert!(blend_schedules(
            &ens,
            &bs,
            &psi,
            &BlendParams::extended(0.0, 0.0, 0.0, 0.0),
            None
        )
        .is_err());
    }

    fn setup(n: usize, seed: u64) -> (MarketPaths, EnsembleOutput, HedgeSchedule) {
        let grid = PathGrid::new(20, 0.5).unwrap();
        let paths = simulate_heston(&HestonParams::baseline(), &grid, n, seed).unwrap();
        let bs = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        // two synthetic members straddling a damped delta
        let a = bs.delta.mapv(|d| 0.9 * d + 0.03);
        let b = &bs.delta.mapv(|d| 0.8 * d)
            + &paths
                .variance
                .slice(ndarray::s![.., ..20])
                .mapv(|v| v.sqrt());
        let ens = EnsembleOutput::from_schedules(vec![sched(a), sched(b)]).unwrap();
        (paths, ens, bs)
    }

    #[test]
    fn blend_gradients_match_finite_differences() {
        let (paths, ens, bs) = setup(400, 1);
        for extended in [false, true] {
            let beta: Vec<f64> = if extended {
                vec![0.3, -1.2, 0.4, 0.2]
            } else {
                vec![0.3, -1.2]
            };
            let smooth = BlendProblem::new(
                &paths,
                &ens,
                &bs,
                &CostSpec::frictionless(),
                1.0,
                BlendObjective::entropic(),
                extended,
            )
            .unwrap();
            let e = blend_gradient_check(&smooth, &beta, 1e-3).unwrap();
            assert!(e < 1e-6, "{e}");
            let cost = CostSpec::default();
            let ent = BlendProblem::new(
                &paths,
                &ens,
                &bs,
                &cost,
                1.0,
                BlendObjective::entropic(),
                extended,
            )
            .unwrap();
            let e = blend_gradient_check(&ent, &beta, 1e-4).unwrap();
            assert!(e < 1e-4, "{e}");
            let cv = BlendProblem::new(
                &paths,
                &ens,
                &bs,
                &cost,
                1.0,
                BlendObjective::cvar(),
                extended,
            )
            .unwrap();
            let e = blend_gradient_check(&cv, &beta, 1e-5).unwrap();
            assert!(e < 1e-3, "{e}");
        }
    }

    #[test]
    fn fit_improves_on_the_even_blend() {
        let (paths, ens, bs) = setup(500, 2);
        let cost = CostSpec::default();
        let settings = BlendFitSettings {
            iterations: 300,
            step_size: 0.01,
        };
        for obj in [BlendObjective::entropic(), BlendObjective::cvar()] {
            let fit = fit_blend_with(&paths, &ens, &bs, &cost, 1.0, obj, false, &settings).unwrap();
            assert_eq!(fit.trajectory.len(), 300);
            assert!(fit.final_objective <= fit.initial_objective);
            let p = BlendProblem::new(&paths, &ens, &bs, &cost, 1.0, obj, false).unwrap();
            assert!(
                p.objective(&fit.params.to_vec()).unwrap() <= p.objective(&[0.0, 0.0]).unwrap()
            );
        }
    }

    #[test]
    fn zero_disagreement_leaves_beta1_untouched() {
        let (paths, _, bs) = setup(200, 3);
        let twin = EnsembleOutput::from_schedules(vec![
            sched(bs.delta.mapv(|d| 0.9 * d)),
            sched(bs.delta.mapv(|d| 0.9 * d)),
        ])
        .unwrap();
        let settings = BlendFitSettings {
            iterations: 50,
            step_size: 0.01,
        };
        let fit = fit_blend_with(
            &paths,
            &twin,
            &bs,
            &CostSpec::default(),
            1.0,
            BlendObjective::cvar(),
            false,
            &settings,
        )
        .unwrap();
        assert_eq!(fit.params.beta1, 0.0);
        assert!(fit.params.beta0 != 0.0);
    }

    #[test]
    fn split_examples() {
        let (tr, ev) = train_eval_split(10_000, 0.7, 42).unwrap();
        assert_eq!((tr.len(), ev.len()), (7000, 3000));
        let mut all: Vec<usize> = tr.iter().chain(&ev).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10_000).collect::<Vec<_>>());
        assert_eq!(train_eval_split(10_000, 0.7, 42).unwrap().0, tr);
        assert_ne!(train_eval_split(10_000, 0.7, 43).unwrap().0, tr);
        let (a, b) = train_eval_split(4, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));
        assert!(train_eval_split(10, 1.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn blend_is_a_convex_combination(
            e in prop::collection::vec(-1.0f64..2.0, 6),
            b in prop::collection::vec(-1.0f64..2.0, 6),
            psi in prop::collection::vec(0.0f64..0.5, 6),
            b0 in -5.0f64..5.0,
            b1 in -20.0f64..20.0,
        ) {
            let ens = sched(Array2::from_shape_vec((2, 3), e).unwrap());
            let bs = sched(Array2::from_shape_vec((2, 3), b).unwrap());
            let psi = Array2::from_shape_vec((2, 3), psi).unwrap();
            let out = blend_schedules(&ens, &bs, &psi, &BlendParams::new(b0, b1), None).unwrap();
            for ((&o, &x), &y) in out.delta.iter().zip(&ens.delta).zip(&bs.delta) {
                prop_assert!(o >= x.min(y) - 1e-12 && o <= x.max(y) + 1e-12);
            }
        }
    }
}
