//! Two-layer LSTM hedger trained through the full hedging rollout.
//!
//! At each decision date the network sees `(log(S_t/K), τ_t, √v_t, δ_{t−1})`
//! and emits an unconstrained hedge ratio `δ_t`. Hidden and cell states start
//! at zero on every path and are carried across steps. Training minimises the
//! entropic risk of the terminal P&L (transaction costs included) with Adam,
//! one update per epoch on freshly simulated paths.

use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{compute_pnl, CostSpec, HedgeSchedule};
use crate::autodiff::{Tape, Var};
use crate::error::{HedgeError, Result};
use crate::market_sim::{simulate_gbm, simulate_heston, HestonParams, MarketPaths, PathGrid};
use crate::optim::{Adam, AdamConfig};
use crate::risk::entropic_risk;
use crate::rng::{derive_seed, stream_rng};

/// Paths per tape. Bounds the memory of one backward sweep.
pub const CHUNK_PATHS: usize = 250;

/// Number of input features.
pub const N_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_features: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            n_features: N_FEATURES,
            hidden: 32,
            layers: 2,
        }
    }
}

impl Architecture {
    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_features
        } else {
            self.hidden
        }
    }

    /// `(name, rows, cols)` of every parameter block, in storage order.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            out.push((format!("lstm{l}.w_ih"), self.layer_input(l), 4 * h));
            out.push((format!("lstm{l}.w_hh"), h, 4 * h));
            out.push((format!("lstm{l}.bias"), 1, 4 * h));
        }
        out.push(("head.weight".into(), h, 1));
        out.push(("head.bias".into(), 1, 1));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Market the hedger is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MarketModel {
    Heston(HestonParams),
    Gbm { vol: f64 },
}

impl MarketModel {
    pub fn simulate(&self, grid: &PathGrid, n_paths: usize, seed: u64) -> Result<MarketPaths> {
        match self {
            MarketModel::Heston(p) => simulate_heston(p, grid, n_paths, seed),
            MarketModel::Gbm { vol } => simulate_gbm(*vol, grid, n_paths, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub paths_per_epoch: usize,
    pub step_size: f64,
    pub adam_betas: (f64, f64),
    pub risk_aversion: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// 100 epochs × 5,000 paths.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 100,
            paths_per_epoch: 5_000,
            step_size: 1e-3,
            adam_betas: (0.9, 0.999),
            risk_aversion: 1.0,
            seed: 0,
        }
    }

    /// 500 epochs × 20,000 paths.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 500,
            paths_per_epoch: 20_000,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.paths_per_epoch == 0 {
            return Err(HedgeError::param("epochs and paths_per_epoch must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(HedgeError::param("step size must be positive"));
        }
        if !(self.risk_aversion > 0.0) {
            return Err(HedgeError::param("risk aversion must be positive"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(HedgeError::param("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::default()
        }
    }
}

/// Fixed affine input normalisation of `(log(S/K), τ, √v)`; `δ_{t−1}` enters raw.
pub const FEATURE_SHIFT: [f64; 3] = [0.0, 0.0, 0.2];
pub const FEATURE_SCALE: [f64; 3] = [10.0, 2.0, 5.0];

/// Inputs at one decision date.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub log_moneyness: f64,
    pub tau: f64,
    pub inst_vol: f64,
    pub prev_delta: f64,
}

/// Recurrent hedging network with flat parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgerModel {
    pub architecture: Architecture,
    pub seed: u64,
    params: Vec<Array2<f64>>,
}

struct Rollout {
    deltas: Vec<Var>,
    pnl: Option<Var>,
}

impl HedgerModel {
    /// Uniform `[−k, k]` weights with `k = 1/√fan_in`, zero biases except the
    /// forget gate at 1.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = stream_rng(derive_seed(seed, 0x1417), 0);
        let h = architecture.hidden;
        let params = architecture
            .blocks()
            .into_iter()
            .map(|(name, rows, cols)| {
                if name.ends_with("bias") {
                    let mut b = Array2::zeros((rows, cols));
                    if name.starts_with("lstm") {
                        b.slice_mut(s![.., h..2 * h]).fill(1.0);
                    }
                    b
                } else {
                    let k = 1.0 / (rows as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-k..k))
                }
            })
            .collect();
        HedgerModel {
            architecture,
            seed,
            params,
        }
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn from_params(
        architecture: Architecture,
        seed: u64,
        params: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let blocks = architecture.blocks();
        if blocks.len() != params.len()
            || blocks
                .iter()
                .zip(&params)
                .any(|((_, r, c), p)| p.dim() != (*r, *c))
        {
            return Err(HedgeError::dim(
                "parameter blocks do not match the architecture",
            ));
        }
        if params.iter().flat_map(|p| p.iter()).any(|x| !x.is_finite()) {
            return Err(HedgeError::Divergence("non-finite model parameter".into()));
        }
        Ok(HedgerModel {
            architecture,
            seed,
            params,
        })
    }

    /// Builds the rollout of a batch of paths on `tape`. When `cost` is given
    /// the terminal P&L of a short call is appended as a `[rows × 1]` node.
    fn rollout(
        &self,
        tape: &mut Tape,
        params: &[Var],
        spot: ArrayView2<f64>,
        var: ArrayView2<f64>,
        grid: &PathGrid,
        strike: f64,
        cost: Option<f64>,
    ) -> Rollout {
        let arch = self.architecture;
        let hdim = arch.hidden;
        let rows = spot.nrows();
        let n = grid.n_steps;

        let mut hidden: Vec<Var> = (0..arch.layers)
            .map(|_| tape.constant(Array2::zeros((rows, hdim))))
            .collect();
        let mut cells = hidden.clone();
        let mut prev = tape.constant(Array2::zeros((rows, 1)));
        let mut deltas = Vec::with_capacity(n);
        let mut gains: Option<Var> = None;
        let mut costs: Option<Var> = None;

        let head_w = params[3 * arch.layers];
        let head_b = params[3 * arch.layers + 1];

        for t in 0..n {
            let tau = grid.tau(t);
            let mut feat = Array2::zeros((rows, 3));
            for r in 0..rows {
                let raw = [(spot[[r, t]] / strike).ln(), tau, var[[r, t]].sqrt()];
                for (j, x) in raw.into_iter().enumerate() {
                    feat[[r, j]] = (x - FEATURE_SHIFT[j]) * FEATURE_SCALE[j];
                }
            }
            let feat = tape.constant(feat);
            let mut input = tape.concat(feat, prev);
            for l in 0..arch.layers {
                let (w_ih, w_hh, bias) = (params[3 * l], params[3 * l + 1], params[3 * l + 2]);
                let z = tape.gates(input, w_ih, hidden[l], w_hh, bias);
                let hc = tape.lstm_cell(z, cells[l]);
                hidden[l] = tape.slice_cols(hc, 0, hdim);
                cells[l] = tape.slice_cols(hc, hdim, hdim);
                input = hidden[l];
            }
            let out = tape.matmul(input, head_w);
            let delta = tape.add_row(out, head_b);

            if let Some(c) = cost {
                let ds = Array2::from_shape_fn((rows, 1), |(r, _)| spot[[r, t + 1]] - spot[[r, t]]);
                let g = tape.mul_const(delta, ds);
                gains = Some(match gains {
                    Some(acc) => tape.add(acc, g),
                    None => g,
                });
                let trade = tape.sub(delta, prev);
                let trade = tape.abs(trade);
                let cs = Array2::from_shape_fn((rows, 1), |(r, _)| c * spot[[r, t]]);
                let tc = tape.mul_const(trade, cs);
                costs = Some(match costs {
                    Some(acc) => tape.add(acc, tc),
                    None => tc,
                });
            }
            deltas.push(delta);
            prev = delta;
        }

        let pnl = cost.map(|c| {
            let unwind = tape.abs(prev);
            let cs = Array2::from_shape_fn((rows, 1), |(r, _)| c * spot[[r, n]]);
            let unwind = tape.mul_const(unwind, cs);
            let total_cost = tape.add(costs.expect("n_steps >= 1"), unwind);
            let net = tape.sub(gains.expect("n_steps >= 1"), total_cost);
            let payoff = tape.constant(Array2::from_shape_fn((rows, 1), |(r, _)| {
                (spot[[r, n]] - strike).max(0.0)
            }));
            tape.sub(net, payoff)
        });
        Rollout { deltas, pnl }
    }

    fn leaf_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.parameter(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Hedge ratios on every path, `[n_paths × n_steps]`.
    pub fn forward_rollout(&self, paths: &MarketPaths, strike: f64) -> Result<HedgeSchedule> {
        let n = paths.n_steps();
        let chunks: Vec<Array2<f64>> = chunk_ranges(paths.n_paths())
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut tape = Tape::new();
                let params = self.leaf_params(&mut tape, false);
                let roll = self.rollout(
                    &mut tape,
                    &params,
                    paths.spot.slice(s![lo..hi, ..]),
                    paths.variance.slice(s![lo..hi, ..]),
                    &paths.grid,
                    strike,
                    None,
                );
                let mut out = Array2::zeros((hi - lo, n));
                for (t, d) in roll.deltas.iter().enumerate() {
                    out.column_mut(t).assign(&tape.value(*d).column(0));
                }
                out
            })
            .collect();
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        let delta = ndarray::concatenate(ndarray::Axis(0), &views).expect("chunk widths agree");
        for t in 0..n {
            if delta.column(t).iter().any(|x| !x.is_finite()) {
                return Err(HedgeError::Divergence(format!(
                    "non-finite hedge ratio at step {t}"
                )));
            }
        }
        HedgeSchedule::new(delta, "lstm")
    }

    /// Entropic risk of the hedged P&L and its gradient with respect to every
    /// parameter block.
    ///
    /// Paths are processed in chunks. Each chunk is back-propagated with the
    /// unnormalised weights `exp(−a·pnl − m_c)`; the chunk results are then
    /// rescaled to the global normaliser, giving
    /// `∂L/∂θ = −Σ_i w_i ∂pnl_i/∂θ / Σ_i w_i` exactly.
    pub fn loss_and_gradient(
        &self,
        paths: &MarketPaths,
        cost: &CostSpec,
        strike: f64,
        risk_aversion: f64,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let a = risk_aversion;
        let parts: Vec<(f64, f64, Vec<Array2<f64>>)> = chunk_ranges(paths.n_paths())
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut tape = Tape::new();
                let params = self.leaf_params(&mut tape, true);
                let roll = self.rollout(
                    &mut tape,
                    &params,
                    paths.spot.slice(s![lo..hi, ..]),
                    paths.variance.slice(s![lo..hi, ..]),
                    &paths.grid,
                    strike,
                    Some(cost.cost_rate),
                );
                let pnl = roll.pnl.expect("cost given");
                let values = tape.value(pnl);
                let m = values
                    .iter()
                    .map(|x| -a * x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let w = values.mapv(|x| (-a * x - m).exp());
                let total = w.sum();
                let g = tape.backward(pnl, w);
                let grads = params
                    .iter()
                    .zip(&self.params)
                    .map(|(v, p)| g.get_or_zeros(*v, p.dim()))
                    .collect();
                (m, total, grads)
            })
            .collect();

        let m_max = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut weight_sum = 0.0;
        let mut grads: Vec<Array2<f64>> =
            self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        for (m, total, g) in &parts {
            let scale = (m - m_max).exp();
            weight_sum += scale * total;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.scaled_add(scale, gi);
            }
        }
        let loss = (m_max + (weight_sum / paths.n_paths() as f64).ln()) / a;
        if !loss.is_finite() {
            return Err(HedgeError::Divergence("non-finite training loss".into()));
        }
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| -x / weight_sum);
        }
        Ok((loss, grads))
    }

    /// Same loss and gradient from a single tape ending in the entropic node.
    pub fn loss_and_gradient_single_tape(
        &self,
        paths: &MarketPaths,
        cost: &CostSpec,
        strike: f64,
        risk_aversion: f64,
    ) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let params = self.leaf_params(&mut tape, true);
        let roll = self.rollout(
            &mut tape,
            &params,
            paths.spot.view(),
            paths.variance.view(),
            &paths.grid,
            strike,
            Some(cost.cost_rate),
        );
        let loss = tape.entropic_mean(roll.pnl.expect("cost given"), risk_aversion);
        let g = tape.backward(loss, Array2::ones((1, 1)));
        let grads = params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| g.get_or_zeros(*v, p.dim()))
            .collect();
        (tape.value(loss)[[0, 0]], grads)
    }

    /// Entropic loss from a plain forward pass and the accounting module.
    pub fn entropic_loss(
        &self,
        paths: &MarketPaths,
        cost: &CostSpec,
        strike: f64,
        risk_aversion: f64,
    ) -> Result<f64> {
        let hedges = self.forward_rollout(paths, strike)?;
        let report = compute_pnl(paths, &hedges, cost, strike)?;
        entropic_risk(report.pnl.as_slice().expect("contiguous"), risk_aversion)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_model(self);
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ckpt.into_model()
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK_PATHS)
        .map(|lo| (lo, (lo + CHUNK_PATHS).min(n)))
        .collect()
}

/// Checkpoint file contents: JSON with architecture, seed and named flat
/// parameter blocks (row-major).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub parameter_count: usize,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "uqhedge-lstm-v1";

impl Checkpoint {
    pub fn from_model(model: &HedgerModel) -> Self {
        let blocks = model
            .architecture
            .blocks()
            .into_iter()
            .zip(&model.params)
            .map(|((name, rows, cols), p)| ParamBlock {
                name,
                rows,
                cols,
                values: p.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            architecture: model.architecture,
            seed: model.seed,
            parameter_count: model.parameter_count(),
            blocks,
        }
    }

    pub fn into_model(self) -> Result<HedgerModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(HedgeError::Format(format!(
                "unknown checkpoint format `{}`",
                self.format
            )));
        }
        let params = self
            .blocks
            .into_iter()
            .map(|b| {
                Array2::from_shape_vec((b.rows, b.cols), b.values)
                    .map_err(|e| HedgeError::Format(format!("block {}: {e}", b.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        HedgerModel::from_params(self.architecture, self.seed, params)
    }
}

/// Result of [`train_hedger`].
#[derive(Clone, Debug)]
pub struct TrainedHedger {
    pub model: HedgerModel,
    /// Entropic loss of each epoch's batch, evaluated before that epoch's update.
    pub losses: Vec<f64>,
}

/// Seed of the paths simulated for `epoch`.
pub fn epoch_seed(train_seed: u64, epoch: usize) -> u64 {
    derive_seed(train_seed, 1 + epoch as u64)
}

/// Trains a hedger from scratch with Adam, one update per freshly simulated epoch.
pub fn train_hedger(
    config: &TrainConfig,
    market: &MarketModel,
    grid: &PathGrid,
    cost: &CostSpec,
    strike: f64,
) -> Result<TrainedHedger> {
    train_hedger_with(config, market, grid, cost, strike, |_, _, _| {})
}

/// [`train_hedger`] with a callback `(epoch, loss, model)` after every update.
pub fn train_hedger_with<F>(
    config: &TrainConfig,
    market: &MarketModel,
    grid: &PathGrid,
    cost: &CostSpec,
    strike: f64,
    mut on_epoch: F,
) -> Result<TrainedHedger>
where
    F: FnMut(usize, f64, &HedgerModel),
{
    config.validate()?;
    let mut model = HedgerModel::init(Architecture::default(), config.seed);
    let mut adam = Adam::new(config.adam(), model.params.iter().map(|p| p.dim()));
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let paths =
            market.simulate(grid, config.paths_per_epoch, epoch_seed(config.seed, epoch))?;
        let (loss, grads) = model
            .loss_and_gradient(&paths, cost, strike, config.risk_aversion)
            .map_err(|e| HedgeError::Divergence(format!("epoch {epoch}: {e}")))?;
        if !loss.is_finite() {
            return Err(HedgeError::Divergence(format!(
                "epoch {epoch}: non-finite loss"
            )));
        }
        adam.step(&mut model.params, &grads);
        if model
            .params
            .iter()
            .flat_map(|p| p.iter())
            .any(|x| !x.is_finite())
        {
            return Err(HedgeError::Divergence(format!(
                "epoch {epoch}: non-finite parameters"
            )));
        }
        losses.push(loss);
        on_epoch(epoch, loss, &model);
        if epoch % 10 == 0 || epoch + 1 == config.epochs {
            info!("seed {:#x} epoch {epoch}: loss {loss:.6}", config.seed);
        } else {
            debug!("epoch {epoch}: loss {loss:.6}");
        }
    }
    Ok(TrainedHedger { model, losses })
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `(block, flat index, reverse-mode, finite difference)`
    pub samples: Vec<(usize, usize, f64, f64)>,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Compares reverse-mode gradients of the entropic loss with central
/// differences at `n_params_sampled` randomly chosen parameters.
pub fn gradient_check(
    model: &HedgerModel,
    paths: &MarketPaths,
    cost: &CostSpec,
    strike: f64,
    n_params_sampled: usize,
    step: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, grads) = model.loss_and_gradient(paths, cost, strike, 1.0)?;
    let mut rng = stream_rng(seed, 0);
    let total = model.parameter_count();
    let mut samples = Vec::with_capacity(n_params_sampled);
    let mut worst = 0.0f64;
    for _ in 0..n_params_sampled {
        let mut flat = rng.random_range(0..total);
        let mut block = 0;
        while flat >= model.params[block].len() {
            flat -= model.params[block].len();
            block += 1;
        }
        let bump = |h: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params[block].as_slice_mut().expect("standard layout")[flat] += h;
            m.entropic_loss(paths, cost, strike, 1.0)
        };
        let fd = (bump(step)? - bump(-step)?) / (2.0 * step);
        let ad = grads[block].as_slice().expect("standard layout")[flat];
        worst = worst.max(relative_error(ad, fd));
        samples.push((block, flat, ad, fd));
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        samples,
    })
}

/// Entropic indifference price: the cash amount `p` with `ρ_a(p + pnl) = 0`.
pub fn network_price(
    model: &HedgerModel,
    paths: &MarketPaths,
    cost: &CostSpec,
    strike: f64,
    risk_aversion: f64,
) -> Result<f64> {
    model.entropic_loss(paths, cost, strike, risk_aversion)
}

/// Indifference price of an arbitrary schedule.
pub fn schedule_price(
    paths: &MarketPaths,
    hedges: &HedgeSchedule,
    cost: &CostSpec,
    strike: f64,
    risk_aversion: f64,
) -> Result<f64> {
    let report = compute_pnl(paths, hedges, cost, strike)?;
    entropic_risk(report.pnl.as_slice().expect("contiguous"), risk_aversion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::HestonParams;

    fn small_paths(n: usize, seed: u64) -> MarketPaths {
        simulate_heston(&HestonParams::baseline(), &PathGrid::default(), n, seed).unwrap()
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let arch = Architecture::default();
        // layer 1: 4·128 + 32·128 + 128; layer 2: 32·128 + 32·128 + 128; head: 32 + 1
        assert_eq!(arch.parameter_count(), 4736 + 8320 + 33);
        let m = HedgerModel::init(arch, 3);
        assert_eq!(m.parameter_count(), 13_089);
        let forget = &m.params()[2];
        assert!(forget.slice(s![.., 32..64]).iter().all(|&b| b == 1.0));
        assert!(forget.slice(s![.., ..32]).iter().all(|&b| b == 0.0));
        assert!(m.params()[0].iter().all(|w| w.abs() <= 0.5));
        assert!(m.params()[1].iter().all(|w| w.abs() <= 1.0 / 32f64.sqrt()));
    }

    #[test]
    fn fresh_model_outputs_are_bounded_and_deterministic() {
        let paths = small_paths(300, 1);
        let m = HedgerModel::init(Architecture::default(), 9);
        let a = m.forward_rollout(&paths, 1.0).unwrap();
        let b = m.forward_rollout(&paths, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.delta.iter().all(|d| d.is_finite() && d.abs() < 5.0));
    }

    #[test]
    fn path_permutation_permutes_rows() {
        let paths = small_paths(12, 2);
        let m = HedgerModel::init(Architecture::default(), 4);
        let order: Vec<usize> = (0..12).rev().collect();
        let a = m.forward_rollout(&paths, 1.0).unwrap();
        let b = m.forward_rollout(&paths.select(&order), 1.0).unwrap();
        assert_eq!(a.select(&order).delta, b.delta);
    }

    #[test]
    fn chunked_gradient_equals_single_tape_gradient() {
        // > CHUNK_PATHS to exercise the cross-chunk renormalisation
        let grid = PathGrid::new(10, 0.5).unwrap();
        let paths = simulate_heston(&HestonParams::baseline(), &grid, CHUNK_PATHS + 37, 5).unwrap();
        let m = HedgerModel::init(Architecture::default(), 12);
        let cost = CostSpec::default();
        let (l1, g1) = m.loss_and_gradient(&paths, &cost, 1.0, 1.0).unwrap();
        let (l2, g2) = m.loss_and_gradient_single_tape(&paths, &cost, 1.0, 1.0);
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        let l3 = m.entropic_loss(&paths, &cost, 1.0, 1.0).unwrap();
        assert!((l1 - l3).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences_smooth_case() {
        let paths = small_paths(32, 3);
        let m = HedgerModel::init(Architecture::default(), 21);
        let check =
            gradient_check(&m, &paths, &CostSpec::frictionless(), 1.0, 20, 1e-5, 1).unwrap();
        assert!(check.max_relative_error < 1e-4, "{:?}", check);
    }

    #[test]
    fn gradient_matches_finite_differences_with_costs() {
        let paths = small_paths(32, 4);
        let m = HedgerModel::init(Architecture::default(), 22);
        let check = gradient_check(&m, &paths, &CostSpec::default(), 1.0, 20, 1e-5, 2).unwrap();
        assert!(check.max_relative_error < 1e-3, "{:?}", check);
    }

    #[test]
    fn lstm_blocks_have_zero_gradient_when_the_head_is_masked() {
        let paths = small_paths(16, 6);
        let mut m = HedgerModel::init(Architecture::default(), 23);
        let head = 3 * m.architecture.layers;
        m.params_mut()[head].fill(0.0);
        let (_, grads) = m
            .loss_and_gradient(&paths, &CostSpec::default(), 1.0, 1.0)
            .unwrap();
        for g in &grads[..head] {
            assert!(g.iter().all(|&x| x == 0.0));
        }
        assert!(grads[head + 1][[0, 0]] != 0.0);
    }

    #[test]
    fn zero_hedge_price_is_entropic_of_the_payoff() {
        let paths = small_paths(200, 7);
        let mut m = HedgerModel::init(Architecture::default(), 24);
        for p in m.params_mut().iter_mut() {
            p.fill(0.0);
        }
        let price = network_price(&m, &paths, &CostSpec::default(), 1.0, 1.0).unwrap();
        let payoff: Vec<f64> = paths
            .terminal_spot()
            .iter()
            .map(|s| -(s - 1.0f64).max(0.0))
            .collect();
        assert!((price - entropic_risk(&payoff, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = HedgerModel::init(Architecture::default(), 25);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.json");
        m.save(&f).unwrap();
        assert_eq!(HedgerModel::load(&f).unwrap(), m);
    }

    #[test]
    fn training_is_reproducible_and_makes_progress() {
        let cfg = TrainConfig {
            epochs: 12,
            paths_per_epoch: 300,
            seed: 77,
            ..TrainConfig::desk()
        };
        let grid = PathGrid::new(20, 0.5).unwrap();
        let market = MarketModel::Heston(HestonParams::baseline());
        let a = train_hedger(&cfg, &market, &grid, &CostSpec::default(), 1.0).unwrap();
        let b = train_hedger(&cfg, &market, &grid, &CostSpec::default(), 1.0).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::desk()
        };
        let r = train_hedger(
            &cfg,
            &MarketModel::Gbm { vol: 0.2 },
            &PathGrid::default(),
            &CostSpec::default(),
            1.0,
        );
        assert!(matches!(r, Err(HedgeError::InvalidParameter(_))));
    }
}
