//! Config-driven orchestration of simulation, training, evaluation and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{
    average_trade_size, compute_pnl, decompose_pnl, CostSpec, HedgeSchedule, PnLReport,
};
use crate::blend::{
    alpha_matrix, alpha_weight, blend_schedules, fit_blend_with, train_eval_split, BlendFeatures,
    BlendFit, BlendFitSettings, BlendObjective,
};
use crate::classical::{bs_call_price, bs_delta_strategy, ww_strategy, BSInputs, VolMode};
use crate::ensemble::{
    aggregate, member_seed, train_ensemble, write_losses_csv, EnsembleOutput, TrainedEnsemble,
};
use crate::error::{HedgeError, Result};
use crate::evaluation::{
    average_path_volatility, heatmap_data, heatmap_in_range, paired_bootstrap, quintile_analysis,
    rolling_winrate, strategy_comparison, terminal_moneyness, uncertainty_correlations,
    write_blend_curves_csv, write_bootstrap_csv, write_comparison_csv, write_correlations_csv,
    write_cvar_bars_csv, write_decomposition_csv, write_heatmap_csv, write_quintiles_csv,
    write_winrate_csv, BootstrapResult, BootstrapRow, ComparisonRow, QuintileTable,
    UncertaintyCorrelations,
};
use crate::market_sim::{simulate_gbm, simulate_heston, HestonParams, MarketPaths, PathGrid};
use crate::neural_hedger::{
    network_price, train_hedger_with, HedgerModel, MarketModel, TrainConfig,
};
use crate::risk::{cvar, RiskSpec};

pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "manifest.json";
pub const PATHS_FILE: &str = "eval_paths.bin";
pub const MEMBERS_DIR: &str = "members";
/// Smallest heatmap cell considered for the reported peak.
pub const PEAK_MIN_COUNT: usize = 100;

/// The eight table and figure files every evaluation writes.
pub const CORE_ARTIFACTS: [&str; 8] = [
    "table2_quintiles.csv",
    "table4_comparison.csv",
    "table5_bootstrap.csv",
    "table6_decomposition.csv",
    "fig1_winrate.csv",
    "fig2_heatmap.csv",
    "fig3_blend_curves.csv",
    "fig4_cvar_bars.csv",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    Baseline,
    HighVov,
    LowCorr,
    Custom,
}

impl Calibration {
    pub const NAMED: [Calibration; 3] = [
        Calibration::Baseline,
        Calibration::HighVov,
        Calibration::LowCorr,
    ];

    pub fn params(self) -> Option<HestonParams> {
        match self {
            Calibration::Baseline => Some(HestonParams::baseline()),
            Calibration::HighVov => Some(HestonParams::high_vol_of_vol()),
            Calibration::LowCorr => Some(HestonParams::low_correlation()),
            Calibration::Custom => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Calibration::Baseline => "baseline",
            Calibration::HighVov => "high_vov",
            Calibration::LowCorr => "low_corr",
            Calibration::Custom => "custom",
        }
    }
}

impl FromStr for Calibration {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Calibration::Baseline),
            "high_vov" => Ok(Calibration::HighVov),
            "low_corr" => Ok(Calibration::LowCorr),
            "custom" => Ok(Calibration::Custom),
            other => Err(HedgeError::param(format!("unknown calibration `{other}`"))),
        }
    }
}

/// Training budget presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Scale::Desk => TrainConfig::desk(),
            Scale::Paper => TrainConfig::paper(),
        }
    }
}

impl FromStr for Scale {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(HedgeError::param(format!("unknown scale `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub paths: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub split_seed: u64,
    /// Evaluation seeds of the stability study.
    pub stability_seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
    pub mean_bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub cvar_level: f64,
    pub winrate_window: usize,
    pub heatmap_moneyness_bins: usize,
    pub heatmap_time_bins: usize,
    /// Moneyness range of the heatmap; the observed range when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_range: Option<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            paths: 10_000,
            seed: 99,
            split_fraction: 0.7,
            split_seed: 7,
            stability_seeds: vec![99, 123, 456],
            bootstrap_resamples: 5_000,
            mean_bootstrap_resamples: 10_000,
            bootstrap_seed: 2024,
            cvar_level: 0.05,
            winrate_window: 500,
            heatmap_moneyness_bins: 12,
            heatmap_time_bins: 10,
            heatmap_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub cvar_level: f64,
    pub entropic_risk_aversion: f64,
    /// Also fit the four-coefficient variant with moneyness and time.
    pub extended: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        let s = BlendFitSettings::default();
        BlendConfig {
            iterations: s.iterations,
            step_size: s.step_size,
            cvar_level: 0.05,
            entropic_risk_aversion: 1.0,
            extended: false,
        }
    }
}

impl BlendConfig {
    fn settings(&self) -> BlendFitSettings {
        BlendFitSettings {
            iterations: self.iterations,
            step_size: self.step_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalConfig {
    pub fixed_vol: f64,
    pub ww_risk_aversion: f64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        ClassicalConfig {
            fixed_vol: 0.2,
            ww_risk_aversion: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmConfig {
    pub vol: f64,
    pub test_paths: usize,
    pub test_seed: u64,
    pub mae_threshold: f64,
    pub price_tolerance: f64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            vol: 0.2,
            test_paths: 10_000,
            test_seed: 31,
            mae_threshold: 0.06,
            price_tolerance: 2e-3,
        }
    }
}

/// Complete description of a run; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: Calibration,
    /// Required for `custom`, rejected otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heston: Option<HestonParams>,
    pub strike: f64,
    pub grid: PathGrid,
    pub cost: CostSpec,
    pub ensemble_size: usize,
    pub scale: Scale,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub blend: BlendConfig,
    pub classical: ClassicalConfig,
    pub gbm: GbmConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            calibration: Calibration::Baseline,
            heston: None,
            strike: 1.0,
            grid: PathGrid::default(),
            cost: CostSpec::default(),
            ensemble_size: 5,
            scale: Scale::Desk,
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            blend: BlendConfig::default(),
            classical: ClassicalConfig::default(),
            gbm: GbmConfig::default(),
            output_dir: PathBuf::from("runs/baseline"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| HedgeError::Format(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HedgeError::Format(format!("config: {e}")))
    }

    /// Replaces the training budget by the preset, keeping seed and risk aversion.
    pub fn set_scale(&mut self, scale: Scale) {
        let preset = scale.train_config();
        self.scale = scale;
        self.train = TrainConfig {
            seed: self.train.seed,
            risk_aversion: self.train.risk_aversion,
            ..preset
        };
    }

    pub fn heston_params(&self) -> Result<HestonParams> {
        let p = match (self.calibration.params(), self.heston) {
            (Some(named), None) => named,
            (None, Some(custom)) => custom,
            (None, None) => {
                return Err(HedgeError::param(
                    "custom calibration needs a [heston] table",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(HedgeError::param(format!(
                    "[heston] given for named calibration `{}`; use calibration = \"custom\"",
                    self.calibration.name()
                )))
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.heston_params()?;
        self.grid.validate()?;
        CostSpec::new(self.cost.cost_rate)?;
        self.train.validate()?;
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(HedgeError::param("strike must be positive"));
        }
        if self.ensemble_size < 2 {
            return Err(HedgeError::param("ensemble_size must be >= 2"));
        }
        let e = &self.eval;
        if e.paths < 10 {
            return Err(HedgeError::param("eval.paths must be >= 10"));
        }
        if !(e.split_fraction > 0.0 && e.split_fraction < 1.0) {
            return Err(HedgeError::param("eval.split_fraction must lie in (0, 1)"));
        }
        if e.bootstrap_resamples < 100 || e.mean_bootstrap_resamples < 100 {
            return Err(HedgeError::param("bootstrap resamples must be >= 100"));
        }
        for level in [e.cvar_level, self.blend.cvar_level] {
            RiskSpec::Cvar { level }.validate()?;
        }
        if e.winrate_window == 0 {
            return Err(HedgeError::param("eval.winrate_window must be >= 1"));
        }
        if e.heatmap_moneyness_bins < 2 || e.heatmap_time_bins < 2 {
            return Err(HedgeError::param("heatmap bins must be >= 2"));
        }
        if let Some((lo, hi)) = e.heatmap_range {
            if !(lo < hi) {
                return Err(HedgeError::param("heatmap_range must be increasing"));
            }
        }
        if self.blend.iterations == 0 || !(self.blend.step_size > 0.0) {
            return Err(HedgeError::param(
                "blend needs iterations >= 1 and a positive step",
            ));
        }
        if !(self.blend.entropic_risk_aversion > 0.0) {
            return Err(HedgeError::param(
                "blend.entropic_risk_aversion must be positive",
            ));
        }
        if !(self.classical.fixed_vol > 0.0 && self.classical.ww_risk_aversion > 0.0) {
            return Err(HedgeError::param(
                "classical fixed_vol and ww_risk_aversion must be positive",
            ));
        }
        let g = &self.gbm;
        if !(g.vol > 0.0)
            || g.test_paths == 0
            || !(g.mae_threshold >= 0.0)
            || !(g.price_tolerance >= 0.0)
        {
            return Err(HedgeError::param("invalid [gbm] section"));
        }
        Ok(())
    }

    fn market(&self) -> Result<MarketModel> {
        Ok(MarketModel::Heston(self.heston_params()?))
    }

    fn fixed_vol(&self) -> VolMode {
        VolMode::Fixed(self.classical.fixed_vol)
    }
}

/// Process exit status for an error: 1 validation, 2 divergence, 3 I/O.
pub fn exit_code(err: &HedgeError) -> i32 {
    match err.root() {
        HedgeError::Io(_) => 3,
        HedgeError::Divergence(_) => 2,
        _ => 1,
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Runs `body` in the output directory, leaving a marker file if it fails.
fn guarded<T>(out: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(out)?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let r = body();
    if let Err(e) = &r {
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    r
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub train_seed: u64,
    pub member_seeds: Vec<u64>,
    pub eval_seed: u64,
    pub split_seed: u64,
    pub bootstrap_seed: u64,
    pub stability_seeds: Vec<u64>,
    pub gbm_test_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scale: Scale,
    pub calibration: String,
    pub heston: HestonParams,
    pub seeds: SeedRecord,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("inside root").to_path_buf();
            if rel != Path::new(MANIFEST) && rel != Path::new(FAILED_MARKER) {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Hashes of every file under `dir` except the manifest itself, sorted by path.
pub fn hash_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut arts = files
        .into_iter()
        .map(|rel| {
            let bytes = fs::read(dir.join(&rel))?;
            let path = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok(Artifact {
                path,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    arts.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(arts)
}

pub fn write_manifest(cfg: &RunConfig, command: &str) -> Result<Manifest> {
    let out = &cfg.output_dir;
    let manifest = Manifest {
        tool: "uqhedge".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        scale: cfg.scale,
        calibration: cfg.calibration.name().into(),
        heston: cfg.heston_params()?,
        seeds: SeedRecord {
            train_seed: cfg.train.seed,
            member_seeds: (0..cfg.ensemble_size)
                .map(|m| member_seed(cfg.train.seed, m))
                .collect(),
            eval_seed: cfg.eval.seed,
            split_seed: cfg.eval.split_seed,
            bootstrap_seed: cfg.eval.bootstrap_seed,
            stability_seeds: cfg.eval.stability_seeds.clone(),
            gbm_test_seed: cfg.gbm.test_seed,
        },
        config: cfg.clone(),
        artifacts: hash_artifacts(out)?,
    };
    write_json(&manifest, &out.join(MANIFEST))?;
    Ok(manifest)
}

// ---------------------------------------------------------------- GBM check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmReport {
    pub vol: f64,
    pub epochs: usize,
    pub paths_per_epoch: usize,
    pub train_seed: u64,
    pub test_paths: usize,
    pub test_seed: u64,
    /// Mean `|δ_net − δ_BS|` over all test decisions.
    pub delta_mae: f64,
    pub network_price: f64,
    pub bs_price: f64,
    pub price_error: f64,
    pub mae_threshold: f64,
    pub price_tolerance: f64,
    pub mae_passed: bool,
    pub price_passed: bool,
    pub final_loss: f64,
    /// `(epoch, MAE)` every [`GBM_CHECKPOINT_EVERY`] epochs.
    pub checkpoint_mae: Vec<(usize, f64)>,
}

/// Epoch interval of the MAE checkpoints in [`GbmReport`].
pub const GBM_CHECKPOINT_EVERY: usize = 25;

/// Trains one hedger on frictionless GBM and compares with Black-Scholes.
pub fn validate_gbm(cfg: &RunConfig) -> Result<GbmReport> {
    cfg.validate()?;
    let g = &cfg.gbm;
    let cost = CostSpec::frictionless();
    let market = MarketModel::Gbm { vol: g.vol };
    let test = stage("simulate", || {
        simulate_gbm(g.vol, &cfg.grid, g.test_paths, g.test_seed)
    })?;
    let bs = bs_delta_strategy(&test, cfg.strike, VolMode::Fixed(g.vol))?;
    let mae = |m: &HedgerModel| -> Result<f64> {
        let net = m.forward_rollout(&test, cfg.strike)?;
        Ok((&net.delta - &bs.delta)
            .mapv(f64::abs)
            .mean()
            .expect("non-empty"))
    };
    let mut checkpoints = Vec::new();
    let mut failure = None;
    let trained = stage("train", || {
        train_hedger_with(
            &cfg.train,
            &market,
            &cfg.grid,
            &cost,
            cfg.strike,
            |e, _, m| {
                if (e + 1) % GBM_CHECKPOINT_EVERY == 0 && failure.is_none() {
                    match mae(m) {
                        Ok(v) => checkpoints.push((e + 1, v)),
                        Err(err) => failure = Some(err),
                    }
                }
            },
        )
    })?;
    if let Some(err) = failure {
        return Err(err.in_stage("evaluate"));
    }
    stage("evaluate", || {
        let delta_mae = mae(&trained.model)?;
        let price = network_price(
            &trained.model,
            &test,
            &cost,
            cfg.strike,
            cfg.train.risk_aversion,
        )?;
        let s0 = test.spot[[0, 0]];
        let bs_price = bs_call_price(&BSInputs::new(s0, cfg.strike, g.vol, cfg.grid.maturity));
        let price_error = (price - bs_price).abs();
        Ok(GbmReport {
            vol: g.vol,
            epochs: cfg.train.epochs,
            paths_per_epoch: cfg.train.paths_per_epoch,
            train_seed: cfg.train.seed,
            test_paths: g.test_paths,
            test_seed: g.test_seed,
            delta_mae,
            network_price: price,
            bs_price,
            price_error,
            mae_threshold: g.mae_threshold,
            price_tolerance: g.price_tolerance,
            mae_passed: delta_mae <= g.mae_threshold,
            price_passed: price_error <= g.price_tolerance,
            final_loss: trained.losses.last().copied().unwrap_or(f64::NAN),
            checkpoint_mae: checkpoints,
        })
    })
}

/// [`validate_gbm`] writing `gbm_validation.json` and a manifest.
pub fn cmd_validate_gbm(cfg: &RunConfig) -> Result<GbmReport> {
    guarded(&cfg.output_dir, || {
        let report = validate_gbm(cfg)?;
        write_json(&report, &cfg.output_dir.join("gbm_validation.json"))?;
        write_manifest(cfg, "validate-gbm")?;
        Ok(report)
    })
}

// ---------------------------------------------------------------- stages

pub fn simulate_eval_paths(cfg: &RunConfig, seed: u64) -> Result<MarketPaths> {
    simulate_heston(&cfg.heston_params()?, &cfg.grid, cfg.eval.paths, seed)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<MarketPaths> {
    cfg.validate()?;
    guarded(&cfg.output_dir, || {
        let paths = stage("simulate", || simulate_eval_paths(cfg, cfg.eval.seed))?;
        paths.write_binary(&cfg.output_dir.join(PATHS_FILE))?;
        write_manifest(cfg, "simulate")?;
        Ok(paths)
    })
}

fn member_path(out: &Path, i: usize) -> PathBuf {
    out.join(MEMBERS_DIR).join(format!("member_{i}.json"))
}

fn train_stage(cfg: &RunConfig) -> Result<TrainedEnsemble> {
    stage("train-ensemble", || {
        let ens = train_ensemble(
            cfg.ensemble_size,
            &cfg.train,
            &cfg.market()?,
            &cfg.grid,
            &cfg.cost,
            cfg.strike,
        )?;
        fs::create_dir_all(cfg.output_dir.join(MEMBERS_DIR))?;
        for (i, m) in ens.models.iter().enumerate() {
            m.save(&member_path(&cfg.output_dir, i))?;
        }
        write_losses_csv(&ens, &cfg.output_dir.join("training_losses.csv"))?;
        Ok(ens)
    })
}

pub fn cmd_train_ensemble(cfg: &RunConfig) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    guarded(&cfg.output_dir, || {
        let ens = train_stage(cfg)?;
        write_manifest(cfg, "train-ensemble")?;
        Ok(ens)
    })
}

/// Loads the `ensemble_size` checkpoints of a run directory.
pub fn load_members(cfg: &RunConfig) -> Result<Vec<HedgerModel>> {
    (0..cfg.ensemble_size)
        .map(|i| HedgerModel::load(&member_path(&cfg.output_dir, i)))
        .collect()
}

/// Stored evaluation paths when they match the config, otherwise a fresh simulation.
pub fn load_or_simulate(cfg: &RunConfig) -> Result<MarketPaths> {
    let file = cfg.output_dir.join(PATHS_FILE);
    if file.exists() {
        let p = MarketPaths::read_binary(&file)?;
        if p.seed == cfg.eval.seed && p.n_paths() == cfg.eval.paths && p.grid == cfg.grid {
            return Ok(p);
        }
        log::warn!(
            "{} does not match the config; re-simulating",
            file.display()
        );
    }
    simulate_eval_paths(cfg, cfg.eval.seed)
}

// ---------------------------------------------------------------- evaluation

/// Headline comparison of a fitted blend against its classical leg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendOutcome {
    pub eval_seed: u64,
    pub classical: String,
    pub blend_cvar: f64,
    pub classical_cvar: f64,
    pub ww_cvar: f64,
    pub improvement_bps: f64,
    pub ci_low_bps: f64,
    pub ci_high_bps: f64,
    pub significant: bool,
    pub avg_alpha: f64,
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivityRow {
    pub strategy: String,
    pub mean_transaction_costs: f64,
    pub avg_trade_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeatmapPeak {
    pub moneyness: f64,
    /// Centre of the time bin as a fraction of maturity.
    pub time_fraction: f64,
    pub mean_psi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FittedBlend {
    pub name: String,
    pub fit: BlendFit,
    /// Mean `α` over held-out decisions.
    pub holdout_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub calibration: String,
    pub n_eval_paths: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub quintiles: QuintileTable,
    pub correlations: UncertaintyCorrelations,
    pub heatmap_peak: Option<HeatmapPeak>,
    pub activity: Vec<ActivityRow>,
    pub comparison: Vec<ComparisonRow>,
    pub bootstrap: Vec<BootstrapRow>,
    pub blends: Vec<FittedBlend>,
    pub headline: BlendOutcome,
    pub true_vol: BlendOutcome,
    pub stability: Vec<BlendOutcome>,
}

impl EvaluationSummary {
    pub fn blend(&self, name: &str) -> Option<&FittedBlend> {
        self.blends.iter().find(|b| b.name == name)
    }

    pub fn comparison_row(&self, strategy: &str) -> Option<&ComparisonRow> {
        self.comparison.iter().find(|r| r.strategy == strategy)
    }

    pub fn activity_row(&self, strategy: &str) -> Option<&ActivityRow> {
        self.activity.iter().find(|r| r.strategy == strategy)
    }
}

struct Held {
    name: String,
    fit: BlendFit,
    schedule: HedgeSchedule,
    alpha: f64,
}

fn slice(r: &PnLReport) -> &[f64] {
    r.pnl.as_slice().expect("contiguous")
}

#[allow(clippy::too_many_arguments)]
fn fit_on_split(
    cfg: &RunConfig,
    name: &str,
    paths: &MarketPaths,
    ens: &EnsembleOutput,
    classical: &HedgeSchedule,
    objective: BlendObjective,
    extended: bool,
    train: &[usize],
    hold: &[usize],
) -> Result<Held> {
    let fit = stage(&format!("fit-blend {name}"), || {
        fit_blend_with(
            &paths.select(train),
            &ens.select(train),
            &classical.select(train),
            &cfg.cost,
            cfg.strike,
            objective,
            extended,
            &cfg.blend.settings(),
        )
    })?;
    let hp = paths.select(hold);
    let he = ens.select(hold);
    let features = extended.then(|| BlendFeatures::from_paths(&hp, cfg.strike));
    let alpha = alpha_matrix(&he.psi, &fit.params, features.as_ref())?;
    let schedule = blend_schedules(
        &he.mean_hedge,
        &classical.select(hold),
        &he.psi,
        &fit.params,
        features.as_ref(),
    )?
    .relabel(name);
    Ok(Held {
        name: name.into(),
        fit,
        schedule,
        alpha: alpha.mean().unwrap_or(f64::NAN),
    })
}

fn cvar_bootstrap(cfg: &RunConfig, a: &PnLReport, b: &PnLReport) -> Result<BootstrapResult> {
    paired_bootstrap(
        slice(a),
        slice(b),
        &RiskSpec::Cvar {
            level: cfg.eval.cvar_level,
        },
        cfg.eval.bootstrap_resamples,
        cfg.eval.bootstrap_seed,
    )
}

fn outcome(
    cfg: &RunConfig,
    eval_seed: u64,
    held: &Held,
    blend: &PnLReport,
    classical: &PnLReport,
    ww: &PnLReport,
) -> Result<BlendOutcome> {
    let level = cfg.eval.cvar_level;
    let boot = cvar_bootstrap(cfg, blend, classical)?;
    let (lo, hi) = boot.ci_bps();
    Ok(BlendOutcome {
        eval_seed,
        classical: classical.strategy_label.clone(),
        blend_cvar: cvar(slice(blend), level)?,
        classical_cvar: cvar(slice(classical), level)?,
        ww_cvar: cvar(slice(ww), level)?,
        improvement_bps: boot.mean_diff_bps(),
        ci_low_bps: lo,
        ci_high_bps: hi,
        significant: boot.excludes_zero(),
        avg_alpha: held.alpha,
        beta0: held.fit.params.beta0,
        beta1: held.fit.params.beta1,
    })
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_outcomes_csv(rows: &[BlendOutcome], path: &Path) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "eval_seed",
            "classical",
            "blend_cvar",
            "classical_cvar",
            "ww_cvar",
            "improvement_bps",
            "ci_low_bps",
            "ci_high_bps",
            "significant",
            "avg_alpha",
            "beta0",
            "beta1",
        ])?;
        w.flush()?;
        return Ok(());
    }
    write_rows(rows, path)
}

/// Per-path uncertainty and P&L: `path_id, psi_bar, terminal_moneyness, avg_vol, pnl_ensemble, pnl_bs_delta`.
fn write_path_csv(
    psi_bar: &Array1<f64>,
    paths: &MarketPaths,
    strike: f64,
    ens: &PnLReport,
    bs: &PnLReport,
    path: &Path,
) -> Result<()> {
    let m = terminal_moneyness(paths, strike);
    let v = average_path_volatility(paths);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "path_id",
        "psi_bar",
        "terminal_moneyness",
        "avg_vol",
        "pnl_ensemble",
        "pnl_bs_delta",
    ])?;
    for i in 0..paths.n_paths() {
        w.write_record([
            i.to_string(),
            format!("{:.10}", psi_bar[i]),
            format!("{:.10}", m[i]),
            format!("{:.10}", v[i]),
            format!("{:.10}", ens.pnl[i]),
            format!("{:.10}", bs.pnl[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One stability row: fresh evaluation paths, same members, CVaR blend against BS delta.
fn stability_row(cfg: &RunConfig, models: &[HedgerModel], seed: u64) -> Result<BlendOutcome> {
    let k = cfg.strike;
    let paths = simulate_eval_paths(cfg, seed)?;
    let ens = aggregate(models, &paths, k)?;
    let bs = bs_delta_strategy(&paths, k, cfg.fixed_vol())?;
    let ww = ww_strategy(
        &paths,
        k,
        cfg.fixed_vol(),
        cfg.cost.cost_rate,
        cfg.classical.ww_risk_aversion,
    )?;
    let (train, hold) = train_eval_split(
        paths.n_paths(),
        cfg.eval.split_fraction,
        cfg.eval.split_seed,
    )?;
    let held = fit_on_split(
        cfg,
        "blend_cvar",
        &paths,
        &ens,
        &bs,
        BlendObjective::Cvar {
            level: cfg.blend.cvar_level,
        },
        false,
        &train,
        &hold,
    )?;
    let hp = paths.select(&hold);
    let blend = compute_pnl(&hp, &held.schedule, &cfg.cost, k)?;
    let bs_r = compute_pnl(&hp, &bs.select(&hold), &cfg.cost, k)?;
    let ww_r = compute_pnl(&hp, &ww.select(&hold), &cfg.cost, k)?;
    outcome(cfg, seed, &held, &blend, &bs_r, &ww_r)
}

/// Every analysis of a trained ensemble on the configured evaluation paths.
pub fn evaluate_models(
    cfg: &RunConfig,
    models: &[HedgerModel],
    paths: &MarketPaths,
) -> Result<EvaluationSummary> {
    let out = cfg.output_dir.as_path();
    let k = cfg.strike;
    let cost = &cfg.cost;
    let level = cfg.eval.cvar_level;
    let cvar_obj = BlendObjective::Cvar {
        level: cfg.blend.cvar_level,
    };
    let ent_obj = BlendObjective::Entropic {
        risk_aversion: cfg.blend.entropic_risk_aversion,
    };

    let ens = stage("aggregate", || aggregate(models, paths, k))?;
    let bs = bs_delta_strategy(paths, k, cfg.fixed_vol())?;
    let bs_true = bs_delta_strategy(paths, k, VolMode::TrueInstantaneous)?;
    let ww = ww_strategy(
        paths,
        k,
        cfg.fixed_vol(),
        cost.cost_rate,
        cfg.classical.ww_risk_aversion,
    )?;
    let full = [&ens.mean_hedge, &bs, &bs_true, &ww]
        .iter()
        .map(|s| compute_pnl(paths, s, cost, k))
        .collect::<Result<Vec<_>>>()?;
    let (ens_r, bs_r) = (&full[0], &full[1]);
    let psi_bar = ens.psi_bar.as_slice().expect("contiguous");

    let (quintiles, correlations, heatmap_peak, activity) = stage("uncertainty", || {
        let q = quintile_analysis(slice(ens_r), slice(bs_r), psi_bar)?;
        write_quintiles_csv(&q, &out.join("table2_quintiles.csv"))?;
        let window = cfg.eval.winrate_window.min(paths.n_paths());
        let curve = rolling_winrate(slice(ens_r), slice(bs_r), psi_bar, window)?;
        write_winrate_csv(&curve, &out.join("fig1_winrate.csv"))?;
        let corr = uncertainty_correlations(psi_bar, paths, k)?;
        write_correlations_csv(&corr, &out.join("table3_correlations.csv"))?;
        let (mb, tb) = (cfg.eval.heatmap_moneyness_bins, cfg.eval.heatmap_time_bins);
        let map = match cfg.eval.heatmap_range {
            Some(range) => heatmap_in_range(&ens.psi, paths, k, mb, tb, range)?,
            None => heatmap_data(&ens.psi, paths, k, mb, tb)?,
        };
        write_heatmap_csv(&map, &out.join("fig2_heatmap.csv"))?;
        let n = paths.n_steps() as f64;
        let peak = map.argmax(PEAK_MIN_COUNT).map(|(i, j, v)| HeatmapPeak {
            moneyness: map.moneyness_center(i),
            time_fraction: 0.5 * (map.time_edges[j] + map.time_edges[j + 1]) as f64 / n,
            mean_psi: v,
        });
        write_path_csv(
            &ens.psi_bar,
            paths,
            k,
            ens_r,
            bs_r,
            &out.join("path_uncertainty.csv"),
        )?;
        let activity: Vec<ActivityRow> = full
            .iter()
            .map(|r| ActivityRow {
                strategy: r.strategy_label.clone(),
                mean_transaction_costs: r.transaction_costs.mean().unwrap_or(0.0),
                avg_trade_size: average_trade_size(r),
            })
            .collect();
        write_rows(&activity, &out.join("trading_activity.csv"))?;
        Ok((q, corr, peak, activity))
    })?;

    let (train, hold) = train_eval_split(
        paths.n_paths(),
        cfg.eval.split_fraction,
        cfg.eval.split_seed,
    )?;
    let mut specs = vec![
        ("blend_cvar", cvar_obj, false),
        ("blend_entropic", ent_obj, false),
    ];
    if cfg.blend.extended {
        specs.push(("blend_cvar_extended", cvar_obj, true));
        specs.push(("blend_entropic_extended", ent_obj, true));
    }
    let held: Vec<Held> = specs
        .iter()
        .map(|&(name, obj, ext)| fit_on_split(cfg, name, paths, &ens, &bs, obj, ext, &train, &hold))
        .collect::<Result<_>>()?;

    let (comparison, bootstrap, headline) = stage("compare", || {
        let hp = paths.select(&hold);
        let mut reports: Vec<PnLReport> = full.iter().map(|r| r.select(&hold)).collect();
        for h in &held {
            reports.push(compute_pnl(&hp, &h.schedule, cost, k)?);
        }
        let find = |label: &str| {
            reports
                .iter()
                .find(|r| r.strategy_label == label)
                .expect("known strategy")
        };
        let comparison = strategy_comparison(&reports, level)?;
        write_comparison_csv(&comparison, &out.join("table4_comparison.csv"))?;
        let bs_idx = reports
            .iter()
            .position(|r| r.strategy_label == bs.strategy_label)
            .expect("bs report");
        write_decomposition_csv(
            &decompose_pnl(&reports, bs_idx)?,
            &out.join("table6_decomposition.csv"),
        )?;

        let pairs = [
            ("blend_cvar", "bs_delta"),
            ("blend_cvar", "whalley_wilmott"),
            ("blend_cvar", "ensemble"),
            ("blend_entropic", "bs_delta"),
            ("ensemble", "bs_delta"),
        ];
        let mut bootstrap = pairs
            .iter()
            .map(|&(a, b)| {
                Ok(BootstrapRow {
                    comparison: format!("{a} vs {b}"),
                    metric: "cvar".into(),
                    result: cvar_bootstrap(cfg, find(a), find(b))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        bootstrap.push(BootstrapRow {
            comparison: "ensemble vs bs_delta".into(),
            metric: "mean".into(),
            result: paired_bootstrap(
                slice(find("ensemble")),
                slice(find("bs_delta")),
                &RiskSpec::Mean,
                cfg.eval.mean_bootstrap_resamples,
                cfg.eval.bootstrap_seed,
            )?,
        });
        write_bootstrap_csv(&bootstrap, &out.join("table5_bootstrap.csv"))?;

        let bars = reports
            .iter()
            .map(|r| {
                let ci = if r.strategy_label == bs.strategy_label {
                    None
                } else {
                    Some(cvar_bootstrap(cfg, r, find("bs_delta"))?)
                };
                Ok((r.strategy_label.clone(), cvar(slice(r), level)?, ci))
            })
            .collect::<Result<Vec<_>>>()?;
        write_cvar_bars_csv(&bars, &out.join("fig4_cvar_bars.csv"))?;

        let headline = outcome(
            cfg,
            cfg.eval.seed,
            &held[0],
            find("blend_cvar"),
            find("bs_delta"),
            find("whalley_wilmott"),
        )?;
        Ok((comparison, bootstrap, headline))
    })?;

    stage("blend-curves", || {
        let psi_max = ens.psi.iter().copied().fold(0.0f64, f64::max).max(1e-6);
        let grid = Array1::linspace(0.0, psi_max, 101);
        let curves: Vec<(String, Vec<f64>)> = held
            .iter()
            .filter(|h| !h.fit.params.is_extended())
            .map(|h| {
                (
                    h.name.clone(),
                    grid.iter()
                        .map(|&p| alpha_weight(p, None, &h.fit.params))
                        .collect(),
                )
            })
            .collect();
        write_blend_curves_csv(&grid, &curves, &out.join("fig3_blend_curves.csv"))?;
        for h in &held {
            h.fit.write_json(&out.join(format!("{}.json", h.name)))?;
        }
        Ok(())
    })?;

    let true_vol = stage("true-vol-blend", || {
        let h = fit_on_split(
            cfg,
            "blend_cvar_true_vol",
            paths,
            &ens,
            &bs_true,
            cvar_obj,
            false,
            &train,
            &hold,
        )?;
        let hp = paths.select(&hold);
        let blend = compute_pnl(&hp, &h.schedule, cost, k)?;
        let o = outcome(
            cfg,
            cfg.eval.seed,
            &h,
            &blend,
            &full[2].select(&hold),
            &full[3].select(&hold),
        )?;
        write_outcomes_csv(
            &[headline.clone(), o.clone()],
            &out.join("true_vol_blend.csv"),
        )?;
        Ok(o)
    })?;

    let stability = stage("seed-stability", || {
        let rows = cfg
            .eval
            .stability_seeds
            .iter()
            .map(|&s| {
                if s == cfg.eval.seed {
                    Ok(headline.clone())
                } else {
                    stability_row(cfg, models, s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        write_outcomes_csv(&rows, &out.join("seed_stability.csv"))?;
        Ok(rows)
    })?;

    let summary = EvaluationSummary {
        calibration: cfg.calibration.name().into(),
        n_eval_paths: paths.n_paths(),
        n_train: train.len(),
        n_holdout: hold.len(),
        quintiles,
        correlations,
        heatmap_peak,
        activity,
        comparison,
        bootstrap,
        blends: held
            .into_iter()
            .map(|h| FittedBlend {
                name: h.name,
                fit: h.fit,
                holdout_alpha: h.alpha,
            })
            .collect(),
        headline,
        true_vol,
        stability,
    };
    write_json(&summary, &out.join("summary.json"))?;
    Ok(summary)
}

/// Evaluation from the checkpoints stored in the output directory.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationSummary> {
    cfg.validate()?;
    guarded(&cfg.output_dir, || {
        let models = stage("load", || load_members(cfg))?;
        let paths = stage("simulate", || load_or_simulate(cfg))?;
        let s = evaluate_models(cfg, &models, &paths)?;
        write_manifest(cfg, "evaluate")?;
        Ok(s)
    })
}

/// Fits the configured blends only, writing their JSON files.
pub fn cmd_fit_blend(cfg: &RunConfig) -> Result<Vec<FittedBlend>> {
    cfg.validate()?;
    guarded(&cfg.output_dir, || {
        let models = stage("load", || load_members(cfg))?;
        let paths = stage("simulate", || load_or_simulate(cfg))?;
        let k = cfg.strike;
        let ens = stage("aggregate", || aggregate(&models, &paths, k))?;
        let bs = bs_delta_strategy(&paths, k, cfg.fixed_vol())?;
        let (train, hold) = train_eval_split(
            paths.n_paths(),
            cfg.eval.split_fraction,
            cfg.eval.split_seed,
        )?;
        let cvar_obj = BlendObjective::Cvar {
            level: cfg.blend.cvar_level,
        };
        let ent_obj = BlendObjective::Entropic {
            risk_aversion: cfg.blend.entropic_risk_aversion,
        };
        let mut specs = vec![
            ("blend_cvar", cvar_obj, false),
            ("blend_entropic", ent_obj, false),
        ];
        if cfg.blend.extended {
            specs.push(("blend_cvar_extended", cvar_obj, true));
            specs.push(("blend_entropic_extended", ent_obj, true));
        }
        let mut fits = Vec::new();
        for (name, obj, ext) in specs {
            let h = fit_on_split(cfg, name, &paths, &ens, &bs, obj, ext, &train, &hold)?;
            h.fit
                .write_json(&cfg.output_dir.join(format!("{name}.json")))?;
            fits.push(FittedBlend {
                name: h.name,
                fit: h.fit,
                holdout_alpha: h.alpha,
            });
        }
        write_manifest(cfg, "fit-blend")?;
        Ok(fits)
    })
}

/// Simulate, train, evaluate and export into `cfg.output_dir`.
pub fn full_pipeline(cfg: &RunConfig) -> Result<EvaluationSummary> {
    cfg.validate()?;
    guarded(&cfg.output_dir, || {
        let paths = stage("simulate", || simulate_eval_paths(cfg, cfg.eval.seed))?;
        let ens = train_stage(cfg)?;
        let s = stage("evaluate", || evaluate_models(cfg, &ens.models, &paths))?;
        write_manifest(cfg, "full-pipeline")?;
        Ok(s)
    })
}

// ---------------------------------------------------------------- cross-calibration

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossRow {
    pub calibration: String,
    pub blend_cvar: f64,
    pub bs_cvar: f64,
    pub improvement_bps: f64,
    pub ci_low_bps: f64,
    pub ci_high_bps: f64,
    pub significant: bool,
    pub avg_alpha: f64,
    pub ww_cvar: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub q1_win_rate: f64,
    pub q5_win_rate: f64,
    pub corr_moneyness: f64,
    pub corr_volatility: f64,
}

impl CrossRow {
    fn from_summary(name: &str, s: &EvaluationSummary) -> Self {
        let h = &s.headline;
        let wr = s.quintiles.win_rates();
        CrossRow {
            calibration: name.into(),
            blend_cvar: h.blend_cvar,
            bs_cvar: h.classical_cvar,
            improvement_bps: h.improvement_bps,
            ci_low_bps: h.ci_low_bps,
            ci_high_bps: h.ci_high_bps,
            significant: h.significant,
            avg_alpha: h.avg_alpha,
            ww_cvar: h.ww_cvar,
            beta0: h.beta0,
            beta1: h.beta1,
            q1_win_rate: wr[0],
            q5_win_rate: wr[wr.len() - 1],
            corr_moneyness: s.correlations.final_moneyness,
            corr_volatility: s.correlations.average_volatility,
        }
    }
}

/// Per-calibration sign record of the fitted disagreement coefficient and drivers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeRow {
    pub calibration: String,
    pub beta1: f64,
    pub beta1_negative: bool,
    pub quintile_gap: f64,
    pub corr_moneyness_positive: bool,
    pub corr_volatility_negative: bool,
}

/// Runs the full pipeline for every named calibration in `out/<name>`.
pub fn cross_calibration(cfg: &RunConfig) -> Result<Vec<CrossRow>> {
    let mut base = cfg.clone();
    base.heston = None;
    guarded(&cfg.output_dir, || {
        let mut rows = Vec::new();
        for cal in Calibration::NAMED {
            let sub = RunConfig {
                calibration: cal,
                output_dir: cfg.output_dir.join(cal.name()),
                ..base.clone()
            };
            let s = full_pipeline(&sub)
                .map_err(|e| e.in_stage(&format!("calibration {}", cal.name())))?;
            rows.push(CrossRow::from_summary(cal.name(), &s));
        }
        write_rows(&rows, &cfg.output_dir.join("table7_cross_calibration.csv"))?;
        let regime: Vec<RegimeRow> = rows
            .iter()
            .map(|r| RegimeRow {
                calibration: r.calibration.clone(),
                beta1: r.beta1,
                beta1_negative: r.beta1 < 0.0,
                quintile_gap: r.q1_win_rate - r.q5_win_rate,
                corr_moneyness_positive: r.corr_moneyness > 0.0,
                corr_volatility_negative: r.corr_volatility < 0.0,
            })
            .collect();
        write_rows(&regime, &cfg.output_dir.join("table8_regime.csv"))?;
        write_manifest(&base, "cross-calibration")?;
        Ok(rows)
    })
}
