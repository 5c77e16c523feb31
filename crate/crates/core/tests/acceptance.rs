//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stdout
//! (uncaptured) and then asserts.
//!
//! Criteria 5-10 share one desk-scale baseline run, computed once. Criterion
//! 12 runs three further desk pipelines and only executes with
//! `UQHEDGE_EXTENDED=1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use uqhedge::blend::{blend_gradient_check, BlendObjective, BlendProblem};
use uqhedge::classical::bs_delta_strategy;
use uqhedge::ensemble::EnsembleOutput;
use uqhedge::neural_hedger::{gradient_check, Architecture, HedgerModel};
use uqhedge::pipeline::{self, EvaluationSummary, RunConfig, Scale};
use uqhedge::risk::{cvar, entropic_risk, mean, summary};
use uqhedge::rng::stream_rng;
use uqhedge::{simulate_heston, CostSpec, HestonParams, PathGrid, VolMode};

// Tolerances.
const GBM_MAE_MAX: f64 = 0.06;
const GBM_PRICE_TOL: f64 = 2e-3;
const MC_SE_MAX: f64 = 4.0;
const SIM_PATHS: usize = 50_000;
const SIM_SECONDS_MAX: f64 = 60.0;
const RISK_EXACT: f64 = 1e-10;
const RISK_RANDOM_VECTORS: usize = 1_000;
const GRAD_TOL: f64 = 1e-3;
const GRAD_TOL_SMOOTH: f64 = 1e-4;
const QUINTILE_GAP_MIN: f64 = 0.30;
const QUINTILE_INVERSIONS_MAX: usize = 1;
const CORR_MONEYNESS_MIN: f64 = 0.3;
const CORR_VOL_MAX: f64 = -0.1;
const ALPHA_CVAR_MIN: f64 = 0.5;
const ALPHA_ENTROPIC_MAX: f64 = 0.2;
const TRADE_SIZE_RATIO_MAX: f64 = 0.5;
const CROSS_SIGNIFICANT_MIN: usize = 2;

fn line(id: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[acceptance] {status} {id}: {detail}");
    let _ = out.flush();
}

fn skip(id: &str, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[acceptance] SKIP {id}: {detail}");
    let _ = out.flush();
}

fn check(id: &str, pass: bool, detail: String) {
    line(id, pass, &detail);
    assert!(pass, "{id}: {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    if d.exists() {
        fs::remove_dir_all(&d).unwrap();
    }
    d
}

fn desk_config(out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: out,
        ..RunConfig::default()
    };
    cfg.set_scale(Scale::Desk);
    cfg
}

fn desk() -> &'static (RunConfig, EvaluationSummary) {
    static DESK: OnceLock<(RunConfig, EvaluationSummary)> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_config(scratch("desk"));
        let t = Instant::now();
        let s = pipeline::full_pipeline(&cfg).expect("desk pipeline");
        line(
            "desk-run",
            true,
            &format!(
                "baseline desk pipeline finished in {:.0} s",
                t.elapsed().as_secs_f64()
            ),
        );
        (cfg, s)
    })
}

#[test]
fn c01_gbm_sanity() {
    let d = scratch("gbm");
    let cfg = desk_config(d);
    let r = pipeline::validate_gbm(&cfg).expect("gbm validation");
    let mae_ok = r.delta_mae <= GBM_MAE_MAX;
    let price_ok = r.price_error <= GBM_PRICE_TOL;
    let m: Vec<f64> = r.checkpoint_mae.iter().map(|c| c.1).collect();
    let rises = m.windows(2).filter(|w| w[1] > w[0]).count();
    line(
        "c01_aux mae-trajectory",
        rises <= 1,
        &format!("MAE every 25 epochs {m:.4?}, {rises} non-monotone step(s), at most 1 allowed"),
    );
    check(
        "c01 gbm-sanity",
        mae_ok && price_ok,
        format!(
            "delta MAE {:.4} (<= {GBM_MAE_MAX}), price {:.5} vs BS {:.5}, error {:.2e} (<= {GBM_PRICE_TOL:.0e})",
            r.delta_mae, r.network_price, r.bs_price, r.price_error
        ),
    );
}

#[test]
fn c02_simulator_oracles() {
    let t = Instant::now();
    let grid = PathGrid::default();
    let n = SIM_PATHS as f64;
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    let mut floor_bias = (0.0f64, String::new());
    for (name, p, cir_checked) in [
        ("baseline", HestonParams::baseline(), true),
        ("high_vov", HestonParams::high_vol_of_vol(), false),
        ("low_corr", HestonParams::low_correlation(), true),
    ] {
        let paths = simulate_heston(&p, &grid, SIM_PATHS, 11).unwrap();
        let (mut zv, mut zs) = (0.0f64, 0.0f64);
        for step in 1..=grid.n_steps {
            let v = paths.variance.column(step);
            let s = paths.spot.column(step);
            let dv = (v.mean().unwrap() - p.expected_variance(grid.time(step))).abs();
            zv = zv.max(dv / (v.std(1.0) / n.sqrt()));
            zs = zs.max((s.mean().unwrap() - p.s0).abs() / (s.std(1.0) / n.sqrt()));
        }
        if cir_checked {
            worst = worst.max(zv);
            notes.push(format!("{name}: v {zv:.2} se, S {zs:.2} se"));
        } else {
            floor_bias = (zv, format!("{name}: v {zv:.2} MC s.e. at worst grid time (floored variance, Feller violated)"));
            notes.push(format!("{name}: S {zs:.2} se"));
        }
        worst = worst.max(zs);
    }
    let secs = t.elapsed().as_secs_f64();
    line(
        "c02_aux high-vov-cir-mean",
        floor_bias.0 <= MC_SE_MAX,
        &floor_bias.1,
    );
    check(
        "c02 simulator-oracles",
        worst <= MC_SE_MAX && secs < SIM_SECONDS_MAX,
        format!(
            "worst deviation over all grid times {worst:.2} MC s.e. (<= {MC_SE_MAX}), {secs:.1} s (< {SIM_SECONDS_MAX}); {}",
            notes.join(", ")
        ),
    );
}

#[test]
fn c03_risk_measure_oracles() {
    let mut err = 0.0f64;
    let mut track = |got: f64, want: f64| err = err.max((got - want).abs());
    track(entropic_risk(&[0.37; 5], 1.0).unwrap(), -0.37);
    track(entropic_risk(&[1.0, -1.0], 1.0).unwrap(), 1f64.cosh().ln());
    let small = entropic_risk(&[0.0, 0.1], 1e-6).unwrap();
    let small_ok = (small + 0.05).abs() < 1e-6;
    track(cvar(&[-4.0, -3.0, -2.0, -1.0], 0.25).unwrap(), -4.0);
    track(cvar(&[-4.0, -3.0, -2.0, -1.0], 0.5).unwrap(), -3.5);
    for level in [0.01, 0.05, 0.3, 0.99] {
        track(cvar(&[-0.2; 7], level).unwrap(), -0.2);
    }
    let (m, s) = summary(&[1.0, 1.0, 1.0]).unwrap();
    track(m, 1.0);
    track(s, 0.0);
    let (m, s) = summary(&[0.0, 2.0]).unwrap();
    track(m, 1.0);
    track(s, 2f64.sqrt());
    let examples_ok = err <= RISK_EXACT && small_ok;

    let mut rng = stream_rng(0xACC, 3);
    let mut violations = 0usize;
    for _ in 0..RISK_RANDOM_VECTORS {
        let n = rng.random_range(1..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c = rng.random_range(-1.0..1.0);
        let a = rng.random_range(0.1..5.0);
        let level = rng.random_range(0.01..0.99);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let better: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.0..0.2)).collect();
        let e = entropic_risk(&x, a).unwrap();
        let q = cvar(&x, level).unwrap();
        let ok = (entropic_risk(&shifted, a).unwrap() - (e - c)).abs() <= 1e-12
            && (cvar(&shifted, level).unwrap() - (q + c)).abs() <= 1e-12
            && entropic_risk(&better, a).unwrap() <= e + 1e-15
            && cvar(&better, level).unwrap() >= q - 1e-15
            && e >= -mean(&x).unwrap() - 1e-15
            && (cvar(&x, 1.0).unwrap() - mean(&x).unwrap()).abs() <= 1e-12;
        if !ok {
            violations += 1;
        }
    }
    check(
        "c03 risk-oracles",
        examples_ok && violations == 0,
        format!(
            "max example error {err:.1e} (<= {RISK_EXACT:.0e}), small-a limit ok: {small_ok}, \
             property violations {violations}/{RISK_RANDOM_VECTORS}"
        ),
    );
}

#[test]
fn c04_gradient_checks() {
    let grid = PathGrid::new(20, 0.5).unwrap();
    let paths = simulate_heston(&HestonParams::baseline(), &grid, 32, 5).unwrap();
    let model = HedgerModel::init(Architecture::default(), 9);
    let with_cost = gradient_check(&model, &paths, &CostSpec::default(), 1.0, 20, 1e-5, 1).unwrap();
    let smooth =
        gradient_check(&model, &paths, &CostSpec::frictionless(), 1.0, 20, 1e-5, 1).unwrap();

    let bpaths = simulate_heston(&HestonParams::baseline(), &PathGrid::default(), 400, 6).unwrap();
    let bs = bs_delta_strategy(&bpaths, 1.0, VolMode::Fixed(0.2)).unwrap();
    let alt = bs_delta_strategy(&bpaths, 1.0, VolMode::TrueInstantaneous).unwrap();
    let other = bs_delta_strategy(&bpaths, 1.0, VolMode::Fixed(0.3)).unwrap();
    let ens = EnsembleOutput::from_schedules(vec![alt, other]).unwrap();
    let beta = [0.3, -4.0];
    let smooth_p = BlendProblem::new(
        &bpaths,
        &ens,
        &bs,
        &CostSpec::frictionless(),
        1.0,
        BlendObjective::entropic(),
        false,
    )
    .unwrap();
    let cost_p = BlendProblem::new(
        &bpaths,
        &ens,
        &bs,
        &CostSpec::default(),
        1.0,
        BlendObjective::entropic(),
        false,
    )
    .unwrap();
    let cvar_p = BlendProblem::new(
        &bpaths,
        &ens,
        &bs,
        &CostSpec::default(),
        1.0,
        BlendObjective::cvar(),
        false,
    )
    .unwrap();
    let b_smooth = blend_gradient_check(&smooth_p, &beta, 1e-3).unwrap();
    let b_cost = blend_gradient_check(&cost_p, &beta, 1e-4).unwrap();
    let b_cvar = blend_gradient_check(&cvar_p, &beta, 1e-5).unwrap();

    let pass = with_cost.max_relative_error < GRAD_TOL
        && smooth.max_relative_error < GRAD_TOL_SMOOTH
        && b_cost.max(b_cvar) < GRAD_TOL
        && b_smooth < GRAD_TOL_SMOOTH;
    check(
        "c04 gradient-checks",
        pass,
        format!(
            "hedger {:.1e} with costs / {:.1e} smooth; blend {b_cost:.1e} entropic+costs, {b_cvar:.1e} cvar, \
             {b_smooth:.1e} smooth (limits {GRAD_TOL:.0e} / {GRAD_TOL_SMOOTH:.0e})",
            with_cost.max_relative_error, smooth.max_relative_error
        ),
    );
}

#[test]
fn c05_uncertainty_predictiveness() {
    let (_, s) = desk();
    let w = s.quintiles.win_rates();
    let gap = w[0] - w[4];
    let inv = s.quintiles.inversions();
    check(
        "c05 quintile-win-rates",
        gap >= QUINTILE_GAP_MIN && inv <= QUINTILE_INVERSIONS_MAX,
        format!("win rates Q1..Q5 {w:.3?}, Q1-Q5 gap {gap:.3} (>= {QUINTILE_GAP_MIN}), inversions {inv} (<= {QUINTILE_INVERSIONS_MAX})"),
    );
}

#[test]
fn c06_uncertainty_drivers() {
    let (_, s) = desk();
    let c = s.correlations;
    check(
        "c06 uncertainty-drivers",
        c.final_moneyness >= CORR_MONEYNESS_MIN && c.average_volatility <= CORR_VOL_MAX,
        format!(
            "corr(psi_bar, S_T/K) {:+.3} (>= {CORR_MONEYNESS_MIN}), corr(psi_bar, avg vol) {:+.3} (<= {CORR_VOL_MAX})",
            c.final_moneyness, c.average_volatility
        ),
    );
}

#[test]
fn c07_blend_regime_split() {
    let (_, s) = desk();
    let a_cvar = s.blend("blend_cvar").unwrap().holdout_alpha;
    let a_ent = s.blend("blend_entropic").unwrap().holdout_alpha;
    check(
        "c07 blend-regimes",
        a_cvar > ALPHA_CVAR_MIN && a_ent < ALPHA_ENTROPIC_MAX,
        format!("mean alpha: cvar fit {a_cvar:.3} (> {ALPHA_CVAR_MIN}), entropic fit {a_ent:.3} (< {ALPHA_ENTROPIC_MAX})"),
    );
}

#[test]
fn c08_tail_risk_improvement() {
    let (cfg, s) = desk();
    let h = &s.headline;
    check(
        "c08 tail-improvement",
        h.blend_cvar > h.classical_cvar && h.ci_low_bps > 0.0,
        format!(
            "held-out CVaR blend {:.5} vs bs_delta {:.5}, improvement {:+.1} bps, 95% CI [{:+.1}, {:+.1}] over {} resamples",
            h.blend_cvar, h.classical_cvar, h.improvement_bps, h.ci_low_bps, h.ci_high_bps, cfg.eval.bootstrap_resamples
        ),
    );
}

#[test]
fn c09_strategy_ordering() {
    let (_, s) = desk();
    let row = |n: &str| s.comparison_row(n).unwrap();
    let (blend, bs, ww, ens) = (
        row("blend_cvar"),
        row("bs_delta"),
        row("whalley_wilmott"),
        row("ensemble"),
    );
    check(
        "c09 strategy-ordering",
        blend.cvar >= bs.cvar && bs.cvar >= ww.cvar && ens.std > bs.std,
        format!(
            "CVaR blend {:.5} >= bs {:.5} >= ww {:.5}; std ensemble {:.5} > bs {:.5}",
            blend.cvar, bs.cvar, ww.cvar, ens.std, bs.std
        ),
    );
}

#[test]
fn c10_trading_efficiency() {
    let (_, s) = desk();
    let (e, b) = (
        s.activity_row("ensemble").unwrap(),
        s.activity_row("bs_delta").unwrap(),
    );
    check(
        "c10 trading-efficiency",
        e.mean_transaction_costs < b.mean_transaction_costs && e.avg_trade_size < TRADE_SIZE_RATIO_MAX * b.avg_trade_size,
        format!(
            "mean costs ensemble {:.5} < bs {:.5}; trade size ensemble {:.4} < {TRADE_SIZE_RATIO_MAX} x bs {:.4}",
            e.mean_transaction_costs, b.mean_transaction_costs, e.avg_trade_size, b.avg_trade_size
        ),
    );
}

#[test]
fn c10_aux_desk_magnitudes() {
    let (_, s) = desk();
    let bs_trade = s.activity_row("bs_delta").unwrap().avg_trade_size;
    let bs = s.comparison_row("bs_delta").unwrap();
    let psi = s.quintiles.overall.avg_uncertainty;
    let peak = s.heatmap_peak;
    let peak_ok = peak.is_some_and(|p| p.moneyness > 1.0 && p.time_fraction > 0.5);
    let stab = s.stability.len() == 3;
    let pass = (0.015..=0.04).contains(&bs_trade)
        && (-0.06..=-0.05).contains(&bs.mean)
        && (0.012..=0.016).contains(&bs.std)
        && (0.01..=0.08).contains(&psi)
        && peak_ok
        && stab;
    line(
        "c10_aux desk-magnitudes",
        pass,
        &format!(
            "bs trade size {bs_trade:.4} in [0.015, 0.04]; bs held-out mean {:.4} in [-0.06, -0.05], std {:.4} in \
             [0.012, 0.016]; mean psi_bar {psi:.4} in [0.01, 0.08]; heatmap peak {peak:?} (moneyness > 1, later half); \
             {} stability rows",
            bs.mean,
            bs.std,
            s.stability.len()
        ),
    );
    assert!(pass);
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn c11_determinism() {
    let small = |out: PathBuf| {
        let mut cfg = desk_config(out);
        cfg.ensemble_size = 3;
        cfg.train.epochs = 4;
        cfg.train.paths_per_epoch = 500;
        cfg.eval.paths = 2_000;
        cfg.eval.bootstrap_resamples = 500;
        cfg.eval.mean_bootstrap_resamples = 500;
        cfg.blend.iterations = 200;
        cfg
    };
    let (a, b) = (scratch("det_a"), scratch("det_b"));
    pipeline::full_pipeline(&small(a.clone())).unwrap();
    pipeline::full_pipeline(&small(b.clone())).unwrap();
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let fresh_same = fa == fb && !fa.is_empty();

    let (cfg, _) = desk();
    let first = csv_files(&cfg.output_dir);
    let redo = RunConfig {
        output_dir: scratch("desk_reeval"),
        ..cfg.clone()
    };
    fs::create_dir_all(redo.output_dir.join(pipeline::MEMBERS_DIR)).unwrap();
    for i in 0..cfg.ensemble_size {
        let name = format!("member_{i}.json");
        fs::copy(
            cfg.output_dir.join(pipeline::MEMBERS_DIR).join(&name),
            redo.output_dir.join(pipeline::MEMBERS_DIR).join(&name),
        )
        .unwrap();
    }
    pipeline::cmd_evaluate(&redo).unwrap();
    let mut second = csv_files(&redo.output_dir);
    let mut first_eval = first.clone();
    first_eval.retain(|(n, _)| n != "training_losses.csv");
    second.retain(|(n, _)| n != "training_losses.csv");
    let desk_same = first_eval == second;
    check(
        "c11 determinism",
        fresh_same && desk_same,
        format!(
            "reduced full pipeline twice: {} CSVs identical = {fresh_same}; desk run re-evaluated from checkpoints: \
             {} CSVs identical = {desk_same}",
            fa.len(),
            first_eval.len()
        ),
    );
}

#[test]
fn c12_cross_calibration() {
    if std::env::var("UQHEDGE_EXTENDED").as_deref() != Ok("1") {
        skip(
            "c12 cross-calibration",
            "three additional desk pipelines; set UQHEDGE_EXTENDED=1 to run",
        );
        return;
    }
    let cfg = desk_config(scratch("cross"));
    let rows = pipeline::cross_calibration(&cfg).unwrap();
    let sig = rows
        .iter()
        .filter(|r| r.improvement_bps > 0.0 && r.significant)
        .count();
    let alpha = |n: &str| rows.iter().find(|r| r.calibration == n).unwrap().avg_alpha;
    let low_beta1 = rows
        .iter()
        .find(|r| r.calibration == "low_corr")
        .unwrap()
        .beta1;
    line(
        "c12_aux regime-inversion",
        true,
        &format!("low_corr beta1 {low_beta1:+.3} (recorded, not gated)"),
    );
    check(
        "c12 cross-calibration",
        sig >= CROSS_SIGNIFICANT_MIN && alpha("high_vov") < alpha("baseline"),
        format!(
            "{sig}/3 calibrations positive and significant (>= {CROSS_SIGNIFICANT_MIN}); mean alpha high_vov {:.3} < baseline {:.3}; rows {:?}",
            alpha("high_vov"),
            alpha("baseline"),
            rows.iter().map(|r| (r.calibration.as_str(), r.improvement_bps, r.significant)).collect::<Vec<_>>()
        ),
    );
}
