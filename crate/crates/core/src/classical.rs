//! Black-Scholes delta/gamma and the Whalley-Wilmott no-transaction band.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::accounting::HedgeSchedule;
use crate::error::{HedgeError, Result};
use crate::market_sim::MarketPaths;

/// Floor applied to `√v_t` when a true-volatility strategy sees an absorbed variance.
pub const MIN_VOL: f64 = 1e-6;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BSInputs {
    pub spot: f64,
    pub strike: f64,
    pub vol: f64,
    pub tau: f64,
}

impl BSInputs {
    pub fn new(spot: f64, strike: f64, vol: f64, tau: f64) -> Self {
        BSInputs {
            spot,
            strike,
            vol,
            tau,
        }
    }

    fn d1(&self) -> f64 {
        ((self.spot / self.strike).ln() + 0.5 * self.vol * self.vol * self.tau)
            / (self.vol * self.tau.sqrt())
    }
}

/// Volatility fed to the Black-Scholes formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolMode {
    Fixed(f64),
    TrueInstantaneous,
}

impl VolMode {
    fn vol_at(&self, variance: f64) -> f64 {
        match *self {
            VolMode::Fixed(v) => v,
            VolMode::TrueInstantaneous => variance.sqrt().max(MIN_VOL),
        }
    }

    fn validate(&self) -> Result<()> {
        if let VolMode::Fixed(v) = *self {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HedgeError::param(format!(
                    "fixed volatility must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `N(d₁)`; at expiry the indicator `1{S>K}` with ½ at the money.
pub fn bs_delta(inp: &BSInputs) -> f64 {
    if inp.tau <= 0.0 || inp.vol * inp.tau.sqrt() == 0.0 {
        return if inp.spot > inp.strike {
            1.0
        } else if inp.spot < inp.strike {
            0.0
        } else {
            0.5
        };
    }
    norm_cdf(inp.d1())
}

/// `φ(d₁) / (S σ √τ)`.
pub fn bs_gamma(inp: &BSInputs) -> Result<f64> {
    if inp.tau <= 0.0 {
        return Err(HedgeError::Boundary("gamma is undefined at expiry".into()));
    }
    Ok(norm_pdf(inp.d1()) / (inp.spot * inp.vol * inp.tau.sqrt()))
}

/// Undiscounted call price (zero rate).
pub fn bs_call_price(inp: &BSInputs) -> f64 {
    if inp.tau <= 0.0 {
        return (inp.spot - inp.strike).max(0.0);
    }
    let d1 = inp.d1();
    let d2 = d1 - inp.vol * inp.tau.sqrt();
    inp.spot * norm_cdf(d1) - inp.strike * norm_cdf(d2)
}

/// Delta-hedging schedule evaluated at every decision date.
pub fn bs_delta_strategy(
    paths: &MarketPaths,
    strike: f64,
    vmode: VolMode,
) -> Result<HedgeSchedule> {
    vmode.validate()?;
    let n = paths.n_steps();
    let grid = paths.grid;
    let delta = Array2::from_shape_fn((paths.n_paths(), n), |(p, t)| {
        let vol = vmode.vol_at(paths.variance[[p, t]]);
        bs_delta(&BSInputs::new(paths.spot[[p, t]], strike, vol, grid.tau(t)))
    });
    let label = match vmode {
        VolMode::Fixed(_) => "bs_delta",
        VolMode::TrueInstantaneous => "bs_delta_true_vol",
    };
    HedgeSchedule::new(delta, label)
}

/// `(3 c Γ² S / 2a)^{1/3}`.
pub fn ww_band_halfwidth(inp: &BSInputs, cost_rate: f64, risk_aversion: f64) -> Result<f64> {
    if !(risk_aversion > 0.0) {
        return Err(HedgeError::param("risk aversion must be positive"));
    }
    let gamma = bs_gamma(inp)?;
    Ok((3.0 * cost_rate * gamma * gamma * inp.spot / (2.0 * risk_aversion)).cbrt())
}

/// Whalley-Wilmott band strategy: hold inside the band, otherwise move to the nearest edge.
///
/// The band is only evaluated while `τ ≥ dt`; any decision closer to expiry
/// reuses the last band computed on that path.
pub fn ww_strategy(
    paths: &MarketPaths,
    strike: f64,
    vmode: VolMode,
    cost_rate: f64,
    risk_aversion: f64,
) -> Result<HedgeSchedule> {
    vmode.validate()?;
    if !(risk_aversion > 0.0) {
        return Err(HedgeError::param("risk aversion must be positive"));
    }
    let n = paths.n_steps();
    let grid = paths.grid;
    let dt = grid.dt();
    let mut delta = Array2::zeros((paths.n_paths(), n));
    for p in 0..paths.n_paths() {
        let mut pos = 0.0;
        let mut band = 0.0;
        for t in 0..n {
            let inp = BSInputs::new(
                paths.spot[[p, t]],
                strike,
                vmode.vol_at(paths.variance[[p, t]]),
                grid.tau(t),
            );
            let center = bs_delta(&inp);
            // relative slack absorbs the rounding in T(n-t)/n
            if inp.tau >= dt * (1.0 - 1e-12) {
                band = ww_band_halfwidth(&inp, cost_rate, risk_aversion)?;
            }
            let (lo, hi) = (center - band, center + band);
            if pos < lo {
                pos = lo;
            } else if pos > hi {
                pos = hi;
            }
            delta[[p, t]] = pos;
        }
    }
    HedgeSchedule::new(delta, "whalley_wilmott")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::{compute_pnl, CostSpec};
    use crate::market_sim::{simulate_heston, HestonParams, PathGrid};

    fn frozen_paths(spot: f64, var: f64, n_paths: usize) -> MarketPaths {
        let grid = PathGrid::default();
        MarketPaths::from_arrays(
            Array2::from_elem((n_paths, grid.n_steps + 1), spot),
            Array2::from_elem((n_paths, grid.n_steps + 1), var),
            grid,
            0,
        )
        .unwrap()
    }

    #[test]
    fn delta_reference_values() {
        assert!((bs_delta(&BSInputs::new(2.0, 1.0, 0.2, 0.5)) - 1.0).abs() < 1e-6);
        // d₁ = 0.01 / (0.2 √0.5) = 0.0707106781; reference values from 30-digit arithmetic
        let atm = bs_delta(&BSInputs::new(1.0, 1.0, 0.2, 0.5));
        assert!((atm - 0.528_185_988_898_508_3).abs() < 1e-12, "{atm}");
        assert_eq!(bs_delta(&BSInputs::new(1.1, 1.0, 0.2, 0.0)), 1.0);
        assert_eq!(bs_delta(&BSInputs::new(0.9, 1.0, 0.2, 0.0)), 0.0);
        assert_eq!(bs_delta(&BSInputs::new(1.0, 1.0, 0.2, 0.0)), 0.5);
    }

    #[test]
    fn gamma_reference_values() {
        let g = bs_gamma(&BSInputs::new(1.0, 1.0, 0.2, 0.5)).unwrap();
        // φ(0.0707106781) / (0.2·√0.5)
        assert!((g - 2.813_904_356_065_048).abs() < 1e-9, "{g}");
        assert!(bs_gamma(&BSInputs::new(0.3, 1.0, 0.2, 0.5)).unwrap() < 1e-6);
        assert!(matches!(
            bs_gamma(&BSInputs::new(1.0, 1.0, 0.2, 0.0)),
            Err(HedgeError::Boundary(_))
        ));
    }

    #[test]
    fn gamma_peaks_near_zero_d1() {
        let (mut best_s, mut best_g) = (0.0, 0.0);
        for i in 0..=2000 {
            let s = 0.5 + i as f64 * 0.0005;
            let g = bs_gamma(&BSInputs::new(s, 1.0, 0.2, 0.5)).unwrap();
            if g > best_g {
                best_g = g;
                best_s = s;
            }
        }
        // Γ(S) ∝ φ(d₁)/S peaks where d₁ = -σ√τ, i.e. S = K·exp(-3σ²τ/2)
        let expected = (-1.5f64 * 0.04 * 0.5).exp();
        assert!((best_s - expected).abs() < 1e-3, "{best_s} vs {expected}");
        let d1 = (best_s.ln() + 0.5 * 0.04 * 0.5) / (0.2 * 0.5f64.sqrt());
        assert!(d1.abs() < 0.2);
    }

    #[test]
    fn analytic_atm_price() {
        let p = bs_call_price(&BSInputs::new(1.0, 1.0, 0.2, 0.5));
        assert!((p - 0.056_371_977_797_016_6).abs() < 1e-12, "{p}");
    }

    #[test]
    fn band_reference_values() {
        let inp = BSInputs::new(1.0, 1.0, 0.2, 0.5);
        let g = bs_gamma(&inp).unwrap();
        let w = ww_band_halfwidth(&inp, 5e-4, 1.0).unwrap();
        assert!((w - (1.5e-3 * g * g / 2.0).cbrt()).abs() < 1e-15);
        assert!((w - 0.18110).abs() < 5e-5, "{w}");
        assert_eq!(ww_band_halfwidth(&inp, 0.0, 1.0).unwrap(), 0.0);
        let w8 = ww_band_halfwidth(&inp, 8.0 * 5e-4, 1.0).unwrap();
        assert!((w8 - 2.0 * w).abs() < 1e-14);
        assert!(ww_band_halfwidth(&BSInputs::new(1.0, 1.0, 0.2, 0.0), 5e-4, 1.0).is_err());
    }

    #[test]
    fn delta_strategy_on_pinned_atm_path_declines_toward_half() {
        let paths = frozen_paths(1.0, 0.04, 1);
        let h = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        let row = h.delta.row(0);
        for t in 0..row.len() {
            assert!(row[t] > 0.5);
            if t > 0 {
                assert!(row[t] < row[t - 1]);
            }
        }
    }

    #[test]
    fn delta_strategy_deep_otm_is_small() {
        let paths = frozen_paths(0.5, 0.04, 1);
        let h = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        assert!(h.delta.iter().all(|&d| d < 0.05));
    }

    #[test]
    fn true_vol_equals_fixed_vol_when_variance_is_constant() {
        let grid = PathGrid::default();
        let mut paths = simulate_heston(&HestonParams::baseline(), &grid, 5, 1).unwrap();
        paths.variance.fill(0.04);
        let a = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        let b = bs_delta_strategy(&paths, 1.0, VolMode::TrueInstantaneous).unwrap();
        assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn zero_cost_band_is_delta_hedging() {
        let grid = PathGrid::default();
        let paths = simulate_heston(&HestonParams::baseline(), &grid, 20, 1).unwrap();
        let bs = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        let ww = ww_strategy(&paths, 1.0, VolMode::Fixed(0.2), 0.0, 1.0).unwrap();
        assert_eq!(bs.delta, ww.delta);
    }

    #[test]
    fn frozen_spot_trades_at_most_once_after_entry() {
        let paths = frozen_paths(1.0, 0.04, 1);
        let ww = ww_strategy(&paths, 1.0, VolMode::Fixed(0.2), 5e-4, 1.0).unwrap();
        let row = ww.delta.row(0);
        let trades_after_entry = (1..row.len()).filter(|&t| row[t] != row[t - 1]).count();
        assert!(trades_after_entry <= 1, "{trades_after_entry}");
    }

    #[test]
    fn band_trades_less_than_delta_hedging() {
        let grid = PathGrid::default();
        let paths = simulate_heston(&HestonParams::baseline(), &grid, 500, 21).unwrap();
        let cost = CostSpec::default();
        let bs = bs_delta_strategy(&paths, 1.0, VolMode::Fixed(0.2)).unwrap();
        let ww = ww_strategy(&paths, 1.0, VolMode::Fixed(0.2), cost.cost_rate, 1.0).unwrap();
        let rb = compute_pnl(&paths, &bs, &cost, 1.0).unwrap();
        let rw = compute_pnl(&paths, &ww, &cost, 1.0).unwrap();
        assert!(rw.trades.sum() < rb.trades.sum());
        for p in 0..500 {
            let nb = rb.trades.row(p).iter().filter(|&&x| x > 0.0).count();
            let nw = rw.trades.row(p).iter().filter(|&&x| x > 0.0).count();
            assert!(nw <= nb);
        }
        // positions sit inside the band after each decision
        for p in 0..50 {
            for t in 0..grid.n_steps {
                let inp = BSInputs::new(paths.spot[[p, t]], 1.0, 0.2, grid.tau(t));
                let c = bs_delta(&inp);
                let w = ww_band_halfwidth(&inp, cost.cost_rate, 1.0).unwrap();
                let d = ww.delta[[p, t]];
                assert!(d >= c - w - 1e-12 && d <= c + w + 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn delta_is_monotone_and_bounded(s1 in 0.2f64..3.0, s2 in 0.2f64..3.0, tau in 0.0f64..1.0, vol in 0.05f64..1.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = bs_delta(&BSInputs::new(lo, 1.0, vol, tau));
            let b = bs_delta(&BSInputs::new(hi, 1.0, vol, tau));
            proptest::prop_assert!(a <= b);
            proptest::prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            if tau > 0.0 {
                proptest::prop_assert!(bs_gamma(&BSInputs::new(lo, 1.0, vol, tau)).unwrap() >= 0.0);
            }
        }
    }
}
