//! Risk-neutral path simulation: Heston (full-truncation Euler) and GBM.
//!
//! Spot is advanced in log space,
//!
//! ```text
//! log S += -v⁺/2 dt + sqrt(v⁺ dt) z₁
//! v     += κ(θ - v⁺) dt + σ sqrt(v⁺ dt) (ρ z₁ + sqrt(1-ρ²) z₂)
//! ```
//!
//! with `v⁺ = max(v, 0)` and the stored variance floored at zero. Each path
//! draws from its own generator stream keyed by the path index.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::rng::stream_rng;

/// Heston model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub kappa: f64,
    pub theta: f64,
    pub sigma_vv: f64,
    pub rho: f64,
    pub v0: f64,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default)]
    pub rate: f64,
}

fn default_s0() -> f64 {
    1.0
}

impl HestonParams {
    /// κ=2, θ=0.04, σ=0.4, ρ=-0.7, v₀=0.04.
    pub fn baseline() -> Self {
        HestonParams {
            kappa: 2.0,
            theta: 0.04,
            sigma_vv: 0.4,
            rho: -0.7,
            v0: 0.04,
            s0: 1.0,
            rate: 0.0,
        }
    }

    /// Baseline with σ=0.8 (violates Feller).
    pub fn high_vol_of_vol() -> Self {
        HestonParams {
            sigma_vv: 0.8,
            ..Self::baseline()
        }
    }

    /// Baseline with ρ=-0.3 (weak leverage).
    pub fn low_correlation() -> Self {
        HestonParams {
            rho: -0.3,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.kappa,
            self.theta,
            self.sigma_vv,
            self.rho,
            self.v0,
            self.s0,
            self.rate,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(HedgeError::param("Heston parameters must be finite"));
        }
        if self.kappa <= 0.0 || self.theta <= 0.0 || self.sigma_vv <= 0.0 {
            return Err(HedgeError::param(format!(
                "kappa, theta and sigma_vv must be positive (got {}, {}, {})",
                self.kappa, self.theta, self.sigma_vv
            )));
        }
        if self.v0 < 0.0 || self.s0 <= 0.0 {
            return Err(HedgeError::param("v0 must be >= 0 and s0 > 0"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(HedgeError::param(format!(
                "rho {} outside [-1, 1]",
                self.rho
            )));
        }
        if self.rate != 0.0 {
            return Err(HedgeError::param("only a zero risk-free rate is supported"));
        }
        Ok(())
    }

    /// `2κθ > σ²`.
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.kappa * self.theta > self.sigma_vv * self.sigma_vv
    }

    /// Exact first moment of the CIR variance, `θ + (v₀-θ)e^{-κt}`.
    pub fn expected_variance(&self, t: f64) -> f64 {
        self.theta + (self.v0 - self.theta) * (-self.kappa * t).exp()
    }
}

pub fn feller_satisfied(params: &HestonParams) -> bool {
    params.feller_satisfied()
}

/// Equally spaced hedging grid on `[0, maturity]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathGrid {
    pub n_steps: usize,
    pub maturity: f64,
}

impl Default for PathGrid {
    fn default() -> Self {
        PathGrid {
            n_steps: 126,
            maturity: 0.5,
        }
    }
}

impl PathGrid {
    pub fn new(n_steps: usize, maturity: f64) -> Result<Self> {
        let grid = PathGrid { n_steps, maturity };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(HedgeError::param("n_steps must be >= 1"));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(HedgeError::param("maturity must be positive"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    /// Calendar time of grid point `t`.
    pub fn time(&self, t: usize) -> f64 {
        self.maturity * t as f64 / self.n_steps as f64
    }

    /// Time to expiry at grid point `t`; exactly zero at `t == n_steps`.
    pub fn tau(&self, t: usize) -> f64 {
        self.maturity * (self.n_steps - t) as f64 / self.n_steps as f64
    }
}

/// Simulated spot and variance trajectories, one row per path.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPaths {
    /// `[n_paths × (n_steps+1)]`
    pub spot: Array2<f64>,
    /// `[n_paths × (n_steps+1)]`
    pub variance: Array2<f64>,
    pub grid: PathGrid,
    pub seed: u64,
}

impl MarketPaths {
    pub fn n_paths(&self) -> usize {
        self.spot.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// Builds paths from explicit matrices, checking shape and sign invariants.
    pub fn from_arrays(
        spot: Array2<f64>,
        variance: Array2<f64>,
        grid: PathGrid,
        seed: u64,
    ) -> Result<Self> {
        grid.validate()?;
        if spot.dim() != variance.dim() || spot.ncols() != grid.n_steps + 1 {
            return Err(HedgeError::dim(format!(
                "spot {:?} / variance {:?} do not match a grid of {} steps",
                spot.dim(),
                variance.dim(),
                grid.n_steps
            )));
        }
        if spot.nrows() == 0 {
            return Err(HedgeError::EmptyInput("market paths"));
        }
        if spot.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(HedgeError::param(
                "spot must be strictly positive and finite",
            ));
        }
        if variance.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(HedgeError::param(
                "variance must be non-negative and finite",
            ));
        }
        Ok(MarketPaths {
            spot,
            variance,
            grid,
            seed,
        })
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> MarketPaths {
        MarketPaths {
            spot: self.spot.select(Axis(0), indices),
            variance: self.variance.select(Axis(0), indices),
            grid: self.grid,
            seed: self.seed,
        }
    }

    /// Terminal spot per path.
    pub fn terminal_spot(&self) -> ndarray::Array1<f64> {
        self.spot.column(self.grid.n_steps).to_owned()
    }

    /// Writes `path_id,step,spot,variance` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path_id", "step", "spot", "variance"])?;
        for p in 0..self.n_paths() {
            for t in 0..=self.grid.n_steps {
                w.write_record(&[
                    p.to_string(),
                    t.to_string(),
                    format!("{:.17e}", self.spot[[p, t]]),
                    format!("{:.17e}", self.variance[[p, t]]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Little-endian binary dump: magic `UQHP`, u32 version, u64 n_paths,
    /// u64 n_steps, f64 maturity, u64 seed, then spot and variance row-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"UQHP")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.n_paths() as u64).to_le_bytes())?;
        f.write_all(&(self.grid.n_steps as u64).to_le_bytes())?;
        f.write_all(&self.grid.maturity.to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for m in [&self.spot, &self.variance] {
            for x in m.iter() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cur = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(cur..cur + n)
                .ok_or_else(|| HedgeError::Format("truncated path file".into()))?;
            cur += n;
            Ok(s)
        };
        if take(4)? != b"UQHP" {
            return Err(HedgeError::Format("bad magic in path file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(HedgeError::Format(format!(
                "unsupported path file version {version}"
            )));
        }
        let n_paths = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n_steps = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let maturity = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let len = n_paths * (n_steps + 1);
        let mut read_matrix = || -> Result<Array2<f64>> {
            let raw = take(len * 8)?;
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Array2::from_shape_vec((n_paths, n_steps + 1), v).expect("length checked"))
        };
        let spot = read_matrix()?;
        let variance = read_matrix()?;
        MarketPaths::from_arrays(spot, variance, PathGrid::new(n_steps, maturity)?, seed)
    }
}

fn check_count(n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(HedgeError::EmptyInput("n_paths must be >= 1"));
    }
    Ok(())
}

fn assemble(rows: Vec<(Vec<f64>, Vec<f64>)>, grid: PathGrid, seed: u64) -> MarketPaths {
    let n_paths = rows.len();
    let width = grid.n_steps + 1;
    let mut spot = Array2::zeros((n_paths, width));
    let mut variance = Array2::zeros((n_paths, width));
    for (p, (s, v)) in rows.into_iter().enumerate() {
        spot.row_mut(p).assign(&ndarray::ArrayView1::from(&s));
        variance.row_mut(p).assign(&ndarray::ArrayView1::from(&v));
    }
    MarketPaths {
        spot,
        variance,
        grid,
        seed,
    }
}

/// Full-truncation Euler simulation of the Heston model.
pub fn simulate_heston(
    params: &HestonParams,
    grid: &PathGrid,
    n_paths: usize,
    seed: u64,
) -> Result<MarketPaths> {
    params.validate()?;
    grid.validate()?;
    check_count(n_paths)?;

    let dt = grid.dt();
    let n = grid.n_steps;
    let rho_perp = (1.0 - params.rho * params.rho).max(0.0).sqrt();
    let p = *params;

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream_rng(seed, path as u64);
            let mut s = Vec::with_capacity(n + 1);
            let mut v = Vec::with_capacity(n + 1);
            let mut log_s = p.s0.ln();
            let mut var = p.v0;
            s.push(p.s0);
            v.push(p.v0);
            for _ in 0..n {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let vp = var.max(0.0);
                let sd = (vp * dt).sqrt();
                log_s += -0.5 * vp * dt + sd * z1;
                var = var
                    + p.kappa * (p.theta - vp) * dt
                    + p.sigma_vv * sd * (p.rho * z1 + rho_perp * z2);
                var = var.max(0.0);
                s.push(log_s.exp());
                v.push(var);
            }
            (s, v)
        })
        .collect();
    Ok(assemble(rows, *grid, seed))
}

/// Zero-drift geometric Brownian motion with `S₀ = 1`; variance filled with `vol²`.
pub fn simulate_gbm(vol: f64, grid: &PathGrid, n_paths: usize, seed: u64) -> Result<MarketPaths> {
    if !(vol > 0.0 && vol.is_finite()) {
        return Err(HedgeError::param(format!(
            "GBM volatility must be positive, got {vol}"
        )));
    }
    grid.validate()?;
    check_count(n_paths)?;

    let dt = grid.dt();
    let n = grid.n_steps;
    let var = vol * vol;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream_rng(seed, path as u64);
            let mut s = Vec::with_capacity(n + 1);
            let mut log_s = 0.0f64;
            s.push(1.0);
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                log_s += -0.5 * var * dt + vol * dt.sqrt() * z;
                s.push(log_s.exp());
            }
            (s, vec![var; n + 1])
        })
        .collect();
    Ok(assemble(rows, *grid, seed))
}
