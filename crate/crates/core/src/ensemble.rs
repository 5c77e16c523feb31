//! Deep ensembles of hedgers: independent training, per-step mean hedge and
//! disagreement.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::accounting::{CostSpec, HedgeSchedule};
use crate::error::{HedgeError, Result};
use crate::market_sim::{MarketPaths, PathGrid};
use crate::neural_hedger::{train_hedger, HedgerModel, MarketModel, TrainConfig};
use crate::rng::derive_seed;

const MEMBER_TAG: u64 = 0x454E_5345_4D42_0000;

/// Training seed of ensemble member `m`.
pub fn member_seed(seed: u64, m: usize) -> u64 {
    derive_seed(seed, MEMBER_TAG + m as u64)
}

/// Member hedges on a shared set of paths with their mean and spread.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub member_hedges: Vec<HedgeSchedule>,
    pub mean_hedge: HedgeSchedule,
    /// Per-step sample standard deviation across members, `[n_paths × n_steps]`.
    pub psi: Array2<f64>,
    /// Time average of `psi` per path.
    pub psi_bar: Array1<f64>,
}

impl EnsembleOutput {
    /// Aggregates precomputed member schedules over the same paths.
    pub fn from_schedules(members: Vec<HedgeSchedule>) -> Result<Self> {
        if members.is_empty() {
            return Err(HedgeError::EmptyInput("ensemble members"));
        }
        if members.len() < 2 {
            return Err(HedgeError::Undefined(
                "ensemble disagreement needs at least two members".into(),
            ));
        }
        let dim = members[0].delta.dim();
        if members.iter().any(|m| m.delta.dim() != dim) {
            return Err(HedgeError::dim("member schedules differ in shape"));
        }
        let k = members.len() as f64;
        let base = &members[0].delta;
        let mut sum = Array2::<f64>::zeros(dim);
        let mut sq = Array2::<f64>::zeros(dim);
        for m in &members[1..] {
            ndarray::Zip::from(&mut sum)
                .and(&mut sq)
                .and(&m.delta)
                .and(base)
                .for_each(|s, q, &d, &b| {
                    *s += d - b;
                    *q += (d - b) * (d - b);
                });
        }
        let mean = base + &(&sum / k);
        let psi = ndarray::Zip::from(&sum)
            .and(&sq)
            .map_collect(|&s, &q| ((q - s * s / k).max(0.0) / (k - 1.0)).sqrt());
        let psi_bar = psi.mean_axis(Axis(1)).expect("n_steps >= 1");
        Ok(EnsembleOutput {
            mean_hedge: HedgeSchedule::new(mean, "ensemble")?,
            member_hedges: members,
            psi,
            psi_bar,
        })
    }

    pub fn n_members(&self) -> usize {
        self.member_hedges.len()
    }

    pub fn select(&self, indices: &[usize]) -> EnsembleOutput {
        EnsembleOutput {
            member_hedges: self
                .member_hedges
                .iter()
                .map(|m| m.select(indices))
                .collect(),
            mean_hedge: self.mean_hedge.select(indices),
            psi: self.psi.select(Axis(0), indices),
            psi_bar: self.psi_bar.select(Axis(0), indices),
        }
    }

    /// `path_id, step, mean_delta, psi`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path_id", "step", "mean_delta", "psi"])?;
        for (p, (mrow, prow)) in self
            .mean_hedge
            .delta
            .rows()
            .into_iter()
            .zip(self.psi.rows())
            .enumerate()
        {
            for (t, (d, s)) in mrow.iter().zip(prow).enumerate() {
                w.write_record([p.to_string(), t.to_string(), d.to_string(), s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `path_id, psi_bar`
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path_id", "psi_bar"])?;
        for (p, v) in self.psi_bar.iter().enumerate() {
            w.write_record([p.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Independently trained members with their loss trajectories.
#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub models: Vec<HedgerModel>,
    pub seeds: Vec<u64>,
    pub losses: Vec<Vec<f64>>,
}

/// Trains `m` members with seeds derived from `config.seed`.
pub fn train_ensemble(
    m: usize,
    config: &TrainConfig,
    market: &MarketModel,
    grid: &PathGrid,
    cost: &CostSpec,
    strike: f64,
) -> Result<TrainedEnsemble> {
    if m < 2 {
        return Err(HedgeError::param(format!(
            "ensemble size must be >= 2, got {m}"
        )));
    }
    let seeds: Vec<u64> = (0..m).map(|i| member_seed(config.seed, i)).collect();
    train_ensemble_with_seeds(&seeds, config, market, grid, cost, strike)
}

/// Trains one member per explicit seed.
pub fn train_ensemble_with_seeds(
    seeds: &[u64],
    config: &TrainConfig,
    market: &MarketModel,
    grid: &PathGrid,
    cost: &CostSpec,
    strike: f64,
) -> Result<TrainedEnsemble> {
    let mut models = Vec::with_capacity(seeds.len());
    let mut losses = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        log::info!("training ensemble member {i} (seed {seed:#x})");
        let cfg = TrainConfig { seed, ..*config };
        let trained = train_hedger(&cfg, market, grid, cost, strike)
            .map_err(|e| e.in_stage(&format!("ensemble member {i}")))?;
        models.push(trained.model);
        losses.push(trained.losses);
    }
    Ok(TrainedEnsemble {
        models,
        seeds: seeds.to_vec(),
        losses,
    })
}

/// Runs every member on the shared paths and aggregates.
pub fn aggregate(
    members: &[HedgerModel],
    paths: &MarketPaths,
    strike: f64,
) -> Result<EnsembleOutput> {
    if members.is_empty() {
        return Err(HedgeError::EmptyInput("ensemble members"));
    }
    let schedules = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.forward_rollout(paths, strike)
                .map(|s| s.relabel(format!("member_{i}")))
                .map_err(|e| e.in_stage(&format!("ensemble member {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleOutput::from_schedules(schedules)
}

/// `member, epoch, loss`
pub fn write_losses_csv(ens: &TrainedEnsemble, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["member", "seed", "epoch", "loss"])?;
    for (i, (seed, losses)) in ens.seeds.iter().zip(&ens.losses).enumerate() {
        for (e, l) in losses.iter().enumerate() {
            w.write_record([
                i.to_string(),
                seed.to_string(),
                e.to_string(),
                l.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::{simulate_heston, HestonParams};
    use ndarray::array;
    use proptest::prelude::*;

    fn sched(d: Array2<f64>) -> HedgeSchedule {
        HedgeSchedule::new(d, "m").unwrap()
    }

    #[test]
    fn two_point_spread() {
        let out = EnsembleOutput::from_schedules(vec![
            sched(Array2::from_elem((3, 4), 0.4)),
            sched(Array2::from_elem((3, 4), 0.6)),
        ])
        .unwrap();
        for (&m, &p) in out.mean_hedge.delta.iter().zip(&out.psi) {
            assert!((m - 0.5).abs() < 1e-15);
            assert!((p - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        }
        assert!((out.psi_bar[0] - 0.141_421_356_237_309_5).abs() < 1e-12);
    }

    #[test]
    fn identical_members_have_no_spread() {
        let d = array![[0.1, 0.7], [0.3, -0.2]];
        let out = EnsembleOutput::from_schedules(vec![
            sched(d.clone()),
            sched(d.clone()),
            sched(d.clone()),
        ])
        .unwrap();
        assert!(out.psi.iter().all(|&p| p == 0.0));
        assert_eq!(out.mean_hedge.delta, d);
    }

    #[test]
    fn single_member_is_rejected() {
        let r = EnsembleOutput::from_schedules(vec![sched(Array2::zeros((1, 1)))]);
        assert!(matches!(r, Err(HedgeError::Undefined(_))));
        assert!(EnsembleOutput::from_schedules(vec![]).is_err());
    }

    #[test]
    fn forced_equal_seeds_give_identical_members() {
        let cfg = TrainConfig {
            epochs: 2,
            paths_per_epoch: 50,
            ..TrainConfig::desk()
        };
        let grid = PathGrid::new(8, 0.5).unwrap();
        let market = MarketModel::Heston(HestonParams::baseline());
        let cost = CostSpec::default();
        let same = train_ensemble_with_seeds(&[5, 5], &cfg, &market, &grid, &cost, 1.0).unwrap();
        assert_eq!(same.models[0], same.models[1]);
        let paths = simulate_heston(&HestonParams::baseline(), &grid, 40, 3).unwrap();
        let out = aggregate(&same.models, &paths, 1.0).unwrap();
        assert!(out.psi.iter().all(|&p| p == 0.0));

        let distinct = train_ensemble(3, &cfg, &market, &grid, &cost, 1.0).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(distinct.models[i].params(), distinct.models[j].params());
            }
        }
        assert!(train_ensemble(1, &cfg, &market, &grid, &cost, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn aggregation_properties(
            vals in prop::collection::vec(-2.0f64..2.0, 4 * 6),
            s in -3.0f64..3.0,
            shift in -1.0f64..1.0,
        ) {
            let members: Vec<Array2<f64>> = vals
                .chunks(6)
                .map(|c| Array2::from_shape_vec((2, 3), c.to_vec()).unwrap())
                .collect();
            let out = EnsembleOutput::from_schedules(members.iter().cloned().map(sched).collect()).unwrap();
            let mut rev: Vec<_> = members.iter().cloned().map(sched).collect();
            rev.reverse();
            let out_rev = EnsembleOutput::from_schedules(rev).unwrap();
            for (a, b) in out.psi.iter().zip(&out_rev.psi) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for ((idx, &m), &p) in out.mean_hedge.delta.indexed_iter().zip(&out.psi) {
                let lo = members.iter().map(|d| d[idx]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|d| d[idx]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                prop_assert!(p >= 0.0);
            }
            let scaled = EnsembleOutput::from_schedules(
                members.iter().map(|d| sched(d * s + shift)).collect(),
            ).unwrap();
            for (a, b) in scaled.psi.iter().zip(&out.psi) {
                prop_assert!((a - s.abs() * b).abs() < 1e-9);
            }
            for (p, row) in out.psi.rows().into_iter().enumerate() {
                prop_assert!((out.psi_bar[p] - row.mean().unwrap()).abs() < 1e-12);
            }
        }
    }
}
