//! Orchestration shared by the `run` and `density` subcommands.

use anyhow::Context;
use minattn::density::{estimate_density, DensityField, SampleExecutor};
use minattn::dynamics::TwoLinkArm;
use minattn::optimizer::{SolveResult, Solver, SolverConfig};
use minattn::rollout::Trajectory;
use minattn::schedules::ControlLaw;

use crate::config::RunConfig;
use crate::output::{self, Artifact, Stamp};

/// A validated configuration with everything needed to start a solve.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub solver: SolverConfig,
    pub arm: TwoLinkArm,
    pub stamp: Stamp,
}

impl Prepared {
    pub fn new(mut config: RunConfig, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            config.sampling.seed = s;
        }
        let solver = config.solver_config()?;
        let arm = TwoLinkArm::new(config.arm.params()).context("arm parameters")?;
        let stamp = Stamp {
            config_hash: config.hash(),
            seed: config.sampling.seed,
        };
        Ok(Self {
            config,
            solver,
            arm,
            stamp,
        })
    }

    pub fn solve(&self, executor: &dyn SampleExecutor) -> anyhow::Result<SolveResult> {
        let solver = Solver::new(&self.arm, &self.solver, executor)?;
        Ok(solver.solve()?)
    }

    pub fn artifacts(&self, result: &SolveResult) -> Vec<Artifact> {
        let s = &self.stamp;
        vec![
            output::cost_history(result, s),
            output::law("law_initial.csv", &result.init.law, s),
            output::law("law_final.csv", &result.law, s),
            output::trajectory(
                "trajectory_initial.csv",
                &result.initial_trajectory,
                &result.init.law,
                s,
            ),
            output::trajectory("trajectory_final.csv", &result.final_trajectory, &result.law, s),
            output::fk_path(&result.final_trajectory, &self.arm.params, s),
            output::marginals(&result.final_field, s),
            output::diagnostics(result, s),
        ]
    }

    /// Density of the initial law only, without optimizing.
    pub fn density(&self, executor: &dyn SampleExecutor) -> anyhow::Result<(DensityField, Vec<Artifact>)> {
        let solver = Solver::new(&self.arm, &self.solver, executor)?;
        let init = solver.initialize()?;
        let field = estimate_density(
            &self.arm,
            &init.law,
            solver.initial_density(),
            &self.solver.phase_box,
            &self.solver.monte_carlo(),
            executor,
        )?;
        let artifacts = vec![
            output::marginals(&field, &self.stamp),
            output::field(&field, &self.stamp),
        ];
        Ok((field, artifacts))
    }
}

/// Mean of `|K x| / |v|` over the first and last quarter of the nodes.
pub fn feedback_ratios(law: &ControlLaw, traj: &Trajectory) -> (f64, f64) {
    let n = law.grid().intervals();
    let ratio = |i: usize| (&law.gains()[i] * &traj.states[i]).norm() / law.feedforward()[i].norm();
    let mean = |lo: usize, hi: usize| (lo..=hi).map(ratio).sum::<f64>() / (hi - lo + 1) as f64;
    (mean(0, n / 4), mean(n - n / 4, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use minattn::density::Sequential;
    use minattn::schedules::TimeGrid;
    use minattn::{DMatrix, DVector};

    #[test]
    fn quarter_ratios_hand_values() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let gains = (0..9).map(|i| DMatrix::from_element(1, 1, i as f64)).collect();
        let law = ControlLaw::new(grid, gains, vec![DVector::from_element(1, 2.0); 9]).unwrap();
        let traj = Trajectory {
            grid,
            states: vec![DVector::from_element(1, 1.0); 9],
            controls: vec![DVector::zeros(1); 9],
            sensitivities: None,
        };
        let (first, last) = feedback_ratios(&law, &traj);
        assert_eq!(first, (0.0 + 1.0 + 2.0) / 2.0 / 3.0);
        assert_eq!(last, (6.0 + 7.0 + 8.0) / 2.0 / 3.0);
    }

    #[test]
    fn seed_override_changes_stamp() {
        let a = Prepared::new(RunConfig::experiment1(), None).unwrap();
        let b = Prepared::new(RunConfig::experiment1(), Some(99)).unwrap();
        assert_eq!(b.stamp.seed, 99);
        assert_eq!(b.solver.seed, 99);
        assert_ne!(a.stamp.config_hash, b.stamp.config_hash);
    }

    #[test]
    fn density_subcommand_artifacts() {
        let mut c = RunConfig::experiment1();
        c.sampling.trackmax = 50;
        let p = Prepared::new(c, None).unwrap();
        let (field, files) = p.density(&Sequential).unwrap();
        assert_eq!(field.trackmax(), 50);
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.bytes.starts_with(b"# config_hash=")));
    }
}
