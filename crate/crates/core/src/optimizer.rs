//! Outer gradient loop with the halving line search.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::adjoint::{lambda_schedule, TerminalObjective};
use crate::cost::{
    attention_running_cost, terminal_cost_density, terminal_cost_endpoint, AttentionScale, CostBreakdown,
};
use crate::density::{
    estimate_density, DensityField, MonteCarloOptions, PhaseBox, SampleExecutor, SmoothedDelta, TargetDensity,
};
use crate::dynamics::{System, TaskSpace};
use crate::error::invalid;
use crate::gradient::{apply, compute_direction, ellipticity_constants, Ellipticity, UpdateDirection};
use crate::lqr::{initialize, InitOptions, Initialization, RiccatiOptions};
use crate::rollout::{integrate_closed_loop, propagate_sensitivity, RolloutOptions, Trajectory};
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

/// Terminal part of the cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    /// Expected squared task-space miss, weighted by `gamma`.
    #[default]
    Endpoint,
    /// Squared `L2` distance between the terminal and target densities.
    DensityMismatch,
}

/// What a line-search trial is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceptanceRule {
    /// Accept the first trial whose cost does not exceed the incumbent cost.
    #[default]
    OuterCost,
    /// Accept the first trial (after the first) whose cost does not exceed
    /// the previous trial's cost.
    TrialToTrial,
}

/// Orientation of the step along the computed direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DirectionSign {
    /// `K + eps dK`, `v + eps dv`.
    #[default]
    Descent,
    /// `K - eps dK`, `v - eps dv`.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchExhausted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIterations => "max-iterations",
            Self::LineSearchExhausted => "line-search-exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub horizon: f64,
    pub intervals: usize,
    pub substeps: usize,
    pub divergence_bound: f64,
    pub phase_box: PhaseBox,
    /// Kernel half-width in cells.
    pub support_cells: usize,
    pub gamma: f64,
    pub eps0: f64,
    pub eps_tol: f64,
    pub eps_floor: f64,
    pub trackmax: usize,
    pub seed: u64,
    pub chunks: usize,
    /// Terminal Riccati weight in state order.
    pub p_f: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_init: DVector<f64>,
    pub target: DVector<f64>,
    pub mode: TerminalMode,
    pub acceptance: AcceptanceRule,
    pub sign: DirectionSign,
    pub scale: AttentionScale,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive, got {v}")))
            }
        }
        positive("horizon", self.horizon)?;
        positive("gamma", self.gamma)?;
        positive("eps0", self.eps0)?;
        positive("eps_tol", self.eps_tol)?;
        positive("eps_floor", self.eps_floor)?;
        positive("divergence_bound", self.divergence_bound)?;
        for (name, v) in [
            ("intervals", self.intervals),
            ("substeps", self.substeps),
            ("support_cells", self.support_cells),
            ("trackmax", self.trackmax),
            ("chunks", self.chunks),
            ("max_outer", self.max_outer),
            ("max_inner", self.max_inner),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.intervals < 2 {
            return Err(invalid("intervals", "must be at least 2"));
        }
        let n = self.phase_box.dim();
        if self.x_init.len() != n || self.p_f.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "box is {n}-D but x_init has {} entries and p_f is {}x{}",
                self.x_init.len(),
                self.p_f.nrows(),
                self.p_f.ncols()
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.intervals)
    }

    pub fn rollout(&self) -> RolloutOptions {
        RolloutOptions {
            substeps: self.substeps,
            divergence_bound: self.divergence_bound,
        }
    }

    pub fn monte_carlo(&self) -> MonteCarloOptions {
        MonteCarloOptions {
            trackmax: self.trackmax,
            seed: self.seed,
            chunks: self.chunks,
            rollout: self.rollout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOptions {
    pub max_inner: usize,
    pub eps_floor: f64,
    pub rule: AcceptanceRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome<T> {
    /// Accepted step, its cost and payload.
    pub accepted: Option<(f64, f64, T)>,
    /// Every trial as `(eps, cost)`; `None` marks a trial that failed to
    /// evaluate (for example a diverging rollout).
    pub trials: Vec<(f64, Option<f64>)>,
}

/// Halve `eps` from `eps_start` until a trial is accepted.
///
/// `trial` returns `Ok(None)` for a step whose cost cannot be evaluated;
/// such a trial is rejected and the search continues.
pub fn line_search<T>(
    incumbent: f64,
    eps_start: f64,
    opts: &LineSearchOptions,
    mut trial: impl FnMut(f64) -> Result<Option<(f64, T)>>,
) -> Result<LineSearchOutcome<T>> {
    if !(eps_start > 0.0) {
        return Err(invalid(
            "eps",
            format!("line search needs a positive start, got {eps_start}"),
        ));
    }
    let mut trials = Vec::new();
    let mut eps = eps_start;
    let mut previous: Option<f64> = None;
    while trials.len() < opts.max_inner && eps >= opts.eps_floor {
        let result = trial(eps)?;
        let cost = result.as_ref().map(|(c, _)| *c).filter(|c| !c.is_nan());
        trials.push((eps, cost));
        if let (Some((c, payload)), Some(_)) = (result, cost) {
            let accept = match opts.rule {
                AcceptanceRule::OuterCost => c <= incumbent,
                AcceptanceRule::TrialToTrial => previous.is_some_and(|p| c <= p),
            };
            if accept {
                return Ok(LineSearchOutcome {
                    accepted: Some((eps, c, payload)),
                    trials,
                });
            }
        }
        previous = Some(cost.unwrap_or(f64::INFINITY));
        eps *= 0.5;
    }
    Ok(LineSearchOutcome { accepted: None, trials })
}

/// Density field and cost of one law.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub field: DensityField,
    pub cost: CostBreakdown,
    /// Evaluation trajectory from the center of the initial density.
    pub trajectory: Trajectory,
}

/// One accepted outer iteration (iteration 0 is the initial law).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: CostBreakdown,
    /// Accepted step; zero for the initial law.
    pub eps: f64,
    pub trials: usize,
    pub direction_norm: f64,
    pub fallback_nodes: usize,
    /// `|phi(x(T)) - phi_f|` along the evaluation trajectory.
    pub miss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub iteration: usize,
    pub eps: f64,
    pub cost: Option<CostBreakdown>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub init: Initialization,
    pub law: ControlLaw,
    pub history: Vec<IterationRecord>,
    pub trials: Vec<TrialRecord>,
    pub termination: Termination,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub initial_trajectory: Trajectory,
    pub final_trajectory: Trajectory,
    pub final_field: DensityField,
    /// `Err` text when the final gains are identically zero.
    pub ellipticity: core::result::Result<Ellipticity, String>,
}

impl SolveResult {
    pub fn initial_miss(&self) -> f64 {
        self.history[0].miss
    }

    pub fn final_miss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.miss)
    }

    /// Fraction of samples that left the box by the horizon under the final law.
    pub fn mass_leak(&self) -> f64 {
        self.final_field.exited_fraction(self.final_field.grid().intervals())
    }
}

/// Runs the optimization for a system with a task-space map.
pub struct Solver<'a, S: System + TaskSpace> {
    system: &'a S,
    config: &'a SolverConfig,
    executor: &'a dyn SampleExecutor,
    grid: TimeGrid,
    rho0: SmoothedDelta,
    psi: Option<TargetDensity>,
}

impl<S: System + TaskSpace + core::fmt::Debug> core::fmt::Debug for Solver<'_, S> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Solver")
            .field("system", self.system)
            .field("config", self.config)
            .finish_non_exhaustive()
    }
}

impl<'a, S: System + TaskSpace> Solver<'a, S> {
    pub fn new(system: &'a S, config: &'a SolverConfig, executor: &'a dyn SampleExecutor) -> Result<Self> {
        config.validate()?;
        if system.state_dim() != config.phase_box.dim() || system.task_dim() != config.target.len() {
            return Err(Error::Shape(format!(
                "system has {} states and {} task outputs; config has {} and {}",
                system.state_dim(),
                system.task_dim(),
                config.phase_box.dim(),
                config.target.len()
            )));
        }
        let rho0 = SmoothedDelta::new(config.x_init.as_slice(), &config.phase_box, config.support_cells)?;
        let psi = match config.mode {
            TerminalMode::Endpoint => None,
            TerminalMode::DensityMismatch => {
                let goal = system.goal_state(config.target.as_slice())?;
                let kernel = SmoothedDelta::new(goal.as_slice(), &config.phase_box, config.support_cells)?;
                Some(TargetDensity::from_kernel(&kernel, &config.phase_box))
            }
        };
        Ok(Self {
            system,
            config,
            executor,
            grid: config.grid()?,
            rho0,
            psi,
        })
    }

    pub fn initial_density(&self) -> &SmoothedDelta {
        &self.rho0
    }

    pub fn initialize(&self) -> Result<Initialization> {
        let opts = InitOptions {
            rollout: self.config.rollout(),
            riccati: RiccatiOptions {
                substeps: self.config.substeps,
                ..RiccatiOptions::default()
            },
        };
        initialize(
            self.system,
            &self.config.x_init,
            self.config.target.as_slice(),
            self.grid,
            &self.config.r,
            &self.config.p_f,
            &opts,
        )
    }

    /// Density estimate and cost of `law`, always with the configured seed.
    ///
    /// Fails with a divergence error if the evaluation trajectory diverges.
    pub fn evaluate(&self, law: &ControlLaw) -> Result<Evaluation> {
        let trajectory = self.trajectory(law)?;
        let field = estimate_density(
            self.system,
            law,
            &self.rho0,
            &self.config.phase_box,
            &self.config.monte_carlo(),
            self.executor,
        )?;
        let terminal = match &self.psi {
            None => terminal_cost_endpoint(
                field.terminal_samples(),
                1.0 / field.trackmax() as f64,
                self.config.gamma,
                self.system,
                self.config.target.as_slice(),
            ),
            Some(psi) => terminal_cost_density(&field, psi),
        };
        let (ax, at) = attention_running_cost(law, &self.config.phase_box, self.config.scale);
        Ok(Evaluation {
            field,
            cost: CostBreakdown::new(terminal, ax, at),
            trajectory,
        })
    }

    /// Evaluation trajectory from the center of the initial density.
    pub fn trajectory(&self, law: &ControlLaw) -> Result<Trajectory> {
        integrate_closed_loop(self.system, law, &self.config.x_init, &self.config.rollout())
    }

    pub fn miss(&self, traj: &Trajectory) -> f64 {
        (self.system.task_map(traj.terminal_state().as_slice()) - &self.config.target).norm()
    }

    /// Step direction at `law`, oriented by the configured sign.
    pub fn direction(&self, law: &ControlLaw, eval: &Evaluation) -> Result<(Trajectory, UpdateDirection)> {
        let traj = propagate_sensitivity(self.system, law, &eval.trajectory, &self.config.rollout())?;
        let objective = match &self.psi {
            None => TerminalObjective::Endpoint {
                task: self.system,
                target: self.config.target.as_slice(),
                gamma: self.config.gamma,
            },
            Some(psi) => TerminalObjective::Density {
                field: &eval.field,
                psi,
            },
        };
        let adj = lambda_schedule(&traj, &objective)?;
        let dir = compute_direction(self.system, law, &traj, &eval.field, &adj)?;
        let dir = match self.config.sign {
            DirectionSign::Descent => dir.negated(),
            DirectionSign::AsPrinted => dir,
        };
        Ok((traj, dir))
    }

    pub fn solve(&self) -> Result<SolveResult> {
        let init = self.initialize()?;
        self.solve_from(init)
    }

    /// Optimize starting from an already computed initialization.
    pub fn solve_from(&self, init: Initialization) -> Result<SolveResult> {
        let cfg = self.config;
        let mut law = init.law.clone();
        let mut eval = self.evaluate(&law)?;
        let initial_trajectory = eval.trajectory.clone();
        let mut history = alloc::vec![IterationRecord {
            iteration: 0,
            cost: eval.cost,
            eps: 0.0,
            trials: 0,
            direction_norm: 0.0,
            fallback_nodes: 0,
            miss: self.miss(&initial_trajectory),
        }];
        let mut trials = Vec::new();
        let mut inner_iterations = 0;
        let mut eps_start = cfg.eps0;
        let ls_opts = LineSearchOptions {
            max_inner: cfg.max_inner,
            eps_floor: cfg.eps_floor,
            rule: cfg.acceptance,
        };
        let mut termination = Termination::MaxIterations;
        let mut outer = 0;
        while outer < cfg.max_outer {
            outer += 1;
            let (_, dir) = self.direction(&law, &eval)?;
            let outcome = line_search(eval.cost.total, eps_start, &ls_opts, |eps| {
                let trial_law = apply(&law, &dir, eps)?;
                match self.evaluate(&trial_law) {
                    Ok(e) => Ok(Some((e.cost.total, (trial_law, e)))),
                    Err(Error::Divergence { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })?;
            inner_iterations += outcome.trials.len();
            let accepted_eps = outcome.accepted.as_ref().map(|(e, _, _)| *e);
            let accepted_cost = outcome.accepted.as_ref().map(|(_, _, (_, e))| e.cost);
            for (eps, total) in &outcome.trials {
                let is_accepted = Some(*eps) == accepted_eps;
                trials.push(TrialRecord {
                    iteration: outer,
                    eps: *eps,
                    cost: if is_accepted {
                        accepted_cost
                    } else {
                        total.map(|t| CostBreakdown {
                            total: t,
                            ..CostBreakdown::default()
                        })
                    },
                    accepted: is_accepted,
                });
            }
            let Some((eps, _, (new_law, new_eval))) = outcome.accepted else {
                termination = Termination::LineSearchExhausted;
                break;
            };
            let previous = eval.cost.total;
            law = new_law;
            eval = new_eval;
            history.push(IterationRecord {
                iteration: outer,
                cost: eval.cost,
                eps,
                trials: outcome.trials.len(),
                direction_norm: dir.norm(),
                fallback_nodes: dir.fallback_nodes,
                miss: self.miss(&eval.trajectory),
            });
            eps_start = 1.5 * eps;
            let change = (eval.cost.total - previous).abs();
            let relative = if previous == 0.0 {
                if change == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                change / previous
            };
            if relative <= cfg.eps_tol {
                termination = Termination::Converged;
                break;
            }
        }
        let final_trajectory = eval.trajectory.clone();
        let ellipticity =
            ellipticity_constants(self.system, &law, &final_trajectory, &cfg.phase_box).map_err(|e| e.to_string());
        Ok(SolveResult {
            init,
            law,
            history,
            trials,
            termination,
            outer_iterations: outer,
            inner_iterations,
            initial_trajectory,
            final_trajectory,
            final_field: eval.field,
            ellipticity,
        })
    }
}
