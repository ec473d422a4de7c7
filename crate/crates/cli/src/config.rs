//! Run configuration: a sectioned TOML file with defaults for every key.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use minattn::cost::AttentionScale;
use minattn::density::PhaseBox;
use minattn::dynamics::ArmParams;
use minattn::optimizer::{AcceptanceRule, DirectionSign, SolverConfig, TerminalMode};
use minattn::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub intervals: usize,
    /// RK4 steps per interval.
    pub substeps: usize,
    pub divergence_bound: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            intervals: 40,
            substeps: 4,
            divergence_bound: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub intervals: Vec<usize>,
    /// Half-width of the initial and target kernels, in cells.
    pub support_cells: usize,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self {
            lower: vec![-5.0, -5.0, -300.0, -300.0],
            upper: vec![5.0, 5.0, 300.0, 300.0],
            intervals: vec![64; 4],
            support_cells: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Endpoint,
    DensityMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Volume,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub gamma: f64,
    pub mode: Mode,
    pub attention_scale: Scale,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            gamma: 1e6,
            mode: Mode::Endpoint,
            attention_scale: Scale::Volume,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Acceptance {
    #[default]
    OuterCost,
    TrialToTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Descent,
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub eps0: f64,
    pub eps_tol: f64,
    pub eps_floor: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub acceptance: Acceptance,
    pub direction: Direction,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            eps0: 2.0e-3,
            eps_tol: 5.0e-5,
            eps_floor: 1e-12,
            max_outer: 200,
            max_inner: 40,
            acceptance: Acceptance::OuterCost,
            direction: Direction::Descent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub trackmax: usize,
    pub seed: u64,
    /// Fixed sample partition; results do not depend on the worker count.
    pub chunks: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            trackmax: 2000,
            seed: 1,
            chunks: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    /// Terminal weight diagonal as per-joint (angle, rate) pairs:
    /// `q1, dq1, q2, dq2`.
    pub p_f: Vec<f64>,
    pub r: Vec<f64>,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            p_f: vec![1e5, 1.0, 1e5, 1.0],
            r: vec![0.4, 1.3565],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub x_init: Vec<f64>,
    /// End-effector position and velocity `(X, Y, dX, dY)`.
    pub target: Vec<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            x_init: vec![0.0; 4],
            target: vec![-0.26, 0.40, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmSection {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub s1: f64,
    pub s2: f64,
    pub i1: f64,
    pub i2: f64,
    pub b11: f64,
    pub b12: f64,
    pub b21: f64,
    pub b22: f64,
    pub g: f64,
}

impl Default for ArmSection {
    fn default() -> Self {
        let p = ArmParams::default();
        Self {
            l1: p.l1,
            l2: p.l2,
            m1: p.m1,
            m2: p.m2,
            s1: p.s1,
            s2: p.s2,
            i1: p.i1,
            i2: p.i2,
            b11: p.b11,
            b12: p.b12,
            b21: p.b21,
            b22: p.b22,
            g: p.g,
        }
    }
}

impl ArmSection {
    pub fn params(&self) -> ArmParams {
        ArmParams {
            l1: self.l1,
            l2: self.l2,
            m1: self.m1,
            m2: self.m2,
            s1: self.s1,
            s2: self.s2,
            i1: self.i1,
            i2: self.i2,
            b11: self.b11,
            b12: self.b12,
            b21: self.b21,
            b22: self.b22,
            g: self.g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub time: TimeSection,
    pub domain: DomainSection,
    pub cost: CostSection,
    pub optimizer: OptimizerSection,
    pub sampling: SamplingSection,
    pub init: InitSection,
    pub task: TaskSection,
    pub arm: ArmSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Fidelity {
    /// 64 intervals per dimension.
    #[default]
    Desk,
    /// 256 intervals per dimension.
    Paper,
}

pub const PRESETS: [&str; 2] = ["experiment1", "experiment2"];

impl RunConfig {
    pub fn experiment1() -> Self {
        Self::default()
    }

    pub fn experiment2() -> Self {
        let mut c = Self::default();
        c.task.x_init = vec![0.1, -0.1, 0.0, 0.0];
        c.task.target = vec![-0.32, 0.27, 0.0, 0.0];
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "experiment1" => Some(Self::experiment1()),
            "experiment2" => Some(Self::experiment2()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", describe_toml_error(text, &e)))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a file, or a bundled preset when `source` names one and no
    /// such file exists.
    pub fn load(source: &str) -> anyhow::Result<Self> {
        let path = Path::new(source);
        if !path.exists() {
            if let Some(c) = Self::preset(source) {
                return Ok(c);
            }
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn with_fidelity(mut self, fidelity: Fidelity) -> Self {
        if fidelity == Fidelity::Paper {
            self.domain.intervals = vec![256; self.domain.lower.len()];
        }
        self
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        fn positive(key: &str, v: f64) -> anyhow::Result<()> {
            if !(v > 0.0) {
                bail!("invalid value for `{key}`: must be positive, got {v}");
            }
            Ok(())
        }
        fn at_least(key: &str, v: usize, min: usize) -> anyhow::Result<()> {
            if v < min {
                bail!("invalid value for `{key}`: must be at least {min}, got {v}");
            }
            Ok(())
        }
        fn length<T>(key: &str, v: &[T], n: usize) -> anyhow::Result<()> {
            if v.len() != n {
                bail!("invalid value for `{key}`: expected {n} entries, got {}", v.len());
            }
            Ok(())
        }
        positive("time.horizon", self.time.horizon)?;
        at_least("time.intervals", self.time.intervals, 2)?;
        at_least("time.substeps", self.time.substeps, 1)?;
        positive("time.divergence_bound", self.time.divergence_bound)?;
        length("domain.lower", &self.domain.lower, 4)?;
        length("domain.upper", &self.domain.upper, 4)?;
        length("domain.intervals", &self.domain.intervals, 4)?;
        for d in 0..4 {
            if !(self.domain.lower[d] < self.domain.upper[d]) {
                bail!("invalid value for `domain.upper`: entry {d} must exceed `domain.lower`");
            }
            at_least("domain.intervals", self.domain.intervals[d], 1)?;
        }
        at_least("domain.support_cells", self.domain.support_cells, 1)?;
        positive("cost.gamma", self.cost.gamma)?;
        positive("optimizer.eps0", self.optimizer.eps0)?;
        positive("optimizer.eps_tol", self.optimizer.eps_tol)?;
        positive("optimizer.eps_floor", self.optimizer.eps_floor)?;
        at_least("optimizer.max_outer", self.optimizer.max_outer, 1)?;
        at_least("optimizer.max_inner", self.optimizer.max_inner, 1)?;
        at_least("sampling.trackmax", self.sampling.trackmax, 1)?;
        at_least("sampling.chunks", self.sampling.chunks, 1)?;
        if self.sampling.seed > i64::MAX as u64 {
            bail!("invalid value for `sampling.seed`: must not exceed {}", i64::MAX);
        }
        length("init.p_f", &self.init.p_f, 4)?;
        length("init.r", &self.init.r, 2)?;
        if self.init.p_f.iter().any(|v| !(*v >= 0.0)) {
            bail!("invalid value for `init.p_f`: entries must be non-negative");
        }
        if self.init.r.iter().any(|v| !(*v > 0.0)) {
            bail!("invalid value for `init.r`: entries must be positive");
        }
        length("task.x_init", &self.task.x_init, 4)?;
        length("task.target", &self.task.target, 4)?;
        self.arm
            .params()
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid value in `arm`: {e}"))?;
        Ok(())
    }

    pub fn phase_box(&self) -> anyhow::Result<PhaseBox> {
        Ok(PhaseBox::new(
            self.domain.lower.clone(),
            self.domain.upper.clone(),
            self.domain.intervals.clone(),
        )?)
    }

    /// `P_f` in state order `(q1, q2, dq1, dq2)` from the per-joint pairs.
    pub fn p_f_state_order(&self) -> DMatrix<f64> {
        let p = &self.init.p_f;
        DMatrix::from_diagonal(&DVector::from_vec(vec![p[0], p[2], p[1], p[3]]))
    }

    pub fn solver_config(&self) -> anyhow::Result<SolverConfig> {
        self.validate()?;
        Ok(SolverConfig {
            horizon: self.time.horizon,
            intervals: self.time.intervals,
            substeps: self.time.substeps,
            divergence_bound: self.time.divergence_bound,
            phase_box: self.phase_box()?,
            support_cells: self.domain.support_cells,
            gamma: self.cost.gamma,
            eps0: self.optimizer.eps0,
            eps_tol: self.optimizer.eps_tol,
            eps_floor: self.optimizer.eps_floor,
            trackmax: self.sampling.trackmax,
            seed: self.sampling.seed,
            chunks: self.sampling.chunks,
            p_f: self.p_f_state_order(),
            r: DMatrix::from_diagonal(&DVector::from_vec(self.init.r.clone())),
            x_init: DVector::from_vec(self.task.x_init.clone()),
            target: DVector::from_vec(self.task.target.clone()),
            mode: match self.cost.mode {
                Mode::Endpoint => TerminalMode::Endpoint,
                Mode::DensityMismatch => TerminalMode::DensityMismatch,
            },
            acceptance: match self.optimizer.acceptance {
                Acceptance::OuterCost => AcceptanceRule::OuterCost,
                Acceptance::TrialToTrial => AcceptanceRule::TrialToTrial,
            },
            sign: match self.optimizer.direction {
                Direction::Descent => DirectionSign::Descent,
                Direction::AsPrinted => DirectionSign::AsPrinted,
            },
            scale: match self.cost.attention_scale {
                Scale::Volume => AttentionScale::Volume,
                Scale::Normalized => AttentionScale::Normalized,
            },
            max_outer: self.optimizer.max_outer,
            max_inner: self.optimizer.max_inner,
        })
    }
}

fn describe_toml_error(text: &str, err: &toml::de::Error) -> String {
    let message = err.message();
    match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {message}")
        }
        None => message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_match_presets() {
        let e1 = RunConfig::parse(include_str!("../configs/experiment1.toml")).unwrap();
        let e2 = RunConfig::parse(include_str!("../configs/experiment2.toml")).unwrap();
        assert_eq!(e1, RunConfig::experiment1());
        assert_eq!(e2, RunConfig::experiment2());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.solver_config().is_ok());
    }

    #[test]
    fn presets_match_experiments() {
        let e1 = RunConfig::preset("experiment1").unwrap();
        assert_eq!(e1.task.x_init, vec![0.0; 4]);
        assert_eq!(e1.task.target, vec![-0.26, 0.40, 0.0, 0.0]);
        assert_eq!(e1.time.horizon, 0.5);
        let e2 = RunConfig::preset("experiment2").unwrap();
        assert_eq!(e2.task.x_init, vec![0.1, -0.1, 0.0, 0.0]);
        assert_eq!(e2.task.target, vec![-0.32, 0.27, 0.0, 0.0]);
        assert!(RunConfig::preset("experiment3").is_none());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::experiment2();
        c.cost.mode = Mode::DensityMismatch;
        c.optimizer.acceptance = Acceptance::TrialToTrial;
        c.sampling.seed = 12345;
        c.arm.g = 9.81;
        c.task.x_init[0] = 0.1 + 0.2;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("[sampling]\ntrackmax = 500\n\n[time]\nhorizon = 1\n").unwrap();
        assert_eq!(c.sampling.trackmax, 500);
        assert_eq!(c.sampling.seed, 1);
        assert_eq!(c.time.horizon, 1.0);
        assert_eq!(c.time.intervals, 40);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("[time]\nhorizon = 0.5\nhorizn = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("line 3:"), "{err}");
        assert!(err.contains("horizn"), "{err}");
        let err = RunConfig::parse("[timing]\n").unwrap_err().to_string();
        assert!(err.contains("timing"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = RunConfig::parse("[time]\n\nhorizon = = 1\n").unwrap_err().to_string();
        assert!(err.starts_with("line 3:"), "{err}");
    }

    #[test]
    fn validation_names_the_key() {
        let err = RunConfig::parse("[optimizer]\neps0 = -1\n").unwrap_err().to_string();
        assert!(err.contains("optimizer.eps0"), "{err}");
        let err = RunConfig::parse("[init]\nr = [1.0]\n").unwrap_err().to_string();
        assert!(err.contains("init.r"), "{err}");
        let err = RunConfig::parse("[arm]\ns1 = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("arm"), "{err}");
    }

    #[test]
    fn terminal_weight_pairs_map_to_state_order() {
        let mut c = RunConfig::default();
        c.init.p_f = vec![1.0, 2.0, 3.0, 4.0];
        let p = c.p_f_state_order();
        assert_eq!((p[(0, 0)], p[(1, 1)], p[(2, 2)], p[(3, 3)]), (1.0, 3.0, 2.0, 4.0));
    }

    #[test]
    fn fidelity_and_hash() {
        let desk = RunConfig::experiment1();
        let paper = desk.clone().with_fidelity(Fidelity::Paper);
        assert_eq!(paper.domain.intervals, vec![256; 4]);
        assert_eq!(desk.clone().with_fidelity(Fidelity::Desk), desk);
        assert_ne!(desk.hash(), paper.hash());
        assert_eq!(desk.hash(), RunConfig::experiment1().hash());
        assert_eq!(desk.hash().len(), 16);
    }
}
