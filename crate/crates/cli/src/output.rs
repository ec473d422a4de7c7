//! CSV artifacts. Every file starts with a `#` stamp line carrying the
//! config hash and seed, followed by a header row.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use minattn::density::DensityField;
use minattn::dynamics::{forward_kinematics, ArmParams};
use minattn::optimizer::SolveResult;
use minattn::rollout::Trajectory;
use minattn::schedules::ControlLaw;

use crate::app::feedback_ratios;

/// Reproducibility stamp written as the first line of every file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// One finished file, held in memory until everything is ready.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

struct Table {
    name: &'static str,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(name: &'static str, stamp: &Stamp, header: &[String]) -> Self {
        let mut prefix = format!("# config_hash={} seed={}\n", stamp.config_hash, stamp.seed).into_bytes();
        prefix.reserve(4096);
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(prefix);
        writer.write_record(header).expect("writing to memory");
        Self { name, writer }
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) {
        self.writer
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .expect("writing to memory");
    }

    fn finish(self) -> Artifact {
        Artifact {
            name: self.name,
            bytes: self.writer.into_inner().expect("flushing to memory"),
        }
    }
}

fn header(fixed: &[&str], extra: impl IntoIterator<Item = String>) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain(extra).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn cost_history(result: &SolveResult, stamp: &Stamp) -> Artifact {
    let mut t = Table::new(
        "cost_history.csv",
        stamp,
        &header(
            &[
                "n",
                "terminal",
                "attention_x",
                "attention_t",
                "total",
                "eps_accepted",
                "trials",
                "miss",
            ],
            [],
        ),
    );
    for h in &result.history {
        t.row([
            h.iteration.to_string(),
            num(h.cost.terminal),
            num(h.cost.attention_x),
            num(h.cost.attention_t),
            num(h.cost.total),
            num(h.eps),
            h.trials.to_string(),
            num(h.miss),
        ]);
    }
    t.finish()
}

pub fn law(name: &'static str, law: &ControlLaw, stamp: &Stamp) -> Artifact {
    let (m, n) = (law.control_dim(), law.state_dim());
    let cols = (0..m)
        .flat_map(|r| (0..n).map(move |c| format!("k{}{}", r + 1, c + 1)))
        .chain((0..m).map(|r| format!("v{}", r + 1)));
    let mut t = Table::new(name, stamp, &header(&["t"], cols));
    for (i, time) in law.grid().nodes().enumerate() {
        let k = &law.gains()[i];
        let row = std::iter::once(num(time))
            .chain((0..m).flat_map(|r| (0..n).map(move |c| num(k[(r, c)]))))
            .chain(law.feedforward()[i].iter().map(|v| num(*v)));
        t.row(row);
    }
    t.finish()
}

pub fn trajectory(name: &'static str, traj: &Trajectory, law: &ControlLaw, stamp: &Stamp) -> Artifact {
    let mut t = Table::new(
        name,
        stamp,
        &header(
            &[
                "t",
                "q1",
                "q2",
                "dq1",
                "dq2",
                "u1",
                "u2",
                "feedback_norm",
                "feedforward_norm",
            ],
            [],
        ),
    );
    for (i, time) in traj.grid.nodes().enumerate() {
        let x = &traj.states[i];
        let u = &traj.controls[i];
        let kx = &law.gains()[i] * x;
        let row = std::iter::once(num(time))
            .chain(x.iter().map(|v| num(*v)))
            .chain(u.iter().map(|v| num(*v)))
            .chain([num(kx.norm()), num(law.feedforward()[i].norm())]);
        t.row(row);
    }
    t.finish()
}

pub fn fk_path(traj: &Trajectory, params: &ArmParams, stamp: &Stamp) -> Artifact {
    let mut t = Table::new(
        "fk_path_final.csv",
        stamp,
        &header(
            &["t", "elbow_x", "elbow_y", "hand_x", "hand_y", "hand_vx", "hand_vy"],
            [],
        ),
    );
    for (i, time) in traj.grid.nodes().enumerate() {
        let x = traj.states[i].as_slice();
        let phi = forward_kinematics(params, x);
        t.row([
            num(time),
            num(params.l1 * x[0].cos()),
            num(params.l1 * x[0].sin()),
            num(phi[0]),
            num(phi[1]),
            num(phi[2]),
            num(phi[3]),
        ]);
    }
    t.finish()
}

pub fn marginals(field: &DensityField, stamp: &Stamp) -> Artifact {
    let mut t = Table::new(
        "density_marginals.csv",
        stamp,
        &header(&["node", "t", "dim", "bin", "center", "mass"], []),
    );
    let b = field.phase_box();
    for (node, time) in field.grid().nodes().enumerate() {
        for (d, hist) in field.marginals(node).iter().enumerate() {
            for (bin, mass) in hist.iter().enumerate() {
                if *mass == 0.0 {
                    continue;
                }
                let center = b.lower()[d] + (bin as f64 + 0.5) * b.cell_width(d);
                t.row([
                    node.to_string(),
                    num(time),
                    d.to_string(),
                    bin.to_string(),
                    num(center),
                    num(*mass),
                ]);
            }
        }
    }
    t.finish()
}

/// Full sparse field: one row per occupied cell per node.
pub fn field(field: &DensityField, stamp: &Stamp) -> Artifact {
    let dims = field.phase_box().dim();
    let mut t = Table::new(
        "density_field.csv",
        stamp,
        &header(
            &["node"],
            (0..dims).map(|d| format!("cell{d}")).chain(["fraction".to_string()]),
        ),
    );
    for node in 0..field.grid().len() {
        for (key, count) in field.occupied(node) {
            let row = std::iter::once(node.to_string())
                .chain(field.phase_box().coords(key).into_iter().map(|c| c.to_string()))
                .chain([num(count as f64 / field.trackmax() as f64)]);
            t.row(row);
        }
    }
    t.finish()
}

pub fn diagnostics(result: &SolveResult, stamp: &Stamp) -> Artifact {
    let mut t = Table::new("diagnostics.csv", stamp, &header(&["key", "value"], []));
    let (c1, c2, bound) = match &result.ellipticity {
        Ok(e) => (num(e.c1), num(e.c2), e.step_bound().map_or("none".to_string(), num)),
        Err(_) => ("none".into(), "none".into(), "none".into()),
    };
    let (first, last) = feedback_ratios(&result.law, &result.final_trajectory);
    let (first0, last0) = feedback_ratios(&result.init.law, &result.initial_trajectory);
    let max_eps = result.history.iter().skip(1).map(|h| h.eps).fold(0.0, f64::max);
    let rows: Vec<(&str, String)> = vec![
        ("termination", result.termination.as_str().to_string()),
        ("outer_iterations", result.outer_iterations.to_string()),
        ("inner_iterations", result.inner_iterations.to_string()),
        ("initial_cost", num(result.history[0].cost.total)),
        (
            "final_cost",
            num(result.history.last().map_or(f64::NAN, |h| h.cost.total)),
        ),
        ("initial_miss", num(result.initial_miss())),
        ("final_miss", num(result.final_miss())),
        ("c1", c1),
        ("c2", c2),
        ("step_bound", bound),
        ("max_accepted_eps", num(max_eps)),
        ("mass_leak", num(result.mass_leak())),
        ("diverged_samples", result.final_field.diverged().to_string()),
        ("rejection_proposals", result.final_field.proposals().to_string()),
        ("riccati_symmetry_drift", num(result.init.riccati.symmetry_drift())),
        (
            "density_fallback_nodes",
            result
                .history
                .iter()
                .map(|h| h.fallback_nodes)
                .sum::<usize>()
                .to_string(),
        ),
        ("feedback_ratio_first_quarter_initial", num(first0)),
        ("feedback_ratio_last_quarter_initial", num(last0)),
        ("feedback_ratio_first_quarter", num(first)),
        ("feedback_ratio_last_quarter", num(last)),
    ];
    for (k, v) in rows {
        t.row([k.to_string(), v]);
    }
    t.finish()
}

/// Writes every artifact into `dir`. If any write fails, files already
/// written by this call are removed.
pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = dir.join(a.name);
        if let Err(e) = fs::write(&path, &a.bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        written.push(path);
    }
    Ok(written)
}
