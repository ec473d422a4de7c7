//! Monte Carlo estimate of the transported state density on a phase-space box.
//!
//! Samples drawn from a smoothed point mass are rolled through the closed
//! loop; at every time node each sample increments the occupancy count of
//! the cell it sits in. Counts are stored sparsely, one ordered map per node.
//! Samples are split into a fixed number of chunks, each with its own RNG
//! stream, so the field depends only on the seed and never on how chunks are
//! scheduled across workers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::cos;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::System;
use crate::error::invalid;
use crate::rollout::{ClosedLoopStepper, RolloutOptions};
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

/// Packed mixed-radix index of a box cell.
pub type CellKey = u64;

/// Axis-aligned box split into uniform cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    intervals: Vec<usize>,
}

impl PhaseBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, intervals: Vec<usize>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != intervals.len() || lower.is_empty() {
            return Err(Error::Shape(format!(
                "box bounds have {}, {} and {} entries",
                lower.len(),
                upper.len(),
                intervals.len()
            )));
        }
        let mut cells: u64 = 1;
        for d in 0..lower.len() {
            if !(lower[d].is_finite() && upper[d].is_finite() && lower[d] < upper[d]) {
                return Err(invalid("box", format!("dimension {d} needs finite lower < upper")));
            }
            if intervals[d] == 0 {
                return Err(invalid("box", format!("dimension {d} needs at least one interval")));
            }
            cells = cells
                .checked_mul(intervals[d] as u64)
                .ok_or_else(|| invalid("box", "too many cells to index"))?;
        }
        let out = Self {
            lower,
            upper,
            intervals,
        };
        if !(out.volume().is_finite() && out.volume() > 0.0) {
            return Err(invalid("box", "volume must be finite and positive"));
        }
        Ok(out)
    }

    /// Same bounds and intervals in every dimension.
    pub fn uniform(dim: usize, lower: f64, upper: f64, intervals: usize) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], vec![intervals; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn intervals(&self) -> &[usize] {
        &self.intervals
    }

    pub fn cell_width(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / self.intervals[d] as f64
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.upper[d] - self.lower[d]).product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.cell_width(d)).product()
    }

    /// Mean of `x_d` over the box.
    pub fn center(&self, d: usize) -> f64 {
        0.5 * (self.lower[d] + self.upper[d])
    }

    /// Variance of `x_d` under the uniform distribution on the box.
    pub fn variance(&self, d: usize) -> f64 {
        let w = self.upper[d] - self.lower[d];
        w * w / 12.0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, v)| *v >= self.lower[d] && *v <= self.upper[d])
    }

    fn coord(&self, d: usize, v: f64) -> Option<usize> {
        if !(v >= self.lower[d] && v <= self.upper[d]) {
            return None;
        }
        let c = ((v - self.lower[d]) / self.cell_width(d)) as usize;
        Some(c.min(self.intervals[d] - 1))
    }

    /// Cell containing `x`, or `None` outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<CellKey> {
        let mut key = 0u64;
        for d in (0..self.dim()).rev() {
            key = key * self.intervals[d] as u64 + self.coord(d, x[d])? as u64;
        }
        Some(key)
    }

    pub fn key(&self, coords: &[usize]) -> CellKey {
        coords
            .iter()
            .zip(&self.intervals)
            .rev()
            .fold(0u64, |key, (c, n)| key * *n as u64 + *c as u64)
    }

    pub fn coords(&self, mut key: CellKey) -> Vec<usize> {
        self.intervals
            .iter()
            .map(|n| {
                let c = (key % *n as u64) as usize;
                key /= *n as u64;
                c
            })
            .collect()
    }

    pub fn cell_center(&self, key: CellKey) -> Vec<f64> {
        self.coords(key)
            .iter()
            .enumerate()
            .map(|(d, c)| self.lower[d] + (*c as f64 + 0.5) * self.cell_width(d))
            .collect()
    }

    /// Cell one step along dimension `d`, if still inside the box.
    pub fn neighbor(&self, key: CellKey, d: usize, forward: bool) -> Option<CellKey> {
        let mut coords = self.coords(key);
        if forward {
            if coords[d] + 1 >= self.intervals[d] {
                return None;
            }
            coords[d] += 1;
        } else {
            coords[d] = coords[d].checked_sub(1)?;
        }
        Some(self.key(&coords))
    }

    /// All cells within `radius` coordinate steps of `key` (including `key`).
    pub fn neighborhood(&self, key: CellKey, radius: usize) -> Vec<CellKey> {
        let base = self.coords(key);
        let lo: Vec<usize> = base.iter().map(|c| c.saturating_sub(radius)).collect();
        let hi: Vec<usize> = base
            .iter()
            .zip(&self.intervals)
            .map(|(c, n)| (c + radius).min(n - 1))
            .collect();
        let mut out = Vec::new();
        let mut cur = lo.clone();
        loop {
            out.push(self.key(&cur));
            let mut d = 0;
            loop {
                if d == cur.len() {
                    return out;
                }
                if cur[d] < hi[d] {
                    cur[d] += 1;
                    break;
                }
                cur[d] = lo[d];
                d += 1;
            }
        }
    }
}

/// Compactly supported cosine kernel approximating a point mass.
///
/// Per dimension the profile is `(1 + cos(pi r / w)) / (2 w)` for `|r| <= w`,
/// with `w` a whole number of box cells, so the kernel integrates to one and
/// its cell-center samples also sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedDelta {
    center: Vec<f64>,
    half_widths: Vec<f64>,
    support_cells: usize,
}

/// Initial density `rho_0`.
pub type InitialDensity = SmoothedDelta;

impl SmoothedDelta {
    pub fn new(center: &[f64], phase_box: &PhaseBox, support_cells: usize) -> Result<Self> {
        if center.len() != phase_box.dim() {
            return Err(Error::Shape(format!(
                "kernel center has {} entries for a {}-D box",
                center.len(),
                phase_box.dim()
            )));
        }
        if support_cells == 0 {
            return Err(invalid("support_cells", "must be at least 1"));
        }
        let mut half_widths = Vec::with_capacity(center.len());
        for (d, c) in center.iter().enumerate() {
            let w = support_cells as f64 * phase_box.cell_width(d);
            if !(c - w >= phase_box.lower[d] && c + w <= phase_box.upper[d]) {
                return Err(Error::SupportOverflow { dim: d });
            }
            half_widths.push(w);
        }
        Ok(Self {
            center: center.to_vec(),
            half_widths,
            support_cells,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn support_cells(&self) -> usize {
        self.support_cells
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut out = 1.0;
        for ((xd, cd), wd) in x.iter().zip(&self.center).zip(&self.half_widths) {
            let r = (xd - cd).abs();
            if r > *wd {
                return 0.0;
            }
            out *= (1.0 + cos(PI * r / wd)) / (2.0 * wd);
        }
        out
    }

    pub fn peak(&self) -> f64 {
        self.half_widths.iter().map(|w| 1.0 / w).product()
    }

    /// Per-dimension variance of the kernel, `w^2 (1/3 - 2/pi^2)`.
    pub fn variances(&self) -> Vec<f64> {
        self.half_widths
            .iter()
            .map(|w| w * w * (1.0 / 3.0 - 2.0 / (PI * PI)))
            .collect()
    }

    /// Rejection sample: uniform proposal on the support, accepted with
    /// probability `value / peak`. Returns the number of proposals used.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> u64 {
        let peak = self.peak();
        let mut attempts = 0;
        loop {
            attempts += 1;
            for d in 0..out.len() {
                let w = self.half_widths[d];
                out[d] = self.center[d] + w * (2.0 * rng.gen::<f64>() - 1.0);
            }
            if rng.gen::<f64>() * peak < self.value(out) {
                return attempts;
            }
        }
    }

    /// Cell masses `value(cell center) * cell volume` over the support.
    pub fn binned(&self, phase_box: &PhaseBox) -> BTreeMap<CellKey, f64> {
        let Some(center_key) = phase_box.locate(&self.center) else {
            return BTreeMap::new();
        };
        let cell_volume = phase_box.cell_volume();
        phase_box
            .neighborhood(center_key, self.support_cells + 1)
            .into_iter()
            .filter_map(|key| {
                let mass = self.value(&phase_box.cell_center(key)) * cell_volume;
                (mass > 0.0).then_some((key, mass))
            })
            .collect()
    }
}

/// Piecewise-constant target density `psi`, stored as a value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDensity {
    phase_box: PhaseBox,
    values: BTreeMap<CellKey, f64>,
}

impl TargetDensity {
    pub fn from_kernel(kernel: &SmoothedDelta, phase_box: &PhaseBox) -> Self {
        let cell_volume = phase_box.cell_volume();
        let values = kernel
            .binned(phase_box)
            .into_iter()
            .map(|(k, mass)| (k, mass / cell_volume))
            .collect();
        Self {
            phase_box: phase_box.clone(),
            values,
        }
    }

    /// The field's own slice at `node`, as densities.
    pub fn from_field(field: &DensityField, node: usize) -> Self {
        let values = field
            .occupied(node)
            .map(|(k, _)| (k, field.cell_density(node, k)))
            .collect();
        Self {
            phase_box: field.phase_box.clone(),
            values,
        }
    }

    pub fn phase_box(&self) -> &PhaseBox {
        &self.phase_box
    }

    pub fn cell_value(&self, key: CellKey) -> f64 {
        self.values.get(&key).copied().unwrap_or(0.0)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.phase_box.locate(x).map_or(0.0, |k| self.cell_value(k))
    }

    pub fn cells(&self) -> impl Iterator<Item = (CellKey, f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }

    /// `sum psi * cell volume`.
    pub fn total_mass(&self) -> f64 {
        self.values.values().sum::<f64>() * self.phase_box.cell_volume()
    }
}

/// Sparse occupancy counts per time node.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: TimeGrid,
    phase_box: PhaseBox,
    trackmax: usize,
    counts: Vec<BTreeMap<CellKey, u32>>,
    exited: Vec<usize>,
    terminal: Vec<DVector<f64>>,
    diverged: u64,
    proposals: u64,
}

impl DensityField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn phase_box(&self) -> &PhaseBox {
        &self.phase_box
    }

    pub fn trackmax(&self) -> usize {
        self.trackmax
    }

    /// Rejection-sampling proposals drawn to obtain `trackmax` samples.
    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    pub fn occupied(&self, node: usize) -> impl Iterator<Item = (CellKey, u32)> + '_ {
        self.counts[node].iter().map(|(k, c)| (*k, *c))
    }

    pub fn count(&self, node: usize, key: CellKey) -> u32 {
        self.counts[node].get(&key).copied().unwrap_or(0)
    }

    /// `N_pass / trackmax` for one cell.
    pub fn fraction(&self, node: usize, key: CellKey) -> f64 {
        self.count(node, key) as f64 / self.trackmax as f64
    }

    pub fn cell_density(&self, node: usize, key: CellKey) -> f64 {
        self.fraction(node, key) / self.phase_box.cell_volume()
    }

    /// Stored mass at `node`: the fraction of samples still inside the box.
    pub fn mass(&self, node: usize) -> f64 {
        self.counts[node].values().map(|c| *c as u64).sum::<u64>() as f64 / self.trackmax as f64
    }

    pub fn exited_count(&self, node: usize) -> usize {
        self.exited[node]
    }

    pub fn exited_fraction(&self, node: usize) -> f64 {
        self.exited[node] as f64 / self.trackmax as f64
    }

    /// State of every sample at the horizon, each carrying weight
    /// `1 / trackmax`. Samples that left the box keep flowing past it; a
    /// diverged sample keeps the state at which the bound was crossed.
    pub fn terminal_samples(&self) -> &[DVector<f64>] {
        &self.terminal
    }

    /// Samples whose rollout crossed the divergence bound.
    pub fn diverged(&self) -> u64 {
        self.diverged
    }

    /// Density (mass per unit volume) of the cell containing `x`; zero
    /// outside the box.
    pub fn density_at(&self, x: &[f64], node: usize) -> f64 {
        self.phase_box.locate(x).map_or(0.0, |k| self.cell_density(node, k))
    }

    /// Like [`density_at`](Self::density_at), but an empty cell takes the
    /// average density of its occupied neighbors. The flag reports whether
    /// the fallback was used.
    pub fn density_at_or_neighbors(&self, x: &[f64], node: usize) -> (f64, bool) {
        let Some(key) = self.phase_box.locate(x) else {
            return (0.0, false);
        };
        if self.count(node, key) > 0 {
            return (self.cell_density(node, key), false);
        }
        let (sum, hits) = self
            .phase_box
            .neighborhood(key, 1)
            .into_iter()
            .filter(|k| *k != key)
            .map(|k| self.count(node, k))
            .filter(|c| *c > 0)
            .fold((0u64, 0u64), |(s, n), c| (s + c as u64, n + 1));
        if hits == 0 {
            return (0.0, true);
        }
        let frac = sum as f64 / hits as f64 / self.trackmax as f64;
        (frac / self.phase_box.cell_volume(), true)
    }

    /// Mass per bin of each dimension's marginal histogram at `node`.
    pub fn marginals(&self, node: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.phase_box.intervals.iter().map(|n| vec![0.0; *n]).collect();
        for (key, count) in self.occupied(node) {
            let frac = count as f64 / self.trackmax as f64;
            for (d, c) in self.phase_box.coords(key).into_iter().enumerate() {
                out[d][c] += frac;
            }
        }
        out
    }
}

/// `sum_cells (rho_T - psi)^2 * cell volume`.
pub fn terminal_mismatch(field: &DensityField, psi: &TargetDensity) -> f64 {
    let node = field.grid.intervals();
    let mut total = 0.0;
    for (key, _) in field.occupied(node) {
        let diff = field.cell_density(node, key) - psi.cell_value(key);
        total += diff * diff;
    }
    for (key, value) in psi.cells() {
        if field.count(node, key) == 0 {
            total += value * value;
        }
    }
    total * field.phase_box.cell_volume()
}

/// Per-chunk occupancy tallies, merged by summation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTally {
    counts: Vec<BTreeMap<CellKey, u32>>,
    exited: Vec<usize>,
    terminal: Vec<DVector<f64>>,
    diverged: u64,
    proposals: u64,
}

/// Runs independent Monte Carlo chunks, possibly on several workers.
///
/// Results must come back in chunk order.
pub trait SampleExecutor: Sync {
    fn run(&self, chunks: usize, job: &(dyn Fn(usize) -> Result<ChunkTally> + Sync)) -> Vec<Result<ChunkTally>>;
}

/// Runs every chunk on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl SampleExecutor for Sequential {
    fn run(&self, chunks: usize, job: &(dyn Fn(usize) -> Result<ChunkTally> + Sync)) -> Vec<Result<ChunkTally>> {
        (0..chunks).map(job).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloOptions {
    /// Number of accepted sample trajectories.
    pub trackmax: usize,
    pub seed: u64,
    /// Fixed sample partition; independent of the worker count.
    pub chunks: usize,
    pub rollout: RolloutOptions,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            trackmax: 2000,
            seed: 0,
            chunks: 64,
            rollout: RolloutOptions::default(),
        }
    }
}

fn run_chunk<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    rho0: &SmoothedDelta,
    phase_box: &PhaseBox,
    opts: &MonteCarloOptions,
    chunk: usize,
    samples: usize,
) -> Result<ChunkTally> {
    let grid = law.grid();
    let nodes = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(chunk as u64);
    let mut tally = ChunkTally {
        counts: vec![BTreeMap::new(); nodes],
        exited: vec![0; nodes],
        terminal: Vec::new(),
        diverged: 0,
        proposals: 0,
    };
    let mut stepper = ClosedLoopStepper::new(system, law);
    let mut x = vec![0.0; system.state_dim()];
    for _ in 0..samples {
        tally.proposals += rho0.sample(&mut rng, &mut x);
        let mut exit_node = nodes;
        let mut diverged = false;
        for node in 0..nodes {
            if exit_node == nodes {
                match phase_box.locate(&x) {
                    Some(key) => *tally.counts[node].entry(key).or_insert(0) += 1,
                    None => exit_node = node,
                }
            }
            if node + 1 < nodes {
                match stepper.advance_interval(&mut x, node, &opts.rollout) {
                    Ok(()) => {}
                    Err(Error::Divergence { .. }) => {
                        exit_node = exit_node.min(node + 1);
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for e in &mut tally.exited[exit_node..] {
            *e += 1;
        }
        tally.terminal.push(DVector::from_column_slice(&x));
        tally.diverged += u64::from(diverged);
    }
    Ok(tally)
}

/// Monte Carlo estimate of `rho(x, t_i)` under `law`, starting from `rho0`.
pub fn estimate_density<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    rho0: &SmoothedDelta,
    phase_box: &PhaseBox,
    opts: &MonteCarloOptions,
    executor: &dyn SampleExecutor,
) -> Result<DensityField> {
    if opts.trackmax == 0 {
        return Err(invalid("trackmax", "must be at least 1"));
    }
    if phase_box.dim() != system.state_dim() || rho0.center.len() != system.state_dim() {
        return Err(Error::Shape(format!(
            "{}-D box and kernel for a {}-D system",
            phase_box.dim(),
            system.state_dim()
        )));
    }
    let chunks = opts.chunks.clamp(1, opts.trackmax);
    let base = opts.trackmax / chunks;
    let extra = opts.trackmax % chunks;
    let job = |c: usize| {
        let samples = base + usize::from(c < extra);
        run_chunk(system, law, rho0, phase_box, opts, c, samples)
    };
    let nodes = law.grid().len();
    let mut field = DensityField {
        grid: *law.grid(),
        phase_box: phase_box.clone(),
        trackmax: opts.trackmax,
        counts: vec![BTreeMap::new(); nodes],
        exited: vec![0; nodes],
        terminal: Vec::new(),
        diverged: 0,
        proposals: 0,
    };
    for tally in executor.run(chunks, &job) {
        let tally = tally?;
        for (into, from) in field.counts.iter_mut().zip(tally.counts) {
            for (k, c) in from {
                *into.entry(k).or_insert(0) += c;
            }
        }
        for (into, from) in field.exited.iter_mut().zip(tally.exited) {
            *into += from;
        }
        field.terminal.extend(tally.terminal);
        field.diverged += tally.diverged;
        field.proposals += tally.proposals;
    }
    Ok(field)
}
