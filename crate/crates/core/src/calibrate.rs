//! Multi-tree weighted least squares for the hidden parameters.
//!
//! Every tree gets its own seed biomass `q0`; `rp` and `pc` are shared.
//! The search runs in log space so every candidate is positive, with a
//! Levenberg-Marquardt step on a central-difference Jacobian and a seeded
//! multi-start.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct_estim::DirectParams;
use crate::engine::{self, EngineError, HiddenParams, SimConfig, SimulationTrace};
use crate::ingest::{CumulatedPoint, TargetEntry, TargetSeries};
use crate::topology::{PhysioAge, TreeTopology};

pub const WEIGHT_FLOOR: f64 = 1e-3;
pub const UNIDENTIFIABLE_NORM: f64 = 1e-12;
const SSE_FLOOR: f64 = 1e-20;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrateError {
    #[error("simulation of tree {tree} failed: {source}")]
    SimulationFailed { tree: String, source: EngineError },
    #[error("infeasible initial point: {0}")]
    InfeasibleInit(String),
    #[error("tree {tree}: target {key} has no simulated counterpart")]
    MissingCohort { tree: String, key: String },
    #[error("targets and topologies are not aligned: {0}")]
    Misaligned(String),
    #[error("invalid bounds for {0}")]
    InvalidBounds(&'static str),
}

pub type Result<T, E = CalibrateError> = std::result::Result<T, E>;

/// Observable family of a residual entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DiameterPerGu,
    MassPerGu,
    CumInternode,
    CumBlade,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::DiameterPerGu, Family::MassPerGu, Family::CumInternode, Family::CumBlade];

    pub fn name(self) -> &'static str {
        match self {
            Family::DiameterPerGu => "diameter_per_gu",
            Family::MassPerGu => "mass_per_gu",
            Family::CumInternode => "cum_internode",
            Family::CumBlade => "cum_blade",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an observation is read in a simulated trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsKey {
    Class { pa: PhysioAge, ca: u32 },
    Cycle(u32),
}

impl fmt::Display for ObsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObsKey::Class { pa, ca } => write!(f, "{pa}/ca{ca}"),
            ObsKey::Cycle(c) => write!(f, "cycle{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tree: usize,
    pub family: Family,
    pub key: ObsKey,
    pub measured: f64,
    pub weight: f64,
}

impl Observation {
    /// Reads the simulated value of this observation from `trace`.
    pub fn simulated(&self, trace: &SimulationTrace) -> Option<f64> {
        match (self.family, self.key) {
            (Family::DiameterPerGu, ObsKey::Class { pa, ca }) => trace.cohort(pa, ca).map(|c| c.internode_diameter_mm),
            (Family::MassPerGu, ObsKey::Class { pa, ca }) => trace.cohort(pa, ca).map(|c| c.internode_mass),
            (Family::CumInternode, ObsKey::Cycle(c)) => {
                trace.cycles.get((c as usize).checked_sub(1)?).map(|s| s.cum_internode_mass)
            }
            (Family::CumBlade, ObsKey::Cycle(c)) => {
                trace.cycles.get((c as usize).checked_sub(1)?).map(|s| s.cum_blade_mass)
            }
            _ => None,
        }
    }
}

/// Positive interval for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    fn valid(&self) -> bool {
        self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub q0: Interval,
    pub rp: Interval,
    pub pc: Interval,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            q0: Interval::new(1e-3, 1e4),
            rp: Interval::new(1e-2, 1e3),
            pc: Interval::new(1e-5, 1e2),
        }
    }
}

/// Free parameters: one seed per tree plus the shared `rp` and `pc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub q0: Vec<f64>,
    pub rp: f64,
    pub pc: f64,
}

impl FitParams {
    pub fn hidden(&self, tree: usize) -> HiddenParams {
        HiddenParams { q0: self.q0[tree], rp: self.rp, pc: self.pc }
    }

    pub fn scaled(&self, factor: f64) -> FitParams {
        FitParams {
            q0: self.q0.iter().map(|q| q * factor).collect(),
            rp: self.rp * factor,
            pc: self.pc * factor,
        }
    }

    fn to_log(&self) -> Vec<f64> {
        self.q0.iter().chain([&self.rp, &self.pc]).map(|v| v.ln()).collect()
    }

    fn from_log(x: &[f64]) -> FitParams {
        let n = x.len() - 2;
        FitParams {
            q0: x[..n].iter().map(|v| v.exp()).collect(),
            rp: x[n].exp(),
            pc: x[n + 1].exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Relative SSE improvement under which an iteration counts as stalled.
    pub rel_tol: f64,
    pub stall_iterations: usize,
    /// Central-difference step in log-parameter space.
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 8,
            seed: 0,
            max_iterations: 200,
            rel_tol: 1e-10,
            stall_iterations: 3,
            fd_step: 1e-5,
        }
    }
}

/// One calibration problem over several trees.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub tree_ids: Vec<String>,
    pub topologies: Vec<TreeTopology>,
    pub dp: DirectParams,
    pub config: SimConfig,
    pub bounds: Bounds,
    pub observations: Vec<Observation>,
}

impl FitProblem {
    /// Builds the observation list from per-tree targets. `targets` and
    /// `topologies` must list the same trees in the same order; a tree may
    /// come with empty targets.
    pub fn new(
        targets: &[TargetSeries],
        topologies: Vec<TreeTopology>,
        dp: DirectParams,
        config: SimConfig,
        bounds: Bounds,
    ) -> Result<FitProblem> {
        if targets.len() != topologies.len() {
            return Err(CalibrateError::Misaligned(format!(
                "{} target series for {} topologies",
                targets.len(),
                topologies.len()
            )));
        }
        for (name, iv) in [("q0", bounds.q0), ("rp", bounds.rp), ("pc", bounds.pc)] {
            if !iv.valid() {
                return Err(CalibrateError::InvalidBounds(name));
            }
        }
        let mut observations = Vec::new();
        for (i, (ts, t)) in targets.iter().zip(&topologies).enumerate() {
            if ts.tree_id != t.tree_id {
                return Err(CalibrateError::Misaligned(format!("{} vs {}", ts.tree_id, t.tree_id)));
            }
            observations.extend(observations_of(i, ts));
        }
        Ok(FitProblem {
            tree_ids: topologies.iter().map(|t| t.tree_id.clone()).collect(),
            topologies,
            dp,
            config,
            bounds,
            observations,
        })
    }

    /// Observations of one tree's targets, with default relative weights.
    pub fn observations_for(tree: usize, ts: &TargetSeries) -> Vec<Observation> {
        observations_of(tree, ts)
    }

    pub fn n_params(&self) -> usize {
        self.tree_ids.len() + 2
    }

    pub fn param_names(&self) -> Vec<String> {
        self.tree_ids.iter().map(|t| format!("q0[{t}]")).chain(["rp".into(), "pc".into()]).collect()
    }

    pub fn in_bounds(&self, p: &FitParams) -> bool {
        p.q0.len() == self.tree_ids.len()
            && p.q0.iter().all(|&q| self.bounds.q0.contains(q))
            && self.bounds.rp.contains(p.rp)
            && self.bounds.pc.contains(p.pc)
    }

    fn log_bounds(&self) -> Vec<(f64, f64)> {
        let n = self.tree_ids.len();
        let mut v = vec![(self.bounds.q0.lo.ln(), self.bounds.q0.hi.ln()); n];
        v.push((self.bounds.rp.lo.ln(), self.bounds.rp.hi.ln()));
        v.push((self.bounds.pc.lo.ln(), self.bounds.pc.hi.ln()));
        v
    }

    /// Simulates every tree that carries at least one observation.
    pub fn simulate(&self, p: &FitParams) -> Result<Vec<Option<SimulationTrace>>> {
        let mut observed = vec![false; self.tree_ids.len()];
        for o in &self.observations {
            observed[o.tree] = true;
        }
        self.topologies
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if !observed[i] {
                    return Ok(None);
                }
                engine::simulate(&p.hidden(i), &self.dp, t, &self.config)
                    .map(Some)
                    .map_err(|source| CalibrateError::SimulationFailed { tree: t.tree_id.clone(), source })
            })
            .collect()
    }

    /// Weighted residuals `(simulated - measured) * weight`, in observation order.
    pub fn residuals(&self, p: &FitParams) -> Result<Vec<f64>> {
        let traces = self.simulate(p)?;
        self.observations
            .iter()
            .map(|o| {
                let trace = traces[o.tree].as_ref().expect("observed tree simulated");
                let sim = o.simulated(trace).ok_or_else(|| CalibrateError::MissingCohort {
                    tree: self.tree_ids[o.tree].clone(),
                    key: format!("{} {}", o.family, o.key),
                })?;
                Ok((sim - o.measured) * o.weight)
            })
            .collect()
    }

    fn residuals_log(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.residuals(&FitParams::from_log(x))
    }

    /// Jacobian of the residuals with respect to the log parameters.
    pub fn jacobian(&self, p: &FitParams, step: f64) -> Result<DMatrix<f64>> {
        fd_jacobian(|x| self.residuals_log(x), &p.to_log(), step)
    }

    fn breakdown(&self, r: &[f64]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let mut per_tree: BTreeMap<String, f64> = self.tree_ids.iter().map(|t| (t.clone(), 0.0)).collect();
        let mut per_family: BTreeMap<String, f64> = Family::ALL.iter().map(|f| (f.name().to_string(), 0.0)).collect();
        for (o, ri) in self.observations.iter().zip(r) {
            *per_tree.get_mut(&self.tree_ids[o.tree]).expect("tree listed") += ri * ri;
            *per_family.get_mut(o.family.name()).expect("family listed") += ri * ri;
        }
        (per_tree, per_family)
    }
}

fn observations_of(tree: usize, ts: &TargetSeries) -> Vec<Observation> {
    let obs = |family, key, measured: f64| Observation {
        tree,
        family,
        key,
        measured,
        weight: 1.0 / measured.abs().max(WEIGHT_FLOOR),
    };
    let mut out = Vec::with_capacity(ts.observation_count());
    for e in &ts.entries {
        out.push(obs(Family::DiameterPerGu, ObsKey::Class { pa: e.pa, ca: e.ca }, e.mean_internode_diameter));
    }
    for e in &ts.entries {
        out.push(obs(Family::MassPerGu, ObsKey::Class { pa: e.pa, ca: e.ca }, e.mean_internode_weight));
    }
    for c in &ts.cumulated {
        out.push(obs(Family::CumInternode, ObsKey::Cycle(c.cycle), c.cum_internode_mass));
    }
    for c in &ts.cumulated {
        out.push(obs(Family::CumBlade, ObsKey::Cycle(c.cycle), c.cum_blade_mass));
    }
    out
}

/// Central-difference Jacobian of `f` at `x` with absolute step `h`.
/// Columns are evaluated in parallel and assembled by index.
pub fn fd_jacobian<F, E>(f: F, x: &[f64], h: f64) -> std::result::Result<DMatrix<f64>, E>
where
    F: Fn(&[f64]) -> std::result::Result<Vec<f64>, E> + Sync,
    E: Send,
{
    let columns: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|j| {
            let mut xp = x.to_vec();
            xp[j] += h;
            let mut xm = x.to_vec();
            xm[j] -= h;
            let (fp, fm) = (f(&xp)?, f(&xm)?);
            Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        })
        .collect::<std::result::Result<_, E>>()?;
    let rows = columns.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows, x.len(), |i, j| columns[j][i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub q0: BTreeMap<String, f64>,
    pub rp: f64,
    pub pc: f64,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub per_tree_sse: BTreeMap<String, f64>,
    pub per_family_sse: BTreeMap<String, f64>,
    /// Parameters whose Jacobian column vanishes at the solution.
    pub unidentifiable: Vec<String>,
    /// Index of the winning start; 0 is the supplied init.
    pub start: usize,
}

impl FitResult {
    pub fn params(&self, problem: &FitProblem) -> FitParams {
        FitParams {
            q0: problem.tree_ids.iter().map(|t| self.q0[t]).collect(),
            rp: self.rp,
            pc: self.pc,
        }
    }

    pub fn hidden(&self, tree_id: &str) -> Option<HiddenParams> {
        self.q0.get(tree_id).map(|&q0| HiddenParams { q0, rp: self.rp, pc: self.pc })
    }
}

struct Run {
    x: Vec<f64>,
    sse: f64,
    iterations: usize,
    converged: bool,
}

fn sse_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn levenberg_marquardt(problem: &FitProblem, x0: Vec<f64>, opts: &FitOptions) -> Result<Run> {
    let bounds = problem.log_bounds();
    let mut x = x0;
    let mut r = problem.residuals_log(&x)?;
    let mut sse = sse_of(&r);
    let mut lambda = LAMBDA_INIT;
    let mut stalled = 0;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        if sse <= SSE_FLOOR {
            return Ok(Run { x, sse, iterations, converged: true });
        }
        iterations += 1;
        let j = fd_jacobian(|v| problem.residuals_log(v), &x, opts.fd_step)?;
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut m = a.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += lambda * (a[(i, i)] + 1e-12);
            }
            let step = match m.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let trial: Vec<f64> =
                x.iter().zip(step.iter()).zip(&bounds).map(|((xi, di), &(lo, hi))| (xi + di).clamp(lo, hi)).collect();
            let trial_r = match problem.residuals_log(&trial) {
                Ok(r) => r,
                Err(e @ CalibrateError::MissingCohort { .. }) => return Err(e),
                Err(e) => {
                    log::debug!("trial step rejected: {e}");
                    lambda *= 4.0;
                    continue;
                }
            };
            let trial_sse = sse_of(&trial_r);
            if trial_sse.is_finite() && trial_sse < sse {
                let rel = (sse - trial_sse) / sse;
                stalled = if rel < opts.rel_tol { stalled + 1 } else { 0 };
                x = trial;
                r = trial_r;
                sse = trial_sse;
                lambda = (lambda / 3.0).max(LAMBDA_MIN);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            log::debug!("damping exhausted at sse {sse:e} after {iterations} iterations");
            return Ok(Run { x, sse, iterations, converged: true });
        }
        if stalled >= opts.stall_iterations {
            return Ok(Run { x, sse, iterations, converged: true });
        }
    }
    let converged = sse <= SSE_FLOOR;
    Ok(Run { x, sse, iterations, converged })
}

/// Fits the hidden parameters from `init` and from `opts.n_starts`
/// log-uniform draws inside the bounds; the lowest SSE wins, ties going to
/// the earlier start.
pub fn fit_hidden(problem: &FitProblem, init: &FitParams, opts: &FitOptions) -> Result<FitResult> {
    if !problem.in_bounds(init) {
        return Err(CalibrateError::InfeasibleInit("initial point outside bounds".into()));
    }
    match problem.residuals(init) {
        Ok(_) => {}
        Err(e @ CalibrateError::MissingCohort { .. }) => return Err(e),
        Err(e) => return Err(CalibrateError::InfeasibleInit(e.to_string())),
    }
    let bounds = problem.log_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![init.to_log()];
    for _ in 0..opts.n_starts {
        starts.push(bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect());
    }
    let runs: Vec<Option<Run>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, x0)| match levenberg_marquardt(problem, x0, opts) {
            Ok(run) => Some(run),
            Err(e) => {
                log::debug!("start {i} abandoned: {e}");
                None
            }
        })
        .collect();
    let (start, best) = runs
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .fold(None::<(usize, Run)>, |acc, (i, r)| match acc {
            Some((bi, b)) if b.sse <= r.sse => Some((bi, b)),
            _ => Some((i, r)),
        })
        .ok_or_else(|| CalibrateError::InfeasibleInit("every start failed".into()))?;

    let params = FitParams::from_log(&best.x);
    let r = problem.residuals(&params)?;
    let (per_tree_sse, per_family_sse) = problem.breakdown(&r);
    let j = problem.jacobian(&params, opts.fd_step)?;
    let unidentifiable: Vec<String> = problem
        .param_names()
        .into_iter()
        .enumerate()
        .filter(|&(c, _)| j.column(c).norm() < UNIDENTIFIABLE_NORM)
        .map(|(_, n)| n)
        .collect();
    for name in &unidentifiable {
        log::warn!("{name} does not affect any residual and is unidentifiable");
    }
    if !best.converged {
        log::warn!("fit did not converge in {} iterations", best.iterations);
    }
    Ok(FitResult {
        q0: problem.tree_ids.iter().cloned().zip(params.q0.iter().copied()).collect(),
        rp: params.rp,
        pc: params.pc,
        sse: sse_of(&r),
        converged: best.converged,
        iterations: best.iterations,
        per_tree_sse,
        per_family_sse,
        unidentifiable,
        start,
    })
}

/// Target series a field campaign measuring every organ of the simulated
/// tree exactly would produce.
pub fn synthetic_targets(trace: &SimulationTrace, slw: f64) -> TargetSeries {
    let mut entries: Vec<TargetEntry> = trace
        .cohorts
        .iter()
        .filter(|c| c.count > 0)
        .map(|c| TargetEntry {
            pa: c.pa,
            ca: c.birth_cycle,
            mean_internode_weight: c.internode_mass,
            mean_internode_length: c.internode_length_cm,
            mean_internode_diameter: c.internode_diameter_mm,
            mean_blade_weight: c.blade_mass,
            mean_blade_area: c.blade_mass / slw,
            n_internodes: c.count as u32,
        })
        .collect();
    entries.sort_by_key(|e| (e.pa, e.ca));
    let cumulated = trace
        .cycles
        .iter()
        .map(|s| CumulatedPoint { cycle: s.cycle, cum_internode_mass: s.cum_internode_mass, cum_blade_mass: s.cum_blade_mass })
        .collect();
    TargetSeries { tree_id: trace.tree_id.clone(), entries, cumulated }
}
