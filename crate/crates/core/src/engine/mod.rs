//! Deterministic source-sink growth recursion.
//!
//! Each cycle `i` the biomass available, the seed `q0` at cycle 1 and the
//! previous cycle's production `Q(i-1)` afterwards, is shared among the
//! organs still expanding and the ring compartment in proportion to their
//! sinks. The blades then functioning set the leaf surface `S(i)` and hence
//! `Q(i)`.
//!
//! Two drivers share the building blocks below: [`simulate`] walks every
//! internode of an explicit [`TreeTopology`], [`simulate_factored`] only
//! tracks cohort counts produced by a [`BranchingRules`] recurrence.
//!
//! [`TreeTopology`]: crate::topology::TreeTopology

mod explicit;
mod factored;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use explicit::{simulate, simulate_until};
pub use factored::{expand_rules, gu_counts, simulate_factored, substructure_organ_count, BranchingRules, PaRule};

use crate::direct_estim::{Allometry, DirectParams};
use crate::topology::{OrganKind, PhysioAge, TopologyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("cycle {cycle}: {biomass} g available but total demand is zero")]
    ZeroDemandWithBiomass { cycle: u32, biomass: f64 },
    #[error("no internode sink for {0}")]
    MissingSink(PhysioAge),
    #[error("no allometry for {0}")]
    MissingAllometry(PhysioAge),
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("pipe ring distribution requires the explicit topology mode")]
    UnsupportedRingMode,
    #[error("cohort count overflow at {pa} cycle {cycle}")]
    CountOverflow { pa: PhysioAge, cycle: u32 },
    #[error("invalid branching rules: {0}")]
    InvalidRules(String),
    #[error("cannot simulate {requested} cycles of a {age}-cycle topology")]
    CyclesOutOfRange { requested: u32, age: u32 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Fitted parameters of one tree: seed biomass (g), leaf resistance and
/// relative ring sink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub q0: f64,
    pub rp: f64,
    pub pc: f64,
}

impl HiddenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, value: f64| Err(EngineError::InvalidParameter { name, value });
        if !(self.q0 >= 0.0 && self.q0.is_finite()) {
            return bad("q0", self.q0);
        }
        if !(self.rp > 0.0 && self.rp.is_finite()) {
            return bad("rp", self.rp);
        }
        if !(self.pc >= 0.0 && self.pc.is_finite()) {
            return bad("pc", self.pc);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RingMode {
    /// Equal share per internode older than the current cycle.
    #[default]
    Uniform,
    /// Share proportional to the functioning blades borne above the internode.
    Pipe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RingDemand {
    /// `pc` per functioning blade.
    #[default]
    PerBlade,
    /// A single `pc` per cycle.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Environmental potential, g/cm²/cycle.
    pub e: f64,
    /// Characteristic ground surface, cm².
    pub sp: f64,
    /// Fresh internode density, g/cm³.
    pub rho: f64,
    /// Cycles a blade keeps functioning.
    pub t_f: u32,
    /// Cycles an organ keeps expanding.
    pub t_exp: u32,
    pub ring_mode: RingMode,
    pub ring_demand: RingDemand,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            e: 1.0,
            // 3 m × 4 m planting spacing.
            sp: 120_000.0,
            rho: 1.0,
            t_f: 1,
            t_exp: 1,
            ring_mode: RingMode::Uniform,
            ring_demand: RingDemand::PerBlade,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("e", self.e), ("sp", self.sp), ("rho", self.rho)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EngineError::InvalidParameter { name, value });
            }
        }
        if self.t_f == 0 {
            return Err(EngineError::InvalidParameter { name: "t_f", value: 0.0 });
        }
        if self.t_exp == 0 {
            return Err(EngineError::InvalidParameter { name: "t_exp", value: 0.0 });
        }
        Ok(())
    }

    pub(crate) fn expanding(&self, birth: u32, cycle: u32) -> bool {
        birth <= cycle && cycle < birth + self.t_exp
    }

    pub(crate) fn functioning(&self, birth: u32, cycle: u32) -> bool {
        birth <= cycle && cycle < birth + self.t_f
    }
}

/// Biomass produced by a leaf surface `s` (cm²):
/// `e · (sp/rp) · (1 − exp(−s/sp))`.
pub fn production(s: f64, cfg: &SimConfig, hp: &HiddenParams) -> f64 {
    cfg.e * (cfg.sp / hp.rp) * -(-s / cfg.sp).exp_m1()
}

/// Demand of one cycle split into its organ and ring parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demand {
    pub organs: f64,
    pub ring: f64,
}

impl Demand {
    pub fn total(&self) -> f64 {
        self.organs + self.ring
    }
}

/// Total sink of the expanding organs plus the ring compartment.
///
/// Blade sink is 1 for every PA. The ring term applies only when some
/// internode older than the current cycle exists to receive it.
pub fn demand(
    expanding: &BTreeMap<(PhysioAge, OrganKind), u64>,
    functioning_blades: u64,
    ring_targets: bool,
    dp: &DirectParams,
    hp: &HiddenParams,
    cfg: &SimConfig,
) -> Result<Demand> {
    let mut organs = 0.0;
    for (&(pa, kind), &count) in expanding {
        let sink = match kind {
            OrganKind::Blade => 1.0,
            OrganKind::Internode => dp.sink(pa).ok_or(EngineError::MissingSink(pa))?,
        };
        organs += count as f64 * sink;
    }
    let ring = ring_demand(functioning_blades as f64, ring_targets, hp, cfg);
    Ok(Demand { organs, ring })
}

pub(crate) fn ring_demand(functioning_blades: f64, ring_targets: bool, hp: &HiddenParams, cfg: &SimConfig) -> f64 {
    if !ring_targets {
        return 0.0;
    }
    match cfg.ring_demand {
        RingDemand::PerBlade => hp.pc * functioning_blades,
        RingDemand::Constant => hp.pc,
    }
}

/// Shares `q_prev` among components in proportion to their sinks.
pub fn allocate(q_prev: f64, total_demand: f64, sinks: &[f64], cycle: u32) -> Result<Vec<f64>> {
    if q_prev == 0.0 {
        return Ok(vec![0.0; sinks.len()]);
    }
    if total_demand <= 0.0 {
        return Err(EngineError::ZeroDemandWithBiomass { cycle, biomass: q_prev });
    }
    Ok(sinks.iter().map(|s| q_prev * s / total_demand).collect())
}

/// Splits the ring pool over internodes in proportion to `weights`
/// (all ones for the uniform mode). Falls back to equal shares when every
/// weight is zero.
pub fn distribute_rings(pool: f64, weights: &[f64]) -> Vec<f64> {
    if weights.is_empty() || pool == 0.0 {
        return vec![0.0; weights.len()];
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| pool * w / total).collect()
    } else {
        vec![pool / weights.len() as f64; weights.len()]
    }
}

/// Length (cm) from primary mass through the allometry and diameter (cm)
/// from total mass through the cylinder closure `π/4 · d² · l · rho = q`.
pub fn internode_geometry(primary_mass: f64, total_mass: f64, shape: Allometry, rho: f64) -> (f64, f64) {
    if primary_mass <= 0.0 {
        return (0.0, 0.0);
    }
    let length = shape.length(primary_mass);
    (length, cylinder_diameter(total_mass, length, rho))
}

pub(crate) fn cylinder_diameter(total_mass: f64, length: f64, rho: f64) -> f64 {
    if length <= 0.0 || total_mass <= 0.0 {
        return 0.0;
    }
    (4.0 * total_mass / (PI * rho * length)).sqrt()
}

/// Balance of one simulated cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleState {
    pub cycle: u32,
    /// Biomass shared out this cycle (q0, then Q(i-1)), g.
    pub funded: f64,
    pub organ_demand: f64,
    pub ring_demand: f64,
    /// D(i).
    pub demand: f64,
    /// Sum of every organ and ring increment actually applied, g.
    pub allocated: f64,
    pub ring_pool: f64,
    /// S(i), cm².
    pub leaf_surface: f64,
    /// Q(i), g.
    pub q_prod: f64,
    /// Mass of all organs ever built, rings included, at the end of the cycle, g.
    pub total_mass: f64,
    /// Final internode mass (primary + rings) of organs born up to this cycle, g.
    pub cum_internode_mass: f64,
    /// Blade mass of organs born up to this cycle, g.
    pub cum_blade_mass: f64,
}

/// Per-organ means over the organs of one (PA, birth cycle) cohort, at the
/// end of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub pa: PhysioAge,
    pub birth_cycle: u32,
    /// Internodes in the cohort, equal to its blade count.
    pub count: u64,
    pub blade_mass: f64,
    pub internode_primary_mass: f64,
    pub internode_ring_mass: f64,
    pub internode_mass: f64,
    pub internode_length_cm: f64,
    pub internode_diameter_mm: f64,
}

/// Final state of one internode of an explicit topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternodeState {
    pub axis_id: String,
    pub gu_ca: u32,
    pub rank_in_gu: u32,
    pub pa: PhysioAge,
    pub primary_mass: f64,
    pub ring_mass: f64,
    pub blade_mass: f64,
    pub length_cm: f64,
    pub diameter_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub tree_id: String,
    pub cycles: Vec<CycleState>,
    pub cohorts: Vec<Cohort>,
    /// Empty in factored mode.
    pub internodes: Vec<InternodeState>,
}

impl SimulationTrace {
    pub fn cohort(&self, pa: PhysioAge, birth_cycle: u32) -> Option<&Cohort> {
        self.cohorts.iter().find(|c| c.pa == pa && c.birth_cycle == birth_cycle)
    }

    pub fn final_mass(&self) -> f64 {
        self.cycles.last().map_or(0.0, |c| c.total_mass)
    }

    pub fn organ_count(&self) -> u64 {
        2 * self.cohorts.iter().map(|c| c.count).sum::<u64>()
    }
}

pub(crate) fn shape_of(dp: &DirectParams, pa: PhysioAge) -> Result<Allometry> {
    dp.shape(pa).ok_or(EngineError::MissingAllometry(pa))
}

pub(crate) fn sink_of(dp: &DirectParams, pa: PhysioAge) -> Result<f64> {
    dp.sink(pa).ok_or(EngineError::MissingSink(pa))
}
