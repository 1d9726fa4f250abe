//! Parameters read directly off the measurements: per-PA internode sink
//! relative to the blade, per-PA internode allometry and a pooled specific
//! leaf weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingest::{Dataset, LeafRecord};
use crate::pa_classify::PaMap;
use crate::topology::PhysioAge;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error("{what}: need at least {needed} data points, got {got}")]
    InsufficientData { what: String, needed: usize, got: usize },
    #[error("{0}: all masses are equal, allometry exponent undetermined")]
    DegenerateSpread(String),
    #[error("{what}: non-positive value {value}")]
    NonPositive { what: String, value: f64 },
    #[error("axis `{tree}/{axis}` has no physiological age assignment")]
    MissingPA { tree: String, axis: String },
}

pub type Result<T, E = EstimateError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allometry {
    /// Length at unit mass, cm·g^-beta.
    pub b: f64,
    pub beta: f64,
}

impl Allometry {
    pub fn length(&self, mass: f64) -> f64 {
        self.b * mass.powf(self.beta)
    }
}

/// Internode sinks relative to a blade sink of 1, internode allometry
/// `length = b · mass^beta`, and specific leaf weight in g/cm².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectParams {
    pub p_int: BTreeMap<PhysioAge, f64>,
    pub allometry: BTreeMap<PhysioAge, Allometry>,
    pub slw: f64,
}

impl DirectParams {
    pub fn sink(&self, pa: PhysioAge) -> Option<f64> {
        self.p_int.get(&pa).copied()
    }

    pub fn shape(&self, pa: PhysioAge) -> Option<Allometry> {
        self.allometry.get(&pa).copied()
    }

    /// Flags sinks that do not decrease with physiological age.
    pub fn sink_order_anomalies(&self) -> Vec<(PhysioAge, PhysioAge)> {
        let v: Vec<(PhysioAge, f64)> = self.p_int.iter().map(|(&k, &v)| (k, v)).collect();
        v.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| (w[0].0, w[1].0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkFit {
    pub ratio: f64,
    /// Uncentered R², 1 − SSres/Σy², the usual measure for a line through
    /// the origin.
    pub r_squared: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllometryFit {
    pub b: f64,
    pub beta: f64,
    pub r_squared: f64,
}

fn check_positive(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !(v > 0.0 && v.is_finite()) {
            return Err(EstimateError::NonPositive { what: what.to_string(), value: v });
        }
    }
    Ok(())
}

/// Proportionality constant between internode mass and blade mass of new
/// GUs: slope of the least-squares line through the origin.
pub fn fit_sink_ratio(pairs: &[(f64, f64)]) -> Result<SinkFit> {
    if pairs.len() < 2 {
        return Err(EstimateError::InsufficientData { what: "sink ratio".into(), needed: 2, got: pairs.len() });
    }
    check_positive("sink ratio", pairs.iter().flat_map(|&(x, y)| [x, y]))?;
    let sxy: f64 = pairs.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| x * x).sum();
    let syy: f64 = pairs.iter().map(|(_, y)| y * y).sum();
    let ratio = sxy / sxx;
    let ss_res: f64 = pairs.iter().map(|(x, y)| (y - ratio * x).powi(2)).sum();
    Ok(SinkFit { ratio, r_squared: 1.0 - ss_res / syy })
}

/// Power law `length = b · mass^beta` by ordinary least squares on
/// `(ln mass, ln length)`.
pub fn fit_allometry(pairs: &[(f64, f64)]) -> Result<AllometryFit> {
    if pairs.len() < 3 {
        return Err(EstimateError::InsufficientData { what: "allometry".into(), needed: 3, got: pairs.len() });
    }
    check_positive("allometry", pairs.iter().flat_map(|&(q, l)| [q, l]))?;
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|(q, _)| q.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|(_, l)| l.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 || pairs.iter().all(|p| p.0 == pairs[0].0) {
        return Err(EstimateError::DegenerateSpread("allometry".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - beta * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(AllometryFit { b: intercept.exp(), beta, r_squared })
}

/// Pooled specific leaf weight: total sampled mass over total sampled area.
pub fn estimate_slw(leaves: &[LeafRecord]) -> Result<f64> {
    if leaves.is_empty() {
        return Err(EstimateError::InsufficientData { what: "specific leaf weight".into(), needed: 1, got: 0 });
    }
    check_positive("specific leaf weight", leaves.iter().flat_map(|l| [l.fresh_weight_g, l.area_cm2]))?;
    let mass: f64 = leaves.iter().map(|l| l.fresh_weight_g).sum();
    let area: f64 = leaves.iter().map(|l| l.area_cm2).sum();
    Ok(mass / area)
}

/// Regression inputs gathered from the terminal (newest) GU of every axis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewGrowth {
    /// (mean blade mass, mean internode mass) per axis.
    pub sink_pairs: BTreeMap<PhysioAge, Vec<(f64, f64)>>,
    /// (mass, length) per terminal internode.
    pub allometry_pairs: BTreeMap<PhysioAge, Vec<(f64, f64)>>,
}

pub fn collect_new_growth(data: &Dataset, pa: &PaMap) -> Result<NewGrowth> {
    let mut out = NewGrowth::default();
    for tree in &data.trees {
        for axis in tree.axes.values() {
            let age = pa
                .get(&tree.tree_id)
                .and_then(|m| m.get(&axis.id))
                .copied()
                .ok_or_else(|| EstimateError::MissingPA { tree: tree.tree_id.clone(), axis: axis.id.clone() })?;
            let top = axis.last_gu().ca;
            let ints: Vec<_> = data
                .internodes_of(&tree.tree_id)
                .filter(|r| r.axis_id == axis.id && r.gu_ca == top)
                .collect();
            let leaves: Vec<_> = data
                .leaves_of(&tree.tree_id)
                .filter(|r| r.axis_id == axis.id && r.gu_ca == top)
                .collect();
            out.allometry_pairs
                .entry(age)
                .or_default()
                .extend(ints.iter().map(|r| (r.fresh_weight_g, r.length_cm)));
            if ints.is_empty() || leaves.is_empty() {
                log::warn!("tree {} axis {}: terminal GU lacks internode or leaf data", tree.tree_id, axis.id);
                continue;
            }
            let int_mean = ints.iter().map(|r| r.fresh_weight_g).sum::<f64>() / ints.len() as f64;
            let leaf_mean = leaves.iter().map(|r| r.fresh_weight_g).sum::<f64>() / leaves.len() as f64;
            out.sink_pairs.entry(age).or_default().push((leaf_mean, int_mean));
        }
    }
    Ok(out)
}

/// Estimates every direct parameter from a classified dataset, pooling all
/// trees.
pub fn estimate_direct_params(data: &Dataset, pa: &PaMap) -> Result<DirectParams> {
    let growth = collect_new_growth(data, pa)?;
    let mut p_int = BTreeMap::new();
    for (age, pairs) in &growth.sink_pairs {
        let fit = fit_sink_ratio(pairs).map_err(|e| with_context(e, *age))?;
        log::info!("{age}: internode sink {:.4} (R² {:.3})", fit.ratio, fit.r_squared);
        p_int.insert(*age, fit.ratio);
    }
    let mut allometry = BTreeMap::new();
    for (age, pairs) in &growth.allometry_pairs {
        let fit = fit_allometry(pairs).map_err(|e| with_context(e, *age))?;
        log::info!("{age}: allometry b {:.4} beta {:.4} (R² {:.3})", fit.b, fit.beta, fit.r_squared);
        allometry.insert(*age, Allometry { b: fit.b, beta: fit.beta });
    }
    let slw = estimate_slw(&data.leaves)?;
    let params = DirectParams { p_int, allometry, slw };
    for (lo, hi) in params.sink_order_anomalies() {
        log::warn!("internode sink increases from {lo} to {hi}");
    }
    Ok(params)
}

fn with_context(e: EstimateError, age: PhysioAge) -> EstimateError {
    match e {
        EstimateError::InsufficientData { what, needed, got } => {
            EstimateError::InsufficientData { what: format!("{what} for {age}"), needed, got }
        }
        EstimateError::DegenerateSpread(what) => EstimateError::DegenerateSpread(format!("{what} for {age}")),
        other => other,
    }
}
