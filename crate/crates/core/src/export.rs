//! Plot-ready tables and the 3-D line skeleton.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibrate::{Family, FitProblem};
use crate::engine::SimulationTrace;
use crate::ingest::TargetSeries;
use crate::topology::TreeTopology;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExportError {
    #[error("trace of tree {trace} does not match {other}")]
    TreeMismatch { trace: String, other: String },
    #[error("tree {tree}: no simulated value for {family} {key}")]
    MissingValue { tree: String, family: Family, key: String },
}

pub type Result<T, E = ExportError> = std::result::Result<T, E>;

pub const GOLDEN_ANGLE_DEG: f64 = 137.5;
/// Largest azimuth jitter either side of the golden-angle sequence, degrees.
pub const AZIMUTH_JITTER_DEG: f64 = 10.0;
/// Inclination of branch axes from the vertical, degrees.
pub const BRANCH_INCLINATION_DEG: f64 = 55.0;

/// One comparison table: `key,measured,simulated` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTable {
    pub family: Family,
    pub rows: Vec<(String, f64, f64)>,
}

impl FitTable {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.family.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,measured,simulated\n");
        for (k, m, v) in &self.rows {
            writeln!(s, "{k},{m},{v}").expect("write to string");
        }
        s
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.rows.iter().map(|(_, m, v)| (v - m).abs()).fold(0.0, f64::max)
    }
}

/// Measured against simulated values for the four calibration observables.
pub fn export_fit_csv(trace: &SimulationTrace, targets: &TargetSeries) -> Result<Vec<FitTable>> {
    if trace.tree_id != targets.tree_id {
        return Err(ExportError::TreeMismatch { trace: trace.tree_id.clone(), other: targets.tree_id.clone() });
    }
    let mut tables: BTreeMap<Family, FitTable> =
        Family::ALL.iter().map(|&f| (f, FitTable { family: f, rows: Vec::new() })).collect();
    for o in FitProblem::observations_for(0, targets) {
        let sim = o.simulated(trace).ok_or_else(|| ExportError::MissingValue {
            tree: trace.tree_id.clone(),
            family: o.family,
            key: o.key.to_string(),
        })?;
        tables.get_mut(&o.family).expect("family listed").rows.push((o.key.to_string(), o.measured, sim));
    }
    Ok(tables.into_values().collect())
}

pub fn trace_csv(trace: &SimulationTrace) -> String {
    let mut s = String::from(
        "cycle,funded,organ_demand,ring_demand,demand,allocated,ring_pool,leaf_surface,q_prod,total_mass,cum_internode_mass,cum_blade_mass\n",
    );
    for c in &trace.cycles {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.cycle,
            c.funded,
            c.organ_demand,
            c.ring_demand,
            c.demand,
            c.allocated,
            c.ring_pool,
            c.leaf_surface,
            c.q_prod,
            c.total_mass,
            c.cum_internode_mass,
            c.cum_blade_mass
        )
        .expect("write to string");
    }
    s
}

/// Per-internode final state, or per-cohort means when the trace carries
/// no individual internodes.
pub fn organs_csv(trace: &SimulationTrace) -> String {
    let mut s = String::new();
    if trace.internodes.is_empty() {
        s.push_str("pa,birth_cycle,count,blade_mass,internode_primary_mass,internode_ring_mass,internode_mass,length_cm,diameter_mm\n");
        for c in &trace.cohorts {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.pa.value(),
                c.birth_cycle,
                c.count,
                c.blade_mass,
                c.internode_primary_mass,
                c.internode_ring_mass,
                c.internode_mass,
                c.internode_length_cm,
                c.internode_diameter_mm
            )
            .expect("write to string");
        }
    } else {
        s.push_str("axis_id,gu_ca,rank_in_gu,pa,primary_mass,ring_mass,blade_mass,length_cm,diameter_mm\n");
        for n in &trace.internodes {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                n.axis_id,
                n.gu_ca,
                n.rank_in_gu,
                n.pa.value(),
                n.primary_mass,
                n.ring_mass,
                n.blade_mass,
                n.length_cm,
                n.diameter_mm
            )
            .expect("write to string");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub parent: Option<String>,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius_cm: f64,
}

fn segment_id(axis: &str, ca: u32, rank: u32) -> String {
    format!("{axis}:{ca}:{rank}")
}

/// Line skeleton with one segment per simulated internode.
///
/// The main axis grows along +z. A branch starts at the top of the internode
/// bearing it and runs straight at a fixed inclination; its azimuth advances
/// by the golden angle at every insertion, plus a seeded jitter.
pub fn skeleton(trace: &SimulationTrace, topology: &TreeTopology, seed: u64) -> Result<Vec<Segment>> {
    if trace.tree_id != topology.tree_id {
        return Err(ExportError::TreeMismatch { trace: trace.tree_id.clone(), other: topology.tree_id.clone() });
    }
    let mut by_axis: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, n) in trace.internodes.iter().enumerate() {
        if !topology.axes.get(&n.axis_id).is_some_and(|a| a.gu(n.gu_ca).is_some_and(|g| n.rank_in_gu <= g.internode_count)) {
            return Err(ExportError::TreeMismatch {
                trace: trace.tree_id.clone(),
                other: format!("topology without {}", segment_id(&n.axis_id, n.gu_ca, n.rank_in_gu)),
            });
        }
        by_axis.entry(n.axis_id.as_str()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let incl = BRANCH_INCLINATION_DEG.to_radians();
    let mut tops: BTreeMap<String, [f64; 3]> = BTreeMap::new();
    let mut segments = Vec::with_capacity(trace.internodes.len());
    let mut insertion = 0u32;
    for axis in topology.axes_parent_first() {
        let Some(nodes) = by_axis.get(axis.id.as_str()) else { continue };
        let (mut point, dir, mut parent) = match &axis.parent_id {
            None => ([0.0; 3], [0.0, 0.0, 1.0], None),
            Some(p) => {
                let rank = topology.attachment_rank(axis).expect("validated branch insertion") + 1;
                let pid = segment_id(p, axis.insertion_ca, rank);
                let jitter: f64 = rng.random_range(-AZIMUTH_JITTER_DEG..=AZIMUTH_JITTER_DEG);
                let az = (f64::from(insertion) * GOLDEN_ANGLE_DEG + jitter).rem_euclid(360.0) * PI / 180.0;
                insertion += 1;
                let Some(&start) = tops.get(&pid) else { continue };
                (start, [incl.sin() * az.cos(), incl.sin() * az.sin(), incl.cos()], Some(pid))
            }
        };
        for &i in nodes {
            let n = &trace.internodes[i];
            let id = segment_id(&n.axis_id, n.gu_ca, n.rank_in_gu);
            let end = [0, 1, 2].map(|k| point[k] + dir[k] * n.length_cm);
            tops.insert(id.clone(), end);
            segments.push(Segment { id: id.clone(), parent: parent.replace(id), start: point, end, radius_cm: n.diameter_mm / 20.0 });
            point = end;
        }
    }
    Ok(segments)
}

pub fn skeleton_csv(segments: &[Segment]) -> String {
    let mut s = String::from("segment_id,parent_id,x0,y0,z0,x1,y1,z1,radius_cm\n");
    for g in segments {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            g.id,
            g.parent.as_deref().unwrap_or(""),
            g.start[0],
            g.start[1],
            g.start[2],
            g.end[0],
            g.end[1],
            g.end[2],
            g.radius_cm
        )
        .expect("write to string");
    }
    s
}

/// Skeleton CSV of one simulated tree.
pub fn export_skeleton(trace: &SimulationTrace, topology: &TreeTopology, seed: u64) -> Result<String> {
    skeleton(trace, topology, seed).map(|s| skeleton_csv(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::synthetic_targets;
    use crate::engine::{simulate, HiddenParams, SimConfig};
    use crate::synthetic;
    use crate::topology::{build_topology, AxisRecord, GuRecord, PhysioAge};

    fn one_internode() -> TreeTopology {
        let axes = [AxisRecord { tree_id: "t".into(), axis_id: "m".into(), parent_axis_id: None, insertion_ca: 0 }];
        let gus = [GuRecord { tree_id: "t".into(), axis_id: "m".into(), gu_ca: 1, internode_count: 1, leaf_scar_count: 1 }];
        build_topology(&axes, &gus).unwrap().with_pa(&BTreeMap::from([("m".to_string(), PhysioAge::MAIN)])).unwrap()
    }

    #[test]
    fn single_internode_segment() {
        let t = one_internode();
        let dp = synthetic::reference_direct_params();
        let hp = HiddenParams { q0: 1.561, rp: 5.0, pc: 0.1 };
        let trace = simulate(&hp, &dp, &t, &SimConfig::default()).unwrap();
        let segs = skeleton(&trace, &t, 1).unwrap();
        assert_eq!(segs.len(), 1);
        let n = &trace.internodes[0];
        assert_eq!(segs[0].start, [0.0; 3]);
        assert!((segs[0].end[2] - n.length_cm).abs() < 1e-12);
        assert_eq!(segs[0].radius_cm, n.diameter_mm / 20.0);
        assert_eq!(segs[0].parent, None);
    }

    #[test]
    fn skeleton_deterministic_and_complete() {
        let dp = synthetic::reference_direct_params();
        for (i, t) in synthetic::reference_trees().iter().enumerate() {
            let trace = simulate(&synthetic::reference_hidden(i), &dp, t, &SimConfig::default()).unwrap();
            let a = export_skeleton(&trace, t, 42).unwrap();
            assert_eq!(a, export_skeleton(&trace, t, 42).unwrap());
            assert_ne!(a, export_skeleton(&trace, t, 43).unwrap());
            assert_eq!(a.lines().count() as u64 - 1, t.total_internodes());
        }
    }

    #[test]
    fn branches_start_on_their_bearer() {
        let dp = synthetic::reference_direct_params();
        let t = &synthetic::reference_trees()[1];
        let trace = simulate(&synthetic::reference_hidden(1), &dp, t, &SimConfig::default()).unwrap();
        let segs = skeleton(&trace, t, 7).unwrap();
        let ends: BTreeMap<&str, [f64; 3]> = segs.iter().map(|s| (s.id.as_str(), s.end)).collect();
        for s in &segs {
            if let Some(p) = &s.parent {
                assert_eq!(ends[p.as_str()], s.start);
            }
        }
    }

    #[test]
    fn fit_tables_match_observation_count() {
        let dp = synthetic::reference_direct_params();
        let t = &synthetic::reference_trees()[0];
        let trace = simulate(&synthetic::reference_hidden(0), &dp, t, &SimConfig::default()).unwrap();
        let targets = synthetic_targets(&trace, dp.slw);
        let tables = export_fit_csv(&trace, &targets).unwrap();
        assert_eq!(tables.iter().map(|t| t.rows.len()).sum::<usize>(), targets.observation_count());
        assert!(tables.iter().all(|t| t.max_abs_diff() == 0.0));
        let mut other = targets.clone();
        other.tree_id = "x".into();
        assert!(matches!(export_fit_csv(&trace, &other), Err(ExportError::TreeMismatch { .. })));
    }
}
