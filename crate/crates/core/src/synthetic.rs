//! Synthetic trees, parameter sets and measurement files.
//!
//! These generators back the test suites, the benchmark subcommand and the
//! committed CSV fixtures. The four reference trees mimic a sampling
//! campaign on 3- to 6-year-old trees with four or six sampled branches.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::direct_estim::{Allometry, DirectParams};
use crate::engine::{self, HiddenParams, SimConfig};
use crate::ingest::{InternodeRecord, LeafRecord, MeasurementSet};
use crate::topology::{build_topology, AxisRecord, GuRecord, PhysioAge, TreeTopology};

/// Internode sinks per PA of the reference parameter set.
pub const REFERENCE_SINKS: [f64; 5] = [0.561, 0.726, 0.858, 0.954, 0.499];
/// Allometric `b` per PA of the reference parameter set.
pub const REFERENCE_B: [f64; 5] = [5.193, 7.229, 9.279, 12.146, 20.78];
/// Allometric exponents used with [`REFERENCE_B`] under `length = b · mass^beta`.
pub const REFERENCE_BETA: [f64; 5] = [0.35, 0.33, 0.31, 0.29, 0.27];
/// Specific leaf weight, g/cm².
pub const REFERENCE_SLW: f64 = 0.0287;

pub const REFERENCE_Q0: [f64; 4] = [14.23, 0.97, 47.23, 10.94];
pub const REFERENCE_RP: f64 = 6.4319;
pub const REFERENCE_PC: f64 = 0.13882;

/// Sinks decreasing with PA, used by the measurement fixtures so that the
/// terminal-weight classification recovers the generating PAs.
pub const FIXTURE_SINKS: [f64; 5] = [0.95, 0.80, 0.62, 0.45, 0.30];

fn direct_params(sinks: &[f64; 5]) -> DirectParams {
    let p_int = (0..5).map(|i| (PhysioAge::from_index(i), sinks[i])).collect();
    let allometry = (0..5)
        .map(|i| (PhysioAge::from_index(i), Allometry { b: REFERENCE_B[i], beta: REFERENCE_BETA[i] }))
        .collect();
    DirectParams { p_int, allometry, slw: REFERENCE_SLW }
}

pub fn reference_direct_params() -> DirectParams {
    direct_params(&REFERENCE_SINKS)
}

pub fn fixture_direct_params() -> DirectParams {
    direct_params(&FIXTURE_SINKS)
}

pub fn reference_hidden(tree: usize) -> HiddenParams {
    HiddenParams { q0: REFERENCE_Q0[tree], rp: REFERENCE_RP, pc: REFERENCE_PC }
}

/// (id, parent, insertion ca, PA) of the sampled branches of each tree.
type BranchSpec = (&'static str, &'static str, u32, u8);

const TREES: [(&str, u32, &[BranchSpec]); 4] = [
    ("tree1", 3, &[("b1", "m", 1, 2), ("b2", "m", 1, 3), ("b3", "m", 2, 4), ("b4", "b1", 2, 5)]),
    (
        "tree2",
        4,
        &[
            ("b1", "m", 1, 2),
            ("b2", "m", 2, 2),
            ("b3", "m", 2, 3),
            ("b4", "b1", 2, 3),
            ("b5", "m", 3, 4),
            ("b6", "b2", 3, 5),
        ],
    ),
    ("tree3", 5, &[("b1", "m", 1, 2), ("b2", "m", 2, 3), ("b3", "b1", 3, 4), ("b4", "m", 4, 5)]),
    (
        "tree4",
        6,
        &[
            ("b1", "m", 1, 2),
            ("b2", "m", 2, 2),
            ("b3", "m", 3, 3),
            ("b4", "b2", 3, 3),
            ("b5", "m", 4, 4),
            ("b6", "b3", 5, 5),
        ],
    ),
];

fn internodes_per_gu(pa: u8, ca: u32) -> u32 {
    match pa {
        1 => 8 + 2 * ca,
        2 => 6,
        3 => 5,
        4 => 4,
        _ => 3,
    }
}

/// Axis and GU records of the four reference trees.
pub fn reference_records() -> (Vec<AxisRecord>, Vec<GuRecord>) {
    let mut axes = Vec::new();
    let mut gus = Vec::new();
    for (tree, age, branches) in TREES {
        let mut push = |id: &str, parent: Option<&str>, insertion: u32, pa: u8| {
            axes.push(AxisRecord {
                tree_id: tree.into(),
                axis_id: id.into(),
                parent_axis_id: parent.map(Into::into),
                insertion_ca: insertion,
            });
            for ca in insertion + 1..=age {
                let n = internodes_per_gu(pa, ca);
                gus.push(GuRecord {
                    tree_id: tree.into(),
                    axis_id: id.into(),
                    gu_ca: ca,
                    internode_count: n,
                    leaf_scar_count: n,
                });
            }
        };
        push("m", None, 0, 1);
        for &(id, parent, insertion, pa) in branches {
            push(id, Some(parent), insertion, pa);
        }
    }
    (axes, gus)
}

/// Generating PA of every axis of the reference trees.
pub fn reference_pa_map() -> BTreeMap<String, BTreeMap<String, PhysioAge>> {
    TREES
        .iter()
        .map(|(tree, _, branches)| {
            let mut m = BTreeMap::from([("m".to_string(), PhysioAge::MAIN)]);
            for &(id, _, _, pa) in branches.iter() {
                m.insert(id.to_string(), PhysioAge::from_index(usize::from(pa) - 1));
            }
            (tree.to_string(), m)
        })
        .collect()
}

/// The four reference trees with their generating PAs applied.
pub fn reference_trees() -> Vec<TreeTopology> {
    let (axes, gus) = reference_records();
    let pa = reference_pa_map();
    crate::topology::build_topologies(&axes, &gus)
        .expect("reference records are valid")
        .into_iter()
        .map(|t| t.with_pa(&pa[&t.tree_id]).expect("reference PAs are consistent"))
        .collect()
}

fn round_to(x: f64, decimals: usize) -> f64 {
    format!("{x:.decimals$}").parse().expect("formatted float parses")
}

/// Measurement files as a field campaign on the reference trees would
/// produce them, simulated with `dp` and the per-tree hidden parameters.
///
/// Internode weights, lengths and diameters are the simulated values rounded
/// to instrument resolution. Three leaves per GU are drawn around the
/// simulated blade mass with 5% scatter, their areas from the specific leaf
/// weight with 3% scatter. The oldest main-stem GU of the oldest tree is left
/// without leaf samples.
pub fn reference_measurements(dp: &DirectParams, hidden: &[HiddenParams], cfg: &SimConfig, seed: u64) -> MeasurementSet {
    campaign(dp, hidden, cfg, Some(seed))
}

/// Exact simulated values for every internode and three exact leaf samples
/// on every GU.
pub fn noiseless_measurements(dp: &DirectParams, hidden: &[HiddenParams], cfg: &SimConfig) -> MeasurementSet {
    campaign(dp, hidden, cfg, None)
}

fn campaign(dp: &DirectParams, hidden: &[HiddenParams], cfg: &SimConfig, noise: Option<u64>) -> MeasurementSet {
    let (axes, gus) = reference_records();
    let trees = reference_trees();
    let mut rng = noise.map(ChaCha8Rng::seed_from_u64);
    let round = |x: f64, d: usize| if noise.is_some() { round_to(x, d) } else { x };
    let mut internodes = Vec::new();
    let mut leaves = Vec::new();
    for (tree, hp) in trees.iter().zip(hidden) {
        let trace = engine::simulate(hp, dp, tree, cfg).expect("reference simulation");
        for s in &trace.internodes {
            internodes.push(InternodeRecord {
                tree_id: tree.tree_id.clone(),
                axis_id: s.axis_id.clone(),
                gu_ca: s.gu_ca,
                rank_in_gu: s.rank_in_gu,
                fresh_weight_g: round(s.primary_mass + s.ring_mass, 3),
                length_cm: round(s.length_cm, 2),
                diameter_mm: round(s.diameter_mm, 2),
            });
        }
        for axis in tree.axes.values() {
            for gu in &axis.gus {
                if rng.is_some() && tree.tree_id == "tree4" && axis.parent_id.is_none() && gu.ca == 1 {
                    continue;
                }
                let blade = trace
                    .internodes
                    .iter()
                    .find(|s| s.axis_id == axis.id && s.gu_ca == gu.ca)
                    .map(|s| s.blade_mass)
                    .expect("simulated GU");
                for i in 1..=gu.internode_count.min(3) as u8 {
                    let (w, a) = match rng.as_mut() {
                        Some(rng) => {
                            let w = round_to(blade * (1.0 + 0.05 * (2.0 * rng.random::<f64>() - 1.0)), 3);
                            (w, round_to(w / dp.slw * (1.0 + 0.03 * (2.0 * rng.random::<f64>() - 1.0)), 2))
                        }
                        None => (blade, blade / dp.slw),
                    };
                    leaves.push(LeafRecord {
                        tree_id: tree.tree_id.clone(),
                        axis_id: axis.id.clone(),
                        gu_ca: gu.ca,
                        sample_index: i,
                        fresh_weight_g: w,
                        area_cm2: a,
                    });
                }
            }
        }
    }
    MeasurementSet { axes, gus, internodes, leaves }
}

/// Random classified topology: a main stem growing every cycle plus
/// branches of random PA, insertion and length.
pub fn random_topology<R: Rng>(rng: &mut R, tree_id: &str, max_age: u32, p_max: u8, max_axes: usize) -> TreeTopology {
    let age = rng.random_range(1..=max_age);
    let mut axes = vec![AxisRecord {
        tree_id: tree_id.into(),
        axis_id: "a0".into(),
        parent_axis_id: None,
        insertion_ca: 0,
    }];
    // (id, first ca, last ca, pa)
    let mut spans = vec![("a0".to_string(), 1u32, age, 1u8)];
    let mut i = 0;
    while i < spans.len() && spans.len() < max_axes {
        let (id, first, last, pa) = spans[i].clone();
        for ca in first..last.min(age - 1) + 1 {
            if ca >= age || spans.len() >= max_axes || !rng.random_bool(0.35) {
                continue;
            }
            let child_pa = (pa + rng.random_range(0..=1)).min(p_max);
            let child_last = rng.random_range(ca + 1..=age);
            let child = format!("a{}", spans.len());
            axes.push(AxisRecord {
                tree_id: tree_id.into(),
                axis_id: child.clone(),
                parent_axis_id: Some(id.clone()),
                insertion_ca: ca,
            });
            spans.push((child, ca + 1, child_last, child_pa));
        }
        i += 1;
    }
    let mut gus = Vec::new();
    let mut pa = BTreeMap::new();
    for (id, first, last, p) in &spans {
        pa.insert(id.clone(), PhysioAge::from_index(usize::from(*p) - 1));
        for ca in *first..=*last {
            let n = rng.random_range(1..=4);
            gus.push(GuRecord {
                tree_id: tree_id.into(),
                axis_id: id.clone(),
                gu_ca: ca,
                internode_count: n,
                leaf_scar_count: n,
            });
        }
    }
    build_topology(&axes, &gus)
        .and_then(|t| t.with_pa(&pa))
        .expect("random topology is valid by construction")
}

/// Random direct parameters over `p_max` classes.
pub fn random_direct_params<R: Rng>(rng: &mut R, p_max: u8) -> DirectParams {
    let mut p_int = BTreeMap::new();
    let mut allometry = BTreeMap::new();
    for i in 0..usize::from(p_max) {
        let pa = PhysioAge::from_index(i);
        p_int.insert(pa, rng.random_range(0.2..1.5));
        allometry.insert(pa, Allometry { b: rng.random_range(2.0..25.0), beta: rng.random_range(0.1..0.6) });
    }
    DirectParams { p_int, allometry, slw: rng.random_range(0.01..0.05) }
}
