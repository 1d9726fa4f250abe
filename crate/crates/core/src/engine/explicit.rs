use std::collections::BTreeMap;

use super::{
    cylinder_diameter, production, ring_demand, shape_of, sink_of, Cohort, CycleState, EngineError, HiddenParams,
    InternodeState, Result, RingMode, SimConfig, SimulationTrace,
};
use crate::direct_estim::{Allometry, DirectParams};
use crate::topology::{PhysioAge, TreeTopology};

struct Node {
    axis: usize,
    gu_ca: u32,
    rank: u32,
    pa: PhysioAge,
    sink: f64,
    shape: Allometry,
    /// Proximal neighbour: previous internode on the axis, or the bearing
    /// internode for the first internode of a branch.
    parent: Option<usize>,
    primary: f64,
    ring: f64,
    blade: f64,
    length: f64,
}

fn flatten(t: &TreeTopology, dp: &DirectParams) -> Result<(Vec<Node>, Vec<String>)> {
    let axes = t.axes_parent_first();
    let mut nodes: Vec<Node> = Vec::with_capacity(t.total_internodes() as usize);
    // (axis id, gu ca) -> index of the GU's first internode.
    let mut gu_start: BTreeMap<(&str, u32), usize> = BTreeMap::new();
    let mut names = Vec::with_capacity(axes.len());
    for (ai, axis) in axes.iter().enumerate() {
        names.push(axis.id.clone());
        let pa = axis.pa()?;
        let sink = sink_of(dp, pa)?;
        let shape = shape_of(dp, pa)?;
        let mut prev = match &axis.parent_id {
            None => None,
            Some(parent) => {
                let rank = t.attachment_rank(axis).expect("validated branch insertion");
                Some(gu_start[&(parent.as_str(), axis.insertion_ca)] + rank as usize)
            }
        };
        for gu in &axis.gus {
            gu_start.insert((axis.id.as_str(), gu.ca), nodes.len());
            for rank in 1..=gu.internode_count {
                nodes.push(Node {
                    axis: ai,
                    gu_ca: gu.ca,
                    rank,
                    pa,
                    sink,
                    shape,
                    parent: prev,
                    primary: 0.0,
                    ring: 0.0,
                    blade: 0.0,
                    length: 0.0,
                });
                prev = Some(nodes.len() - 1);
            }
        }
    }
    Ok((nodes, names))
}

/// Simulates every cycle of a classified topology.
pub fn simulate(hp: &HiddenParams, dp: &DirectParams, topology: &TreeTopology, cfg: &SimConfig) -> Result<SimulationTrace> {
    simulate_until(hp, dp, topology, cfg, topology.age)
}

/// Simulates cycles `1..=cycles` of a classified topology; organs born after
/// `cycles` do not exist yet.
pub fn simulate_until(
    hp: &HiddenParams,
    dp: &DirectParams,
    topology: &TreeTopology,
    cfg: &SimConfig,
    cycles: u32,
) -> Result<SimulationTrace> {
    hp.validate()?;
    cfg.validate()?;
    if cycles == 0 || cycles > topology.age {
        return Err(EngineError::CyclesOutOfRange { requested: cycles, age: topology.age });
    }
    let (mut nodes, axis_names) = flatten(topology, dp)?;
    nodes.retain(|n| n.gu_ca <= cycles);
    let mut states = Vec::with_capacity(cycles as usize);
    let mut weights = vec![0.0; nodes.len()];
    let mut q_prev = hp.q0;

    for cycle in 1..=cycles {
        let funded = q_prev;
        let mut organ_demand = 0.0;
        let mut functioning = 0u64;
        let mut targets = 0usize;
        for n in &nodes {
            if cfg.expanding(n.gu_ca, cycle) {
                organ_demand += 1.0 + n.sink;
            }
            if cfg.functioning(n.gu_ca, cycle) {
                functioning += 1;
            }
            if n.gu_ca < cycle {
                targets += 1;
            }
        }
        let ring_d = ring_demand(functioning as f64, targets > 0, hp, cfg);
        let total_d = organ_demand + ring_d;
        if total_d <= 0.0 && funded > 0.0 {
            return Err(EngineError::ZeroDemandWithBiomass { cycle, biomass: funded });
        }
        let unit = if funded > 0.0 { funded / total_d } else { 0.0 };
        let ring_pool = unit * ring_d;

        let mut allocated = 0.0;
        for n in nodes.iter_mut().filter(|n| cfg.expanding(n.gu_ca, cycle)) {
            let blade_inc = unit;
            let int_inc = unit * n.sink;
            n.blade += blade_inc;
            n.primary += int_inc;
            if n.primary > 0.0 {
                n.length = n.length.max(n.shape.length(n.primary));
            }
            allocated += blade_inc + int_inc;
        }

        if ring_pool > 0.0 {
            for (w, n) in weights.iter_mut().zip(&nodes) {
                *w = match cfg.ring_mode {
                    RingMode::Uniform => 1.0,
                    RingMode::Pipe => f64::from(u8::from(cfg.functioning(n.gu_ca, cycle))),
                };
            }
            if cfg.ring_mode == RingMode::Pipe {
                // Functioning blades at or above each internode.
                for j in (0..nodes.len()).rev() {
                    if let Some(p) = nodes[j].parent {
                        weights[p] += weights[j];
                    }
                }
            }
            for (w, n) in weights.iter_mut().zip(&nodes) {
                if n.gu_ca >= cycle {
                    *w = 0.0;
                }
            }
            let mut total_w: f64 = weights.iter().sum();
            if total_w <= 0.0 {
                log::debug!("cycle {cycle}: no functioning blade above any internode, rings spread evenly");
                for (w, n) in weights.iter_mut().zip(&nodes) {
                    *w = f64::from(u8::from(n.gu_ca < cycle));
                }
                total_w = targets as f64;
            }
            for (w, n) in weights.iter().zip(nodes.iter_mut()) {
                if *w > 0.0 {
                    let share = ring_pool * w / total_w;
                    n.ring += share;
                    allocated += share;
                }
            }
        }

        let blade_mass: f64 = nodes.iter().filter(|n| cfg.functioning(n.gu_ca, cycle)).map(|n| n.blade).sum();
        let leaf_surface = blade_mass / dp.slw;
        let q_prod = production(leaf_surface, cfg, hp);
        let total_mass: f64 = nodes.iter().map(|n| n.primary + n.ring + n.blade).sum();
        states.push(CycleState {
            cycle,
            funded,
            organ_demand,
            ring_demand: ring_d,
            demand: total_d,
            allocated,
            ring_pool,
            leaf_surface,
            q_prod,
            total_mass,
            cum_internode_mass: 0.0,
            cum_blade_mass: 0.0,
        });
        q_prev = q_prod;
    }

    let internodes: Vec<InternodeState> = nodes
        .iter()
        .map(|n| InternodeState {
            axis_id: axis_names[n.axis].clone(),
            gu_ca: n.gu_ca,
            rank_in_gu: n.rank,
            pa: n.pa,
            primary_mass: n.primary,
            ring_mass: n.ring,
            blade_mass: n.blade,
            length_cm: n.length,
            diameter_mm: 10.0 * cylinder_diameter(n.primary + n.ring, n.length, cfg.rho),
        })
        .collect();

    let mut per_birth = vec![(0.0, 0.0); cycles as usize];
    for s in &internodes {
        let slot = &mut per_birth[(s.gu_ca - 1) as usize];
        slot.0 += s.primary_mass + s.ring_mass;
        slot.1 += s.blade_mass;
    }
    let (mut ci, mut cb) = (0.0, 0.0);
    for (state, (int_mass, blade_mass)) in states.iter_mut().zip(per_birth) {
        ci += int_mass;
        cb += blade_mass;
        state.cum_internode_mass = ci;
        state.cum_blade_mass = cb;
    }

    Ok(SimulationTrace {
        tree_id: topology.tree_id.clone(),
        cycles: states,
        cohorts: cohorts_of(&internodes),
        internodes,
    })
}

fn cohorts_of(internodes: &[InternodeState]) -> Vec<Cohort> {
    #[derive(Default)]
    struct Sum {
        n: u64,
        blade: f64,
        primary: f64,
        ring: f64,
        length: f64,
        diameter: f64,
    }
    let mut groups: BTreeMap<(PhysioAge, u32), Sum> = BTreeMap::new();
    for s in internodes {
        let g = groups.entry((s.pa, s.gu_ca)).or_default();
        g.n += 1;
        g.blade += s.blade_mass;
        g.primary += s.primary_mass;
        g.ring += s.ring_mass;
        g.length += s.length_cm;
        g.diameter += s.diameter_mm;
    }
    groups
        .into_iter()
        .map(|((pa, birth_cycle), g)| {
            let n = g.n as f64;
            Cohort {
                pa,
                birth_cycle,
                count: g.n,
                blade_mass: g.blade / n,
                internode_primary_mass: g.primary / n,
                internode_ring_mass: g.ring / n,
                internode_mass: (g.primary + g.ring) / n,
                internode_length_cm: g.length / n,
                internode_diameter_mm: g.diameter / n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_topology, AxisRecord, GuRecord};

    fn line(n_gus: u32, internodes: u32) -> TreeTopology {
        let axes = [AxisRecord { tree_id: "t".into(), axis_id: "A".into(), parent_axis_id: None, insertion_ca: 0 }];
        let gus: Vec<_> = (1..=n_gus)
            .map(|ca| GuRecord {
                tree_id: "t".into(),
                axis_id: "A".into(),
                gu_ca: ca,
                internode_count: internodes,
                leaf_scar_count: internodes,
            })
            .collect();
        build_topology(&axes, &gus).unwrap()
    }

    fn dp(p: f64) -> DirectParams {
        DirectParams {
            p_int: BTreeMap::from([(PhysioAge::MAIN, p)]),
            allometry: BTreeMap::from([(PhysioAge::MAIN, Allometry { b: 5.0, beta: 0.4 })]),
            slw: 0.03,
        }
    }

    #[test]
    fn one_step_hand_solve() {
        let hp = HiddenParams { q0: 1.561, rp: 6.0, pc: 0.2 };
        let tr = simulate(&hp, &dp(0.561), &line(1, 1), &SimConfig::default()).unwrap();
        let s = &tr.internodes[0];
        assert!((s.blade_mass - 1.0).abs() < 1e-15);
        assert!((s.primary_mass - 0.561).abs() < 1e-15);
        assert_eq!(s.ring_mass, 0.0);
    }

    #[test]
    fn zero_seed_gives_zero_trace() {
        let hp = HiddenParams { q0: 0.0, rp: 6.0, pc: 0.2 };
        let tr = simulate(&hp, &dp(0.5), &line(3, 2), &SimConfig::default()).unwrap();
        assert!(tr.cycles.iter().all(|c| c.q_prod == 0.0 && c.total_mass == 0.0));
        assert!(tr.internodes.iter().all(|s| s.diameter_mm == 0.0 && s.length_cm == 0.0));
    }

    #[test]
    fn three_cycle_recursion_by_hand() {
        // One internode per GU, p = 0.5, pc = 0.25, slw = 0.03, sp = 120000.
        let (p, pc, slw, rp, sp) = (0.5, 0.25, 0.03, 4.0, 120_000.0);
        let q = |s: f64| (sp / rp) * (1.0 - (-s / sp).exp());
        let hp = HiddenParams { q0: 3.0, rp, pc };
        let tr = simulate(&hp, &dp(p), &line(3, 1), &SimConfig::default()).unwrap();

        // Cycle 1: D = 1.5, no ring target yet.
        let b1 = 3.0 / 1.5;
        let q1 = q(b1 / slw);
        // Cycle 2: one new blade + internode, one functioning blade, one old internode.
        let d2 = 1.0 + p + pc;
        let b2 = q1 / d2;
        let ring2 = q1 * pc / d2;
        let q2 = q(b2 / slw);
        // Cycle 3: two old internodes share the ring.
        let d3 = 1.0 + p + pc;
        let b3 = q2 / d3;
        let ring3 = q2 * pc / d3;

        let s = &tr.internodes;
        assert!((s[0].blade_mass - b1).abs() < 1e-12 * b1);
        assert!((tr.cycles[0].q_prod - q1).abs() < 1e-12 * q1);
        assert!((s[1].blade_mass - b2).abs() < 1e-12 * b2);
        assert!((s[2].blade_mass - b3).abs() < 1e-12 * b3);
        let r0 = ring2 + ring3 / 2.0;
        assert!((s[0].ring_mass - r0).abs() < 1e-12 * r0);
        assert!((s[1].ring_mass - ring3 / 2.0).abs() < 1e-12 * ring3);
        assert_eq!(s[2].ring_mass, 0.0);
    }

    #[test]
    fn pipe_rings_follow_distal_blades() {
        // Three GUs of one internode; at cycle 3 only the newest blade
        // functions, and it sits above both older internodes.
        let hp = HiddenParams { q0: 3.0, rp: 4.0, pc: 0.25 };
        let cfg = SimConfig { ring_mode: RingMode::Pipe, ..SimConfig::default() };
        let uni = simulate(&hp, &dp(0.5), &line(3, 1), &SimConfig::default()).unwrap();
        let pipe = simulate(&hp, &dp(0.5), &line(3, 1), &cfg).unwrap();
        for (a, b) in uni.internodes.iter().zip(&pipe.internodes) {
            assert!((a.ring_mass - b.ring_mass).abs() < 1e-12);
        }
    }

    #[test]
    fn pipe_skips_stopped_branches() {
        let axes = [
            AxisRecord { tree_id: "t".into(), axis_id: "A".into(), parent_axis_id: None, insertion_ca: 0 },
            AxisRecord { tree_id: "t".into(), axis_id: "B".into(), parent_axis_id: Some("A".into()), insertion_ca: 1 },
        ];
        let gu = |a: &str, ca| GuRecord {
            tree_id: "t".into(),
            axis_id: a.into(),
            gu_ca: ca,
            internode_count: 1,
            leaf_scar_count: 1,
        };
        let t = build_topology(&axes, &[gu("A", 1), gu("A", 2), gu("A", 3), gu("B", 2)]).unwrap();
        let pa = BTreeMap::from([("A".to_string(), PhysioAge::MAIN), ("B".to_string(), PhysioAge::MAIN)]);
        let t = t.with_pa(&pa).unwrap();
        let hp = HiddenParams { q0: 3.0, rp: 4.0, pc: 0.25 };
        let cfg = SimConfig { ring_mode: RingMode::Pipe, ..SimConfig::default() };
        let tr = simulate(&hp, &dp(0.5), &t, &cfg).unwrap();
        // B stopped after cycle 2: at cycle 3 its only internode carries no
        // functioning blade, so it gains no ring.
        let b = tr.internodes.iter().find(|s| s.axis_id == "B").unwrap();
        assert_eq!(b.ring_mass, 0.0);
    }
}
