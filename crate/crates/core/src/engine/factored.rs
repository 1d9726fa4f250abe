//! Cohort-count simulation of a generative branching rule.
//!
//! All organs of one (PA, birth cycle) cohort receive identical primary
//! allocations, and with uniform rings identical ring increments, so a tree
//! whose axes repeat the same substructures is fully described by how many
//! organs each cohort holds. Those counts follow a linear recurrence; the
//! simulation never touches individual organs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    cylinder_diameter, production, ring_demand, shape_of, sink_of, Cohort, CycleState, EngineError, HiddenParams,
    Result, RingMode, SimConfig, SimulationTrace,
};
use crate::direct_estim::DirectParams;
use crate::topology::{Axis, GrowthUnit, PhysioAge, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaRule {
    pub internodes_per_gu: u32,
    /// Lateral axes of the next PA borne by every GU. Ignored for the last PA.
    pub branches_per_gu: u32,
}

/// One rule per PA, PA 1 first. The main stem grows one GU per cycle; every
/// GU of PA `p` bears `branches_per_gu` axes of PA `p + 1` that start the
/// next cycle and also grow one GU per cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchingRules {
    pub pa: Vec<PaRule>,
}

impl BranchingRules {
    pub fn uniform(p_max: usize, internodes_per_gu: u32, branches_per_gu: u32) -> Self {
        Self { pa: vec![PaRule { internodes_per_gu, branches_per_gu }; p_max] }
    }

    pub fn p_max(&self) -> usize {
        self.pa.len()
    }

    fn validate(&self) -> Result<()> {
        if self.pa.is_empty() {
            return Err(EngineError::InvalidRules("no PA rules".into()));
        }
        if self.pa.len() > usize::from(u8::MAX) {
            return Err(EngineError::InvalidRules("too many PA classes".into()));
        }
        if let Some(i) = self.pa.iter().position(|r| r.internodes_per_gu == 0) {
            return Err(EngineError::InvalidRules(format!("PA{} has no internodes per GU", i + 1)));
        }
        Ok(())
    }

    fn branches(&self, p: usize) -> u64 {
        if p + 1 < self.pa.len() {
            u64::from(self.pa[p].branches_per_gu)
        } else {
            0
        }
    }
}

/// GUs born per PA and cycle: `counts[p][c - 1]` for PA `p + 1`.
///
/// `G(1, c) = 1` and `G(p + 1, c) = b(p) · Σ_{c' < c} G(p, c')`.
pub fn gu_counts(rules: &BranchingRules, age: u32) -> Result<Vec<Vec<u64>>> {
    rules.validate()?;
    let n = age as usize;
    let mut counts = vec![vec![0u64; n]; rules.p_max()];
    counts[0].fill(1);
    for p in 1..rules.p_max() {
        let b = rules.branches(p - 1);
        let mut prefix = 0u64;
        for c in 0..n {
            let overflow = || EngineError::CountOverflow { pa: PhysioAge::from_index(p), cycle: c as u32 + 1 };
            counts[p][c] = b.checked_mul(prefix).ok_or_else(overflow)?;
            prefix = prefix.checked_add(counts[p - 1][c]).ok_or_else(overflow)?;
        }
    }
    Ok(counts)
}

/// Organs (internodes plus blades) in a whole tree, by memoized recursion
/// over substructures: an axis of PA `p` that grows `r` more GUs.
pub fn substructure_organ_count(rules: &BranchingRules, age: u32) -> Result<u128> {
    fn organs(rules: &BranchingRules, p: usize, r: u32, memo: &mut HashMap<(usize, u32), u128>) -> u128 {
        if r == 0 {
            return 0;
        }
        if let Some(&v) = memo.get(&(p, r)) {
            return v;
        }
        let own = 2 * u128::from(rules.pa[p].internodes_per_gu) * u128::from(r);
        let b = u128::from(rules.branches(p));
        let lateral = if b == 0 { 0 } else { (1..r).map(|g| b * organs(rules, p + 1, r - g, memo)).sum() };
        let total = own + lateral;
        memo.insert((p, r), total);
        total
    }
    rules.validate()?;
    Ok(organs(rules, 0, age, &mut HashMap::new()))
}

/// Simulates a rule-generated tree by cohort counts. Only the uniform ring
/// distribution is supported: pipe shares depend on individual positions.
pub fn simulate_factored(
    hp: &HiddenParams,
    dp: &DirectParams,
    rules: &BranchingRules,
    age: u32,
    cfg: &SimConfig,
) -> Result<SimulationTrace> {
    if cfg.ring_mode != RingMode::Uniform {
        return Err(EngineError::UnsupportedRingMode);
    }
    hp.validate()?;
    cfg.validate()?;
    if age == 0 {
        return Err(EngineError::CyclesOutOfRange { requested: 0, age });
    }
    let counts = gu_counts(rules, age)?;
    let p_max = rules.p_max();
    let n = age as usize;

    let mut sinks = Vec::with_capacity(p_max);
    let mut shapes = Vec::with_capacity(p_max);
    for p in 0..p_max {
        let pa = PhysioAge::from_index(p);
        sinks.push(sink_of(dp, pa)?);
        shapes.push(shape_of(dp, pa)?);
    }
    // Internodes (= blades) per cohort, and per birth cycle.
    let organs: Vec<Vec<f64>> = (0..p_max)
        .map(|p| counts[p].iter().map(|&g| (g * u64::from(rules.pa[p].internodes_per_gu)) as f64).collect())
        .collect();
    let per_birth: Vec<f64> = (0..n).map(|c| (0..p_max).map(|p| organs[p][c]).sum()).collect();

    let mut blade = vec![vec![0.0; n]; p_max];
    let mut primary = vec![vec![0.0; n]; p_max];
    let mut length = vec![vec![0.0; n]; p_max];
    // Ring increment received by each older internode at each cycle.
    let mut ring_unit = vec![0.0; n];
    let mut states = Vec::with_capacity(n);
    let mut q_prev = hp.q0;
    let mut total_mass = 0.0;

    for cycle in 1..=age {
        let funded = q_prev;
        let mut organ_demand = 0.0;
        let mut functioning = 0.0;
        let mut targets = 0.0;
        for c in 1..=age {
            let ci = (c - 1) as usize;
            if cfg.expanding(c, cycle) {
                organ_demand += (0..p_max).map(|p| organs[p][ci] * (1.0 + sinks[p])).sum::<f64>();
            }
            if cfg.functioning(c, cycle) {
                functioning += per_birth[ci];
            }
            if c < cycle {
                targets += per_birth[ci];
            }
        }
        let ring_d = ring_demand(functioning, targets > 0.0, hp, cfg);
        let total_d = organ_demand + ring_d;
        if total_d <= 0.0 && funded > 0.0 {
            return Err(EngineError::ZeroDemandWithBiomass { cycle, biomass: funded });
        }
        let unit = if funded > 0.0 { funded / total_d } else { 0.0 };
        let ring_pool = unit * ring_d;

        let mut allocated = 0.0;
        for c in 1..=cycle {
            if !cfg.expanding(c, cycle) {
                continue;
            }
            let ci = (c - 1) as usize;
            for p in 0..p_max {
                if organs[p][ci] == 0.0 {
                    continue;
                }
                blade[p][ci] += unit;
                primary[p][ci] += unit * sinks[p];
                if primary[p][ci] > 0.0 {
                    length[p][ci] = f64::max(length[p][ci], shapes[p].length(primary[p][ci]));
                }
                allocated += organs[p][ci] * (unit + unit * sinks[p]);
            }
        }
        if ring_pool > 0.0 {
            ring_unit[(cycle - 1) as usize] = ring_pool / targets;
            allocated += ring_pool;
        }
        total_mass += allocated;

        let blade_mass: f64 = (1..=cycle)
            .filter(|&c| cfg.functioning(c, cycle))
            .map(|c| (0..p_max).map(|p| organs[p][(c - 1) as usize] * blade[p][(c - 1) as usize]).sum::<f64>())
            .sum();
        let leaf_surface = blade_mass / dp.slw;
        let q_prod = production(leaf_surface, cfg, hp);
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

    // Ring mass of an internode born at c: increments of every later cycle.
    let mut ring_of_birth = vec![0.0; n];
    let mut acc = 0.0;
    for c in (0..n).rev() {
        ring_of_birth[c] = acc;
        acc += ring_unit[c];
    }

    let mut cohorts = Vec::new();
    let (mut ci_mass, mut cb_mass) = (0.0, 0.0);
    for c in 0..n {
        for p in 0..p_max {
            if organs[p][c] == 0.0 {
                continue;
            }
            let total = primary[p][c] + ring_of_birth[c];
            cohorts.push(Cohort {
                pa: PhysioAge::from_index(p),
                birth_cycle: c as u32 + 1,
                count: counts[p][c] * u64::from(rules.pa[p].internodes_per_gu),
                blade_mass: blade[p][c],
                internode_primary_mass: primary[p][c],
                internode_ring_mass: ring_of_birth[c],
                internode_mass: total,
                internode_length_cm: length[p][c],
                internode_diameter_mm: 10.0 * cylinder_diameter(total, length[p][c], cfg.rho),
            });
            ci_mass += organs[p][c] * total;
            cb_mass += organs[p][c] * blade[p][c];
        }
        states[c].cum_internode_mass = ci_mass;
        states[c].cum_blade_mass = cb_mass;
    }
    cohorts.sort_by_key(|c| (c.pa, c.birth_cycle));

    Ok(SimulationTrace { tree_id: "generated".into(), cycles: states, cohorts, internodes: Vec::new() })
}

/// Expands a branching rule into the explicit topology it describes, with
/// physiological ages assigned. Branch ids extend the bearer's id with the
/// bearing GU's cycle and the branch index.
pub fn expand_rules(rules: &BranchingRules, age: u32) -> Result<TreeTopology> {
    rules.validate()?;
    if age == 0 {
        return Err(EngineError::CyclesOutOfRange { requested: 0, age });
    }
    let mut axes = BTreeMap::new();
    let mut stack = vec![("a".to_string(), None::<String>, 0u32, 0usize)];
    while let Some((id, parent, insertion_ca, p)) = stack.pop() {
        let rule = rules.pa[p];
        let mut gus = Vec::new();
        for ca in insertion_ca + 1..=age {
            let mut borne: Vec<String> = (0..rules.branches(p)).map(|k| format!("{id}.{ca:02}.{k}")).collect();
            borne.sort();
            for child in &borne {
                if ca < age {
                    stack.push((child.clone(), Some(id.clone()), ca, p + 1));
                }
            }
            gus.push(GrowthUnit {
                ca,
                internode_count: rule.internodes_per_gu,
                leaf_scar_count: rule.internodes_per_gu,
                borne_axis_ids: if ca < age { borne } else { Vec::new() },
            });
        }
        let axis = Axis { id: id.clone(), parent_id: parent, insertion_ca, pa: Some(PhysioAge::from_index(p)), gus };
        axes.insert(id, axis);
    }
    Ok(TreeTopology { tree_id: "generated".into(), age, axes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_by_hand() {
        // b = 2, three PAs: G2(c) = 2(c-1), G3(c) = 2 Σ_{c'<c} 2(c'-1).
        let counts = gu_counts(&BranchingRules::uniform(3, 1, 2), 4).unwrap();
        assert_eq!(counts[0], [1, 1, 1, 1]);
        assert_eq!(counts[1], [0, 2, 4, 6]);
        assert_eq!(counts[2], [0, 0, 4, 12]);
    }

    #[test]
    fn memo_count_agrees_with_recurrence() {
        let rules = BranchingRules {
            pa: vec![
                PaRule { internodes_per_gu: 4, branches_per_gu: 3 },
                PaRule { internodes_per_gu: 2, branches_per_gu: 1 },
                PaRule { internodes_per_gu: 1, branches_per_gu: 5 },
            ],
        };
        for age in 1..12 {
            let counts = gu_counts(&rules, age).unwrap();
            let direct: u128 = counts
                .iter()
                .zip(&rules.pa)
                .map(|(row, r)| 2 * u128::from(r.internodes_per_gu) * row.iter().map(|&g| u128::from(g)).sum::<u128>())
                .sum();
            assert_eq!(substructure_organ_count(&rules, age).unwrap(), direct);
        }
    }

    #[test]
    fn expansion_is_a_valid_topology() {
        let t = expand_rules(&BranchingRules::uniform(3, 2, 2), 4).unwrap();
        // 6 PA2 axes from main GUs 1..3, 12 PA3 axes from the 2 + 4 PA2 GUs of cycles 2..3.
        assert_eq!(t.axes.len(), 1 + 6 + 12);
        let records: Vec<_> = t
            .axes
            .values()
            .map(|a| crate::topology::AxisRecord {
                tree_id: t.tree_id.clone(),
                axis_id: a.id.clone(),
                parent_axis_id: a.parent_id.clone(),
                insertion_ca: a.insertion_ca,
            })
            .collect();
        let gus: Vec<_> = t
            .axes
            .values()
            .flat_map(|a| {
                a.gus.iter().map(|g| crate::topology::GuRecord {
                    tree_id: t.tree_id.clone(),
                    axis_id: a.id.clone(),
                    gu_ca: g.ca,
                    internode_count: g.internode_count,
                    leaf_scar_count: g.leaf_scar_count,
                })
            })
            .collect();
        let rebuilt = crate::topology::build_topology(&records, &gus).unwrap();
        let rebuilt = rebuilt.with_pa(&t.pa_map().unwrap()).unwrap();
        assert_eq!(rebuilt, t);
    }

    #[test]
    fn pipe_mode_rejected() {
        let cfg = SimConfig { ring_mode: RingMode::Pipe, ..SimConfig::default() };
        let dp = crate::synthetic::reference_direct_params();
        let hp = HiddenParams { q0: 1.0, rp: 1.0, pc: 0.1 };
        assert_eq!(
            simulate_factored(&hp, &dp, &BranchingRules::uniform(2, 1, 1), 3, &cfg),
            Err(EngineError::UnsupportedRingMode)
        );
    }
}
