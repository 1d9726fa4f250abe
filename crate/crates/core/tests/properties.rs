mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fspm_core::engine::{self, BranchingRules, PaRule, SimConfig};
use fspm_core::ingest::{self, Dataset, InternodeRecord, LeafRecord};
use fspm_core::pa_classify::{cluster_1d, sum_sq_dev, TIE_TOLERANCE};
use fspm_core::synthetic;
use fspm_core::HiddenParams;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// WCSS of the partition an exhaustive search selects: every split of the
/// sorted values into `k` runs not separating equal values, in lexicographic
/// order of cut positions; the first one within the tie tolerance of the
/// minimum wins.
fn brute_wcss(v: &[f64], k: usize) -> f64 {
    fn splits(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k - 1 {
            out.push(cur.clone());
            return;
        }
        for c in start..n {
            cur.push(c);
            splits(n, k, c + 1, cur, out);
            cur.pop();
        }
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut all = Vec::new();
    splits(s.len(), k, 1, &mut Vec::new(), &mut all);
    let scored: Vec<f64> = all
        .iter()
        .filter(|cuts| cuts.iter().all(|&c| s[c - 1] < s[c]))
        .map(|cuts| {
            let b: Vec<usize> = std::iter::once(0).chain(cuts.iter().copied()).chain([s.len()]).collect();
            b.windows(2).map(|w| sum_sq_dev(&s[w[0]..w[1]])).sum()
        })
        .collect();
    let min = scored.iter().copied().fold(f64::INFINITY, f64::min);
    let tie = TIE_TOLERANCE * sum_sq_dev(&s);
    *scored.iter().find(|&&w| w <= min + tie).unwrap()
}

fn distinct(v: &[f64]) -> usize {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clustering_matches_enumeration(v in prop::collection::vec(0u32..40, 1..12), k in 1usize..4) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assume!(k <= distinct(&v));
        let c = cluster_1d(&v, k).unwrap();
        prop_assert_eq!(c.wcss, brute_wcss(&v, k));
    }

    #[test]
    fn clustering_is_scale_invariant(v in prop::collection::vec(0.01f64..100.0, 2..30), k in 1usize..5, scale in 0.001f64..1000.0) {
        prop_assume!(k <= distinct(&v));
        let a = cluster_1d(&v, k).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let b = cluster_1d(&scaled, k).unwrap();
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn wcss_nonincreasing_in_k(v in prop::collection::vec(0.0f64..10.0, 2..25)) {
        let mut prev = f64::INFINITY;
        for k in 1..=distinct(&v).min(6) {
            let w = cluster_1d(&v, k).unwrap().wcss;
            prop_assert!(w <= prev * (1.0 + 1e-12) + 1e-12);
            prev = w;
        }
    }

    #[test]
    fn allocation_conserves_biomass(seed in any::<u64>(), q0 in 0.1f64..50.0, rp in 0.5f64..20.0, pc in 0.0f64..1.0, pipe in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = synthetic::random_topology(&mut rng, "p", 7, 5, 25);
        let dp = synthetic::random_direct_params(&mut rng, 5);
        let cfg = SimConfig { ring_mode: if pipe { engine::RingMode::Pipe } else { engine::RingMode::Uniform }, ..SimConfig::default() };
        let trace = engine::simulate(&HiddenParams { q0, rp, pc }, &dp, &t, &cfg).unwrap();
        let mut expected = 0.0;
        for c in &trace.cycles {
            prop_assert!(rel(c.allocated, c.funded) < 1e-9, "cycle {}: {} vs {}", c.cycle, c.allocated, c.funded);
            expected += c.funded;
            prop_assert!(rel(c.total_mass, expected) < 1e-9);
        }
        let produced: f64 = trace.cycles[..trace.cycles.len() - 1].iter().map(|c| c.q_prod).sum();
        prop_assert!(rel(trace.final_mass(), q0 + produced) < 1e-9);
    }

    #[test]
    fn factored_matches_explicit(
        rules in prop::collection::vec((1u32..4, 0u32..3), 1..4),
        age in 1u32..9,
        q0 in 0.5f64..20.0,
    ) {
        let rules = BranchingRules {
            pa: rules.into_iter().map(|(n, b)| PaRule { internodes_per_gu: n, branches_per_gu: b }).collect(),
        };
        prop_assume!(engine::substructure_organ_count(&rules, age).unwrap() < 40_000);
        let dp = synthetic::reference_direct_params();
        let hp = HiddenParams { q0, rp: synthetic::REFERENCE_RP, pc: synthetic::REFERENCE_PC };
        let cfg = SimConfig::default();
        let f = engine::simulate_factored(&hp, &dp, &rules, age, &cfg).unwrap();
        let t = engine::expand_rules(&rules, age).unwrap();
        let e = engine::simulate(&hp, &dp, &t, &cfg).unwrap();
        prop_assert_eq!(f.cycles.len(), e.cycles.len());
        for (a, b) in f.cycles.iter().zip(&e.cycles) {
            for (x, y) in [(a.funded, b.funded), (a.q_prod, b.q_prod), (a.total_mass, b.total_mass), (a.leaf_surface, b.leaf_surface),
                           (a.cum_internode_mass, b.cum_internode_mass), (a.cum_blade_mass, b.cum_blade_mass)] {
                prop_assert!(rel(x, y) < 1e-9, "cycle {}: {} vs {}", a.cycle, x, y);
            }
        }
        let live: Vec<_> = f.cohorts.iter().filter(|c| c.count > 0).collect();
        prop_assert_eq!(live.len(), e.cohorts.len());
        for c in live {
            let d = e.cohort(c.pa, c.birth_cycle).unwrap();
            prop_assert_eq!(c.count, d.count);
            for (x, y) in [(c.blade_mass, d.blade_mass), (c.internode_mass, d.internode_mass),
                           (c.internode_length_cm, d.internode_length_cm), (c.internode_diameter_mm, d.internode_diameter_mm)] {
                prop_assert!(rel(x, y) < 1e-9);
            }
        }
        prop_assert_eq!(u128::from(e.organ_count()), engine::substructure_organ_count(&rules, age).unwrap());
    }

    #[test]
    fn csv_round_trip(
        rows in prop::collection::vec((1u32..20, 1u32..30, 0.001f64..1e4, 0.01f64..500.0, 0.01f64..90.0), 0..40),
    ) {
        let recs: Vec<InternodeRecord> = rows.iter().enumerate().map(|(i, &(ca, rank, w, l, d))| InternodeRecord {
            tree_id: "t".into(), axis_id: format!("a{i}"), gu_ca: ca, rank_in_gu: rank,
            fresh_weight_g: w, length_cm: l, diameter_mm: d,
        }).collect();
        let mut buf = Vec::new();
        ingest::write_internodes(&mut buf, &recs).unwrap();
        prop_assert_eq!(ingest::parse_internodes(buf.as_slice(), "mem").unwrap(), recs);

        let leaves: Vec<LeafRecord> = rows.iter().enumerate().map(|(i, &(ca, rank, w, l, _))| LeafRecord {
            tree_id: "t".into(), axis_id: format!("a{i}"), gu_ca: ca, sample_index: (rank % 3 + 1) as u8,
            fresh_weight_g: w, area_cm2: l,
        }).collect();
        let mut buf = Vec::new();
        ingest::write_leaves(&mut buf, &leaves).unwrap();
        prop_assert_eq!(ingest::parse_leaves(buf.as_slice(), "mem").unwrap(), leaves);
    }
}

fn fixture_dataset() -> Dataset {
    Dataset::from_measurements(common::fixture_campaign()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn targets_invariant_under_record_order(seed in any::<u64>()) {
        let data = fixture_dataset();
        let pa = synthetic::reference_pa_map();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &data.trees {
            let mut ints: Vec<_> = data.internodes_of(&t.tree_id).cloned().collect();
            let mut leaves: Vec<_> = data.leaves_of(&t.tree_id).cloned().collect();
            let a = ingest::build_target_series(&ints, &leaves, t, &pa[&t.tree_id]).unwrap();
            ints.shuffle(&mut rng);
            leaves.shuffle(&mut rng);
            let b = ingest::build_target_series(&ints, &leaves, t, &pa[&t.tree_id]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn class_means_preserve_total_weight() {
    let data = fixture_dataset();
    let pa = synthetic::reference_pa_map();
    for t in &data.trees {
        let ints: Vec<_> = data.internodes_of(&t.tree_id).cloned().collect();
        let leaves: Vec<_> = data.leaves_of(&t.tree_id).cloned().collect();
        let ts = ingest::build_target_series(&ints, &leaves, t, &pa[&t.tree_id]).unwrap();
        let from_means: f64 = ts.entries.iter().map(|e| e.mean_internode_weight * f64::from(e.n_internodes)).sum();
        let raw: f64 = ints.iter().map(|r| r.fresh_weight_g).sum();
        assert!(rel(from_means, raw) < 1e-9);
    }
}

#[test]
fn organ_census_matches_trace() {
    for t in synthetic::reference_trees() {
        let census: u64 = (1..=t.age)
            .map(|c| fspm_core::topology::organ_census(&t, c).unwrap().values().sum::<u64>())
            .sum();
        let trace = engine::simulate(&synthetic::reference_hidden(0), &synthetic::reference_direct_params(), &t, &SimConfig::default()).unwrap();
        assert_eq!(census, trace.organ_count());
        assert_eq!(census, 2 * t.total_internodes());
    }
}
