//! Fixture CSVs and the golden files derived from them.
//!
//! Set `FSPM_REGEN_GOLDEN=1` and run with `--test-threads=1` to rewrite both
//! after an intentional change.

mod common;

use std::fs;

use fspm_core::ingest::{self, canonical_json, Dataset};
use fspm_core::pa_classify;
use fspm_core::synthetic;

use common::*;

fn check_or_write(name: &str, content: &[u8]) {
    let path = fixture(name);
    if regenerate() {
        fs::write(&path, content).unwrap();
        return;
    }
    let golden = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(golden == content, "{name} differs from the committed file");
}

#[test]
fn fixture_csvs_match_generator() {
    let m = fixture_campaign();
    let mut buf = Vec::new();
    ingest::write_axes(&mut buf, &m.axes).unwrap();
    check_or_write("axes.csv", &buf);
    buf.clear();
    ingest::write_gus(&mut buf, &m.gus).unwrap();
    check_or_write("gus.csv", &buf);
    buf.clear();
    ingest::write_internodes(&mut buf, &m.internodes).unwrap();
    check_or_write("internodes.csv", &buf);
    buf.clear();
    ingest::write_leaves(&mut buf, &m.leaves).unwrap();
    check_or_write("leaves.csv", &buf);
}

fn dataset() -> Dataset {
    let m = ingest::parse_measurements(&fixture_paths()).unwrap();
    Dataset::from_measurements(m).unwrap()
}

#[test]
fn tree_json_golden() {
    if regenerate() {
        fixture_csvs_match_generator();
    }
    check_or_write("tree.json", canonical_json(&dataset()).as_bytes());
}

#[test]
fn targets_golden() {
    if regenerate() {
        fixture_csvs_match_generator();
    }
    let data = dataset();
    let pa = synthetic::reference_pa_map();
    let targets: Vec<_> = data
        .trees
        .iter()
        .map(|t| {
            let ints: Vec<_> = data.internodes_of(&t.tree_id).cloned().collect();
            let leaves: Vec<_> = data.leaves_of(&t.tree_id).cloned().collect();
            ingest::build_target_series(&ints, &leaves, t, &pa[&t.tree_id]).unwrap()
        })
        .collect();
    check_or_write("targets.json", canonical_json(&targets).as_bytes());
    check_or_write("pa_map.json", canonical_json(&pa).as_bytes());
}

#[test]
fn classification_recovers_generating_ages() {
    let c = pa_classify::classify_dataset(&dataset(), 5, true).unwrap();
    assert_eq!(c.pa, synthetic::reference_pa_map());
}
