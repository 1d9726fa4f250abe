//! Measurement files and fitting targets.
//!
//! Four comma-separated files with a mandatory header row describe a set of
//! trees: `axes.csv`, `gus.csv`, `internodes.csv` and `leaves.csv`. Column
//! order is free; every declared column must be present. Masses are fresh
//! weights in grams, lengths in cm, diameters in mm and areas in cm².

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::topology::{self, AxisRecord, GuRecord, PhysioAge, TopologyError, TreeTopology};

pub const AXES_COLUMNS: [&str; 4] = ["tree_id", "axis_id", "parent_axis_id", "insertion_ca"];
pub const GUS_COLUMNS: [&str; 5] = ["tree_id", "axis_id", "gu_ca", "internode_count", "leaf_scar_count"];
pub const INTERNODE_COLUMNS: [&str; 7] =
    ["tree_id", "axis_id", "gu_ca", "rank_in_gu", "fresh_weight_g", "length_cm", "diameter_mm"];
pub const LEAF_COLUMNS: [&str; 6] = ["tree_id", "axis_id", "gu_ca", "sample_index", "fresh_weight_g", "area_cm2"];

/// Leaves sampled per growth unit.
pub const LEAF_SAMPLES_PER_GU: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {message}")]
    Csv { file: String, line: u64, message: String },
    #[error("{file}: missing column `{column}`")]
    SchemaError { file: String, column: String },
    #[error("{file}:{line}: column `{column}` must be a positive measurement, got `{value}`")]
    UnitError { file: String, line: u64, column: String, value: String },
    #[error("{file}:{line}: column `{column}` has invalid value `{value}`")]
    Malformed { file: String, line: u64, column: String, value: String },
    #[error("{file}:{line}: duplicate key {key}")]
    DuplicateKey { file: String, line: u64, key: String },
    #[error("{kind} record ({tree}, {axis}, ca {ca}) does not match any growth unit")]
    OrphanRecord { kind: &'static str, tree: String, axis: String, ca: u32 },
    #[error("internode record ({tree}, {axis}, ca {ca}) has rank {rank} outside 1..={count}")]
    RankOutOfRange { tree: String, axis: String, ca: u32, rank: u32, count: u32 },
    #[error("axis `{0}` has no physiological age assignment")]
    MissingPA(String),
    #[error("no internode measurement for growth unit ({axis}, ca {ca}) or its (PA, CA) class")]
    MissingInternodeData { axis: String, ca: u32 },
    #[error("tree `{0}` has no leaf samples")]
    NoLeafData(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternodeRecord {
    pub tree_id: String,
    pub axis_id: String,
    pub gu_ca: u32,
    /// 1-based position within the GU, counted from its base.
    pub rank_in_gu: u32,
    pub fresh_weight_g: f64,
    pub length_cm: f64,
    pub diameter_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub tree_id: String,
    pub axis_id: String,
    pub gu_ca: u32,
    pub sample_index: u8,
    pub fresh_weight_g: f64,
    pub area_cm2: f64,
}

/// Raw typed rows of the four measurement files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub axes: Vec<AxisRecord>,
    pub gus: Vec<GuRecord>,
    pub internodes: Vec<InternodeRecord>,
    pub leaves: Vec<LeafRecord>,
}

#[derive(Debug, Clone)]
pub struct MeasurementPaths {
    pub axes: PathBuf,
    pub gus: PathBuf,
    pub internodes: PathBuf,
    pub leaves: PathBuf,
}

/// Validated trees with their organ measurements, in canonical order.
/// This is the content of `tree.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trees: Vec<TreeTopology>,
    pub internodes: Vec<InternodeRecord>,
    pub leaves: Vec<LeafRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub pa: PhysioAge,
    pub ca: u32,
    pub mean_internode_weight: f64,
    pub mean_internode_length: f64,
    pub mean_internode_diameter: f64,
    pub mean_blade_weight: f64,
    pub mean_blade_area: f64,
    pub n_internodes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulatedPoint {
    pub cycle: u32,
    pub cum_internode_mass: f64,
    pub cum_blade_mass: f64,
}

/// Per-(PA, CA) averaged organ observations of one tree plus the
/// cumulated-mass profile over GU cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub tree_id: String,
    pub entries: Vec<TargetEntry>,
    pub cumulated: Vec<CumulatedPoint>,
}

impl TargetSeries {
    pub fn entry(&self, pa: PhysioAge, ca: u32) -> Option<&TargetEntry> {
        self.entries.iter().find(|e| e.pa == pa && e.ca == ca)
    }

    pub fn observation_count(&self) -> usize {
        2 * self.entries.len() + 2 * self.cumulated.len()
    }
}

/// Pretty JSON with a trailing newline, the on-disk form of `tree.json`,
/// target files and the other structured artifacts.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

struct Table {
    file: String,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read<R: Read>(reader: R, file: &str, columns: &[&str]) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let csv_err = |e: csv::Error| IngestError::Csv {
            file: file.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        };
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let index: Vec<usize> = columns
            .iter()
            .map(|c| {
                headers.iter().position(|h| h == *c).ok_or_else(|| IngestError::SchemaError {
                    file: file.to_string(),
                    column: (*c).to_string(),
                })
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let fields = index.iter().map(|&i| record.get(i).unwrap_or("").to_string()).collect();
            rows.push((line, fields));
        }
        Ok(Table { file: file.to_string(), rows })
    }

    fn malformed(&self, line: u64, column: &str, value: &str) -> IngestError {
        IngestError::Malformed {
            file: self.file.clone(),
            line,
            column: column.to_string(),
            value: value.to_string(),
        }
    }

    fn int<T: std::str::FromStr>(&self, line: u64, column: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| self.malformed(line, column, value))
    }

    fn id(&self, line: u64, column: &str, value: &str) -> Result<String> {
        if value.is_empty() {
            return Err(self.malformed(line, column, value));
        }
        Ok(value.to_string())
    }

    fn measurement(&self, line: u64, column: &str, value: &str) -> Result<f64> {
        let x: f64 = value.parse().map_err(|_| self.malformed(line, column, value))?;
        if !x.is_finite() || x <= 0.0 {
            return Err(IngestError::UnitError {
                file: self.file.clone(),
                line,
                column: column.to_string(),
                value: value.to_string(),
            });
        }
        Ok(x)
    }

    fn check_unique(&self, seen: &mut BTreeSet<Vec<String>>, line: u64, key: Vec<String>) -> Result<()> {
        let label = key.join("/");
        if !seen.insert(key) {
            return Err(IngestError::DuplicateKey { file: self.file.clone(), line, key: label });
        }
        Ok(())
    }
}

pub fn parse_axes<R: Read>(reader: R, file: &str) -> Result<Vec<AxisRecord>> {
    let t = Table::read(reader, file, &AXES_COLUMNS)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let line = *line;
        let rec = AxisRecord {
            tree_id: t.id(line, "tree_id", &f[0])?,
            axis_id: t.id(line, "axis_id", &f[1])?,
            parent_axis_id: Some(f[2].clone()).filter(|p| !p.is_empty()),
            insertion_ca: t.int(line, "insertion_ca", &f[3])?,
        };
        t.check_unique(&mut seen, line, vec![rec.tree_id.clone(), rec.axis_id.clone()])?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_gus<R: Read>(reader: R, file: &str) -> Result<Vec<GuRecord>> {
    let t = Table::read(reader, file, &GUS_COLUMNS)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let line = *line;
        let rec = GuRecord {
            tree_id: t.id(line, "tree_id", &f[0])?,
            axis_id: t.id(line, "axis_id", &f[1])?,
            gu_ca: t.int(line, "gu_ca", &f[2])?,
            internode_count: t.int(line, "internode_count", &f[3])?,
            leaf_scar_count: t.int(line, "leaf_scar_count", &f[4])?,
        };
        if rec.gu_ca == 0 {
            return Err(t.malformed(line, "gu_ca", &f[2]));
        }
        if rec.internode_count == 0 {
            return Err(t.malformed(line, "internode_count", &f[3]));
        }
        t.check_unique(&mut seen, line, vec![rec.tree_id.clone(), rec.axis_id.clone(), f[2].clone()])?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_internodes<R: Read>(reader: R, file: &str) -> Result<Vec<InternodeRecord>> {
    let t = Table::read(reader, file, &INTERNODE_COLUMNS)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let line = *line;
        let rec = InternodeRecord {
            tree_id: t.id(line, "tree_id", &f[0])?,
            axis_id: t.id(line, "axis_id", &f[1])?,
            gu_ca: t.int(line, "gu_ca", &f[2])?,
            rank_in_gu: t.int(line, "rank_in_gu", &f[3])?,
            fresh_weight_g: t.measurement(line, "fresh_weight_g", &f[4])?,
            length_cm: t.measurement(line, "length_cm", &f[5])?,
            diameter_mm: t.measurement(line, "diameter_mm", &f[6])?,
        };
        if rec.gu_ca == 0 {
            return Err(t.malformed(line, "gu_ca", &f[2]));
        }
        if rec.rank_in_gu == 0 {
            return Err(t.malformed(line, "rank_in_gu", &f[3]));
        }
        let key = vec![rec.tree_id.clone(), rec.axis_id.clone(), f[2].clone(), f[3].clone()];
        t.check_unique(&mut seen, line, key)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_leaves<R: Read>(reader: R, file: &str) -> Result<Vec<LeafRecord>> {
    let t = Table::read(reader, file, &LEAF_COLUMNS)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, f) in &t.rows {
        let line = *line;
        let rec = LeafRecord {
            tree_id: t.id(line, "tree_id", &f[0])?,
            axis_id: t.id(line, "axis_id", &f[1])?,
            gu_ca: t.int(line, "gu_ca", &f[2])?,
            sample_index: t.int(line, "sample_index", &f[3])?,
            fresh_weight_g: t.measurement(line, "fresh_weight_g", &f[4])?,
            area_cm2: t.measurement(line, "area_cm2", &f[5])?,
        };
        if rec.gu_ca == 0 {
            return Err(t.malformed(line, "gu_ca", &f[2]));
        }
        if !(1..=LEAF_SAMPLES_PER_GU).contains(&rec.sample_index) {
            return Err(t.malformed(line, "sample_index", &f[3]));
        }
        let key = vec![rec.tree_id.clone(), rec.axis_id.clone(), f[2].clone(), f[3].clone()];
        t.check_unique(&mut seen, line, key)?;
        out.push(rec);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

pub fn parse_measurements(paths: &MeasurementPaths) -> Result<MeasurementSet> {
    Ok(MeasurementSet {
        axes: parse_axes(open(&paths.axes)?, &label(&paths.axes))?,
        gus: parse_gus(open(&paths.gus)?, &label(&paths.gus))?,
        internodes: parse_internodes(open(&paths.internodes)?, &label(&paths.internodes))?,
        leaves: parse_leaves(open(&paths.leaves)?, &label(&paths.leaves))?,
    })
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn finish<W: Write>(mut wtr: csv::Writer<W>) -> std::io::Result<()> {
    wtr.flush()
}

fn to_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

pub fn write_axes<W: Write>(w: W, records: &[AxisRecord]) -> std::io::Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(AXES_COLUMNS).map_err(to_io)?;
    for r in records {
        let parent = r.parent_axis_id.clone().unwrap_or_default();
        wtr.write_record([r.tree_id.clone(), r.axis_id.clone(), parent, r.insertion_ca.to_string()])
            .map_err(to_io)?;
    }
    finish(wtr)
}

pub fn write_gus<W: Write>(w: W, records: &[GuRecord]) -> std::io::Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(GUS_COLUMNS).map_err(to_io)?;
    for r in records {
        wtr.write_record([
            r.tree_id.clone(),
            r.axis_id.clone(),
            r.gu_ca.to_string(),
            r.internode_count.to_string(),
            r.leaf_scar_count.to_string(),
        ])
        .map_err(to_io)?;
    }
    finish(wtr)
}

pub fn write_internodes<W: Write>(w: W, records: &[InternodeRecord]) -> std::io::Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(INTERNODE_COLUMNS).map_err(to_io)?;
    for r in records {
        wtr.write_record([
            r.tree_id.clone(),
            r.axis_id.clone(),
            r.gu_ca.to_string(),
            r.rank_in_gu.to_string(),
            r.fresh_weight_g.to_string(),
            r.length_cm.to_string(),
            r.diameter_mm.to_string(),
        ])
        .map_err(to_io)?;
    }
    finish(wtr)
}

pub fn write_leaves<W: Write>(w: W, records: &[LeafRecord]) -> std::io::Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(LEAF_COLUMNS).map_err(to_io)?;
    for r in records {
        wtr.write_record([
            r.tree_id.clone(),
            r.axis_id.clone(),
            r.gu_ca.to_string(),
            r.sample_index.to_string(),
            r.fresh_weight_g.to_string(),
            r.area_cm2.to_string(),
        ])
        .map_err(to_io)?;
    }
    finish(wtr)
}

fn internode_key(r: &InternodeRecord) -> (&str, &str, u32, u32) {
    (&r.tree_id, &r.axis_id, r.gu_ca, r.rank_in_gu)
}

fn leaf_key(r: &LeafRecord) -> (&str, &str, u32, u8) {
    (&r.tree_id, &r.axis_id, r.gu_ca, r.sample_index)
}

impl Dataset {
    /// Builds every tree topology and checks that each organ record lands on
    /// a declared growth unit.
    pub fn from_measurements(m: MeasurementSet) -> Result<Dataset> {
        let trees = topology::build_topologies(&m.axes, &m.gus)?;
        let by_id: BTreeMap<&str, &TreeTopology> = trees.iter().map(|t| (t.tree_id.as_str(), t)).collect();
        let gu_of = |tree: &str, axis: &str, ca: u32| by_id.get(tree).and_then(|t| t.axes.get(axis)).and_then(|a| a.gu(ca));

        for r in &m.internodes {
            let gu = gu_of(&r.tree_id, &r.axis_id, r.gu_ca).ok_or_else(|| IngestError::OrphanRecord {
                kind: "internode",
                tree: r.tree_id.clone(),
                axis: r.axis_id.clone(),
                ca: r.gu_ca,
            })?;
            if r.rank_in_gu > gu.internode_count {
                return Err(IngestError::RankOutOfRange {
                    tree: r.tree_id.clone(),
                    axis: r.axis_id.clone(),
                    ca: r.gu_ca,
                    rank: r.rank_in_gu,
                    count: gu.internode_count,
                });
            }
        }
        for r in &m.leaves {
            if gu_of(&r.tree_id, &r.axis_id, r.gu_ca).is_none() {
                return Err(IngestError::OrphanRecord {
                    kind: "leaf",
                    tree: r.tree_id.clone(),
                    axis: r.axis_id.clone(),
                    ca: r.gu_ca,
                });
            }
        }

        let mut internodes = m.internodes;
        internodes.sort_by(|a, b| internode_key(a).cmp(&internode_key(b)));
        let mut leaves = m.leaves;
        leaves.sort_by(|a, b| leaf_key(a).cmp(&leaf_key(b)));
        Ok(Dataset { trees, internodes, leaves })
    }

    pub fn tree(&self, tree_id: &str) -> Option<&TreeTopology> {
        self.trees.iter().find(|t| t.tree_id == tree_id)
    }

    pub fn internodes_of<'a>(&'a self, tree_id: &'a str) -> impl Iterator<Item = &'a InternodeRecord> + 'a {
        self.internodes.iter().filter(move |r| r.tree_id == tree_id)
    }

    pub fn leaves_of<'a>(&'a self, tree_id: &'a str) -> impl Iterator<Item = &'a LeafRecord> + 'a {
        self.leaves.iter().filter(move |r| r.tree_id == tree_id)
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: u32,
    a: f64,
    b: f64,
    c: f64,
}

impl Acc {
    fn add(&mut self, a: f64, b: f64, c: f64) {
        self.n += 1;
        self.a += a;
        self.b += b;
        self.c += c;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = f64::from(self.n);
        (self.a / n, self.b / n, self.c / n)
    }
}

/// Aggregates one tree's organ records into its fitting target.
///
/// Per-(PA, CA) entries are arithmetic means over measured internodes and
/// sampled leaves. The cumulated profile sums, over every GU with
/// `ca <= cycle`, the GU internode mass (mean measured internode weight ×
/// internode count) and GU blade mass (mean sampled leaf weight ×
/// internode count). A GU without leaf samples takes its (PA, CA) class
/// mean, then the tree mean; a class without leaf samples gets its blade
/// area from the tree's pooled specific leaf weight.
pub fn build_target_series(
    internodes: &[InternodeRecord],
    leaves: &[LeafRecord],
    topology: &TreeTopology,
    pa_map: &BTreeMap<String, PhysioAge>,
) -> Result<TargetSeries> {
    let tree = topology.tree_id.as_str();
    let pa_of = |axis: &str| pa_map.get(axis).copied().ok_or_else(|| IngestError::MissingPA(axis.to_string()));
    for axis in topology.axes.keys() {
        pa_of(axis)?;
    }

    let mut ints: Vec<&InternodeRecord> = internodes.iter().filter(|r| r.tree_id == tree).collect();
    ints.sort_by(|a, b| internode_key(a).cmp(&internode_key(b)));
    let mut lvs: Vec<&LeafRecord> = leaves.iter().filter(|r| r.tree_id == tree).collect();
    lvs.sort_by(|a, b| leaf_key(a).cmp(&leaf_key(b)));

    let mut class_int: BTreeMap<(PhysioAge, u32), Acc> = BTreeMap::new();
    let mut gu_int: BTreeMap<(&str, u32), Acc> = BTreeMap::new();
    for r in &ints {
        let pa = pa_of(&r.axis_id)?;
        class_int.entry((pa, r.gu_ca)).or_default().add(r.fresh_weight_g, r.length_cm, r.diameter_mm);
        gu_int.entry((&r.axis_id, r.gu_ca)).or_default().add(r.fresh_weight_g, 0.0, 0.0);
    }

    let mut class_leaf: BTreeMap<(PhysioAge, u32), Acc> = BTreeMap::new();
    let mut gu_leaf: BTreeMap<(&str, u32), Acc> = BTreeMap::new();
    let mut tree_leaf = Acc::default();
    for r in &lvs {
        let pa = pa_of(&r.axis_id)?;
        class_leaf.entry((pa, r.gu_ca)).or_default().add(r.fresh_weight_g, r.area_cm2, 0.0);
        gu_leaf.entry((&r.axis_id, r.gu_ca)).or_default().add(r.fresh_weight_g, 0.0, 0.0);
        tree_leaf.add(r.fresh_weight_g, r.area_cm2, 0.0);
    }
    if tree_leaf.n == 0 {
        return Err(IngestError::NoLeafData(tree.to_string()));
    }
    let tree_leaf_weight = tree_leaf.mean().0;
    let tree_slw = tree_leaf.a / tree_leaf.b;

    let entries = class_int
        .iter()
        .map(|(&(pa, ca), acc)| {
            let (w, l, d) = acc.mean();
            let (bw, ba) = match class_leaf.get(&(pa, ca)) {
                Some(leaf) => {
                    let (bw, ba, _) = leaf.mean();
                    (bw, ba)
                }
                None => {
                    log::warn!("tree {tree}: no leaf sample for {pa} ca {ca}; using tree mean leaf weight");
                    (tree_leaf_weight, tree_leaf_weight / tree_slw)
                }
            };
            TargetEntry {
                pa,
                ca,
                mean_internode_weight: w,
                mean_internode_length: l,
                mean_internode_diameter: d,
                mean_blade_weight: bw,
                mean_blade_area: ba,
                n_internodes: acc.n,
            }
        })
        .collect();

    let mut per_cycle = vec![(0.0, 0.0); topology.age as usize];
    for axis in topology.axes.values() {
        let pa = pa_of(&axis.id)?;
        for gu in &axis.gus {
            let count = f64::from(gu.internode_count);
            let int_mean = match gu_int.get(&(axis.id.as_str(), gu.ca)) {
                Some(acc) => acc.mean().0,
                None => match class_int.get(&(pa, gu.ca)) {
                    Some(acc) => {
                        log::warn!("tree {tree} axis {} ca {}: no internode records, using class mean", axis.id, gu.ca);
                        acc.mean().0
                    }
                    None => {
                        return Err(IngestError::MissingInternodeData { axis: axis.id.clone(), ca: gu.ca });
                    }
                },
            };
            let leaf_mean = match gu_leaf.get(&(axis.id.as_str(), gu.ca)) {
                Some(acc) => acc.mean().0,
                None => match class_leaf.get(&(pa, gu.ca)) {
                    Some(acc) => {
                        log::warn!("tree {tree} axis {} ca {}: no leaf samples, using class mean", axis.id, gu.ca);
                        acc.mean().0
                    }
                    None => {
                        log::warn!("tree {tree} axis {} ca {}: no leaf samples, using tree mean", axis.id, gu.ca);
                        tree_leaf_weight
                    }
                },
            };
            let slot = &mut per_cycle[(gu.ca - 1) as usize];
            slot.0 += int_mean * count;
            slot.1 += leaf_mean * count;
        }
    }
    let mut cumulated = Vec::with_capacity(per_cycle.len());
    let (mut ci, mut cb) = (0.0, 0.0);
    for (i, (int_mass, blade_mass)) in per_cycle.into_iter().enumerate() {
        ci += int_mass;
        cb += blade_mass;
        cumulated.push(CumulatedPoint {
            cycle: i as u32 + 1,
            cum_internode_mass: ci,
            cum_blade_mass: cb,
        });
    }

    Ok(TargetSeries { tree_id: tree.to_string(), entries, cumulated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_topology;

    const INTERNODES: &str = "\
tree_id,axis_id,gu_ca,rank_in_gu,fresh_weight_g,length_cm,diameter_mm
t,A,1,1,1.0,3.0,4.0
t,A,2,1,2.0,3.5,4.5
t,A,3,1,3.0,4.0,5.0
";

    fn single_axis() -> TreeTopology {
        let axes = [AxisRecord { tree_id: "t".into(), axis_id: "A".into(), parent_axis_id: None, insertion_ca: 0 }];
        let gus: Vec<GuRecord> = (1..=3)
            .map(|ca| GuRecord {
                tree_id: "t".into(),
                axis_id: "A".into(),
                gu_ca: ca,
                internode_count: 1,
                leaf_scar_count: 1,
            })
            .collect();
        build_topology(&axes, &gus).unwrap()
    }

    fn leaf(axis: &str, ca: u32, i: u8, w: f64, a: f64) -> LeafRecord {
        LeafRecord {
            tree_id: "t".into(),
            axis_id: axis.into(),
            gu_ca: ca,
            sample_index: i,
            fresh_weight_g: w,
            area_cm2: a,
        }
    }

    #[test]
    fn parses_internode_rows() {
        let recs = parse_internodes(INTERNODES.as_bytes(), "internodes.csv").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].fresh_weight_g, 3.0);
    }

    #[test]
    fn negative_weight_is_unit_error_with_line() {
        let text = INTERNODES.replace("t,A,2,1,2.0", "t,A,2,1,-1.0");
        match parse_internodes(text.as_bytes(), "internodes.csv") {
            Err(IngestError::UnitError { line, column, value, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "fresh_weight_g");
                assert_eq!(value, "-1.0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = INTERNODES.replace(",diameter_mm", "");
        match parse_internodes(text.as_bytes(), "internodes.csv") {
            Err(IngestError::SchemaError { column, .. }) => assert_eq!(column, "diameter_mm"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_reported() {
        let text = format!("{INTERNODES}t,A,3,1,3.0,4.0,5.0\n");
        assert!(matches!(
            parse_internodes(text.as_bytes(), "internodes.csv"),
            Err(IngestError::DuplicateKey { line: 5, .. })
        ));
    }

    #[test]
    fn leaf_sample_index_range() {
        let text = "tree_id,axis_id,gu_ca,sample_index,fresh_weight_g,area_cm2\nt,A,1,4,1.0,30\n";
        assert!(matches!(parse_leaves(text.as_bytes(), "leaves.csv"), Err(IngestError::Malformed { .. })));
    }

    #[test]
    fn prefix_sum_of_cumulated_mass() {
        let t = single_axis();
        let ints = parse_internodes(INTERNODES.as_bytes(), "i").unwrap();
        let leaves = vec![leaf("A", 1, 1, 2.0, 70.0), leaf("A", 2, 1, 2.0, 70.0), leaf("A", 3, 1, 2.0, 70.0)];
        let ts = build_target_series(&ints, &leaves, &t, &t.pa_map().unwrap()).unwrap();
        let cum: Vec<f64> = ts.cumulated.iter().map(|c| c.cum_internode_mass).collect();
        assert_eq!(cum, [1.0, 3.0, 6.0]);
        assert_eq!(ts.cumulated[2].cum_blade_mass, 6.0);
    }

    #[test]
    fn class_means_and_blade_mass() {
        let axes = [AxisRecord { tree_id: "t".into(), axis_id: "A".into(), parent_axis_id: None, insertion_ca: 0 }];
        let gus = [
            GuRecord { tree_id: "t".into(), axis_id: "A".into(), gu_ca: 1, internode_count: 10, leaf_scar_count: 10 },
            GuRecord { tree_id: "t".into(), axis_id: "A".into(), gu_ca: 2, internode_count: 2, leaf_scar_count: 2 },
        ];
        let t = build_topology(&axes, &gus).unwrap();
        let rec = |ca, rank, w| InternodeRecord {
            tree_id: "t".into(),
            axis_id: "A".into(),
            gu_ca: ca,
            rank_in_gu: rank,
            fresh_weight_g: w,
            length_cm: 1.0,
            diameter_mm: 1.0,
        };
        let ints = vec![rec(1, 1, 1.0), rec(2, 1, 4.0), rec(2, 2, 6.0)];
        let leaves = vec![leaf("A", 1, 1, 1.0, 50.0), leaf("A", 1, 2, 3.0, 50.0)];
        let ts = build_target_series(&ints, &leaves, &t, &t.pa_map().unwrap()).unwrap();
        assert_eq!(ts.entry(PhysioAge::MAIN, 2).unwrap().mean_internode_weight, 5.0);
        assert_eq!(ts.entry(PhysioAge::MAIN, 2).unwrap().n_internodes, 2);
        // GU 1: 10 internodes × mean leaf 2 g.
        assert_eq!(ts.cumulated[0].cum_blade_mass, 20.0);
        // GU 2 has no leaf sample and no class sample: tree mean (2 g) × 2.
        assert_eq!(ts.cumulated[1].cum_blade_mass, 24.0);
        // Unsampled class: area from pooled ratio 4 g / 100 cm².
        let e2 = ts.entry(PhysioAge::MAIN, 2).unwrap();
        assert!((e2.mean_blade_area - 2.0 / 0.04).abs() < 1e-12);
    }

    #[test]
    fn missing_pa_reported() {
        let t = single_axis();
        let ints = parse_internodes(INTERNODES.as_bytes(), "i").unwrap();
        let leaves = vec![leaf("A", 1, 1, 2.0, 70.0)];
        assert!(matches!(
            build_target_series(&ints, &leaves, &t, &BTreeMap::new()),
            Err(IngestError::MissingPA(a)) if a == "A"
        ));
    }
}
