//! Tree structure: axes made of growth units (GUs), each GU bearing a
//! run of internodes with one blade per internode.
//!
//! A GU is indexed by its chronological age (`ca`, the cycle in which it
//! appeared); an axis carries a physiological age (PA) once classified.
//! The topology is immutable after [`build_topology`] and canonical: axes
//! are keyed by id in a `BTreeMap` and GUs are sorted by `ca`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default number of physiological-age classes.
pub const DEFAULT_MAX_PA: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("no axis records")]
    Empty,
    #[error("records mix trees `{0}` and `{1}`")]
    MixedTrees(String, String),
    #[error("axis `{0}` declared twice")]
    DuplicateAxis(String),
    #[error("axis `{axis}` references unknown parent `{parent}`")]
    DanglingParent { axis: String, parent: String },
    #[error("parent links through axis `{0}` form a cycle")]
    CycleDetected(String),
    #[error("tree has no root axis")]
    NoRoot,
    #[error("tree has several root axes: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("growth unit references undeclared axis `{axis}` in tree `{tree}`")]
    UnknownAxis { tree: String, axis: String },
    #[error("growth unit ({axis}, ca {ca}) declared twice")]
    DuplicateGu { axis: String, ca: u32 },
    #[error("growth unit on axis `{axis}` has non-positive ca")]
    InvalidCa { axis: String },
    #[error("growth unit ({axis}, ca {ca}) has no internodes")]
    EmptyGu { axis: String, ca: u32 },
    #[error("axis `{0}` has no growth units")]
    AxisWithoutGus(String),
    #[error("axis `{axis}`: gap in growth-unit sequence, expected ca {expected}, found {found}")]
    NonContiguousCA { axis: String, expected: u32, found: u32 },
    #[error("root axis `{axis}` starts at ca {first}, expected 1")]
    RootStart { axis: String, first: u32 },
    #[error("axis `{axis}` inserted at ca {insertion_ca} but parent `{parent}` has no growth unit there")]
    InsertionNotOnParent { axis: String, parent: String, insertion_ca: u32 },
    #[error("axis `{axis}` inserted at ca {insertion_ca} must start at ca {}, found {first}", insertion_ca + 1)]
    BranchDelay { axis: String, insertion_ca: u32, first: u32 },
    #[error("cycle {cycle} outside 1..={age}")]
    CycleOutOfRange { cycle: u32, age: u32 },
    #[error("axis `{0}` has no physiological age assigned")]
    Unclassified(String),
    #[error("root axis `{0}` must have physiological age 1")]
    RootNotMain(String),
    #[error("axis `{axis}` has PA {child} below its parent's PA {parent}")]
    PaOrder { axis: String, child: u8, parent: u8 },
    #[error("physiological age {value} outside 1..={max}")]
    InvalidPa { value: u8, max: u8 },
}

pub type Result<T, E = TopologyError> = std::result::Result<T, E>;

/// Physiological-age class index, 1 for the main stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PhysioAge(u8);

impl PhysioAge {
    pub const MAIN: PhysioAge = PhysioAge(1);

    pub fn new(value: u8, max: u8) -> Result<Self> {
        if value == 0 || value > max {
            return Err(TopologyError::InvalidPa { value, max });
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based index, for per-PA parameter vectors.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_index(index: usize) -> Self {
        Self(u8::try_from(index + 1).expect("physiological age index fits in u8"))
    }
}

impl TryFrom<u8> for PhysioAge {
    type Error = TopologyError;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value, u8::MAX)
    }
}

impl From<PhysioAge> for u8 {
    fn from(pa: PhysioAge) -> u8 {
        pa.0
    }
}

impl fmt::Display for PhysioAge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PA{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrganKind {
    Internode,
    Blade,
}

impl fmt::Display for OrganKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrganKind::Internode => "internode",
            OrganKind::Blade => "blade",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthUnit {
    pub ca: u32,
    pub internode_count: u32,
    pub leaf_scar_count: u32,
    pub borne_axis_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub id: String,
    pub parent_id: Option<String>,
    pub insertion_ca: u32,
    pub pa: Option<PhysioAge>,
    pub gus: Vec<GrowthUnit>,
}

impl Axis {
    pub fn gu(&self, ca: u32) -> Option<&GrowthUnit> {
        let first = self.gus.first()?.ca;
        self.gus.get(ca.checked_sub(first)? as usize)
    }

    pub fn last_gu(&self) -> &GrowthUnit {
        self.gus.last().expect("validated axes have growth units")
    }

    pub fn pa(&self) -> Result<PhysioAge> {
        self.pa.ok_or_else(|| TopologyError::Unclassified(self.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    pub tree_id: String,
    pub age: u32,
    pub axes: BTreeMap<String, Axis>,
}

/// One row of `axes.csv`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxisRecord {
    pub tree_id: String,
    pub axis_id: String,
    pub parent_axis_id: Option<String>,
    pub insertion_ca: u32,
}

/// One row of `gus.csv`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GuRecord {
    pub tree_id: String,
    pub axis_id: String,
    pub gu_ca: u32,
    pub internode_count: u32,
    pub leaf_scar_count: u32,
}

/// Validates the records of a single tree and assembles its topology.
///
/// The root axis is labelled PA 1; other axes stay unclassified until
/// [`TreeTopology::with_pa`] is applied.
pub fn build_topology(axis_records: &[AxisRecord], gu_records: &[GuRecord]) -> Result<TreeTopology> {
    let tree_id = axis_records.first().ok_or(TopologyError::Empty)?.tree_id.clone();
    for r in axis_records {
        if r.tree_id != tree_id {
            return Err(TopologyError::MixedTrees(tree_id, r.tree_id.clone()));
        }
    }

    let mut axes: BTreeMap<String, Axis> = BTreeMap::new();
    for r in axis_records {
        let parent_id = r.parent_axis_id.clone().filter(|p| !p.is_empty());
        let axis = Axis {
            id: r.axis_id.clone(),
            parent_id,
            insertion_ca: r.insertion_ca,
            pa: None,
            gus: Vec::new(),
        };
        if axes.insert(r.axis_id.clone(), axis).is_some() {
            return Err(TopologyError::DuplicateAxis(r.axis_id.clone()));
        }
    }

    for axis in axes.values() {
        if let Some(parent) = &axis.parent_id {
            if !axes.contains_key(parent) {
                return Err(TopologyError::DanglingParent {
                    axis: axis.id.clone(),
                    parent: parent.clone(),
                });
            }
        }
    }
    check_acyclic(&axes)?;

    let roots: Vec<String> = axes.values().filter(|a| a.parent_id.is_none()).map(|a| a.id.clone()).collect();
    let root_id = match roots.len() {
        0 => return Err(TopologyError::NoRoot),
        1 => roots[0].clone(),
        _ => return Err(TopologyError::MultipleRoots(roots)),
    };

    for r in gu_records {
        if r.tree_id != tree_id {
            return Err(TopologyError::MixedTrees(tree_id, r.tree_id.clone()));
        }
        let axis = axes.get_mut(&r.axis_id).ok_or_else(|| TopologyError::UnknownAxis {
            tree: r.tree_id.clone(),
            axis: r.axis_id.clone(),
        })?;
        if r.gu_ca == 0 {
            return Err(TopologyError::InvalidCa { axis: r.axis_id.clone() });
        }
        if r.internode_count == 0 {
            return Err(TopologyError::EmptyGu { axis: r.axis_id.clone(), ca: r.gu_ca });
        }
        if axis.gus.iter().any(|g| g.ca == r.gu_ca) {
            return Err(TopologyError::DuplicateGu { axis: r.axis_id.clone(), ca: r.gu_ca });
        }
        if r.leaf_scar_count != r.internode_count {
            log::warn!(
                "tree {} axis {} ca {}: {} leaf scars for {} internodes",
                r.tree_id,
                r.axis_id,
                r.gu_ca,
                r.leaf_scar_count,
                r.internode_count
            );
        }
        axis.gus.push(GrowthUnit {
            ca: r.gu_ca,
            internode_count: r.internode_count,
            leaf_scar_count: r.leaf_scar_count,
            borne_axis_ids: Vec::new(),
        });
    }

    for axis in axes.values_mut() {
        axis.gus.sort_by_key(|g| g.ca);
        if axis.gus.is_empty() {
            return Err(TopologyError::AxisWithoutGus(axis.id.clone()));
        }
        for pair in axis.gus.windows(2) {
            if pair[1].ca != pair[0].ca + 1 {
                return Err(TopologyError::NonContiguousCA {
                    axis: axis.id.clone(),
                    expected: pair[0].ca + 1,
                    found: pair[1].ca,
                });
            }
        }
    }

    let root = &axes[&root_id];
    if root.gus[0].ca != 1 {
        return Err(TopologyError::RootStart { axis: root_id, first: root.gus[0].ca });
    }

    // Child links: (parent, insertion ca, child), sorted so borne ids come out ordered.
    let links: BTreeSet<(String, u32, String)> = axes
        .values()
        .filter_map(|a| a.parent_id.clone().map(|p| (p, a.insertion_ca, a.id.clone())))
        .collect();
    for (parent, insertion_ca, child) in links {
        let first = axes[&child].gus[0].ca;
        let parent_axis = axes.get_mut(&parent).expect("parent checked above");
        let first_ca = parent_axis.gus[0].ca;
        let gu = insertion_ca
            .checked_sub(first_ca)
            .and_then(|i| parent_axis.gus.get_mut(i as usize))
            .ok_or_else(|| TopologyError::InsertionNotOnParent {
                axis: child.clone(),
                parent: parent.clone(),
                insertion_ca,
            })?;
        if first != insertion_ca + 1 {
            return Err(TopologyError::BranchDelay { axis: child, insertion_ca, first });
        }
        gu.borne_axis_ids.push(child);
    }

    axes.get_mut(&root_id).expect("root exists").pa = Some(PhysioAge::MAIN);
    let age = axes.values().map(|a| a.last_gu().ca).max().expect("at least one axis");
    Ok(TreeTopology { tree_id, age, axes })
}

/// Groups records by tree id and builds one topology per tree, in tree-id order.
pub fn build_topologies(axis_records: &[AxisRecord], gu_records: &[GuRecord]) -> Result<Vec<TreeTopology>> {
    let mut by_tree: BTreeMap<&str, (Vec<AxisRecord>, Vec<GuRecord>)> = BTreeMap::new();
    for r in axis_records {
        by_tree.entry(&r.tree_id).or_default().0.push(r.clone());
    }
    for r in gu_records {
        let entry = by_tree.get_mut(r.tree_id.as_str()).ok_or_else(|| TopologyError::UnknownAxis {
            tree: r.tree_id.clone(),
            axis: r.axis_id.clone(),
        })?;
        entry.1.push(r.clone());
    }
    by_tree.values().map(|(a, g)| build_topology(a, g)).collect()
}

fn check_acyclic(axes: &BTreeMap<String, Axis>) -> Result<()> {
    for start in axes.values() {
        let mut seen = BTreeSet::new();
        let mut current = start;
        while let Some(parent) = &current.parent_id {
            if !seen.insert(current.id.as_str()) {
                return Err(TopologyError::CycleDetected(start.id.clone()));
            }
            current = &axes[parent];
        }
    }
    Ok(())
}

impl TreeTopology {
    pub fn root(&self) -> &Axis {
        self.axes
            .values()
            .find(|a| a.parent_id.is_none())
            .expect("validated topology has a root")
    }

    pub fn total_internodes(&self) -> u64 {
        self.axes
            .values()
            .flat_map(|a| a.gus.iter())
            .map(|g| u64::from(g.internode_count))
            .sum()
    }

    /// Axes ordered so that every parent precedes its children.
    pub fn axes_parent_first(&self) -> Vec<&Axis> {
        let mut order = vec![self.root()];
        let mut i = 0;
        while i < order.len() {
            let axis = order[i];
            for gu in &axis.gus {
                order.extend(gu.borne_axis_ids.iter().map(|id| &self.axes[id]));
            }
            i += 1;
        }
        order
    }

    /// Zero-based rank of the internode, within the bearing GU, at whose top
    /// `child` is attached. Branches borne by one GU are spread downward from
    /// the GU's top internode in id order, wrapping when they outnumber the
    /// internodes.
    pub fn attachment_rank(&self, child: &Axis) -> Option<u32> {
        let parent = self.axes.get(child.parent_id.as_ref()?)?;
        let gu = parent.gu(child.insertion_ca)?;
        let k = gu.borne_axis_ids.iter().position(|id| *id == child.id)? as u32;
        Some(gu.internode_count - 1 - (k % gu.internode_count))
    }

    /// Applies a physiological-age assignment to every axis.
    ///
    /// The root must be PA 1 and a child may not be assigned a lower PA than
    /// its parent; violations are reported, not corrected.
    pub fn with_pa(&self, pa_map: &BTreeMap<String, PhysioAge>) -> Result<TreeTopology> {
        let mut out = self.clone();
        for axis in out.axes.values_mut() {
            let pa = *pa_map.get(&axis.id).ok_or_else(|| TopologyError::Unclassified(axis.id.clone()))?;
            if axis.parent_id.is_none() && pa != PhysioAge::MAIN {
                return Err(TopologyError::RootNotMain(axis.id.clone()));
            }
            axis.pa = Some(pa);
        }
        out.check_pa_order()?;
        Ok(out)
    }

    pub fn check_pa_order(&self) -> Result<()> {
        for axis in self.axes.values() {
            if let Some(parent) = &axis.parent_id {
                let (child, parent) = (axis.pa()?, self.axes[parent].pa()?);
                if child < parent {
                    return Err(TopologyError::PaOrder {
                        axis: axis.id.clone(),
                        child: child.value(),
                        parent: parent.value(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The PA assignment currently carried by the axes.
    pub fn pa_map(&self) -> Result<BTreeMap<String, PhysioAge>> {
        self.axes.values().map(|a| Ok((a.id.clone(), a.pa()?))).collect()
    }

    pub fn max_pa(&self) -> Result<PhysioAge> {
        let mut max = PhysioAge::MAIN;
        for axis in self.axes.values() {
            max = max.max(axis.pa()?);
        }
        Ok(max)
    }
}

/// Counts of internodes and blades born at `cycle`, per PA.
///
/// Each internode carries exactly one blade, so both kinds always appear
/// together with equal counts.
pub fn organ_census(t: &TreeTopology, cycle: u32) -> Result<BTreeMap<(PhysioAge, OrganKind), u64>> {
    if cycle == 0 || cycle > t.age {
        return Err(TopologyError::CycleOutOfRange { cycle, age: t.age });
    }
    let mut census = BTreeMap::new();
    for axis in t.axes.values() {
        let Some(gu) = axis.gu(cycle) else { continue };
        let pa = axis.pa()?;
        let n = u64::from(gu.internode_count);
        *census.entry((pa, OrganKind::Internode)).or_insert(0) += n;
        *census.entry((pa, OrganKind::Blade)).or_insert(0) += n;
    }
    Ok(census)
}
