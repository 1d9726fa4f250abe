//! Physiological-age classification by exact 1-D k-means.
//!
//! Axes are clustered on the mean weight of the internodes in their
//! terminal GU. Because the data are one-dimensional, the optimal
//! partition consists of contiguous runs of the sorted values and is found
//! exactly by dynamic programming.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingest::{Dataset, InternodeRecord};
use crate::topology::{PhysioAge, TreeTopology};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifyError {
    #[error("no values to cluster")]
    Empty,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("non-finite value {0} in clustering input")]
    NonFinite(f64),
    #[error("{k} clusters requested but only {distinct} distinct values")]
    KTooLarge { k: usize, distinct: usize },
    #[error("axis `{0}` has no internode record in its terminal growth unit")]
    NoTerminalData(String),
    #[error("main axis `{0}` is not in the heaviest cluster")]
    MainAxisNotHeaviest(String),
    #[error("main axis `{0}` is missing from the partition")]
    MissingMainAxis(String),
}

pub type Result<T, E = ClassifyError> = std::result::Result<T, E>;

/// Optimal contiguous partition of a list of values.
///
/// Clusters are numbered in ascending order of their values; `labels[i]` is
/// the cluster of `values[i]` in the caller's order.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub boundaries: Vec<f64>,
    pub labels: Vec<usize>,
    pub means: Vec<f64>,
    pub sizes: Vec<usize>,
    pub wcss: f64,
}

/// A [`Clustering`] keyed by axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition<K: Ord> {
    pub k: usize,
    pub boundaries: Vec<f64>,
    pub assignments: BTreeMap<K, usize>,
    pub means: Vec<f64>,
    pub wcss: f64,
}

/// Axis identity when several trees are classified together.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AxisKey {
    pub tree_id: String,
    pub axis_id: String,
}

/// Relative cost difference under which two partitions count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Sum of squared deviations from the mean, two-pass.
pub fn sum_sq_dev(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|x| (x - mean) * (x - mean)).sum()
}

/// Globally optimal k-partition of `values` into contiguous runs of their
/// sorted order, minimizing the within-cluster sum of squares.
///
/// Cuts are only placed between distinct values. Partitions whose costs
/// differ by at most [`TIE_TOLERANCE`] times the total sum of squares are
/// ties; among them the one with the smallest leading cluster wins, applied
/// recursively. The reported `wcss` is recomputed two-pass per cluster and
/// summed in cluster order.
pub fn cluster_1d(values: &[f64], k: usize) -> Result<Clustering> {
    if values.is_empty() {
        return Err(ClassifyError::Empty);
    }
    if k == 0 {
        return Err(ClassifyError::ZeroClusters);
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(ClassifyError::NonFinite(bad));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let x: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let n = x.len();
    let distinct = 1 + x.windows(2).filter(|w| w[0] < w[1]).count();
    if k > distinct {
        return Err(ClassifyError::KTooLarge { k, distinct });
    }

    // cost[i][j - i - 1] = wcss of x[i..j], by Welford's running update.
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (mut mean, mut m2) = (0.0, 0.0);
            x[i..]
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let d = v - mean;
                    mean += d / (c + 1) as f64;
                    m2 += d * (v - mean);
                    m2
                })
                .collect()
        })
        .collect();
    let cost_of = |i: usize, j: usize| cost[i][j - i - 1];
    let can_cut = |j: usize| j == n || x[j - 1] < x[j];

    // best[m][i]: optimal cost of splitting the suffix x[i..] into m clusters.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    best[0][n] = 0.0;
    for m in 1..=k {
        for i in 0..n {
            let mut b = f64::INFINITY;
            for j in i + 1..=n {
                if !can_cut(j) || !best[m - 1][j].is_finite() {
                    continue;
                }
                b = b.min(cost_of(i, j) + best[m - 1][j]);
            }
            best[m][i] = b;
        }
    }

    let tie = TIE_TOLERANCE * sum_sq_dev(&x);
    let mut cuts = Vec::with_capacity(k + 1);
    cuts.push(0);
    let mut i = 0;
    for m in (1..=k).rev() {
        let target = best[m][i];
        let j = (i + 1..=n)
            .find(|&j| can_cut(j) && best[m - 1][j].is_finite() && cost_of(i, j) + best[m - 1][j] <= target + tie)
            .expect("optimal cut exists");
        cuts.push(j);
        i = j;
    }

    let mut labels = vec![0; n];
    let mut means = Vec::with_capacity(k);
    let mut sizes = Vec::with_capacity(k);
    let mut wcss = 0.0;
    for (c, w) in cuts.windows(2).enumerate() {
        let run = &x[w[0]..w[1]];
        means.push(run.iter().sum::<f64>() / run.len() as f64);
        sizes.push(run.len());
        wcss += sum_sq_dev(run);
        for &idx in &order[w[0]..w[1]] {
            labels[idx] = c;
        }
    }
    let boundaries = cuts[1..k].iter().map(|&j| 0.5 * (x[j - 1] + x[j])).collect();
    Ok(Clustering { k, boundaries, labels, means, sizes, wcss })
}

/// Clusters keyed weights, e.g. terminal internode weight per axis.
pub fn partition<K: Ord + Clone>(weights: &BTreeMap<K, f64>, k: usize) -> Result<ClusterPartition<K>> {
    let values: Vec<f64> = weights.values().copied().collect();
    let c = cluster_1d(&values, k)?;
    let assignments = weights.keys().cloned().zip(c.labels).collect();
    Ok(ClusterPartition {
        k: c.k,
        boundaries: c.boundaries,
        assignments,
        means: c.means,
        wcss: c.wcss,
    })
}

/// Relabels clusters as physiological ages, heaviest cluster first.
///
/// Every main axis must already sit in the heaviest cluster; the
/// classification is not overridden to make it so.
pub fn assign_pa<K: Ord + Clone + ToString>(
    p: &ClusterPartition<K>,
    main_axes: &[K],
) -> Result<BTreeMap<K, PhysioAge>> {
    for main in main_axes {
        match p.assignments.get(main) {
            None => return Err(ClassifyError::MissingMainAxis(main.to_string())),
            Some(&c) if c + 1 != p.k => return Err(ClassifyError::MainAxisNotHeaviest(main.to_string())),
            Some(_) => {}
        }
    }
    Ok(p.assignments
        .iter()
        .map(|(key, &c)| (key.clone(), PhysioAge::from_index(p.k - 1 - c)))
        .collect())
}

impl std::fmt::Display for AxisKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.tree_id, self.axis_id)
    }
}

/// Mean fresh weight of the internodes in each axis's terminal GU.
pub fn top_internode_weight(t: &TreeTopology, records: &[InternodeRecord]) -> Result<BTreeMap<String, f64>> {
    t.axes
        .values()
        .map(|axis| {
            let top = axis.last_gu().ca;
            let (sum, n) = records
                .iter()
                .filter(|r| r.tree_id == t.tree_id && r.axis_id == axis.id && r.gu_ca == top)
                .fold((0.0, 0usize), |(s, n), r| (s + r.fresh_weight_g, n + 1));
            if n == 0 {
                return Err(ClassifyError::NoTerminalData(axis.id.clone()));
            }
            Ok((axis.id.clone(), sum / n as f64))
        })
        .collect()
}

/// Physiological ages per tree and axis, as written to `pa_map.json`.
pub type PaMap = BTreeMap<String, BTreeMap<String, PhysioAge>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub partition: ClusterPartition<AxisKey>,
    pub pa: PaMap,
}

/// Classifies all axes of a dataset in one pooled clustering.
///
/// With `normalize`, each axis weight is divided by its own tree's main-axis
/// terminal weight first, so trees of different vigor share one scale.
pub fn classify_dataset(data: &Dataset, k: usize, normalize: bool) -> Result<Classification> {
    let mut weights = BTreeMap::new();
    let mut mains = Vec::new();
    for tree in &data.trees {
        let w = top_internode_weight(tree, &data.internodes)?;
        let root = tree.root().id.clone();
        let scale = if normalize { w[&root] } else { 1.0 };
        for (axis, v) in w {
            weights.insert(AxisKey { tree_id: tree.tree_id.clone(), axis_id: axis }, v / scale);
        }
        mains.push(AxisKey { tree_id: tree.tree_id.clone(), axis_id: root });
    }
    let partition = partition(&weights, k)?;
    let assigned = assign_pa(&partition, &mains)?;
    let mut pa: PaMap = BTreeMap::new();
    for (key, age) in assigned {
        pa.entry(key.tree_id).or_default().insert(key.axis_id, age);
    }
    for tree in &data.trees {
        if let Some(map) = pa.get(&tree.tree_id) {
            if let Err(e) = tree.with_pa(map) {
                log::warn!("tree {}: {e}", tree.tree_id);
            }
        }
    }
    Ok(Classification { partition, pa })
}
