//! Test-only helpers: an exhaustive-split reference trainer that mirrors
//! the boosting objective by direct enumeration, independent of the
//! library's binned implementation, plus partition extraction utilities.

use ridewait::features::{Availability, ColumnDef, ColumnKind, FeatureMatrix, FeatureSchema, Task};
use ridewait::gbt::{GbtModel, GbtParams, Tree};

/// One leaf of a reference tree: the training rows it holds and its weight.
pub struct OracleLeaf {
    pub rows: Vec<usize>,
    pub weight: f64,
}

pub struct OracleTree {
    pub leaves: Vec<OracleLeaf>,
}

pub struct OracleModel {
    pub base_score: f64,
    pub trees: Vec<OracleTree>,
}

/// Reference boosting loop: squared loss, exhaustive split enumeration
/// over midpoints of node-local distinct values, gain and leaf formulas
/// computed directly from row sums.
pub fn oracle_train(rows: &[Vec<f64>], labels: &[f64], params: &GbtParams) -> OracleModel {
    let n = rows.len();
    let base_score = labels.iter().sum::<f64>() / n as f64;
    let mut preds = vec![base_score; n];
    let mut trees = Vec::new();
    for _ in 0..params.num_trees {
        let grad: Vec<f64> = preds.iter().zip(labels).map(|(p, y)| p - y).collect();
        let mut leaves = Vec::new();
        grow((0..n).collect(), rows, &grad, params, 0, &mut leaves);
        for leaf in &leaves {
            for &i in &leaf.rows {
                preds[i] += params.learning_rate * leaf.weight;
            }
        }
        trees.push(OracleTree { leaves });
    }
    OracleModel { base_score, trees }
}

fn grow(
    node_rows: Vec<usize>,
    rows: &[Vec<f64>],
    grad: &[f64],
    params: &GbtParams,
    depth: usize,
    out: &mut Vec<OracleLeaf>,
) {
    if depth < params.max_depth {
        if let Some((feature, threshold)) = best_split(&node_rows, rows, grad, params) {
            let (left, right): (Vec<usize>, Vec<usize>) = node_rows
                .iter()
                .partition(|&&i| rows[i][feature] <= threshold);
            grow(left, rows, grad, params, depth + 1, out);
            grow(right, rows, grad, params, depth + 1, out);
            return;
        }
    }
    let g: f64 = node_rows.iter().map(|&i| grad[i]).sum();
    let h = node_rows.len() as f64;
    let mut sorted = node_rows;
    sorted.sort_unstable();
    out.push(OracleLeaf {
        rows: sorted,
        weight: -g / (h + params.lambda),
    });
}

#[allow(clippy::needless_range_loop)] // feature indexes columns, not `rows`
fn best_split(
    node_rows: &[usize],
    rows: &[Vec<f64>],
    grad: &[f64],
    params: &GbtParams,
) -> Option<(usize, f64)> {
    let g_total: f64 = node_rows.iter().map(|&i| grad[i]).sum();
    let h_total = node_rows.len() as f64;
    let parent = g_total * g_total / (h_total + params.lambda);

    let mut best: Option<(f64, usize, f64)> = None;
    let n_features = rows[0].len();
    for feature in 0..n_features {
        let mut values: Vec<f64> = node_rows.iter().map(|&i| rows[i][feature]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for pair in values.windows(2) {
            let threshold = (pair[0] + pair[1]) / 2.0;
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for &i in node_rows {
                if rows[i][feature] <= threshold {
                    g_left += grad[i];
                    h_left += 1.0;
                }
            }
            let g_right = g_total - g_left;
            let h_right = h_total - h_left;
            if h_left <= 0.0 || h_right <= 0.0 {
                // A float-adjacent pair can midpoint onto a value; such a
                // candidate separates nothing.
                continue;
            }
            if h_left < params.min_child_weight || h_right < params.min_child_weight {
                continue;
            }
            let gain = 0.5
                * (g_left * g_left / (h_left + params.lambda)
                    + g_right * g_right / (h_right + params.lambda)
                    - parent)
                - params.gamma;
            if gain.is_nan() || gain <= 0.0 {
                continue;
            }
            let candidate = (gain, feature, threshold);
            let wins = match best {
                None => true,
                Some((bg, bf, bt)) => {
                    gain > bg || (gain == bg && (feature < bf || (feature == bf && threshold < bt)))
                }
            };
            if wins {
                best = Some(candidate);
            }
        }
    }
    best.map(|(_, feature, threshold)| (feature, threshold))
}

/// Leaf partition of a trained library tree over a row set: sorted row
/// groups with their leaf weights, ordered by first row.
pub fn tree_partition(tree: &Tree, rows: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        groups.entry(tree.leaf_of(row)).or_default().push(i);
    }
    let mut out: Vec<(Vec<usize>, f64)> = groups
        .into_iter()
        .map(|(leaf, mut members)| {
            members.sort_unstable();
            let weight = match &tree.nodes[leaf] {
                ridewait::gbt::TreeNode::Leaf { weight } => *weight,
                _ => unreachable!("leaf_of returns leaves"),
            };
            (members, weight)
        })
        .collect();
    out.sort_by_key(|(members, _)| members[0]);
    out
}

pub fn oracle_partition(tree: &OracleTree) -> Vec<(Vec<usize>, f64)> {
    let mut out: Vec<(Vec<usize>, f64)> = tree
        .leaves
        .iter()
        .map(|l| (l.rows.clone(), l.weight))
        .collect();
    out.sort_by_key(|(members, _)| members[0]);
    out
}

/// A feature matrix over anonymous continuous columns f0..fk.
pub fn plain_matrix(rows: &[Vec<f64>], labels: &[f64]) -> FeatureMatrix {
    let n_cols = rows[0].len();
    let cols: Vec<ColumnDef> = (0..n_cols)
        .map(|j| ColumnDef::new(&format!("f{j}"), ColumnKind::Continuous, Availability::PreOk))
        .collect();
    let schema = FeatureSchema::new(Task::Pre, cols).unwrap();
    FeatureMatrix::new(
        schema,
        (0..rows.len()).map(|i| format!("r{i}")).collect(),
        rows.iter().flatten().copied().collect(),
        labels.to_vec(),
    )
    .unwrap()
}

/// Asserts a library model and the reference model agree tree by tree:
/// identical row partitions, leaf weights within 1e-9.
pub fn assert_models_match(model: &GbtModel, oracle: &OracleModel, rows: &[Vec<f64>], tag: &str) {
    assert_eq!(model.base_score, oracle.base_score, "{tag}: base score");
    assert_eq!(model.trees.len(), oracle.trees.len(), "{tag}: tree count");
    for (k, (tree, otree)) in model.trees.iter().zip(&oracle.trees).enumerate() {
        let ours = tree_partition(tree, rows);
        let theirs = oracle_partition(otree);
        let our_groups: Vec<&Vec<usize>> = ours.iter().map(|(g, _)| g).collect();
        let their_groups: Vec<&Vec<usize>> = theirs.iter().map(|(g, _)| g).collect();
        assert_eq!(our_groups, their_groups, "{tag}: tree {k} row partition");
        for ((_, w_ours), (_, w_theirs)) in ours.iter().zip(&theirs) {
            assert!(
                (w_ours - w_theirs).abs() <= 1e-9,
                "{tag}: tree {k} leaf weight {w_ours} vs {w_theirs}"
            );
        }
    }
}
