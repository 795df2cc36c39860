//! Gradient-boosted regression trees with squared loss, second-order
//! split gain, L2 leaf regularization, and gain-based importance.
//!
//! Candidate thresholds come from quantile binning of the training
//! features; with max_bins at or above the distinct-value count the
//! search is exact greedy. The best-split reduction uses a total order
//! (gain, then feature index, then threshold), so training is
//! deterministic regardless of worker-thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::fsio;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub num_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    /// Minimum gain a split must clear.
    pub gamma: f64,
    /// Minimum hessian sum on each side of a split.
    pub min_child_weight: f64,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            num_trees: 200,
            learning_rate: 0.1,
            max_depth: 6,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            max_bins: 256,
            seed: 42,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.learning_rate > 1.0 {
            errs.push("gbt.learning_rate must be in (0, 1]".to_string());
        }
        if self.max_depth == 0 {
            errs.push("gbt.max_depth must be positive".to_string());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            errs.push("gbt.lambda must be finite and non-negative".to_string());
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            errs.push("gbt.gamma must be finite and non-negative".to_string());
        }
        if !self.min_child_weight.is_finite() || self.min_child_weight < 0.0 {
            errs.push("gbt.min_child_weight must be finite and non-negative".to_string());
        }
        if self.max_bins < 2 {
            errs.push("gbt.max_bins must be at least 2".to_string());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature_index: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// One regression tree; nodes[0] is the root. A row goes left iff its
/// feature value is <= the node threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf the row lands in.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { .. } => return at,
                TreeNode::Internal {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature_index] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_of(row)] {
            TreeNode::Leaf { weight } => *weight,
            TreeNode::Internal { .. } => unreachable!("leaf_of returns a leaf"),
        }
    }

    fn n_internal(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Internal { .. }))
            .count()
    }
}

/// Trained ensemble. predict(x) = base_score + learning_rate * sum of the
/// trees' leaf weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub version: u32,
    pub params: GbtParams,
    pub base_score: f64,
    pub schema_fingerprint: String,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    /// Total accepted split gain per feature; never-split features hold 0.
    pub importance: BTreeMap<String, f64>,
}

impl GbtModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        self.base_score + self.params.learning_rate * sum
    }

    /// Per-row predictions; the schema fingerprint must match training.
    pub fn predict(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        if fm.schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::Schema(format!(
                "feature schema fingerprint {} does not match model fingerprint {}",
                fm.schema.fingerprint(),
                self.schema_fingerprint
            )));
        }
        Ok((0..fm.n_rows()).map(|i| self.predict_row(fm.row(i))).collect())
    }

    /// Gain importance normalized to sum to one, sorted descending with
    /// ties broken by feature index. Empty when no split was ever made.
    pub fn ranked_importance(&self) -> Vec<(String, f64)> {
        let total: f64 = self.importance.values().sum();
        if total <= 0.0 {
            return Vec::new();
        }
        let mut ranked: Vec<(usize, String, f64)> = self
            .feature_names
            .iter()
            .enumerate()
            .map(|(i, name)| (i, name.clone(), self.importance.get(name).copied().unwrap_or(0.0) / total))
            .collect();
        ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        ranked.into_iter().map(|(_, name, gain)| (name, gain)).collect()
    }

    pub fn n_internal_nodes(&self) -> usize {
        self.trees.iter().map(Tree::n_internal).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<GbtModel> {
        let model: GbtModel = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("malformed model JSON: {e}")))?;
        if model.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<GbtModel> {
        GbtModel::from_json(&fsio::read_to_string(path)?)
    }
}

/// Per-feature quantile binning of the training matrix. Thresholds are
/// midpoints of consecutive distinct quantile edges; bin b holds values in
/// (threshold[b-1], threshold[b]].
struct BinnedFeatures {
    /// thresholds[j]: ascending candidate thresholds for feature j.
    thresholds: Vec<Vec<f64>>,
    /// bins[j][i]: bin of row i under feature j.
    bins: Vec<Vec<u16>>,
}

fn quantile_edges(sorted: &[f64], max_bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut distinct: Vec<f64> = Vec::new();
    for &v in sorted {
        if distinct.last() != Some(&v) {
            distinct.push(v);
        }
    }
    if distinct.len() <= max_bins {
        return distinct;
    }
    let mut edges = Vec::with_capacity(max_bins);
    for k in 1..=max_bins {
        let idx = (k * n).div_ceil(max_bins) - 1;
        let v = sorted[idx.min(n - 1)];
        if edges.last() != Some(&v) {
            edges.push(v);
        }
    }
    edges
}

fn bin_features(fm: &FeatureMatrix, max_bins: usize) -> BinnedFeatures {
    let n_features = fm.n_cols();
    let per_feature: Vec<(Vec<f64>, Vec<u16>)> = (0..n_features)
        .into_par_iter()
        .map(|j| {
            let col = fm.column(j);
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let edges = quantile_edges(&sorted, max_bins);
            let thresholds: Vec<f64> = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
            let bins: Vec<u16> = col
                .iter()
                .map(|&v| thresholds.partition_point(|&t| t < v) as u16)
                .collect();
            (thresholds, bins)
        })
        .collect();
    let mut thresholds = Vec::with_capacity(n_features);
    let mut bins = Vec::with_capacity(n_features);
    for (t, b) in per_feature {
        thresholds.push(t);
        bins.push(b);
    }
    BinnedFeatures { thresholds, bins }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitCand {
    gain: f64,
    feature: usize,
    /// Index into the feature's threshold list.
    threshold_index: usize,
    threshold: f64,
}

/// Total order on candidates: higher gain wins; exact gain ties go to the
/// lowest feature index, then the lowest threshold.
fn better(a: &Option<SplitCand>, b: &Option<SplitCand>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => {
            a.gain > b.gain
                || (a.gain == b.gain
                    && (a.feature < b.feature
                        || (a.feature == b.feature && a.threshold < b.threshold)))
        }
        (Some(_), None) => true,
        _ => false,
    }
}

struct TreeBuilder<'a> {
    binned: &'a BinnedFeatures,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<TreeNode>,
    /// (row set, leaf weight) pairs emitted while growing.
    leaf_rows: Vec<(Vec<u32>, f64)>,
    /// Accepted split gain per feature, accumulated in node order.
    gains: Vec<f64>,
}

impl<'a> TreeBuilder<'a> {
    fn grow(&mut self, rows: Vec<u32>, depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&i| self.grad[i as usize]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i as usize]).sum();

        let split = if depth < self.params.max_depth {
            self.best_split(&rows)
        } else {
            None
        };

        match split {
            Some(cand) => {
                let (left_rows, right_rows) = self.partition(&rows, cand);
                self.gains[cand.feature] += cand.gain;
                let at = self.nodes.len();
                self.nodes.push(TreeNode::Internal {
                    feature_index: cand.feature,
                    threshold: cand.threshold,
                    left: 0,
                    right: 0,
                });
                let left = self.grow(left_rows, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                if let TreeNode::Internal {
                    left: l, right: r, ..
                } = &mut self.nodes[at]
                {
                    *l = left;
                    *r = right;
                }
                at
            }
            None => {
                let weight = -g / (h + self.params.lambda);
                let at = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { weight });
                self.leaf_rows.push((rows, weight));
                at
            }
        }
    }

    fn best_split(&self, rows: &[u32]) -> Option<SplitCand> {
        let lambda = self.params.lambda;
        let gamma = self.params.gamma;
        let mcw = self.params.min_child_weight;

        (0..self.binned.thresholds.len())
            .into_par_iter()
            .map(|feature| {
                let thresholds = &self.binned.thresholds[feature];
                if thresholds.is_empty() {
                    return None;
                }
                let bins = &self.binned.bins[feature];
                let n_bins = thresholds.len() + 1;
                let mut g_hist = vec![0.0f64; n_bins];
                let mut h_hist = vec![0.0f64; n_bins];
                for &i in rows {
                    let b = bins[i as usize] as usize;
                    g_hist[b] += self.grad[i as usize];
                    h_hist[b] += self.hess[i as usize];
                }
                // Totals come from the same bin-order accumulation as the
                // prefix sums below, so an empty side is exactly zero.
                let g_total: f64 = g_hist.iter().sum();
                let h_total: f64 = h_hist.iter().sum();
                let parent_score = g_total * g_total / (h_total + lambda);

                let mut best: Option<SplitCand> = None;
                let mut g_left = 0.0;
                let mut h_left = 0.0;
                for t in 0..thresholds.len() {
                    g_left += g_hist[t];
                    h_left += h_hist[t];
                    let g_right = g_total - g_left;
                    let h_right = h_total - h_left;
                    if h_left <= 0.0 {
                        continue;
                    }
                    if h_right <= 0.0 {
                        // Prefix sums only grow; no rows remain rightward.
                        break;
                    }
                    if h_left < mcw || h_right < mcw {
                        continue;
                    }
                    let gain = 0.5
                        * (g_left * g_left / (h_left + lambda)
                            + g_right * g_right / (h_right + lambda)
                            - parent_score)
                        - gamma;
                    if gain > 0.0 {
                        let cand = Some(SplitCand {
                            gain,
                            feature,
                            threshold_index: t,
                            threshold: thresholds[t],
                        });
                        if better(&cand, &best) {
                            best = cand;
                        }
                    }
                }
                best
            })
            .reduce(|| None, |a, b| if better(&b, &a) { b } else { a })
    }

    fn partition(&self, rows: &[u32], cand: SplitCand) -> (Vec<u32>, Vec<u32>) {
        let bins = &self.binned.bins[cand.feature];
        let limit = cand.threshold_index as u16;
        let mut left = Vec::new();
        let mut right = Vec::new();
        for &i in rows {
            if bins[i as usize] <= limit {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        (left, right)
    }
}

/// Trains the ensemble on squared loss: per-row gradient is
/// prediction - label and the hessian is one, so leaf weights reduce to
/// mean residuals shrunk by lambda.
pub fn train(fm: &FeatureMatrix, params: &GbtParams) -> Result<GbtModel> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let n = fm.n_rows();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty feature matrix".to_string()));
    }

    let base_score = fm.labels.iter().sum::<f64>() / n as f64;
    let binned = bin_features(fm, params.max_bins);

    let mut preds = vec![base_score; n];
    let mut grad = vec![0.0f64; n];
    let hess = vec![1.0f64; n];
    let mut gains = vec![0.0f64; fm.n_cols()];
    let mut trees = Vec::with_capacity(params.num_trees);

    for _ in 0..params.num_trees {
        for i in 0..n {
            grad[i] = preds[i] - fm.labels[i];
        }
        let mut builder = TreeBuilder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
            nodes: Vec::new(),
            leaf_rows: Vec::new(),
            gains: vec![0.0; fm.n_cols()],
        };
        builder.grow((0..n as u32).collect(), 0);
        for (rows, weight) in &builder.leaf_rows {
            let delta = params.learning_rate * weight;
            for &i in rows {
                preds[i as usize] += delta;
            }
        }
        for (j, g) in builder.gains.iter().enumerate() {
            gains[j] += g;
        }
        trees.push(Tree {
            nodes: builder.nodes,
        });
    }

    let feature_names: Vec<String> = fm.schema.names().iter().map(|s| s.to_string()).collect();
    let importance: BTreeMap<String, f64> = feature_names
        .iter()
        .cloned()
        .zip(gains.iter().copied())
        .collect();
    Ok(GbtModel {
        version: MODEL_VERSION,
        params: params.clone(),
        base_score,
        schema_fingerprint: fm.schema.fingerprint(),
        feature_names,
        trees,
        importance,
    })
}
