//! Interaction features: latent affinities over spatiotemporal key pairs,
//! 3D coordinate decomposition, grid/geographic distances, driver
//! preference affinities, and k-means region clusters.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Availability, ColumnDef, ColumnKind, Task};
use crate::trip::{time_slot_of, GeoPoint, LabeledTrip, RegionGrid, SlotConfig};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Unit-sphere decomposition of a coordinate:
/// (cos lat * cos lng, cos lat * sin lng, sin lat).
pub fn decompose_3d(p: GeoPoint) -> (f64, f64, f64) {
    let lat = p.lat.to_radians();
    let lng = p.lng.to_radians();
    (lat.cos() * lng.cos(), lat.cos() * lng.sin(), lat.sin())
}

/// Great-circle distance between two points in kilometers.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat.to_radians();
    let lat_b = b.lat.to_radians();
    let d_lat = (b.lat - a.lat).to_radians() / 2.0;
    let d_lng = (b.lng - a.lng).to_radians() / 2.0;
    let h = d_lat.sin().powi(2) + lat_a.cos() * lat_b.cos() * d_lng.sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin() * EARTH_RADIUS_KM
}

/// Grid-cell Manhattan and Euclidean distances plus the great-circle
/// distance between cell centroids.
pub fn region_distances(a: u32, b: u32, grid: &RegionGrid) -> Result<(f64, f64, f64)> {
    let (row_a, col_a) = grid.row_col(a)?;
    let (row_b, col_b) = grid.row_col(b)?;
    let d_row = (row_a as f64 - row_b as f64).abs();
    let d_col = (col_a as f64 - col_b as f64).abs();
    let manhattan = d_row + d_col;
    let euclidean = (d_row * d_row + d_col * d_col).sqrt();
    let geo_km = haversine_km(grid.centroid(a)?, grid.centroid(b)?);
    Ok((manhattan, euclidean, geo_km))
}

/// The user/item pairings the collaborative-filtering features are built
/// over. The first three are available pre-request; the vehicle- and
/// driver-keyed ones require an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfSpec {
    /// Origin region -> destination region.
    OriginDest,
    /// Origin region -> (destination region, rush-hour slot).
    OriginDestRush,
    /// Destination region -> (origin region, rush-hour slot).
    DestOriginRush,
    /// Vehicle region -> (origin region, rush-hour slot).
    VehicleOriginRush,
    /// Driver -> (origin region, destination region).
    DriverOd,
    /// Driver -> (origin region, destination region, rush-hour slot).
    DriverOdRush,
}

pub const ALL_CF_SPECS: [CfSpec; 6] = [
    CfSpec::OriginDest,
    CfSpec::OriginDestRush,
    CfSpec::DestOriginRush,
    CfSpec::VehicleOriginRush,
    CfSpec::DriverOd,
    CfSpec::DriverOdRush,
];

impl CfSpec {
    pub fn pre_eligible(&self) -> bool {
        matches!(
            self,
            CfSpec::OriginDest | CfSpec::OriginDestRush | CfSpec::DestOriginRush
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            CfSpec::OriginDest => "od",
            CfSpec::OriginDestRush => "od_rush",
            CfSpec::DestOriginRush => "do_rush",
            CfSpec::VehicleOriginRush => "vo_rush",
            CfSpec::DriverOd => "driver_od",
            CfSpec::DriverOdRush => "driver_od_rush",
        }
    }

    /// (user key, item key) realized by one trip under this pairing.
    pub fn keys_of(&self, trip: &LabeledTrip, slots: &SlotConfig) -> (CfKey, CfKey) {
        let rush = time_slot_of(trip.record.order_time, slots).slot as u8;
        let (o, d, v) = (trip.o_region, trip.d_region, trip.v_region);
        match self {
            CfSpec::OriginDest => (CfKey::Region(o), CfKey::Region(d)),
            CfSpec::OriginDestRush => (CfKey::Region(o), CfKey::RegionSlot(d, rush)),
            CfSpec::DestOriginRush => (CfKey::Region(d), CfKey::RegionSlot(o, rush)),
            CfSpec::VehicleOriginRush => (CfKey::Region(v), CfKey::RegionSlot(o, rush)),
            CfSpec::DriverOd => (
                CfKey::Driver(trip.record.driver_id.clone()),
                CfKey::RegionPair(o, d),
            ),
            CfSpec::DriverOdRush => (
                CfKey::Driver(trip.record.driver_id.clone()),
                CfKey::RegionPairSlot(o, d, rush),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CfKey {
    Region(u32),
    RegionSlot(u32, u8),
    RegionPair(u32, u32),
    RegionPairSlot(u32, u32, u8),
    Driver(String),
}

/// Sparse non-negative co-occurrence counts over indexed user/item keys.
/// Stored entries are always >= 1; absent entries mean zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub spec: CfSpec,
    users: Vec<CfKey>,
    items: Vec<CfKey>,
    /// (user row, item col, count), sorted by (row, col).
    counts: Vec<(u32, u32, u32)>,
    #[serde(skip)]
    user_lookup: HashMap<CfKey, u32>,
    #[serde(skip)]
    item_lookup: HashMap<CfKey, u32>,
    #[serde(skip)]
    count_lookup: HashMap<(u32, u32), u32>,
}

impl CooccurrenceMatrix {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_entries(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn entries(&self) -> &[(u32, u32, u32)] {
        &self.counts
    }

    pub fn user_row(&self, key: &CfKey) -> Option<u32> {
        self.user_lookup.get(key).copied()
    }

    pub fn item_col(&self, key: &CfKey) -> Option<u32> {
        self.item_lookup.get(key).copied()
    }

    /// Count for a (user, item) key pair; unseen pairs count zero.
    pub fn count_of(&self, user: &CfKey, item: &CfKey) -> u32 {
        match (self.user_row(user), self.item_col(item)) {
            (Some(u), Some(i)) => self.count_lookup.get(&(u, i)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    fn rebuild_lookups(&mut self) {
        self.user_lookup = self
            .users
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32))
            .collect();
        self.item_lookup = self
            .items
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32))
            .collect();
        self.count_lookup = self.counts.iter().map(|&(u, i, c)| ((u, i), c)).collect();
    }
}

/// Counts how many train trips realize each (user key, item key) pair
/// under the given pairing. Key indices are assigned in first-seen order.
pub fn build_cooccurrence(
    train: &[LabeledTrip],
    spec: CfSpec,
    slots: &SlotConfig,
) -> CooccurrenceMatrix {
    let mut m = CooccurrenceMatrix {
        spec,
        users: Vec::new(),
        items: Vec::new(),
        counts: Vec::new(),
        user_lookup: HashMap::new(),
        item_lookup: HashMap::new(),
        count_lookup: HashMap::new(),
    };
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for trip in train {
        let (ukey, ikey) = spec.keys_of(trip, slots);
        let u = *m.user_lookup.entry(ukey.clone()).or_insert_with(|| {
            m.users.push(ukey);
            (m.users.len() - 1) as u32
        });
        let i = *m.item_lookup.entry(ikey.clone()).or_insert_with(|| {
            m.items.push(ikey);
            (m.items.len() - 1) as u32
        });
        *counts.entry((u, i)).or_default() += 1;
    }
    m.counts = counts.iter().map(|(&(u, i), &c)| (u, i, c)).collect();
    m.counts.sort_unstable();
    m.count_lookup = counts;
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfParams {
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for MfParams {
    fn default() -> Self {
        MfParams {
            rank: 8,
            epochs: 50,
            learning_rate: 0.05,
            reg: 0.01,
            seed: 13,
        }
    }
}

impl MfParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.rank == 0 {
            errs.push("interactions.rank must be positive".to_string());
        }
        if self.epochs == 0 {
            errs.push("interactions.epochs must be positive".to_string());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            errs.push("interactions.learning_rate must be positive".to_string());
        }
        if !self.reg.is_finite() || self.reg < 0.0 {
            errs.push("interactions.reg must be non-negative".to_string());
        }
        errs
    }
}

/// Biasless matrix factorization of log1p counts around a global mean.
/// affinity(u, i) = global_mean + dot(user_vecs[u], item_vecs[i]); unknown
/// keys fall back to the global mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentFactorModel {
    pub rank: usize,
    user_vecs: Vec<f64>,
    item_vecs: Vec<f64>,
    pub global_mean: f64,
    pub train_rmse_history: Vec<f64>,
}

impl LatentFactorModel {
    fn user_vec(&self, u: usize) -> &[f64] {
        &self.user_vecs[u * self.rank..(u + 1) * self.rank]
    }

    fn item_vec(&self, i: usize) -> &[f64] {
        &self.item_vecs[i * self.rank..(i + 1) * self.rank]
    }

    pub fn affinity_by_index(&self, user: Option<u32>, item: Option<u32>) -> f64 {
        match (user, item) {
            (Some(u), Some(i)) => {
                let dot: f64 = self
                    .user_vec(u as usize)
                    .iter()
                    .zip(self.item_vec(i as usize))
                    .map(|(a, b)| a * b)
                    .sum();
                self.global_mean + dot
            }
            _ => self.global_mean,
        }
    }
}

/// Trains the factorization by SGD on squared reconstruction error of
/// log1p counts with L2 regularization. Visitation order per epoch is a
/// seeded permutation, so results are bit-reproducible.
pub fn train_mf(m: &CooccurrenceMatrix, params: &MfParams) -> Result<LatentFactorModel> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if m.is_empty() {
        return Err(Error::Data(format!(
            "cannot factorize empty co-occurrence matrix for spec {}",
            m.spec.name()
        )));
    }

    let rank = params.rank;
    let targets: Vec<f64> = m.counts.iter().map(|&(_, _, c)| (c as f64).ln_1p()).collect();
    let global_mean = targets.iter().sum::<f64>() / targets.len() as f64;

    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let scale = 0.01 / (rank as f64).sqrt();
    let mut user_vecs: Vec<f64> = (0..m.n_users() * rank)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    let mut item_vecs: Vec<f64> = (0..m.n_items() * rank)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();

    let lr = params.learning_rate;
    let reg = params.reg;
    let mut order: Vec<usize> = (0..m.counts.len()).collect();
    let mut u_old = vec![0.0; rank];
    let mut history = Vec::with_capacity(params.epochs);
    for _epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for &e in &order {
            let (u, i, _) = m.counts[e];
            let target = targets[e];
            let us = u as usize * rank;
            let is = i as usize * rank;
            let dot: f64 = (0..rank).map(|r| user_vecs[us + r] * item_vecs[is + r]).sum();
            let err = global_mean + dot - target;
            u_old.copy_from_slice(&user_vecs[us..us + rank]);
            for r in 0..rank {
                user_vecs[us + r] -= lr * (err * item_vecs[is + r] + reg * user_vecs[us + r]);
                item_vecs[is + r] -= lr * (err * u_old[r] + reg * item_vecs[is + r]);
            }
        }
        let mut sq_sum = 0.0;
        for (e, &(u, i, _)) in m.counts.iter().enumerate() {
            let us = u as usize * rank;
            let is = i as usize * rank;
            let dot: f64 = (0..rank).map(|r| user_vecs[us + r] * item_vecs[is + r]).sum();
            let err = global_mean + dot - targets[e];
            sq_sum += err * err;
        }
        history.push((sq_sum / targets.len() as f64).sqrt());
    }

    let model = LatentFactorModel {
        rank,
        user_vecs,
        item_vecs,
        global_mean,
        train_rmse_history: history,
    };
    if model.user_vecs.iter().chain(model.item_vecs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Internal(format!(
            "matrix factorization diverged for spec {} (non-finite factors)",
            m.spec.name()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        KmeansParams {
            k: 10,
            max_iter: 100,
            seed: 17,
        }
    }
}

impl KmeansParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push("interactions.kmeans_k must be positive".to_string());
        }
        if self.max_iter == 0 {
            errs.push("interactions.kmeans_max_iter must be positive".to_string());
        }
        errs
    }
}

/// K-means clusters over active regions, fit on per-region vectors of
/// [lat, lng, log1p(origin count)], each dimension min-max normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionClusterModel {
    pub k: usize,
    /// Centroids in the normalized 3D feature space.
    pub centroids: Vec<[f64; 3]>,
    assignment: Vec<(u32, u32)>,
    mins: [f64; 3],
    maxs: [f64; 3],
    pub inertia_history: Vec<f64>,
    #[serde(skip)]
    lookup: HashMap<u32, u32>,
}

impl RegionClusterModel {
    /// Cluster id for a region. Regions unseen in training are assigned to
    /// the nearest centroid using a zero origin count.
    pub fn cluster_of(&self, region: u32, grid: &RegionGrid) -> Result<u32> {
        if let Some(&c) = self.lookup.get(&region) {
            return Ok(c);
        }
        let centroid = grid.centroid(region)?;
        let v = self.normalize([centroid.lat, centroid.lng, 0.0]);
        Ok(nearest_centroid(&v, &self.centroids).0 as u32)
    }

    fn normalize(&self, raw: [f64; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for d in 0..3 {
            let span = self.maxs[d] - self.mins[d];
            v[d] = if span > 0.0 {
                (raw[d] - self.mins[d]) / span
            } else {
                0.0
            };
        }
        v
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self.assignment.iter().copied().collect();
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Index of the nearest centroid and its squared distance; distance ties
/// resolve to the lowest cluster id.
fn nearest_centroid(v: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist_sq(v, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding over the active regions of the
/// train set (those with at least one origin).
pub fn fit_region_clusters(
    train: &[LabeledTrip],
    grid: &RegionGrid,
    params: &KmeansParams,
) -> Result<RegionClusterModel> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let mut origin_counts: HashMap<u32, u64> = HashMap::new();
    for t in train {
        *origin_counts.entry(t.o_region).or_default() += 1;
    }
    let mut regions: Vec<u32> = origin_counts.keys().copied().collect();
    regions.sort_unstable();
    let k = params.k;
    if regions.len() < k {
        return Err(Error::Config(format!(
            "k-means needs at least k={k} active regions, found {}",
            regions.len()
        )));
    }

    let raw: Vec<[f64; 3]> = regions
        .iter()
        .map(|&r| {
            let c = grid.centroid(r).expect("active region id is valid");
            [c.lat, c.lng, (origin_counts[&r] as f64).ln_1p()]
        })
        .collect();
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    for v in &raw {
        for d in 0..3 {
            mins[d] = mins[d].min(v[d]);
            maxs[d] = maxs[d].max(v[d]);
        }
    }
    let points: Vec<[f64; 3]> = raw
        .iter()
        .map(|v| {
            let mut p = [0.0; 3];
            for d in 0..3 {
                let span = maxs[d] - mins[d];
                p[d] = if span > 0.0 { (v[d] - mins[d]) / span } else { 0.0 };
            }
            p
        })
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_pp_seed(&points, k, &mut rng);

    let mut assignment = vec![0usize; points.len()];
    let mut inertia_history = Vec::new();
    for _iter in 0..params.max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed && inertia_history.len() > 1 {
            break;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for d in 0..3 {
                sums[c][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..3 {
                    centroids[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
    }

    let mut model = RegionClusterModel {
        k,
        centroids,
        assignment: regions
            .iter()
            .zip(&assignment)
            .map(|(&r, &c)| (r, c as u32))
            .collect(),
        mins,
        maxs,
        inertia_history,
        lookup: HashMap::new(),
    };
    model.rebuild_lookup();
    Ok(model)
}

fn kmeans_pp_seed(points: &[[f64; 3]], k: usize, rng: &mut ChaCha20Rng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// One collaborative-filtering feature family: the co-occurrence counts it
/// was built from plus the factorization over them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfModel {
    pub matrix: CooccurrenceMatrix,
    pub model: LatentFactorModel,
}

impl CfModel {
    pub fn affinity(&self, user: &CfKey, item: &CfKey) -> f64 {
        self.model
            .affinity_by_index(self.matrix.user_row(user), self.matrix.item_col(item))
    }

    pub fn log_count(&self, user: &CfKey, item: &CfKey) -> f64 {
        (self.matrix.count_of(user, item) as f64).ln_1p()
    }
}

/// All fitted interaction models, in the fixed pairing order of
/// [ALL_CF_SPECS] plus the region cluster model. The serialized form
/// carries the fitting parameters and a fingerprint over them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionModels {
    pub mf_params: MfParams,
    pub kmeans_params: KmeansParams,
    pub fingerprint: String,
    cf: Vec<CfModel>,
    pub clusters: RegionClusterModel,
}

impl InteractionModels {
    pub fn fit(
        train: &[LabeledTrip],
        grid: &RegionGrid,
        slots: &SlotConfig,
        mf: &MfParams,
        kmeans: &KmeansParams,
    ) -> Result<InteractionModels> {
        let mut cf = Vec::with_capacity(ALL_CF_SPECS.len());
        for (i, spec) in ALL_CF_SPECS.iter().enumerate() {
            let matrix = build_cooccurrence(train, *spec, slots);
            // Per-spec seed offset keeps the factorizations independent.
            let params = MfParams {
                seed: mf.seed.wrapping_add(i as u64),
                ..mf.clone()
            };
            let model = train_mf(&matrix, &params)?;
            cf.push(CfModel { matrix, model });
        }
        let clusters = fit_region_clusters(train, grid, kmeans)?;
        Ok(InteractionModels {
            mf_params: mf.clone(),
            kmeans_params: kmeans.clone(),
            fingerprint: fit_fingerprint(grid, slots, mf, kmeans)?,
            cf,
            clusters,
        })
    }

    pub fn cf(&self, spec: CfSpec) -> &CfModel {
        let idx = ALL_CF_SPECS
            .iter()
            .position(|s| *s == spec)
            .expect("spec is a member of ALL_CF_SPECS");
        &self.cf[idx]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<InteractionModels> {
        let mut models: InteractionModels = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("invalid interaction models JSON: {e}")))?;
        if models.cf.len() != ALL_CF_SPECS.len() {
            return Err(Error::Data(format!(
                "interaction models JSON holds {} CF families, expected {}",
                models.cf.len(),
                ALL_CF_SPECS.len()
            )));
        }
        for (cf, spec) in models.cf.iter().zip(ALL_CF_SPECS) {
            if cf.matrix.spec != spec {
                return Err(Error::Data(format!(
                    "interaction models JSON out of order: found {}, expected {}",
                    cf.matrix.spec.name(),
                    spec.name()
                )));
            }
        }
        for cf in &mut models.cf {
            cf.matrix.rebuild_lookups();
        }
        models.clusters.rebuild_lookup();
        Ok(models)
    }
}

/// Stable hash of the fit configuration, embedded in the serialized
/// models so artifacts are self-describing.
fn fit_fingerprint(
    grid: &RegionGrid,
    slots: &SlotConfig,
    mf: &MfParams,
    kmeans: &KmeansParams,
) -> Result<String> {
    let doc = serde_json::json!({
        "grid": grid,
        "slots": slots,
        "mf": mf,
        "kmeans": kmeans,
    });
    let text = serde_json::to_string(&doc)?;
    Ok(format!("{:016x}", crate::features::fnv1a64(text.as_bytes())))
}

/// Interaction columns appended to the base schema for a task.
pub fn interaction_columns(task: Task) -> Vec<ColumnDef> {
    use Availability::{PostOnly, PreOk};
    use ColumnKind::{Continuous, OrdinalInt};
    let mut cols = Vec::new();
    for spec in [CfSpec::OriginDest, CfSpec::OriginDestRush, CfSpec::DestOriginRush] {
        cols.push(ColumnDef::new(&format!("cf_{}_affinity", spec.name()), Continuous, PreOk));
        cols.push(ColumnDef::new(&format!("cf_{}_log_count", spec.name()), Continuous, PreOk));
    }
    for name in ["o_x", "o_y", "o_z", "d_x", "d_y", "d_z"] {
        cols.push(ColumnDef::new(name, Continuous, PreOk));
    }
    for name in ["od_manhattan_cells", "od_euclidean_cells", "od_geo_km"] {
        cols.push(ColumnDef::new(name, Continuous, PreOk));
    }
    cols.push(ColumnDef::new("od_log_freq", Continuous, PreOk));
    cols.push(ColumnDef::new("od_rush_log_freq", Continuous, PreOk));
    cols.push(ColumnDef::new("o_cluster", OrdinalInt, PreOk));
    cols.push(ColumnDef::new("d_cluster", OrdinalInt, PreOk));
    if task == Task::Post {
        cols.push(ColumnDef::new("cf_vo_rush_affinity", Continuous, PostOnly));
        for name in ["v_x", "v_y", "v_z"] {
            cols.push(ColumnDef::new(name, Continuous, PostOnly));
        }
        for name in ["ov_manhattan_cells", "ov_euclidean_cells", "ov_geo_km"] {
            cols.push(ColumnDef::new(name, Continuous, PostOnly));
        }
        cols.push(ColumnDef::new("cf_driver_od_affinity", Continuous, PostOnly));
        cols.push(ColumnDef::new("cf_driver_od_rush_affinity", Continuous, PostOnly));
        cols.push(ColumnDef::new("v_cluster", OrdinalInt, PostOnly));
    }
    cols
}

/// Interaction feature extension for one trip. Pre-request rows use only
/// vehicle- and driver-independent families; unknown keys fall back to the
/// global mean (affinities), zero (counts), or nearest centroid (clusters).
pub fn featurize_interactions(
    trip: &LabeledTrip,
    task: Task,
    models: &InteractionModels,
    grid: &RegionGrid,
    slots: &SlotConfig,
) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(if task == Task::Post { 29 } else { 19 });
    for spec in [CfSpec::OriginDest, CfSpec::OriginDestRush, CfSpec::DestOriginRush] {
        let (ukey, ikey) = spec.keys_of(trip, slots);
        let cf = models.cf(spec);
        row.push(cf.affinity(&ukey, &ikey));
        row.push(cf.log_count(&ukey, &ikey));
    }
    let (ox, oy, oz) = decompose_3d(trip.record.pickup_point);
    let (dx, dy, dz) = decompose_3d(trip.record.dropoff_point);
    row.extend([ox, oy, oz, dx, dy, dz]);
    let (man, euc, geo) = region_distances(trip.o_region, trip.d_region, grid)?;
    row.extend([man, euc, geo]);
    // Driver-anonymous origin-destination frequencies.
    {
        let od = models.cf(CfSpec::OriginDest);
        let (u, i) = CfSpec::OriginDest.keys_of(trip, slots);
        row.push(od.log_count(&u, &i));
        let odr = models.cf(CfSpec::OriginDestRush);
        let (u, i) = CfSpec::OriginDestRush.keys_of(trip, slots);
        row.push(odr.log_count(&u, &i));
    }
    row.push(models.clusters.cluster_of(trip.o_region, grid)? as f64);
    row.push(models.clusters.cluster_of(trip.d_region, grid)? as f64);

    if task == Task::Post {
        let (ukey, ikey) = CfSpec::VehicleOriginRush.keys_of(trip, slots);
        row.push(models.cf(CfSpec::VehicleOriginRush).affinity(&ukey, &ikey));
        let (vx, vy, vz) = decompose_3d(trip.record.dispatch_point);
        row.extend([vx, vy, vz]);
        let (man, euc, geo) = region_distances(trip.o_region, trip.v_region, grid)?;
        row.extend([man, euc, geo]);
        for spec in [CfSpec::DriverOd, CfSpec::DriverOdRush] {
            let (ukey, ikey) = spec.keys_of(trip, slots);
            row.push(models.cf(spec).affinity(&ukey, &ikey));
        }
        row.push(models.clusters.cluster_of(trip.v_region, grid)? as f64);
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{make_trip, point_in_region, test_grid, TripSpec};
    use proptest::prelude::*;

    fn od_trip(grid: &RegionGrid, id: usize, o: u32, d: u32) -> LabeledTrip {
        make_trip(
            grid,
            TripSpec {
                order_id: format!("o{id}"),
                driver_id: format!("d{}", id % 3),
                pickup: point_in_region(grid, o, 0.5, 0.5),
                dropoff: point_in_region(grid, d, 0.5, 0.5),
                dispatch: point_in_region(grid, o, 0.2, 0.2),
                ..Default::default()
            },
        )
    }

    #[test]
    fn cooccurrence_counts_repeated_pairs() {
        let grid = test_grid();
        let slots = SlotConfig::default();
        let trips: Vec<_> = (0..3).map(|i| od_trip(&grid, i, 5, 9)).collect();
        let m = build_cooccurrence(&trips, CfSpec::OriginDest, &slots);
        assert_eq!(m.count_of(&CfKey::Region(5), &CfKey::Region(9)), 3);
        assert_eq!(m.n_entries(), 1);
    }

    #[test]
    fn cooccurrence_empty_train_is_empty() {
        let slots = SlotConfig::default();
        let m = build_cooccurrence(&[], CfSpec::OriginDest, &slots);
        assert!(m.is_empty());
        assert_eq!(m.count_of(&CfKey::Region(0), &CfKey::Region(1)), 0);
    }

    #[test]
    fn cooccurrence_matches_brute_force_histogram() {
        use rand::{Rng, SeedableRng};
        let grid = test_grid();
        let slots = SlotConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let trips: Vec<_> = (0..300)
            .map(|i| od_trip(&grid, i, rng.gen_range(0..6), rng.gen_range(0..6)))
            .collect();
        let m = build_cooccurrence(&trips, CfSpec::OriginDest, &slots);

        let mut histogram: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &trips {
            *histogram.entry((t.o_region, t.d_region)).or_default() += 1;
        }
        let total: u32 = m.entries().iter().map(|&(_, _, c)| c).sum();
        assert_eq!(total as usize, trips.len());
        for (&(o, d), &c) in &histogram {
            assert_eq!(m.count_of(&CfKey::Region(o), &CfKey::Region(d)), c);
        }
        assert_eq!(m.n_entries(), histogram.len());
    }

    /// Rank-1 synthetic counts: counts[u][i] = round(expm1(a_u * b_i)).
    fn rank1_matrix(n_users: usize, n_items: usize) -> (CooccurrenceMatrix, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..n_users).map(|_| rng.gen_range(0.6..2.2)).collect();
        let b: Vec<f64> = (0..n_items).map(|_| rng.gen_range(0.6..2.2)).collect();
        let mut counts = Vec::new();
        let mut targets = Vec::new();
        for (u, &au) in a.iter().enumerate() {
            for (i, &bi) in b.iter().enumerate() {
                let c = (au * bi).exp_m1().round() as u32;
                if c >= 1 {
                    counts.push((u as u32, i as u32, c));
                    targets.push((c as f64).ln_1p());
                }
            }
        }
        let mut m = CooccurrenceMatrix {
            spec: CfSpec::OriginDest,
            users: (0..n_users as u32).map(CfKey::Region).collect(),
            items: (0..n_items as u32).map(CfKey::Region).collect(),
            counts,
            user_lookup: HashMap::new(),
            item_lookup: HashMap::new(),
            count_lookup: HashMap::new(),
        };
        m.rebuild_lookups();
        (m, targets)
    }

    #[test]
    fn mf_fits_rank1_counts() {
        let (m, targets) = rank1_matrix(12, 10);
        let model = train_mf(&m, &MfParams::default()).unwrap();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let std =
            (targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64)
                .sqrt();
        let final_rmse = *model.train_rmse_history.last().unwrap();
        assert!(
            final_rmse < 0.1 * std,
            "final RMSE {final_rmse} not below 0.1 * std {std}"
        );
    }

    #[test]
    fn mf_rmse_does_not_increase_overall() {
        let (m, _) = rank1_matrix(12, 9);
        let model = train_mf(&m, &MfParams::default()).unwrap();
        let first = model.train_rmse_history[0];
        let last = *model.train_rmse_history.last().unwrap();
        assert!(last <= first, "RMSE rose from {first} to {last}");
    }

    #[test]
    fn mf_single_entry_fits_exactly() {
        let mut m = CooccurrenceMatrix {
            spec: CfSpec::OriginDest,
            users: vec![CfKey::Region(1)],
            items: vec![CfKey::Region(2)],
            counts: vec![(0, 0, 7)],
            user_lookup: HashMap::new(),
            item_lookup: HashMap::new(),
            count_lookup: HashMap::new(),
        };
        m.rebuild_lookups();
        let model = train_mf(&m, &MfParams::default()).unwrap();
        let affinity = model.affinity_by_index(Some(0), Some(0));
        assert!((affinity - (7.0f64).ln_1p()).abs() < 1e-3);
    }

    #[test]
    fn mf_unknown_key_falls_back_to_global_mean() {
        let (m, _) = rank1_matrix(5, 5);
        let model = train_mf(&m, &MfParams::default()).unwrap();
        assert_eq!(model.affinity_by_index(None, Some(0)), model.global_mean);
        assert_eq!(model.affinity_by_index(Some(0), None), model.global_mean);
    }

    #[test]
    fn mf_rejects_bad_params() {
        let (m, _) = rank1_matrix(3, 3);
        for params in [
            MfParams { rank: 0, ..Default::default() },
            MfParams { epochs: 0, ..Default::default() },
            MfParams { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(matches!(train_mf(&m, &params), Err(Error::Config(_))));
        }
    }

    #[test]
    fn decompose_axes() {
        let (x, y, z) = decompose_3d(GeoPoint { lat: 0.0, lng: 0.0 });
        assert_eq!((x, y, z), (1.0, 0.0, 0.0));

        let (x, y, z) = decompose_3d(GeoPoint { lat: 90.0, lng: 45.0 });
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12 && (z - 1.0).abs() < 1e-12);

        let (x, y, z) = decompose_3d(GeoPoint { lat: 0.0, lng: 90.0 });
        assert!(x.abs() < 1e-12 && (y - 1.0).abs() < 1e-12 && z.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decompose_unit_norm(lat in -90.0..90.0f64, lng in -180.0..180.0f64) {
            let (x, y, z) = decompose_3d(GeoPoint { lat, lng });
            prop_assert!((x * x + y * y + z * z - 1.0).abs() < 1e-9);
        }

        #[test]
        fn haversine_symmetric_and_positive(
            lat_a in -80.0..80.0f64, lng_a in -170.0..170.0f64,
            lat_b in -80.0..80.0f64, lng_b in -170.0..170.0f64,
        ) {
            let a = GeoPoint { lat: lat_a, lng: lng_a };
            let b = GeoPoint { lat: lat_b, lng: lng_b };
            let d_ab = haversine_km(a, b);
            let d_ba = haversine_km(b, a);
            prop_assert!((d_ab - d_ba).abs() < 1e-9);
            if (lat_a, lng_a) == (lat_b, lng_b) {
                prop_assert_eq!(d_ab, 0.0);
            } else {
                prop_assert!(d_ab > 0.0);
            }
        }
    }

    #[test]
    fn region_distance_examples() {
        let grid = RegionGrid::new((0.0, 0.0, 10.0, 10.0), 10, 10).unwrap();
        assert_eq!(region_distances(33, 33, &grid).unwrap(), (0.0, 0.0, 0.0));

        // Cells (row 1, col 2) and (row 4, col 6): a 3-4-5 triangle.
        let a = 12;
        let b = 46;
        let (man, euc, _) = region_distances(a, b, &grid).unwrap();
        assert_eq!(man, 7.0);
        assert_eq!(euc, 5.0);
    }

    #[test]
    fn equator_degree_is_111_19_km() {
        // Two cells whose centroids sit at (0, 0) and (0, 1) on the equator.
        let grid = RegionGrid::new((-0.5, -0.5, 0.5, 1.5), 1, 2).unwrap();
        let (_, _, geo) = region_distances(0, 1, &grid).unwrap();
        assert!((geo - 111.19).abs() <= 0.01, "geo {geo}");
    }

    #[test]
    fn region_distance_invalid_id_errors() {
        let grid = RegionGrid::new((0.0, 0.0, 1.0, 1.0), 2, 2).unwrap();
        assert!(matches!(
            region_distances(0, 4, &grid),
            Err(Error::OutOfBounds(_))
        ));
    }

    fn clustered_trips(grid: &RegionGrid) -> Vec<LabeledTrip> {
        // Two well-separated groups of origin regions: rows 0-1 (south-west)
        // and rows 18-19 (north-east).
        let mut trips = Vec::new();
        let mut id = 0;
        for &region in &[0u32, 1, 2, 26, 27] {
            for _ in 0..4 {
                trips.push(od_trip(grid, id, region, 12));
                id += 1;
            }
        }
        for &region in &[472u32, 473, 474, 497, 498] {
            for _ in 0..4 {
                trips.push(od_trip(grid, id, region, 12));
                id += 1;
            }
        }
        trips
    }

    #[test]
    fn kmeans_recovers_planted_partition() {
        let grid = test_grid();
        let trips = clustered_trips(&grid);
        let params = KmeansParams { k: 2, ..Default::default() };
        let model = fit_region_clusters(&trips, &grid, &params).unwrap();
        let south: Vec<u32> = [0u32, 1, 2, 26, 27]
            .iter()
            .map(|&r| model.cluster_of(r, &grid).unwrap())
            .collect();
        let north: Vec<u32> = [472u32, 473, 474, 497, 498]
            .iter()
            .map(|&r| model.cluster_of(r, &grid).unwrap())
            .collect();
        assert!(south.iter().all(|&c| c == south[0]));
        assert!(north.iter().all(|&c| c == north[0]));
        assert_ne!(south[0], north[0]);
    }

    #[test]
    fn kmeans_k_equals_active_regions_has_zero_inertia() {
        let grid = test_grid();
        let trips = clustered_trips(&grid);
        let params = KmeansParams { k: 10, ..Default::default() };
        let model = fit_region_clusters(&trips, &grid, &params).unwrap();
        assert!(*model.inertia_history.last().unwrap() < 1e-12);
        let ids: std::collections::HashSet<u32> = [0u32, 1, 2, 26, 27, 472, 473, 474, 497, 498]
            .iter()
            .map(|&r| model.cluster_of(r, &grid).unwrap())
            .collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn kmeans_inertia_non_increasing_and_deterministic() {
        use rand::{Rng, SeedableRng};
        let grid = test_grid();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let trips: Vec<_> = (0..400)
            .map(|i| od_trip(&grid, i, rng.gen_range(0..500), rng.gen_range(0..500)))
            .collect();
        let params = KmeansParams { k: 10, seed: 99, max_iter: 100 };
        let model = fit_region_clusters(&trips, &grid, &params).unwrap();
        for w in model.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "inertia rose: {:?}", w);
        }
        let again = fit_region_clusters(&trips, &grid, &params).unwrap();
        assert_eq!(model.assignment, again.assignment);
    }

    #[test]
    fn kmeans_too_few_active_regions_errors() {
        let grid = test_grid();
        let trips = vec![od_trip(&grid, 0, 5, 9)];
        let params = KmeansParams { k: 2, ..Default::default() };
        assert!(matches!(
            fit_region_clusters(&trips, &grid, &params),
            Err(Error::Config(_))
        ));
    }

    fn fitted_models(grid: &RegionGrid, trips: &[LabeledTrip]) -> InteractionModels {
        let slots = SlotConfig::default();
        let mf = MfParams { epochs: 5, ..Default::default() };
        let kmeans = KmeansParams { k: 3, ..Default::default() };
        InteractionModels::fit(trips, grid, &slots, &mf, &kmeans).unwrap()
    }

    fn varied_trips(grid: &RegionGrid) -> Vec<LabeledTrip> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        (0..200)
            .map(|i| od_trip(grid, i, rng.gen_range(0..30), rng.gen_range(0..30)))
            .collect()
    }

    #[test]
    fn interaction_row_lengths() {
        let grid = test_grid();
        let slots = SlotConfig::default();
        let trips = varied_trips(&grid);
        let models = fitted_models(&grid, &trips);
        let pre = featurize_interactions(&trips[0], Task::Pre, &models, &grid, &slots).unwrap();
        assert_eq!(pre.len(), 19);
        assert_eq!(interaction_columns(Task::Pre).len(), 19);
        let post = featurize_interactions(&trips[0], Task::Post, &models, &grid, &slots).unwrap();
        assert_eq!(post.len(), 29);
        assert_eq!(interaction_columns(Task::Post).len(), 29);
    }

    #[test]
    fn pre_interactions_ignore_driver_and_dispatch() {
        let grid = test_grid();
        let slots = SlotConfig::default();
        let trips = varied_trips(&grid);
        let models = fitted_models(&grid, &trips);

        let trip = &trips[0];
        let mut mutated = trip.clone();
        mutated.record.driver_id = "someone-else".to_string();
        mutated.record.dispatch_point = point_in_region(&grid, 400, 0.5, 0.5);
        mutated.v_region = 400;
        mutated.record.pick_distance_m = 4321.0;

        let a = featurize_interactions(trip, Task::Pre, &models, &grid, &slots).unwrap();
        let b = featurize_interactions(&mutated, Task::Pre, &models, &grid, &slots).unwrap();
        assert_eq!(a, b);

        let a = featurize_interactions(trip, Task::Post, &models, &grid, &slots).unwrap();
        let b = featurize_interactions(&mutated, Task::Post, &models, &grid, &slots).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn unknown_regions_fall_back() {
        let grid = test_grid();
        let slots = SlotConfig::default();
        let trips = varied_trips(&grid);
        let models = fitted_models(&grid, &trips);

        // Regions 450+ never appear in training.
        let stranger = od_trip(&grid, 999, 450, 455);
        let row = featurize_interactions(&stranger, Task::Pre, &models, &grid, &slots).unwrap();
        let od = models.cf(CfSpec::OriginDest);
        assert_eq!(row[0], od.model.global_mean);
        assert_eq!(row[1], 0.0);
        let k = models.clusters.k as f64;
        assert!(row[17] < k && row[18] < k);
    }

    #[test]
    fn models_json_round_trip_preserves_features() {
        let grid = test_grid();
        let slots = SlotConfig::default();
        let trips = varied_trips(&grid);
        let models = fitted_models(&grid, &trips);
        let json = models.to_json().unwrap();
        let back = InteractionModels::from_json(&json).unwrap();
        for trip in trips.iter().take(20) {
            let a = featurize_interactions(trip, Task::Post, &models, &grid, &slots).unwrap();
            let b = featurize_interactions(trip, Task::Post, &back, &grid, &slots).unwrap();
            assert_eq!(a, b);
        }
    }
}
