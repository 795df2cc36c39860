//! Base features and their schema: the ten per-trip columns, the
//! demand-supply index behind order_num/vehicle_num, and the feature
//! matrix container with its CSV/JSON persistence.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trip::{slot_of_week, time_slot_of, week_index, LabeledTrip, SlotConfig};

/// Prediction task. Pre-request has no assigned driver yet, so
/// vehicle-derived columns are unavailable by contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pre,
    Post,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Pre => "pre",
            Task::Post => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    OrdinalInt,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    PreOk,
    PostOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub kind: ColumnKind,
    pub availability: Availability,
}

impl ColumnDef {
    pub fn new(name: &str, kind: ColumnKind, availability: Availability) -> ColumnDef {
        ColumnDef {
            name: name.to_string(),
            kind,
            availability,
        }
    }
}

/// Ordered, named columns for one task. A pre-request schema can never
/// contain a post-only column; the constructor enforces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub task: Task,
    pub columns: Vec<ColumnDef>,
}

impl FeatureSchema {
    pub fn new(task: Task, columns: Vec<ColumnDef>) -> Result<FeatureSchema> {
        let mut names = HashSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Internal(format!("duplicate column name {}", c.name)));
            }
            if task == Task::Pre && c.availability == Availability::PostOnly {
                return Err(Error::Internal(format!(
                    "pre-request schema cannot contain post-only column {}",
                    c.name
                )));
            }
        }
        Ok(FeatureSchema { task, columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Stable hash of the ordered column list; identical schemas produce
    /// identical fingerprints across runs and platforms.
    pub fn fingerprint(&self) -> String {
        let mut text = format!("task={};", self.task.name());
        for c in &self.columns {
            text.push_str(&format!("{}:{:?}:{:?};", c.name, c.kind, c.availability));
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SchemaDoc {
            task: self.task,
            fingerprint: self.fingerprint(),
            columns: self.columns.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<FeatureSchema> {
        let doc: SchemaDoc = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("invalid feature schema JSON: {e}")))?;
        let schema = FeatureSchema::new(doc.task, doc.columns)?;
        if schema.fingerprint() != doc.fingerprint {
            return Err(Error::Schema(format!(
                "feature schema fingerprint mismatch: file says {}, columns hash to {}",
                doc.fingerprint,
                schema.fingerprint()
            )));
        }
        Ok(schema)
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    task: Task,
    fingerprint: String,
    columns: Vec<ColumnDef>,
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn base_columns(task: Task) -> Vec<ColumnDef> {
    let mut cols = vec![
        ColumnDef::new("is_rush_hour", ColumnKind::OrdinalInt, Availability::PreOk),
        ColumnDef::new("is_weekend", ColumnKind::OrdinalInt, Availability::PreOk),
        ColumnDef::new("o_region", ColumnKind::OrdinalInt, Availability::PreOk),
        ColumnDef::new("d_region", ColumnKind::OrdinalInt, Availability::PreOk),
        ColumnDef::new("order_num", ColumnKind::Continuous, Availability::PreOk),
        ColumnDef::new("vehicle_num", ColumnKind::Continuous, Availability::PreOk),
        ColumnDef::new("weather", ColumnKind::OrdinalInt, Availability::PreOk),
        ColumnDef::new("trip_distance_m", ColumnKind::Continuous, Availability::PreOk),
    ];
    if task == Task::Post {
        cols.push(ColumnDef::new(
            "v_region",
            ColumnKind::OrdinalInt,
            Availability::PostOnly,
        ));
        cols.push(ColumnDef::new(
            "pick_distance_m",
            ColumnKind::Continuous,
            Availability::PostOnly,
        ));
    }
    cols
}

pub fn base_schema(task: Task) -> FeatureSchema {
    FeatureSchema::new(task, base_columns(task)).expect("base columns are valid")
}

/// Historical per-(region, slot-of-week) means of order and observed-vehicle
/// counts, built from the training window only. Lookups of unseen keys
/// return (0, 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandSupplyIndex {
    pub granularity_minutes: u32,
    /// Identifier of the window the index was built from.
    pub built_from: String,
    entries: Vec<DsEntry>,
    #[serde(skip)]
    lookup: HashMap<(u32, u32), (f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DsEntry {
    region: u32,
    slot: u32,
    mean_order_count: f64,
    mean_vehicle_count: f64,
}

impl DemandSupplyIndex {
    pub fn lookup(&self, region: u32, slot_of_week: u32) -> (f64, f64) {
        self.lookup
            .get(&(region, slot_of_week))
            .copied()
            .unwrap_or((0.0, 0.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<DemandSupplyIndex> {
        let mut idx: DemandSupplyIndex = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("invalid demand-supply index JSON: {e}")))?;
        idx.rebuild_lookup();
        Ok(idx)
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .entries
            .iter()
            .map(|e| ((e.region, e.slot), (e.mean_order_count, e.mean_vehicle_count)))
            .collect();
    }
}

/// Builds the demand-supply index from training trips.
///
/// mean_order_count(r, s) averages the per-week order count of origin
/// region r in slot-of-week s over the calendar weeks the train window
/// covers for s. mean_vehicle_count averages the per-week count of distinct
/// drivers observed in r during s; a driver is observed wherever its
/// dispatch, pickup, or dropoff point falls.
pub fn build_ds_index(
    train: &[LabeledTrip],
    granularity_minutes: u32,
    slots: &SlotConfig,
) -> Result<DemandSupplyIndex> {
    if train.is_empty() {
        return Err(Error::Data(
            "demand-supply index requires a non-empty train set".to_string(),
        ));
    }
    if granularity_minutes == 0 || 7 * 24 * 60 % granularity_minutes != 0 {
        return Err(Error::Config(format!(
            "demand_supply.granularity_minutes must divide a week, got {granularity_minutes}"
        )));
    }

    let t_min = train.iter().map(|t| t.record.order_time).min().unwrap();
    let t_max = train
        .iter()
        .map(|t| t.record.dropoff_time)
        .max()
        .unwrap()
        .max(t_min);

    // Orders per (region, slot).
    let mut order_counts: HashMap<(u32, u32), u64> = HashMap::new();
    // Distinct (driver, week) observations per (region, slot).
    let mut vehicle_obs: HashSet<(u32, u32, i64, String)> = HashSet::new();
    for t in train {
        let s = slot_of_week(t.record.order_time, slots, granularity_minutes);
        *order_counts.entry((t.o_region, s)).or_default() += 1;

        let driver = &t.record.driver_id;
        for (region, time) in [
            (t.v_region, t.record.order_time),
            (t.o_region, t.record.pickup_time),
            (t.d_region, t.record.dropoff_time),
        ] {
            let slot = slot_of_week(time, slots, granularity_minutes);
            let week = week_index(time, slots);
            vehicle_obs.insert((region, slot, week, driver.clone()));
        }
    }
    let mut vehicle_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for (region, slot, _week, _driver) in &vehicle_obs {
        *vehicle_counts.entry((*region, *slot)).or_default() += 1;
    }

    let weeks_covering = weeks_covering_slots(t_min, t_max, granularity_minutes, slots);
    let denom = |slot: u32| weeks_covering.get(&slot).copied().unwrap_or(1).max(1) as f64;

    let mut keys: Vec<(u32, u32)> = order_counts
        .keys()
        .chain(vehicle_counts.keys())
        .copied()
        .collect();
    keys.sort_unstable();
    keys.dedup();

    let entries = keys
        .into_iter()
        .map(|(region, slot)| DsEntry {
            region,
            slot,
            mean_order_count: order_counts.get(&(region, slot)).copied().unwrap_or(0) as f64
                / denom(slot),
            mean_vehicle_count: vehicle_counts.get(&(region, slot)).copied().unwrap_or(0) as f64
                / denom(slot),
        })
        .collect();

    let mut idx = DemandSupplyIndex {
        granularity_minutes,
        built_from: format!("{t_min}..{t_max}"),
        entries,
        lookup: HashMap::new(),
    };
    idx.rebuild_lookup();
    Ok(idx)
}

/// For each slot-of-week, the number of calendar weeks whose instance of
/// that slot intersects the window [t_min, t_max].
fn weeks_covering_slots(
    t_min: i64,
    t_max: i64,
    granularity_minutes: u32,
    slots: &SlotConfig,
) -> HashMap<u32, u32> {
    let offset = slots.offset_seconds();
    let l_min = t_min + offset;
    let l_max = t_max + offset;
    let slot_len = granularity_minutes as i64 * 60;
    let slots_per_week = (7 * 24 * 60 / granularity_minutes) as i64;

    let w_min = week_index(t_min, slots);
    let w_max = week_index(t_max, slots);
    let mut covering = HashMap::new();
    for w in w_min..=w_max {
        let week_start = (7 * w - 3) * 86_400;
        for s in 0..slots_per_week {
            let start = week_start + s * slot_len;
            let end = start + slot_len;
            if start <= l_max && end > l_min {
                *covering.entry(s as u32).or_insert(0u32) += 1;
            }
        }
    }
    covering
}

/// Base feature row for one trip. Pre-request rows never read driver or
/// dispatch-derived fields; that contract is structural, not checked.
pub fn featurize_base(
    trip: &LabeledTrip,
    task: Task,
    idx: &DemandSupplyIndex,
    slots: &SlotConfig,
) -> Vec<f64> {
    let ts = time_slot_of(trip.record.order_time, slots);
    let sow = slot_of_week(trip.record.order_time, slots, idx.granularity_minutes);
    let (order_num, vehicle_num) = idx.lookup(trip.o_region, sow);
    let mut row = vec![
        ts.slot as u8 as f64,
        ts.is_weekend as u8 as f64,
        trip.o_region as f64,
        trip.d_region as f64,
        order_num,
        vehicle_num,
        trip.record.weather_code as f64,
        trip.record.trip_distance_m,
    ];
    if task == Task::Post {
        row.push(trip.v_region as f64);
        row.push(trip.record.pick_distance_m);
    }
    row
}

/// Dense feature rows plus labels for one task, tied to a schema.
/// Construction rejects non-finite values and shape mismatches.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: FeatureSchema,
    pub ids: Vec<String>,
    values: Vec<f64>,
    pub labels: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        schema: FeatureSchema,
        ids: Vec<String>,
        values: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<FeatureMatrix> {
        let cols = schema.len();
        if ids.len() != labels.len() || ids.len() * cols != values.len() {
            return Err(Error::Internal(format!(
                "feature matrix shape mismatch: {} ids, {} labels, {} values, {} columns",
                ids.len(),
                labels.len(),
                values.len(),
                cols
            )));
        }
        if values.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "feature matrix contains non-finite values".to_string(),
            ));
        }
        Ok(FeatureMatrix {
            schema,
            ids,
            values,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.n_cols();
        &self.values[i * cols..(i + 1) * cols]
    }

    /// Column-contiguous copy of one feature, used by the trainer's binner.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["order_id".to_string()];
        header.extend(self.schema.columns.iter().map(|c| c.name.clone()));
        header.push("wt_act_s".to_string());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.ids[i].clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a matrix written by `write_csv`, checking the header against
    /// the schema column order.
    pub fn read_csv<R: Read>(source: R, schema: FeatureSchema) -> Result<FeatureMatrix> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(source);
        let headers = reader.headers()?.clone();
        let mut expected = vec!["order_id".to_string()];
        expected.extend(schema.columns.iter().map(|c| c.name.clone()));
        expected.push("wt_act_s".to_string());
        let actual: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        if actual != expected {
            return Err(Error::Schema(format!(
                "feature CSV header does not match schema: expected [{}], found [{}]",
                expected.join(","),
                actual.join(",")
            )));
        }
        let cols = schema.len();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            if row.len() != cols + 2 {
                return Err(Error::Data(format!(
                    "feature CSV row {} has {} fields, expected {}",
                    i + 1,
                    row.len(),
                    cols + 2
                )));
            }
            ids.push(row[0].to_string());
            for j in 0..cols {
                values.push(parse_float(&row[j + 1], i, &schema.columns[j].name)?);
            }
            labels.push(parse_float(&row[cols + 1], i, "wt_act_s")?);
        }
        FeatureMatrix::new(schema, ids, values, labels)
    }
}

fn parse_float(text: &str, row: usize, col: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!(
            "feature CSV row {} column {col}: bad number {text:?}",
            row + 1
        ))
    })
}
