//! Trip ingestion: raw records, the region grid, time slots, waiting-time
//! labels, and the chronological train/test split.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A WGS84 coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lng: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lng: f64) -> Option<GeoPoint> {
        let p = GeoPoint { lat, lng };
        p.is_valid().then_some(p)
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lng.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lng)
    }
}

/// One ride order as ingested; the raw unit of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub order_id: String,
    pub order_time: i64,
    pub driver_id: String,
    /// Vehicle position at assignment.
    pub dispatch_point: GeoPoint,
    pub pickup_time: i64,
    pub pickup_point: GeoPoint,
    pub dropoff_time: i64,
    pub dropoff_point: GeoPoint,
    pub trip_distance_m: f64,
    pub pick_distance_m: f64,
    pub weather_code: i32,
}

/// Uniform rows x cols partition of a bounding box into indexed cells.
///
/// Region ids run row-major from the south-west corner: id = row * cols + col.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionGrid {
    pub min_lat: f64,
    pub min_lng: f64,
    pub max_lat: f64,
    pub max_lng: f64,
    pub rows: u32,
    pub cols: u32,
}

impl Default for RegionGrid {
    /// A 20 x 25 grid (500 regions) over a Shenzhen-sized bounding box.
    fn default() -> Self {
        RegionGrid {
            min_lat: 22.45,
            min_lng: 113.75,
            max_lat: 22.85,
            max_lng: 114.35,
            rows: 20,
            cols: 25,
        }
    }
}

impl RegionGrid {
    pub fn new(bbox: (f64, f64, f64, f64), rows: u32, cols: u32) -> Result<RegionGrid> {
        let grid = RegionGrid {
            min_lat: bbox.0,
            min_lng: bbox.1,
            max_lat: bbox.2,
            max_lng: bbox.3,
            rows,
            cols,
        };
        let errs = grid.validate();
        if errs.is_empty() {
            Ok(grid)
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.rows == 0 || self.cols == 0 {
            errs.push("grid rows and cols must be positive".to_string());
        }
        for v in [self.min_lat, self.min_lng, self.max_lat, self.max_lng] {
            if !v.is_finite() {
                errs.push("grid bbox must be finite".to_string());
                break;
            }
        }
        if self.min_lat.is_nan() || self.max_lat.is_nan() || self.min_lat >= self.max_lat {
            errs.push("grid requires min_lat < max_lat".to_string());
        }
        if self.min_lng.is_nan() || self.max_lng.is_nan() || self.min_lng >= self.max_lng {
            errs.push("grid requires min_lng < max_lng".to_string());
        }
        errs
    }

    pub fn region_count(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn cell_height(&self) -> f64 {
        (self.max_lat - self.min_lat) / self.rows as f64
    }

    pub fn cell_width(&self) -> f64 {
        (self.max_lng - self.min_lng) / self.cols as f64
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat
            && p.lat <= self.max_lat
            && p.lng >= self.min_lng
            && p.lng <= self.max_lng
    }

    /// Maps an in-bbox point to its region id. Points on the exact top or
    /// right edge belong to the last row/column.
    pub fn region_of(&self, p: GeoPoint) -> Result<u32> {
        if !p.is_valid() || !self.contains(p) {
            return Err(Error::OutOfBounds(format!(
                "point ({}, {}) outside grid bbox",
                p.lat, p.lng
            )));
        }
        let row = (((p.lat - self.min_lat) / self.cell_height()) as u32).min(self.rows - 1);
        let col = (((p.lng - self.min_lng) / self.cell_width()) as u32).min(self.cols - 1);
        Ok(row * self.cols + col)
    }

    pub fn row_col(&self, region: u32) -> Result<(u32, u32)> {
        if region >= self.region_count() {
            return Err(Error::OutOfBounds(format!(
                "region id {} not in [0, {})",
                region,
                self.region_count()
            )));
        }
        Ok((region / self.cols, region % self.cols))
    }

    pub fn centroid(&self, region: u32) -> Result<GeoPoint> {
        let (row, col) = self.row_col(region)?;
        Ok(GeoPoint {
            lat: self.min_lat + (row as f64 + 0.5) * self.cell_height(),
            lng: self.min_lng + (col as f64 + 0.5) * self.cell_width(),
        })
    }

    /// South-west and north-east corner of a cell.
    pub fn cell_bounds(&self, region: u32) -> Result<(f64, f64, f64, f64)> {
        let (row, col) = self.row_col(region)?;
        Ok((
            self.min_lat + row as f64 * self.cell_height(),
            self.min_lng + col as f64 * self.cell_width(),
            self.min_lat + (row + 1) as f64 * self.cell_height(),
            self.min_lng + (col + 1) as f64 * self.cell_width(),
        ))
    }
}

/// The four daily slots. Values double as the ordinal feature encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    MorningRush = 0,
    EveningRush = 1,
    LateNight = 2,
    Other = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSlot {
    pub slot: Slot,
    pub is_weekend: bool,
}

/// Local-time slotting rules. Hours are half-open [start, end) windows in
/// local time; the late-night window wraps midnight. Windows are checked
/// morning, evening, late-night in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotConfig {
    pub tz_offset_hours: f64,
    pub morning: (u32, u32),
    pub evening: (u32, u32),
    pub late_night: (u32, u32),
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            tz_offset_hours: 8.0,
            morning: (7, 10),
            evening: (17, 20),
            late_night: (23, 6),
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !self.tz_offset_hours.is_finite() || self.tz_offset_hours.abs() > 24.0 {
            errs.push("slots.tz_offset_hours must be finite and within [-24, 24]".to_string());
        }
        for (name, (a, b)) in [
            ("morning", self.morning),
            ("evening", self.evening),
            ("late_night", self.late_night),
        ] {
            if a > 24 || b > 24 {
                errs.push(format!("slots.{name} hours must be within [0, 24]"));
            }
        }
        errs
    }

    pub fn offset_seconds(&self) -> i64 {
        (self.tz_offset_hours * 3600.0).round() as i64
    }
}

fn in_window(hour: u32, (start, end): (u32, u32)) -> bool {
    if start <= end {
        hour >= start && hour < end
    } else {
        hour >= start || hour < end
    }
}

/// Local seconds for a unix timestamp under the configured offset.
fn local_seconds(t: i64, cfg: &SlotConfig) -> i64 {
    t + cfg.offset_seconds()
}

/// Day of week in local time, 0 = Monday .. 6 = Sunday.
pub fn day_of_week(t: i64, cfg: &SlotConfig) -> u32 {
    let days = local_seconds(t, cfg).div_euclid(86_400);
    (days + 3).rem_euclid(7) as u32
}

pub fn local_hour(t: i64, cfg: &SlotConfig) -> u32 {
    (local_seconds(t, cfg).div_euclid(3600)).rem_euclid(24) as u32
}

/// Maps a timestamp to its slot and weekend flag under the configured
/// UTC offset. Total: every timestamp lands in exactly one slot.
pub fn time_slot_of(t: i64, cfg: &SlotConfig) -> TimeSlot {
    let hour = local_hour(t, cfg);
    let slot = if in_window(hour, cfg.morning) {
        Slot::MorningRush
    } else if in_window(hour, cfg.evening) {
        Slot::EveningRush
    } else if in_window(hour, cfg.late_night) {
        Slot::LateNight
    } else {
        Slot::Other
    };
    TimeSlot {
        slot,
        is_weekend: day_of_week(t, cfg) >= 5,
    }
}

/// Index of the timestamp's slot within a week at the given granularity,
/// in [0, 7*24*60/granularity). Weeks start Monday 00:00 local time.
pub fn slot_of_week(t: i64, cfg: &SlotConfig, granularity_minutes: u32) -> u32 {
    let local = local_seconds(t, cfg);
    let minute_of_week = (local.div_euclid(60) + 3 * 1440).rem_euclid(7 * 1440) as u32;
    minute_of_week / granularity_minutes
}

/// Calendar week index (weeks start Monday 00:00 local time).
pub fn week_index(t: i64, cfg: &SlotConfig) -> i64 {
    (local_seconds(t, cfg).div_euclid(86_400) + 3).div_euclid(7)
}

/// An accepted trip with its waiting-time label and resolved region ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrip {
    pub record: TripRecord,
    /// Actual waiting time, pickup_time - order_time, strictly positive.
    pub wt_act_s: u32,
    pub o_region: u32,
    pub d_region: u32,
    pub v_region: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    OutOfBbox,
    TimeOrder,
    Malformed,
    NegativeDistance,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::OutOfBbox => "OUT_OF_BBOX",
            RejectReason::TimeOrder => "TIME_ORDER",
            RejectReason::Malformed => "MALFORMED",
            RejectReason::NegativeDistance => "NEGATIVE_DISTANCE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based data row number (header excluded).
    pub row_number: u64,
    pub reason: RejectReason,
}

/// Validates a record against the grid and computes its label and regions.
/// Rows failing any invariant are rejected, never repaired.
pub fn label_trip(record: TripRecord, grid: &RegionGrid) -> std::result::Result<LabeledTrip, RejectReason> {
    for p in [record.dispatch_point, record.pickup_point, record.dropoff_point] {
        if !p.is_valid() {
            return Err(RejectReason::Malformed);
        }
    }
    if record.pickup_time <= record.order_time || record.dropoff_time < record.pickup_time {
        // wt_act must be strictly positive, so pickup_time == order_time is
        // rejected along with inverted orderings.
        return Err(RejectReason::TimeOrder);
    }
    if !record.trip_distance_m.is_finite() || !record.pick_distance_m.is_finite() {
        return Err(RejectReason::Malformed);
    }
    if record.trip_distance_m < 0.0 || record.pick_distance_m < 0.0 {
        return Err(RejectReason::NegativeDistance);
    }
    let v_region = match grid.region_of(record.dispatch_point) {
        Ok(r) => r,
        Err(_) => return Err(RejectReason::OutOfBbox),
    };
    let o_region = match grid.region_of(record.pickup_point) {
        Ok(r) => r,
        Err(_) => return Err(RejectReason::OutOfBbox),
    };
    let d_region = match grid.region_of(record.dropoff_point) {
        Ok(r) => r,
        Err(_) => return Err(RejectReason::OutOfBbox),
    };
    let wt = record.pickup_time - record.order_time;
    Ok(LabeledTrip {
        wt_act_s: wt as u32,
        o_region,
        d_region,
        v_region,
        record,
    })
}

pub const TRIP_CSV_COLUMNS: [&str; 14] = [
    "order_id",
    "order_time",
    "driver_id",
    "dispatch_lat",
    "dispatch_lng",
    "pickup_time",
    "pickup_lat",
    "pickup_lng",
    "dropoff_time",
    "dropoff_lat",
    "dropoff_lng",
    "trip_distance_m",
    "pick_distance_m",
    "weather_code",
];

#[derive(Debug)]
pub struct ParseOutcome {
    pub accepted: Vec<LabeledTrip>,
    pub rejected: Vec<Rejection>,
}

/// Parses the trip CSV, labeling rows against the grid. Output order equals
/// input row order. A missing header column is fatal; bad rows land in the
/// rejection report instead.
pub fn parse_trips<R: Read>(source: R, grid: &RegionGrid) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("unreadable CSV header: {e}")))?
        .clone();
    let mut col_idx = Vec::with_capacity(TRIP_CSV_COLUMNS.len());
    let mut missing = Vec::new();
    for name in TRIP_CSV_COLUMNS {
        match headers.iter().position(|h| h == name) {
            Some(i) => col_idx.push(i),
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "trip CSV missing required columns: {}",
            missing.join(", ")
        )));
    }

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_number = i as u64 + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(Error::Data(format!("unreadable trip CSV: {e}")));
                }
                rejected.push(Rejection {
                    row_number,
                    reason: RejectReason::Malformed,
                });
                continue;
            }
        };
        match parse_row(&row, &col_idx) {
            Some(record) => match label_trip(record, grid) {
                Ok(trip) => accepted.push(trip),
                Err(reason) => rejected.push(Rejection { row_number, reason }),
            },
            None => rejected.push(Rejection {
                row_number,
                reason: RejectReason::Malformed,
            }),
        }
    }
    Ok(ParseOutcome { accepted, rejected })
}

fn parse_row(row: &csv::StringRecord, col_idx: &[usize]) -> Option<TripRecord> {
    let field = |slot: usize| row.get(col_idx[slot]);
    let int = |slot: usize| field(slot)?.trim().parse::<i64>().ok();
    let float = |slot: usize| field(slot)?.trim().parse::<f64>().ok();
    Some(TripRecord {
        order_id: field(0)?.to_string(),
        order_time: int(1)?,
        driver_id: field(2)?.to_string(),
        dispatch_point: GeoPoint {
            lat: float(3)?,
            lng: float(4)?,
        },
        pickup_time: int(5)?,
        pickup_point: GeoPoint {
            lat: float(6)?,
            lng: float(7)?,
        },
        dropoff_time: int(8)?,
        dropoff_point: GeoPoint {
            lat: float(9)?,
            lng: float(10)?,
        },
        trip_distance_m: float(11)?,
        pick_distance_m: float(12)?,
        weather_code: field(13)?.trim().parse::<i32>().ok()?,
    })
}

/// Writes records in the exact column order `parse_trips` expects.
/// Float fields round-trip losslessly through the default formatting.
pub fn write_trips_csv<W: Write>(out: W, trips: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIP_CSV_COLUMNS)?;
    for t in trips {
        w.write_record(&[
            t.order_id.clone(),
            t.order_time.to_string(),
            t.driver_id.clone(),
            t.dispatch_point.lat.to_string(),
            t.dispatch_point.lng.to_string(),
            t.pickup_time.to_string(),
            t.pickup_point.lat.to_string(),
            t.pickup_point.lng.to_string(),
            t.dropoff_time.to_string(),
            t.dropoff_point.lat.to_string(),
            t.dropoff_point.lng.to_string(),
            t.trip_distance_m.to_string(),
            t.pick_distance_m.to_string(),
            t.weather_code.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejections_csv<W: Write>(out: W, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row_number", "reason_code"])?;
    for r in rejections {
        w.write_record(&[r.row_number.to_string(), r.reason.code().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub struct ChronoSplit {
    pub train: Vec<LabeledTrip>,
    pub test: Vec<LabeledTrip>,
    pub warnings: Vec<String>,
}

/// Sorts trips by order time and puts the first ceil(n * train_frac) in the
/// train set. No test trip is earlier than any train trip.
pub fn chrono_split(mut trips: Vec<LabeledTrip>, train_frac: f64) -> Result<ChronoSplit> {
    if trips.is_empty() {
        return Err(Error::Data("chrono_split requires a non-empty trip list".to_string()));
    }
    if train_frac.is_nan() || train_frac <= 0.0 || train_frac >= 1.0 {
        return Err(Error::Config(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    // Tie-break on order_id so the split is invariant to input order.
    trips.sort_by(|a, b| {
        a.record
            .order_time
            .cmp(&b.record.order_time)
            .then_with(|| a.record.order_id.cmp(&b.record.order_id))
    });
    let n = trips.len();
    let n_train = ((n as f64) * train_frac).ceil() as usize;
    let n_train = n_train.clamp(1, n);
    let test = trips.split_off(n_train);
    let mut warnings = Vec::new();
    if test.is_empty() {
        warnings.push(format!(
            "chronological split produced an empty test set ({n} trips, train_frac {train_frac})"
        ));
    }
    Ok(ChronoSplit {
        train: trips,
        test,
        warnings,
    })
}

/// Distinct driver ids in a trip set, in first-seen order.
pub fn distinct_drivers(trips: &[LabeledTrip]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in trips {
        if seen.insert(t.record.driver_id.as_str()) {
            out.push(t.record.driver_id.clone());
        }
    }
    out
}
