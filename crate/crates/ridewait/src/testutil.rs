//! Shared helpers for unit tests.

use crate::trip::{GeoPoint, LabeledTrip, RegionGrid, SlotConfig, TripRecord, label_trip};

pub fn test_grid() -> RegionGrid {
    RegionGrid::new((22.4, 113.7, 22.9, 114.4), 20, 25).unwrap()
}

/// Unix seconds for a local wall-clock instant, via chrono as the
/// independent calendar oracle.
pub fn local_unix(y: i32, m: u32, d: u32, h: u32, min: u32, cfg: &SlotConfig) -> i64 {
    let naive = chrono::NaiveDate::from_ymd_opt(y, m, d)
        .unwrap()
        .and_hms_opt(h, min, 0)
        .unwrap();
    naive.and_utc().timestamp() - cfg.offset_seconds()
}

pub struct TripSpec {
    pub order_id: String,
    pub order_time: i64,
    pub driver_id: String,
    pub pickup: GeoPoint,
    pub dropoff: GeoPoint,
    pub dispatch: GeoPoint,
    pub wait_s: i64,
    pub weather: i32,
}

impl Default for TripSpec {
    fn default() -> Self {
        TripSpec {
            order_id: "o1".to_string(),
            order_time: 1_700_000_000,
            driver_id: "d1".to_string(),
            pickup: GeoPoint { lat: 22.51, lng: 113.81 },
            dropoff: GeoPoint { lat: 22.6, lng: 113.9 },
            dispatch: GeoPoint { lat: 22.5, lng: 113.8 },
            wait_s: 300,
            weather: 1,
        }
    }
}

pub fn make_trip(grid: &RegionGrid, spec: TripSpec) -> LabeledTrip {
    let record = TripRecord {
        order_id: spec.order_id,
        order_time: spec.order_time,
        driver_id: spec.driver_id,
        dispatch_point: spec.dispatch,
        pickup_time: spec.order_time + spec.wait_s,
        pickup_point: spec.pickup,
        dropoff_time: spec.order_time + spec.wait_s + 1200,
        dropoff_point: spec.dropoff,
        trip_distance_m: 12_000.0,
        pick_distance_m: 900.0,
        weather_code: spec.weather,
    };
    label_trip(record, grid).unwrap()
}

/// A point inside the given region, offset from the cell's south-west
/// corner by the given fractions.
pub fn point_in_region(grid: &RegionGrid, region: u32, fx: f64, fy: f64) -> GeoPoint {
    let (lat0, lng0, lat1, lng1) = grid.cell_bounds(region).unwrap();
    GeoPoint {
        lat: lat0 + fy * (lat1 - lat0),
        lng: lng0 + fx * (lng1 - lng0),
    }
}
