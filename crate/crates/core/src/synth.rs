//! Seeded synthetic meter fleet for demos and tests: 15-minute load per
//! user plus one hourly temperature series, written as `timestamp,value`
//! CSV files in local wall-clock time.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingestion::{POINTS_PER_DAY, SLOT_MINUTES};
use crate::seed;

#[derive(Debug, Clone)]
pub struct FleetSpec {
    pub n_users: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            n_users: 11,
            n_days: 86,
            start: NaiveDate::from_ymd_opt(2018, 6, 1).expect("valid date"),
            seed: 7,
        }
    }
}

pub struct Fleet {
    pub loads: Vec<(String, Vec<(NaiveDateTime, f64)>)>,
    pub temperature: Vec<(NaiveDateTime, f64)>,
}

fn hourly_temperature(spec: &FleetSpec) -> Vec<(NaiveDateTime, f64)> {
    let mut rng = seed::rng(spec.seed, "synth:temperature");
    let noise = Normal::new(0.0, 0.6).expect("valid sd");
    let t0 = spec.start.and_hms_opt(0, 0, 0).expect("midnight");
    let mut daily_offset = 0.0;
    (0..spec.n_days * 24 + 1)
        .map(|h| {
            if h % 24 == 0 {
                daily_offset = 0.7 * daily_offset + rng.random_range(-2.5..2.5);
            }
            let hour = (h % 24) as f64;
            let diurnal = 9.0 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin();
            (t0 + Duration::hours(h as i64), 80.0 + diurnal + daily_offset + noise.sample(&mut rng))
        })
        .collect()
}

fn temperature_at(temps: &[(NaiveDateTime, f64)], t: NaiveDateTime) -> f64 {
    let i = temps.partition_point(|&(ts, _)| ts <= t).saturating_sub(1);
    match temps.get(i + 1) {
        Some(&(t1, v1)) => {
            let (t0, v0) = temps[i];
            let f = (t - t0).num_seconds() as f64 / (t1 - t0).num_seconds() as f64;
            v0 + (v1 - v0) * f
        }
        None => temps[i].1,
    }
}

pub fn generate(spec: &FleetSpec) -> Fleet {
    let temperature = hourly_temperature(spec);
    let t0 = spec.start.and_hms_opt(0, 0, 0).expect("midnight");
    let loads = (0..spec.n_users)
        .map(|u| {
            let user = format!("user{u}");
            let mut rng = seed::rng(spec.seed, &format!("synth:{user}"));
            let noise = Normal::new(0.0, 12.0).expect("valid sd");
            let base = rng.random_range(350.0..550.0);
            let swing = rng.random_range(250.0..450.0);
            let cooling = rng.random_range(8.0..16.0);
            let phase = rng.random_range(-1.5..1.5);
            let points = (0..spec.n_days * POINTS_PER_DAY)
                .map(|i| {
                    let t = t0 + Duration::minutes((i * SLOT_MINUTES as usize) as i64);
                    let hour = (i % POINTS_PER_DAY) as f64 / 4.0;
                    let shape = 0.5 - 0.5 * (std::f64::consts::TAU * (hour - 3.0 - phase) / 24.0).cos();
                    let temp = temperature_at(&temperature, t);
                    let kw = base + swing * shape + cooling * (temp - 75.0).max(0.0) + noise.sample(&mut rng);
                    (t, (kw.max(50.0) * 100.0).round() / 100.0)
                })
                .collect();
            (user, points)
        })
        .collect();
    Fleet { loads, temperature }
}

fn write_series(path: &Path, points: &[(NaiveDateTime, f64)]) -> Result<()> {
    let mut out = String::from("timestamp,value\n");
    for (t, v) in points {
        out.push_str(&format!("{},{v}\n", t.format("%Y-%m-%dT%H:%M:%S")));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::storage(path, e))
}

/// Writes `load/<user>.csv` and `temperature.csv` under `dir`.
pub fn write_fleet(fleet: &Fleet, dir: &Path) -> Result<()> {
    let load_dir = dir.join("load");
    fs::create_dir_all(&load_dir).map_err(|e| Error::storage(&load_dir, e))?;
    for (user, points) in &fleet.loads {
        write_series(&load_dir.join(format!("{user}.csv")), points)?;
    }
    write_series(&dir.join("temperature.csv"), &fleet.temperature)
}
