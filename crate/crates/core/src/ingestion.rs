//! Raw meter/temperature CSV ingestion and alignment into daily profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::Schema;

pub const POINTS_PER_DAY: usize = 96;
pub const SLOT_MINUTES: u32 = 15;

pub const DATASET_SCHEMA: Schema = Schema::new("loadpatch.dataset", 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Load,
    Temperature,
}

/// A time-ordered series as read from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub kind: SeriesKind,
    pub source_id: String,
    pub points: Vec<(DateTime<Utc>, f64)>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One user-day of load (kW) and temperature on the 15-minute grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub user_id: String,
    pub date: NaiveDate,
    pub load: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl DailyProfile {
    pub fn validate(&self) -> Result<()> {
        if self.load.len() != POINTS_PER_DAY || self.temperature.len() != POINTS_PER_DAY {
            return Err(Error::Validation(format!(
                "{} {}: expected {POINTS_PER_DAY} load and temperature points, found {} and {}",
                self.user_id,
                self.date,
                self.load.len(),
                self.temperature.len()
            )));
        }
        if self.load.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation(format!(
                "{} {}: load values must be finite and non-negative",
                self.user_id, self.date
            )));
        }
        if self.temperature.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "{} {}: temperature values must be finite",
                self.user_id, self.date
            )));
        }
        Ok(())
    }

    pub fn peak_load(&self) -> f64 {
        self.load.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn peak_temperature(&self) -> f64 {
        self.temperature.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub load_min: f64,
    pub load_max: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    pub n_days: usize,
    pub n_users: usize,
    pub daily_peaks: Vec<f64>,
}

const NAIVE_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 timestamp. Offset-less values are wall-clock time in `tz`.
pub fn parse_timestamp(s: &str, tz: Tz) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    if let Ok(t) = DateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%z") {
        return Ok(t.with_timezone(&Utc));
    }
    let naive = NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unrecognized timestamp {s:?}"))?;
    tz.from_local_datetime(&naive)
        .earliest()
        .map(|t| t.with_timezone(&Utc))
        .ok_or_else(|| format!("timestamp {s:?} does not exist in {tz}"))
}

fn read_series(path: &Path, kind: SeriesKind, source_id: &str, tz: Tz) -> Result<RawSeries> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::storage(path, e))?;

    let mut points: Vec<(DateTime<Utc>, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let ts_field = record.get(0).unwrap_or("");
        let value_field = record.get(1).unwrap_or("");
        let ts = parse_timestamp(ts_field, tz);
        // Header auto-detection: a first row where neither column parses.
        if i == 0 && ts.is_err() && value_field.parse::<f64>().is_err() {
            continue;
        }
        if record.len() != 2 {
            return Err(parse_err(
                line,
                format!("expected 2 columns (timestamp,value), found {}", record.len()),
            ));
        }
        let ts = ts.map_err(|m| parse_err(line, m))?;
        if value_field.is_empty() {
            return Err(parse_err(line, "missing value".to_string()));
        }
        let value: f64 = value_field
            .parse()
            .map_err(|_| parse_err(line, format!("invalid number {value_field:?}")))?;
        if !value.is_finite() {
            return Err(parse_err(line, format!("non-finite value {value_field:?}")));
        }
        if kind == SeriesKind::Load && value < 0.0 {
            return Err(parse_err(line, format!("negative load {value}")));
        }
        if let Some(&(prev, _)) = points.last() {
            if ts <= prev {
                return Err(Error::Ordering {
                    path: path.to_path_buf(),
                    line,
                    timestamp: ts_field.to_string(),
                });
            }
        }
        points.push((ts, value));
    }
    if points.is_empty() {
        return Err(Error::EmptySeries(path.to_path_buf()));
    }
    Ok(RawSeries {
        kind,
        source_id: source_id.to_string(),
        points,
    })
}

pub fn ingest_load_csv(path: &Path, user_id: &str, tz: Tz) -> Result<RawSeries> {
    read_series(path, SeriesKind::Load, user_id, tz)
}

pub fn ingest_temperature_csv(path: &Path, tz: Tz) -> Result<RawSeries> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_series(path, SeriesKind::Temperature, &id, tz)
}

/// Piecewise-linear value of `series` at `t`; held flat beyond either end.
pub fn interpolate_at(series: &[(DateTime<Utc>, f64)], t: DateTime<Utc>) -> f64 {
    let idx = series.partition_point(|&(ts, _)| ts < t);
    if idx == 0 {
        return series[0].1;
    }
    if idx == series.len() {
        return series[series.len() - 1].1;
    }
    let (t1, v1) = series[idx];
    if t1 == t {
        return v1;
    }
    let (t0, v0) = series[idx - 1];
    let span = (t1 - t0).num_milliseconds() as f64;
    let frac = (t - t0).num_milliseconds() as f64 / span;
    v0 + frac * (v1 - v0)
}

/// Splits the load series into local-civil days in `tz`, keeping only days
/// with every 15-minute slot present exactly once, and resamples temperature
/// onto the meter timestamps.
pub fn align_and_segment(load: &RawSeries, temp: &RawSeries, tz: Tz) -> Result<Vec<DailyProfile>> {
    if temp.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "temperature series {} is empty",
            temp.source_id
        )));
    }
    let mut days: BTreeMap<NaiveDate, Vec<Option<DateTime<Utc>>>> = BTreeMap::new();
    let mut broken: BTreeSet<NaiveDate> = BTreeSet::new();
    let mut values: BTreeMap<DateTime<Utc>, f64> = BTreeMap::new();

    for &(t, v) in &load.points {
        let local = t.with_timezone(&tz);
        let date = local.date_naive();
        let slots = days
            .entry(date)
            .or_insert_with(|| vec![None; POINTS_PER_DAY]);
        if local.minute() % SLOT_MINUTES != 0 || local.second() != 0 {
            broken.insert(date);
            continue;
        }
        let slot = ((local.hour() * 60 + local.minute()) / SLOT_MINUTES) as usize;
        if slots[slot].is_some() {
            broken.insert(date);
            continue;
        }
        slots[slot] = Some(t);
        values.insert(t, v);
    }

    let mut out = Vec::new();
    for (date, slots) in days {
        if broken.contains(&date) || slots.iter().any(Option::is_none) {
            log::debug!("{}: dropping incomplete day {date}", load.source_id);
            continue;
        }
        let stamps: Vec<DateTime<Utc>> = slots.into_iter().flatten().collect();
        let profile = DailyProfile {
            user_id: load.source_id.clone(),
            date,
            load: stamps.iter().map(|t| values[t]).collect(),
            temperature: stamps.iter().map(|&t| interpolate_at(&temp.points, t)).collect(),
        };
        out.push(profile);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no complete days for {}",
            load.source_id
        )));
    }
    Ok(out)
}

pub fn summarize(days: &[DailyProfile]) -> Result<DatasetStats> {
    if days.is_empty() {
        return Err(Error::EmptyDataset("no days to summarize".into()));
    }
    let fold = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
    };
    let (load_min, load_max) = fold(&mut days.iter().flat_map(|d| d.load.iter().copied()));
    let (temp_min, temp_max) = fold(&mut days.iter().flat_map(|d| d.temperature.iter().copied()));
    let users: BTreeSet<&str> = days.iter().map(|d| d.user_id.as_str()).collect();
    Ok(DatasetStats {
        load_min,
        load_max,
        temp_min,
        temp_max,
        n_days: days.len(),
        n_users: users.len(),
        daily_peaks: days.iter().map(DailyProfile::peak_load).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub timezone: String,
}

pub fn write_dataset(path: &Path, tz: Tz, days: &[DailyProfile]) -> Result<()> {
    let meta = DatasetMeta {
        timezone: tz.name().to_string(),
    };
    DATASET_SCHEMA.write(path, &meta, days)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<DailyProfile>)> {
    let (meta, days): (DatasetMeta, Vec<DailyProfile>) = DATASET_SCHEMA.read(path)?;
    for d in &days {
        d.validate()?;
    }
    Ok((meta, days))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use std::io::Write;

    const TZ: Tz = chrono_tz::America::New_York;

    fn write_csv(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn day_rows(date: &str, n: usize, value: impl Fn(usize) -> f64) -> String {
        let start = NaiveDateTime::parse_from_str(&format!("{date} 00:00"), "%Y-%m-%d %H:%M").unwrap();
        (0..n)
            .map(|i| {
                let t = start + Duration::minutes(15 * i as i64);
                format!("{},{}\n", t.format("%Y-%m-%dT%H:%M:%S"), value(i))
            })
            .collect()
    }

    fn hourly_temps(date: &str, hours: usize, value: impl Fn(usize) -> f64) -> String {
        let start = NaiveDateTime::parse_from_str(&format!("{date} 00:00"), "%Y-%m-%d %H:%M").unwrap();
        (0..hours)
            .map(|h| {
                let t = start + Duration::hours(h as i64);
                format!("{},{}\n", t.format("%Y-%m-%d %H:%M"), value(h))
            })
            .collect()
    }

    #[test]
    fn well_formed_day_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "u1.csv", &day_rows("2018-07-02", 96, |i| 300.0 + i as f64));
        let s = ingest_load_csv(&path, "u1", TZ).unwrap();
        assert_eq!(s.len(), 96);
        assert_eq!(s.points[5].1, 305.0);
        assert_eq!(s.kind, SeriesKind::Load);
    }

    #[test]
    fn header_row_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("timestamp,value\n{}", day_rows("2018-07-02", 4, |_| 1.0));
        let path = write_csv(dir.path(), "u1.csv", &body);
        assert_eq!(ingest_load_csv(&path, "u1", TZ).unwrap().len(), 4);
    }

    #[test]
    fn duplicate_timestamp_is_an_ordering_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = day_rows("2018-07-02", 3, |_| 1.0);
        body.push_str("2018-07-02T00:30:00,2\n");
        let path = write_csv(dir.path(), "u1.csv", &body);
        match ingest_load_csv(&path, "u1", TZ) {
            Err(Error::Ordering { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "u1.csv", "");
        assert!(matches!(ingest_load_csv(&path, "u1", TZ), Err(Error::EmptySeries(_))));
        let path = write_csv(dir.path(), "u2.csv", "timestamp,value\n");
        assert!(matches!(ingest_load_csv(&path, "u2", TZ), Err(Error::EmptySeries(_))));
    }

    #[test]
    fn hourly_temperature_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "t.csv", &hourly_temps("2018-07-02", 24, |h| 70.0 + h as f64));
        let s = ingest_temperature_csv(&path, TZ).unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(s.kind, SeriesKind::Temperature);
    }

    #[test]
    fn missing_temperature_cell_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "t.csv", "2018-07-02 00:00,70\n2018-07-02 01:00,\n");
        match ingest_temperature_csv(&path, TZ) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("missing"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_temperature_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "t.csv", "2018-07-02 01:00,70\n2018-07-02 00:00,71\n");
        assert!(matches!(
            ingest_temperature_csv(&path, TZ),
            Err(Error::Ordering { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_row_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "u.csv", "2018-07-02T00:00:00,1\nnot-a-time,2\n");
        assert!(matches!(
            ingest_load_csv(&path, "u", TZ),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn interpolation_between_hourly_brackets() {
        let dir = tempfile::tempdir().unwrap();
        let load = write_csv(dir.path(), "u.csv", &day_rows("2018-07-02", 96, |_| 400.0));
        let temps = write_csv(
            dir.path(),
            "t.csv",
            &hourly_temps("2018-07-02", 24, |h| if h % 2 == 0 { 70.0 } else { 78.0 }),
        );
        let days = align_and_segment(
            &ingest_load_csv(&load, "u", TZ).unwrap(),
            &ingest_temperature_csv(&temps, TZ).unwrap(),
            TZ,
        )
        .unwrap();
        assert_eq!(days.len(), 1);
        let t = &days[0].temperature;
        // 00:15 between 70 @00:00 and 78 @01:00: 70 + 0.25 * 8
        assert_eq!(t[1], 72.0);
        // 01:30 between 78 @01:00 and 70 @02:00: 78 - 0.5 * 8
        assert_eq!(t[6], 74.0);
        // exact at knots
        assert_eq!(t[0], 70.0);
        assert_eq!(t[4], 78.0);
        // after last reading (23:00) held flat
        assert_eq!(t[95], 78.0);
    }

    #[test]
    fn incomplete_day_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = day_rows("2018-07-02", 96, |_| 400.0);
        body.push_str(&day_rows("2018-07-03", 95, |_| 400.0));
        let load = write_csv(dir.path(), "u.csv", &body);
        let temps = write_csv(dir.path(), "t.csv", &hourly_temps("2018-07-02", 48, |_| 70.0));
        let days = align_and_segment(
            &ingest_load_csv(&load, "u", TZ).unwrap(),
            &ingest_temperature_csv(&temps, TZ).unwrap(),
            TZ,
        )
        .unwrap();
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].date, NaiveDate::from_ymd_opt(2018, 7, 2).unwrap());
        assert!(days[0].temperature.iter().all(|&t| t == 70.0));
    }

    #[test]
    fn no_complete_days_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let load = write_csv(dir.path(), "u.csv", &day_rows("2018-07-02", 50, |_| 400.0));
        let temps = write_csv(dir.path(), "t.csv", &hourly_temps("2018-07-02", 24, |_| 70.0));
        assert!(matches!(
            align_and_segment(
                &ingest_load_csv(&load, "u", TZ).unwrap(),
                &ingest_temperature_csv(&temps, TZ).unwrap(),
                TZ
            ),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn dst_transition_day_is_dropped() {
        // 2018-03-11 in New York has 92 local quarter-hours.
        let start = TZ.with_ymd_and_hms(2018, 3, 11, 0, 0, 0).unwrap().with_timezone(&Utc);
        let load = RawSeries {
            kind: SeriesKind::Load,
            source_id: "u".into(),
            points: (0..92).map(|i| (start + Duration::minutes(15 * i), 1.0)).collect(),
        };
        let temp = RawSeries {
            kind: SeriesKind::Temperature,
            source_id: "t".into(),
            points: vec![(start, 50.0)],
        };
        assert!(align_and_segment(&load, &temp, TZ).is_err());
    }

    #[test]
    fn offset_timestamps_convert_to_local_days() {
        let t = parse_timestamp("2018-07-02T04:00:00Z", TZ).unwrap();
        assert_eq!(t.with_timezone(&TZ).hour(), 0);
        let t2 = parse_timestamp("2018-07-02T00:00", TZ).unwrap();
        assert_eq!(t, t2);
    }

    fn constant_day(user: &str, d: u32, load: f64) -> DailyProfile {
        DailyProfile {
            user_id: user.into(),
            date: NaiveDate::from_ymd_opt(2018, 7, d).unwrap(),
            load: vec![load; 96],
            temperature: vec![75.0; 96],
        }
    }

    #[test]
    fn summarize_constant_day() {
        let s = summarize(&[constant_day("u", 1, 500.0)]).unwrap();
        assert_eq!((s.load_min, s.load_max), (500.0, 500.0));
        assert_eq!(s.n_days, 1);
    }

    #[test]
    fn summarize_range_and_peaks() {
        let mut a = constant_day("u1", 1, 600.0);
        a.load[10] = 210.0;
        a.load[20] = 900.0;
        let mut b = constant_day("u2", 2, 700.0);
        b.load[50] = 1751.0;
        let s = summarize(&[a, b]).unwrap();
        assert_eq!((s.load_min, s.load_max), (210.0, 1751.0));
        assert_eq!(s.daily_peaks, vec![900.0, 1751.0]);
        assert_eq!(s.n_users, 2);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let days = vec![constant_day("u", 1, 500.0), constant_day("u", 2, 510.5)];
        write_dataset(&path, TZ, &days).unwrap();
        let (meta, back) = read_dataset(&path).unwrap();
        assert_eq!(meta.timezone, "America/New_York");
        assert_eq!(back, days);
    }

    fn series(values: &[f64], step_min: i64) -> Vec<(DateTime<Utc>, f64)> {
        let t0 = DateTime::parse_from_rfc3339("2018-07-01T00:00:00Z").unwrap().with_timezone(&Utc);
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (t0 + Duration::minutes(step_min * i as i64), v))
            .collect()
    }

    fn raw(kind: SeriesKind, points: Vec<(DateTime<Utc>, f64)>) -> RawSeries {
        RawSeries {
            kind,
            source_id: "p".into(),
            points,
        }
    }

    proptest::proptest! {
        #[test]
        fn interpolation_exact_at_knots(values in proptest::collection::vec(-20.0f64..120.0, 1..40)) {
            let s = series(&values, 60);
            for &(t, v) in &s {
                proptest::prop_assert_eq!(interpolate_at(&s, t), v);
            }
        }

        #[test]
        fn interpolation_stays_within_brackets(
            values in proptest::collection::vec(-20.0f64..120.0, 2..40),
            minute in 0i64..60,
            k in 0usize..39,
        ) {
            let s = series(&values, 60);
            let k = k % (s.len() - 1);
            let y = interpolate_at(&s, s[k].0 + Duration::minutes(minute));
            let (lo, hi) = (values[k].min(values[k + 1]), values[k].max(values[k + 1]));
            proptest::prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
        }

        #[test]
        fn segmentation_is_deterministic_and_complete(
            loads in proptest::collection::vec(0.0f64..2000.0, 96 * 3),
            temps in proptest::collection::vec(50.0f64..110.0, 24 * 4),
        ) {
            // UTC midnight is 20:00 local the day before, so the grid covers
            // two full local days
            let load = raw(SeriesKind::Load, series(&loads, 15));
            let temp = raw(SeriesKind::Temperature, series(&temps, 60));
            let a = align_and_segment(&load, &temp, TZ).unwrap();
            let b = align_and_segment(&load, &temp, TZ).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert_eq!(a.len(), 2);
            for d in &a {
                proptest::prop_assert_eq!(d.load.len(), POINTS_PER_DAY);
                proptest::prop_assert_eq!(d.temperature.len(), POINTS_PER_DAY);
            }
        }
    }
}
