//! Normalization to `[0, 200]` integers, missing-window masking and the
//! abnormal-day (temperature drop) filter.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reading, MAX_LEVEL};
use crate::error::{Error, Result};
use crate::ingestion::{summarize, DailyProfile, DatasetStats, POINTS_PER_DAY};
use crate::records::Schema;
use crate::seed;

pub const MASK_LEN: usize = 16;
pub const MAX_MASK_START: usize = POINTS_PER_DAY - MASK_LEN;
pub const DEFAULT_ABNORMAL_THRESHOLD: f64 = 0.25;

pub const PREPARED_SCHEMA: Schema = Schema::new("loadpatch.prepared", 1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub load_min: f64,
    pub load_max: f64,
    pub temp_min: f64,
    pub temp_max: f64,
}

impl NormalizationParams {
    pub fn new(load_min: f64, load_max: f64, temp_min: f64, temp_max: f64) -> Result<Self> {
        if load_max.partial_cmp(&load_min) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::DegenerateRange {
                what: "load",
                value: load_min,
            });
        }
        if temp_max.partial_cmp(&temp_min) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::DegenerateRange {
                what: "temperature",
                value: temp_min,
            });
        }
        Ok(NormalizationParams {
            load_min,
            load_max,
            temp_min,
            temp_max,
        })
    }

    pub fn load_range(&self) -> f64 {
        self.load_max - self.load_min
    }

    /// Largest dequantization error for in-range loads: half a step.
    pub fn load_step_bound(&self) -> f64 {
        self.load_range() / (2.0 * MAX_LEVEL as f64)
    }
}

pub fn fit_normalization(stats: &DatasetStats) -> Result<NormalizationParams> {
    NormalizationParams::new(stats.load_min, stats.load_max, stats.temp_min, stats.temp_max)
}

/// `round(200 * (x - min) / (max - min))`, half away from zero, clamped.
pub fn quantize_value(x: f64, min: f64, max: f64) -> u8 {
    let clamped = if x < min || x > max {
        log::warn!("value {x} outside normalization range [{min}, {max}], clamping");
        x.clamp(min, max)
    } else {
        x
    };
    let scaled = MAX_LEVEL as f64 * (clamped - min) / (max - min);
    scaled.round() as u8
}

pub fn dequantize(q: u8, p: &NormalizationParams) -> Result<f64> {
    if q > MAX_LEVEL {
        return Err(Error::Range(format!("quantized value {q} outside [0, 200]")));
    }
    Ok(p.load_min + (q as f64 / MAX_LEVEL as f64) * p.load_range())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedDay {
    pub user_id: String,
    pub date: NaiveDate,
    pub load_q: Vec<u8>,
    pub temp_q: Vec<u8>,
    pub load_kw: Vec<f64>,
}

pub fn quantize(day: &DailyProfile, p: &NormalizationParams) -> QuantizedDay {
    QuantizedDay {
        user_id: day.user_id.clone(),
        date: day.date,
        load_q: day
            .load
            .iter()
            .map(|&x| quantize_value(x, p.load_min, p.load_max))
            .collect(),
        temp_q: day
            .temperature
            .iter()
            .map(|&x| quantize_value(x, p.temp_min, p.temp_max))
            .collect(),
        load_kw: day.load.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSpec {
    pub start: usize,
    pub len: usize,
}

impl MaskSpec {
    pub fn new(start: usize) -> Result<Self> {
        let m = MaskSpec {
            start,
            len: MASK_LEN,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len != MASK_LEN || self.start > MAX_MASK_START {
            return Err(Error::Range(format!(
                "mask start {} length {} (need length {MASK_LEN} and start in [0, {MAX_MASK_START}])",
                self.start, self.len
            )));
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.range().contains(&i)
    }
}

/// Identifies one masked sample across files and backends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DayRef {
    pub user_id: String,
    pub date: NaiveDate,
    pub mask_start: usize,
}

impl fmt::Display for DayRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.user_id, self.date, self.mask_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDay {
    pub user_id: String,
    pub date: NaiveDate,
    pub mask: MaskSpec,
    /// Quantized load with the window marked missing.
    pub load: Vec<Reading>,
    pub temp_q: Vec<u8>,
    pub truth_q: Vec<u8>,
    pub truth_kw: Vec<f64>,
    #[serde(default)]
    pub abnormal: bool,
}

impl MaskedDay {
    pub fn day_ref(&self) -> DayRef {
        DayRef {
            user_id: self.user_id.clone(),
            date: self.date,
            mask_start: self.mask.start,
        }
    }

    /// The complete quantized load profile, window filled with ground truth.
    pub fn full_truth_q(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.load.iter().map(|r| r.value().unwrap_or(0)).collect();
        out[self.mask.range()].copy_from_slice(&self.truth_q);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let bad = |m: String| Err(Error::Validation(format!("{}: {m}", self.day_ref())));
        if self.load.len() != POINTS_PER_DAY || self.temp_q.len() != POINTS_PER_DAY {
            return bad("load and temperature must have 96 points".into());
        }
        if self.truth_q.len() != MASK_LEN || self.truth_kw.len() != MASK_LEN {
            return bad("truth segments must have 16 points".into());
        }
        for (i, r) in self.load.iter().enumerate() {
            let ok = if self.mask.contains(i) {
                *r == Reading::Missing
            } else {
                r.in_model_range()
            };
            if !ok {
                return bad(format!("load position {i} inconsistent with mask"));
            }
        }
        if self.temp_q.iter().chain(&self.truth_q).any(|&v| v > MAX_LEVEL) {
            return bad("quantized value above 200".into());
        }
        Ok(())
    }
}

pub fn apply_mask(day: &QuantizedDay, mask: MaskSpec) -> Result<MaskedDay> {
    mask.validate()?;
    let load = day
        .load_q
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if mask.contains(i) {
                Reading::Missing
            } else {
                Reading::Value(q)
            }
        })
        .collect();
    Ok(MaskedDay {
        user_id: day.user_id.clone(),
        date: day.date,
        mask,
        load,
        temp_q: day.temp_q.clone(),
        truth_q: day.load_q[mask.range()].to_vec(),
        truth_kw: day.load_kw[mask.range()].to_vec(),
        abnormal: false,
    })
}

/// One mask per day, start uniform on `[0, 80]`.
pub fn sample_masks(days: &[QuantizedDay], seed: u64) -> Vec<MaskedDay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    days.iter()
        .map(|d| {
            let start = rng.random_range(0..=MAX_MASK_START);
            apply_mask(d, MaskSpec::new(start).expect("start in range")).expect("valid mask")
        })
        .collect()
}

/// A day is abnormal when its peak temperature is below the previous calendar
/// day's peak (same user) by more than `threshold_frac` of the dataset's
/// temperature range. Returns one flag per input day, in input order.
pub fn abnormal_flags(days: &[DailyProfile], threshold_frac: f64) -> Result<Vec<bool>> {
    if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
        return Err(Error::Range(format!(
            "abnormal-day threshold {threshold_frac} outside (0, 1]"
        )));
    }
    if days.is_empty() {
        return Ok(Vec::new());
    }
    let stats = summarize(days)?;
    let limit = threshold_frac * (stats.temp_max - stats.temp_min);
    let peaks: HashMap<(&str, NaiveDate), f64> = days
        .iter()
        .map(|d| ((d.user_id.as_str(), d.date), d.peak_temperature()))
        .collect();
    Ok(days
        .iter()
        .map(|d| {
            let prev = d.date.pred_opt().and_then(|p| peaks.get(&(d.user_id.as_str(), p)));
            match prev {
                Some(&prev_peak) => prev_peak - d.peak_temperature() > limit,
                None => false,
            }
        })
        .collect())
}

pub fn filter_abnormal_days(
    days: &[DailyProfile],
    threshold_frac: f64,
) -> Result<(Vec<DailyProfile>, Vec<DailyProfile>)> {
    let flags = abnormal_flags(days, threshold_frac)?;
    let (removed, kept): (Vec<_>, Vec<_>) = days
        .iter()
        .cloned()
        .zip(flags)
        .partition(|(_, abnormal)| *abnormal);
    Ok((
        kept.into_iter().map(|(d, _)| d).collect(),
        removed.into_iter().map(|(d, _)| d).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub params: NormalizationParams,
    pub seed: u64,
    pub mask_len: usize,
    pub abnormal_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub meta: PreparedMeta,
    pub days: Vec<MaskedDay>,
}

impl PreparedDataset {
    pub fn params(&self) -> &NormalizationParams {
        &self.meta.params
    }

    /// Days grouped per user, each group in date order.
    pub fn by_user(&self) -> BTreeMap<&str, Vec<&MaskedDay>> {
        let mut map: BTreeMap<&str, Vec<&MaskedDay>> = BTreeMap::new();
        for d in &self.days {
            map.entry(d.user_id.as_str()).or_default().push(d);
        }
        for v in map.values_mut() {
            v.sort_by_key(|d| d.date);
        }
        map
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        PREPARED_SCHEMA.write(path, &self.meta, &self.days)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (meta, days): (PreparedMeta, Vec<MaskedDay>) = PREPARED_SCHEMA.read(path)?;
        for d in &days {
            d.validate()?;
        }
        Ok(PreparedDataset { meta, days })
    }
}

/// Fleet-wide normalization, abnormal-day flags and one seeded mask per day.
pub fn prepare(days: &[DailyProfile], seed: u64, abnormal_threshold: f64) -> Result<PreparedDataset> {
    let stats = summarize(days)?;
    let params = fit_normalization(&stats)?;
    let flags = abnormal_flags(days, abnormal_threshold)?;
    let quantized: Vec<QuantizedDay> = days.iter().map(|d| quantize(d, &params)).collect();
    let mut masked = sample_masks(&quantized, seed::derive(seed, seed::MASKS));
    for (m, abnormal) in masked.iter_mut().zip(flags) {
        m.abnormal = abnormal;
    }
    Ok(PreparedDataset {
        meta: PreparedMeta {
            params,
            seed,
            mask_len: MASK_LEN,
            abnormal_threshold,
        },
        days: masked,
    })
}
