//! Turns a model completion into a restored 16-point load segment.
//!
//! Only the masked window is read from the completion; every other position
//! comes from the known profile. Repairs, in order:
//!
//! * token count within 96 +/- 4: extra tokens are truncated, missing ones
//!   padded with the last valid token;
//! * window values in `(200, 242]` are clamped to 200;
//! * unusable window tokens (malformed, or the missing sentinel) are
//!   linearly interpolated between the nearest usable neighbours.
//!
//! More than 25% unusable tokens (over the whole completion or within the
//! window) or a count outside the tolerance fails the sample.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Reading, MAX_LEVEL, MAX_WORD_VALUE};
use crate::error::Result;
use crate::ingestion::POINTS_PER_DAY;
use crate::metrics::{sample_metrics, SampleMetrics};
use crate::preprocess::{dequantize, DayRef, MaskedDay, NormalizationParams};
use crate::promptset::PromptVariant;
use crate::records::Schema;

pub const LENGTH_TOLERANCE: usize = 4;
pub const MAX_UNUSABLE_FRACTION: f64 = 0.25;

pub const RESULTS_SCHEMA: Schema = Schema::new("loadpatch.results", 1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Repair {
    Truncated { from: usize },
    Padded { from: usize },
    Clamped { index: usize, value: u8 },
    Interpolated { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationResult {
    pub day_ref: DayRef,
    pub restored_q: Vec<u8>,
    pub restored_kw: Vec<f64>,
    pub repairs: Vec<Repair>,
    pub raw_completion: String,
}

impl RestorationResult {
    /// The complete quantized profile: known values outside the window,
    /// restored values inside it.
    pub fn full_profile_q(&self, day: &MaskedDay) -> Vec<u8> {
        let mut out: Vec<u8> = day.load.iter().map(|r| r.value().unwrap_or(0)).collect();
        out[day.mask.range()].copy_from_slice(&self.restored_q);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("restoration failed for {day_ref}: {reason} ({token_count} tokens, {unusable} unusable)")]
pub struct RestorationFailed {
    pub day_ref: DayRef,
    pub reason: String,
    pub token_count: usize,
    pub unusable: usize,
}

fn parse_token(tok: &str, v: PromptVariant) -> Option<u8> {
    if v.discard_encoding {
        tok.parse::<u16>()
            .ok()
            .filter(|&x| x <= MAX_WORD_VALUE as u16)
            .map(|x| x as u8)
    } else {
        match codec::decode_str(tok) {
            Ok(Reading::Value(x)) => Some(x),
            _ => None,
        }
    }
}

fn round_level(x: f64) -> u8 {
    x.round().clamp(0.0, MAX_LEVEL as f64) as u8
}

pub fn extract_restored(
    completion: &str,
    day: &MaskedDay,
    v: PromptVariant,
    params: &NormalizationParams,
) -> std::result::Result<RestorationResult, RestorationFailed> {
    let tokens: Vec<&str> = completion.split_whitespace().collect();
    let mut parsed: Vec<Option<u8>> = tokens.iter().map(|t| parse_token(t, v)).collect();
    let n = parsed.len();
    let fail = |reason: String, unusable: usize| RestorationFailed {
        day_ref: day.day_ref(),
        reason,
        token_count: n,
        unusable,
    };

    let mut repairs = Vec::new();
    if n.abs_diff(POINTS_PER_DAY) > LENGTH_TOLERANCE {
        let unusable = parsed.iter().filter(|p| p.is_none()).count();
        return Err(fail(
            format!("expected {POINTS_PER_DAY} +/- {LENGTH_TOLERANCE} tokens"),
            unusable,
        ));
    }
    if n > POINTS_PER_DAY {
        parsed.truncate(POINTS_PER_DAY);
        repairs.push(Repair::Truncated { from: n });
    } else if n < POINTS_PER_DAY {
        let last = parsed.iter().rev().find_map(|p| *p);
        let Some(last) = last else {
            return Err(fail("no valid token to pad with".into(), n));
        };
        parsed.resize(POINTS_PER_DAY, Some(last));
        repairs.push(Repair::Padded { from: n });
    }

    let unusable = parsed.iter().filter(|p| p.is_none()).count();
    let window = day.mask.range();
    let unusable_in_window = parsed[window.clone()].iter().filter(|p| p.is_none()).count();
    if unusable as f64 > MAX_UNUSABLE_FRACTION * POINTS_PER_DAY as f64
        || unusable_in_window as f64 > MAX_UNUSABLE_FRACTION * window.len() as f64
    {
        return Err(fail(
            format!("too many unusable tokens ({unusable_in_window} inside the window)"),
            unusable,
        ));
    }

    // Known values outside the window, completion values inside it.
    let mut profile: Vec<Option<u8>> = day.load.iter().map(|r| r.value()).collect();
    for i in window.clone() {
        profile[i] = parsed[i].map(|x| {
            if x > MAX_LEVEL {
                repairs.push(Repair::Clamped { index: i, value: x });
                MAX_LEVEL
            } else {
                x
            }
        });
    }
    let anchors = profile.clone();
    for i in window.clone() {
        if anchors[i].is_some() {
            continue;
        }
        let left = (0..i).rev().find_map(|j| anchors[j].map(|x| (j, x)));
        let right = (i + 1..POINTS_PER_DAY).find_map(|k| anchors[k].map(|x| (k, x)));
        let value = match (left, right) {
            (Some((j, a)), Some((k, b))) => {
                round_level(a as f64 + (b as f64 - a as f64) * (i - j) as f64 / (k - j) as f64)
            }
            (Some((_, a)), None) => a,
            (None, Some((_, b))) => b,
            (None, None) => unreachable!("the window never covers the whole day"),
        };
        profile[i] = Some(value);
        repairs.push(Repair::Interpolated { index: i });
    }

    let restored_q: Vec<u8> = profile[window].iter().map(|p| p.expect("filled")).collect();
    let restored_kw = restored_q
        .iter()
        .map(|&q| dequantize(q, params).expect("level within range"))
        .collect();
    Ok(RestorationResult {
        day_ref: day.day_ref(),
        restored_q,
        restored_kw,
        repairs,
        raw_completion: completion.to_string(),
    })
}

/// Ground truth for scoring: the held-out window on the quantized scale,
/// mapped back to kW.
pub fn scoring_truth(day: &MaskedDay, params: &NormalizationParams) -> Vec<f64> {
    day.truth_q
        .iter()
        .map(|&q| dequantize(q, params).expect("truth within range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleOutcome {
    Restored {
        result: RestorationResult,
        metrics: SampleMetrics,
    },
    Failed {
        day_ref: DayRef,
        error: String,
    },
}

impl SampleOutcome {
    pub fn day_ref(&self) -> &DayRef {
        match self {
            SampleOutcome::Restored { result, .. } => &result.day_ref,
            SampleOutcome::Failed { day_ref, .. } => day_ref,
        }
    }

    pub fn metrics(&self) -> Option<&SampleMetrics> {
        match self {
            SampleOutcome::Restored { metrics, .. } => Some(metrics),
            SampleOutcome::Failed { .. } => None,
        }
    }
}

pub fn restore_and_score(
    completion: &str,
    day: &MaskedDay,
    v: PromptVariant,
    params: &NormalizationParams,
) -> SampleOutcome {
    let result = match extract_restored(completion, day, v, params) {
        Ok(r) => r,
        Err(e) => {
            return SampleOutcome::Failed {
                day_ref: day.day_ref(),
                error: e.to_string(),
            }
        }
    };
    match sample_metrics(&scoring_truth(day, params), &result.restored_kw, params) {
        Ok(metrics) => SampleOutcome::Restored { result, metrics },
        Err(e) => SampleOutcome::Failed {
            day_ref: day.day_ref(),
            error: e.to_string(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMeta {
    pub label: String,
    pub model_id: String,
    pub params: NormalizationParams,
}

pub fn write_results(path: &Path, meta: &ResultsMeta, outcomes: &[SampleOutcome]) -> Result<()> {
    RESULTS_SCHEMA.write(path, meta, outcomes)
}

pub fn read_results(path: &Path) -> Result<(ResultsMeta, Vec<SampleOutcome>)> {
    RESULTS_SCHEMA.read(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{apply_mask, MaskSpec, QuantizedDay};
    use crate::promptset::render_completion;
    use chrono::NaiveDate;

    fn params() -> NormalizationParams {
        NormalizationParams::new(200.0, 1200.0, 60.0, 100.0).unwrap()
    }

    fn day(start: usize) -> MaskedDay {
        let q = QuantizedDay {
            user_id: "u".into(),
            date: NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(),
            load_q: (0..96).map(|i| 20 + i as u8).collect(),
            temp_q: vec![100; 96],
            load_kw: vec![500.0; 96],
        };
        apply_mask(&q, MaskSpec::new(start).unwrap()).unwrap()
    }

    fn words(values: &[u8]) -> Vec<String> {
        values
            .iter()
            .map(|&v| codec::encode(Reading::Value(v)).unwrap().to_string())
            .collect()
    }

    #[test]
    fn perfect_completion_needs_no_repairs() {
        let d = day(40);
        for v in [PromptVariant::default(), PromptVariant { discard_encoding: true, ..Default::default() }] {
            let text = render_completion(&d, v).unwrap();
            let r = extract_restored(&text, &d, v, &params()).unwrap();
            assert_eq!(r.restored_q, d.truth_q);
            assert!(r.repairs.is_empty());
            assert_eq!(r.full_profile_q(&d), d.full_truth_q());
            assert_eq!(r.restored_kw[0], 200.0 + 60.0 / 200.0 * 1000.0);
        }
    }

    #[test]
    fn sentinel_inside_window_is_interpolated() {
        let d = day(40);
        let mut w = words(&d.full_truth_q());
        w[45] = "OOOOO".into();
        let r = extract_restored(&w.join(" "), &d, PromptVariant::default(), &params()).unwrap();
        // neighbours 64 (pos 44) and 66 (pos 46) -> 65
        assert_eq!(r.restored_q[5], 65);
        assert_eq!(r.repairs, vec![Repair::Interpolated { index: 45 }]);
    }

    #[test]
    fn window_edge_uses_known_neighbour() {
        let d = day(40);
        let mut w = words(&d.full_truth_q());
        w[40] = "XXXXX".into();
        w[41] = "LLL".into();
        let r = extract_restored(&w.join(" "), &d, PromptVariant::default(), &params()).unwrap();
        // known 59 at pos 39, completion 62 at pos 42: 60, 61
        assert_eq!(&r.restored_q[..3], &[60, 61, 62]);
    }

    #[test]
    fn values_outside_window_are_ignored() {
        let d = day(40);
        let mut w = words(&d.full_truth_q());
        w[0] = "HHHHH".into();
        w[95] = "OOOOO".into();
        let r = extract_restored(&w.join(" "), &d, PromptVariant::default(), &params()).unwrap();
        assert_eq!(r.restored_q, d.truth_q);
        assert!(r.repairs.is_empty());
    }

    #[test]
    fn short_completion_is_padded() {
        let d = day(0);
        let w = words(&d.full_truth_q());
        let r = extract_restored(&w[..95].join(" "), &d, PromptVariant::default(), &params()).unwrap();
        assert_eq!(r.repairs, vec![Repair::Padded { from: 95 }]);
        assert_eq!(r.restored_q, d.truth_q);
    }

    #[test]
    fn long_completion_is_truncated() {
        let d = day(80);
        let mut w = words(&d.full_truth_q());
        w.extend(words(&[1, 2, 3, 4]));
        let r = extract_restored(&w.join(" "), &d, PromptVariant::default(), &params()).unwrap();
        assert_eq!(r.repairs, vec![Repair::Truncated { from: 100 }]);
        assert_eq!(r.restored_q, d.truth_q);
    }

    #[test]
    fn padding_reaches_into_the_window() {
        let d = day(80);
        let w = words(&d.full_truth_q());
        let r = extract_restored(&w[..92].join(" "), &d, PromptVariant::default(), &params()).unwrap();
        let last = d.full_truth_q()[91];
        assert_eq!(&r.restored_q[12..], &[last; 4]);
    }

    #[test]
    fn over_range_value_is_clamped() {
        let d = day(10);
        let mut w = words(&d.full_truth_q());
        w[12] = "HHHHH".into();
        let r = extract_restored(&w.join(" "), &d, PromptVariant::default(), &params()).unwrap();
        assert_eq!(r.restored_q[2], 200);
        assert_eq!(r.repairs, vec![Repair::Clamped { index: 12, value: 242 }]);
    }

    #[test]
    fn integer_completion_repairs() {
        let d = day(10);
        let v = PromptVariant { discard_encoding: true, ..Default::default() };
        let mut t: Vec<String> = d.full_truth_q().iter().map(|x| x.to_string()).collect();
        t[11] = "230".into();
        t[12] = "abc".into();
        let r = extract_restored(&t.join(" "), &d, v, &params()).unwrap();
        assert_eq!(r.restored_q[1], 200);
        // between clamped 200 @11 and 33 @13
        assert_eq!(r.restored_q[2], 117);
    }

    #[test]
    fn hopeless_completions_fail() {
        let d = day(10);
        let v = PromptVariant::default();
        let w = words(&d.full_truth_q());
        assert!(extract_restored(&w[..91].join(" "), &d, v, &params()).is_err());
        assert!(extract_restored("", &d, v, &params()).is_err());
        assert!(extract_restored(&vec!["junk"; 96].join(" "), &d, v, &params()).is_err());
        let mut w2 = w.clone();
        for t in w2.iter_mut().skip(10).take(5) {
            *t = "?".into();
        }
        let err = extract_restored(&w2.join(" "), &d, v, &params()).unwrap_err();
        assert_eq!(err.unusable, 5);
    }

    #[test]
    fn outcome_scores_against_quantized_truth() {
        let d = day(30);
        let text = render_completion(&d, PromptVariant::default()).unwrap();
        match restore_and_score(&text, &d, PromptVariant::default(), &params()) {
            SampleOutcome::Restored { metrics, .. } => {
                assert_eq!(metrics.mpe, 0.0);
                assert_eq!(metrics.rmse_kw, 0.0);
                assert_eq!(metrics.egye, 0.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            restore_and_score("nope", &d, PromptVariant::default(), &params()),
            SampleOutcome::Failed { .. }
        ));
    }
}
