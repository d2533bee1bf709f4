//! Fixtures shared by the benchmarks.

use chrono::NaiveDate;
use loadpatch_core::preprocess::{apply_mask, QuantizedDay};
use loadpatch_core::{MaskSpec, MaskedDay, NormalizationParams, PromptVariant};

pub fn params() -> NormalizationParams {
    NormalizationParams::new(210.0, 1751.0, 60.0, 100.0).expect("valid range")
}

/// A deterministic day masked at `start`.
pub fn day(start: usize) -> MaskedDay {
    let q = QuantizedDay {
        user_id: "bench".into(),
        date: NaiveDate::from_ymd_opt(2018, 7, 1).expect("valid date"),
        load_q: (0..96).map(|i| ((i * 37 + 11) % 201) as u8).collect(),
        temp_q: (0..96).map(|i| (60 + (i * 7) % 90) as u8).collect(),
        load_kw: vec![500.0; 96],
    };
    apply_mask(&q, MaskSpec::new(start).expect("valid start")).expect("96 points")
}

pub fn variants() -> [PromptVariant; 2] {
    [
        PromptVariant { advanced: true, separate_load_temp: true, discard_encoding: false },
        PromptVariant { advanced: true, separate_load_temp: false, discard_encoding: true },
    ]
}
