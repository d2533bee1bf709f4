//! Training-token estimates and fine-tuning cost.

use serde::{Deserialize, Serialize};

use crate::backend::{FineTuneJob, JobStatus};
use crate::error::{Error, Result};
use crate::promptset::ChatSample;

pub const DEFAULT_PRICE_PER_MILLION: f64 = 8.0;
pub const DEFAULT_EPOCHS: u32 = 3;
pub const DEFAULT_CHARS_PER_TOKEN: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounter {
    Approximate,
    ProviderReported,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub price_per_million_tokens: f64,
    pub epochs: u32,
    pub chars_per_token: f64,
    pub counter: TokenCounter,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            price_per_million_tokens: DEFAULT_PRICE_PER_MILLION,
            epochs: DEFAULT_EPOCHS,
            chars_per_token: DEFAULT_CHARS_PER_TOKEN,
            counter: TokenCounter::Approximate,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.price_per_million_tokens.is_nan() || self.price_per_million_tokens <= 0.0 {
            return Err(Error::Config("price per million tokens must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.chars_per_token.is_nan() || self.chars_per_token <= 0.0 {
            return Err(Error::Config("chars per token must be positive".into()));
        }
        Ok(())
    }
}

/// `ceil(total content characters / chars_per_token)` for one pass over the data.
pub fn approximate_tokens(samples: &[ChatSample], chars_per_token: f64) -> u64 {
    let chars: usize = samples.iter().map(ChatSample::content_chars).sum();
    (chars as f64 / chars_per_token).ceil() as u64
}

/// Tokens trained: the provider's figure from a succeeded job, or the
/// approximate per-pass count times the epoch count.
pub fn estimate_tokens(
    samples: &[ChatSample],
    model: &CostModel,
    job: Option<&FineTuneJob>,
) -> Result<u64> {
    match model.counter {
        TokenCounter::Approximate => {
            Ok(approximate_tokens(samples, model.chars_per_token) * model.epochs as u64)
        }
        TokenCounter::ProviderReported => match job {
            Some(j) if j.status == JobStatus::Succeeded => j.trained_tokens.ok_or_else(|| {
                Error::Validation(format!("job {} has no trained token count", j.job_id))
            }),
            Some(j) => Err(Error::Dependency(format!(
                "job {} has status {:?}, not succeeded",
                j.job_id, j.status
            ))),
            None => Err(Error::Dependency(
                "provider-reported counting needs a fine-tune job".into(),
            )),
        },
    }
}

pub fn estimate_cost(tokens_trained: u64, model: &CostModel) -> f64 {
    tokens_trained as f64 * model.price_per_million_tokens / 1_000_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub samples: usize,
    pub tokens: u64,
    pub cost: f64,
    /// Extrapolated from the mean per-sample count (dataset too small).
    pub extrapolated: bool,
}

/// Tokens and cost for the first `n` samples of a dataset for each `n`;
/// sizes beyond the dataset scale the mean per-sample count.
pub fn cost_curve(samples: &[ChatSample], sizes: &[usize], model: &CostModel) -> Vec<CostRow> {
    let epochs = model.epochs as u64;
    sizes
        .iter()
        .map(|&n| {
            let (tokens, extrapolated) = if n <= samples.len() {
                (approximate_tokens(&samples[..n], model.chars_per_token) * epochs, false)
            } else {
                let chars: usize = samples.iter().map(ChatSample::content_chars).sum();
                let per_sample = chars as f64 / samples.len().max(1) as f64;
                (
                    (per_sample * n as f64 / model.chars_per_token).ceil() as u64 * epochs,
                    true,
                )
            };
            CostRow {
                samples: n,
                tokens,
                cost: estimate_cost(tokens, model),
                extrapolated,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::DayRef;
    use crate::promptset::{ChatMessage, PromptVariant};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn sample(chars: usize) -> ChatSample {
        ChatSample {
            messages: vec![ChatMessage::user("x".repeat(chars))],
            variant: PromptVariant::default(),
            day_ref: DayRef {
                user_id: "u".into(),
                date: NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(),
                mask_start: 0,
            },
        }
    }

    #[test]
    fn character_ratio() {
        assert_eq!(approximate_tokens(&[sample(35)], 3.5), 10);
        assert_eq!(approximate_tokens(&[sample(36)], 3.5), 11);
        let one = vec![sample(70); 3];
        let two = vec![sample(70); 6];
        assert_eq!(approximate_tokens(&two, 3.5), 2 * approximate_tokens(&one, 3.5));
    }

    #[test]
    fn price_anchors() {
        let m = CostModel::default();
        assert_eq!(estimate_cost(0, &m), 0.0);
        assert!((estimate_cost(1_000_000, &m) - 8.0).abs() < 1e-12);
        assert!((estimate_cost(1_625_000, &m) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn approximate_path_multiplies_epochs() {
        let m = CostModel::default();
        assert_eq!(estimate_tokens(&[sample(35)], &m, None).unwrap(), 30);
    }

    #[test]
    fn curve_is_monotone() {
        let samples: Vec<_> = (0..300).map(|i| sample(100 + i % 7)).collect();
        let rows = cost_curve(&samples, &[128, 256, 512], &CostModel::default());
        assert!(rows.windows(2).all(|w| w[0].tokens < w[1].tokens && w[0].cost < w[1].cost));
        assert!(!rows[1].extrapolated);
        assert!(rows[2].extrapolated);
    }

    proptest! {
        #[test]
        fn cost_is_additive(a in 0u64..50_000_000, b in 0u64..50_000_000) {
            let m = CostModel::default();
            let lhs = estimate_cost(a + b, &m);
            let rhs = estimate_cost(a, &m) + estimate_cost(b, &m);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1.0));
        }
    }
}
