//! Missing-window restoration of daily load profiles with fine-tuned chat
//! models: ingestion, quantization and masking, prompt construction,
//! backends, restoration, scoring and cost accounting.

pub mod backend;
pub mod codec;
pub mod costing;
pub mod error;
pub mod ingestion;
pub mod metrics;
pub mod preprocess;
pub mod promptset;
pub mod orchestrator;
pub mod records;
pub mod report;
pub mod restorer;
pub mod seed;
pub mod synth;

pub use backend::{Backend, BackendHandle, BackendKind, FineTuneJob, JobStatus, Stage};
pub use codec::{Reading, TernaryWord};
pub use costing::CostModel;
pub use error::{Error, Result};
pub use ingestion::DailyProfile;
pub use metrics::{MetricsReport, SampleMetrics};
pub use preprocess::{DayRef, MaskSpec, MaskedDay, NormalizationParams, PreparedDataset};
pub use promptset::{ChatMessage, ChatSample, PromptVariant, Role};
pub use restorer::{RestorationFailed, RestorationResult, SampleOutcome};
pub use orchestrator::{ManifestRow, Runner, ScenarioConfig, StagePlan};
