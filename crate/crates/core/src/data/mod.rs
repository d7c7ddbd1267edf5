//! Data ingest, preprocessing, windowing, batching and synthetic data.

pub mod batches;
pub mod cache;
pub mod ingest;
pub mod preprocess;
pub mod synth;
pub mod types;

pub use batches::make_domain_batches;
pub use cache::{dataset_hash, load_dataset, save_dataset};
pub use ingest::{ingest_csv, IngestReport};
pub use preprocess::{
    make_windows, minmax_normalize, moving_average, preprocess, resample_20hz, PipelineParams, Truncate,
};
pub use synth::{synth_generate, SynthSpec};
pub use types::{Dataset, DomainBatch, PipelineDescriptor, Sample, SubjectId, TimeSeries, Window};
