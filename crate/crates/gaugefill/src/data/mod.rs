//! Data path: ingestion, rainy-hour selection, instance-wise
//! standardization, mean-fill, dynamic masking, and de-standardization.

pub mod ingest;
pub mod manifest;
pub mod mask;

pub use ingest::{read_records, read_roster, select_rainy_hours, Snapshot};
pub use manifest::{load_dataset, DatasetManifest, LoadedDataset, SplitIndices};
pub use mask::{
    destandardize, dynamic_mask, epoch_sequences, fill_for_inference, EpochConfig, FillMode,
    InferenceSequence, InstanceStats, MaskedSequence,
};
