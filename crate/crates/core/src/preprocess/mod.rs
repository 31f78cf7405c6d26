//! Encoding, splitting and class-imbalance resampling.

mod dataset;
mod encoder;
mod table;

pub use dataset::{
    one_hot, resample, resample_target, split, split_indices, stratified_subsample, EncodedDataset, Provenance,
};
pub use encoder::{fit_encoder, transform, ColumnAction, EncoderSpec, STD_FLOOR};
pub use table::{flow_classes, RawTable};

pub const DEFAULT_FLOOR_FRACTION: f64 = 0.05;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
