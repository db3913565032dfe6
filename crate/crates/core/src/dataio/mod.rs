//! Dataset container format, CT-style preprocessing, supervision
//! partitioning and the synthetic phantom generator.

mod dataset;
mod phantom;
mod preprocess;
mod volume;

pub use dataset::{
    load_dataset, save_dataset, split_dir, split_supervision, Dataset, Sample, Split,
    DATASET_FORMAT, DATASET_HEADER, DATASET_VERSION,
};
pub use phantom::{generate_phantom_volume, generate_phantoms, PhantomConfig, PhantomVolume};
pub use preprocess::{
    derive_class_label, extract_middle_slices, volume_to_samples, window_level, PreprocessConfig,
    RawVolume,
};
pub use volume::{load_volumes, save_volumes, VOLUME_HEADER, VOLUME_VERSION};
