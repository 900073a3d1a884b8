//! Dataset ingestion, splitting, class weighting, augmentation and batching.

pub mod augment;
mod batch;
mod dataset;
pub mod fixture;
mod image;

pub use self::augment::{augment, AugmentPolicy};
pub use self::batch::{batch_iterator, AugmentDraw, Batch, SplitData};
pub use self::dataset::{
    class_weights, load_dataset, split_dataset, split_indices, Item, LabeledImageSet, SplitIndices, SplitSpec,
};
pub use self::image::{stack, Image};
