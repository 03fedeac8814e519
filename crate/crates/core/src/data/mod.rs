//! Synthetic data and every on-disk format.

mod shapes;

pub use shapes::{generate_shapes_dataset, BackgroundKind, Sample, ShapeDatasetSpec, ShapeKind};
