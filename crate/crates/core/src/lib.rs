//! Open-vocabulary affordance detection on point clouds with geometric-relation
//! and attention-map distillation from a frozen teacher.

pub mod attndistill;
pub mod binio;
pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod geodistill;
pub mod ndcore;
pub mod pointcloud;
pub mod textcorr;
pub mod trainer;

pub use error::{Error, Result};
pub use ndcore::{Matrix, ParamSet};
pub use pointcloud::{AnchorSet, PointCloud};
