//! Stereo disparity estimation with a lightweight 3D aggregation network and
//! feature-guided shuffle-mixer upsampling.

pub mod aggregate;
pub mod backbone;
pub mod config;
pub mod costvol;
pub mod data;
pub mod error;
pub mod esm;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;

pub use aggregate::{regress_disparity, DisparityMap, Hourglass3d};
pub use backbone::{Backbone, FeaturePyramid};
pub use config::{ModelConfig, Variant, VolumeKind};
pub use costvol::{build_gwc_volume, build_norm_corr_volume, CostVolume};
pub use error::{Error, Result};
pub use model::{EsmStereo, ForwardOutput};
pub use nn::{Ctx, ParamStore};
