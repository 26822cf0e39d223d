pub mod blocks;
pub mod check;
pub mod data;
pub mod diffusion;
pub mod embed;
pub mod finetune;
pub mod metrics;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod voxel;
