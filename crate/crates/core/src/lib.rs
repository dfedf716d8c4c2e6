pub mod autograd;
pub mod checkpoint;
pub mod clipio;
pub mod config;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod protocol;
pub mod resample;
pub mod rfe;
pub mod stcf;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod visualize;
pub mod vte;
