pub mod attribution;
pub mod autodiff;
pub mod encoder;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod train;
