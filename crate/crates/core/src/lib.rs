pub mod autodiff;
pub mod cost;
pub mod data;
pub mod dsp;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod train;
