pub mod captioner;
pub mod datakit;
pub mod decoder;
pub mod experiment;
pub mod metrics;
pub mod numcore;
pub mod taxonomy;
pub mod tokens;
pub mod trainer;
