pub mod plan;
pub mod profile_synth;
pub mod report;
pub mod simulate;
pub mod tune_toy;
