pub mod adversary;
pub mod degrade;
pub mod mel;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod restormer;
pub mod sfi_stft;
pub mod trainer;
pub mod wav;
