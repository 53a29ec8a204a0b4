//! Online test-time adaptation of a two-modality classifier under randomly
//! missing modalities.

pub mod adapt;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod losses;
pub mod model;
pub mod stream;
