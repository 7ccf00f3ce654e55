//! Electrical-noise removal for optoacoustic sinograms and the downstream
//! reconstruction, unmixing and evaluation stages.

pub mod config;
pub mod denoiser;
pub mod dsp;
pub mod error;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod operator;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod types;
pub mod unmix;

pub use error::{Error, Result};
pub use forward::ForwardOperator;
pub use rng::{seeded_rng, OaRng, RngSeed};
pub use types::{ArrayGeometry, GridSpec, ImageGrid, MultispectralStack, Sinogram};
