//! Low-light image enhancement with a wavelet U-Net trained by reverse-mode
//! autodiff on the CPU.
//!
//! The crate is organised bottom-up: [`tensor`] (arrays, kernels, autodiff),
//! [`wavelet`] (Haar transform and sub-band attention), [`network`],
//! [`losses`], [`metrics`], [`training`], [`checkpoint`], [`dataio`] and the
//! [`cli`] used by the `wavenhance` binary.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod wavelet;
