//! f32 tensors, reverse-mode autodiff, PCA, ridge solves, and a naive DFT.

pub mod dft;
pub mod linalg;
pub mod pca;
pub mod tape;
pub mod tensor;

pub use dft::{dft_spectrum, dominant_bin, top_k_energy_fraction, SpectrumBin};
pub use linalg::{least_squares, pinv, principal_angle};
pub use pca::{pca_fit, total_variance, PcaModel};
pub use tape::{grad_check, GradCheckReport, Tape, Var};
pub use tensor::Tensor;
