//! Three-dimensional radio localization from multi-array OFDM channel state
//! information.
//!
//! The crate covers the whole pipeline: synthetic multipath datasets
//! ([`scenesim`]), classical AoA triangulation ([`classical`]), beamspace
//! features ([`beamfeat`]), geodesic dissimilarities ([`dissim`]), Siamese and
//! augmented channel charting ([`chartnet`]), multistory charting
//! ([`multistory`]) and evaluation ([`evalkit`]).

pub mod beamfeat;
pub mod chartnet;
pub mod cli;
pub mod classical;
pub mod dissim;
pub mod dsp;
pub mod evalkit;
pub mod multistory;
pub mod pipeline;
pub mod scalar;
pub mod scenesim;
pub mod tensors;

pub use scalar::Real;

pub use chartnet::{Mlp32, Mlp64};
pub type Affine64 = evalkit::Affine<f64>;
pub type Affine32 = evalkit::Affine<f32>;
