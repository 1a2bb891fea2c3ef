pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod recon;
pub mod rng;
pub mod run;
pub mod sheaf;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/sheaves.md")]
    mod sheaves {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/latent-fusion.md")]
    mod latent_fusion {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data-and-cli.md")]
    mod data_and_cli {}
}
