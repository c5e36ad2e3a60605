pub mod blocks;
pub mod error;
pub mod harness;
pub mod image;
pub mod labelpipe;
pub mod losses;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/selective-scan.md")]
    mod selective_scan {}
    #[doc = include_str!("../../../book/src/context-tokens.md")]
    mod context_tokens {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/label-curation.md")]
    mod label_curation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
