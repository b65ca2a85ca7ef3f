pub mod ablation;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod dcconv;
pub mod error;
pub mod hwfeb;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod runconfig;
pub mod ss2d;
pub mod synthdata;
pub mod ssm;
pub mod tensor;
pub mod verify;
pub mod train;
pub mod wavelet;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/wavelets.md")]
    mod wavelets {}
    #[doc = include_str!("../../../book/src/scan.md")]
    mod scan {}
    #[doc = include_str!("../../../book/src/contour.md")]
    mod contour {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
