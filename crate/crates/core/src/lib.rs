//! ExtremeC3Net portrait segmentation on the CPU: a tape-based autodiff
//! engine, the C3 network, Lovász-Softmax with a boundary term, a data
//! pipeline, two-stage training and static cost analysis.

pub mod autodiff;
pub mod c3;
pub mod complexity;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

/// The guide in `book/`, compiled so its code blocks run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/complexity.md")]
    pub mod complexity {}
    #[doc = include_str!("../../../book/src/loss.md")]
    pub mod loss {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
