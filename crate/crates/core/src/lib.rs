pub mod config;
pub mod csp;
pub mod dataset;
pub mod dynamics;
pub mod emcs;
pub mod error;
pub mod evalbench;
pub mod indicator;
pub mod integrate;
pub mod linalg;
pub mod surrogate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/systems.md")]
    mod systems {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/timescales.md")]
    mod timescales {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    mod surrogate {}
    #[doc = include_str!("../../../book/src/hybrid.md")]
    mod hybrid {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
