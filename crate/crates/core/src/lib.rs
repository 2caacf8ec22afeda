pub mod artifacts;
pub mod cavi;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod gibbs;
pub mod io;
pub mod lap;
pub mod math;
pub mod model;
pub mod relabel;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Dataset, Hyperparameters, ModelState};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/simulate.md")]
    mod simulate {}
    #[doc = include_str!("../../../book/src/gibbs.md")]
    mod gibbs {}
    #[doc = include_str!("../../../book/src/cavi.md")]
    mod cavi {}
    #[doc = include_str!("../../../book/src/relabel.md")]
    mod relabel {}
    #[doc = include_str!("../../../book/src/evaluate.md")]
    mod evaluate {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
