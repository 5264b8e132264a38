#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod obstacles;
pub mod ocp;
pub mod perception;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/perception.md")]
    mod perception {}
    #[doc = include_str!("../../../book/src/obstacles.md")]
    mod obstacles {}
    #[doc = include_str!("../../../book/src/ocp.md")]
    mod ocp {}
    #[doc = include_str!("../../../book/src/qp.md")]
    mod qp {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/campaigns.md")]
    mod campaigns {}
}
