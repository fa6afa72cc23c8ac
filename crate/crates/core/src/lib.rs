pub mod control;
pub mod error;
pub mod harness;
pub mod hierarchical;
pub mod minlp;
pub mod nlp;
pub mod policy;
pub mod qp;
pub mod sqp;
pub mod vehicle;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/vehicle.md")]
    struct Vehicle;
    #[doc = include_str!("../../../book/src/fixed-gear-mpc.md")]
    struct FixedGearMpc;
    #[doc = include_str!("../../../book/src/gear-search.md")]
    struct GearSearch;
    #[doc = include_str!("../../../book/src/policy.md")]
    struct Policy;
    #[doc = include_str!("../../../book/src/closed-loop.md")]
    struct ClosedLoop;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
}
