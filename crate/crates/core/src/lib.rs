//! Diversity-based selection and prioritization of test inputs for prompt
//! templates.
//!
//! Test inputs live in a [`corpus::TestPool`]. [`selection::adaptive_select`]
//! orders them by adaptive random testing over a [`distance::DistanceFunction`],
//! running each pick through an [`execution::Executor`] so that failing inputs
//! can be kept out of the reference set. [`tsdm::tsdm_select`] is the static
//! test-set-diameter baseline and [`evaluation`] holds the metrics used to
//! compare orderings.

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod distance;
pub mod evaluation;
pub mod execution;
pub mod manifest;
pub mod report;
pub mod selection;
pub mod synthetic;
pub mod tsdm;
