//! Neural-network-parameterized multi-scale topology optimization in 2D.
//!
//! A small coordinate-input density network is trained per problem to design
//! graded, mutually connected microstructure cells against stiffness-tensor
//! targets, concurrent macro/micro compliance, or displacement-matching
//! metamaterial objectives. Results are verified against Hashin-Shtrikman
//! bounds.

pub mod cli_io;
pub mod driver;
pub mod error;
pub mod field_net;
pub mod homogenize;
pub mod macro_fe;
pub mod objectives;
pub mod sampling;

pub use error::{Error, Result};
