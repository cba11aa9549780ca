//! Reduced-order state estimation for coupled neutronics and heat transfer.

pub mod error;
pub mod fields;
pub mod geim;
pub mod harness;
pub mod linalg;
pub mod multiphysics;
pub mod neutronics;
pub mod pbdw;
pub mod reduction;
pub mod sensing;
pub mod thermal;

pub use error::{Error, Result};
