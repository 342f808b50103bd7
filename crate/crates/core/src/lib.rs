#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod checks;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod locator;
pub mod losses;
pub mod math;
pub mod ops;
pub mod scene;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Param, ParamSet, Tensor};
