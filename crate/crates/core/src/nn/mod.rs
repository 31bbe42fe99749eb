//! A small convolutional encoder-decoder with hand-written backpropagation.
//!
//! The network is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run the identical code path in `f64`.

mod adam;
mod backbone;
mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use backbone::{Backbone, BackboneConfig, MixPoint, StageSpec, Trace};
pub use params::{Param, ParamStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point element type the network can run in.
pub trait Real:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + Debug + Display + Default + Send + Sync + Sum + 'static
{
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}
