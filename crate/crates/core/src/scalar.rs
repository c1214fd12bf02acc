use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real floating-point type accepted by the dense linear algebra.
pub trait Scalar: Float + FromPrimitive + NumAssign + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the scalar type")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + NumAssign + Debug + Send + Sync + 'static {}
