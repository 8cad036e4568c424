//! Scalar abstraction shared by the `f64` solver path and the dual-number
//! path used to differentiate the unrolled solver.

use nalgebra::RealField;
use num_dual::{Dual64, DualSVec64};

/// A real scalar usable throughout the alignment pipeline.
///
/// Every geometric and solver routine that can sit on the differentiated
/// path is generic over this trait. Branching decisions (cell indices,
/// validity checks, stopping rules) always look at [`Real::value`].
pub trait Real: RealField + Copy {
    /// The primal value.
    fn value(self) -> f64;

    /// Lift a constant.
    fn lit(x: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
}

impl Real for Dual64 {
    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn lit(x: f64) -> Self {
        Dual64::from_re(x)
    }
}

/// Vector-valued dual: all partial derivatives in one pass.
impl<const N: usize> Real for DualSVec64<N> {
    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn lit(x: f64) -> Self {
        DualSVec64::from_re(x)
    }
}
