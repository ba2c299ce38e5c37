//! Numeric traits shared by the distance, clustering and embedding code.
//!
//! Clustering only needs field arithmetic and ordering, so it runs over
//! [`Scalar`], which includes exact rationals. Anything that takes a square
//! root (soft cosine, embeddings) requires [`Real`].

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

pub trait Scalar: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn is_unordered(&self) -> bool {
        self.partial_cmp(self).is_none()
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Clamp into `[0, 1]`.
    fn unit_clamp(self) -> Self {
        self.max_of(Self::zero()).min_of(Self::one())
    }
}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {}

pub trait Real: Scalar + Float {}

impl<T> Real for T where T: Scalar + Float {}

/// Exact rational scalar, used where results must compare bit-for-bit.
pub type Exact = num_rational::Ratio<i128>;
