//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

/// Floating point scalar: `f32` or `f64`.
///
/// Besides the `num-traits` arithmetic surface this carries the three
/// primitive random variates every sampler in the crate is built from, so
/// generic code never has to spell out `Distribution<T>` bounds.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Draw from N(0, 1).
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw from Exponential(rate 1).
    fn std_exp<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw from Uniform[0, 1).
    fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossy conversion of a literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample(StandardNormal)
            }

            #[inline]
            fn std_exp<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample(Exp1)
            }

            #[inline]
            fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.random::<$t>()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// `log(sum(exp(v)))` computed with the usual max shift.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let acc: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + acc.ln()
}

/// Streaming mean/variance (Welford).
///
/// The running mean of a constant sequence is that constant bitwise, which
/// the CUSUM/LPA path equivalence relies on.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<T> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Real> Default for RunningStats<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> RunningStats<T> {
    pub fn new() -> Self {
        Self {
            n: 0,
            mean: T::zero(),
            m2: T::zero(),
        }
    }

    #[inline]
    pub fn push(&mut self, x: T) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean = self.mean + delta / T::from_count(self.n);
        self.m2 = self.m2 + delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two points.
    pub fn variance(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            (self.m2 / T::from_count(self.n - 1)).max(T::zero())
        }
    }

    pub fn std_error(&self) -> T {
        if self.n == 0 {
            T::zero()
        } else {
            (self.variance() / T::from_count(self.n)).sqrt()
        }
    }
}

impl<T: Real> FromIterator<T> for RunningStats<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}
