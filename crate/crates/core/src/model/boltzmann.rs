use rand::Rng;

use super::{Capabilities, KlDirection, Regime, UnnormalizedPair};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Temperature change in a one-dimensional Boltzmann (exponential) law.
///
/// `P~_T(x) = exp(-x/T)` on `x >= 0`, so `Z_T = T` and every reference
/// quantity has a closed form. The geometric path between two temperatures
/// stays exponential with rate `beta/T1 + (1-beta)/T0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoltzmannPair<T> {
    t_pre: T,
    t_post: T,
}

impl<T: Real> BoltzmannPair<T> {
    pub fn new(t_pre: T, t_post: T) -> Result<Self> {
        for (label, t) in [("t_pre", t_pre), ("t_post", t_post)] {
            if !(t > T::zero() && t.is_finite()) {
                return Err(Error::invalid(format!(
                    "{label}={t} must be a positive temperature"
                )));
            }
        }
        Ok(Self { t_pre, t_post })
    }

    /// `T0 = 1`, `T1 = 1.2`.
    pub fn default_pair() -> Self {
        Self {
            t_pre: T::one(),
            t_post: T::lit(1.2),
        }
    }

    pub fn t_pre(&self) -> T {
        self.t_pre
    }

    pub fn t_post(&self) -> T {
        self.t_post
    }

    fn temperature(&self, regime: Regime) -> T {
        match regime {
            Regime::Pre => self.t_pre,
            Regime::Post => self.t_post,
        }
    }

    /// Rate of the exponential law `P_beta`.
    pub fn path_rate(&self, beta: T) -> T {
        beta / self.t_post + (T::one() - beta) / self.t_pre
    }
}

impl<T: Real> UnnormalizedPair<T> for BoltzmannPair<T> {
    fn name(&self) -> &str {
        "boltzmann"
    }

    fn dim(&self) -> usize {
        1
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    #[inline]
    fn log_density(&self, regime: Regime, x: &[T]) -> T {
        let x = x[0];
        if x >= T::zero() {
            -x / self.temperature(regime)
        } else {
            T::neg_infinity()
        }
    }

    #[inline]
    fn draw_into<R: Rng>(&self, regime: Regime, rng: &mut R, out: &mut [T]) -> Result<()> {
        out[0] = self.temperature(regime) * T::std_exp(rng);
        Ok(())
    }

    #[inline]
    fn draw_path_into<R: Rng>(&self, beta: T, rng: &mut R, out: &mut [T]) -> Result<()> {
        out[0] = T::std_exp(rng) / self.path_rate(beta);
        Ok(())
    }

    fn log_z_ratio(&self) -> Option<T> {
        Some((self.t_pre / self.t_post).ln())
    }

    fn kl(&self, direction: KlDirection) -> Option<T> {
        // D(Exp(mean a) || Exp(mean b)) = ln(b/a) + a/b - 1
        let (a, b) = match direction {
            KlDirection::PostVsPre => (self.t_post, self.t_pre),
            KlDirection::PreVsPost => (self.t_pre, self.t_post),
        };
        Some((b / a).ln() + a / b - T::one())
    }

    fn score(&self, regime: Regime, x: &[T]) -> Result<T> {
        if !(x[0] >= T::zero()) {
            return Err(Error::Domain(format!(
                "x={} outside the support x >= 0",
                x[0]
            )));
        }
        // gradient is -1/T everywhere, laplacian 0
        let t = self.temperature(regime);
        Ok(T::lit(0.5) / (t * t))
    }
}
