use std::marker::PhantomData;

use rand::Rng;

use super::{Capabilities, KlDirection, Regime, UnnormalizedPair};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// A pair with some of its capabilities withheld.
///
/// Hiding closed forms or the path sampler turns a bundled family into the
/// black-box setting the estimators are built for, while keeping the
/// reference values available from the unmasked pair.
#[derive(Debug, Clone)]
pub struct MaskedPair<T, P> {
    inner: P,
    caps: Capabilities,
    _scalar: PhantomData<fn() -> T>,
}

impl<T: Real, P: UnnormalizedPair<T>> MaskedPair<T, P> {
    /// Every capability set in `hide` is removed.
    pub fn new(inner: P, hide: Capabilities) -> Self {
        let c = inner.capabilities();
        let caps = Capabilities {
            exact_pre_sampler: c.exact_pre_sampler && !hide.exact_pre_sampler,
            exact_post_sampler: c.exact_post_sampler && !hide.exact_post_sampler,
            exact_path_sampler: c.exact_path_sampler && !hide.exact_path_sampler,
            analytic_log_z_ratio: c.analytic_log_z_ratio && !hide.analytic_log_z_ratio,
            analytic_kl: c.analytic_kl && !hide.analytic_kl,
            analytic_score: c.analytic_score && !hide.analytic_score,
        };
        Self {
            inner,
            caps,
            _scalar: PhantomData,
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<T: Real, P: UnnormalizedPair<T>> UnnormalizedPair<T> for MaskedPair<T, P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    #[inline]
    fn log_density(&self, regime: Regime, x: &[T]) -> T {
        self.inner.log_density(regime, x)
    }

    #[inline]
    fn draw_into<R: Rng>(&self, regime: Regime, rng: &mut R, out: &mut [T]) -> Result<()> {
        if !self.caps.exact_sampler(regime) {
            return Err(Error::unsupported("exact sampling", self.name()));
        }
        self.inner.draw_into(regime, rng, out)
    }

    #[inline]
    fn draw_path_into<R: Rng>(&self, beta: T, rng: &mut R, out: &mut [T]) -> Result<()> {
        if !self.caps.exact_path_sampler {
            return Err(Error::unsupported(
                "exact geometric-path sampling",
                self.name(),
            ));
        }
        self.inner.draw_path_into(beta, rng, out)
    }

    fn log_z_ratio(&self) -> Option<T> {
        self.caps
            .analytic_log_z_ratio
            .then(|| self.inner.log_z_ratio())
            .flatten()
    }

    fn kl(&self, direction: KlDirection) -> Option<T> {
        self.caps
            .analytic_kl
            .then(|| self.inner.kl(direction))
            .flatten()
    }

    fn score(&self, regime: Regime, x: &[T]) -> Result<T> {
        if !self.caps.analytic_score {
            return Err(Error::unsupported("Hyvärinen score", self.name()));
        }
        self.inner.score(regime, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{analytic_log_z_ratio, hyvarinen_score, sample_path, BoltzmannPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_capabilities_are_unavailable() {
        let hide = Capabilities {
            exact_path_sampler: true,
            analytic_score: true,
            analytic_log_z_ratio: true,
            ..Capabilities::default()
        };
        let p = MaskedPair::new(BoltzmannPair::<f64>::default_pair(), hide);
        let c = p.capabilities();
        assert!(c.exact_pre_sampler && c.analytic_kl);
        assert!(!c.exact_path_sampler && !c.analytic_score);
        assert!(analytic_log_z_ratio(&p).is_none());
        assert!(hyvarinen_score(&p, Regime::Pre, &[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_path(&p, 0.5, &mut rng).is_err());
        assert_eq!(p.log_density(Regime::Post, &[1.2]), -1.0);
    }
}
