use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{Capabilities, Regime, UnnormalizedPair};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub type LogDensityFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;
pub type SamplerFn<T> = Arc<dyn Fn(&mut dyn RngCore, &mut [T]) + Send + Sync>;

/// User-supplied pair: two log densities and optional exact samplers.
///
/// No path sampler and no closed forms, so the partition oracle falls back
/// to importance sampling or random-walk Metropolis for these.
#[derive(Clone)]
pub struct CustomPair<T> {
    name: String,
    dim: usize,
    log_pre: LogDensityFn<T>,
    log_post: LogDensityFn<T>,
    sampler_pre: Option<SamplerFn<T>>,
    sampler_post: Option<SamplerFn<T>>,
}

impl<T> fmt::Debug for CustomPair<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPair")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("sampler_pre", &self.sampler_pre.is_some())
            .field("sampler_post", &self.sampler_post.is_some())
            .finish()
    }
}

impl<T: Real> CustomPair<T> {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        log_pre: impl Fn(&[T]) -> T + Send + Sync + 'static,
        log_post: impl Fn(&[T]) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("custom pair needs dimension >= 1"));
        }
        Ok(Self {
            name: name.into(),
            dim,
            log_pre: Arc::new(log_pre),
            log_post: Arc::new(log_post),
            sampler_pre: None,
            sampler_post: None,
        })
    }

    pub fn with_sampler(
        mut self,
        regime: Regime,
        sampler: impl Fn(&mut dyn RngCore, &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        let s: SamplerFn<T> = Arc::new(sampler);
        match regime {
            Regime::Pre => self.sampler_pre = Some(s),
            Regime::Post => self.sampler_post = Some(s),
        }
        self
    }
}

impl<T: Real> UnnormalizedPair<T> for CustomPair<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            exact_pre_sampler: self.sampler_pre.is_some(),
            exact_post_sampler: self.sampler_post.is_some(),
            ..Capabilities::default()
        }
    }

    fn log_density(&self, regime: Regime, x: &[T]) -> T {
        match regime {
            Regime::Pre => (self.log_pre)(x),
            Regime::Post => (self.log_post)(x),
        }
    }

    fn draw_into<R: Rng>(&self, regime: Regime, rng: &mut R, out: &mut [T]) -> Result<()> {
        let sampler = match regime {
            Regime::Pre => &self.sampler_pre,
            Regime::Post => &self.sampler_post,
        };
        match sampler {
            Some(s) => {
                s(rng, out);
                Ok(())
            }
            None => Err(Error::unsupported("exact sampling", self.name.clone())),
        }
    }
}
