//! Unnormalized pre/post-change model pairs.
//!
//! A pair exposes `log P~0(x)` and `log P~1(x)` (natural log, up to unknown
//! normalizing constants `Z0`, `Z1`) plus whatever extra structure the
//! concrete family offers: exact samplers for either side, an exact sampler
//! for the geometric path `P_beta ∝ P~1^beta * P~0^(1-beta)`, and closed forms
//! for `log(Z0/Z1)`, the KL divergences and the Hyvärinen score. Each of
//! those is advertised through [`Capabilities`].

mod boltzmann;
mod custom;
mod gaussian;
mod masked;

pub use boltzmann::BoltzmannPair;
pub use custom::{CustomPair, LogDensityFn, SamplerFn};
pub use gaussian::{GaussianPair, MVN10_SIGMA_POST, MVN10_SIGMA_PRE};
pub use masked::MaskedPair;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Which side of the change point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pre,
    Post,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Pre => "pre-change",
            Regime::Post => "post-change",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D_KL(P1, P0)`, the post-change drift of the log-likelihood ratio.
    PostVsPre,
    /// `D_KL(P0, P1)`.
    PreVsPost,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub exact_pre_sampler: bool,
    pub exact_post_sampler: bool,
    pub exact_path_sampler: bool,
    pub analytic_log_z_ratio: bool,
    pub analytic_kl: bool,
    pub analytic_score: bool,
}

impl Capabilities {
    pub const ALL: Self = Self {
        exact_pre_sampler: true,
        exact_post_sampler: true,
        exact_path_sampler: true,
        analytic_log_z_ratio: true,
        analytic_kl: true,
        analytic_score: true,
    };

    pub fn exact_sampler(&self, regime: Regime) -> bool {
        match regime {
            Regime::Pre => self.exact_pre_sampler,
            Regime::Post => self.exact_post_sampler,
        }
    }
}

/// One observation `X_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T>(Vec<T>);

impl<T: Real> Sample<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn scalar(x: T) -> Self {
        Self(vec![x])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> AsRef<[T]> for Sample<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for Sample<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// An unnormalized pre/post density pair.
///
/// Only `log_density` is mandatory. The sampling and closed-form hooks have
/// defaults that report the operation as unsupported; implementors override
/// the ones their [`Capabilities`] advertise. Sampling hooks write into a
/// caller buffer of length [`dim`](Self::dim) because they sit in the
/// innermost oracle loop.
pub trait UnnormalizedPair<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    /// `log P~(x)` for the given side; `-inf` outside the support.
    fn log_density(&self, regime: Regime, x: &[T]) -> T;

    fn draw_into<R: Rng>(&self, regime: Regime, _rng: &mut R, _out: &mut [T]) -> Result<()> {
        Err(Error::unsupported(
            match regime {
                Regime::Pre => "exact pre-change sampling",
                Regime::Post => "exact post-change sampling",
            },
            self.name(),
        ))
    }

    /// Exact draw from `P_beta` for `0 < beta < 1`; the endpoints are routed
    /// to [`draw_into`](Self::draw_into) by [`sample_path`].
    fn draw_path_into<R: Rng>(&self, _beta: T, _rng: &mut R, _out: &mut [T]) -> Result<()> {
        Err(Error::unsupported(
            "exact geometric-path sampling",
            self.name(),
        ))
    }

    /// `log(Z0/Z1)`.
    fn log_z_ratio(&self) -> Option<T> {
        None
    }

    fn kl(&self, _direction: KlDirection) -> Option<T> {
        None
    }

    /// Hyvärinen score `1/2 |grad log p~(x)|^2 + laplacian log p~(x)`.
    fn score(&self, _regime: Regime, _x: &[T]) -> Result<T> {
        Err(Error::unsupported("Hyvärinen score", self.name()))
    }
}

/// `log w(x) = log P~1(x) - log P~0(x)`; for the geometric path this is also
/// the potential derivative `U'_beta(x)` at every beta.
#[inline]
pub fn log_weight<T: Real, P: UnnormalizedPair<T> + ?Sized>(pair: &P, x: &[T]) -> Result<T> {
    let post = pair.log_density(Regime::Post, x);
    if !post.is_finite() {
        return Err(Error::Domain(format!(
            "post-change log density of `{}` is {post} at {x:?}",
            pair.name()
        )));
    }
    let pre = pair.log_density(Regime::Pre, x);
    if !pre.is_finite() {
        return Err(Error::Domain(format!(
            "pre-change log density of `{}` is {pre} at {x:?}",
            pair.name()
        )));
    }
    Ok(post - pre)
}

/// `n` i.i.d. draws from the normalized pre- or post-change density.
pub fn sample_source<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    regime: Regime,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Sample<T>>> {
    if !pair.capabilities().exact_sampler(regime) {
        return Err(Error::unsupported(
            match regime {
                Regime::Pre => "exact pre-change sampling",
                Regime::Post => "exact post-change sampling",
            },
            pair.name(),
        ));
    }
    (0..n)
        .map(|_| {
            let mut buf = vec![T::zero(); pair.dim()];
            pair.draw_into(regime, rng, &mut buf)?;
            Ok(Sample::new(buf))
        })
        .collect()
}

/// Write one exact draw from `P_beta` into `out`.
///
/// `beta == 0` and `beta == 1` consume the generator exactly like the pre-
/// and post-change samplers, so a fixed seed reproduces those draws bitwise.
pub fn sample_path_into<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    beta: T,
    rng: &mut R,
    out: &mut [T],
) -> Result<()> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::invalid(format!("beta={beta} outside [0, 1]")));
    }
    if !pair.capabilities().exact_path_sampler {
        return Err(Error::unsupported(
            "exact geometric-path sampling",
            pair.name(),
        ));
    }
    if beta == T::zero() {
        pair.draw_into(Regime::Pre, rng, out)
    } else if beta == T::one() {
        pair.draw_into(Regime::Post, rng, out)
    } else {
        pair.draw_path_into(beta, rng, out)
    }
}

pub fn sample_path<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    beta: T,
    rng: &mut R,
) -> Result<Sample<T>> {
    let mut buf = vec![T::zero(); pair.dim()];
    sample_path_into(pair, beta, rng, &mut buf)?;
    Ok(Sample::new(buf))
}

/// Reference `log(Z0/Z1)` when the family has one.
pub fn analytic_log_z_ratio<T: Real, P: UnnormalizedPair<T> + ?Sized>(pair: &P) -> Option<T> {
    if pair.capabilities().analytic_log_z_ratio {
        pair.log_z_ratio()
    } else {
        None
    }
}

pub fn analytic_kl<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    direction: KlDirection,
) -> Option<T> {
    if pair.capabilities().analytic_kl {
        pair.kl(direction)
    } else {
        None
    }
}

pub fn hyvarinen_score<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    regime: Regime,
    x: &[T],
) -> Result<T> {
    if !pair.capabilities().analytic_score {
        return Err(Error::unsupported("Hyvärinen score", pair.name()));
    }
    pair.score(regime, x)
}

/// The two bundled experiment families behind one type.
// one value per process; boxing would only add an indirection to every call
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum ModelPair<T: Real> {
    Gaussian(GaussianPair<T>),
    Boltzmann(BoltzmannPair<T>),
}

impl<T: Real> ModelPair<T> {
    /// Names accepted by [`by_name`](Self::by_name).
    pub const NAMES: [&'static str; 2] = ["mvn10", "boltzmann"];

    /// Bundled pair by name: `mvn10` or `boltzmann`.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mvn10" => Some(Self::Gaussian(GaussianPair::mvn10())),
            "boltzmann" => Some(Self::Boltzmann(BoltzmannPair::default_pair())),
            _ => None,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            ModelPair::Gaussian($p) => $e,
            ModelPair::Boltzmann($p) => $e,
        }
    };
}

impl<T: Real> UnnormalizedPair<T> for ModelPair<T> {
    fn name(&self) -> &str {
        delegate!(self, p => p.name())
    }

    fn dim(&self) -> usize {
        delegate!(self, p => p.dim())
    }

    fn capabilities(&self) -> Capabilities {
        delegate!(self, p => p.capabilities())
    }

    #[inline]
    fn log_density(&self, regime: Regime, x: &[T]) -> T {
        delegate!(self, p => p.log_density(regime, x))
    }

    #[inline]
    fn draw_into<R: Rng>(&self, regime: Regime, rng: &mut R, out: &mut [T]) -> Result<()> {
        delegate!(self, p => p.draw_into(regime, rng, out))
    }

    #[inline]
    fn draw_path_into<R: Rng>(&self, beta: T, rng: &mut R, out: &mut [T]) -> Result<()> {
        delegate!(self, p => p.draw_path_into(beta, rng, out))
    }

    fn log_z_ratio(&self) -> Option<T> {
        delegate!(self, p => p.log_z_ratio())
    }

    fn kl(&self, direction: KlDirection) -> Option<T> {
        delegate!(self, p => p.kl(direction))
    }

    fn score(&self, regime: Regime, x: &[T]) -> Result<T> {
        delegate!(self, p => p.score(regime, x))
    }
}
