//! Rare-latent acquisition.
//!
//! The density `f` places a normal bump of width `sigma_u` at `+|mu_u|` on the
//! non-negative half-line and its mirror image at `-|mu_u|` on the negative
//! half-line, renormalized by `A`. Latents drawn from it are improbable under
//! the standard-normal prior once `mu_u` moves away from zero, and `(0, 1)`
//! recovers the prior exactly.
//!
//! Categorical distributions emitted by an autoregressive prior are made less
//! peaked by [`manipulate_categorical`]: mass above a threshold `t` is cut off
//! and spread evenly over every entry.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, UtgRng};
use crate::stats::{normal_pdf, std_normal_cdf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RarityParams {
    pub mu_u: f64,
    pub sigma_u: f64,
}

impl RarityParams {
    pub fn new(mu_u: f64, sigma_u: f64) -> Result<Self> {
        let p = RarityParams { mu_u, sigma_u };
        p.validate()?;
        Ok(p)
    }

    /// `(0, 1)`: the density coincides with the prior.
    pub fn baseline() -> Self {
        RarityParams {
            mu_u: 0.0,
            sigma_u: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu_u.is_finite() {
            return Err(Error::InvalidParam(format!("mu_u must be finite, got {}", self.mu_u)));
        }
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_u must be > 0, got {}", self.sigma_u)));
        }
        Ok(())
    }

    /// `|mu_u|`, the offset of each half-line bump.
    pub fn offset(&self) -> f64 {
        self.mu_u.abs()
    }

    /// Scales both knobs, i.e. a point on the ray through `self`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        RarityParams::new(self.mu_u * s, self.sigma_u * s)
    }
}

/// `A = 2 (1/2 + ∫_0^|mu| Normal(x, |mu|, sigma) dx) = 2 Φ(|mu| / sigma)`.
pub fn normalizing_constant(p: &RarityParams) -> f64 {
    2.0 * std_normal_cdf(p.offset() / p.sigma_u)
}

/// Density with the `1/A` factor omitted.
pub fn unnormalized_density(x: f64, p: &RarityParams) -> f64 {
    let centre = if x >= 0.0 { p.offset() } else { -p.offset() };
    normal_pdf(x, centre, p.sigma_u)
}

fn log_unnormalized(x: f64, p: &RarityParams) -> f64 {
    let centre = if x >= 0.0 { p.offset() } else { -p.offset() };
    let z = (x - centre) / p.sigma_u;
    -0.5 * z * z
}

pub fn density_f(x: f64, p: &RarityParams) -> f64 {
    unnormalized_density(x, p) / normalizing_constant(p)
}

/// Exact i.i.d. draws: each half-line carries mass 1/2 and holds a normal
/// truncated to that half-line, so draw a sign, then the magnitude by
/// rejection from `N(|mu|, sigma)` (acceptance rate `Φ(|mu|/sigma) >= 1/2`).
pub fn sample_exact_oracle(p: &RarityParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::rng(seed);
    (0..n)
        .map(|_| {
            let negative = rng.random::<bool>();
            let magnitude = loop {
                let z: f64 = rng.sample(StandardNormal);
                let v = p.offset() + p.sigma_u * z;
                if v >= 0.0 {
                    break v;
                }
            };
            if negative {
                -magnitude
            } else {
                magnitude
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Random-walk step standard deviation; `None` means `sigma_u`.
    #[serde(default)]
    pub proposal_scale: Option<f64>,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl ChainConfig {
    pub fn with_seed(seed: u64) -> Self {
        ChainConfig {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::InvalidParam("thinning must be >= 1".into()));
        }
        if let Some(s) = self.proposal_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParam(format!("proposal_scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            proposal_scale: None,
            burn_in: 1000,
            thinning: 10,
            seed: 0,
        }
    }
}

/// Random-walk Metropolis chain targeting `f`.
///
/// Each iteration proposes either a Gaussian step or the reflection `x -> -x`
/// (probability 1/2 each). Both proposals are symmetric, so acceptance uses
/// the plain density ratio and `A` cancels. Reflection is always accepted
/// because `f` is even; it lets the chain cross between the two bumps,
/// which a local random walk cannot do once `|mu_u| >> sigma_u`.
pub struct MetropolisChain {
    params: RarityParams,
    scale: f64,
    thinning: usize,
    state: f64,
    log_density: f64,
    rng: UtgRng,
    proposed: u64,
    accepted: u64,
}

impl MetropolisChain {
    pub fn new(p: &RarityParams, cfg: &ChainConfig) -> Result<Self> {
        p.validate()?;
        cfg.validate()?;
        let mut rng = rng::rng(cfg.seed);
        let start = if rng.random::<bool>() { p.offset() } else { -p.offset() };
        let mut chain = MetropolisChain {
            params: *p,
            scale: cfg.proposal_scale.unwrap_or(p.sigma_u),
            thinning: cfg.thinning,
            state: start,
            log_density: log_unnormalized(start, p),
            rng,
            proposed: 0,
            accepted: 0,
        };
        for _ in 0..cfg.burn_in {
            chain.step();
        }
        Ok(chain)
    }

    fn step(&mut self) {
        self.proposed += 1;
        if self.rng.random::<bool>() {
            // log f(-x) == log f(x)
            self.state = -self.state;
            self.accepted += 1;
            return;
        }
        let z: f64 = self.rng.sample(StandardNormal);
        let candidate = self.state + self.scale * z;
        let cand_log = log_unnormalized(candidate, &self.params);
        let u: f64 = self.rng.random();
        if u.ln() < cand_log - self.log_density {
            self.state = candidate;
            self.log_density = cand_log;
            self.accepted += 1;
        }
    }

    /// Advances `thinning` steps and returns the state.
    pub fn next_draw(&mut self) -> f64 {
        for _ in 0..self.thinning {
            self.step();
        }
        self.state
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

pub fn sample_metropolis(p: &RarityParams, n: usize, cfg: &ChainConfig) -> Result<Vec<f64>> {
    let mut chain = MetropolisChain::new(p, cfg)?;
    Ok((0..n).map(|_| chain.next_draw()).collect())
}

/// How rare-latent components are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerChoice {
    Metropolis {
        #[serde(default)]
        proposal_scale: Option<f64>,
        burn_in: usize,
        thinning: usize,
    },
    Exact,
}

impl Default for SamplerChoice {
    fn default() -> Self {
        let c = ChainConfig::default();
        SamplerChoice::Metropolis {
            proposal_scale: c.proposal_scale,
            burn_in: c.burn_in,
            thinning: c.thinning,
        }
    }
}

/// `count` latent vectors of dimension `k`, components i.i.d. from `f`.
/// With Metropolis, all `count * k` components come from one chain.
pub fn acquire_rare_latents(
    count: usize,
    k: usize,
    p: &RarityParams,
    sampler: SamplerChoice,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidParam("latent dimension must be >= 1".into()));
    }
    p.validate()?;
    let flat = match sampler {
        SamplerChoice::Exact => sample_exact_oracle(p, count * k, seed),
        SamplerChoice::Metropolis {
            proposal_scale,
            burn_in,
            thinning,
        } => sample_metropolis(
            p,
            count * k,
            &ChainConfig {
                proposal_scale,
                burn_in,
                thinning,
                seed,
            },
        )?,
    };
    Ok(flat.chunks(k).map(<[f64]>::to_vec).collect())
}

pub fn acquire_rare_latent(k: usize, p: &RarityParams, sampler: SamplerChoice, seed: u64) -> Result<Vec<f64>> {
    Ok(acquire_rare_latents(1, k, p, sampler, seed)?.remove(0))
}

/// Probability vector over codebook entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParam("empty categorical distribution".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParam("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("probabilities sum to {total}")));
        }
        Ok(CategoricalDist { probs })
    }

    /// Softmax output that is normalized by construction; skips the sum check
    /// tolerance, which f32 logits can violate at the 1e-9 level.
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        CategoricalDist { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        crate::stats::entropy(&self.probs)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw from a uniform `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the last partial sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(self.probs.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParam {
    pub t: f64,
}

impl ThresholdParam {
    pub fn new(t: f64) -> Result<Self> {
        let p = ThresholdParam { t };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        ThresholdParam { t: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::InvalidParam(format!("t must be in (0, 1], got {}", self.t)));
        }
        Ok(())
    }
}

/// Clamps every entry strictly above `t` to `t` and adds the total clamped
/// excess divided by `V` to every entry (clamped ones included).
pub fn manipulate_categorical(d: &CategoricalDist, t: ThresholdParam) -> CategoricalDist {
    let mut out = d.probs.clone();
    let mut excess = 0.0;
    for (o, &p) in out.iter_mut().zip(&d.probs) {
        if p > t.t {
            excess += p - t.t;
            *o = t.t;
        }
    }
    if excess > 0.0 {
        let share = excess / d.probs.len() as f64;
        for o in &mut out {
            *o += share;
        }
    }
    CategoricalDist { probs: out }
}
