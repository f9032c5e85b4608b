//! Metropolis-within-Gibbs sampling of (gamma, alpha, eta, beta, sigma^2).
//!
//! gamma, alpha, eta and sigma^2 take log-scale random-walk Metropolis steps;
//! beta, which enters the mean linearly, is drawn from its truncated-normal
//! full conditional. Step sizes adapt during burn-in only.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sulfate::{Observations, Param, SulfateModel, Theta};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Half-normal scale.
    pub gamma_scale: f64,
    /// Half-normal scale.
    pub alpha_scale: f64,
    /// Exponential rate.
    pub eta_rate: f64,
    /// Half-normal scale.
    pub beta_scale: f64,
    /// Exponential rate.
    pub sigma2_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            gamma_scale: 5000.0,
            alpha_scale: 10.0,
            eta_rate: 1.0,
            beta_scale: 10.0,
            sigma2_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorFamily {
    HalfNormal { scale: f64 },
    Exponential { rate: f64 },
}

impl PriorFamily {
    pub fn log_density(self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        match self {
            PriorFamily::HalfNormal { scale } => {
                std::f64::consts::LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * (x / scale).powi(2)
            }
            PriorFamily::Exponential { rate } => rate.ln() - rate * x,
        }
    }

    pub fn mean(self) -> f64 {
        match self {
            PriorFamily::HalfNormal { scale } => scale * (2.0 / std::f64::consts::PI).sqrt(),
            PriorFamily::Exponential { rate } => 1.0 / rate,
        }
    }

    pub fn variance(self) -> f64 {
        match self {
            PriorFamily::HalfNormal { scale } => scale * scale * (1.0 - 2.0 / std::f64::consts::PI),
            PriorFamily::Exponential { rate } => 1.0 / (rate * rate),
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        loop {
            let x = match self {
                PriorFamily::HalfNormal { scale } => scale * rng.sample::<f64, _>(StandardNormal).abs(),
                PriorFamily::Exponential { rate } => rng.sample::<f64, _>(Exp1) / rate,
            };
            if x > 0.0 {
                return x;
            }
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("prior.gamma_scale", self.gamma_scale),
            ("prior.alpha_scale", self.alpha_scale),
            ("prior.eta_rate", self.eta_rate),
            ("prior.beta_scale", self.beta_scale),
            ("prior.sigma2_rate", self.sigma2_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn family(&self, p: Param) -> PriorFamily {
        match p {
            Param::Gamma => PriorFamily::HalfNormal { scale: self.gamma_scale },
            Param::Alpha => PriorFamily::HalfNormal { scale: self.alpha_scale },
            Param::Eta => PriorFamily::Exponential { rate: self.eta_rate },
            Param::Beta => PriorFamily::HalfNormal { scale: self.beta_scale },
            Param::Sigma2 => PriorFamily::Exponential { rate: self.sigma2_rate },
        }
    }

    pub fn log_density(&self, th: &Theta) -> f64 {
        Param::ALL.iter().map(|&p| self.family(p).log_density(th.get(p))).sum()
    }

    /// Draws the five sampled parameters; `delta` and `T` are copied from `fixed`.
    pub fn sample<R: Rng + ?Sized>(&self, fixed: &Theta, rng: &mut R) -> Theta {
        let mut th = *fixed;
        for p in Param::ALL {
            th.set(p, self.family(p).sample(rng));
        }
        th
    }
}

/// Model, data and prior bundled for one chain.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub model: SulfateModel,
    pub obs: Observations,
    pub prior: PriorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainState {
    pub theta: Theta,
    pub loglik: f64,
    pub logprior: f64,
}

impl ChainState {
    pub fn logpost(&self) -> f64 {
        self.loglik + self.logprior
    }
}

impl Posterior {
    pub fn new(model: SulfateModel, obs: Observations, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        if obs.n() != model.n() {
            return Err(Error::Dimension(format!("observations have {} cells, model has {}", obs.n(), model.n())));
        }
        Ok(Posterior { model, obs, prior })
    }

    pub fn state(&mut self, theta: Theta) -> Result<ChainState> {
        let loglik = self.model.log_likelihood_at(&theta, &self.obs)?;
        Ok(ChainState {
            theta,
            loglik,
            logprior: self.prior.log_density(&theta),
        })
    }

    /// Mean and standard deviation of the untruncated Gaussian full conditional of beta.
    pub fn beta_conditional(&mut self, theta: &Theta) -> Result<(f64, f64)> {
        let (ctc, cta) = self.model.beta_design(theta, &self.obs)?;
        let tau = theta.t / theta.sigma2;
        let s = self.prior.beta_scale;
        let var = 1.0 / (1.0 / (s * s) + tau * ctc);
        Ok((var * tau * cta, var.sqrt()))
    }
}

/// `log pi(theta') - log pi(theta) + log(theta' / theta)` for a log-scale random walk.
pub fn log_accept_ratio(lp_new: f64, lp_old: f64, x_new: f64, x_old: f64) -> f64 {
    lp_new - lp_old + (x_new / x_old).ln()
}

/// Metropolis update of one block with a given log-scale increment and uniform.
///
/// A proposal whose likelihood cannot be evaluated numerically is rejected.
pub fn metropolis_step_with(
    post: &mut Posterior,
    state: &ChainState,
    block: Param,
    eps: f64,
    u: f64,
) -> Result<(ChainState, StepOutcome)> {
    let lp_old = state.logpost();
    if !lp_old.is_finite() {
        return Err(Error::SamplerCorruption(format!(
            "log posterior {lp_old} at current state {:?}",
            state.theta
        )));
    }
    let x_old = state.theta.get(block);
    let x_new = x_old * eps.exp();
    if !(x_new.is_finite() && x_new > 0.0) {
        return Ok((*state, StepOutcome::Rejected));
    }
    let proposal = state.theta.with(block, x_new);
    let cand = match post.state(proposal) {
        Ok(s) => s,
        Err(e) if e.is_numerical() => {
            log::debug!("rejecting {block:?} = {x_new:e}: {e}");
            return Ok((*state, StepOutcome::Failed));
        }
        Err(e) => return Err(e),
    };
    let lr = log_accept_ratio(cand.logpost(), lp_old, x_new, x_old);
    if lr >= 0.0 || u.ln() < lr {
        Ok((cand, StepOutcome::Accepted))
    } else {
        Ok((*state, StepOutcome::Rejected))
    }
}

/// Parameters moved together by the joint block.
pub const JOINT_BLOCK: [Param; 4] = [Param::Gamma, Param::Alpha, Param::Eta, Param::Sigma2];

/// Metropolis update of several parameters at once, `theta_i' = theta_i exp(d_i)`.
pub fn joint_step_with(
    post: &mut Posterior,
    state: &ChainState,
    params: &[Param],
    d: &[f64],
    u: f64,
) -> Result<(ChainState, StepOutcome)> {
    let lp_old = state.logpost();
    if !lp_old.is_finite() {
        return Err(Error::SamplerCorruption(format!(
            "log posterior {lp_old} at current state {:?}",
            state.theta
        )));
    }
    let mut proposal = state.theta;
    for (&p, &di) in params.iter().zip(d) {
        let x = state.theta.get(p) * di.exp();
        if !(x.is_finite() && x > 0.0) {
            return Ok((*state, StepOutcome::Rejected));
        }
        proposal.set(p, x);
    }
    let cand = match post.state(proposal) {
        Ok(s) => s,
        Err(e) if e.is_numerical() => {
            log::debug!("rejecting joint proposal {proposal:?}: {e}");
            return Ok((*state, StepOutcome::Failed));
        }
        Err(e) => return Err(e),
    };
    let lr = cand.logpost() - lp_old + d.iter().sum::<f64>();
    if lr >= 0.0 || u.ln() < lr {
        Ok((cand, StepOutcome::Accepted))
    } else {
        Ok((*state, StepOutcome::Rejected))
    }
}

/// Burn-in state of the joint block: a scale times a Cholesky factor.
struct JointProposal {
    scale: f64,
    chol: Option<nalgebra::DMatrix<f64>>,
    history: Vec<[f64; 4]>,
}

impl JointProposal {
    fn log_row(th: &Theta) -> [f64; 4] {
        JOINT_BLOCK.map(|p| th.get(p).ln())
    }

    fn draw<R: Rng + ?Sized>(&self, single_steps: &[f64], rng: &mut R) -> [f64; 4] {
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        match &self.chol {
            Some(l) => std::array::from_fn(|i| self.scale * (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>()),
            None => std::array::from_fn(|i| self.scale * single_steps[i] * z[i]),
        }
    }

    /// Covariance of the later half of the burn-in so far.
    fn refit(&mut self) {
        let h = &self.history[self.history.len() / 2..];
        if h.len() < 100 {
            return;
        }
        let n = h.len() as f64;
        let mean: [f64; 4] = std::array::from_fn(|i| h.iter().map(|r| r[i]).sum::<f64>() / n);
        let mut cov = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for r in h {
            for i in 0..4 {
                for j in 0..4 {
                    cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let jitter = 1e-6 * cov.trace() / 4.0 + 1e-12;
        for i in 0..4 {
            cov[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::linalg::Cholesky::new(cov) {
            self.chol = Some(c.l());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected,
    /// Likelihood evaluation failed numerically at the proposal.
    Failed,
}

/// Random-walk Metropolis on the log scale for one block.
pub fn metropolis_block<R: Rng + ?Sized>(
    post: &mut Posterior,
    state: &ChainState,
    block: Param,
    step: f64,
    rng: &mut R,
) -> Result<(ChainState, bool)> {
    let eps = step * rng.sample::<f64, _>(StandardNormal);
    let u: f64 = rng.random();
    let (s, out) = metropolis_step_with(post, state, block, eps, u)?;
    Ok((s, out == StepOutcome::Accepted))
}

/// Exact draw of beta from its truncated-normal full conditional.
pub fn gibbs_beta<R: Rng + ?Sized>(post: &mut Posterior, state: &ChainState, rng: &mut R) -> Result<ChainState> {
    let (mean, sd) = post.beta_conditional(&state.theta)?;
    let beta = truncated_normal_positive(mean, sd, rng);
    post.state(state.theta.with(Param::Beta, beta))
}

/// Draw from `N(mean, sd^2)` restricted to `(0, inf)`.
pub fn truncated_normal_positive<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    let a = -mean / sd;
    if a < 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                let x = mean + sd * z;
                if x > 0.0 {
                    return x;
                }
            }
        }
    }
    // exponential proposal for tails
    let lam = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let z = a + rng.sample::<f64, _>(Exp1) / lam;
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - lam).powi(2)).exp() {
            let x = mean + sd * z;
            if x > 0.0 {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaUpdate {
    #[default]
    Gibbs,
    Metropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub initial_step: f64,
    pub adapt_batch: usize,
    pub target_accept: f64,
    pub beta_update: BetaUpdate,
    /// Adds a joint log-scale move on (gamma, alpha, eta, sigma2) after the
    /// single-parameter moves, with proposal covariance learned in burn-in.
    pub joint_update: bool,
    pub joint_target_accept: f64,
    /// Starting values; drawn from the prior when absent.
    pub init: Option<Theta>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 5,
            iterations: 150_000,
            burn_in: 25_000,
            seed: 2011,
            initial_step: 0.1,
            adapt_batch: 50,
            target_accept: 0.44,
            beta_update: BetaUpdate::Gibbs,
            joint_update: true,
            joint_target_accept: 0.234,
            init: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::config("mcmc.chains", "need at least one chain"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::config(
                "mcmc.burn_in",
                format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations),
            ));
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(Error::config("mcmc.initial_step", "must be > 0"));
        }
        if self.adapt_batch == 0 {
            return Err(Error::config("mcmc.adapt_batch", "must be >= 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("mcmc.target_accept", "must lie in (0, 1)"));
        }
        if !(self.joint_target_accept > 0.0 && self.joint_target_accept < 1.0) {
            return Err(Error::config("mcmc.joint_target_accept", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Blocks updated by Metropolis, in sweep order.
    pub fn metropolis_blocks(&self) -> Vec<Param> {
        let mut b = vec![Param::Gamma, Param::Alpha, Param::Eta, Param::Sigma2];
        if self.beta_update == BetaUpdate::Metropolis {
            b.push(Param::Beta);
        }
        b
    }
}

/// Samples of one chain, including burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub chain: usize,
    pub seed: u64,
    pub burn_in: usize,
    /// Rows in `Param::ALL` order.
    pub samples: Vec<[f64; 5]>,
    pub logpost: Vec<f64>,
    #[serde(skip)]
    pub loglik: Vec<f64>,
    /// Acceptance rates after burn-in.
    pub acceptance: BTreeMap<String, f64>,
    pub step_sizes_burn_in: BTreeMap<String, f64>,
    pub step_sizes_final: BTreeMap<String, f64>,
    pub failed_proposals: u64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

impl Trace {
    /// `n` copies of one parameter vector, with no burn-in.
    pub fn point_mass(theta: &Theta, n: usize) -> Trace {
        let row = [theta.gamma, theta.alpha, theta.eta, theta.beta, theta.sigma2];
        Trace {
            chain: 0,
            seed: 0,
            burn_in: 0,
            samples: vec![row; n],
            logpost: vec![0.0; n],
            loglik: Vec::new(),
            acceptance: BTreeMap::new(),
            step_sizes_burn_in: BTreeMap::new(),
            step_sizes_final: BTreeMap::new(),
            failed_proposals: 0,
            delta: theta.delta,
            t: theta.t,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kept(&self) -> &[[f64; 5]] {
        &self.samples[self.burn_in.min(self.samples.len())..]
    }

    pub fn column(&self, p: Param) -> Vec<f64> {
        let j = param_index(p);
        self.kept().iter().map(|r| r[j]).collect()
    }

    pub fn theta(&self, row: &[f64; 5]) -> Theta {
        theta_from_row(row, self.delta, self.t)
    }
}

pub fn param_index(p: Param) -> usize {
    Param::ALL.iter().position(|&q| q == p).expect("every param is listed")
}

pub fn theta_from_row(row: &[f64; 5], delta: f64, t: f64) -> Theta {
    Theta {
        gamma: row[0],
        alpha: row[1],
        eta: row[2],
        beta: row[3],
        sigma2: row[4],
        delta,
        t,
    }
}

fn row_of(th: &Theta) -> [f64; 5] {
    [th.gamma, th.alpha, th.eta, th.beta, th.sigma2]
}

/// All post-burn-in rows of all traces, chain by chain.
pub fn pooled(traces: &[Trace]) -> Vec<Theta> {
    traces
        .iter()
        .flat_map(|t| t.kept().iter().map(move |r| t.theta(r)))
        .collect()
}

/// A chain that stopped early, with what it produced.
#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub failed_chain: usize,
    pub partial: Vec<Trace>,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain {} failed: {}", self.failed_chain, self.error)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// RNG for stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `config.chains` independent chains in parallel; deterministic given the seed.
pub fn run_chains(config: &McmcConfig, post: &Posterior) -> std::result::Result<Vec<Trace>, RunError> {
    if let Err(error) = config.validate() {
        return Err(RunError {
            error,
            failed_chain: 0,
            partial: Vec::new(),
        });
    }
    let results: Vec<std::result::Result<Trace, (Error, Trace)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(config, post.clone(), c))
        .collect();
    let mut traces = Vec::with_capacity(results.len());
    let mut first_err = None;
    for (c, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => traces.push(t),
            Err((e, partial)) => {
                traces.push(partial);
                if first_err.is_none() {
                    first_err = Some((c, e));
                }
            }
        }
    }
    match first_err {
        None => Ok(traces),
        Some((failed_chain, error)) => Err(RunError {
            error,
            failed_chain,
            partial: traces,
        }),
    }
}

/// One chain; on failure returns the error with the rows collected so far.
pub fn run_chain(config: &McmcConfig, mut post: Posterior, chain: usize) -> std::result::Result<Trace, (Error, Trace)> {
    let fixed = *post.model.theta();
    let mut rng = substream(config.seed, chain as u64);
    let blocks = config.metropolis_blocks();
    let mut trace = Trace {
        chain,
        seed: config.seed,
        burn_in: config.burn_in,
        samples: Vec::with_capacity(config.iterations),
        logpost: Vec::with_capacity(config.iterations),
        loglik: Vec::with_capacity(config.iterations),
        acceptance: BTreeMap::new(),
        step_sizes_burn_in: BTreeMap::new(),
        step_sizes_final: BTreeMap::new(),
        failed_proposals: 0,
        delta: fixed.delta,
        t: fixed.t,
    };
    let init = match config.init {
        Some(th) => Theta {
            delta: fixed.delta,
            t: fixed.t,
            ..th
        },
        None => post.prior.sample(&fixed, &mut rng),
    };
    let mut state = match post.state(init) {
        Ok(s) => s,
        Err(e) => return Err((e, trace)),
    };
    let mut steps = vec![config.initial_step; blocks.len()];
    let mut batch_acc = vec![0usize; blocks.len()];
    let mut kept_acc = vec![0usize; blocks.len()];
    let mut batches = 0usize;
    let mut joint = JointProposal {
        scale: 2.38 / 2.0,
        chol: None,
        history: Vec::new(),
    };
    let (mut joint_batch_acc, mut joint_kept_acc) = (0usize, 0usize);
    for it in 0..config.iterations {
        for (b, &block) in blocks.iter().enumerate() {
            let eps = steps[b] * rng.sample::<f64, _>(StandardNormal);
            let u: f64 = rng.random();
            match metropolis_step_with(&mut post, &state, block, eps, u) {
                Ok((s, out)) => {
                    if out == StepOutcome::Accepted {
                        batch_acc[b] += 1;
                        if it >= config.burn_in {
                            kept_acc[b] += 1;
                        }
                    }
                    if out == StepOutcome::Failed {
                        trace.failed_proposals += 1;
                    }
                    state = s;
                }
                Err(e) => return Err((e, trace)),
            }
        }
        if config.joint_update {
            let single: Vec<f64> = JOINT_BLOCK
                .iter()
                .map(|p| blocks.iter().position(|b| b == p).map_or(config.initial_step, |k| steps[k]))
                .collect();
            let d = joint.draw(&single, &mut rng);
            let u: f64 = rng.random();
            match joint_step_with(&mut post, &state, &JOINT_BLOCK, &d, u) {
                Ok((s, out)) => {
                    if out == StepOutcome::Accepted {
                        joint_batch_acc += 1;
                        if it >= config.burn_in {
                            joint_kept_acc += 1;
                        }
                    }
                    if out == StepOutcome::Failed {
                        trace.failed_proposals += 1;
                    }
                    state = s;
                }
                Err(e) => return Err((e, trace)),
            }
        }
        if config.beta_update == BetaUpdate::Gibbs {
            match gibbs_beta(&mut post, &state, &mut rng) {
                Ok(s) => state = s,
                Err(e) => return Err((e, trace)),
            }
        }
        if !state.logpost().is_finite() {
            let e = Error::SamplerCorruption(format!("log posterior {} at iteration {it}", state.logpost()));
            return Err((e, trace));
        }
        if config.joint_update && it < config.burn_in {
            joint.history.push(JointProposal::log_row(&state.theta));
        }
        trace.samples.push(row_of(&state.theta));
        trace.logpost.push(state.logpost());
        trace.loglik.push(state.loglik);

        if it < config.burn_in && (it + 1) % config.adapt_batch == 0 {
            batches += 1;
            let delta = (1.0 / (batches as f64).sqrt()).min(0.5);
            for b in 0..blocks.len() {
                let rate = batch_acc[b] as f64 / config.adapt_batch as f64;
                let dir = if rate > config.target_accept { 1.0 } else { -1.0 };
                steps[b] *= (dir * delta).exp();
                batch_acc[b] = 0;
            }
            if config.joint_update {
                let rate = joint_batch_acc as f64 / config.adapt_batch as f64;
                let dir = if rate > config.joint_target_accept { 1.0 } else { -1.0 };
                joint.scale *= (dir * delta).exp();
                joint_batch_acc = 0;
                joint.refit();
            }
        }
        if it + 1 == config.burn_in {
            for (b, &block) in blocks.iter().enumerate() {
                trace.step_sizes_burn_in.insert(block.name().to_string(), steps[b]);
            }
            if config.joint_update {
                trace.step_sizes_burn_in.insert("joint".into(), joint.scale);
            }
        }
    }
    let kept = (config.iterations - config.burn_in) as f64;
    for (b, &block) in blocks.iter().enumerate() {
        trace.acceptance.insert(block.name().to_string(), kept_acc[b] as f64 / kept);
        trace.step_sizes_final.insert(block.name().to_string(), steps[b]);
    }
    if config.joint_update {
        trace.acceptance.insert("joint".into(), joint_kept_acc as f64 / kept);
        trace.step_sizes_final.insert("joint".into(), joint.scale);
    }
    if config.beta_update == BetaUpdate::Gibbs {
        trace.acceptance.insert(Param::Beta.name().to_string(), 1.0);
    }
    if config.burn_in == 0 {
        trace.step_sizes_burn_in = trace.step_sizes_final.clone();
    }
    Ok(trace)
}

/// Mean with a shift so that constant input returns the constant exactly.
pub fn stable_mean(x: &[f64]) -> f64 {
    let Some(&x0) = x.first() else {
        return f64::NAN;
    };
    x0 + x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = stable_mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub rhat: f64,
    pub ess: f64,
}

/// Split-R-hat and effective sample size of one scalar quantity over chains.
pub fn convergence(chains: &[Vec<f64>]) -> Result<Convergence> {
    if chains.len() < 2 {
        return Err(Error::Diagnostics(format!("need at least 2 chains, got {}", chains.len())));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 100 {
        return Err(Error::Diagnostics(format!("need at least 100 samples per chain, got {n}")));
    }
    let half = n / 2;
    let splits: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..n]])
        .collect();
    let m = splits.len() as f64;
    let nf = half as f64;
    let means: Vec<f64> = splits.iter().map(|s| stable_mean(s)).collect();
    let vars: Vec<f64> = splits.iter().map(|s| sample_variance(s)).collect();
    let grand = stable_mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = stable_mean(&vars);
    if !(w > 0.0) {
        log::warn!("zero within-chain variance; R-hat and ESS are undefined");
        return Ok(Convergence {
            rhat: f64::NAN,
            ess: f64::NAN,
        });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    let rhat = (var_plus / w).sqrt();

    // Geyer initial monotone sequence on the combined autocorrelation
    let dev: Vec<Vec<f64>> = splits
        .iter()
        .zip(&means)
        .map(|(s, &mu)| s.iter().map(|v| v - mu).collect())
        .collect();
    let rho = |t: usize| -> f64 {
        let mean_acov = dev.iter().map(|d| autocovariance(d, t)).sum::<f64>() / m;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < half {
        let mut pair = rho(t) + rho(t + 1);
        if t == 0 {
            pair = 1.0 + rho(1);
        }
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        prev = pair;
        sum += pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (m * nf).log10().max(1.0));
    Ok(Convergence {
        rhat,
        ess: m * nf / tau,
    })
}

/// Autocovariance of centred `d` at lag `t`, scaled to match `sample_variance` at lag 0.
fn autocovariance(d: &[f64], t: usize) -> f64 {
    let n = d.len();
    d[..n - t].iter().zip(&d[t..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 - 1.0)
}

/// Per-parameter convergence over post-burn-in samples.
pub fn diagnostics(traces: &[Trace]) -> Result<BTreeMap<Param, Convergence>> {
    Param::ALL
        .iter()
        .map(|&p| {
            let chains: Vec<Vec<f64>> = traces.iter().map(|t| t.column(p)).collect();
            Ok((p, convergence(&chains)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub mean_deviance: f64,
    pub p_d: f64,
    pub deviance_at_mean: f64,
}

/// DIC from posterior draws and a deviance function.
pub fn dic_from_draws<F>(draws: &[Vec<f64>], mut deviance: F) -> Result<Dic>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if draws.is_empty() {
        return Err(Error::Diagnostics("no draws for DIC".into()));
    }
    let k = draws[0].len();
    let mut devs = Vec::with_capacity(draws.len());
    for d in draws {
        let v = deviance(d)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("nonfinite deviance {v} at {d:?}")));
        }
        devs.push(v);
    }
    let mean_theta: Vec<f64> = (0..k)
        .map(|j| stable_mean(&draws.iter().map(|d| d[j]).collect::<Vec<_>>()))
        .collect();
    let d_bar = stable_mean(&devs);
    let d_hat = deviance(&mean_theta)?;
    if !d_hat.is_finite() {
        return Err(Error::Numerical(format!("nonfinite deviance {d_hat} at the posterior mean")));
    }
    let p_d = d_bar - d_hat;
    Ok(Dic {
        dic: d_bar + p_d,
        mean_deviance: d_bar,
        p_d,
        deviance_at_mean: d_hat,
    })
}

/// DIC of the sulfate model over pooled post-burn-in samples.
pub fn dic(traces: &[Trace], post: &mut Posterior) -> Result<Dic> {
    let (delta, t) = match traces.first() {
        Some(tr) => (tr.delta, tr.t),
        None => return Err(Error::Diagnostics("no traces".into())),
    };
    let draws: Vec<Vec<f64>> = traces.iter().flat_map(|tr| tr.kept().iter().map(|r| r.to_vec())).collect();
    dic_from_draws(&draws, |d| {
        let row: [f64; 5] = d.try_into().expect("five parameters");
        let th = theta_from_row(&row, delta, t);
        Ok(-2.0 * post.model.log_likelihood_at(&th, &post.obs)?)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub param: Param,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Posterior mean, 95% equal-tailed interval and convergence per parameter.
pub fn summarize(traces: &[Trace]) -> Result<Vec<ParamSummary>> {
    if traces.iter().all(|t| t.kept().is_empty()) {
        return Err(Error::Diagnostics("no post-burn-in samples".into()));
    }
    let conv = diagnostics(traces).ok();
    Ok(Param::ALL
        .iter()
        .map(|&p| {
            let mut all: Vec<f64> = traces.iter().flat_map(|t| t.column(p)).collect();
            let mean = stable_mean(&all);
            all.sort_by(f64::total_cmp);
            let c = conv.as_ref().map(|c| c[&p]).unwrap_or(Convergence {
                rhat: f64::NAN,
                ess: f64::NAN,
            });
            ParamSummary {
                param: p,
                mean,
                lo: quantile(&all, 0.025),
                hi: quantile(&all, 0.975),
                rhat: c.rhat,
                ess: c.ess,
            }
        })
        .collect())
}
