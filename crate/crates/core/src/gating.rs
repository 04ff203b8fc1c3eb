//! Gating and sparsity control.
//!
//! Each candidate module `i` has a structural parameter `alpha_i`. Its keep
//! probability is the shifted sigmoid `p~_i = sigmoid((alpha_i - zeta) / tau)`,
//! renormalized as `p_i = p~_i * sum(detach(p~)) / sum(p~)` so that values are
//! unchanged but gradients compete across sites. `zeta` is re-solved every step
//! so the expected parameter count `sum p_i |delta_i|` meets the budget.
//! Gates are relaxed Bernoulli (binary concrete) samples
//! `z_i = sigmoid(log(u p / ((1 - u)(1 - p))) / beta)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are kept this far from 0 and 1 before taking logs.
pub const P_CLAMP: f64 = 1e-7;

/// Half-width of the initial zeta bracket, in units of tau.
const BRACKET: f64 = 40.0;

/// Trainable-parameter budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// Absolute parameter count.
    Params(u64),
    /// Fraction of the backbone's parameter count, in basis points (‱).
    Ratio(f64),
}

impl Budget {
    /// Absolute budget for a backbone of `backbone_params` parameters.
    pub fn resolve(&self, backbone_params: u64) -> u64 {
        match *self {
            Budget::Params(b) => b,
            Budget::Ratio(r) => (r * backbone_params as f64 / 10_000.0).floor() as u64,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Params(b) => write!(f, "{b}"),
            Budget::Ratio(r) => write!(f, "{r}‱"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `"500"` is a parameter count; `"1.39‱"` or `"1.39bp"` a ratio.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let ratio = s.strip_suffix('‱').or_else(|| s.strip_suffix("bp"));
        let bad = || Error::config(format!("invalid budget '{s}'"));
        match ratio {
            Some(r) => {
                let r: f64 = r.trim().parse().map_err(|_| bad())?;
                if !r.is_finite() || r < 0.0 {
                    return Err(bad());
                }
                Ok(Budget::Ratio(r))
            }
            None => s.parse().map(Budget::Params).map_err(|_| bad()),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Params(b) => s.serialize_u64(*b),
            Budget::Ratio(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Budget::Params(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    /// Shifted global sigmoid with zeta solved against the budget.
    GlobalSigmoid,
    /// `zeta = 0`, local sigmoid, and an L0-style penalty on the outer loss.
    L0,
}

impl fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SparsityMode::GlobalSigmoid => "global-sigmoid",
            SparsityMode::L0 => "l0",
        })
    }
}

impl FromStr for SparsityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-sigmoid" => Ok(SparsityMode::GlobalSigmoid),
            "l0" => Ok(SparsityMode::L0),
            other => Err(Error::config(format!("unknown sparsity mode '{other}'"))),
        }
    }
}

/// One relaxed Bernoulli sample.
pub fn sample_binary_concrete(p: f64, beta: f64, u: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    sigmoid(((u * p) / ((1.0 - u) * (1.0 - p))).ln() / beta)
}

/// A uniform draw on the open interval (0, 1).
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// `sigmoid((alpha - zeta) / tau)` elementwise.
pub fn shifted_sigmoid(alpha: &[f64], zeta: f64, tau: f64) -> Vec<f64> {
    alpha.iter().map(|&a| sigmoid((a - zeta) / tau)).collect()
}

/// `sum p_i |delta_i|`.
pub fn expected_param_count(p: &[f64], counts: &[u64]) -> Result<f64> {
    if p.len() != counts.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} modules",
            p.len(),
            counts.len()
        )));
    }
    Ok(p.iter().zip(counts).map(|(p, &c)| p * c as f64).sum())
}

fn expected_at(alpha: &[f64], counts: &[u64], tau: f64, zeta: f64) -> f64 {
    alpha
        .iter()
        .zip(counts)
        .map(|(&a, &c)| sigmoid((a - zeta) / tau) * c as f64)
        .sum()
}

/// Finds the smallest shift `zeta` with `E[N](zeta) <= budget`, by bisection.
///
/// If even the lower end of the bracket `[min alpha - 40 tau, max alpha + 40 tau]`
/// keeps `E[N]` under budget the constraint is slack and the lower end is
/// returned. The upper end is pushed out until it is feasible.
pub fn solve_zeta(alpha: &[f64], tau: f64, counts: &[u64], budget: f64) -> Result<f64> {
    if alpha.len() != counts.len() {
        return Err(Error::shape(format!(
            "{} structural parameters for {} modules",
            alpha.len(),
            counts.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
        return Err(Error::numeric(format!("non-finite structural parameter {a}")));
    }
    if !(tau > 0.0) || !(budget >= 0.0) {
        return Err(Error::config(format!("solve_zeta: tau {tau}, budget {budget}")));
    }
    if alpha.is_empty() {
        return Ok(0.0);
    }
    let min = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = min - BRACKET * tau;
    if expected_at(alpha, counts, tau, lo) <= budget {
        return Ok(lo);
    }
    let mut hi = max + BRACKET * tau;
    let mut widen = 0;
    while expected_at(alpha, counts, tau, hi) > budget {
        lo = hi;
        hi += BRACKET * tau;
        widen += 1;
        if widen > 1000 {
            return Err(Error::numeric(format!("solve_zeta: no feasible shift for budget {budget}")));
        }
    }
    // invariant: E(lo) > budget >= E(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if expected_at(alpha, counts, tau, mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(hi)
}

/// `lambda * sum p_i |delta_i|`.
pub fn l0_penalty(p: &[f64], counts: &[u64], lambda: f64) -> Result<f64> {
    Ok(lambda * expected_param_count(p, counts)?)
}

/// Tape version of [`shifted_sigmoid`].
pub fn shifted_sigmoid_on(tape: &mut Tape, alpha: Var, zeta: f64, tau: f64) -> Var {
    let shifted = tape.add_scalar(alpha, -zeta);
    let scaled = tape.scale(shifted, 1.0 / tau);
    tape.sigmoid(scaled)
}

/// `p~ * (sum detach(p~) / sum p~)`: equal in value to `p~`, but the gradient
/// w.r.t. `p~_i` becomes `dL/dp_i - sum_j (p~_j / sum p~) dL/dp_j`.
pub fn global_normalize(tape: &mut Tape, p_tilde: Var) -> Result<Var> {
    let detached = tape.detach(p_tilde);
    let num = tape.sum(detached);
    let den = tape.sum(p_tilde);
    // both sums see identical values in identical order, so the ratio is 1.0
    let ratio = tape.div(num, den)?;
    tape.mul(p_tilde, ratio)
}

/// Tape version of [`sample_binary_concrete`], differentiable w.r.t. `p`.
pub fn binary_concrete_on(tape: &mut Tape, p: Var, u: &[f64], beta: f64) -> Result<Var> {
    let n = tape.value(p).len();
    if u.len() != n {
        return Err(Error::shape(format!("{} uniforms for {n} gates", u.len())));
    }
    let p = tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let log_p = tape.log(p);
    let neg = tape.neg(p);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_q = tape.log(one_minus);
    let noise: Vec<f64> = u.iter().map(|&u| (u / (1.0 - u)).ln()).collect();
    let noise = tape.constant(vec![n], noise)?;
    let logit = tape.sub(log_p, log_q)?;
    let logit = tape.add(logit, noise)?;
    let logit = tape.scale(logit, 1.0 / beta);
    Ok(tape.sigmoid(logit))
}

/// `lambda * sum p_i |delta_i|` on the tape.
pub fn l0_penalty_on(tape: &mut Tape, p: Var, counts: &[u64], lambda: f64) -> Result<Var> {
    let c: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let c = tape.constant(vec![counts.len()], c)?;
    let weighted = tape.mul(p, c)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, lambda))
}

/// Gate parameters and the values derived from them at the current step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub alpha: Vec<f64>,
    pub zeta: f64,
    pub tau: f64,
    pub beta: f64,
    pub p_tilde: Vec<f64>,
    pub p: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub u: Vec<f64>,
}

/// Tape handles produced by [`GateState::record`].
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub alpha: Var,
    pub p: Var,
    pub z: Var,
}

impl GateState {
    /// `alpha_i ~ N(0, 0.01)`.
    pub fn new<R: Rng + ?Sized>(n: usize, tau: f64, beta: f64, rng: &mut R) -> Result<Self> {
        if !(tau > 0.0) || !(beta > 0.0) {
            return Err(Error::config(format!("gate temperatures must be positive (tau {tau}, beta {beta})")));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let alpha: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Ok(GateState {
            zeta: 0.0,
            tau,
            beta,
            p_tilde: shifted_sigmoid(&alpha, 0.0, tau),
            p: shifted_sigmoid(&alpha, 0.0, tau),
            z_hat: vec![0.5; n],
            u: vec![0.5; n],
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Re-solves zeta (or pins it to 0 without a budget), recomputes `p`, and
    /// draws fresh uniforms and soft samples.
    pub fn refresh<R: Rng + ?Sized>(
        &mut self,
        counts: &[u64],
        budget: Option<f64>,
        rng: &mut R,
    ) -> Result<()> {
        self.zeta = match budget {
            Some(b) => solve_zeta(&self.alpha, self.tau, counts, b)?,
            None => 0.0,
        };
        self.p_tilde = shifted_sigmoid(&self.alpha, self.zeta, self.tau);
        self.p = self.p_tilde.clone();
        self.u = (0..self.len()).map(|_| open_uniform(rng)).collect();
        self.z_hat = self
            .p
            .iter()
            .zip(&self.u)
            .map(|(&p, &u)| sample_binary_concrete(p, self.beta, u))
            .collect();
        Ok(())
    }

    /// Records `alpha -> p -> z_hat` on the tape using the stored zeta and
    /// uniforms. `global` selects the renormalized `p`; otherwise `p = p~`.
    pub fn record(&self, tape: &mut Tape, global: bool, alpha_grad: bool) -> Result<GateVars> {
        let n = self.len();
        let t = if alpha_grad {
            Tensor::param(vec![n], self.alpha.clone())?
        } else {
            Tensor::new(vec![n], self.alpha.clone())?
        };
        let alpha = tape.leaf(&t);
        let p_tilde = shifted_sigmoid_on(tape, alpha, self.zeta, self.tau);
        let p = if global {
            global_normalize(tape, p_tilde)?
        } else {
            p_tilde
        };
        let z = binary_concrete_on(tape, p, &self.u, self.beta)?;
        Ok(GateVars { alpha, p, z })
    }
}
