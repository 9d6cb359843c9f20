//! Joint (charge requirement, parking time) distribution families, effective
//! arrival rates under finite parking, and the throughput transform
//! `g(x) = γ E[min(D x, B)]` with its inverse and the joint tails the fluid
//! equations consume.
//!
//! Every closed form here is validated against a Monte-Carlo oracle in the
//! test suite before anything downstream relies on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Network;

/// Marginal law of the parking time used by the ratio families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DLaw {
    Exp { mean: f64 },
    Deterministic { value: f64 },
}

impl DLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            DLaw::Exp { mean } => mean,
            DLaw::Deterministic { value } => value,
        }
    }

    /// P(D >= t).
    pub fn sf(&self, t: f64) -> f64 {
        match *self {
            DLaw::Exp { mean } => {
                if t <= 0.0 {
                    1.0
                } else {
                    (-t / mean).exp()
                }
            }
            DLaw::Deterministic { value } => {
                if value >= t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// P(D > t). Differs from [`DLaw::sf`] only for laws with atoms.
    pub fn sf_strict(&self, t: f64) -> f64 {
        match *self {
            DLaw::Exp { .. } => self.sf(t),
            DLaw::Deterministic { value } => {
                if value > t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DLaw::Exp { mean } => -mean * (1.0 - rng.gen::<f64>()).ln(),
            DLaw::Deterministic { value } => value,
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.mean();
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "parking-time law must have finite positive mean, got {m}"
            )));
        }
        Ok(())
    }
}

/// Joint law of (B, D): charge requirement and parking time of one EV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointBD {
    /// B and D independent exponentials.
    IndependentExp { mean_b: f64, mean_d: f64 },
    /// B = θ D with deterministic θ > 0.
    DeterministicRatio { theta: f64, d_law: DLaw },
    /// B = Θ D with Θ discrete on `thetas` with weights `probs`.
    DiscreteRatio {
        thetas: Vec<f64>,
        probs: Vec<f64>,
        d_law: DLaw,
    },
    /// B = H D with H Pareto-tailed: P(H > x) = (κ/(x+κ))^a, a > 1.
    ParetoRatio { a: f64, kappa: f64, d_law: DLaw },
    /// Resampled (b, d) pairs.
    Empirical { samples: Vec<(f64, f64)> },
}

impl JointBD {
    pub fn validate(&self) -> Result<()> {
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                for (name, v) in [("mean_b", *mean_b), ("mean_d", *mean_d)] {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "{name} must be finite positive, got {v}"
                        )));
                    }
                }
                Ok(())
            }
            JointBD::DeterministicRatio { theta, d_law } => {
                if !(theta.is_finite() && *theta > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "theta must be finite positive, got {theta}"
                    )));
                }
                d_law.validate()
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                if thetas.is_empty() || thetas.len() != probs.len() {
                    return Err(Error::InvalidParameter(
                        "thetas and probs must be nonempty and equal length".into(),
                    ));
                }
                if thetas.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return Err(Error::InvalidParameter("all thetas must be positive".into()));
                }
                if probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
                    return Err(Error::InvalidParameter("probs must lie in [0, 1]".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "probs must sum to 1, got {total}"
                    )));
                }
                d_law.validate()
            }
            JointBD::ParetoRatio { a, kappa, d_law } => {
                if !(*a > 1.0 && a.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "Pareto shape must satisfy a > 1, got {a}"
                    )));
                }
                if !(*kappa > 0.0 && kappa.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "Pareto scale must be positive, got {kappa}"
                    )));
                }
                d_law.validate()
            }
            JointBD::Empirical { samples } => {
                if samples.is_empty() {
                    return Err(Error::InvalidParameter("empirical sample set is empty".into()));
                }
                if samples.iter().any(|&(b, d)| !(b >= 0.0 && d > 0.0) || !b.is_finite() || !d.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "empirical samples need b >= 0 and d > 0, both finite".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn mean_b(&self) -> f64 {
        match self {
            JointBD::IndependentExp { mean_b, .. } => *mean_b,
            JointBD::DeterministicRatio { theta, d_law } => theta * d_law.mean(),
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                let mean_theta: f64 = thetas.iter().zip(probs).map(|(t, q)| t * q).sum();
                mean_theta * d_law.mean()
            }
            JointBD::ParetoRatio { a, kappa, d_law } => kappa / (a - 1.0) * d_law.mean(),
            JointBD::Empirical { samples } => {
                samples.iter().map(|&(b, _)| b).sum::<f64>() / samples.len() as f64
            }
        }
    }

    pub fn mean_d(&self) -> f64 {
        match self {
            JointBD::IndependentExp { mean_d, .. } => *mean_d,
            JointBD::DeterministicRatio { d_law, .. }
            | JointBD::DiscreteRatio { d_law, .. }
            | JointBD::ParetoRatio { d_law, .. } => d_law.mean(),
            JointBD::Empirical { samples } => {
                samples.iter().map(|&(_, d)| d).sum::<f64>() / samples.len() as f64
            }
        }
    }

    /// P(D >= t).
    pub fn d_survival(&self, t: f64) -> f64 {
        match self {
            JointBD::IndependentExp { mean_d, .. } => DLaw::Exp { mean: *mean_d }.sf(t),
            JointBD::DeterministicRatio { d_law, .. }
            | JointBD::DiscreteRatio { d_law, .. }
            | JointBD::ParetoRatio { d_law, .. } => d_law.sf(t),
            JointBD::Empirical { samples } => {
                samples.iter().filter(|&&(_, d)| d >= t).count() as f64 / samples.len() as f64
            }
        }
    }

    /// The throughput transform `g(x) = γ E[min(D x, B)]`: long-run energy
    /// delivered per unit time to a class charged at constant rate x,
    /// admitted at rate γ.
    pub fn g_value(&self, gamma: f64, x: f64) -> f64 {
        debug_assert!(x >= 0.0, "g is defined for x >= 0");
        if x <= 0.0 || gamma == 0.0 {
            return 0.0;
        }
        gamma * self.mean_min_dx_b(x)
    }

    /// E[min(D x, B)].
    fn mean_min_dx_b(&self, x: f64) -> f64 {
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                // min of independent exponentials with means mD x and mB.
                mean_b * mean_d * x / (mean_b + mean_d * x)
            }
            JointBD::DeterministicRatio { theta, d_law } => d_law.mean() * x.min(*theta),
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                let e: f64 = thetas.iter().zip(probs).map(|(t, q)| q * x.min(*t)).sum();
                d_law.mean() * e
            }
            JointBD::ParetoRatio { a, kappa, d_law } => {
                // E[min(x, H)] = κ/(a-1) (1 - (κ/(x+κ))^{a-1})
                let frac = (kappa / (x + kappa)).powf(a - 1.0);
                d_law.mean() * kappa / (a - 1.0) * (1.0 - frac)
            }
            JointBD::Empirical { samples } => {
                samples.iter().map(|&(b, d)| (d * x).min(b)).sum::<f64>() / samples.len() as f64
            }
        }
    }

    /// dg/dx = γ E[D 1{D x < B}].
    pub fn g_prime(&self, gamma: f64, x: f64) -> f64 {
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                let denom = mean_b + mean_d * x;
                gamma * mean_b * mean_b * mean_d / (denom * denom)
            }
            JointBD::DeterministicRatio { theta, d_law } => {
                if x < *theta {
                    gamma * d_law.mean()
                } else {
                    0.0
                }
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                let tail: f64 = thetas
                    .iter()
                    .zip(probs)
                    .filter(|(t, _)| x < **t)
                    .map(|(_, q)| q)
                    .sum();
                gamma * d_law.mean() * tail
            }
            JointBD::ParetoRatio { a, kappa, d_law } => {
                gamma * d_law.mean() * (kappa / (x + kappa)).powf(*a)
            }
            JointBD::Empirical { samples } => {
                let e: f64 = samples
                    .iter()
                    .filter(|&&(b, d)| d * x < b)
                    .map(|&(_, d)| d)
                    .sum();
                gamma * e / samples.len() as f64
            }
        }
    }

    /// sup_x g(x) = γ E[B].
    pub fn g_limit(&self, gamma: f64) -> f64 {
        gamma * self.mean_b()
    }

    /// Right edge of the strictly-increasing range of g: the smallest rate
    /// beyond which g is flat (infinite when g increases everywhere).
    pub fn g_flat_from(&self) -> f64 {
        match self {
            JointBD::IndependentExp { .. } | JointBD::ParetoRatio { .. } => f64::INFINITY,
            JointBD::DeterministicRatio { theta, .. } => *theta,
            JointBD::DiscreteRatio { thetas, .. } => thetas.iter().cloned().fold(0.0, f64::max),
            JointBD::Empirical { samples } => samples
                .iter()
                .map(|&(b, d)| b / d)
                .fold(0.0, f64::max),
        }
    }

    /// Inverse of g on its strictly-increasing range: the unique x with
    /// g(x) = Λ. Errors when Λ is outside (0, sup g) or lands on a flat
    /// segment; callers treat that as a rate pinned at a kink or cap.
    pub fn g_inverse(&self, gamma: f64, lam: f64) -> Result<f64> {
        let sup = self.g_limit(gamma);
        let range_err = |msg: &str| Error::Range {
            value: lam,
            lo: 0.0,
            hi: sup,
            msg: msg.into(),
        };
        if !(lam > 0.0) {
            return Err(range_err("throughput must be positive"));
        }
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                if lam >= gamma * mean_b {
                    return Err(range_err("throughput at or above γ E[B]"));
                }
                Ok(lam * mean_b / (mean_d * (gamma * mean_b - lam)))
            }
            JointBD::DeterministicRatio { theta, d_law } => {
                let cap = gamma * d_law.mean() * theta;
                if lam >= cap {
                    return Err(range_err("g is constant beyond θ"));
                }
                Ok(lam / (gamma * d_law.mean()))
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                if lam >= sup {
                    return Err(range_err("g is constant beyond max θ"));
                }
                // Piecewise linear: slope γ E[D] P(Θ > x) between sorted kinks.
                let mut kinks: Vec<(f64, f64)> =
                    thetas.iter().cloned().zip(probs.iter().cloned()).collect();
                kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
                let scale = gamma * d_law.mean();
                let mut x0 = 0.0;
                let mut g0 = 0.0;
                let mut tail = 1.0;
                for &(theta, q) in &kinks {
                    let g1 = g0 + scale * tail * (theta - x0);
                    if lam <= g1 {
                        return Ok(x0 + (lam - g0) / (scale * tail));
                    }
                    x0 = theta;
                    g0 = g1;
                    tail -= q;
                }
                Err(range_err("g is constant beyond max θ"))
            }
            JointBD::ParetoRatio { a, kappa, d_law } => {
                if lam >= sup {
                    return Err(range_err("throughput at or above γ E[B]"));
                }
                let s = 1.0 - lam * (a - 1.0) / (gamma * d_law.mean() * kappa);
                Ok(kappa * (s.powf(-1.0 / (a - 1.0)) - 1.0))
            }
            JointBD::Empirical { .. } => {
                if lam >= sup {
                    return Err(range_err("throughput at or above γ E[B]"));
                }
                // Bracket by doubling, then bisect to 1e-12 on x.
                let mut hi = 1.0;
                while self.g_value(gamma, hi) <= lam {
                    hi *= 2.0;
                    if hi > self.g_flat_from() * 4.0 + 1e6 {
                        return Err(range_err("throughput lands on a flat segment of g"));
                    }
                }
                let mut lo = 0.0;
                while hi - lo > 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if self.g_value(gamma, mid) < lam {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    /// Joint tail P(B > b, D >= d).
    pub fn joint_tail(&self, b: f64, d: f64) -> f64 {
        debug_assert!(b >= 0.0 && d >= 0.0);
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                let tb = if b <= 0.0 { 1.0 } else { (-b / mean_b).exp() };
                tb * DLaw::Exp { mean: *mean_d }.sf(d)
            }
            JointBD::DeterministicRatio { theta, d_law } => {
                // {θD > b, D >= d}
                if b <= 0.0 {
                    // B > 0 a.s. except when D has an atom at 0 (excluded).
                    d_law.sf(d)
                } else {
                    let cut = b / theta;
                    if cut >= d {
                        d_law.sf_strict(cut)
                    } else {
                        d_law.sf(d)
                    }
                }
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => thetas
                .iter()
                .zip(probs)
                .map(|(&theta, &q)| {
                    q * JointBD::DeterministicRatio {
                        theta,
                        d_law: d_law.clone(),
                    }
                    .joint_tail(b, d)
                })
                .sum(),
            JointBD::ParetoRatio { a, kappa, d_law } => match d_law {
                DLaw::Deterministic { value } => {
                    if *value >= d {
                        if b <= 0.0 {
                            1.0
                        } else {
                            (kappa / (b / value + kappa)).powf(*a)
                        }
                    } else {
                        0.0
                    }
                }
                DLaw::Exp { mean } => {
                    if b <= 0.0 {
                        return d_law.sf(d);
                    }
                    // Integrate over H via u = h/(h+κ), f_H(h) dh = a(1-u)^{a-1} du.
                    let a = *a;
                    let kappa = *kappa;
                    let m = *mean;
                    let integrand = |u: f64| -> f64 {
                        if u <= 0.0 {
                            return 0.0;
                        }
                        let h = kappa * u / (1.0 - u);
                        let t = (b / h).max(d);
                        a * (1.0 - u).powf(a - 1.0) * (-t / m).exp()
                    };
                    adaptive_simpson(&integrand, 0.0, 1.0 - 1e-12, 1e-12, 24)
                }
            },
            JointBD::Empirical { samples } => {
                samples
                    .iter()
                    .filter(|&&(sb, sd)| sb > b && sd >= d)
                    .count() as f64
                    / samples.len() as f64
            }
        }
    }

    /// E[min(D, B/p)]: mean sojourn of an EV charged at constant rate p.
    pub fn mean_min_d_b_over(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.mean_d();
        }
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                mean_b * mean_d / (mean_b + mean_d * p)
            }
            JointBD::DeterministicRatio { theta, d_law } => {
                d_law.mean() * (theta / p).min(1.0)
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                let e: f64 = thetas
                    .iter()
                    .zip(probs)
                    .map(|(t, q)| q * (t / p).min(1.0))
                    .sum();
                d_law.mean() * e
            }
            JointBD::ParetoRatio { .. } => self.mean_min_dx_b(p) / p,
            JointBD::Empirical { samples } => {
                samples.iter().map(|&(b, d)| d.min(b / p)).sum::<f64>() / samples.len() as f64
            }
        }
    }

    /// P(D >= B/p): probability one EV charged at constant rate p finishes
    /// before its parking time expires.
    pub fn success_prob(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => {
                p * mean_d / (mean_b + p * mean_d)
            }
            JointBD::DeterministicRatio { theta, .. } => {
                if *theta <= p {
                    1.0
                } else {
                    0.0
                }
            }
            JointBD::DiscreteRatio { thetas, probs, .. } => thetas
                .iter()
                .zip(probs)
                .filter(|(t, _)| **t <= p)
                .map(|(_, q)| q)
                .sum(),
            JointBD::ParetoRatio { a, kappa, .. } => 1.0 - (kappa / (p + kappa)).powf(*a),
            JointBD::Empirical { samples } => {
                samples.iter().filter(|&&(b, d)| b <= p * d).count() as f64
                    / samples.len() as f64
            }
        }
    }

    /// Draws one (b, d) pair.
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        match self {
            JointBD::IndependentExp { mean_b, mean_d } => (
                -mean_b * (1.0 - rng.gen::<f64>()).ln(),
                -mean_d * (1.0 - rng.gen::<f64>()).ln(),
            ),
            JointBD::DeterministicRatio { theta, d_law } => {
                let d = d_law.sample(rng);
                (theta * d, d)
            }
            JointBD::DiscreteRatio {
                thetas,
                probs,
                d_law,
            } => {
                let mut u = rng.gen::<f64>();
                let mut theta = *thetas.last().expect("validated nonempty");
                for (t, q) in thetas.iter().zip(probs) {
                    if u < *q {
                        theta = *t;
                        break;
                    }
                    u -= q;
                }
                let d = d_law.sample(rng);
                (theta * d, d)
            }
            JointBD::ParetoRatio { a, kappa, d_law } => {
                let u = rng.gen::<f64>();
                let h = kappa * ((1.0 - u).powf(-1.0 / a) - 1.0);
                let d = d_law.sample(rng);
                (h * d, d)
            }
            JointBD::Empirical { samples } => samples[rng.gen_range(0..samples.len())],
        }
    }

    /// Checks the support condition `inf(D/B) <= 1/c_max` under which the
    /// throughput transform is strictly increasing on [0, c_max]. For the
    /// ratio families the check is informational: the kink case is handled
    /// through the flat-segment conventions.
    pub fn support_condition(&self, c_max: f64) -> SupportCondition {
        let flat_from = self.g_flat_from();
        SupportCondition {
            holds: c_max <= flat_from,
            informational: matches!(
                self,
                JointBD::DeterministicRatio { .. } | JointBD::DiscreteRatio { .. }
            ),
            flat_from,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SupportCondition {
    pub holds: bool,
    /// True for ratio families where a failing check is expected and handled.
    pub informational: bool,
    /// Rate beyond which g stops increasing.
    pub flat_from: f64,
}

/// Adaptive Simpson quadrature; used for tails without elementary closed form.
pub(crate) fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, m: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn rec(
        f: &impl Fn(f64) -> f64,
        a: f64,
        m: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let left = simpson(f, a, lm, m);
        let right = simpson(f, m, rm, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, lm, m, left, tol / 2.0, depth - 1)
                + rec(f, m, rm, b, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    rec(f, a, m, b, simpson(f, a, m, b), tol, depth)
}

/// Utility shape attached to one (node, type) class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityForm {
    /// w log p (weighted proportional fairness).
    Log,
    /// w p^{1-alpha} / (1-alpha), alpha > 0, alpha != 1.
    Power { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub form: UtilityForm,
    pub weight: f64,
}

impl Utility {
    pub fn log(weight: f64) -> Self {
        Utility {
            form: UtilityForm::Log,
            weight,
        }
    }

    pub fn value(&self, p: f64) -> f64 {
        match self.form {
            UtilityForm::Log => self.weight * p.ln(),
            UtilityForm::Power { alpha } => self.weight * p.powf(1.0 - alpha) / (1.0 - alpha),
        }
    }

    pub fn prime(&self, p: f64) -> f64 {
        match self.form {
            UtilityForm::Log => self.weight / p,
            UtilityForm::Power { alpha } => self.weight * p.powf(-alpha),
        }
    }

    pub fn second(&self, p: f64) -> f64 {
        match self.form {
            UtilityForm::Log => -self.weight / (p * p),
            UtilityForm::Power { alpha } => -alpha * self.weight * p.powf(-alpha - 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "utility weight must be positive, got {}",
                self.weight
            )));
        }
        if let UtilityForm::Power { alpha } = self.form {
            if !(alpha > 0.0) || (alpha - 1.0).abs() < 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "power utility needs alpha > 0, alpha != 1, got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// One EV type: its joint (B, D) law and charging-rate cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvClass {
    pub joint: JointBD,
    /// Maximum charging rate (per-unit power); `f64::INFINITY` disables it.
    pub c_max: f64,
}

/// Per-(node, type) arrival rates and utilities over a fixed network.
///
/// Node indices follow [`Network`]: 1..=I with the feeder at 0 (row 0 of the
/// per-node tables is unused). Types are indexed 0..J.
#[derive(Debug, Clone)]
pub struct ClassTable {
    classes: Vec<EvClass>,
    lambda: Vec<Vec<f64>>,
    utility: Vec<Vec<Utility>>,
}

impl ClassTable {
    pub fn new(
        classes: Vec<EvClass>,
        lambda: Vec<Vec<f64>>,
        utility: Vec<Vec<Utility>>,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidParameter("at least one EV type required".into()));
        }
        let j = classes.len();
        for class in &classes {
            class.joint.validate()?;
            if !(class.c_max > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "c_max must be positive, got {}",
                    class.c_max
                )));
            }
        }
        if lambda.len() != utility.len() {
            return Err(Error::InvalidParameter(
                "lambda and utility tables must have equal node count".into(),
            ));
        }
        for (i, row) in lambda.iter().enumerate() {
            if row.len() != j {
                return Err(Error::InvalidParameter(format!(
                    "lambda row {i} has {} entries, expected {j}",
                    row.len()
                )));
            }
            if row.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "arrival rates must be finite and nonnegative (row {i})"
                )));
            }
        }
        for row in &utility {
            if row.len() != j {
                return Err(Error::InvalidParameter(
                    "utility rows must match the type count".into(),
                ));
            }
            for u in row {
                u.validate()?;
            }
        }
        Ok(ClassTable {
            classes,
            lambda,
            utility,
        })
    }

    /// Same type at every node, uniform arrival rate, shared utility.
    pub fn uniform(net: &Network, class: EvClass, lambda: f64, utility: Utility) -> Result<Self> {
        let n = net.node_count();
        let mut lam = vec![vec![0.0]; n + 1];
        let mut util = vec![vec![utility]; n + 1];
        for i in 1..=n {
            lam[i] = vec![lambda];
            util[i] = vec![utility];
        }
        lam[0] = vec![0.0];
        util[0] = vec![utility];
        Self::new(vec![class], lam, util)
    }

    /// Replaces every utility weight by the node's cumulative path
    /// resistance (the fairness weights of the line closed form).
    pub fn with_cum_r_weights(mut self, net: &Network) -> Self {
        for i in 1..=net.node_count().min(self.utility.len() - 1) {
            for u in &mut self.utility[i] {
                u.weight = net.cum_r(i);
            }
        }
        self
    }

    pub fn type_count(&self) -> usize {
        self.classes.len()
    }

    pub fn node_rows(&self) -> usize {
        self.lambda.len()
    }

    pub fn class(&self, j: usize) -> &EvClass {
        &self.classes[j]
    }

    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        self.lambda[i][j]
    }

    pub fn set_lambda(&mut self, i: usize, j: usize, v: f64) {
        self.lambda[i][j] = v;
    }

    pub fn utility(&self, i: usize, j: usize) -> &Utility {
        &self.utility[i][j]
    }

    pub fn set_utility(&mut self, i: usize, j: usize, u: Utility) {
        self.utility[i][j] = u;
    }

    pub fn node_lambda(&self, i: usize) -> f64 {
        self.lambda[i].iter().sum()
    }
}

/// Modified arrival rates under finite parking:
/// `γ_ij = (λ_ij/λ_i) min{λ_i, K_i / Σ_j' (λ_ij'/λ_i) E[D_j']}`.
///
/// Rows follow the network indexing; row 0 is zero.
pub fn gamma_effective(net: &Network, classes: &ClassTable) -> Vec<Vec<f64>> {
    let n = net.node_count();
    let j = classes.type_count();
    let mut out = vec![vec![0.0; j]; n + 1];
    for i in 1..=n {
        let lam_i = classes.node_lambda(i);
        if lam_i <= 0.0 {
            continue;
        }
        let mix_mean_d: f64 = (0..j)
            .map(|t| classes.lambda(i, t) / lam_i * classes.class(t).joint.mean_d())
            .sum();
        let accepted = if net.k_spaces(i).is_infinite() {
            lam_i
        } else {
            lam_i.min(net.k_spaces(i) / mix_mean_d)
        };
        for t in 0..j {
            out[i][t] = classes.lambda(i, t) / lam_i * accepted;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp11() -> JointBD {
        JointBD::IndependentExp {
            mean_b: 1.0,
            mean_d: 1.0,
        }
    }

    fn all_variants() -> Vec<JointBD> {
        vec![
            exp11(),
            JointBD::DeterministicRatio {
                theta: 0.7,
                d_law: DLaw::Exp { mean: 1.3 },
            },
            JointBD::DiscreteRatio {
                thetas: vec![0.3, 1.4],
                probs: vec![0.25, 0.75],
                d_law: DLaw::Exp { mean: 0.8 },
            },
            JointBD::ParetoRatio {
                a: 3.0,
                kappa: 2.0,
                d_law: DLaw::Exp { mean: 1.0 },
            },
            JointBD::Empirical {
                samples: vec![(0.5, 1.0), (2.0, 0.5), (1.0, 2.0), (0.1, 0.2)],
            },
        ]
    }

    #[test]
    fn gamma_effective_examples() {
        let net = crate::grid::Network::line(&[0.01], &[0.0], 1.0, 8.0, &GridOptions::default())
            .unwrap();
        let classes = ClassTable::new(
            vec![
                EvClass { joint: exp11(), c_max: 1.0 },
                EvClass { joint: exp11(), c_max: 1.0 },
            ],
            vec![vec![0.0, 0.0], vec![0.48, 0.72]],
            vec![vec![Utility::log(1.0); 2]; 2],
        )
        .unwrap();
        let g = gamma_effective(&net, &classes);
        assert!((g[1][0] - 0.4).abs() < 1e-12);
        assert!((g[1][1] - 0.6).abs() < 1e-12);

        let net_inf =
            crate::grid::Network::line(&[0.01], &[0.0], f64::INFINITY, 8.0, &GridOptions::default())
                .unwrap();
        let g = gamma_effective(&net_inf, &classes);
        assert!((g[1][0] - 0.48).abs() < 1e-12);
        assert!((g[1][1] - 0.72).abs() < 1e-12);

        let net10 = crate::grid::Network::line(&[0.01], &[0.0], 10.0, 8.0, &GridOptions::default())
            .unwrap();
        let single = ClassTable::uniform(
            &net10,
            EvClass { joint: exp11(), c_max: 1.0 },
            12.0,
            Utility::log(1.0),
        )
        .unwrap();
        let g = gamma_effective(&net10, &single);
        assert!((g[1][0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn g_value_examples() {
        assert!((exp11().g_value(10.0, 1.0) - 5.0).abs() < 1e-12);
        let det = JointBD::DeterministicRatio {
            theta: 0.02,
            d_law: DLaw::Exp { mean: 1.0 },
        };
        assert!((det.g_value(0.6, 1.0) - 0.012).abs() < 1e-15);
        for joint in all_variants() {
            assert_eq!(joint.g_value(3.0, 0.0), 0.0);
        }
    }

    #[test]
    fn g_inverse_examples() {
        // 10 x / (1 + x) = 3.8  =>  x = 3.8 / 6.2
        let x = exp11().g_inverse(10.0, 3.8).unwrap();
        assert!((x - 3.8 / 6.2).abs() < 1e-12);
        // bisection oracle
        let mut lo = 0.0;
        let mut hi = 10.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if exp11().g_value(10.0, mid) < 3.8 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((x - 0.5 * (lo + hi)).abs() < 1e-10);

        let pareto = JointBD::ParetoRatio {
            a: 3.0,
            kappa: 2.0,
            d_law: DLaw::Exp { mean: 1.0 },
        };
        // Numeric-integration oracle: E[min(1, H)] = ∫_0^1 P(H > x) dx.
        let tail = |x: f64| (2.0 / (x + 2.0)).powi(3);
        let oracle = adaptive_simpson(&tail, 0.0, 1.0, 1e-13, 20);
        assert!((oracle - 5.0 / 9.0).abs() < 1e-10, "oracle {oracle}");
        assert!((pareto.g_value(1.0, 1.0) - oracle).abs() < 1e-10);
        assert!((pareto.g_inverse(1.0, 5.0 / 9.0).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn g_inverse_round_trip_all_variants() {
        for joint in all_variants() {
            let gamma = 2.5;
            let flat = joint.g_flat_from();
            for frac in [0.1, 0.4, 0.9] {
                let x = if flat.is_finite() { flat * frac } else { frac * 3.0 };
                let lam = joint.g_value(gamma, x);
                let back = joint.g_inverse(gamma, lam).unwrap();
                assert!(
                    (back - x).abs() < 1e-9,
                    "{joint:?}: x={x} lam={lam} back={back}"
                );
            }
        }
    }

    #[test]
    fn g_inverse_range_errors() {
        let det = JointBD::DeterministicRatio {
            theta: 0.5,
            d_law: DLaw::Exp { mean: 1.0 },
        };
        // g saturates at γ E[D] θ = 1.0
        assert!(matches!(det.g_inverse(2.0, 1.0), Err(Error::Range { .. })));
        assert!(matches!(det.g_inverse(2.0, 0.0), Err(Error::Range { .. })));
        assert!(matches!(exp11().g_inverse(1.0, 1.0), Err(Error::Range { .. })));
    }

    #[test]
    fn joint_tail_examples() {
        assert_eq!(exp11().joint_tail(0.0, 0.0), 1.0);
        assert!((exp11().joint_tail(1.0, 1.0) - (-2.0f64).exp()).abs() < 1e-12);
        let det = JointBD::DeterministicRatio {
            theta: 2.0,
            d_law: DLaw::Exp { mean: 1.0 },
        };
        assert!((det.joint_tail(4.0, 1.0) - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn joint_tail_monotone_and_normalized() {
        for joint in all_variants() {
            assert!((joint.joint_tail(0.0, 0.0) - 1.0).abs() < 1e-9, "{joint:?}");
            let mut prev = 1.0;
            for step in 1..=6 {
                let t = 0.4 * step as f64;
                let cur = joint.joint_tail(t, 0.3);
                assert!(cur <= prev + 1e-12, "{joint:?} not monotone in b");
                prev = cur;
            }
            let mut prev = 1.0;
            for step in 1..=6 {
                let t = 0.4 * step as f64;
                let cur = joint.joint_tail(0.3, t);
                assert!(cur <= prev + 1e-12, "{joint:?} not monotone in d");
                prev = cur;
            }
        }
    }

    #[test]
    fn g_monotone_concave_and_bounded() {
        for joint in all_variants() {
            let gamma = 1.7;
            let md = joint.mean_d();
            let mb = joint.mean_b();
            let mut prev = 0.0;
            for step in 0..=40 {
                let x = 0.1 * step as f64;
                let v = joint.g_value(gamma, x);
                assert!(v + 1e-12 >= prev, "{joint:?} not nondecreasing at {x}");
                assert!(
                    v <= gamma * (md * x).min(mb) + 1e-9,
                    "{joint:?} exceeds min-bound at {x}"
                );
                prev = v;
                // midpoint concavity
                let v2 = joint.g_value(gamma, x + 0.2);
                let vm = joint.g_value(gamma, x + 0.1);
                assert!(vm >= 0.5 * (v + v2) - 1e-9, "{joint:?} not concave at {x}");
            }
        }
    }

    #[test]
    fn g_prime_matches_finite_differences() {
        for joint in all_variants() {
            let gamma = 1.3;
            for x in [0.05, 0.45, 1.1] {
                // skip points too close to a kink of the piecewise forms
                let near_kink = match &joint {
                    JointBD::DeterministicRatio { theta, .. } => (x - theta).abs() < 0.02,
                    JointBD::DiscreteRatio { thetas, .. } => {
                        thetas.iter().any(|t| (x - t).abs() < 0.02)
                    }
                    JointBD::Empirical { samples } => {
                        samples.iter().any(|&(b, d)| (x - b / d).abs() < 0.02)
                    }
                    _ => false,
                };
                if near_kink {
                    continue;
                }
                let h = 1e-6;
                let fd = (joint.g_value(gamma, x + h) - joint.g_value(gamma, x - h)) / (2.0 * h);
                assert!(
                    (joint.g_prime(gamma, x) - fd).abs() < 1e-5,
                    "{joint:?} at {x}: {} vs {}",
                    joint.g_prime(gamma, x),
                    fd
                );
            }
        }
    }

    /// Monte-Carlo oracle for every closed form: 10^7 samples, 3σ acceptance.
    #[test]
    fn monte_carlo_oracle_validates_closed_forms() {
        const N: usize = 10_000_000;
        for (vi, joint) in all_variants().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + vi as u64);
            let x = 0.8;
            let p = 0.9;
            let (tb, td) = (0.6, 0.4);
            let mut acc_g = OnlineMean::default();
            let mut acc_soj = OnlineMean::default();
            let mut acc_succ = OnlineMean::default();
            let mut acc_tail = OnlineMean::default();
            for _ in 0..N {
                let (b, d) = joint.sample(&mut rng);
                acc_g.push((d * x).min(b));
                acc_soj.push(d.min(b / p));
                acc_succ.push(if b <= p * d { 1.0 } else { 0.0 });
                acc_tail.push(if b > tb && d >= td { 1.0 } else { 0.0 });
            }
            let gamma = 1.0;
            acc_g.assert_covers(joint.g_value(gamma, x), "g_value", &joint);
            acc_soj.assert_covers(joint.mean_min_d_b_over(p), "mean_min_d_b_over", &joint);
            acc_succ.assert_covers(joint.success_prob(p), "success_prob", &joint);
            acc_tail.assert_covers(joint.joint_tail(tb, td), "joint_tail", &joint);
        }
    }

    #[derive(Default)]
    struct OnlineMean {
        n: f64,
        mean: f64,
        m2: f64,
    }

    impl OnlineMean {
        fn push(&mut self, v: f64) {
            self.n += 1.0;
            let d = v - self.mean;
            self.mean += d / self.n;
            self.m2 += d * (v - self.mean);
        }

        fn assert_covers(&self, expected: f64, what: &str, joint: &JointBD) {
            let se = (self.m2 / (self.n * (self.n - 1.0))).sqrt();
            let slack = 3.0 * se + 1e-12;
            assert!(
                (self.mean - expected).abs() <= slack,
                "{what} for {joint:?}: closed form {expected}, MC {} ± {se}",
                self.mean
            );
        }
    }

    #[test]
    fn empirical_agrees_with_exp_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000;
        let samples: Vec<(f64, f64)> = (0..n).map(|_| exp11().sample(&mut rng)).collect();
        let emp = JointBD::Empirical { samples };
        for x in [0.3, 1.0, 2.5] {
            let closed = exp11().g_value(1.0, x);
            let se = 1.0 / (n as f64).sqrt(); // crude bound: min(Dx,B) has std < 1+x
            assert!(
                (emp.g_value(1.0, x) - closed).abs() < 3.0 * se * (1.0 + x),
                "x={x}"
            );
        }
    }

    #[test]
    fn support_condition_per_family() {
        assert!(exp11().support_condition(5.0).holds);
        let det = JointBD::DeterministicRatio {
            theta: 0.5,
            d_law: DLaw::Exp { mean: 1.0 },
        };
        let sc = det.support_condition(1.0);
        assert!(!sc.holds && sc.informational);
        assert!(det.support_condition(0.4).holds);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(JointBD::ParetoRatio {
            a: 1.0,
            kappa: 2.0,
            d_law: DLaw::Exp { mean: 1.0 }
        }
        .validate()
        .is_err());
        assert!(JointBD::DiscreteRatio {
            thetas: vec![0.5],
            probs: vec![0.6],
            d_law: DLaw::Exp { mean: 1.0 }
        }
        .validate()
        .is_err());
        assert!(JointBD::Empirical { samples: vec![] }.validate().is_err());
        assert!(Utility {
            form: UtilityForm::Power { alpha: 1.0 },
            weight: 1.0
        }
        .validate()
        .is_err());
    }
}
