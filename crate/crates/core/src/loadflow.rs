//! Voltage computation under both load-flow models: the linearized Distflow
//! closed form and the simplified AC model with explicit line losses, plus
//! the check that Distflow voltages dominate the AC ones nodewise.

use crate::error::{Error, Result};
use crate::grid::Network;

/// Aggregate active power drawn at each node, `Λ_i = Σ_j z_ij p_ij`
/// (per-unit). EVs absorb no reactive power. Index 0 (the feeder) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePower {
    lam: Vec<f64>,
}

impl NodePower {
    pub fn new(net: &Network, lam: Vec<f64>) -> Result<Self> {
        if lam.len() != net.node_count() + 1 {
            return Err(Error::InvalidParameter(format!(
                "node power vector must have {} entries (feeder slot included), got {}",
                net.node_count() + 1,
                lam.len()
            )));
        }
        if lam.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "node powers must be finite and nonnegative".into(),
            ));
        }
        Ok(NodePower { lam })
    }

    pub fn zeros(net: &Network) -> Self {
        NodePower {
            lam: vec![0.0; net.node_count() + 1],
        }
    }

    pub fn lam(&self, i: usize) -> f64 {
        self.lam[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lam
    }

    pub fn total(&self) -> f64 {
        self.lam.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        NodePower {
            lam: self.lam.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Squared voltage magnitudes under the linearized Distflow model:
/// `w_lin[k] = w00 - 2 Σ_{edges (l,s) on P(k)} R_ls Σ_{m in subtree(s)} Λ_m`.
///
/// Entry 0 is `w00`.
pub fn distflow_voltages(net: &Network, power: &NodePower) -> Vec<f64> {
    let n = net.node_count();
    // Subtree power sums, children before parents (indices decrease toward
    // the root only in BFS order, so accumulate over the subtree table).
    let mut subtree_sum = vec![0.0; n + 1];
    for k in 1..=n {
        subtree_sum[k] = net.subtree_nodes(k).iter().map(|&m| power.lam(m)).sum();
    }
    let mut w = vec![net.w00(); n + 1];
    let mut order: Vec<usize> = (1..=n).collect();
    order.sort_by_key(|&k| net.depth(k));
    for k in order {
        w[k] = w[net.parent(k)] - 2.0 * net.r(k) * subtree_sum[k];
    }
    w
}

/// Converged solution of the simplified AC model. Edges are indexed by their
/// child node (1..=I); per-edge entries at index 0 are unused.
#[derive(Debug, Clone)]
pub struct AcSolution {
    /// Voltage magnitudes V_k (per-unit); index 0 is the feeder voltage.
    pub v: Vec<f64>,
    /// Squared parent voltage per edge.
    pub w_pp: Vec<f64>,
    /// Cross term V_p V_k per edge.
    pub w_pk: Vec<f64>,
    /// Squared child voltage per edge (equals the node's squared voltage).
    pub w_kk: Vec<f64>,
    /// Active power loss per edge, as used inside the subtree powers.
    pub loss_p: Vec<f64>,
    /// Reactive power loss per edge.
    pub loss_q: Vec<f64>,
    /// Active power consumed by the subtree hanging below each edge.
    pub p_subtree: Vec<f64>,
    /// Reactive power consumed by the subtree hanging below each edge.
    pub q_subtree: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl AcSolution {
    /// Power injected by the feeder: subtree powers plus root-edge losses.
    pub fn feeder_injection(&self, net: &Network) -> f64 {
        net.children(0)
            .iter()
            .map(|&c| self.p_subtree[c] + self.loss_p[c])
            .sum()
    }
}

/// Solves the simplified AC equations by a loss fixed point: start from zero
/// losses, alternate (subtree powers) -> (edge-by-edge voltage quadratics,
/// larger root) -> (losses from voltages) until the voltage sweep is stable.
///
/// Undamped by default; falls back to 0.5 damping when the sweep oscillates.
pub fn ac_solve(net: &Network, power: &NodePower, tol: f64) -> Result<AcSolution> {
    const MAX_ITER: usize = 200;
    let n = net.node_count();
    let v0 = net.w00().sqrt();
    let mut v = vec![v0; n + 1];
    let mut loss_p = vec![0.0; n + 1];
    let mut loss_q = vec![0.0; n + 1];
    let mut p_sub = vec![0.0; n + 1];
    let mut q_sub = vec![0.0; n + 1];

    let mut order: Vec<usize> = (1..=n).collect();
    order.sort_by_key(|&k| net.depth(k));

    let mut damping = 1.0;
    let mut prev_diff = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        // Subtree powers from current losses; the edge into k is excluded
        // from its own subtree.
        for &k in order.iter().rev() {
            let mut p = power.lam(k);
            let mut q = 0.0;
            for &c in net.children(k) {
                p += p_sub[c] + loss_p[c];
                q += q_sub[c] + loss_q[c];
            }
            p_sub[k] = p;
            q_sub[k] = q;
        }
        // Voltage sweep root-to-leaf: V_k^2 - V_p V_k + (P R + Q X) = 0,
        // high-voltage branch.
        let mut v_new = v.clone();
        for &k in &order {
            let vp = v_new[net.parent(k)];
            let load = p_sub[k] * net.r(k) + q_sub[k] * net.x(k);
            let disc = vp * vp - 4.0 * load;
            if disc < 0.0 {
                return Err(Error::InfeasibleLoad(format!(
                    "no real voltage at node {} (index {k}): discriminant {disc:.3e}",
                    net.label(k)
                )));
            }
            v_new[k] = 0.5 * (vp + disc.sqrt());
        }
        let diff = (1..=n)
            .map(|k| (v_new[k] - v[k]).abs())
            .fold(0.0, f64::max);
        if diff > prev_diff {
            damping = 0.5;
        }
        prev_diff = diff;
        for k in 1..=n {
            v[k] = v[k] + damping * (v_new[k] - v[k]);
        }
        // Losses from the updated voltages.
        for &k in &order {
            let dv = v[net.parent(k)] - v[k];
            let denom = net.r(k) * net.r(k) + net.x(k) * net.x(k);
            loss_p[k] = dv * dv * net.r(k) / denom;
            loss_q[k] = dv * dv * net.x(k) / denom;
        }
        if diff < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "AC loss fixed point: max voltage change {prev_diff:.3e} after {MAX_ITER} sweeps"
        )));
    }

    // Final consistent quantities: subtree powers from the converged losses,
    // then one exact (undamped) voltage sweep so the transformed Kirchhoff
    // relation holds to rounding against the stored powers.
    for &k in order.iter().rev() {
        let mut p = power.lam(k);
        let mut q = 0.0;
        for &c in net.children(k) {
            p += p_sub[c] + loss_p[c];
            q += q_sub[c] + loss_q[c];
        }
        p_sub[k] = p;
        q_sub[k] = q;
    }
    for &k in &order {
        let vp = v[net.parent(k)];
        let load = p_sub[k] * net.r(k) + q_sub[k] * net.x(k);
        let disc = vp * vp - 4.0 * load;
        if disc < 0.0 {
            return Err(Error::InfeasibleLoad(format!(
                "no real voltage at node {} on the final sweep",
                net.label(k)
            )));
        }
        v[k] = 0.5 * (vp + disc.sqrt());
    }

    let mut w_pp = vec![0.0; n + 1];
    let mut w_pk = vec![0.0; n + 1];
    let mut w_kk = vec![0.0; n + 1];
    for k in 1..=n {
        let vp = v[net.parent(k)];
        w_pp[k] = vp * vp;
        w_pk[k] = vp * v[k];
        w_kk[k] = v[k] * v[k];
    }
    Ok(AcSolution {
        v,
        w_pp,
        w_pk,
        w_kk,
        loss_p,
        loss_q,
        p_subtree: p_sub,
        q_subtree: q_sub,
        converged,
        iterations,
    })
}

/// Per-node domination gaps `w_lin[k] - w_kk[k]` between the load-flow models.
#[derive(Debug, Clone)]
pub struct DominationReport {
    /// `w_lin - w_ac` per node; nonnegative (up to 1e-9) when domination holds.
    pub gaps: Vec<f64>,
    pub max_violation: f64,
}

/// Verifies `w_kk(AC) <= w_lin(Distflow) + 1e-9` and `w_lin <= w00` nodewise.
pub fn check_domination(net: &Network, power: &NodePower) -> Result<DominationReport> {
    let ac = ac_solve(net, power, 1e-10)?;
    let lin = distflow_voltages(net, power);
    let mut gaps = vec![0.0; net.node_count() + 1];
    let mut offenders = Vec::new();
    let mut max_violation: f64 = 0.0;
    for k in 1..=net.node_count() {
        gaps[k] = lin[k] - ac.w_kk[k];
        if gaps[k] < -1e-9 {
            offenders.push(net.label(k));
            max_violation = max_violation.max(-gaps[k]);
        }
        if lin[k] > net.w00() + 1e-12 {
            offenders.push(net.label(k));
            max_violation = max_violation.max(lin[k] - net.w00());
        }
    }
    if !offenders.is_empty() {
        offenders.sort_unstable();
        offenders.dedup();
        return Err(Error::InfeasibleLoad(format!(
            "domination violated at nodes {offenders:?} (max violation {max_violation:.3e})"
        )));
    }
    Ok(DominationReport {
        gaps,
        max_violation,
    })
}
