//! Instantaneous power allocation: maximize `Σ z_ij u_ij(p_ij)` over rates
//! subject to load constraints and voltage-drop constraints under the chosen
//! load-flow model. Solved by a log-barrier Newton method; weighted
//! proportional fairness on a line admits a closed form.

use nalgebra::{DMatrix, DVector};

use crate::acsys::{AcCore, ConKind, LinCon};
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::loadflow::{ac_solve, distflow_voltages, NodePower};
use crate::solver::{barrier_solve, step_limit, BarrierOptions, BarrierProblem};
use crate::stochastics::{ClassTable, UtilityForm};

/// Snapshot of uncharged (z) and total (q) EV counts per (node, type).
/// Counts are real-valued so fluid trajectories can share the allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct StateZ {
    z: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

impl StateZ {
    pub fn new(z: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> Result<Self> {
        if z.len() != q.len() {
            return Err(Error::InvalidParameter(
                "z and q must have the same node count".into(),
            ));
        }
        for (zi, qi) in z.iter().zip(&q) {
            if zi.len() != qi.len() {
                return Err(Error::InvalidParameter(
                    "z and q rows must have the same type count".into(),
                ));
            }
            for (a, b) in zi.iter().zip(qi) {
                if !(*a >= 0.0 && *b >= *a) {
                    return Err(Error::InvalidParameter(format!(
                        "need 0 <= z <= q, got z={a}, q={b}"
                    )));
                }
            }
        }
        Ok(StateZ { z, q })
    }

    /// State with all EVs uncharged (q = z).
    pub fn from_z(z: Vec<Vec<f64>>) -> Result<Self> {
        let q = z.clone();
        Self::new(z, q)
    }

    pub fn zeros(net: &Network, types: usize) -> Self {
        StateZ {
            z: vec![vec![0.0; types]; net.node_count() + 1],
            q: vec![vec![0.0; types]; net.node_count() + 1],
        }
    }

    pub fn z(&self, i: usize, j: usize) -> f64 {
        self.z[i][j]
    }

    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    pub fn set_z(&mut self, i: usize, j: usize, v: f64) {
        self.z[i][j] = v;
        self.q[i][j] = self.q[i][j].max(v);
    }

    pub fn node_total_z(&self, i: usize) -> f64 {
        self.z[i].iter().sum()
    }

    pub fn total_z(&self) -> f64 {
        self.z.iter().map(|row| row.iter().sum::<f64>()).sum()
    }

    pub fn node_rows(&self) -> usize {
        self.z.len()
    }

    pub fn type_count(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }
}

/// Lagrange multipliers of the allocation program, reported in W-space:
/// `lower_voltage[k]` pairs with `W_kk >= υ̲_k`, `upper_voltage[k]` with
/// `W_kk <= ῡ_k`, `node_cap[i]` with the node load limit and
/// `rate_cap[i][j]` with `p_ij <= c_max_j`.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub upper_voltage: Vec<f64>,
    pub lower_voltage: Vec<f64>,
    pub node_cap: Vec<f64>,
    pub rate_cap: Vec<Vec<f64>>,
}

impl Multipliers {
    fn zeros(nodes: usize, types: usize) -> Self {
        Multipliers {
            upper_voltage: vec![0.0; nodes + 1],
            lower_voltage: vec![0.0; nodes + 1],
            node_cap: vec![0.0; nodes + 1],
            rate_cap: vec![vec![0.0; types]; nodes + 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveStats {
    pub kind: &'static str,
    pub outer_iters: usize,
    pub newton_iters: usize,
    pub mu_final: f64,
    /// Max-norm stationarity residual over active coordinates.
    pub kkt_residual: f64,
    /// AC only: max normalized cone residual of the returned voltage matrix,
    /// folded with any voltage-bound violation of the recovered solution.
    pub exactness_gap: Option<f64>,
    /// Set when the AC exactness gap exceeds 1e-6 (solution still returned).
    pub exactness_warning: bool,
}

impl SolveStats {
    fn closed_form(kind: &'static str) -> Self {
        SolveStats {
            kind,
            outer_iters: 0,
            newton_iters: 0,
            mu_final: 0.0,
            kkt_residual: 0.0,
            exactness_gap: None,
            exactness_warning: false,
        }
    }
}

/// Result of one allocation solve.
#[derive(Debug, Clone)]
pub struct Allocation {
    /// Per-EV rate; exactly zero where z is zero.
    pub p: Vec<Vec<f64>>,
    /// Per-(node, type) power `z_ij p_ij`.
    pub lam_ij: Vec<Vec<f64>>,
    /// Aggregate node powers.
    pub lam: NodePower,
    pub mult: Multipliers,
    pub stats: SolveStats,
}

impl Allocation {
    pub fn zero(net: &Network, types: usize, kind: &'static str) -> Self {
        let rows = net.node_count() + 1;
        Allocation {
            p: vec![vec![0.0; types]; rows],
            lam_ij: vec![vec![0.0; types]; rows],
            lam: NodePower::zeros(net),
            mult: Multipliers::zeros(net.node_count(), types),
            stats: SolveStats::closed_form(kind),
        }
    }

    pub fn total_power(&self) -> f64 {
        self.lam.total()
    }
}

/// Load-flow model backing the allocation program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocModel {
    Distflow,
    Ac,
    /// Weighted-proportional-fairness closed form on a line.
    ClosedForm,
}

pub fn allocate(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
    model: AllocModel,
) -> Result<Allocation> {
    match model {
        AllocModel::Distflow => allocate_distflow(net, classes, state),
        AllocModel::Ac => allocate_ac(net, classes, state),
        AllocModel::ClosedForm => line_log_allocation(net, classes, state),
    }
}

fn check_dims(net: &Network, classes: &ClassTable, state: &StateZ) -> Result<()> {
    if state.node_rows() != net.node_count() + 1 || classes.node_rows() != net.node_count() + 1 {
        return Err(Error::InvalidParameter(
            "state and class tables must cover every network node".into(),
        ));
    }
    if state.type_count() != classes.type_count() {
        return Err(Error::InvalidParameter(
            "state and class tables must agree on the type count".into(),
        ));
    }
    Ok(())
}

fn active_coords(state: &StateZ) -> Vec<(usize, usize)> {
    let mut act = Vec::new();
    for i in 1..state.node_rows() {
        for j in 0..state.type_count() {
            if state.z(i, j) > 0.0 {
                act.push((i, j));
            }
        }
    }
    act
}

/// Strictly feasible start: a guarded share of each cap and of the voltage
/// headroom.
fn initial_rates(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
    active: &[(usize, usize)],
    scale: f64,
) -> Vec<f64> {
    let types = classes.type_count() as f64;
    let total_z = state.total_z();
    let delta_min = (1..=net.node_count())
        .map(|k| net.delta(k))
        .fold(f64::INFINITY, f64::min);
    active
        .iter()
        .map(|&(i, j)| {
            let mut p = classes.class(j).c_max;
            let m = net.m_cap(i);
            if m.is_finite() {
                p = p.min(m / (2.0 * types * state.node_total_z(i)));
            }
            p = p.min(delta_min / (2.0 * net.cum_r(i) * total_z));
            0.9 * scale * p.min(1e6)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Linearized Distflow allocation
// ---------------------------------------------------------------------------

struct DistflowProblem<'a> {
    active: Vec<(usize, usize)>,
    z: Vec<f64>,
    classes: &'a ClassTable,
    cons: Vec<LinCon>,
    /// Mean active utility weight; the barrier objective is divided by it so
    /// rescaling every weight leaves the solve bit-identical.
    wnorm: f64,
}

fn mean_active_weight(classes: &ClassTable, active: &[(usize, usize)]) -> f64 {
    let sum: f64 = active
        .iter()
        .map(|&(i, j)| classes.utility(i, j).weight)
        .sum();
    sum / active.len() as f64
}

impl BarrierProblem for DistflowProblem<'_> {
    fn dim(&self) -> usize {
        self.active.len()
    }

    fn constraint_count(&self) -> usize {
        self.cons.len() + self.active.len()
    }

    fn eval(&self, x: &DVector<f64>, mu: f64) -> f64 {
        let mut f = 0.0;
        for (a, &(i, j)) in self.active.iter().enumerate() {
            if x[a] <= 0.0 {
                return f64::INFINITY;
            }
            f -= self.z[a] * self.classes.utility(i, j).value(x[a]) / self.wnorm;
            f -= mu * x[a].ln();
        }
        for con in &self.cons {
            let s = con.slack(x);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            f -= mu * s.ln();
        }
        f
    }

    fn grad_hess(&self, x: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (a, &(i, j)) in self.active.iter().enumerate() {
            let u = self.classes.utility(i, j);
            g[a] = -self.z[a] * u.prime(x[a]) / self.wnorm - mu / x[a];
            h[(a, a)] = -self.z[a] * u.second(x[a]) / self.wnorm + mu / (x[a] * x[a]);
        }
        for con in &self.cons {
            let s = con.slack(x);
            for &(a, ca) in &con.row {
                g[a] += mu * ca / s;
                for &(b, cb) in &con.row {
                    h[(a, b)] += mu * ca * cb / (s * s);
                }
            }
        }
        (g, h)
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut t = f64::INFINITY;
        for a in 0..self.dim() {
            t = step_limit(t, x[a], -dx[a]);
        }
        for con in &self.cons {
            let rate: f64 = con.row.iter().map(|&(a, c)| c * dx[a]).sum();
            t = step_limit(t, con.slack(x), rate);
        }
        t
    }
}

fn build_distflow_cons(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
    active: &[(usize, usize)],
) -> Result<Vec<LinCon>> {
    let mut cons = Vec::new();
    // Voltage: Σ_m overlap(k, m) Λ_m <= δ_k, with Λ in terms of active rates.
    for k in 1..=net.node_count() {
        let row: Vec<(usize, f64)> = active
            .iter()
            .enumerate()
            .filter_map(|(a, &(i, j))| {
                let c = net.path_overlap_r(k, i) * state.z(i, j);
                (c > 0.0).then_some((a, c))
            })
            .collect();
        if row.is_empty() {
            continue;
        }
        let delta = net.delta(k);
        if delta <= 0.0 {
            return Err(Error::InfeasibleLoad(format!(
                "node {} has zero voltage headroom but carries load",
                net.label(k)
            )));
        }
        cons.push(LinCon {
            row,
            bound: delta,
            kind: ConKind::LowerVoltage(k),
        });
    }
    // Node caps.
    for i in 1..=net.node_count() {
        if !net.m_cap(i).is_finite() {
            continue;
        }
        let row: Vec<(usize, f64)> = active
            .iter()
            .enumerate()
            .filter_map(|(a, &(ai, aj))| (ai == i).then(|| (a, state.z(ai, aj))))
            .collect();
        if row.is_empty() {
            continue;
        }
        cons.push(LinCon {
            row,
            bound: net.m_cap(i),
            kind: ConKind::NodeCap(i),
        });
    }
    // Charging-rate caps.
    for (a, &(_, j)) in active.iter().enumerate() {
        let c_max = classes.class(j).c_max;
        if c_max.is_finite() {
            cons.push(LinCon {
                row: vec![(a, 1.0)],
                bound: c_max,
                kind: ConKind::RateCap(a),
            });
        }
    }
    Ok(cons)
}

/// Allocation under the linearized Distflow voltage constraints.
pub fn allocate_distflow(net: &Network, classes: &ClassTable, state: &StateZ) -> Result<Allocation> {
    check_dims(net, classes, state)?;
    let active = active_coords(state);
    if active.is_empty() {
        return Ok(Allocation::zero(net, classes.type_count(), "distflow-zero"));
    }
    let z: Vec<f64> = active.iter().map(|&(i, j)| state.z(i, j)).collect();
    let cons = build_distflow_cons(net, classes, state, &active)?;
    let problem = DistflowProblem {
        active: active.clone(),
        z: z.clone(),
        classes,
        cons,
        wnorm: mean_active_weight(classes, &active),
    };
    let x0 = DVector::from_vec(initial_rates(net, classes, state, &active, 1.0));
    let opts = BarrierOptions::default();
    let sol = barrier_solve(&problem, x0, &opts)?;

    let mut alloc = assemble(net, classes, state, &active, &sol.x);
    // Recover multipliers from the stationarity system itself; slack-based
    // estimates lose every digit once active slacks shrink to O(mu).
    let b = DVector::from_iterator(
        active.len(),
        active
            .iter()
            .enumerate()
            .map(|(a, &(i, j))| z[a] * classes.utility(i, j).prime(sol.x[a])),
    );
    let mut cols = DMatrix::zeros(active.len(), problem.cons.len());
    for (c, con) in problem.cons.iter().enumerate() {
        for &(a, coeff) in &con.row {
            cols[(a, c)] = coeff;
        }
    }
    let lambda = crate::solver::nnls(&cols, &b);
    for (c, con) in problem.cons.iter().enumerate() {
        match con.kind {
            // The halved-voltage multiplier maps to W-space by another 1/2.
            ConKind::LowerVoltage(k) => alloc.mult.lower_voltage[k] = lambda[c] / 2.0,
            ConKind::NodeCap(i) => alloc.mult.node_cap[i] = lambda[c],
            ConKind::RateCap(a) => {
                let (i, j) = active[a];
                alloc.mult.rate_cap[i][j] = lambda[c];
            }
        }
    }
    alloc.stats = SolveStats {
        kind: "distflow",
        outer_iters: sol.outer_iters,
        newton_iters: sol.newton_iters,
        mu_final: sol.mu_final,
        kkt_residual: distflow_kkt_residual(net, classes, state, &alloc),
        exactness_gap: None,
        exactness_warning: false,
    };
    certify_common(net, classes, &alloc)?;
    let w = distflow_voltages(net, &alloc.lam);
    for k in 1..=net.node_count() {
        if w[k] < net.v_lo(k) - 1e-9 || w[k] > net.v_hi(k) + 1e-9 {
            return Err(Error::NonConvergence(format!(
                "returned rates violate Distflow voltage bound at node {}",
                net.label(k)
            )));
        }
    }
    Ok(alloc)
}

fn assemble(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
    active: &[(usize, usize)],
    x: &DVector<f64>,
) -> Allocation {
    let types = classes.type_count();
    let mut alloc = Allocation::zero(net, types, "");
    for (a, &(i, j)) in active.iter().enumerate() {
        alloc.p[i][j] = x[a];
        alloc.lam_ij[i][j] = state.z(i, j) * x[a];
    }
    let lam: Vec<f64> = (0..=net.node_count())
        .map(|i| alloc.lam_ij[i].iter().sum())
        .collect();
    alloc.lam = NodePower::new(net, lam).expect("nonnegative by construction");
    alloc
}

/// Stationarity residual of the reported KKT system, W-space multipliers,
/// using the linear voltage gradient `∂W_kk/∂p_ij = -2 overlap(k,i) z_ij`.
fn distflow_kkt_residual(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
    alloc: &Allocation,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 1..=net.node_count() {
        for j in 0..classes.type_count() {
            let zij = state.z(i, j);
            if zij <= 0.0 {
                continue;
            }
            let p = alloc.p[i][j];
            let mut r = zij * classes.utility(i, j).prime(p);
            for k in 1..=net.node_count() {
                let dw = -2.0 * net.path_overlap_r(k, i) * zij;
                r -= dw * (alloc.mult.upper_voltage[k] - alloc.mult.lower_voltage[k]);
            }
            r -= alloc.mult.node_cap[i] * zij;
            r -= alloc.mult.rate_cap[i][j];
            worst = worst.max(r.abs());
        }
    }
    worst
}

fn certify_common(net: &Network, classes: &ClassTable, alloc: &Allocation) -> Result<()> {
    for i in 1..=net.node_count() {
        if alloc.lam.lam(i) > net.m_cap(i) + 1e-9 {
            return Err(Error::NonConvergence(format!(
                "node cap violated at node {}",
                net.label(i)
            )));
        }
        for j in 0..classes.type_count() {
            if alloc.p[i][j] > classes.class(j).c_max + 1e-9 {
                return Err(Error::NonConvergence(format!(
                    "rate cap violated at node {}, type {j}",
                    net.label(i)
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// AC allocation (second-order-cone relaxation)
// ---------------------------------------------------------------------------

struct AcProblem<'a> {
    active: Vec<(usize, usize)>,
    z: Vec<f64>,
    classes: &'a ClassTable,
    wnorm: f64,
    net: &'a Network,
    core: AcCore,
    /// Load constraints (node caps, rate caps) over the rate coordinates.
    cons: Vec<LinCon>,
}

impl<'a> AcProblem<'a> {
    fn build(
        net: &'a Network,
        classes: &'a ClassTable,
        state: &StateZ,
        active: Vec<(usize, usize)>,
    ) -> Self {
        let coord_nodes: Vec<usize> = active.iter().map(|&(i, _)| i).collect();
        let coord_scales: Vec<f64> = active.iter().map(|&(i, j)| state.z(i, j)).collect();
        let core = AcCore::build(net, &coord_nodes, &coord_scales);

        let mut cons = Vec::new();
        for i in 1..=net.node_count() {
            if !net.m_cap(i).is_finite() {
                continue;
            }
            let row: Vec<(usize, f64)> = active
                .iter()
                .enumerate()
                .filter_map(|(a, &(ai, aj))| (ai == i).then(|| (a, state.z(ai, aj))))
                .collect();
            if !row.is_empty() {
                cons.push(LinCon {
                    row,
                    bound: net.m_cap(i),
                    kind: ConKind::NodeCap(i),
                });
            }
        }
        for (a, &(_, j)) in active.iter().enumerate() {
            let c_max = classes.class(j).c_max;
            if c_max.is_finite() {
                cons.push(LinCon {
                    row: vec![(a, 1.0)],
                    bound: c_max,
                    kind: ConKind::RateCap(a),
                });
            }
        }
        let wnorm = mean_active_weight(classes, &active);
        let z = coord_scales;
        AcProblem {
            active,
            z,
            classes,
            wnorm,
            net,
            core,
            cons,
        }
    }
}

impl BarrierProblem for AcProblem<'_> {
    fn dim(&self) -> usize {
        self.core.dim
    }

    fn constraint_count(&self) -> usize {
        self.active.len() + self.cons.len() + AcCore::barrier_count(self.net)
    }

    fn eval(&self, x: &DVector<f64>, mu: f64) -> f64 {
        let mut f = 0.0;
        for (a, &(i, j)) in self.active.iter().enumerate() {
            if x[a] <= 0.0 {
                return f64::INFINITY;
            }
            f -= self.z[a] * self.classes.utility(i, j).value(x[a]) / self.wnorm;
            f -= mu * x[a].ln();
        }
        for con in &self.cons {
            let s = con.slack(x);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            f -= mu * s.ln();
        }
        f + self.core.eval_barrier(self.net, x, mu)
    }

    fn grad_hess(&self, x: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (a, &(i, j)) in self.active.iter().enumerate() {
            let u = self.classes.utility(i, j);
            g[a] += -self.z[a] * u.prime(x[a]) / self.wnorm - mu / x[a];
            h[(a, a)] += -self.z[a] * u.second(x[a]) / self.wnorm + mu / (x[a] * x[a]);
        }
        for con in &self.cons {
            let s = con.slack(x);
            for &(a, ca) in &con.row {
                g[a] += mu * ca / s;
                for &(b, cb) in &con.row {
                    h[(a, b)] += mu * ca * cb / (s * s);
                }
            }
        }
        self.core.add_grad_hess(self.net, x, mu, &mut g, &mut h);
        (g, h)
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut t = f64::INFINITY;
        for a in 0..self.active.len() {
            t = step_limit(t, x[a], -dx[a]);
        }
        for con in &self.cons {
            let rate: f64 = con.row.iter().map(|&(a, c)| c * dx[a]).sum();
            t = step_limit(t, con.slack(x), rate);
        }
        self.core.max_step(self.net, x, dx, t)
    }
}

/// Allocation under the relaxed AC model. The returned voltage matrix is
/// recovered by the exact loss fixed point at the optimal node powers, so
/// the reported cone residual measures how exact the relaxation was.
pub fn allocate_ac(net: &Network, classes: &ClassTable, state: &StateZ) -> Result<Allocation> {
    check_dims(net, classes, state)?;
    let active = active_coords(state);
    if active.is_empty() {
        return Ok(Allocation::zero(net, classes.type_count(), "ac-zero"));
    }
    let problem = AcProblem::build(net, classes, state, active.clone());

    // Bootstrap a strictly feasible start: guarded small rates plus squared
    // voltages that over-shoot the physical drop so the cone has slack.
    let opts = BarrierOptions::default();
    let mut start = None;
    'outer: for shrink_pow in 0..40 {
        let scale = 0.25 * 0.5f64.powi(shrink_pow / 2);
        for drop_factor in [3.0, 6.0] {
            let p0 = initial_rates(net, classes, state, &active, scale);
            let mut x0 = DVector::zeros(problem.dim());
            let mut lam = vec![0.0; net.node_count() + 1];
            for (a, &(i, j)) in active.iter().enumerate() {
                x0[a] = p0[a];
                lam[i] += state.z(i, j) * p0[a];
            }
            problem.core.init_w(net, &lam, drop_factor, &mut x0);
            if problem.eval(&x0, opts.mu0).is_finite() {
                start = Some(x0);
                break 'outer;
            }
        }
    }
    let x0 = start.ok_or_else(|| {
        Error::InfeasibleLoad("could not find a strictly feasible AC start point".into())
    })?;
    let sol = barrier_solve(&problem, x0, &opts)?;

    let mut alloc = assemble(net, classes, state, &active, &sol.x);
    let kkt_residual = ac_multipliers(&problem, &sol.x, &mut alloc.mult);

    // Recover the rank-one (physical) voltages at the returned powers and
    // measure exactness: cone residual of the recovered solution plus any
    // voltage-bound violation it exhibits.
    let ac = ac_solve(net, &alloc.lam, 1e-12)?;
    let mut gap: f64 = 0.0;
    for k in 1..=net.node_count() {
        let det = ac.w_pp[k] * ac.w_kk[k] - ac.w_pk[k] * ac.w_pk[k];
        gap = gap.max(det.abs() / (ac.w_pp[k] * ac.w_kk[k]));
        gap = gap.max((net.v_lo(k) - ac.w_kk[k]).max(0.0));
        gap = gap.max((ac.w_kk[k] - net.v_hi(k)).max(0.0));
    }
    alloc.stats = SolveStats {
        kind: "ac",
        outer_iters: sol.outer_iters,
        newton_iters: sol.newton_iters,
        mu_final: sol.mu_final,
        kkt_residual,
        exactness_gap: Some(gap),
        exactness_warning: gap > 1e-6,
    };
    certify_common(net, classes, &alloc)?;
    Ok(alloc)
}

/// Multiplier recovery for the AC program: nonnegative least squares on the
/// stationarity system over the full (rates, voltages) variable space, with
/// columns for load constraints, voltage boxes, cross-term positivity, and
/// the cone determinants. Returns the max-norm stationarity residual.
fn ac_multipliers(problem: &AcProblem<'_>, x: &DVector<f64>, mult: &mut Multipliers) -> f64 {
    let n = problem.dim();
    let net = problem.net;
    let n_cols = problem.cons.len() + AcCore::barrier_count(net);
    let mut b = DVector::zeros(n);
    for (a, &(i, j)) in problem.active.iter().enumerate() {
        b[a] = problem.z[a] * problem.classes.utility(i, j).prime(x[a]);
    }
    let mut cols = DMatrix::zeros(n, n_cols);
    for (c, con) in problem.cons.iter().enumerate() {
        for &(a, coeff) in &con.row {
            cols[(a, c)] = coeff;
        }
    }
    let base = problem.cons.len();
    problem.core.multiplier_columns(net, x, &mut cols, base);
    let lambda = crate::solver::nnls(&cols, &b);
    for (c, con) in problem.cons.iter().enumerate() {
        match con.kind {
            ConKind::NodeCap(i) => mult.node_cap[i] = lambda[c],
            ConKind::RateCap(a) => {
                let (i, j) = problem.active[a];
                mult.rate_cap[i][j] = lambda[c];
            }
            ConKind::LowerVoltage(_) => unreachable!("AC carries voltage in boxes"),
        }
    }
    for k in 1..=net.node_count() {
        mult.lower_voltage[k] = lambda[base + 4 * (k - 1)];
        mult.upper_voltage[k] = lambda[base + 4 * (k - 1) + 1];
    }
    (b - cols * lambda).amax()
}

// ---------------------------------------------------------------------------
// Closed forms for log utilities on a line
// ---------------------------------------------------------------------------

/// Weighted-proportional-fairness closed form on a line with only the
/// deepest voltage-drop constraint binding:
/// `p_ij = w_ij δ / (𝓡_i Σ_kl w_kl z_kl)`.
///
/// Errors when the topology is not a line, a utility is not logarithmic, or
/// a cap would bind (the closed form ignores caps by assumption). The
/// returned powers are certified against the full Distflow voltage profile.
pub fn line_log_allocation(net: &Network, classes: &ClassTable, state: &StateZ) -> Result<Allocation> {
    check_dims(net, classes, state)?;
    if !net.is_line() {
        return Err(Error::UnsupportedTopology(
            "the proportional-fairness closed form needs a line network".into(),
        ));
    }
    let active = active_coords(state);
    if active.is_empty() {
        return Ok(Allocation::zero(net, classes.type_count(), "closed-form-zero"));
    }
    for &(i, j) in &active {
        if classes.utility(i, j).form != UtilityForm::Log {
            return Err(Error::Precondition(
                "the closed form needs logarithmic utilities".into(),
            ));
        }
    }
    let deepest = net.deepest_node();
    let delta = net.delta(deepest);
    if delta <= 0.0 {
        return Err(Error::InfeasibleLoad(
            "zero voltage headroom at the deepest node".into(),
        ));
    }
    let weighted_z: f64 = active
        .iter()
        .map(|&(i, j)| state.z(i, j) * classes.utility(i, j).weight)
        .sum();

    let mut alloc = Allocation::zero(net, classes.type_count(), "closed-form");
    for &(i, j) in &active {
        let w = classes.utility(i, j).weight;
        let p = w * delta / (net.cum_r(i) * weighted_z);
        if p > classes.class(j).c_max + 1e-12 {
            return Err(Error::Precondition(format!(
                "closed form invalid: rate {p:.6} exceeds c_max at node {}, type {j}",
                net.label(i)
            )));
        }
        alloc.p[i][j] = p;
        alloc.lam_ij[i][j] = state.z(i, j) * p;
    }
    let lam: Vec<f64> = (0..=net.node_count())
        .map(|i| alloc.lam_ij[i].iter().sum())
        .collect();
    alloc.lam = NodePower::new(net, lam)?;
    for i in 1..=net.node_count() {
        if alloc.lam.lam(i) > net.m_cap(i) + 1e-9 {
            return Err(Error::Precondition(format!(
                "closed form invalid: node cap binds at node {}",
                net.label(i)
            )));
        }
    }
    let w_lin = distflow_voltages(net, &alloc.lam);
    for k in 1..=net.node_count() {
        if w_lin[k] < net.v_lo(k) - 1e-9 {
            return Err(Error::Precondition(format!(
                "closed form invalid: voltage bound at node {} tighter than the deepest one",
                net.label(k)
            )));
        }
    }
    // Single binding constraint: its W-space multiplier.
    alloc.mult.lower_voltage[deepest] = weighted_z / (2.0 * delta);
    Ok(alloc)
}

/// Proposition-style fairness closed form: with weights `w_ij = 𝓡_i` every
/// uncharged EV charges at the same rate `δ / Σ_i 𝓡_i Σ_j z_ij`.
pub fn fairness_closed_form(
    net: &Network,
    classes: &ClassTable,
    state: &StateZ,
) -> Result<Allocation> {
    check_dims(net, classes, state)?;
    for i in 1..=net.node_count() {
        for j in 0..classes.type_count() {
            if state.z(i, j) > 0.0 {
                let w = classes.utility(i, j).weight;
                let r = net.cum_r(i);
                if ((w - r) / r).abs() > 1e-9 {
                    return Err(Error::Precondition(format!(
                        "fairness closed form needs w_ij = cumulative resistance; node {} has w={w}, 𝓡={r}",
                        net.label(i)
                    )));
                }
            }
        }
    }
    line_log_allocation(net, classes, state)
}

/// Balance-property report for the unweighted proportional-fairness line
/// setting: checks `p_i(z + e_k) p_k(z) = p_i(z) p_k(z + e_i)`.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub checked: usize,
    pub violations: Vec<BalanceViolation>,
}

#[derive(Debug, Clone)]
pub struct BalanceViolation {
    pub i: usize,
    pub k: usize,
    pub rel_err: f64,
}

/// Verifies the balance property over the sampled states (single type,
/// unweighted log utilities). Violations beyond 1e-9 relative are reported,
/// not raised.
pub fn balance_check(
    net: &Network,
    classes: &ClassTable,
    states: &[StateZ],
) -> Result<BalanceReport> {
    if classes.type_count() != 1 {
        return Err(Error::Precondition(
            "balance check covers the single-type setting".into(),
        ));
    }
    let rate = |state: &StateZ, i: usize| -> Result<f64> {
        Ok(line_log_allocation(net, classes, state)?.p[i][0])
    };
    let mut report = BalanceReport {
        checked: 0,
        violations: Vec::new(),
    };
    for state in states {
        for i in 1..=net.node_count() {
            for k in 1..=net.node_count() {
                let mut zi = state.clone();
                zi.set_z(i, 0, zi.z(i, 0) + 1.0);
                let mut zk = state.clone();
                zk.set_z(k, 0, zk.z(k, 0) + 1.0);
                // Both products need z_i, z_k > 0 somewhere to be defined.
                if state.z(k, 0) <= 0.0 || state.z(i, 0) <= 0.0 {
                    continue;
                }
                let lhs = rate(&zk, i)? * rate(state, k)?;
                let rhs = rate(state, i)? * rate(&zi, k)?;
                let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
                report.checked += 1;
                if rel > 1e-9 {
                    report.violations.push(BalanceViolation { i, k, rel_err: rel });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridOptions;
    use crate::stochastics::{DLaw, EvClass, JointBD, Utility};

    fn exp11() -> JointBD {
        JointBD::IndependentExp {
            mean_b: 1.0,
            mean_d: 1.0,
        }
    }

    fn two_node_line(c_max: f64) -> (Network, ClassTable) {
        let net = Network::line(
            &[0.01, 0.005],
            &[0.01, 0.005],
            10.0,
            f64::INFINITY,
            &GridOptions::default(),
        )
        .unwrap();
        let classes = ClassTable::uniform(
            &net,
            EvClass {
                joint: exp11(),
                c_max,
            },
            12.0,
            Utility::log(1.0),
        )
        .unwrap()
        .with_cum_r_weights(&net);
        (net, classes)
    }

    fn state_line(z: &[f64]) -> StateZ {
        let mut rows = vec![vec![0.0]];
        rows.extend(z.iter().map(|&v| vec![v]));
        StateZ::from_z(rows).unwrap()
    }

    #[test]
    fn distflow_matches_fairness_closed_form() {
        let (net, classes) = two_node_line(f64::INFINITY);
        let state = state_line(&[6.2, 6.2]);
        let alloc = allocate_distflow(&net, &classes, &state).unwrap();
        let expect = 0.095 / 0.155;
        for i in 1..=2 {
            assert!(
                (alloc.p[i][0] - expect).abs() < 1e-8,
                "node {i}: {} vs {expect}",
                alloc.p[i][0]
            );
        }
        let closed = fairness_closed_form(&net, &classes, &state).unwrap();
        for i in 1..=2 {
            assert!((closed.p[i][0] - alloc.p[i][0]).abs() < 1e-8);
        }
        assert!(alloc.stats.kkt_residual <= 1e-8, "kkt {}", alloc.stats.kkt_residual);
    }

    #[test]
    fn single_ev_hits_rate_cap() {
        let (net, classes) = two_node_line(1.0);
        let state = state_line(&[1.0, 0.0]);
        let alloc = allocate_distflow(&net, &classes, &state).unwrap();
        assert!((alloc.p[1][0] - 1.0).abs() < 1e-6, "p = {}", alloc.p[1][0]);
        assert_eq!(alloc.p[2][0], 0.0);
    }

    #[test]
    fn zero_state_zero_allocation() {
        let (net, classes) = two_node_line(1.0);
        let state = state_line(&[0.0, 0.0]);
        for model in [AllocModel::Distflow, AllocModel::Ac, AllocModel::ClosedForm] {
            let alloc = allocate(&net, &classes, &state, model).unwrap();
            assert_eq!(alloc.total_power(), 0.0);
            assert!(alloc.p.iter().all(|row| row.iter().all(|&p| p == 0.0)));
        }
    }

    #[test]
    fn zero_z_coordinate_gets_zero_rate() {
        let (net, classes) = two_node_line(f64::INFINITY);
        let state = state_line(&[3.0, 0.0]);
        let alloc = allocate_distflow(&net, &classes, &state).unwrap();
        assert_eq!(alloc.p[2][0], 0.0);
        assert!(alloc.p[1][0] > 0.0);
    }

    #[test]
    fn closed_form_rejects_cap_violation() {
        let (net, classes) = two_node_line(1.0);
        let state = state_line(&[1.0, 0.0]);
        // δ/𝓡_1 = 9.5 per EV, far above c_max = 1.
        let err = fairness_closed_form(&net, &classes, &state).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "got {err:?}");
    }

    #[test]
    fn closed_form_rejects_non_line() {
        use crate::grid::EdgeRow;
        let rows = vec![
            EdgeRow { node: 1, parent: 0, r_pu: 0.01, x_pu: 0.0, k_spaces: 10.0, m_cap: f64::INFINITY },
            EdgeRow { node: 2, parent: 0, r_pu: 0.01, x_pu: 0.0, k_spaces: 10.0, m_cap: f64::INFINITY },
        ];
        let net = Network::from_rows(&rows, &GridOptions::default()).unwrap();
        let classes = ClassTable::uniform(
            &net,
            EvClass {
                joint: exp11(),
                c_max: f64::INFINITY,
            },
            1.0,
            Utility::log(1.0),
        )
        .unwrap();
        let state = StateZ::from_z(vec![vec![1.0]; 3]).unwrap();
        let err = line_log_allocation(&net, &classes, &state).unwrap_err();
        assert!(matches!(err, Error::UnsupportedTopology(_)));
    }

    #[test]
    fn weight_scale_invariance() {
        let (net, mut classes) = two_node_line(f64::INFINITY);
        let state = state_line(&[2.0, 5.0]);
        let base = allocate_distflow(&net, &classes, &state).unwrap();
        for i in 1..=2 {
            let u = *classes.utility(i, 0);
            classes.set_utility(i, 0, Utility::log(u.weight * 37.0));
        }
        let scaled = allocate_distflow(&net, &classes, &state).unwrap();
        for i in 1..=2 {
            assert!(
                (base.p[i][0] - scaled.p[i][0]).abs() < 1e-9,
                "node {i}: {} vs {}",
                base.p[i][0],
                scaled.p[i][0]
            );
        }
    }

    #[test]
    fn monotone_in_state_for_distflow() {
        let (net, classes) = two_node_line(f64::INFINITY);
        for trial in 0..10 {
            let f = 1.0 + trial as f64 * 0.3;
            let z = state_line(&[2.0 * f, 1.5 * f]);
            let y = state_line(&[1.0 * f, 1.5 * f]); // y <= z componentwise
            let pz = allocate_distflow(&net, &classes, &z).unwrap();
            let py = allocate_distflow(&net, &classes, &y).unwrap();
            for i in 1..=2 {
                assert!(
                    py.p[i][0] >= pz.p[i][0] - 1e-8,
                    "trial {trial} node {i}: {} < {}",
                    py.p[i][0],
                    pz.p[i][0]
                );
            }
        }
    }

    #[test]
    fn kkt_residual_small_with_mixed_constraints() {
        let net = Network::line(
            &[0.01, 0.005],
            &[0.01, 0.005],
            10.0,
            1.5,
            &GridOptions::default(),
        )
        .unwrap();
        let classes = ClassTable::new(
            vec![
                EvClass { joint: exp11(), c_max: 1.0 },
                EvClass {
                    joint: JointBD::DeterministicRatio {
                        theta: 0.4,
                        d_law: DLaw::Exp { mean: 1.0 },
                    },
                    c_max: 0.5,
                },
            ],
            vec![vec![0.0; 2], vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![
                vec![Utility::log(1.0); 2],
                vec![Utility::log(0.7), Utility::log(1.3)],
                vec![
                    Utility {
                        form: UtilityForm::Power { alpha: 2.0 },
                        weight: 1.0,
                    },
                    Utility::log(2.0),
                ],
            ],
        )
        .unwrap();
        let state = StateZ::from_z(vec![vec![0.0, 0.0], vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let alloc = allocate_distflow(&net, &classes, &state).unwrap();
        assert!(
            alloc.stats.kkt_residual <= 1e-8,
            "kkt residual {}",
            alloc.stats.kkt_residual
        );
        // node cap respected
        for i in 1..=2 {
            assert!(alloc.lam.lam(i) <= 1.5 + 1e-9);
        }
    }

    #[test]
    fn ac_single_edge_voltage_bound_solution() {
        let net = Network::line(&[0.01], &[0.01], 10.0, f64::INFINITY, &GridOptions::default())
            .unwrap();
        let classes = ClassTable::uniform(
            &net,
            EvClass { joint: exp11(), c_max: 10.0 },
            12.0,
            Utility::log(1.0),
        )
        .unwrap();
        let state = StateZ::from_z(vec![vec![0.0], vec![6.2]]).unwrap();
        let alloc = allocate_ac(&net, &classes, &state).unwrap();
        // Utility pushes to the deliverability limit at υ̲ = 0.81:
        // V = 0.9, Λ = V(V0 - V)/R = 9.
        assert!(
            (alloc.lam.lam(1) - 9.0).abs() < 1e-6,
            "Λ = {}",
            alloc.lam.lam(1)
        );
        // The recovered voltages are rank-one consistent.
        let gap = alloc.stats.exactness_gap.unwrap();
        assert!(gap <= 1e-6, "exactness gap {gap}");
        assert!(!alloc.stats.exactness_warning);
        // ac_solve at the returned powers reproduces the binding voltage.
        let sol = ac_solve(&net, &alloc.lam, 1e-12).unwrap();
        assert!((sol.w_kk[1] - 0.81).abs() < 1e-6, "w = {}", sol.w_kk[1]);
    }

    #[test]
    fn ac_power_below_distflow_on_overloaded_line() {
        let (net, classes) = two_node_line(10.0);
        let state = state_line(&[6.2, 6.2]);
        let df = allocate_distflow(&net, &classes, &state).unwrap();
        let ac = allocate_ac(&net, &classes, &state).unwrap();
        assert!(
            ac.total_power() <= df.total_power() + 1e-9,
            "AC {} vs Distflow {}",
            ac.total_power(),
            df.total_power()
        );
        assert!(ac.stats.exactness_gap.unwrap() <= 1e-6);
    }

    #[test]
    fn balance_property_on_line() {
        let net = Network::line(
            &[0.01, 0.005],
            &[0.0, 0.0],
            f64::INFINITY,
            f64::INFINITY,
            &GridOptions::default(),
        )
        .unwrap();
        // Unweighted log utilities (the product-form setting).
        let classes = ClassTable::uniform(
            &net,
            EvClass { joint: exp11(), c_max: f64::INFINITY },
            1.0,
            Utility::log(1.0),
        )
        .unwrap();
        let states = vec![state_line(&[1.0, 1.0]), state_line(&[2.0, 3.0])];
        let report = balance_check(&net, &classes, &states).unwrap();
        assert!(report.checked > 0);
        assert!(report.violations.is_empty(), "{:?}", report.violations);
    }
}
