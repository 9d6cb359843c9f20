//! Shared machinery for programs constrained by the relaxed AC model: the
//! affine elimination of the transformed Kirchhoff equalities, the cone and
//! voltage-box barrier terms, and the stationarity columns used for
//! multiplier recovery. Used by the instantaneous allocation and by the
//! invariant-point program, which differ only in objective and coordinates.

use nalgebra::{DMatrix, DVector};

use crate::grid::Network;
use crate::solver::step_limit;

/// Affine form `c0 + coef · x`.
#[derive(Clone)]
pub(crate) struct Affine {
    pub c0: f64,
    pub coef: DVector<f64>,
}

impl Affine {
    pub fn zero(n: usize) -> Self {
        Affine {
            c0: 0.0,
            coef: DVector::zeros(n),
        }
    }

    pub fn unit(n: usize, idx: usize) -> Self {
        let mut coef = DVector::zeros(n);
        coef[idx] = 1.0;
        Affine { c0: 0.0, coef }
    }

    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.c0 += s * other.c0;
        self.coef.axpy(s, &other.coef, 1.0);
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.c0 + self.coef.dot(x)
    }
}

/// One linear inequality `row · x <= bound`.
pub(crate) struct LinCon {
    pub row: Vec<(usize, f64)>,
    pub bound: f64,
    pub kind: ConKind,
}

impl LinCon {
    pub fn slack(&self, x: &DVector<f64>) -> f64 {
        self.bound - self.row.iter().map(|&(a, c)| c * x[a]).sum::<f64>()
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum ConKind {
    /// Halved voltage-drop constraint of a node (Distflow programs).
    LowerVoltage(usize),
    NodeCap(usize),
    /// Per-coordinate upper bound (charging-rate cap or throughput box).
    RateCap(usize),
}

/// Variables `[coords..., w_1..w_I]` where each coordinate `a` contributes
/// `coord_scales[a] * x_a` of active power at node `coord_nodes[a]`, and the
/// squared node voltages are free variables tied to the coordinates by the
/// eliminated Kirchhoff relations.
pub(crate) struct AcCore {
    /// Cross term w_pk per edge (indexed by child node), affine in x.
    pub t: Vec<Affine>,
    /// Index of w_kk in x per node (entry 0 unused).
    pub w_idx: Vec<usize>,
    pub n_coord: usize,
    pub dim: usize,
}

impl AcCore {
    pub fn build(net: &Network, coord_nodes: &[usize], coord_scales: &[f64]) -> Self {
        let n_coord = coord_nodes.len();
        let n = net.node_count();
        let dim = n_coord + n;
        let w_idx: Vec<usize> = (0..=n)
            .map(|k| if k == 0 { usize::MAX } else { n_coord + k - 1 })
            .collect();

        let mut lam_aff: Vec<Affine> = vec![Affine::zero(dim); n + 1];
        for (a, (&node, &scale)) in coord_nodes.iter().zip(coord_scales).enumerate() {
            lam_aff[node].coef[a] += scale;
        }

        let mut order: Vec<usize> = (1..=n).collect();
        order.sort_by_key(|&k| std::cmp::Reverse(net.depth(k)));
        let mut p_sub: Vec<Affine> = vec![Affine::zero(dim); n + 1];
        let mut q_sub: Vec<Affine> = vec![Affine::zero(dim); n + 1];
        let mut t: Vec<Affine> = vec![Affine::zero(dim); n + 1];
        for &k in &order {
            let mut p = lam_aff[k].clone();
            let mut q = Affine::zero(dim);
            let w_k = Affine::unit(dim, w_idx[k]);
            for &c in net.children(k) {
                // Loss on edge (k, c): (w_k - 2 t_c + w_c) Z / (R^2 + X^2).
                let denom = net.r(c) * net.r(c) + net.x(c) * net.x(c);
                let mut bracket = w_k.clone();
                bracket.add_scaled(&t[c], -2.0);
                bracket.add_scaled(&Affine::unit(dim, w_idx[c]), 1.0);
                p.add_scaled(&p_sub[c], 1.0);
                p.add_scaled(&bracket, net.r(c) / denom);
                q.add_scaled(&q_sub[c], 1.0);
                q.add_scaled(&bracket, net.x(c) / denom);
            }
            let mut tk = w_k;
            tk.add_scaled(&p, net.r(k));
            tk.add_scaled(&q, net.x(k));
            t[k] = tk;
            p_sub[k] = p;
            q_sub[k] = q;
        }
        AcCore {
            t,
            w_idx,
            n_coord,
            dim,
        }
    }

    /// Barrier terms contributed per node: two voltage boxes, the cross-term
    /// positivity, and the cone determinant.
    pub fn barrier_count(net: &Network) -> usize {
        4 * net.node_count()
    }

    pub fn parent_w(&self, net: &Network, k: usize, x: &DVector<f64>) -> f64 {
        let p = net.parent(k);
        if p == 0 {
            net.w00()
        } else {
            x[self.w_idx[p]]
        }
    }

    pub fn det(&self, net: &Network, k: usize, x: &DVector<f64>) -> f64 {
        let wk = x[self.w_idx[k]];
        let tau = self.t[k].value(x);
        self.parent_w(net, k, x) * wk - tau * tau
    }

    /// Sum of the cone/box barrier terms; infinity outside the open set.
    pub fn eval_barrier(&self, net: &Network, x: &DVector<f64>, mu: f64) -> f64 {
        let mut f = 0.0;
        for k in 1..=net.node_count() {
            let wk = x[self.w_idx[k]];
            let lo = wk - net.v_lo(k);
            let hi = net.v_hi(k) - wk;
            let tau = self.t[k].value(x);
            let det = self.det(net, k, x);
            if lo <= 0.0 || hi <= 0.0 || tau <= 0.0 || det <= 0.0 {
                return f64::INFINITY;
            }
            f -= mu * (lo.ln() + hi.ln() + tau.ln() + det.ln());
        }
        f
    }

    pub fn add_grad_hess(
        &self,
        net: &Network,
        x: &DVector<f64>,
        mu: f64,
        g: &mut DVector<f64>,
        h: &mut DMatrix<f64>,
    ) {
        let n = self.dim;
        for k in 1..=net.node_count() {
            let wi = self.w_idx[k];
            let wk = x[wi];
            let lo = wk - net.v_lo(k);
            let hi = net.v_hi(k) - wk;
            g[wi] += -mu / lo + mu / hi;
            h[(wi, wi)] += mu / (lo * lo) + mu / (hi * hi);

            let tau = self.t[k].value(x);
            let beta = &self.t[k].coef;
            g.axpy(-mu / tau, beta, 1.0);
            h.ger(mu / (tau * tau), beta, beta, 1.0);

            let det = self.det(net, k, x);
            let wp = self.parent_w(net, k, x);
            let parent = net.parent(k);
            let mut grad_det = DVector::zeros(n);
            grad_det[wi] += wp;
            if parent != 0 {
                grad_det[self.w_idx[parent]] += wk;
            }
            grad_det.axpy(-2.0 * tau, beta, 1.0);
            g.axpy(-mu / det, &grad_det, 1.0);
            h.ger(mu / (det * det), &grad_det, &grad_det, 1.0);
            // -(mu/det) Hess(det), Hess = e_p e_k' + e_k e_p' - 2 beta beta'.
            h.ger(2.0 * mu / det, beta, beta, 1.0);
            if parent != 0 {
                let pi = self.w_idx[parent];
                h[(wi, pi)] -= mu / det;
                h[(pi, wi)] -= mu / det;
            }
        }
    }

    /// Step limit from the affine terms (boxes and cross-term positivity);
    /// cone positivity is left to backtracking on `eval`.
    pub fn max_step(&self, net: &Network, x: &DVector<f64>, dx: &DVector<f64>, mut t: f64) -> f64 {
        for k in 1..=net.node_count() {
            let wi = self.w_idx[k];
            t = step_limit(t, x[wi] - net.v_lo(k), -dx[wi]);
            t = step_limit(t, net.v_hi(k) - x[wi], dx[wi]);
            let tau = self.t[k].value(x);
            t = step_limit(t, tau, self.t[k].coef.dot(dx));
        }
        t
    }

    /// Strictly feasible squared voltages for given coordinate powers: a
    /// Distflow-like profile with the drop inflated by `drop_factor`, so the
    /// cone determinants start positive.
    pub fn init_w(&self, net: &Network, lam: &[f64], drop_factor: f64, x: &mut DVector<f64>) {
        let n = net.node_count();
        let mut subtree = vec![0.0; n + 1];
        for k in 1..=n {
            subtree[k] = net.subtree_nodes(k).iter().map(|&m| lam[m]).sum();
        }
        let mut order: Vec<usize> = (1..=n).collect();
        order.sort_by_key(|&k| net.depth(k));
        let mut w = vec![net.w00(); n + 1];
        for &k in &order {
            let head = (net.w00() - net.v_lo(k)).max(1e-6);
            let drop = (drop_factor * net.r(k) * subtree[k]).max(1e-7 * head);
            w[k] = (w[net.parent(k)] - drop).max(net.v_lo(k) + 1e-7 * head);
            x[self.w_idx[k]] = w[k];
        }
    }

    /// Writes the four stationarity columns per node (two boxes, cross-term
    /// positivity, cone) starting at column `base`; returns the next free
    /// column. Columns are the negated slack gradients.
    pub fn multiplier_columns(
        &self,
        net: &Network,
        x: &DVector<f64>,
        cols: &mut DMatrix<f64>,
        base: usize,
    ) -> usize {
        let n = self.dim;
        for k in 1..=net.node_count() {
            let wi = self.w_idx[k];
            let c0 = base + 4 * (k - 1);
            cols[(wi, c0)] = -1.0;
            cols[(wi, c0 + 1)] = 1.0;
            let beta = &self.t[k].coef;
            for r in 0..n {
                cols[(r, c0 + 2)] = -beta[r];
            }
            let tau = self.t[k].value(x);
            let wp = self.parent_w(net, k, x);
            let parent = net.parent(k);
            let mut grad_det = DVector::zeros(n);
            grad_det[wi] += wp;
            if parent != 0 {
                grad_det[self.w_idx[parent]] += x[wi];
            }
            grad_det.axpy(-2.0 * tau, beta, 1.0);
            for r in 0..n {
                cols[(r, c0 + 3)] = -grad_det[r];
            }
        }
        base + 4 * net.node_count()
    }
}
