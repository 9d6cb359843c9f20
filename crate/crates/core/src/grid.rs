//! Radial network topology, per-node parameters, and path/subtree queries.
//!
//! The network is a rooted tree. Node 0 is the feeder; it hosts no chargers.
//! Every other node carries a charging station with a finite (or infinite)
//! number of parking spaces and a node power cap. Edge impedances and all
//! powers are per-unit; voltage bounds are stored as squared magnitudes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ingestion / construction options.
#[derive(Debug, Clone)]
pub struct GridOptions {
    /// Squared feeder voltage magnitude (per-unit). The feeder voltage is known.
    pub w00: f64,
    /// Allowed voltage-magnitude drop; sets `v_lo = ((1 - pct) * |V0|)^2` at
    /// every node.
    pub voltage_drop_pct: f64,
    /// Node labels to drop at ingestion (e.g. generator/PV buses). Only
    /// leaves of the remaining tree may be excluded.
    pub exclude: Vec<u64>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            w00: 1.0,
            voltage_drop_pct: 0.10,
            exclude: Vec::new(),
        }
    }
}

/// One non-root node row of the network CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRow {
    pub node: u64,
    pub parent: u64,
    pub r_pu: f64,
    pub x_pu: f64,
    /// Parking spaces; `f64::INFINITY` models an unbounded lot.
    pub k_spaces: f64,
    /// Node power cap (per-unit); `f64::INFINITY` disables the cap.
    pub m_cap: f64,
}

/// Rooted radial network with eagerly computed path tables.
///
/// Nodes are internally indexed `1..=node_count()` in increasing label
/// order, with the feeder at index 0. All accessors take internal indices;
/// [`Network::label`] maps back to the ingested labels for output.
#[derive(Debug, Clone)]
pub struct Network {
    labels: Vec<u64>,
    parent: Vec<usize>,
    r: Vec<f64>,
    x: Vec<f64>,
    w00: f64,
    v_lo: Vec<f64>,
    v_hi: Vec<f64>,
    k_spaces: Vec<f64>,
    m_cap: Vec<f64>,
    // path tables
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    path_edges: Vec<Vec<usize>>,
    subtree_nodes: Vec<Vec<usize>>,
    cum_r: Vec<f64>,
    /// `overlap[k][m] = cum_r[lca(k, m)]`, the resistance of the common part
    /// of the feeder paths of k and m. This is the coefficient of node power
    /// `Λ_m` in the linearized voltage drop at node k.
    overlap: Vec<Vec<f64>>,
}

impl Network {
    /// Builds a validated network from rows.
    pub fn from_rows(rows: &[EdgeRow], opts: &GridOptions) -> Result<Self> {
        if !(opts.w00 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "w00 must be positive, got {}",
                opts.w00
            )));
        }
        if !(0.0..1.0).contains(&opts.voltage_drop_pct) {
            return Err(Error::InvalidParameter(format!(
                "voltage_drop_pct must lie in [0, 1), got {}",
                opts.voltage_drop_pct
            )));
        }

        let excluded: BTreeSet<u64> = opts.exclude.iter().copied().collect();
        let mut by_label: BTreeMap<u64, &EdgeRow> = BTreeMap::new();
        for row in rows {
            if row.node == 0 {
                return Err(Error::Topology("node id 0 is reserved for the feeder".into()));
            }
            if by_label.insert(row.node, row).is_some() {
                return Err(Error::Topology(format!("duplicate node id {}", row.node)));
            }
        }
        for &ex in &excluded {
            for row in rows {
                if row.parent == ex && !excluded.contains(&row.node) {
                    return Err(Error::Topology(format!(
                        "excluded node {ex} has non-excluded child {}",
                        row.node
                    )));
                }
            }
        }
        by_label.retain(|label, _| !excluded.contains(label));

        let kept: Vec<&EdgeRow> = by_label.values().copied().collect();
        let count = kept.len();
        if count == 0 {
            return Err(Error::Topology("network has no charging nodes".into()));
        }
        let index_of: BTreeMap<u64, usize> = by_label
            .keys()
            .enumerate()
            .map(|(i, &label)| (label, i + 1))
            .collect();

        let mut labels = vec![0u64];
        let mut parent = vec![0usize];
        let mut r = vec![0.0];
        let mut x = vec![0.0];
        let mut k_spaces = vec![0.0];
        let mut m_cap = vec![0.0];
        for row in &kept {
            let p = if row.parent == 0 {
                0
            } else {
                *index_of.get(&row.parent).ok_or_else(|| {
                    Error::Topology(format!(
                        "node {} references unknown or excluded parent {}",
                        row.node, row.parent
                    ))
                })?
            };
            if !(row.r_pu > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: resistance must be positive, got {}",
                    row.node, row.r_pu
                )));
            }
            if !(row.x_pu >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: reactance must be nonnegative, got {}",
                    row.node, row.x_pu
                )));
            }
            if !(row.k_spaces > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: k_spaces must be positive, got {}",
                    row.node, row.k_spaces
                )));
            }
            if !(row.m_cap > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: m_cap must be positive, got {}",
                    row.node, row.m_cap
                )));
            }
            labels.push(row.node);
            parent.push(p);
            r.push(row.r_pu);
            x.push(row.x_pu);
            k_spaces.push(row.k_spaces);
            m_cap.push(row.m_cap);
        }

        // Reject cycles and disconnected nodes: every node must reach the root
        // in at most `count` parent steps.
        for k in 1..=count {
            let mut cur = k;
            let mut steps = 0;
            while cur != 0 {
                cur = parent[cur];
                steps += 1;
                if steps > count {
                    return Err(Error::Topology(format!(
                        "node {} does not reach the feeder (cycle in parent pointers)",
                        labels[k]
                    )));
                }
            }
        }

        let v_lo_val = ((1.0 - opts.voltage_drop_pct) * opts.w00.sqrt()).powi(2);
        let mut net = Network {
            labels,
            parent,
            r,
            x,
            w00: opts.w00,
            v_lo: vec![v_lo_val; count + 1],
            v_hi: vec![opts.w00; count + 1],
            k_spaces,
            m_cap,
            children: Vec::new(),
            depth: Vec::new(),
            path_edges: Vec::new(),
            subtree_nodes: Vec::new(),
            cum_r: Vec::new(),
            overlap: Vec::new(),
        };
        net.rebuild_tables();
        Ok(net)
    }

    fn rebuild_tables(&mut self) {
        let n = self.node_count();
        let mut children = vec![Vec::new(); n + 1];
        for k in 1..=n {
            children[self.parent[k]].push(k);
        }
        let mut depth = vec![0usize; n + 1];
        let mut cum_r = vec![0.0; n + 1];
        let mut path_edges = vec![Vec::new(); n + 1];
        // Parent-before-child order via BFS from the root.
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            if u != 0 {
                order.push(u);
            }
            for &c in &children[u] {
                queue.push_back(c);
            }
        }
        for &k in &order {
            let p = self.parent[k];
            depth[k] = depth[p] + 1;
            cum_r[k] = cum_r[p] + self.r[k];
            let mut pe = path_edges[p].clone();
            pe.push(k);
            path_edges[k] = pe;
        }
        let mut subtree = vec![Vec::new(); n + 1];
        for &k in order.iter().rev() {
            let mut s = vec![k];
            for &c in &children[k] {
                s.extend_from_slice(&subtree[c]);
            }
            s.sort_unstable();
            subtree[k] = s;
        }
        subtree[0] = (1..=n).collect();

        // overlap[k][m] = cum resistance of P(k) ∩ P(m). Walk the deeper node up.
        let mut overlap = vec![vec![0.0; n + 1]; n + 1];
        for k in 1..=n {
            for m in k..=n {
                let (mut a, mut b) = (k, m);
                while depth[a] > depth[b] {
                    a = self.parent[a];
                }
                while depth[b] > depth[a] {
                    b = self.parent[b];
                }
                while a != b {
                    a = self.parent[a];
                    b = self.parent[b];
                }
                overlap[k][m] = cum_r[a];
                overlap[m][k] = cum_r[a];
            }
        }

        self.children = children;
        self.depth = depth;
        self.path_edges = path_edges;
        self.subtree_nodes = subtree;
        self.cum_r = cum_r;
        self.overlap = overlap;
    }

    /// Loads and validates the network CSV schema
    /// `node,parent,r_pu,x_pu,k_spaces,m_cap` (root implicit as id 0,
    /// `#` comments allowed).
    pub fn load(path: impl AsRef<Path>, opts: &GridOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_csv(&text, &path.display().to_string(), opts)
    }

    pub fn parse_csv(text: &str, path: &str, opts: &GridOptions) -> Result<Self> {
        let mut rows = Vec::new();
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["node", "parent", "r_pu", "x_pu", "k_spaces", "m_cap"] {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: format!(
                            "expected header node,parent,r_pu,x_pu,k_spaces,m_cap, got {line}"
                        ),
                    });
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno,
                    msg: format!("expected 6 fields, got {}", cols.len()),
                });
            }
            let field = |i: usize, name: &str| -> Result<f64> {
                parse_float(cols[i]).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: lineno,
                    msg: format!("invalid {name} value {:?}", cols[i]),
                })
            };
            let node: u64 = cols[0].parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("invalid node id {:?}", cols[0]),
            })?;
            let parent: u64 = cols[1].parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("invalid parent id {:?}", cols[1]),
            })?;
            if node == parent {
                return Err(Error::Topology(format!(
                    "node {node} lists itself as parent (cycle)"
                )));
            }
            rows.push(EdgeRow {
                node,
                parent,
                r_pu: field(2, "r_pu")?,
                x_pu: field(3, "x_pu")?,
                k_spaces: field(4, "k_spaces")?,
                m_cap: field(5, "m_cap")?,
            });
        }
        if !saw_header {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "missing header".into(),
            });
        }
        Self::from_rows(&rows, opts)
    }

    /// Writes the network back in the ingestion schema.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,parent,r_pu,x_pu,k_spaces,m_cap\n");
        for k in 1..=self.node_count() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.labels[k],
                self.labels[self.parent[k]],
                self.r[k],
                self.x[k],
                fmt_maybe_inf(self.k_spaces[k]),
                fmt_maybe_inf(self.m_cap[k]),
            )
            .expect("string write");
        }
        out
    }

    /// Convenience constructor: a line 0 - 1 - 2 - ... with the given edge
    /// impedances, shared parking count, and shared node cap.
    pub fn line(r: &[f64], x: &[f64], k_spaces: f64, m_cap: f64, opts: &GridOptions) -> Result<Self> {
        assert_eq!(r.len(), x.len(), "r and x must have equal length");
        let rows: Vec<EdgeRow> = r
            .iter()
            .zip(x)
            .enumerate()
            .map(|(i, (&r_pu, &x_pu))| EdgeRow {
                node: (i + 1) as u64,
                parent: i as u64,
                r_pu,
                x_pu,
                k_spaces,
                m_cap,
            })
            .collect();
        Self::from_rows(&rows, opts)
    }

    /// Number of charging nodes (feeder excluded).
    pub fn node_count(&self) -> usize {
        self.labels.len() - 1
    }

    /// Ingested label of internal index `k` (0 for the feeder).
    pub fn label(&self, k: usize) -> u64 {
        self.labels[k]
    }

    pub fn parent(&self, k: usize) -> usize {
        self.parent[k]
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    pub fn depth(&self, k: usize) -> usize {
        self.depth[k]
    }

    /// Resistance of the edge (parent(k), k).
    pub fn r(&self, k: usize) -> f64 {
        self.r[k]
    }

    /// Reactance of the edge (parent(k), k).
    pub fn x(&self, k: usize) -> f64 {
        self.x[k]
    }

    pub fn w00(&self) -> f64 {
        self.w00
    }

    pub fn v_lo(&self, k: usize) -> f64 {
        self.v_lo[k]
    }

    pub fn v_hi(&self, k: usize) -> f64 {
        self.v_hi[k]
    }

    pub fn k_spaces(&self, k: usize) -> f64 {
        self.k_spaces[k]
    }

    pub fn m_cap(&self, k: usize) -> f64 {
        self.m_cap[k]
    }

    /// Overrides the squared lower voltage bound at one node.
    pub fn set_v_lo(&mut self, k: usize, v: f64) -> Result<()> {
        if !(v > 0.0 && v <= self.w00) {
            return Err(Error::InvalidParameter(format!(
                "v_lo must satisfy 0 < v_lo <= w00, got {v}"
            )));
        }
        self.v_lo[k] = v;
        Ok(())
    }

    pub fn set_k_spaces(&mut self, k: usize, v: f64) -> Result<()> {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!("k_spaces must be positive, got {v}")));
        }
        self.k_spaces[k] = v;
        Ok(())
    }

    pub fn set_m_cap(&mut self, k: usize, v: f64) -> Result<()> {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!("m_cap must be positive, got {v}")));
        }
        self.m_cap[k] = v;
        Ok(())
    }

    /// Ordered edge list of the feeder path P(k), each edge named by its
    /// child node.
    pub fn path_edges(&self, k: usize) -> &[usize] {
        &self.path_edges[k]
    }

    /// Sorted node set of the subtree rooted at k (k itself included;
    /// `subtree_nodes(0)` is every charging node).
    pub fn subtree_nodes(&self, k: usize) -> &[usize] {
        &self.subtree_nodes[k]
    }

    /// Cumulative feeder-path resistance of node k.
    pub fn cum_r(&self, k: usize) -> f64 {
        self.cum_r[k]
    }

    /// Resistance of the common feeder-path segment of nodes k and m.
    pub fn path_overlap_r(&self, k: usize, m: usize) -> f64 {
        self.overlap[k][m]
    }

    /// Voltage headroom `δ_k = (w00 - v_lo[k]) / 2` at node k.
    pub fn delta(&self, k: usize) -> f64 {
        (self.w00 - self.v_lo[k]) / 2.0
    }

    /// True when every node has at most one child and the feeder exactly one.
    pub fn is_line(&self) -> bool {
        self.children[0].len() == 1 && (1..=self.node_count()).all(|k| self.children[k].len() <= 1)
    }

    /// Deepest node index (ties broken by index); on a line, the end node.
    pub fn deepest_node(&self) -> usize {
        (1..=self.node_count()).max_by_key(|&k| self.depth[k]).expect("nonempty network")
    }
}

fn parse_float(s: &str) -> Option<f64> {
    match s {
        "inf" | "Inf" | "INF" => Some(f64::INFINITY),
        _ => s.parse().ok().filter(|v: &f64| v.is_finite()),
    }
}

fn fmt_maybe_inf(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Deterministic synthetic 47-bus (46 charging nodes) radial feeder in the
/// shape of a trunk with laterals. A stand-in dataset for desk-scale runs;
/// real feeder data enters through the CSV schema.
pub fn synthetic47(opts: &GridOptions) -> Network {
    let mut rows = Vec::new();
    let mut add = |node: u64, parent: u64, r: f64, x: f64| {
        rows.push(EdgeRow {
            node,
            parent,
            r_pu: r,
            x_pu: x,
            k_spaces: 1.0,
            m_cap: 8.0,
        });
    };
    // Trunk 1..12 off the feeder.
    for k in 1..=12u64 {
        let scale = 1.0 + 0.04 * (k as f64 - 1.0);
        add(k, k - 1, 0.00115 * scale, 0.00112 * scale);
    }
    // Laterals: (anchor on trunk, length).
    let laterals: [(u64, u64); 10] = [
        (2, 4),
        (3, 3),
        (4, 5),
        (5, 2),
        (6, 4),
        (7, 3),
        (8, 4),
        (9, 3),
        (10, 4),
        (11, 2),
    ];
    let mut next = 13u64;
    for (li, &(anchor, len)) in laterals.iter().enumerate() {
        let mut parent = anchor;
        for step in 0..len {
            let scale = 1.0 + 0.05 * (li as f64) + 0.08 * (step as f64);
            add(next, parent, 0.0009 * scale, 0.00085 * scale);
            parent = next;
            next += 1;
        }
    }
    assert_eq!(rows.len(), 46, "synthetic feeder has 46 charging nodes");
    Network::from_rows(&rows, opts).expect("synthetic feeder is valid")
}

/// Seeded random recursive tree for property tests and the synthetic-tree
/// generator: node k attaches to a uniform pick among 0..k.
pub fn random_tree(
    nodes: usize,
    k_spaces: f64,
    m_cap: f64,
    opts: &GridOptions,
    seed: u64,
) -> Network {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<EdgeRow> = (1..=nodes as u64)
        .map(|k| {
            let parent = if k == 1 { 0 } else { rng.gen_range(0..k) };
            let r = rng.gen_range(0.002..0.012);
            let x = rng.gen_range(0.0..r);
            EdgeRow {
                node: k,
                parent,
                r_pu: r,
                x_pu: x,
                k_spaces,
                m_cap,
            }
        })
        .collect();
    Network::from_rows(&rows, opts).expect("random recursive tree is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_csv() -> &'static str {
        "# two-node line\nnode,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.01,0.01,10,8\n2,1,0.005,0.005,10,8\n"
    }

    #[test]
    fn loads_two_node_line() {
        let net = Network::parse_csv(two_node_csv(), "mem", &GridOptions::default()).unwrap();
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.cum_r(1), 0.01);
        assert_eq!(net.cum_r(2), 0.015);
        assert_eq!(net.path_edges(2), &[1, 2]);
        assert_eq!(net.subtree_nodes(0), &[1, 2]);
        assert_eq!(net.subtree_nodes(1), &[1, 2]);
        assert_eq!(net.subtree_nodes(2), &[2]);
        assert!(net.is_line());
    }

    #[test]
    fn loads_single_node() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.01,0.0,1,1\n";
        let net = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap();
        assert_eq!(net.node_count(), 1);
        assert_eq!(net.path_edges(1).len(), 1);
        assert_eq!(net.subtree_nodes(1), &[1]);
    }

    #[test]
    fn self_parent_is_cycle_error() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,1,0.01,0.0,1,1\n";
        let err = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "got {err:?}");
    }

    #[test]
    fn two_cycle_detected() {
        let rows = vec![
            EdgeRow { node: 1, parent: 2, r_pu: 0.01, x_pu: 0.0, k_spaces: 1.0, m_cap: 1.0 },
            EdgeRow { node: 2, parent: 1, r_pu: 0.01, x_pu: 0.0, k_spaces: 1.0, m_cap: 1.0 },
        ];
        let err = Network::from_rows(&rows, &GridOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "got {err:?}");
    }

    #[test]
    fn unknown_parent_rejected_with_context() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.01,0.0,1,1\n2,9,0.01,0.0,1,1\n";
        let err = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unknown or excluded parent 9"));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,bogus,0.0,1,1\n";
        let err = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_resistance_rejected() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.0,0.0,1,1\n";
        let err = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "got {err:?}");
    }

    #[test]
    fn delta_examples() {
        let mut net = Network::parse_csv(two_node_csv(), "mem", &GridOptions::default()).unwrap();
        // default 10% drop: v_lo = 0.81
        assert!((net.delta(1) - 0.095).abs() < 1e-15);
        net.set_v_lo(1, 1.0).unwrap();
        assert_eq!(net.delta(1), 0.0);
        net.set_v_lo(1, 0.9801).unwrap();
        assert!((net.delta(1) - 0.00995).abs() < 1e-15);
    }

    #[test]
    fn cum_r_recurrence() {
        let net = random_tree(17, 5.0, 8.0, &GridOptions::default(), 42);
        for k in 1..=net.node_count() {
            let p = net.parent(k);
            assert!((net.cum_r(k) - (net.cum_r(p) + net.r(k))).abs() < 1e-15);
            assert!(net.cum_r(k) > net.cum_r(p));
        }
    }

    #[test]
    fn overlap_matches_path_intersection() {
        let net = random_tree(12, 5.0, 8.0, &GridOptions::default(), 7);
        for k in 1..=net.node_count() {
            for m in 1..=net.node_count() {
                let pk: std::collections::BTreeSet<_> = net.path_edges(k).iter().collect();
                let shared: f64 = net
                    .path_edges(m)
                    .iter()
                    .filter(|e| pk.contains(e))
                    .map(|&e| net.r(e))
                    .sum();
                assert!((net.path_overlap_r(k, m) - shared).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.csv");
        let net = random_tree(9, 4.0, 8.0, &GridOptions::default(), 3);
        net.write(&path).unwrap();
        let back = Network::load(&path, &GridOptions::default()).unwrap();
        assert_eq!(back.node_count(), net.node_count());
        for k in 1..=net.node_count() {
            assert_eq!(back.parent(k), net.parent(k));
            assert_eq!(back.r(k), net.r(k));
            assert_eq!(back.x(k), net.x(k));
            assert_eq!(back.k_spaces(k), net.k_spaces(k));
            assert_eq!(back.m_cap(k), net.m_cap(k));
        }
    }

    #[test]
    fn infinite_spaces_round_trip() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.01,0.0,inf,inf\n";
        let net = Network::parse_csv(text, "mem", &GridOptions::default()).unwrap();
        assert!(net.k_spaces(1).is_infinite());
        let again =
            Network::parse_csv(&net.to_csv(), "mem", &GridOptions::default()).unwrap();
        assert!(again.m_cap(1).is_infinite());
    }

    #[test]
    fn exclusion_removes_leaf_but_not_internal() {
        let text = "node,parent,r_pu,x_pu,k_spaces,m_cap\n1,0,0.01,0.0,1,1\n2,1,0.01,0.0,1,1\n3,2,0.01,0.0,1,1\n";
        let opts = GridOptions {
            exclude: vec![3],
            ..GridOptions::default()
        };
        let net = Network::parse_csv(text, "mem", &opts).unwrap();
        assert_eq!(net.node_count(), 2);

        let opts = GridOptions {
            exclude: vec![2],
            ..GridOptions::default()
        };
        let err = Network::parse_csv(text, "mem", &opts).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "got {err:?}");
    }

    #[test]
    fn synthetic47_shape() {
        let net = synthetic47(&GridOptions::default());
        assert_eq!(net.node_count(), 46);
        assert!(!net.is_line());
        assert!(net.subtree_nodes(0).len() == 46);
    }
}
