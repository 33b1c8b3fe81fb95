//! Single-frame pose-graph optimization over a robot team.
//!
//! Node `X_i` is robot i's pose in the ego frame. Edge `T_ij` is robot j's
//! pose in robot i's frame as estimated by i, so a consistent graph satisfies
//! `T_ij = X_i^-1 X_j` and the chordal residual
//! `|| T_ij X_j^-1 X_i - I ||_F^2` vanishes.

use crate::geom::{skew, Pose};
use nalgebra::{DMatrix, DVector, Matrix4, Rotation3, SMatrix, UnitQuaternion, Vector3, Vector6};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

pub type RobotId = u32;

type Vec12 = SMatrix<f64, 12, 1>;
type Mat12x6 = SMatrix<f64, 12, 6>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PgoError {
    #[error("ego node {0} missing from the graph")]
    MissingEgo(RobotId),
    #[error("self-edge on node {0}")]
    SelfEdge(RobotId),
    #[error("edge references unknown node {0}")]
    UnknownNode(RobotId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    None,
    Huber { delta: f64 },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Huber { delta: 0.5 }
    }
}

impl Kernel {
    /// Robust cost of a squared residual `r`.
    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            Kernel::None => r,
            Kernel::Huber { delta } => {
                let s = r.sqrt();
                if s <= delta {
                    r
                } else {
                    2.0 * delta * s - delta * delta
                }
            }
        }
    }

    /// IRLS weight `rho'(r)`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            Kernel::None => 1.0,
            Kernel::Huber { delta } => {
                let s = r.sqrt();
                if s <= delta {
                    1.0
                } else {
                    delta / s
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub i: RobotId,
    pub j: RobotId,
    pub t_ij: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub ego: RobotId,
    pub nodes: BTreeMap<RobotId, Pose>,
    pub edges: Vec<Edge>,
    pub kernel: Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Overrides the graph's kernel when set.
    pub kernel: Option<Kernel>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-12, kernel: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub excluded: Vec<RobotId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub poses: BTreeMap<RobotId, Pose>,
    pub report: SolveReport,
}

/// 3x4 top block of `m - I`, flattened column-major.
fn top_rows_minus_identity(m: &Matrix4<f64>) -> Vec12 {
    let mut e = Vec12::zeros();
    for c in 0..4 {
        for r in 0..3 {
            e[3 * c + r] = m[(r, c)] - if r == c { 1.0 } else { 0.0 };
        }
    }
    e
}

fn top_rows(m: &Matrix4<f64>) -> Vec12 {
    let mut e = Vec12::zeros();
    for c in 0..4 {
        for r in 0..3 {
            e[3 * c + r] = m[(r, c)];
        }
    }
    e
}

fn hat(xi: &Vector6<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&Vector3::new(xi[3], xi[4], xi[5])));
    m[(0, 3)] = xi[0];
    m[(1, 3)] = xi[1];
    m[(2, 3)] = xi[2];
    m
}

/// Chordal residual `|| T_ij X_j^-1 X_i - I ||_F^2`.
pub fn residual(x_i: &Pose, x_j: &Pose, t_ij: &Pose) -> f64 {
    let m = t_ij.to_homogeneous() * x_j.inverse().to_homogeneous() * x_i.to_homogeneous();
    (m - Matrix4::identity()).norm_squared()
}

fn residual_vec(x_i: &Pose, x_j: &Pose, t_ij: &Pose) -> Vec12 {
    let m = t_ij.to_homogeneous() * x_j.inverse().to_homogeneous() * x_i.to_homogeneous();
    top_rows_minus_identity(&m)
}

/// Residual Jacobians with respect to right perturbations
/// `X <- X Exp(xi)`, `xi = (rho, omega)`.
fn residual_jacobians(x_i: &Pose, x_j: &Pose, t_ij: &Pose) -> (Mat12x6, Mat12x6) {
    let t = t_ij.to_homogeneous();
    let xj_inv = x_j.inverse().to_homogeneous();
    let xi = x_i.to_homogeneous();
    let m = t * xj_inv * xi;
    let right = xj_inv * xi;
    let mut ji = Mat12x6::zeros();
    let mut jj = Mat12x6::zeros();
    for k in 0..6 {
        let mut g = Vector6::zeros();
        g[k] = 1.0;
        let gk = hat(&g);
        ji.set_column(k, &top_rows(&(m * gk)));
        jj.set_column(k, &top_rows(&(-(t * gk * right))));
    }
    (ji, jj)
}

/// `X Exp(xi)` with the rotation and translation updated separately.
pub fn retract(x: &Pose, xi: &Vector6<f64>) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let omega = Vector3::new(xi[3], xi[4], xi[5]);
    let r = x.rotation * Rotation3::new(omega);
    Pose::new(Rotation3::from_matrix(r.matrix()), x.translation + x.rotation * rho)
}

impl PoseGraph {
    pub fn new(ego: RobotId) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(ego, Pose::identity());
        Self { ego, nodes, edges: Vec::new(), kernel: Kernel::default() }
    }

    pub fn validate(&self) -> Result<(), PgoError> {
        if !self.nodes.contains_key(&self.ego) {
            return Err(PgoError::MissingEgo(self.ego));
        }
        for e in &self.edges {
            if e.i == e.j {
                return Err(PgoError::SelfEdge(e.i));
            }
            for n in [e.i, e.j] {
                if !self.nodes.contains_key(&n) {
                    return Err(PgoError::UnknownNode(n));
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from ego through edges in either direction.
    pub fn reachable(&self) -> BTreeSet<RobotId> {
        let mut seen = BTreeSet::from([self.ego]);
        let mut queue = VecDeque::from([self.ego]);
        while let Some(n) = queue.pop_front() {
            for e in &self.edges {
                let other = if e.i == n {
                    e.j
                } else if e.j == n {
                    e.i
                } else {
                    continue;
                };
                if seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        seen
    }

    pub fn cost(&self, kernel: Kernel) -> f64 {
        cost_of(&self.nodes, &self.edges, kernel)
    }

    /// Line-based text dump, one record per line:
    ///
    /// ```text
    /// EGO <id>
    /// KERNEL none | KERNEL huber <delta>
    /// NODE <id> <tx> <ty> <tz> <qw> <qx> <qy> <qz>
    /// EDGE <i> <j> <tx> <ty> <tz> <qw> <qx> <qy> <qz> <weight>
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored on load.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "EGO {}", self.ego).unwrap();
        match self.kernel {
            Kernel::None => writeln!(s, "KERNEL none").unwrap(),
            Kernel::Huber { delta } => writeln!(s, "KERNEL huber {delta:?}").unwrap(),
        }
        for (id, p) in &self.nodes {
            writeln!(s, "NODE {id} {}", pose_fields(p)).unwrap();
        }
        for e in &self.edges {
            writeln!(s, "EDGE {} {} {} {:?}", e.i, e.j, pose_fields(&e.t_ij), e.weight).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PgoError> {
        let mut ego = None;
        let mut kernel = Kernel::default();
        let mut nodes = BTreeMap::new();
        let mut edges = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = l.split_whitespace().collect();
            let err = |msg: &str| PgoError::Parse { line, msg: msg.to_string() };
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number {s:?}")));
            let id = |s: &str| s.parse::<RobotId>().map_err(|_| err(&format!("bad id {s:?}")));
            let pose = |fs: &[&str]| -> Result<Pose, PgoError> {
                let v: Vec<f64> = fs.iter().map(|s| num(s)).collect::<Result<_, _>>()?;
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[3], v[4], v[5], v[6]));
                Ok(Pose::from_quat(&q, Vector3::new(v[0], v[1], v[2])))
            };
            match (f[0], f.len()) {
                ("EGO", 2) => ego = Some(id(f[1])?),
                ("KERNEL", 2) if f[1] == "none" => kernel = Kernel::None,
                ("KERNEL", 3) if f[1] == "huber" => kernel = Kernel::Huber { delta: num(f[2])? },
                ("NODE", 9) => {
                    nodes.insert(id(f[1])?, pose(&f[2..9])?);
                }
                ("EDGE", 11) => {
                    edges.push(Edge { i: id(f[1])?, j: id(f[2])?, t_ij: pose(&f[3..10])?, weight: num(f[10])? })
                }
                _ => return Err(err(&format!("unrecognized record {l:?}"))),
            }
        }
        let ego = ego.ok_or(PgoError::Parse { line: 0, msg: "no EGO record".into() })?;
        let g = Self { ego, nodes, edges, kernel };
        g.validate()?;
        Ok(g)
    }
}

fn pose_fields(p: &Pose) -> String {
    let q = p.quaternion();
    let t = p.translation;
    format!("{:?} {:?} {:?} {:?} {:?} {:?} {:?}", t.x, t.y, t.z, q.w, q.i, q.j, q.k)
}

fn cost_of(nodes: &BTreeMap<RobotId, Pose>, edges: &[Edge], kernel: Kernel) -> f64 {
    edges.iter().map(|e| e.weight * kernel.rho(residual(&nodes[&e.i], &nodes[&e.j], &e.t_ij))).sum()
}

/// Levenberg-Marquardt on SE(3) with the ego pose held at identity.
/// Nodes unreachable from ego are dropped with a warning and listed in the
/// report. A run that hits `max_iters` returns its best iterate with
/// `converged = false`.
pub fn solve(graph: &PoseGraph, opts: &SolveOptions) -> Result<Solution, PgoError> {
    graph.validate()?;
    let kernel = opts.kernel.unwrap_or(graph.kernel);
    let reach = graph.reachable();
    let excluded: Vec<RobotId> = graph.nodes.keys().copied().filter(|n| !reach.contains(n)).collect();
    for n in &excluded {
        log::warn!("node {n} is not connected to ego {}; excluded", graph.ego);
    }
    let mut nodes: BTreeMap<RobotId, Pose> =
        graph.nodes.iter().filter(|(k, _)| reach.contains(k)).map(|(k, v)| (*k, *v)).collect();
    nodes.insert(graph.ego, Pose::identity());
    let edges: Vec<Edge> =
        graph.edges.iter().filter(|e| reach.contains(&e.i) && reach.contains(&e.j)).cloned().collect();

    let free: Vec<RobotId> = nodes.keys().copied().filter(|&n| n != graph.ego).collect();
    let index: BTreeMap<RobotId, usize> = free.iter().enumerate().map(|(k, &n)| (n, k)).collect();
    let dim = 6 * free.len();

    let mut cost = cost_of(&nodes, &edges, kernel);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = dim == 0 || cost < 1e-24;

    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &edges {
            let (xi, xj) = (&nodes[&e.i], &nodes[&e.j]);
            let r = residual_vec(xi, xj, &e.t_ij);
            let w = e.weight * kernel.weight(r.norm_squared());
            let (ji, jj) = residual_jacobians(xi, xj, &e.t_ij);
            let blocks = [(index.get(&e.i), ji), (index.get(&e.j), jj)];
            for (ka, ja) in &blocks {
                let Some(&ka) = ka else { continue };
                let g = ja.transpose() * r * w;
                for k in 0..6 {
                    b[6 * ka + k] += g[k];
                }
                for (kb, jb) in &blocks {
                    let Some(&kb) = kb else { continue };
                    let blk = ja.transpose() * jb * w;
                    let mut view = h.view_mut((6 * ka, 6 * kb), (6, 6));
                    view += blk;
                }
            }
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += lambda * (h[(k, k)] + 1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&b));
            let mut trial = nodes.clone();
            for (&n, &k) in &index {
                let xi = Vector6::from_iterator(step.rows(6 * k, 6).iter().copied());
                trial.insert(n, retract(&nodes[&n], &xi));
            }
            let trial_cost = cost_of(&trial, &edges, kernel);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(1e-300);
                nodes = trial;
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < opts.rel_tol || step.amax() < 1e-14 || cost < 1e-24 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left at any damping: a stationary point
            converged = true;
        }
    }

    Ok(Solution {
        poses: nodes,
        report: SolveReport { initial_cost, final_cost: cost, iterations, converged, cost_history: history, excluded },
    })
}

/// One pairwise estimate: `target`'s pose in `observer`'s frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeEstimate {
    pub observer: RobotId,
    pub target: RobotId,
    pub pose: Pose,
    pub t: f64,
    pub weight: f64,
}

/// Builds ego's graph from all pairwise estimates inside one frame window
/// ending at the newest estimate. Ego's own estimates initialize their
/// targets; other nodes are initialized by composing along a breadth-first
/// path from ego.
pub fn edges_from_filters(ego: RobotId, estimates: &[RelativeEstimate], window: f64) -> PoseGraph {
    let mut g = PoseGraph::new(ego);
    let Some(t_ref) = estimates.iter().map(|e| e.t).reduce(f64::max) else {
        return g;
    };
    for e in estimates.iter().filter(|e| t_ref - e.t <= window + 1e-12 && e.observer != e.target) {
        g.edges.push(Edge { i: e.observer, j: e.target, t_ij: e.pose, weight: e.weight });
    }
    for e in &g.edges {
        if e.i == ego {
            g.nodes.entry(e.j).or_insert(e.t_ij);
        }
    }
    let mut queue: VecDeque<RobotId> = g.nodes.keys().copied().collect();
    while let Some(n) = queue.pop_front() {
        let xn = g.nodes[&n];
        let mut found = Vec::new();
        for e in &g.edges {
            if e.i == n && !g.nodes.contains_key(&e.j) {
                found.push((e.j, xn * e.t_ij));
            } else if e.j == n && !g.nodes.contains_key(&e.i) {
                found.push((e.i, xn * e.t_ij.inverse()));
            }
        }
        for (id, x) in found {
            if let std::collections::btree_map::Entry::Vacant(v) = g.nodes.entry(id) {
                v.insert(x);
                queue.push_back(id);
            }
        }
    }
    g
}
