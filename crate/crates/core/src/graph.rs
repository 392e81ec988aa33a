//! Directed communication graphs and their mixing matrices.
//!
//! A [`MixingPair`] holds the row-stochastic pull matrix `R` (mixes iterates)
//! and the column-stochastic push matrix `C` (mixes tracking variables),
//! together with the Perron vectors `u` (left, of `R`) and `v` (right, of `C`)
//! and the spectral radii of the deflated matrices `R - 1u^T/N` and
//! `C - v1^T/N`.
//!
//! Index convention: `R[(i, j)] > 0` means agent `i` pulls from agent `j`,
//! `C[(i, j)] > 0` means agent `j` pushes to agent `i`. An edge
//! `(from, to, w)` therefore populates entry `(to, from)` of both matrices.

use std::fmt::{self, Write as _};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, stream};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Tolerance on row/column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Residual target for the Perron vector power iterations.
pub const EIGVEC_TOL: f64 = 1e-12;
pub const EIGVEC_MAX_ITERS: usize = 100_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("connectivity: {0}")]
    Connectivity(String),
    #[error("weights: {0}")]
    Weight(String),
    #[error("not stochastic: {0}")]
    NotStochastic(String),
    #[error("invalid graph spec: {0}")]
    InvalidSpec(String),
    #[error("{what} did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },
    #[error("malformed mixing pair text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    DirectedRing,
    RandomStronglyConnected,
    Explicit,
}

/// A directed edge `from -> to` with a nonnegative weight. Agents are
/// numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge(pub usize, pub usize, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub n_agents: usize,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<Edge>>,
}

fn default_density() -> f64 {
    0.5
}

impl GraphSpec {
    pub fn ring(n_agents: usize) -> Self {
        Self {
            kind: GraphKind::DirectedRing,
            n_agents,
            density: default_density(),
            seed: 0,
            edges: None,
        }
    }

    pub fn random(n_agents: usize, density: f64, seed: u64) -> Self {
        Self {
            kind: GraphKind::RandomStronglyConnected,
            n_agents,
            density,
            seed,
            edges: None,
        }
    }

    pub fn explicit(n_agents: usize, edges: Vec<Edge>) -> Self {
        Self {
            kind: GraphKind::Explicit,
            n_agents,
            density: default_density(),
            seed: 0,
            edges: Some(edges),
        }
    }

    /// The five-agent graph shipped with the benchmark configs.
    pub fn default_benchmark() -> Self {
        Self::random(5, 0.4, 2024)
    }

    fn check_well_formed(&self) -> Result<(), GraphError> {
        if self.n_agents == 0 {
            return Err(GraphError::InvalidSpec("n_agents must be positive".into()));
        }
        match self.kind {
            GraphKind::RandomStronglyConnected => {
                if !(self.density > 0.0 && self.density <= 1.0) {
                    return Err(GraphError::InvalidSpec(format!(
                        "density must lie in (0, 1], got {}",
                        self.density
                    )));
                }
            }
            GraphKind::Explicit => {
                if self.edges.is_none() {
                    return Err(GraphError::InvalidSpec(
                        "explicit graph requires an edge list".into(),
                    ));
                }
            }
            GraphKind::DirectedRing => {}
        }
        Ok(())
    }
}

/// Outcome of one sub-condition of the mixing-matrix requirements.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(Check {
            name,
            passed,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {:<24} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Row-stochastic `R`, column-stochastic `C` and their spectral data.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingPair {
    r: Matrix,
    c: Matrix,
    u: Vector,
    v: Vector,
    rho_r: f64,
    rho_c: f64,
}

impl MixingPair {
    /// Validates `(R, C)` and computes the Perron vectors and deflated
    /// spectral radii.
    pub fn from_matrices(r: Matrix, c: Matrix) -> Result<Self, GraphError> {
        let report = validate_mixing(&r, &c);
        if let Some(fail) = report.failures().next() {
            let msg = format!("{}: {}", fail.name, fail.detail);
            return Err(match fail.name {
                "spanning_tree_R" | "strongly_connected_CT" => GraphError::Connectivity(msg),
                "row_stochastic_R" | "column_stochastic_C" | "shape" => {
                    GraphError::NotStochastic(msg)
                }
                _ => GraphError::Weight(msg),
            });
        }
        let (u, v) = compute_eigenvectors(&r, &c)?;
        let n = r.nrows();
        let ones = Vector::ones(n);
        let rho_r = spectral_radius_deflated(&r, &ones, &u)?;
        let rho_c = spectral_radius_deflated(&c, &v, &ones)?;
        Ok(Self {
            r,
            c,
            u,
            v,
            rho_r,
            rho_c,
        })
    }

    /// The trivial single-agent pair `R = C = [1]`.
    pub fn single() -> Self {
        Self::from_matrices(Matrix::ones((1, 1)), Matrix::ones((1, 1)))
            .expect("1x1 identity is a valid mixing pair")
    }

    pub fn n_agents(&self) -> usize {
        self.r.nrows()
    }
    pub fn r(&self) -> &Matrix {
        &self.r
    }
    pub fn c(&self) -> &Matrix {
        &self.c
    }
    pub fn u(&self) -> &Vector {
        &self.u
    }
    pub fn v(&self) -> &Vector {
        &self.v
    }
    pub fn rho_r(&self) -> f64 {
        self.rho_r
    }
    pub fn rho_c(&self) -> f64 {
        self.rho_c
    }

    /// Text form: `N=<n>`, the rows of `R`, a blank line, the rows of `C`.
    /// Entries carry 17 significant digits so the round trip is exact.
    pub fn to_text(&self) -> String {
        let n = self.n_agents();
        let mut out = format!("N={n}\n");
        write_matrix(&mut out, &self.r);
        out.push('\n');
        write_matrix(&mut out, &self.c);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| GraphError::Parse("empty input".into()))?;
        let n: usize = header
            .trim()
            .strip_prefix("N=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GraphError::Parse(format!("bad header {header:?}")))?;
        let r = read_matrix(&mut lines, n, "R")?;
        match lines.next() {
            Some(l) if l.trim().is_empty() => {}
            other => {
                return Err(GraphError::Parse(format!(
                    "expected blank separator line, found {other:?}"
                )))
            }
        }
        let c = read_matrix(&mut lines, n, "C")?;
        Self::from_matrices(r, c)
    }
}

fn write_matrix(out: &mut String, m: &Matrix) {
    for row in m.rows() {
        let mut first = true;
        for x in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{x:.16e}").unwrap();
        }
        out.push('\n');
    }
}

fn read_matrix<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    n: usize,
    name: &str,
) -> Result<Matrix, GraphError> {
    let mut m = Matrix::zeros((n, n));
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| GraphError::Parse(format!("{name}: missing row {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GraphError::Parse(format!("{name} row {i}: {e}")))?;
        if vals.len() != n {
            return Err(GraphError::Parse(format!(
                "{name} row {i}: expected {n} entries, found {}",
                vals.len()
            )));
        }
        for (j, x) in vals.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

/// Builds the mixing pair described by `spec`.
pub fn build_mixing_pair(spec: &GraphSpec) -> Result<MixingPair, GraphError> {
    let (r, c) = mixing_matrices(spec)?;
    MixingPair::from_matrices(r, c)
}

/// `(R, C)` for `spec` before any connectivity validation.
pub fn mixing_matrices(spec: &GraphSpec) -> Result<(Matrix, Matrix), GraphError> {
    spec.check_well_formed()?;
    let n = spec.n_agents;
    Ok(match spec.kind {
        GraphKind::DirectedRing => {
            let mut adj = identity_support(n);
            for i in 0..n {
                // agent i pulls from i+1
                adj[i][(i + 1) % n] = true;
            }
            uniform_weights(&adj)
        }
        GraphKind::RandomStronglyConnected => uniform_weights(&random_support(n, spec.density, spec.seed)),
        GraphKind::Explicit => explicit_weights(n, spec.edges.as_deref().unwrap_or(&[]))?,
    })
}

fn identity_support(n: usize) -> Vec<Vec<bool>> {
    (0..n)
        .map(|i| (0..n).map(|j| i == j).collect())
        .collect()
}

/// `adj[i][j]` means `i` receives from `j`.
fn random_support(n: usize, density: f64, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = rng::seeded(seed, stream::GRAPH);
    let mut adj = identity_support(n);
    for (i, row) in adj.iter_mut().enumerate() {
        for (j, a) in row.iter_mut().enumerate() {
            if i != j && rng.random_bool(density) {
                *a = true;
            }
        }
    }
    if !strongly_connected(&adj) {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for k in 0..n {
            let from = perm[k];
            let to = perm[(k + 1) % n];
            adj[to][from] = true;
        }
    }
    adj
}

fn uniform_weights(adj: &[Vec<bool>]) -> (Matrix, Matrix) {
    let n = adj.len();
    let w = Matrix::from_shape_fn((n, n), |(i, j)| if adj[i][j] { 1.0 } else { 0.0 });
    (normalize_rows(&w), normalize_cols(&w))
}

fn explicit_weights(n: usize, edges: &[Edge]) -> Result<(Matrix, Matrix), GraphError> {
    let mut w = Matrix::zeros((n, n));
    for &Edge(from, to, weight) in edges {
        if from == 0 || to == 0 || from > n || to > n {
            return Err(GraphError::InvalidSpec(format!(
                "edge ({from}, {to}) outside agents 1..={n}"
            )));
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(GraphError::Weight(format!(
                "edge ({from}, {to}) has invalid weight {weight}"
            )));
        }
        w[(to - 1, from - 1)] += weight;
    }
    for i in 0..n {
        if w[(i, i)] <= 0.0 {
            return Err(GraphError::Weight(format!(
                "agent {} has no positive self-loop",
                i + 1
            )));
        }
    }
    Ok((normalize_rows(&w), normalize_cols(&w)))
}

fn normalize_rows(w: &Matrix) -> Matrix {
    let mut m = w.clone();
    for mut row in m.rows_mut() {
        let s: f64 = row.iter().sum();
        row.mapv_inplace(|x| x / s);
    }
    m
}

fn normalize_cols(w: &Matrix) -> Matrix {
    let mut m = w.clone();
    for mut col in m.columns_mut() {
        let s: f64 = col.iter().sum();
        col.mapv_inplace(|x| x / s);
    }
    m
}

/// `adj[i][j]` is an edge `j -> i`. Returns nodes reachable from `root`
/// following edge direction.
fn reachable(adj: &[Vec<bool>], root: usize, reverse: bool) -> Vec<bool> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(j) = stack.pop() {
        for i in 0..n {
            let edge = if reverse { adj[j][i] } else { adj[i][j] };
            if edge && !seen[i] {
                seen[i] = true;
                stack.push(i);
            }
        }
    }
    seen
}

fn strongly_connected(adj: &[Vec<bool>]) -> bool {
    adj.is_empty()
        || (reachable(adj, 0, false).iter().all(|&s| s) && reachable(adj, 0, true).iter().all(|&s| s))
}

/// A spanning tree rooted somewhere exists iff some node reaches all
/// others. The node finishing last in a full DFS sits in a source
/// component, so it is the only candidate worth testing.
fn has_spanning_tree(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    if n == 0 {
        return true;
    }
    let mut visited = vec![false; n];
    let mut last = 0;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        // iterative post-order DFS
        let mut stack = vec![(start, 0usize)];
        visited[start] = true;
        while let Some(&mut (j, ref mut next)) = stack.last_mut() {
            let mut pushed = false;
            while *next < n {
                let i = *next;
                *next += 1;
                if adj[i][j] && !visited[i] {
                    visited[i] = true;
                    stack.push((i, 0));
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                last = j;
                stack.pop();
            }
        }
    }
    reachable(adj, last, false).iter().all(|&s| s)
}

fn support(m: &Matrix) -> Vec<Vec<bool>> {
    m.rows()
        .into_iter()
        .map(|row| row.iter().map(|&x| x > 0.0).collect())
        .collect()
}

/// Checks the mixing-matrix requirements sub-condition by sub-condition.
pub fn validate_mixing(r: &Matrix, c: &Matrix) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = r.nrows();
    let square = r.is_square() && c.is_square() && c.nrows() == n && n > 0;
    rep.push(
        "shape",
        square,
        format!("R {:?}, C {:?}", r.dim(), c.dim()),
    );
    if !square {
        return rep;
    }

    for (name, m) in [("nonnegative_R", r), ("nonnegative_C", c)] {
        let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let finite = m.iter().all(|x| x.is_finite());
        rep.push(name, finite && min >= 0.0, format!("min entry {min:e}"));
    }

    let row_err = r
        .rows()
        .into_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    rep.push(
        "row_stochastic_R",
        row_err <= STOCHASTIC_TOL,
        format!("max |row sum - 1| = {row_err:e}"),
    );
    let col_err = c
        .columns()
        .into_iter()
        .map(|col| (col.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    rep.push(
        "column_stochastic_C",
        col_err <= STOCHASTIC_TOL,
        format!("max |column sum - 1| = {col_err:e}"),
    );

    for (name, m) in [("positive_diagonal_R", r), ("positive_diagonal_C", c)] {
        let bad: Vec<usize> = (0..n).filter(|&i| !(m[(i, i)] > 0.0)).map(|i| i + 1).collect();
        let detail = if bad.is_empty() {
            "all diagonal entries > 0".to_string()
        } else {
            format!("zero diagonal at agents {bad:?}")
        };
        rep.push(name, bad.is_empty(), detail);
    }

    let tree = has_spanning_tree(&support(r));
    rep.push(
        "spanning_tree_R",
        tree,
        if tree { "G_R has a spanning tree" } else { "G_R has no spanning tree" }.into(),
    );
    // Reversal preserves strong connectivity, so the support of C stands in
    // for that of C^T.
    let strong = strongly_connected(&support(c));
    rep.push(
        "strongly_connected_CT",
        strong,
        if strong { "G_{C^T} is strongly connected" } else { "G_{C^T} is not strongly connected" }.into(),
    );
    rep
}

fn power_fixed_point(
    apply: impl Fn(&Vector) -> Vector,
    n: usize,
    what: &'static str,
) -> Result<Vector, GraphError> {
    let scale = n as f64;
    let mut x = Vector::ones(n);
    let mut residual = f64::INFINITY;
    for _ in 0..EIGVEC_MAX_ITERS {
        let mut next = apply(&x);
        let s = next.sum();
        if !(s.is_finite() && s > 0.0) {
            break;
        }
        next.mapv_inplace(|t| t * scale / s);
        let image = apply(&next);
        residual = image
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if residual <= EIGVEC_TOL {
            return Ok(x);
        }
    }
    Err(GraphError::NoConvergence {
        what,
        iters: EIGVEC_MAX_ITERS,
        residual,
    })
}

/// Perron vectors: `u^T R = u^T` with `u^T 1 = N`, and `C v = v` with
/// `1^T v = N`, by power iteration from the all-ones vector.
pub fn compute_eigenvectors(r: &Matrix, c: &Matrix) -> Result<(Vector, Vector), GraphError> {
    let n = r.nrows();
    if !r.is_square() || c.dim() != (n, n) {
        return Err(GraphError::InvalidSpec(format!(
            "R {:?} and C {:?} must be square and conformable",
            r.dim(),
            c.dim()
        )));
    }
    let u = power_fixed_point(|x| r.t().dot(x), n, "left eigenvector of R")?;
    let v = power_fixed_point(|x| c.dot(x), n, "right eigenvector of C")?;
    Ok((u, v))
}

/// Spectral radius of `M - (1/N) a b^T`, from the full complex spectrum of
/// the deflated matrix (Hessenberg reduction plus shifted QR).
///
/// Iterative schemes stall when several eigenvalues share the largest
/// modulus, which random digraphs do produce, so the spectrum is computed
/// densely. Mixing matrices here have at most a few hundred rows.
pub fn spectral_radius_deflated(m: &Matrix, a: &Vector, b: &Vector) -> Result<f64, GraphError> {
    let n = m.nrows();
    if !m.is_square() || a.len() != n || b.len() != n || n == 0 {
        return Err(GraphError::InvalidSpec(format!(
            "deflation shapes M {:?}, a {}, b {}",
            m.dim(),
            a.len(),
            b.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let d = DMatrix::from_fn(n, n, |i, j| m[(i, j)] - inv_n * a[i] * b[j]);
    let frob = d.norm();
    if !frob.is_finite() {
        return Err(GraphError::NotStochastic("non-finite entries".into()));
    }
    if frob == 0.0 {
        return Ok(0.0);
    }
    let rho = d
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if !rho.is_finite() {
        return Err(GraphError::NoConvergence {
            what: "deflated spectral radius",
            iters: 0,
            residual: f64::NAN,
        });
    }
    // Round-off floor of the eigen-solve.
    Ok(if rho <= 1e-14 * frob { 0.0 } else { rho })
}
