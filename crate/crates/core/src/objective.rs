//! Local objectives and the generalized-smoothness toolbox.
//!
//! Each agent owns a [`LocalObjective`]. Besides value/gradient evaluation
//! this module provides the constants that relate local and global
//! `(L0, L1)`-smoothness and Hessian-free probes that estimate smoothness and
//! gradient-dissimilarity parameters from samples.

use std::sync::Arc;

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Shard;
use crate::graph::{Matrix, Vector};
use crate::rng::{self, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("evaluation overflowed (value or gradient not finite)")]
    Overflow,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input")]
    EmptyInput,
    #[error("c must be positive, got {0}")]
    NonPositiveC(f64),
    #[error("objective has no known minimum")]
    UnknownMinimum,
    #[error("minibatch index {0} out of range")]
    BatchIndex(usize),
}

/// How the cross-entropy term of `logistic_lq` is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// `log(1 + e^z) - y z` with `z = theta^T h`.
    #[default]
    Bce,
    /// `-y log(1/(1+e^z)) + (1-y) log(e^z/(1+e^z))`: the sign-flipped form,
    /// whose minimizer predicts the opposite label.
    FlippedSign,
}

#[derive(Debug, Clone)]
pub enum Term {
    /// Mean cross-entropy over a data shard plus `lambda * ||theta||^p`.
    LogisticLq {
        shard: Arc<Shard>,
        lambda: f64,
        p: f64,
        convention: LossConvention,
    },
    /// `0.5 theta^T A theta + b^T theta + c`.
    Quadratic {
        matrix: Matrix,
        vector: Vector,
        constant: f64,
    },
    /// `lambda * ||theta - center||^p`.
    PowerNorm {
        lambda: f64,
        p: f64,
        center: Option<Vector>,
    },
    /// Sum of terms.
    Composite(Vec<Term>),
    /// `s * term`, for terms that cannot absorb a scale in their parameters.
    Scaled(f64, Box<Term>),
}

#[derive(Debug, Clone)]
pub struct LocalObjective {
    dim: usize,
    term: Term,
    /// Declared `(L0, L1)` for this agent, if known.
    pub smoothness_meta: Option<(f64, f64)>,
}

fn check_power(p: f64, lambda: f64) -> Result<(), ObjectiveError> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(ObjectiveError::InvalidParameter(format!("p must be >= 2, got {p}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(())
}

impl LocalObjective {
    pub fn logistic_lq(shard: Arc<Shard>, lambda: f64, p: f64) -> Result<Self, ObjectiveError> {
        Self::logistic_lq_with(shard, lambda, p, LossConvention::Bce)
    }

    pub fn logistic_lq_with(
        shard: Arc<Shard>,
        lambda: f64,
        p: f64,
        convention: LossConvention,
    ) -> Result<Self, ObjectiveError> {
        check_power(p, lambda)?;
        Ok(Self {
            dim: shard.dim(),
            term: Term::LogisticLq {
                shard,
                lambda,
                p,
                convention,
            },
            smoothness_meta: None,
        })
    }

    pub fn quadratic(matrix: Matrix, vector: Vector, constant: f64) -> Result<Self, ObjectiveError> {
        let d = vector.len();
        if matrix.dim() != (d, d) {
            return Err(ObjectiveError::InvalidParameter(format!(
                "quadratic matrix {:?} does not match vector length {d}",
                matrix.dim()
            )));
        }
        Ok(Self {
            dim: d,
            term: Term::Quadratic {
                matrix,
                vector,
                constant,
            },
            smoothness_meta: None,
        })
    }

    /// `0.5 * curvature * ||theta||^2`.
    pub fn isotropic_quadratic(dim: usize, curvature: f64) -> Self {
        Self::quadratic(Matrix::eye(dim) * curvature, Vector::zeros(dim), 0.0)
            .expect("shapes agree")
    }

    pub fn power_norm(dim: usize, lambda: f64, p: f64, center: Option<Vector>) -> Result<Self, ObjectiveError> {
        check_power(p, lambda)?;
        if let Some(c) = &center {
            if c.len() != dim {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: dim,
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            dim,
            term: Term::PowerNorm { lambda, p, center },
            smoothness_meta: None,
        })
    }

    pub fn composite(dim: usize, parts: Vec<LocalObjective>) -> Result<Self, ObjectiveError> {
        if parts.is_empty() {
            return Err(ObjectiveError::EmptyInput);
        }
        let mut terms = Vec::with_capacity(parts.len());
        for p in parts {
            if p.dim != dim {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: dim,
                    got: p.dim,
                });
            }
            terms.push(p.term);
        }
        Ok(Self {
            dim,
            term: Term::Composite(terms),
            smoothness_meta: None,
        })
    }

    pub fn with_smoothness(mut self, l0: f64, l1: f64) -> Self {
        self.smoothness_meta = Some((l0, l1));
        self
    }

    /// Multiplies the whole objective by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            term: scale_term(&self.term, s),
            smoothness_meta: self.smoothness_meta.map(|(a, b)| (a * s, b)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn term(&self) -> &Term {
        &self.term
    }

    pub fn kind_name(&self) -> &'static str {
        fn name(t: &Term) -> &'static str {
            match t {
                Term::LogisticLq { .. } => "logistic_lq",
                Term::Quadratic { .. } => "quadratic",
                Term::PowerNorm { .. } => "power_norm",
                Term::Composite(_) => "custom_composite",
                Term::Scaled(_, inner) => name(inner),
            }
        }
        name(&self.term)
    }

    /// Number of data samples behind the objective (for minibatching), if
    /// it is data-driven.
    pub fn n_samples(&self) -> Option<usize> {
        term_samples(&self.term)
    }

    /// Full-batch value and gradient.
    pub fn eval(&self, theta: &[f64]) -> Result<(f64, Vector), ObjectiveError> {
        self.eval_batch(theta, None)
    }

    /// Value and gradient with the data term restricted to `batch` (sample
    /// indices into the shard). Data-free terms ignore the batch.
    pub fn eval_batch(&self, theta: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vector), ObjectiveError> {
        if theta.len() != self.dim {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dim,
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ObjectiveError::NonFiniteInput);
        }
        let mut grad = Vector::zeros(self.dim);
        let value = eval_term(&self.term, theta, batch, grad.as_slice_mut().unwrap())?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ObjectiveError::Overflow);
        }
        Ok((value, grad))
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.eval(theta)?.0)
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vector, ObjectiveError> {
        Ok(self.eval(theta)?.1)
    }

    /// Exact infimum for synthetic kinds where it is available in closed form.
    pub fn known_minimum(&self) -> Option<f64> {
        match &self.term {
            Term::PowerNorm { .. } => Some(0.0),
            Term::Quadratic {
                matrix,
                vector,
                constant,
            } => quadratic_minimum(matrix, vector, *constant),
            _ => None,
        }
    }
}

fn scale_term(t: &Term, s: f64) -> Term {
    match t {
        Term::LogisticLq { .. } => Term::Scaled(s, Box::new(t.clone())),
        Term::Quadratic {
            matrix,
            vector,
            constant,
        } => Term::Quadratic {
            matrix: matrix * s,
            vector: vector * s,
            constant: constant * s,
        },
        Term::PowerNorm { lambda, p, center } => Term::PowerNorm {
            lambda: lambda * s,
            p: *p,
            center: center.clone(),
        },
        Term::Composite(ts) => Term::Composite(ts.iter().map(|t| scale_term(t, s)).collect()),
        Term::Scaled(k, inner) => Term::Scaled(k * s, inner.clone()),
    }
}

fn term_samples(t: &Term) -> Option<usize> {
    match t {
        Term::LogisticLq { shard, .. } => Some(shard.len()),
        Term::Composite(ts) => ts.iter().find_map(term_samples),
        Term::Scaled(_, inner) => term_samples(inner),
        _ => None,
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Adds the gradient of `lambda * ||theta - center||^p` into `grad` and
/// returns the value. The gradient is zero at the center.
fn add_power_norm(theta: &[f64], center: Option<&[f64]>, lambda: f64, p: f64, grad: &mut [f64]) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let diff = |i: usize| theta[i] - center.map_or(0.0, |c| c[i]);
    let t = (0..theta.len()).map(|i| diff(i) * diff(i)).sum::<f64>().sqrt();
    if t == 0.0 {
        return 0.0;
    }
    let coef = lambda * p * t.powf(p - 2.0);
    for (i, g) in grad.iter_mut().enumerate() {
        *g += coef * diff(i);
    }
    lambda * t.powf(p)
}

fn eval_term(t: &Term, theta: &[f64], batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64, ObjectiveError> {
    match t {
        Term::LogisticLq {
            shard,
            lambda,
            p,
            convention,
        } => {
            let samples = shard.samples();
            let mut loss = 0.0;
            let mut accumulate = |idx: usize| -> Result<(), ObjectiveError> {
                let s = samples.get(idx).ok_or(ObjectiveError::BatchIndex(idx))?;
                let z = s.dot(theta);
                let y = s.label;
                let sp = softplus(z);
                let sig = sigmoid(z);
                let (l, coef) = match convention {
                    LossConvention::Bce => (sp - y * z, sig - y),
                    LossConvention::FlippedSign => {
                        (y * sp + (1.0 - y) * (z - sp), y * sig + (1.0 - y) * (1.0 - sig))
                    }
                };
                loss += l;
                for &(i, v) in &s.features {
                    grad[i as usize - 1] += coef * v;
                }
                Ok(())
            };
            let count = match batch {
                Some(b) => {
                    for &i in b {
                        accumulate(i)?;
                    }
                    b.len()
                }
                None => {
                    for i in 0..samples.len() {
                        accumulate(i)?;
                    }
                    samples.len()
                }
            };
            if count > 0 {
                let inv = 1.0 / count as f64;
                loss *= inv;
                grad.iter_mut().for_each(|g| *g *= inv);
            }
            Ok(loss + add_power_norm(theta, None, *lambda, *p, grad))
        }
        Term::Quadratic {
            matrix,
            vector,
            constant,
        } => {
            let d = theta.len();
            let mut value = *constant;
            for i in 0..d {
                let mut row = 0.0;
                let mut sym = 0.0;
                for j in 0..d {
                    row += matrix[(i, j)] * theta[j];
                    sym += 0.5 * (matrix[(i, j)] + matrix[(j, i)]) * theta[j];
                }
                value += 0.5 * theta[i] * row + vector[i] * theta[i];
                grad[i] += sym + vector[i];
            }
            Ok(value)
        }
        Term::PowerNorm { lambda, p, center } => Ok(add_power_norm(
            theta,
            center.as_ref().map(|c| c.as_slice().unwrap()),
            *lambda,
            *p,
            grad,
        )),
        Term::Composite(ts) => {
            let mut v = 0.0;
            for t in ts {
                v += eval_term(t, theta, batch, grad)?;
            }
            Ok(v)
        }
        Term::Scaled(s, inner) => {
            let mut g = vec![0.0; grad.len()];
            let v = eval_term(inner, theta, batch, &mut g)?;
            for (o, gi) in grad.iter_mut().zip(g) {
                *o += s * gi;
            }
            Ok(s * v)
        }
    }
}

/// Minimum of `0.5 x^T A x + b^T x + c` when the symmetric part of `A` is
/// positive definite (or `A = 0, b = 0`).
fn quadratic_minimum(a: &Matrix, b: &Vector, c: f64) -> Option<f64> {
    let d = b.len();
    if a.iter().all(|&x| x == 0.0) {
        return b.iter().all(|&x| x == 0.0).then_some(c);
    }
    // Cholesky of the symmetric part.
    let mut l = Matrix::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let sym = 0.5 * (a[(i, j)] + a[(j, i)]);
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let piv = sym - s;
                if piv <= 0.0 {
                    return None;
                }
                l[(i, i)] = piv.sqrt();
            } else {
                l[(i, j)] = (sym - s) / l[(j, j)];
            }
        }
    }
    // Solve S x = -b.
    let mut z = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[(i, k)] * z[k]).sum();
        z[i] = (-b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (z[i] - s) / l[(i, i)];
    }
    // f(x*) = c + 0.5 b^T x*
    Some(c + 0.5 * b.iter().zip(&x).map(|(bi, xi)| bi * xi).sum::<f64>())
}

/// Global `(L0, L1)` for the average of agents with local constants
/// `locals`, under gradient dissimilarity `(ell, b)`:
/// `L0 = mean(L0_i + L1_i b)`, `L1 = ell * mean(L1_i)`.
pub fn combine_global_smoothness(locals: &[(f64, f64)], ell: f64, b: f64) -> Result<(f64, f64), ObjectiveError> {
    if locals.is_empty() {
        return Err(ObjectiveError::EmptyInput);
    }
    if !(ell >= 1.0) || !(b >= 0.0) || !ell.is_finite() || !b.is_finite() {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need ell >= 1 and b >= 0, got ell={ell}, b={b}"
        )));
    }
    if locals.iter().any(|&(l0, l1)| !(l0 >= 0.0 && l1 >= 0.0 && l0.is_finite() && l1.is_finite())) {
        return Err(ObjectiveError::InvalidParameter("local constants must be >= 0".into()));
    }
    let n = locals.len() as f64;
    let l0 = locals.iter().map(|&(l0, l1)| l0 + l1 * b).sum::<f64>() / n;
    let l1 = ell * locals.iter().map(|&(_, l1)| l1).sum::<f64>() / n;
    Ok((l0, l1))
}

/// The constants `A = 1 + e^c - (e^c - 1)/c` and `B = (e^c - 1)/c` of the
/// local descent inequality.
pub fn ab_constants(c: f64) -> Result<(f64, f64), ObjectiveError> {
    if !(c > 0.0) {
        return Err(ObjectiveError::NonPositiveC(c));
    }
    if c < 1e-8 {
        return Ok((1.0, 1.0));
    }
    let b = c.exp_m1() / c;
    Ok((1.0 + c.exp() - b, b))
}

/// A fitted affine upper envelope `y <= intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub intercept: f64,
    pub slope: f64,
    /// All abscissae coincide, so the slope is not identifiable.
    pub degenerate: bool,
    /// `max_j (y_j - intercept - slope * x_j)`, never positive.
    pub max_residual: f64,
}

/// Tightest affine upper envelope with nonnegative coefficients, measured at
/// the mean abscissa: minimizes `intercept + slope * mean(x)` subject to
/// `y_j <= intercept + slope * x_j`, ties broken toward the smaller slope.
/// Solved exactly from the upper convex hull of the points.
pub fn fit_upper_envelope(points: &[(f64, f64)]) -> Envelope {
    assert!(!points.is_empty(), "envelope needs at least one point");
    let xmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymax = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mean = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;

    let degenerate = xmax - xmin <= 1e-12 * xmax.abs().max(1e-300);
    let (mut intercept, mut slope) = if degenerate {
        (ymax.max(0.0), 0.0)
    } else {
        let hull = upper_hull(points);
        // Edge spanning the mean; at a vertex take the right edge.
        let k = hull
            .windows(2)
            .position(|w| w[0].0 <= mean && mean < w[1].0)
            .unwrap_or(hull.len() - 2);
        let (p, q) = (hull[k], hull[k + 1]);
        let s = (q.1 - p.1) / (q.0 - p.0);
        let b = p.1 - s * p.0;
        if s < 0.0 {
            (ymax.max(0.0), 0.0)
        } else if b < 0.0 {
            let s = points
                .iter()
                .filter(|p| p.0 > 0.0)
                .map(|p| p.1 / p.0)
                .fold(0.0, f64::max);
            (0.0, s)
        } else {
            (b, s)
        }
    };
    // Rounding in the line construction can leave a hull vertex an ulp
    // above the envelope.
    let residual = |b: f64, s: f64| {
        points
            .iter()
            .map(|&(x, y)| y - (b + s * x))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut max_residual = residual(intercept, slope);
    while max_residual > 0.0 {
        intercept += max_residual.max(f64::EPSILON * intercept.abs());
        max_residual = residual(intercept, slope);
    }
    slope = slope.max(0.0);
    Envelope {
        intercept,
        slope,
        degenerate,
        max_residual,
    }
}

fn upper_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for p in pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessEstimate {
    pub l0_hat: f64,
    pub l1_hat: f64,
    pub n_samples: usize,
    pub max_residual: f64,
    /// Gradient norms did not vary over the samples; `l1_hat` is forced to 0.
    pub degenerate: bool,
}

fn random_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Estimates `(L0, L1)` with `||grad(a) - grad(b)|| / ||a - b|| <= L0 + L1 ||grad(b)||`
/// from pairs sampled in a ball around `anchor` and along a short
/// normalized-gradient-descent path from it.
pub fn probe_smoothness(
    obj: &LocalObjective,
    anchor: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SmoothnessEstimate, ObjectiveError> {
    let d = obj.dim();
    if anchor.len() != d {
        return Err(ObjectiveError::DimensionMismatch {
            expected: d,
            got: anchor.len(),
        });
    }
    if !(radius > 0.0) || n_samples < 2 {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need radius > 0 and n_samples >= 2, got {radius}, {n_samples}"
        )));
    }
    let mut rng = rng::seeded(seed, stream::PROBE);
    let offset = 1e-3 * radius;
    let mut points = Vec::with_capacity(n_samples);
    let push_pair = |a: &[f64], b: &[f64], points: &mut Vec<(f64, f64)>| -> Result<(), ObjectiveError> {
        let ga = obj.gradient(a)?;
        let gb = obj.gradient(b)?;
        let dg: f64 = ga.iter().zip(gb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let dx: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        points.push((norm(gb.as_slice().unwrap()), dg / dx));
        Ok(())
    };

    let n_ball = n_samples.div_ceil(2);
    for _ in 0..n_ball {
        let dir = random_direction(&mut rng, d);
        let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
        let base: Vec<f64> = (0..d).map(|i| anchor[i] + r * dir[i]).collect();
        let step = random_direction(&mut rng, d);
        let other: Vec<f64> = (0..d).map(|i| base[i] + offset * step[i]).collect();
        push_pair(&other, &base, &mut points)?;
    }
    let n_path = n_samples - n_ball;
    let step_len = radius / n_path.max(1) as f64;
    let mut cur = anchor.to_vec();
    for _ in 0..n_path {
        let g = obj.gradient(&cur)?;
        let gn = norm(g.as_slice().unwrap());
        let dir: Vec<f64> = if gn > 0.0 {
            g.iter().map(|x| -x / gn).collect()
        } else {
            random_direction(&mut rng, d)
        };
        let next: Vec<f64> = (0..d).map(|i| cur[i] + step_len * dir[i]).collect();
        push_pair(&next, &cur, &mut points)?;
        cur = next;
    }

    let env = fit_upper_envelope(&points);
    Ok(SmoothnessEstimate {
        l0_hat: env.intercept,
        l1_hat: env.slope,
        n_samples: points.len(),
        max_residual: env.max_residual,
        degenerate: env.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityEstimate {
    pub ell_hat: f64,
    pub b_hat: f64,
    pub n_samples: usize,
}

/// Fits `||grad f_i - grad F|| <= (ell - 1) ||grad F|| + b` over every
/// agent and sample point.
pub fn probe_dissimilarity(objs: &[LocalObjective], sample_points: &[Vec<f64>]) -> Result<DissimilarityEstimate, ObjectiveError> {
    if objs.is_empty() || sample_points.is_empty() {
        return Err(ObjectiveError::EmptyInput);
    }
    let d = objs[0].dim();
    for o in objs {
        if o.dim() != d {
            return Err(ObjectiveError::DimensionMismatch {
                expected: d,
                got: o.dim(),
            });
        }
    }
    let n = objs.len() as f64;
    let mut points = Vec::with_capacity(objs.len() * sample_points.len());
    for theta in sample_points {
        let grads = objs.iter().map(|o| o.gradient(theta)).collect::<Result<Vec<_>, _>>()?;
        let mut mean = Array1::<f64>::zeros(d);
        for g in &grads {
            mean += g;
        }
        mean /= n;
        let gnorm = norm(mean.as_slice().unwrap());
        for g in &grads {
            let dev = g.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            points.push((gnorm, dev));
        }
    }
    let env = fit_upper_envelope(&points);
    Ok(DissimilarityEstimate {
        ell_hat: 1.0 + env.slope,
        b_hat: env.intercept.max(f64::EPSILON),
        n_samples: points.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub n_points: usize,
    /// Largest `(lhs - rhs) / max(1, |lhs|, |rhs|)` over the points.
    pub max_violation: f64,
    pub violations: usize,
}

impl GapReport {
    pub const TOL: f64 = 1e-9;
}

/// Evaluates `||grad f||^2 <= 2 (L0 + 2 L1 ||grad f||) (f - f_min)` at each
/// point.
pub fn suboptimality_gap_check(
    obj: &LocalObjective,
    l0: f64,
    l1: f64,
    points: &[Vec<f64>],
) -> Result<GapReport, ObjectiveError> {
    let f_min = obj.known_minimum().ok_or(ObjectiveError::UnknownMinimum)?;
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0;
    for theta in points {
        let (f, g) = obj.eval(theta)?;
        let gn = norm(g.as_slice().unwrap());
        let lhs = gn * gn;
        let rhs = 2.0 * (l0 + 2.0 * l1 * gn) * (f - f_min);
        let rel = (lhs - rhs) / lhs.abs().max(rhs.abs()).max(1.0);
        if rel > GapReport::TOL {
            violations += 1;
        }
        max_violation = max_violation.max(rel);
    }
    Ok(GapReport {
        n_points: points.len(),
        max_violation,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseSample;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy_shard() -> Arc<Shard> {
        let samples = vec![
            SparseSample { label: 1.0, features: vec![(1, 0.5), (3, -1.0)] },
            SparseSample { label: 0.0, features: vec![(2, 2.0)] },
            SparseSample { label: 1.0, features: vec![(1, -0.3), (2, 0.7), (3, 1.2)] },
        ];
        Arc::new(Shard::new(samples, 3).unwrap())
    }

    #[test]
    fn power_norm_value_and_gradient() {
        let f = LocalObjective::power_norm(2, 1.0, 4.0, None).unwrap();
        let (v, g) = f.eval(&[1.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, array![4.0, 0.0]);
        let (v, g) = f.eval(&[0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, array![0.0, 0.0]);
    }

    #[test]
    fn logistic_gradient_at_zero() {
        for y in [0.0, 1.0] {
            let shard = Arc::new(Shard::new(vec![SparseSample { label: y, features: vec![(1, 2.0), (2, -1.0)] }], 2).unwrap());
            let f = LocalObjective::logistic_lq(shard, 0.0, 2.0).unwrap();
            let (v, g) = f.eval(&[0.0, 0.0]).unwrap();
            assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
            assert_eq!(g, array![(0.5 - y) * 2.0, (0.5 - y) * -1.0]);
        }
    }

    #[test]
    fn logistic_is_stable_for_huge_margins() {
        let shard = Arc::new(Shard::new(vec![SparseSample { label: 0.0, features: vec![(1, 1.0)] }], 1).unwrap());
        let f = LocalObjective::logistic_lq(shard, 0.0, 2.0).unwrap();
        let (v, g) = f.eval(&[1e4]).unwrap();
        assert_eq!(v, 1e4);
        assert_eq!(g[0], 1.0);
        let (v, g) = f.eval(&[-1e4]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn flipped_sign_convention_differs_from_bce() {
        let shard = toy_shard();
        let bce = LocalObjective::logistic_lq(shard.clone(), 0.0, 2.0).unwrap();
        let lit = LocalObjective::logistic_lq_with(shard, 0.0, 2.0, LossConvention::FlippedSign).unwrap();
        let theta = [0.3, -0.2, 0.1];
        assert!((bce.value(&theta).unwrap() - lit.value(&theta).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn errors() {
        let f = LocalObjective::power_norm(2, 1.0, 4.0, None).unwrap();
        assert!(matches!(f.eval(&[1.0]), Err(ObjectiveError::DimensionMismatch { .. })));
        assert!(matches!(f.eval(&[f64::NAN, 0.0]), Err(ObjectiveError::NonFiniteInput)));
        assert!(matches!(f.eval(&[1e200, 0.0]), Err(ObjectiveError::Overflow)));
        assert!(LocalObjective::power_norm(2, 1.0, 1.5, None).is_err());
    }

    #[test]
    fn minibatch_restricts_data_term() {
        let f = LocalObjective::logistic_lq(toy_shard(), 0.0, 2.0).unwrap();
        let theta = [0.1, 0.2, 0.3];
        let (full, _) = f.eval(&theta).unwrap();
        let parts: f64 = (0..3).map(|i| f.eval_batch(&theta, Some(&[i])).unwrap().0).sum();
        assert_abs_diff_eq!(full, parts / 3.0, epsilon = 1e-15);
        assert!(matches!(f.eval_batch(&theta, Some(&[5])), Err(ObjectiveError::BatchIndex(5))));
    }

    #[test]
    fn scaling_scales_value_and_gradient() {
        let f = LocalObjective::logistic_lq(toy_shard(), 0.01, 4.0).unwrap();
        let s = f.scaled(2.5);
        let theta = [0.4, -0.1, 0.9];
        let (v, g) = f.eval(&theta).unwrap();
        let (vs, gs) = s.eval(&theta).unwrap();
        assert_abs_diff_eq!(vs, 2.5 * v, epsilon = 1e-14);
        for i in 0..3 {
            assert_abs_diff_eq!(gs[i], 2.5 * g[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn quadratic_known_minimum() {
        let q = LocalObjective::quadratic(array![[2.0, 0.0], [0.0, 4.0]], array![-2.0, 4.0], 1.0).unwrap();
        // minimizer (1, -1): 0.5*(2 + 4) + (-2 - 4) + 1 = -2
        assert_abs_diff_eq!(q.known_minimum().unwrap(), -2.0, epsilon = 1e-14);
        let lin = LocalObjective::quadratic(Matrix::zeros((2, 2)), array![1.0, 0.0], 0.0).unwrap();
        assert_eq!(lin.known_minimum(), None);
    }

    #[test]
    fn global_smoothness_combination() {
        assert_eq!(combine_global_smoothness(&[(3.0, 2.0)], 1.0, 1.0).unwrap(), (5.0, 2.0));
        assert_eq!(combine_global_smoothness(&[(1.0, 0.5), (3.0, 1.5)], 2.0, 2.0).unwrap(), (4.0, 2.0));
        let (_, l1) = combine_global_smoothness(&[(1.0, 1e-300), (2.0, 1e-300)], 1.5, 1.0).unwrap();
        assert!(l1 < 1e-299);
        assert!(matches!(combine_global_smoothness(&[], 1.0, 1.0), Err(ObjectiveError::EmptyInput)));
    }

    #[test]
    fn ab_constants_values() {
        let (a, b) = ab_constants(1.0).unwrap();
        assert_abs_diff_eq!(a, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 1.718_281_828_459_045, epsilon = 1e-15);
        assert_eq!(ab_constants(1e-10).unwrap(), (1.0, 1.0));
        let (a, b) = ab_constants(1e-6).unwrap();
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-5);
        assert!(matches!(ab_constants(0.0), Err(ObjectiveError::NonPositiveC(_))));
        assert!(ab_constants(-1.0).is_err());
    }

    #[test]
    fn ab_constants_monotone_on_grid() {
        let grid: Vec<f64> = (1..=50).map(|k| 0.1 * k as f64).collect();
        let mut prev = (1.0, 1.0);
        for c in grid {
            let (a, b) = ab_constants(c).unwrap();
            assert!(a >= 1.0 && b >= 1.0);
            assert!(a > prev.0 && b > prev.1, "c = {c}");
            prev = (a, b);
        }
    }

    #[test]
    fn envelope_cases() {
        let flat = fit_upper_envelope(&[(1.0, 3.0), (2.0, 3.0), (5.0, 3.0)]);
        assert_eq!((flat.intercept, flat.slope), (3.0, 0.0));
        let line = fit_upper_envelope(&[(1.0, 2.0), (2.0, 3.0), (4.0, 5.0), (3.0, 1.0)]);
        assert_abs_diff_eq!(line.intercept, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(line.slope, 1.0, epsilon = 1e-12);
        let falling = fit_upper_envelope(&[(1.0, 5.0), (2.0, 3.0)]);
        assert_eq!((falling.intercept, falling.slope), (5.0, 0.0));
        let through_origin = fit_upper_envelope(&[(1.0, 1.0), (2.0, 3.0)]);
        assert_eq!(through_origin.intercept, 0.0);
        assert_abs_diff_eq!(through_origin.slope, 1.5, epsilon = 1e-15);
        let same_x = fit_upper_envelope(&[(2.0, 1.0), (2.0, 4.0)]);
        assert!(same_x.degenerate);
        assert_eq!((same_x.intercept, same_x.slope), (4.0, 0.0));
        for e in [flat, line, falling, through_origin, same_x] {
            assert!(e.max_residual <= 0.0);
        }
    }

    #[test]
    fn dissimilarity_of_identical_objectives() {
        let f = LocalObjective::isotropic_quadratic(2, 1.0);
        let pts: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, 1.0]).collect();
        let est = probe_dissimilarity(&[f.clone(), f], &pts).unwrap();
        assert_eq!(est.ell_hat, 1.0);
        assert_eq!(est.b_hat, f64::EPSILON);
    }

    #[test]
    fn suboptimality_gap_quadratic_tight() {
        let f = LocalObjective::isotropic_quadratic(1, 1.0);
        let rep = suboptimality_gap_check(&f, 1.0, 0.0, &[vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.max_violation, 0.0);
        let logistic = LocalObjective::logistic_lq(toy_shard(), 0.0, 2.0).unwrap();
        assert!(matches!(
            suboptimality_gap_check(&logistic, 1.0, 0.0, &[vec![0.0; 3]]),
            Err(ObjectiveError::UnknownMinimum)
        ));
    }
}
