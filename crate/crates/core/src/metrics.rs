//! Network-averaged quantities along a trajectory and their CSV sink.

use std::io::{self, Write};

use ndarray::Axis;
use rayon::prelude::*;
use thiserror::Error;

use crate::algo::{max_local_step, NetworkState};
use crate::graph::{Matrix, MixingPair, Vector};
use crate::objective::{LocalObjective, ObjectiveError};

pub const CSV_HEADER: &str =
    "k,loss_avg,grad_norm_avg,consensus_err_sq,tracking_err_sq,max_local_step,min_grad_so_far";
pub const LOCAL_LOSS_COLUMN: &str = "mean_local_loss";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed trajectory csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// One row of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub k: usize,
    /// `F(x_bar)` with `F` the average of the local objectives.
    pub loss_avg: f64,
    /// `||grad F(x_bar)||`.
    pub grad_norm_avg: f64,
    /// `||x - 1 x_bar^T||_F^2`.
    pub consensus_err_sq: f64,
    /// `||y - v y_bar^T||_F^2`.
    pub tracking_err_sq: f64,
    /// `max_i ||alpha_i y_i||` for the step taken from this iterate.
    pub max_local_step: f64,
    pub min_grad_so_far: f64,
    /// `(1/N) sum_i f_i(x_i)`; infinite if some local loss overflows, NaN
    /// when not requested.
    pub mean_local_loss: f64,
}

/// `(1/N) u^T x`.
pub fn averaged_iterate(x: &Matrix, u: &Vector) -> Result<Vector, MetricsError> {
    let n = x.nrows();
    if u.len() != n || n == 0 {
        return Err(MetricsError::DimensionMismatch(format!("x has {n} rows, u has {} entries", u.len())));
    }
    let mut out = Vector::zeros(x.ncols());
    for i in 0..n {
        out.scaled_add(u[i], &x.row(i));
    }
    out /= n as f64;
    Ok(out)
}

fn deviation_sq(z: &Matrix, weights: Option<&Vector>, center: &Vector) -> f64 {
    let mut s = 0.0;
    for (i, row) in z.rows().into_iter().enumerate() {
        let w = weights.map_or(1.0, |v| v[i]);
        for (a, c) in row.iter().zip(center.iter()) {
            let d = a - w * c;
            s += d * d;
        }
    }
    s
}

/// `||x - 1 x_bar^T||_F^2` with `x_bar = (1/N) u^T x`.
pub fn consensus_error(x: &Matrix, u: &Vector) -> Result<f64, MetricsError> {
    let xbar = averaged_iterate(x, u)?;
    Ok(deviation_sq(x, None, &xbar))
}

/// `||y - v y_bar^T||_F^2` with `y_bar = (1/N) 1^T y`.
pub fn tracking_error(y: &Matrix, v: &Vector) -> Result<f64, MetricsError> {
    let n = y.nrows();
    if v.len() != n || n == 0 {
        return Err(MetricsError::DimensionMismatch(format!("y has {n} rows, v has {} entries", v.len())));
    }
    let ybar = y.sum_axis(Axis(0)) / n as f64;
    Ok(deviation_sq(y, Some(v), &ybar))
}

/// `F(theta)` and `grad F(theta)` over all agents, always on the full data.
pub fn global_eval(objs: &[LocalObjective], theta: &[f64]) -> Result<(f64, Vector), ObjectiveError> {
    let parts: Vec<(f64, Vector)> = objs.par_iter().map(|o| o.eval(theta)).collect::<Result<_, _>>()?;
    let n = objs.len() as f64;
    let mut value = 0.0;
    let mut grad = Vector::zeros(theta.len());
    for (v, g) in parts {
        value += v;
        grad += &g;
    }
    grad /= n;
    Ok((value / n, grad))
}

/// Computes the metrics row for `state`. `c0` is the resolved threshold
/// (`inf` when not clipping) and `prev_min` the running minimum of the
/// gradient norm before this iterate.
pub fn record_step(
    state: &NetworkState,
    mixing: &MixingPair,
    objs: &[LocalObjective],
    alpha: f64,
    c0: f64,
    prev_min: f64,
    with_local_loss: bool,
) -> Result<TrajectoryRecord, ObjectiveError> {
    let shape_err = |e: MetricsError| ObjectiveError::InvalidParameter(e.to_string());
    let xbar = averaged_iterate(&state.x, mixing.u()).map_err(shape_err)?;
    let (loss_avg, grad) = global_eval(objs, xbar.as_slice().unwrap())?;
    let grad_norm_avg = grad.dot(&grad).sqrt();
    let mean_local_loss = if with_local_loss {
        let local: Vec<f64> = objs
            .par_iter()
            .enumerate()
            .map(|(i, o)| o.value(state.x.row(i).as_slice().unwrap()).unwrap_or(f64::INFINITY))
            .collect();
        local.iter().sum::<f64>() / objs.len() as f64
    } else {
        f64::NAN
    };
    Ok(TrajectoryRecord {
        k: state.k,
        loss_avg,
        grad_norm_avg,
        consensus_err_sq: consensus_error(&state.x, mixing.u()).map_err(shape_err)?,
        tracking_err_sq: tracking_error(&state.y, mixing.v()).map_err(shape_err)?,
        max_local_step: max_local_step(state, alpha, c0),
        min_grad_so_far: prev_min.min(grad_norm_avg),
        mean_local_loss,
    })
}

/// Sequential sink for trajectory rows.
pub trait Recorder {
    fn record(&mut self, rec: &TrajectoryRecord) -> io::Result<()>;

    /// Whether rows should carry `mean_local_loss` (one extra pass over the data).
    fn wants_local_loss(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone)]
pub struct VecRecorder {
    pub records: Vec<TrajectoryRecord>,
}

impl Recorder for VecRecorder {
    fn record(&mut self, rec: &TrajectoryRecord) -> io::Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Writes rows as CSV with 17 significant digits and LF endings.
pub struct CsvRecorder<W: Write> {
    out: W,
    with_local_loss: bool,
}

impl<W: Write> CsvRecorder<W> {
    pub fn new(mut out: W, with_local_loss: bool) -> io::Result<Self> {
        out.write_all(CSV_HEADER.as_bytes())?;
        if with_local_loss {
            write!(out, ",{LOCAL_LOSS_COLUMN}")?;
        }
        out.write_all(b"\n")?;
        Ok(Self { out, with_local_loss })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One CSV row without the trailing newline.
pub fn csv_row(rec: &TrajectoryRecord, with_local_loss: bool) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        rec.k,
        format_float(rec.loss_avg),
        format_float(rec.grad_norm_avg),
        format_float(rec.consensus_err_sq),
        format_float(rec.tracking_err_sq),
        format_float(rec.max_local_step),
        format_float(rec.min_grad_so_far),
    );
    if with_local_loss {
        row.push(',');
        row.push_str(&format_float(rec.mean_local_loss));
    }
    row
}

impl<W: Write> Recorder for CsvRecorder<W> {
    fn record(&mut self, rec: &TrajectoryRecord) -> io::Result<()> {
        self.out.write_all(csv_row(rec, self.with_local_loss).as_bytes())?;
        self.out.write_all(b"\n")
    }

    fn wants_local_loss(&self) -> bool {
        self.with_local_loss
    }
}

/// Reads back a trajectory CSV written by [`CsvRecorder`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRecord>, MetricsError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let with_local = match header {
        h if h == CSV_HEADER => false,
        h if h.strip_prefix(CSV_HEADER) == Some(&format!(",{LOCAL_LOSS_COLUMN}")) => true,
        _ => {
            return Err(MetricsError::Csv {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            })
        }
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let err = |reason: String| MetricsError::Csv { line: i + 2, reason };
            let fields: Vec<&str> = line.split(',').collect();
            let want = if with_local { 8 } else { 7 };
            if fields.len() != want {
                return Err(err(format!("expected {want} fields, found {}", fields.len())));
            }
            let f = |j: usize| fields[j].parse::<f64>().map_err(|e| err(format!("field {j}: {e}")));
            Ok(TrajectoryRecord {
                k: fields[0].parse().map_err(|e| err(format!("k: {e}")))?,
                loss_avg: f(1)?,
                grad_norm_avg: f(2)?,
                consensus_err_sq: f(3)?,
                tracking_err_sq: f(4)?,
                max_local_step: f(5)?,
                min_grad_so_far: f(6)?,
                mean_local_loss: if with_local { f(7)? } else { f64::NAN },
            })
        })
        .collect()
}
