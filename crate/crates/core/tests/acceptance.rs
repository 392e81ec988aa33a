//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use cgt_core::algo::{self, clipped_step_check, AlgoConfig, Algorithm, ClipThreshold, Engine, StopReason};
use cgt_core::data::{self, Shard, A9A_DIM, A9A_SAMPLES};
use cgt_core::experiment::{self, ExperimentConfig, RunArtifacts};
use cgt_core::graph::{build_mixing_pair, GraphSpec, Matrix, MixingPair, Vector};
use cgt_core::objective::{LocalObjective, LossConvention};
use cgt_core::rng;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// Criterion 1
const CONSERVATION_REL_TOL: f64 = 1e-9;
const CONSERVATION_ITERS: usize = 500;
// Criterion 2
const EIGVEC_RESIDUAL_PER_AGENT: f64 = 1e-10;
const SPECTRAL_ORACLE_TOL: f64 = 1e-6;
const N_GRAPHS: usize = 100;
// Criterion 3
const FD_REL_TOL: f64 = 1e-5;
/// Central-difference step is `FD_STEP_SCALE * (1 + ||theta||)`.
const FD_STEP_SCALE: f64 = 1e-5;
const FD_POINTS: usize = 100;
// Criterion 4
const CLIP_STEP_TUPLES: usize = 100_000;
// Criterion 5
const CGT_GRAD_DROP: f64 = 10.0;
const GT_EXCURSION: f64 = 1e3;
const GT_WINDOW: usize = 200;
// Criterion 6
const STD_RATIO: f64 = 2.0;
const STD_WINDOW: usize = 500;
// Criterion 7
const RATE_BUDGETS: [usize; 4] = [100, 400, 1600, 6400];
const RATE_MAX_SLOPE: f64 = -0.4;
// Criterion 8
const CONSENSUS_FACTOR: f64 = 1e3;
const HALVING_REDUCTION: f64 = 2.0;
// Criterion 9
const REDUCTION_STEPS: usize = 100;
const REDUCTION_TOL: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> (ExperimentConfig, PathBuf) {
    experiment::load_config(&configs_dir().join(name)).expect("shipped config loads")
}

fn run_config(cfg: &ExperimentConfig, base: &Path) -> RunArtifacts {
    let prep = experiment::prepare(cfg, base).expect("prepare");
    experiment::execute(&prep, 0).expect("run")
}

fn a9a_run(cell: &'static OnceLock<RunArtifacts>, name: &str, alpha: Option<f64>) -> &'static RunArtifacts {
    cell.get_or_init(|| {
        let (mut cfg, base) = load(name);
        if let Some(a) = alpha {
            cfg.algorithm.alpha = a;
        }
        run_config(&cfg, &base)
    })
}

static CGT: OnceLock<RunArtifacts> = OnceLock::new();
static GT: OnceLock<RunArtifacts> = OnceLock::new();
static DGD: OnceLock<RunArtifacts> = OnceLock::new();
static CGT_HALF: OnceLock<RunArtifacts> = OnceLock::new();

fn normal(r: &mut rng::ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn gaussian_matrix(seed: u64, n: usize, d: usize, scale: f64) -> Matrix {
    let mut r = rng::seeded(seed, 100);
    Matrix::from_shape_fn((n, d), |_| scale * normal(&mut r))
}

fn logistic_agents(n_samples: usize, n_agents: usize, seed: u64) -> Vec<LocalObjective> {
    let ds = data::synthetic_a9a_like(n_samples, seed);
    let shards = data::partition(&ds.samples, ds.dim, n_agents, data::PartitionRule::LabelSkewed, false, seed).unwrap();
    let lambda = [5e-4, 1e-3, 2e-3, 1e-3, 1e-3];
    let p = [4.0, 5.0, 6.0, 5.0, 4.0];
    shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| LocalObjective::logistic_lq(Arc::new(s), lambda[i % 5], p[i % 5]).unwrap())
        .collect()
}

fn c1_tracking_conservation() -> Outcome {
    let mixing = build_mixing_pair(&GraphSpec::random(5, 0.4, 7)).unwrap();
    let objs = logistic_agents(2500, 5, 7);
    let cfg = AlgoConfig::new(Algorithm::Cgt, 0.05, ClipThreshold::Finite(5.0), CONSERVATION_ITERS);
    let mut engine = Engine::new(&mixing, &objs, &cfg).unwrap();
    let mut state = engine.init(gaussian_matrix(1, 5, A9A_DIM, 1.0)).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..=CONSERVATION_ITERS {
        let (gap, total) = algo::tracking_conservation_gap(&state, &objs).unwrap();
        worst = worst.max(gap / (CONSERVATION_REL_TOL * (1.0 + total)));
        if state.k == CONSERVATION_ITERS {
            break;
        }
        state = engine.step(&state).unwrap();
    }
    Outcome::new(
        worst <= 1.0,
        format!("max gap / (1e-9 (1 + ||sum grad||)) = {worst:.3e} over k = 0..={CONSERVATION_ITERS}"),
    )
}

/// Second-largest eigenvalue modulus of the undeflated matrix: deflation
/// removes the Perron eigenvalue 1 and leaves the rest of the spectrum.
fn oracle_deflated_radius(m: &Matrix) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = dm.complex_eigenvalues();
    let perron = (0..n)
        .min_by(|&i, &j| (eig[i] - 1.0).norm().total_cmp(&(eig[j] - 1.0).norm()))
        .unwrap();
    (0..n).filter(|&i| i != perron).map(|i| eig[i].norm()).fold(0.0, f64::max)
}

fn c2_spectral_suite() -> Outcome {
    let mut r = rng::seeded(2, 101);
    let mut worst_u = 0.0f64;
    let mut worst_v = 0.0f64;
    let mut worst_oracle = 0.0f64;
    let mut max_rho = 0.0f64;
    let mut failures = Vec::new();
    for g in 0..N_GRAPHS {
        let n = 2 + g % 19;
        let spec = if g % 5 == 0 {
            GraphSpec::ring(n)
        } else {
            GraphSpec::random(n, r.random_range(0.1..0.9), 1000 + g as u64)
        };
        let pair: MixingPair = match build_mixing_pair(&spec) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("graph {g}: {e}"));
                continue;
            }
        };
        let (u, v) = (pair.u(), pair.v());
        let res_u = (pair.r().t().dot(u) - u).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let res_v = (pair.c().dot(v) - v).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst_u = worst_u.max(res_u / (EIGVEC_RESIDUAL_PER_AGENT * n as f64));
        worst_v = worst_v.max(res_v / (EIGVEC_RESIDUAL_PER_AGENT * n as f64));
        let rho_r = oracle_deflated_radius(pair.r());
        let rho_c = oracle_deflated_radius(pair.c());
        worst_oracle = worst_oracle.max((rho_r - pair.rho_r()).abs()).max((rho_c - pair.rho_c()).abs());
        max_rho = max_rho.max(pair.rho_r()).max(pair.rho_c()).max(rho_r).max(rho_c);
        if !(u.dot(v) > 0.0) {
            failures.push(format!("graph {g}: u^T v <= 0"));
        }
    }
    let passed = failures.is_empty() && worst_u <= 1.0 && worst_v <= 1.0 && worst_oracle <= SPECTRAL_ORACLE_TOL && max_rho < 1.0;
    Outcome::new(
        passed,
        format!(
            "{N_GRAPHS} graphs: residual/(1e-10 N) u {worst_u:.2e}, v {worst_v:.2e}; |rho - oracle| <= {worst_oracle:.2e}; max rho {max_rho:.6}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}

fn fd_gradient(obj: &LocalObjective, theta: &[f64]) -> Vec<f64> {
    let h = FD_STEP_SCALE * (1.0 + norm(theta));
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let orig = t[j];
            t[j] = orig + h;
            let fp = obj.value(&t).unwrap();
            t[j] = orig - h;
            let fm = obj.value(&t).unwrap();
            t[j] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn c3_gradient_correctness() -> Outcome {
    let d = 8;
    let ds = data::synthetic_a9a_like(40, 3);
    // Keep the logistic dimension small so 100 points x 2d evaluations stay cheap.
    let samples: Vec<_> = ds
        .samples
        .iter()
        .map(|s| data::SparseSample {
            label: s.label,
            features: s.features.iter().filter(|(i, _)| (*i as usize) <= d).copied().collect(),
        })
        .collect();
    let shard = Arc::new(Shard::new(samples, d).unwrap());
    let mut r = rng::seeded(3, 102);
    let center = Vector::from_shape_fn(d, |_| r.random_range(-1.0..1.0));
    let a = gaussian_matrix(3, d, d, 1.0);
    let spd = a.t().dot(&a) + Matrix::eye(d);
    let b = Vector::from_shape_fn(d, |_| r.random_range(-1.0..1.0));

    let mut kinds: Vec<(String, LocalObjective)> = Vec::new();
    for p in [4.0, 5.0, 6.0] {
        kinds.push((format!("logistic_lq p={p}"), LocalObjective::logistic_lq(shard.clone(), 1e-2, p).unwrap()));
        kinds.push((format!("power_norm p={p}"), LocalObjective::power_norm(d, 0.7, p, None).unwrap()));
        kinds.push((
            format!("power_norm centered p={p}"),
            LocalObjective::power_norm(d, 0.7, p, Some(center.clone())).unwrap(),
        ));
    }
    kinds.push((
        "logistic_lq flipped sign".into(),
        LocalObjective::logistic_lq_with(shard.clone(), 1e-2, 4.0, LossConvention::FlippedSign).unwrap(),
    ));
    kinds.push(("quadratic".into(), LocalObjective::quadratic(spd, b, 0.5).unwrap()));
    let composite = LocalObjective::composite(
        d,
        vec![
            LocalObjective::logistic_lq(shard.clone(), 0.0, 2.0).unwrap(),
            LocalObjective::power_norm(d, 1e-3, 5.0, Some(center.clone())).unwrap(),
        ],
    )
    .unwrap();
    kinds.push(("scaled composite".into(), composite.scaled(3.0)));
    kinds.push(("custom_composite".into(), composite));

    let mut worst = (0.0f64, String::new());
    for (name, obj) in &kinds {
        let mut pr = rng::seeded(3, 103);
        for _ in 0..FD_POINTS {
            let scale = pr.random_range(0.2..2.0) / (d as f64).sqrt();
            let theta: Vec<f64> = (0..d).map(|_| scale * normal(&mut pr)).collect();
            let g = obj.gradient(&theta).unwrap();
            let fd = fd_gradient(obj, &theta);
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(g.as_slice().unwrap()).max(1.0);
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    Outcome::new(
        worst.0 <= FD_REL_TOL,
        format!(
            "{} objective kinds x {FD_POINTS} points; worst ||g - fd|| / max(1, ||g||) = {:.2e} ({})",
            kinds.len(),
            worst.0,
            worst.1
        ),
    )
}

fn c4_clipped_step_fuzz() -> Outcome {
    let mut r = rng::seeded(4, 104);
    let mut regimes = [0usize; 4];
    let mut violations = 0usize;
    let d = 4;
    for t in 0..CLIP_STEP_TUPLES {
        let regime = t % 4;
        let c0 = r.random_range(0.1..10.0);
        let alpha = r.random_range(1e-3..1.0);
        let n = r.random_range(2..10);
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let v: Vec<f64> = raw.iter().map(|x| x * n as f64 / s).collect();
        let v_i = v[0];
        let v_norm = norm(&v);
        let dir = |r: &mut rng::ChaCha8Rng| {
            let x: Vec<f64> = (0..d).map(|_| normal(r)).collect();
            let nx = norm(&x);
            x.into_iter().map(|e| e / nx).collect::<Vec<f64>>()
        };
        // regime bit 0: ||y_i|| > c0; bit 1: v_i ||grad F|| > c0
        let y_norm = if regime & 1 == 1 { c0 * r.random_range(1.01..50.0) } else { c0 * r.random_range(0.0..1.0) };
        let g_norm = if regime & 2 == 2 {
            c0 * r.random_range(1.01..50.0) / v_i
        } else {
            c0 * r.random_range(0.0..1.0) / v_i
        };
        let y: Vec<f64> = dir(&mut r).into_iter().map(|e| e * y_norm).collect();
        let g: Vec<f64> = dir(&mut r).into_iter().map(|e| e * g_norm).collect();
        let rep = clipped_step_check(&y, v_i, &g, alpha, c0, v_norm);
        let yn = norm(&y);
        let observed = (yn > c0) as usize | (((v_i * norm(&g)) > c0) as usize) << 1;
        regimes[observed] += 1;
        if !rep.holds() {
            violations += 1;
        }
    }
    Outcome::new(
        violations == 0 && regimes.iter().all(|&c| c > 0),
        format!("{CLIP_STEP_TUPLES} tuples, regimes {regimes:?}, violations {violations}"),
    )
}

fn a9a_fixture_note() -> String {
    let path = configs_dir().join("../data/a9a");
    if path.exists() {
        match data::load_libsvm(&path, None) {
            Ok(ds) => format!(
                "a9a file: {} samples, dim {} (expected {A9A_SAMPLES}, {A9A_DIM})",
                ds.samples.len(),
                ds.dim
            ),
            Err(e) => format!("a9a file unreadable: {e}"),
        }
    } else {
        "a9a file absent, synthetic stand-in used".into()
    }
}

fn a9a_fixture_ok() -> bool {
    let path = configs_dir().join("../data/a9a");
    !path.exists() || data::load_libsvm(&path, None).is_ok_and(|ds| ds.samples.len() == A9A_SAMPLES && ds.dim <= A9A_DIM)
}

fn c5_benchmark_reproduction() -> Outcome {
    let cgt = a9a_run(&CGT, "a9a_cgt.toml", None);
    let gt = a9a_run(&GT, "a9a_gt.toml", None);
    let first = &cgt.records[0];
    let last = cgt.records.last().unwrap();
    let peak = cgt.records.iter().map(|r| r.grad_norm_avg).fold(0.0, f64::max);
    let cgt_ok = last.k == 2000 && last.loss_avg < first.loss_avg && peak / last.grad_norm_avg >= CGT_GRAD_DROP;
    let g0 = gt.records[0].grad_norm_avg;
    let excursion = gt
        .records
        .iter()
        .take_while(|r| r.k <= GT_WINDOW)
        .map(|r| r.grad_norm_avg)
        .fold(0.0, f64::max);
    let gt_diverged = matches!(gt.stop, StopReason::NonFiniteState { k } if k <= GT_WINDOW);
    let gt_ok = gt_diverged || excursion >= GT_EXCURSION * g0;
    Outcome::new(
        cgt_ok && gt_ok && a9a_fixture_ok(),
        format!(
            "CGT loss {:.4} -> {:.4} at k={}, grad peak/final {:.1}; GT stop '{}', max grad in first {GT_WINDOW} = {:.2e} x initial; {}",
            first.loss_avg,
            last.loss_avg,
            last.k,
            peak / last.grad_norm_avg,
            gt.stop,
            excursion / g0,
            a9a_fixture_note()
        ),
    )
}

fn c6_dgd_clip_contrast() -> Outcome {
    let cgt = a9a_run(&CGT, "a9a_cgt.toml", None);
    let dgd = a9a_run(&DGD, "a9a_dgd_clip.toml", None);
    let tail = |a: &RunArtifacts| -> Vec<f64> {
        a.records[a.records.len() - STD_WINDOW..].iter().map(|r| r.grad_norm_avg).collect()
    };
    let (sc, sd) = (std_dev(&tail(cgt)), std_dev(&tail(dgd)));
    let (lc, ld) = (cgt.records.last().unwrap().loss_avg, dgd.records.last().unwrap().loss_avg);
    Outcome::new(
        lc <= ld && sd >= STD_RATIO * sc,
        format!("final loss CGT {lc:.6} vs DGD-clip {ld:.6}; grad-norm std over last {STD_WINDOW}: DGD-clip/CGT = {:.3}", sd / sc),
    )
}

fn c7_rate_scaling() -> Outcome {
    let (cfg, base) = load("rate_power_norm.toml");
    let (report, _) = experiment::rate_study(&cfg, &base, &RATE_BUDGETS).expect("rate study");
    let decreasing = report.points.windows(2).all(|w| w[1].min_grad < w[0].min_grad);
    let mins: Vec<String> = report.points.iter().map(|p| format!("K={}: {:.3e}", p.k, p.min_grad)).collect();
    Outcome::new(
        decreasing && report.slope <= RATE_MAX_SLOPE,
        format!("{}; slope {:.3}", mins.join(", "), report.slope),
    )
}

fn late_consensus_max(a: &RunArtifacts) -> f64 {
    let k_max = a.records.last().unwrap().k;
    a.records
        .iter()
        .filter(|r| 2 * r.k >= k_max)
        .map(|r| r.consensus_err_sq)
        .fold(0.0, f64::max)
}

fn c8_consensus_boundedness() -> Outcome {
    let (cfg, _) = load("a9a_cgt.toml");
    let alpha = cfg.algorithm.alpha;
    let c0 = match cfg.algorithm.c0 {
        ClipThreshold::Finite(c) => c,
        _ => f64::NAN,
    };
    let full = a9a_run(&CGT, "a9a_cgt.toml", None);
    let half = a9a_run(&CGT_HALF, "a9a_cgt.toml", Some(alpha / 2.0));
    let (m_full, m_half) = (late_consensus_max(full), late_consensus_max(half));
    let bound = CONSENSUS_FACTOR * (alpha * c0).powi(2);
    Outcome::new(
        m_full <= bound && m_full >= HALVING_REDUCTION * m_half,
        format!(
            "max_(k>=K/2) consensus_err_sq {m_full:.3e} <= {bound:.3e}; with alpha halved {m_half:.3e} (reduction {:.2}x)",
            m_full / m_half
        ),
    )
}

fn c9_centralized_reduction() -> Outcome {
    let mixing = MixingPair::single();
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let d = 6;
        let a = gaussian_matrix(90 + s, d, d, 1.0);
        let h = a.t().dot(&a) / d as f64 + Matrix::eye(d) * 0.1;
        let b = gaussian_matrix(190 + s, 1, d, 3.0).row(0).to_owned();
        let obj = LocalObjective::quadratic(h.clone(), b.clone(), 0.0).unwrap();
        let x0 = gaussian_matrix(290 + s, 1, d, 5.0);
        let (alpha, c0) = (0.2, 1.0);
        let cfg = AlgoConfig::new(Algorithm::Cgt, alpha, ClipThreshold::Finite(c0), REDUCTION_STEPS);
        let objs = [obj];
        let mut engine = Engine::new(&mixing, &objs, &cfg).unwrap();
        let mut state = engine.init(x0.clone()).unwrap();
        let mut x = x0.row(0).to_owned();
        for _ in 0..REDUCTION_STEPS {
            state = engine.step(&state).unwrap();
            let g = h.dot(&x) + &b;
            let gn = norm(g.as_slice().unwrap());
            let step = if gn <= c0 { alpha } else { alpha * c0 / gn };
            x = &x - &(g * step);
            for (xi, si) in x.iter().zip(state.x.row(0)) {
                worst = worst.max((xi - si).abs() / xi.abs().max(1.0));
            }
        }
    }
    Outcome::new(
        worst <= REDUCTION_TOL,
        format!("10 seeded quadratics x {REDUCTION_STEPS} steps; max |x_cgt - x_gd| / max(1, |x|) = {worst:.2e}"),
    )
}

fn c10_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["a9a_cgt.toml", "a9a_dgd_clip.toml", "rate_power_norm.toml"] {
        let (mut cfg, base) = load(name);
        cfg.algorithm.max_iters = 60;
        cfg.output = dir.path().join(name.trim_end_matches(".toml")).display().to_string();
        let one = experiment::with_threads(1, || run_config(&cfg, &base));
        let four = experiment::with_threads(4, || run_config(&cfg, &base));
        one.write().unwrap();
        let meta_path = dir.path().join(format!("{}.meta", name.trim_end_matches(".toml")));
        let (from_meta, meta_base) = experiment::load_config(&meta_path).unwrap();
        let again = run_config(&from_meta, &meta_base);
        let same = one.csv == four.csv && one.meta == four.meta && one.csv == again.csv && one.meta == again.meta;
        ok &= same;
        details.push(format!("{name}: {}", if same { "identical" } else { "DIFFERENT" }));
    }
    Outcome::new(ok, format!("1 vs 4 threads and re-run from .meta: {}", details.join(", ")))
}

type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "tracking conservation", 10, c1_tracking_conservation),
        (2, "eigenvector and spectral suite", 30, c2_spectral_suite),
        (3, "gradient correctness", 10, c3_gradient_correctness),
        (4, "clipped stepsize inequality fuzz", 5, c4_clipped_step_fuzz),
        (5, "benchmark qualitative reproduction", 300, c5_benchmark_reproduction),
        (6, "DGD-clip contrast", 300, c6_dgd_clip_contrast),
        (7, "rate scaling", 120, c7_rate_scaling),
        (8, "consensus error boundedness", 600, c8_consensus_boundedness),
        (9, "centralized reduction", 1, c9_centralized_reduction),
        (10, "reproducibility", 60, c10_reproducibility),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Outcome::new(false, format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let passed = outcome.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {} ({:.2} s, budget {budget} s)",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
