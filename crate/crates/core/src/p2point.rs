//! Point-to-point registration: classical ICP, Anderson-accelerated ICP and
//! the Welsch-robust variant with a decreasing kernel scale.

use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use rayon::prelude::*;

use crate::accel::{AaWindow, DEFAULT_WINDOW};
use crate::bench::report::{EnergyTrace, Method, RegistrationReport, StepKind, TraceRecord};
use crate::error::{Error, Result};
use crate::lie::{se3_exp, se3_log, RigidTransform, Twist};
use crate::spatial::{
    lower_median, median_neighbor_distance, Neighbor, NnIndex, PointCloud, SPACING_NEIGHBORS,
};

/// Relative threshold on total weight and on the cross-covariance rank.
const DEGENERACY_TOL: f64 = 1e-12;

/// Kernel scale: derived from the data or given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NuSetting {
    #[default]
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct P2PointConfig {
    /// Anderson window size.
    pub m: usize,
    pub max_iters_per_nu: usize,
    pub trans_eps: f64,
    pub nu_max: NuSetting,
    pub nu_min: NuSetting,
    pub initial_transform: RigidTransform,
}

impl Default for P2PointConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_WINDOW,
            max_iters_per_nu: 1000,
            trans_eps: 1e-5,
            nu_max: NuSetting::Auto,
            nu_min: NuSetting::Auto,
            initial_transform: RigidTransform::identity(),
        }
    }
}

impl P2PointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters_per_nu == 0 {
            return Err(Error::InvalidParameter("max_iters_per_nu must be positive".into()));
        }
        if !(self.trans_eps > 0.0) {
            return Err(Error::InvalidParameter("trans_eps must be positive".into()));
        }
        validate_nu_pair(self.nu_max, self.nu_min)
    }
}

pub(crate) fn validate_nu_pair(nu_max: NuSetting, nu_min: NuSetting) -> Result<()> {
    for (name, nu) in [("nu_max", nu_max), ("nu_min", nu_min)] {
        if let NuSetting::Value(v) = nu {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
    }
    if let (NuSetting::Value(hi), NuSetting::Value(lo)) = (nu_max, nu_min) {
        if lo > hi {
            return Err(Error::InvalidParameter(format!(
                "nu_min ({lo}) exceeds nu_max ({hi})"
            )));
        }
    }
    Ok(())
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")))
    }
}

/// Welsch function `1 - exp(-x^2 / (2 nu^2))`.
pub fn welsch(x: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    Ok(-(-x * x / (2.0 * nu * nu)).exp_m1())
}

/// Quadratic majorizer of [`welsch`] touching it at `y`.
pub fn welsch_surrogate(x: f64, y: f64, nu: f64) -> Result<f64> {
    let psi_y = welsch(y, nu)?;
    let two_nu2 = 2.0 * nu * nu;
    Ok(psi_y + (x * x - y * y) / two_nu2 * (-y * y / two_nu2).exp())
}

/// Alignment weight for a residual of length `x`; always in `(0, 1]`.
pub fn welsch_weight(x: f64, nu: f64) -> f64 {
    (-x * x / (2.0 * nu * nu)).exp().max(f64::MIN_POSITIVE)
}

fn residuals(src: &PointCloud, transform: &RigidTransform, closest: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if closest.len() != src.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: closest.len(),
        });
    }
    Ok(src
        .points()
        .iter()
        .zip(closest)
        .map(|(p, q)| (transform.apply(p) - q).norm())
        .collect())
}

/// `sum_i psi_nu(|T p_i - q_i|)`.
pub fn energy_p2point(
    src: &PointCloud,
    transform: &RigidTransform,
    closest: &[Vector3<f64>],
    nu: f64,
) -> Result<f64> {
    check_nu(nu)?;
    let d = residuals(src, transform, closest)?;
    Ok(welsch_energy(&d, nu))
}

/// `sum_i |T p_i - q_i|^2`.
pub fn energy_l2(src: &PointCloud, transform: &RigidTransform, closest: &[Vector3<f64>]) -> Result<f64> {
    let d = residuals(src, transform, closest)?;
    Ok(l2_energy(&d))
}

fn welsch_energy(dists: &[f64], nu: f64) -> f64 {
    let two_nu2 = 2.0 * nu * nu;
    dists.iter().map(|d| -(-d * d / two_nu2).exp_m1()).sum()
}

fn l2_energy(dists: &[f64]) -> f64 {
    dists.iter().map(|d| d * d).sum()
}

/// Closed-form minimizer of `sum_i w_i |R p_i + t - q_i|^2` over rigid motions.
pub fn weighted_alignment(
    src: &[Vector3<f64>],
    tgt: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if tgt.len() != src.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: tgt.len(),
        });
    }
    if weights.len() != src.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: weights.len(),
        });
    }
    if src.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParameter(format!("weight {w} is not a finite nonnegative number")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > DEGENERACY_TOL * src.len() as f64) {
        return Err(Error::Degenerate(format!("total alignment weight {total:e} is negligible")));
    }
    let mut p_bar = Vector3::zeros();
    let mut q_bar = Vector3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        p_bar += p * *w;
        q_bar += q * *w;
    }
    p_bar /= total;
    q_bar /= total;

    let mut h = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        h += (p - p_bar) * (q - q_bar).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let (smax, smid) = {
        let mut v = [s[0], s[1], s[2]];
        v.sort_by(|a, b| b.total_cmp(a));
        (v[0], v[1])
    };
    if !(smax > 0.0) || smid <= DEGENERACY_TOL * smax {
        return Err(Error::Degenerate(
            "cross-covariance is rank deficient (collinear or coincident points)".into(),
        ));
    }
    let u = svd.u.unwrap();
    let mut v = svd.v_t.unwrap().transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let imin = s.imin();
        v.column_mut(imin).neg_mut();
    }
    let r = v * u.transpose();
    Ok(RigidTransform::new(r, q_bar - r * p_bar))
}

/// Nearest target point for each transformed source point.
pub(crate) fn closest_points(
    index: &NnIndex,
    src: &[Vector3<f64>],
    t: &RigidTransform,
) -> Vec<Neighbor> {
    src.par_iter().map(|p| index.nearest(&t.apply(p))).collect()
}

/// Three times the median initial closest-point distance.
pub fn compute_nu_max_p2p(src: &PointCloud, tgt: &PointCloud, init: &RigidTransform) -> Result<f64> {
    src.ensure_non_empty()?;
    let index = NnIndex::build(tgt)?;
    let mut d: Vec<f64> = closest_points(&index, src.points(), init)
        .iter()
        .map(|n| n.distance)
        .collect();
    Ok(3.0 * lower_median(&mut d).unwrap())
}

/// Median target spacing divided by `3 sqrt(3)`.
pub fn compute_nu_min_p2p(tgt: &PointCloud) -> Result<f64> {
    let e = median_neighbor_distance(tgt, SPACING_NEIGHBORS)?;
    Ok(e / (3.0 * 3f64.sqrt()))
}

pub(crate) fn twist_to_dvec(xi: &Twist) -> DVector<f64> {
    DVector::from_column_slice(xi.to_vector().as_slice())
}

pub(crate) fn dvec_to_twist(v: &DVector<f64>) -> Twist {
    Twist::from_vector(&Vector6::from_column_slice(v.as_slice()))
}

/// Resolves the kernel-scale bounds. Auto upper bounds never fall below the
/// lower bound.
pub(crate) fn resolve_nu(
    nu_max: NuSetting,
    nu_min: NuSetting,
    auto_max: impl FnOnce() -> Result<f64>,
    auto_min: impl FnOnce() -> Result<f64>,
    notes: &mut Vec<String>,
) -> Result<(f64, f64)> {
    let lo = match nu_min {
        NuSetting::Value(v) => v,
        NuSetting::Auto => auto_min()?,
    };
    if !(lo > 0.0) || !lo.is_finite() {
        return Err(Error::Degenerate(format!(
            "lower kernel scale is {lo}; the target has no measurable point spacing"
        )));
    }
    let hi = match nu_max {
        NuSetting::Value(v) => v,
        NuSetting::Auto => {
            let v = auto_max()?;
            if v < lo {
                notes.push(format!("auto nu_max {v:e} raised to nu_min {lo:e}"));
                lo
            } else {
                v
            }
        }
    };
    if lo > hi {
        notes.push(format!("nu_min {lo:e} exceeds nu_max {hi:e}; using a single stage at nu_max"));
        return Ok((hi, hi));
    }
    Ok((hi, lo))
}

/// The halving schedule `nu_max, nu_max/2, ...` clamped at and ending with `nu_min`.
pub fn nu_schedule(nu_max: f64, nu_min: f64) -> Vec<f64> {
    let mut out = vec![nu_max];
    let mut nu = nu_max;
    while nu != nu_min {
        nu = (nu / 2.0).max(nu_min);
        out.push(nu);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kernel {
    L2,
    Welsch(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ConvergenceNorm {
    /// `|T - T'|_F < eps`.
    Frobenius,
    /// `|T - T'|_F^2 < eps`.
    SquaredFrobenius,
}

impl ConvergenceNorm {
    fn measure(&self, a: &RigidTransform, b: &RigidTransform) -> f64 {
        let d = a.frobenius_distance(b);
        match self {
            ConvergenceNorm::Frobenius => d,
            ConvergenceNorm::SquaredFrobenius => d * d,
        }
    }

    fn describe(&self, eps: f64) -> String {
        match self {
            ConvergenceNorm::Frobenius => format!("||T - T'||_F < {eps:e}"),
            ConvergenceNorm::SquaredFrobenius => format!("||T - T'||_F^2 < {eps:e}"),
        }
    }
}

struct Problem<'a> {
    src: &'a [Vector3<f64>],
    index: NnIndex,
}

struct State {
    t: RigidTransform,
    nbrs: Vec<Neighbor>,
}

impl Problem<'_> {
    fn state(&self, t: RigidTransform) -> State {
        let nbrs = closest_points(&self.index, self.src, &t);
        State { t, nbrs }
    }

    fn energy(&self, kernel: Kernel, s: &State) -> f64 {
        let d: Vec<f64> = s.nbrs.iter().map(|n| n.distance).collect();
        match kernel {
            Kernel::L2 => l2_energy(&d),
            Kernel::Welsch(nu) => welsch_energy(&d, nu),
        }
    }

    fn align(&self, kernel: Kernel, s: &State) -> Result<RigidTransform> {
        let q: Vec<Vector3<f64>> = s.nbrs.iter().map(|n| n.point).collect();
        let w: Vec<f64> = match kernel {
            Kernel::L2 => vec![1.0; q.len()],
            Kernel::Welsch(nu) => s.nbrs.iter().map(|n| welsch_weight(n.distance, nu)).collect(),
        };
        debug_assert!(w.iter().all(|w| *w > 0.0 && *w <= 1.0));
        weighted_alignment(self.src, &q, &w)
    }
}

struct StageOpts {
    stage: usize,
    kernel: Kernel,
    accelerate: bool,
    max_iters: usize,
    eps: f64,
    norm: ConvergenceNorm,
}

struct StageResult {
    state: State,
    iterations: usize,
    degenerate: Option<Error>,
}

/// One fixed-kernel stage of the accelerated MM loop.
fn run_stage(
    prob: &Problem<'_>,
    start: State,
    opts: &StageOpts,
    window: &mut AaWindow,
    trace: &mut EnergyTrace,
    notes: &mut Vec<String>,
    clock: &Instant,
) -> Result<StageResult> {
    window.reset();
    let nu = match opts.kernel {
        Kernel::L2 => None,
        Kernel::Welsch(nu) => Some(nu),
    };
    let mut t_plain = match prob.align(opts.kernel, &start) {
        Ok(t) => t,
        Err(e @ Error::Degenerate(_)) => {
            return Ok(StageResult {
                state: start,
                iterations: 0,
                degenerate: Some(e),
            })
        }
        Err(e) => return Err(e),
    };
    if opts.accelerate {
        window.push_and_accelerate(
            twist_to_dvec(&se3_log(&start.t)?),
            twist_to_dvec(&se3_log(&t_plain)?),
        )?;
    }
    let mut current = prob.state(t_plain);
    let mut step = StepKind::Plain;
    let mut accepted: Option<State> = None;
    let mut e_prev = f64::INFINITY;
    let mut iter = 1;
    let mut degenerate = None;

    while iter <= opts.max_iters {
        let mut e = prob.energy(opts.kernel, &current);
        if e >= e_prev && step == StepKind::Aa {
            current = prob.state(t_plain);
            e = prob.energy(opts.kernel, &current);
            step = StepKind::Plain;
        }
        if e > e_prev {
            // Only reachable through roundoff: the plain MM step cannot
            // increase the energy in exact arithmetic.
            notes.push(format!(
                "stage {}: plain step raised energy by {:e}; stage ended at previous iterate",
                opts.stage,
                e - e_prev
            ));
            break;
        }
        e_prev = e;
        t_plain = match prob.align(opts.kernel, &current) {
            Ok(t) => t,
            Err(err @ Error::Degenerate(_)) => {
                degenerate = Some(err);
                accepted = Some(current);
                break;
            }
            Err(err) => return Err(err),
        };
        let delta = opts.norm.measure(&current.t, &t_plain);
        trace.push(TraceRecord {
            stage: opts.stage,
            iter,
            nu,
            energy: e,
            step,
            delta_t_fro: delta,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if delta < opts.eps {
            accepted = Some(current);
            break;
        }
        let next = if opts.accelerate {
            let x = twist_to_dvec(&se3_log(&current.t)?);
            let g = twist_to_dvec(&se3_log(&t_plain)?);
            step = StepKind::Aa;
            se3_exp(&dvec_to_twist(&window.push_and_accelerate(x, g)?))
        } else {
            step = StepKind::Plain;
            t_plain
        };
        accepted = Some(current);
        current = prob.state(next);
        iter += 1;
    }
    let iterations = trace.records().iter().filter(|r| r.stage == opts.stage).count();
    Ok(StageResult {
        state: accepted.unwrap_or(start),
        iterations,
        degenerate,
    })
}

fn start(src: &PointCloud, tgt: &PointCloud) -> Result<()> {
    src.ensure_non_empty()?;
    tgt.ensure_non_empty()
}

fn run_l2(
    method: Method,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &P2PointConfig,
    accelerate: bool,
    norm: ConvergenceNorm,
) -> Result<RegistrationReport> {
    cfg.validate()?;
    start(src, tgt)?;
    let clock = Instant::now();
    let prob = Problem {
        src: src.points(),
        index: NnIndex::build(tgt)?,
    };
    let mut trace = EnergyTrace::new();
    let mut notes = Vec::new();
    let mut window = AaWindow::new(cfg.m);
    let opts = StageOpts {
        stage: 0,
        kernel: Kernel::L2,
        accelerate,
        max_iters: cfg.max_iters_per_nu,
        eps: cfg.trans_eps,
        norm,
    };
    let init = prob.state(cfg.initial_transform);
    let res = run_stage(&prob, init, &opts, &mut window, &mut trace, &mut notes, &clock)?;
    if let Some(err) = res.degenerate {
        if res.iterations == 0 {
            return Err(err);
        }
        notes.push(format!("stopped early: {err}"));
    }
    Ok(RegistrationReport {
        method,
        final_transform: res.state.t,
        iterations: res.iterations,
        trace,
        rmse: None,
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        nu_max: None,
        nu_min: None,
        convergence_test: norm.describe(cfg.trans_eps),
        notes,
    })
}

/// Classical ICP with unit weights and the squared Frobenius stopping rule.
pub fn icp_classic(src: &PointCloud, tgt: &PointCloud, cfg: &P2PointConfig) -> Result<RegistrationReport> {
    run_l2(Method::Icp, src, tgt, cfg, false, ConvergenceNorm::SquaredFrobenius)
}

/// ICP with Anderson acceleration on the twist of the current transform.
pub fn icp_fast(src: &PointCloud, tgt: &PointCloud, cfg: &P2PointConfig) -> Result<RegistrationReport> {
    run_l2(Method::FastIcp, src, tgt, cfg, true, ConvergenceNorm::Frobenius)
}

/// Welsch-robust ICP with Anderson acceleration and a halving kernel scale.
pub fn icp_robust(src: &PointCloud, tgt: &PointCloud, cfg: &P2PointConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    start(src, tgt)?;
    let clock = Instant::now();
    let mut notes = Vec::new();
    let (nu_max, nu_min) = resolve_nu(
        cfg.nu_max,
        cfg.nu_min,
        || compute_nu_max_p2p(src, tgt, &cfg.initial_transform),
        || compute_nu_min_p2p(tgt),
        &mut notes,
    )?;
    let prob = Problem {
        src: src.points(),
        index: NnIndex::build(tgt)?,
    };
    let mut trace = EnergyTrace::new();
    let mut window = AaWindow::new(cfg.m);
    let mut state = prob.state(cfg.initial_transform);
    let mut iterations = 0;
    for (stage, nu) in nu_schedule(nu_max, nu_min).into_iter().enumerate() {
        let opts = StageOpts {
            stage,
            kernel: Kernel::Welsch(nu),
            accelerate: true,
            max_iters: cfg.max_iters_per_nu,
            eps: cfg.trans_eps,
            norm: ConvergenceNorm::Frobenius,
        };
        let res = run_stage(&prob, state, &opts, &mut window, &mut trace, &mut notes, &clock)?;
        if let Some(err) = res.degenerate {
            notes.push(format!("stage {stage} (nu = {nu:e}) ended early: {err}"));
        }
        iterations += res.iterations;
        state = res.state;
    }
    Ok(RegistrationReport {
        method: Method::RobustIcp,
        final_transform: state.t,
        trace,
        rmse: None,
        iterations,
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        nu_max: Some(nu_max),
        nu_min: Some(nu_min),
        convergence_test: ConvergenceNorm::Frobenius.describe(cfg.trans_eps),
        notes,
    })
}
