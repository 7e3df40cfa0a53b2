//! Point-to-plane registration: a reference Gauss-Newton ICP and the
//! Welsch-robust solver with line search and Anderson acceleration.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;

use crate::accel::{AaWindow, DEFAULT_WINDOW};
use crate::bench::report::{EnergyTrace, Method, RegistrationReport, StepKind, TraceRecord};
use crate::error::{Error, Result};
use crate::lie::{hat, rodrigues_coefficients, se3_exp, se3_log, RigidTransform, Twist};
use crate::p2point::{dvec_to_twist, resolve_nu, twist_to_dvec, welsch_weight, NuSetting};
use crate::p2point::nu_schedule;
use crate::spatial::{
    estimate_normals, lower_median, median_neighbor_distance, median_plane_distance, NnIndex,
    PointCloud, NORMAL_NEIGHBORS, SPACING_NEIGHBORS,
};

/// Below this rotation angle the gradient uses series coefficients.
const SERIES_ANGLE: f64 = 1e-3;
/// Relative eigenvalue floor of the normal matrix.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct P2PlaneConfig {
    /// Anderson window size.
    pub m: usize,
    pub iters_first_stage: usize,
    pub iters_stage_increment: usize,
    pub iters_stage_cap: usize,
    /// Iteration limit of the un-robust reference solver.
    pub classic_max_iters: usize,
    pub trans_eps: f64,
    pub l_max: usize,
    pub nu_max: NuSetting,
    pub nu_min: NuSetting,
    pub initial_transform: RigidTransform,
}

impl Default for P2PlaneConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_WINDOW,
            iters_first_stage: 6,
            iters_stage_increment: 1,
            iters_stage_cap: 10,
            classic_max_iters: 1000,
            trans_eps: 1e-5,
            l_max: 20,
            nu_max: NuSetting::Auto,
            nu_min: NuSetting::Auto,
            initial_transform: RigidTransform::identity(),
        }
    }
}

impl P2PlaneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_first_stage == 0 || self.iters_stage_cap == 0 || self.classic_max_iters == 0 {
            return Err(Error::InvalidParameter("iteration limits must be positive".into()));
        }
        if !(self.trans_eps > 0.0) {
            return Err(Error::InvalidParameter("trans_eps must be positive".into()));
        }
        if self.l_max == 0 {
            return Err(Error::InvalidParameter("l_max must be positive".into()));
        }
        crate::p2point::validate_nu_pair(self.nu_max, self.nu_min)
    }

    /// Iteration limit of the zero-based stage `stage`.
    pub fn stage_limit(&self, stage: usize) -> usize {
        self.iters_first_stage
            .saturating_add(stage.saturating_mul(self.iters_stage_increment))
            .min(self.iters_stage_cap)
    }
}

/// Closest target point, its normal, the signed plane distance and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCorrespondence {
    pub qhat: Vector3<f64>,
    pub nhat: Vector3<f64>,
    pub b: f64,
    pub gamma: f64,
}

/// Nearest-neighbor index over a target with normals.
pub struct PlaneTarget<'a> {
    index: NnIndex,
    normals: &'a [Vector3<f64>],
}

impl<'a> PlaneTarget<'a> {
    pub fn new(tgt: &'a PointCloud) -> Result<Self> {
        let normals = tgt.require_normals()?;
        Ok(Self {
            index: NnIndex::build(tgt)?,
            normals,
        })
    }

    /// Correspondences of `src` under `t`. `nu = None` gives unit weights.
    pub fn correspond(
        &self,
        src: &[Vector3<f64>],
        t: &RigidTransform,
        nu: Option<f64>,
    ) -> Vec<PlaneCorrespondence> {
        src.par_iter()
            .map(|p| {
                let x = t.apply(p);
                let nb = self.index.nearest(&x);
                let nhat = self.normals[nb.index];
                let b = (x - nb.point).dot(&nhat);
                let gamma = nu.map_or(1.0, |nu| welsch_weight(b, nu));
                PlaneCorrespondence {
                    qhat: nb.point,
                    nhat,
                    b,
                    gamma,
                }
            })
            .collect()
    }
}

/// `sum_i psi_nu(|(T p_i - q_i) . n_i|)` over the given correspondences.
pub fn energy_p2plane(
    src: &PointCloud,
    transform: &RigidTransform,
    corr: &[PlaneCorrespondence],
    nu: f64,
) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    if corr.len() != src.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: corr.len(),
        });
    }
    let two_nu2 = 2.0 * nu * nu;
    Ok(src
        .points()
        .iter()
        .zip(corr)
        .map(|(p, c)| {
            let b = (transform.apply(p) - c.qhat).dot(&c.nhat);
            -(-b * b / two_nu2).exp_m1()
        })
        .sum())
}

fn welsch_plane_energy(corr: &[PlaneCorrespondence], nu: f64) -> f64 {
    let two_nu2 = 2.0 * nu * nu;
    corr.iter().map(|c| -(-c.b * c.b / two_nu2).exp_m1()).sum()
}

fn l2_plane_energy(corr: &[PlaneCorrespondence]) -> f64 {
    corr.iter().map(|c| c.b * c.b).sum()
}

/// Series `(A', B', C')` of the Rodrigues coefficients with respect to `s = theta^2`.
fn coefficient_derivatives(s: f64) -> (f64, f64, f64) {
    (
        -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
        -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0,
    )
}

/// Derivatives of `R` and `t` with respect to `delta_j`, and `dt/du`.
fn pose_derivatives(xi: &Twist) -> ([Matrix3<f64>; 3], Matrix3<f64>, Matrix3<f64>) {
    let d = xi.delta;
    let u = xi.u;
    let theta = d.norm();
    let k = hat(&d);
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let i3 = Matrix3::identity();

    if theta < SERIES_ANGLE {
        let s = theta * theta;
        let (a, b, c) = rodrigues_coefficients(theta);
        let (da, db, dc) = coefficient_derivatives(s);
        let k2 = k * k;
        let mut dr = [Matrix3::zeros(); 3];
        let mut dt = Matrix3::zeros();
        for j in 0..3 {
            let e = hat(&basis[j]);
            let sym = e * k + k * e;
            let w = 2.0 * d[j];
            dr[j] = k * (w * da) + e * a + k2 * (w * db) + sym * b;
            let dv = k * (w * db) + e * b + k2 * (w * dc) + sym * c;
            dt.set_column(j, &(dv * u));
        }
        let v = i3 + k * b + k2 * c;
        return (dr, dt, v);
    }

    let r = se3_exp(xi).rotation;
    let t2 = theta * theta;
    let mut dr = [Matrix3::zeros(); 3];
    for j in 0..3 {
        let w = d.cross(&((i3 - r) * basis[j]));
        dr[j] = (k * d[j] + hat(&w)) * r / t2;
    }
    let uh = hat(&u);
    let m = (r - i3) * uh + i3 * d.dot(&u);
    let mut dmat = Matrix3::zeros();
    for j in 0..3 {
        dmat.set_column(j, &(dr[j] * uh * d));
    }
    let dt = (m + d * u.transpose() + dmat) / t2 - (m * d) * d.transpose() * (2.0 / (t2 * t2));
    let dtdu = ((i3 - r) * k + d * d.transpose()) / t2;
    (dr, dt, dtdu)
}

/// Gradient of `B(xi) = (R(xi) p + t(xi) - qhat) . nhat` with respect to
/// `xi = (delta, u)`.
pub fn grad_plane_distance(
    xi: &Twist,
    p: &Vector3<f64>,
    _qhat: &Vector3<f64>,
    nhat: &Vector3<f64>,
) -> Vector6<f64> {
    let (dr, dt, dtdu) = pose_derivatives(xi);
    let mut j = Vector6::zeros();
    for k in 0..3 {
        j[k] = nhat.dot(&(dr[k] * p)) + nhat.dot(&dt.column(k).into_owned());
    }
    let tu = dtdu.transpose() * nhat;
    j[3] = tu.x;
    j[4] = tu.y;
    j[5] = tu.z;
    j
}

/// Signed plane distance of `p` under `xi`.
pub fn plane_distance(xi: &Twist, p: &Vector3<f64>, qhat: &Vector3<f64>, nhat: &Vector3<f64>) -> f64 {
    (se3_exp(xi).apply(p) - qhat).dot(nhat)
}

/// Solves the weighted Gauss-Newton system
/// `(sum g J J^T) xi = sum g J (J^T xi_k - B)`
/// for the minimizer of the linearized weighted plane energy.
pub fn gauss_newton_step(
    src: &[Vector3<f64>],
    corr: &[PlaneCorrespondence],
    xi: &Twist,
) -> Result<Twist> {
    if corr.len() != src.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: corr.len(),
        });
    }
    let (dr, dt, dtdu) = pose_derivatives(xi);
    let xk = xi.to_vector();
    let terms: Vec<(Matrix6<f64>, Vector6<f64>)> = src
        .par_iter()
        .zip(corr)
        .map(|(p, c)| {
            let mut j = Vector6::zeros();
            for k in 0..3 {
                j[k] = c.nhat.dot(&(dr[k] * p)) + c.nhat.dot(&dt.column(k).into_owned());
            }
            let tu = dtdu.transpose() * c.nhat;
            j.fixed_rows_mut::<3>(3).copy_from(&tu);
            let gj = j * c.gamma;
            (gj * j.transpose(), gj * (j.dot(&xk) - c.b))
        })
        .collect();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (hi, gi) in &terms {
        h += hi;
        g += gi;
    }
    solve_normal_system(&h, &g).map(|v| Twist::from_vector(&v))
}

fn is_well_conditioned(h: &Matrix6<f64>) -> bool {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    hi > 0.0 && lo > SINGULAR_TOL * hi && hi.is_finite()
}

/// Cholesky solve with one retry under light diagonal damping.
fn solve_normal_system(h: &Matrix6<f64>, g: &Vector6<f64>) -> Result<Vector6<f64>> {
    let mut m = *h;
    if !is_well_conditioned(&m) {
        let lambda = 1e-9 * m.trace() / 6.0;
        m += Matrix6::identity() * lambda;
        if !(lambda > 0.0) || !is_well_conditioned(&m) {
            return Err(Error::Degenerate(
                "point-to-plane normal matrix is singular".into(),
            ));
        }
    }
    m.cholesky()
        .map(|c| c.solve(g))
        .ok_or_else(|| Error::Degenerate("point-to-plane normal matrix is not positive definite".into()))
}

/// Result of a backtracking search.
#[derive(Debug, Clone)]
pub struct LineSearchOutcome<S> {
    pub xi: Twist,
    pub energy: f64,
    /// Extra data from the energy evaluation of `xi`, if it was a trial.
    pub state: Option<S>,
    /// Number of energy evaluations performed.
    pub trials: usize,
    /// Whether the returned point has energy strictly below `e_prev`.
    pub decreased: bool,
}

/// Safeguard for a candidate `(xi_current, e_current)`.
///
/// When `e_current >= e_prev`, tries `xi_prev + tau (xi_star - xi_prev)` for
/// `tau = 1, 1/2, 1/4, ...` (at most `l_max` trials), keeping the lowest
/// energy seen and stopping at the first trial below `e_prev`.
pub fn line_search<S>(
    mut eval: impl FnMut(&Twist) -> (f64, S),
    xi_prev: &Twist,
    xi_star: &Twist,
    xi_current: &Twist,
    e_current: f64,
    e_prev: f64,
    l_max: usize,
) -> LineSearchOutcome<S> {
    let mut best = LineSearchOutcome {
        xi: *xi_current,
        energy: e_current,
        state: None,
        trials: 0,
        decreased: e_current < e_prev,
    };
    if best.decreased {
        return best;
    }
    let a = xi_prev.to_vector();
    let dir = xi_star.to_vector() - a;
    let mut tau = 1.0;
    for _ in 0..l_max {
        let trial = Twist::from_vector(&(a + dir * tau));
        let (e_trial, state) = eval(&trial);
        best.trials += 1;
        if e_trial < best.energy {
            best.energy = e_trial;
            best.xi = trial;
            best.state = Some(state);
        }
        if e_trial < e_prev {
            best.decreased = true;
            break;
        }
        tau *= 0.5;
    }
    best
}

/// Three times the median absolute initial plane distance.
pub fn compute_nu_max_p2pl(src: &PointCloud, tgt: &PointCloud, init: &RigidTransform) -> Result<f64> {
    src.ensure_non_empty()?;
    let target = PlaneTarget::new(tgt)?;
    let mut d: Vec<f64> = target
        .correspond(src.points(), init, None)
        .iter()
        .map(|c| c.b.abs())
        .collect();
    Ok(3.0 * lower_median(&mut d).unwrap())
}

/// Median neighbor-to-tangent-plane distance of the target over six.
pub fn compute_nu_min_p2pl(tgt: &PointCloud) -> Result<f64> {
    Ok(median_plane_distance(tgt, SPACING_NEIGHBORS)? / 6.0)
}

fn ensure_normals<'a>(
    tgt: &'a PointCloud,
    owned: &'a mut Option<PointCloud>,
    notes: &mut Vec<String>,
) -> Result<&'a PointCloud> {
    if tgt.has_normals() {
        return Ok(tgt);
    }
    notes.push(format!("target normals estimated from {NORMAL_NEIGHBORS} neighbors"));
    Ok(owned.insert(estimate_normals(tgt, NORMAL_NEIGHBORS)?))
}

struct Eval {
    xi: Twist,
    corr: Vec<PlaneCorrespondence>,
    energy: f64,
}

struct PlaneProblem<'a> {
    src: &'a [Vector3<f64>],
    target: PlaneTarget<'a>,
}

impl PlaneProblem<'_> {
    fn eval(&self, xi: &Twist, nu: Option<f64>) -> Eval {
        let corr = self.target.correspond(self.src, &se3_exp(xi), nu);
        let energy = match nu {
            Some(nu) => welsch_plane_energy(&corr, nu),
            None => l2_plane_energy(&corr),
        };
        Eval {
            xi: *xi,
            corr,
            energy,
        }
    }

    fn gn(&self, e: &Eval) -> Result<Twist> {
        gauss_newton_step(self.src, &e.corr, &e.xi)
    }
}

fn stop_reason(err: Error, stage: usize, notes: &mut Vec<String>) -> Result<()> {
    match err {
        Error::Degenerate(msg) => {
            notes.push(format!("stage {stage} ended early: {msg}"));
            Ok(())
        }
        other => Err(other),
    }
}

/// Welsch-robust point-to-plane ICP with line search and Anderson
/// acceleration on the twist coordinates.
pub fn icp_robust_plane(src: &PointCloud, tgt: &PointCloud, cfg: &P2PlaneConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    src.ensure_non_empty()?;
    tgt.ensure_non_empty()?;
    let clock = Instant::now();
    let mut notes = Vec::new();
    let mut owned = None;
    let tgt = ensure_normals(tgt, &mut owned, &mut notes)?;
    let (nu_max, nu_min) = resolve_nu(
        cfg.nu_max,
        cfg.nu_min,
        || compute_nu_max_p2pl(src, tgt, &cfg.initial_transform),
        || {
            let h = compute_nu_min_p2pl(tgt)?;
            if h > 0.0 {
                return Ok(h);
            }
            let e = median_neighbor_distance(tgt, SPACING_NEIGHBORS)? / (3.0 * 3f64.sqrt());
            Ok(e)
        },
        &mut notes,
    )?;
    let prob = PlaneProblem {
        src: src.points(),
        target: PlaneTarget::new(tgt)?,
    };
    let mut trace = EnergyTrace::new();
    let mut window = AaWindow::new(cfg.m);
    let mut accepted = prob.eval(&se3_log(&cfg.initial_transform)?, Some(nu_max));
    let mut iterations = 0;

    for (stage, nu) in nu_schedule(nu_max, nu_min).into_iter().enumerate() {
        if stage > 0 {
            // Same pose, weights and energy under the new scale.
            accepted = prob.eval(&accepted.xi, Some(nu));
        }
        window.reset();
        let limit = cfg.stage_limit(stage);
        let mut xi_star = match prob.gn(&accepted) {
            Ok(x) => x,
            Err(err) => {
                stop_reason(err, stage, &mut notes)?;
                continue;
            }
        };
        window.push_and_accelerate(twist_to_dvec(&accepted.xi), twist_to_dvec(&xi_star))?;
        let mut current = prob.eval(&xi_star, Some(nu));
        let mut step = StepKind::Plain;
        let mut e_prev = f64::INFINITY;
        let mut iter = 1;
        while iter <= limit {
            if current.energy >= e_prev {
                let ls = line_search(
                    |x| {
                        let e = prob.eval(x, Some(nu));
                        (e.energy, e)
                    },
                    &accepted.xi,
                    &xi_star,
                    &current.xi,
                    current.energy,
                    e_prev,
                    cfg.l_max,
                );
                if !ls.decreased {
                    notes.push(format!(
                        "stage {stage}: no step in {} trials decreased the energy; stage ended at previous iterate",
                        ls.trials
                    ));
                    break;
                }
                current = ls.state.expect("a decreasing trial carries its evaluation");
                step = StepKind::LineSearch;
            }
            e_prev = current.energy;
            accepted = current;
            iterations += 1;

            let next_star = match prob.gn(&accepted) {
                Ok(x) => x,
                Err(err) => {
                    stop_reason(err, stage, &mut notes)?;
                    break;
                }
            };
            let delta = (next_star.to_vector() - accepted.xi.to_vector()).norm();
            trace.push(TraceRecord {
                stage,
                iter,
                nu: Some(nu),
                energy: accepted.energy,
                step,
                delta_t_fro: delta,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
            if delta < cfg.trans_eps {
                break;
            }
            let acc = window.push_and_accelerate(twist_to_dvec(&accepted.xi), twist_to_dvec(&next_star))?;
            xi_star = next_star;
            current = prob.eval(&dvec_to_twist(&acc), Some(nu));
            step = StepKind::Aa;
            iter += 1;
        }
    }

    Ok(RegistrationReport {
        method: Method::RobustIcpPl,
        final_transform: se3_exp(&accepted.xi),
        trace,
        rmse: None,
        iterations,
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        nu_max: Some(nu_max),
        nu_min: Some(nu_min),
        convergence_test: format!("||xi* - xi|| < {:e}", cfg.trans_eps),
        notes,
    })
}

/// Reference point-to-plane ICP: unit weights, one Gauss-Newton solve per
/// correspondence update, squared Frobenius stopping rule.
pub fn icp_plane_classic(src: &PointCloud, tgt: &PointCloud, cfg: &P2PlaneConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    src.ensure_non_empty()?;
    tgt.ensure_non_empty()?;
    let clock = Instant::now();
    let mut notes = Vec::new();
    let mut owned = None;
    let tgt = ensure_normals(tgt, &mut owned, &mut notes)?;
    let prob = PlaneProblem {
        src: src.points(),
        target: PlaneTarget::new(tgt)?,
    };
    let mut trace = EnergyTrace::new();
    let mut current = prob.eval(&se3_log(&cfg.initial_transform)?, None);
    let mut iterations = 0;
    for iter in 1..=cfg.classic_max_iters {
        let next = match prob.gn(&current) {
            Ok(x) => x,
            Err(err) if iter == 1 => return Err(err),
            Err(err) => {
                stop_reason(err, 0, &mut notes)?;
                break;
            }
        };
        let delta = se3_exp(&current.xi).frobenius_distance(&se3_exp(&next)).powi(2);
        iterations = iter;
        trace.push(TraceRecord {
            stage: 0,
            iter,
            nu: None,
            energy: current.energy,
            step: StepKind::Plain,
            delta_t_fro: delta,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if delta < cfg.trans_eps {
            break;
        }
        current = prob.eval(&next, None);
    }
    Ok(RegistrationReport {
        method: Method::IcpPl,
        final_transform: se3_exp(&current.xi),
        trace,
        rmse: None,
        iterations,
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        nu_max: None,
        nu_min: None,
        convergence_test: format!("||T - T'||_F^2 < {:e}", cfg.trans_eps),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    fn rand_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = rand_vec(rng, 1.0);
            if v.norm() > 0.1 {
                return v.normalize();
            }
        }
    }

    fn central_difference(xi: &Twist, p: &Vector3<f64>, q: &Vector3<f64>, n: &Vector3<f64>, h: f64) -> Vector6<f64> {
        let x = xi.to_vector();
        Vector6::from_fn(|k, _| {
            let mut a = x;
            let mut b = x;
            a[k] += h;
            b[k] -= h;
            (plane_distance(&Twist::from_vector(&a), p, q, n) - plane_distance(&Twist::from_vector(&b), p, q, n))
                / (2.0 * h)
        })
    }

    fn rel_err(a: &Vector6<f64>, b: &Vector6<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..100 {
            let xi = Twist::new(rand_unit(&mut rng) * rng.random_range(0.1..3.0), rand_vec(&mut rng, 1.0));
            let (p, q, n) = (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0), rand_unit(&mut rng));
            let j = grad_plane_distance(&xi, &p, &q, &n);
            let fd = central_difference(&xi, &p, &q, &n, 1e-6);
            assert!(rel_err(&j, &fd) < 1e-5, "{j} vs {fd}");
        }
    }

    #[test]
    fn gradient_at_zero_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let xi = Twist::new(Vector3::zeros(), rand_vec(&mut rng, 1.0));
            let (p, q, n) = (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0), rand_unit(&mut rng));
            let j = grad_plane_distance(&xi, &p, &q, &n);
            assert!(rel_err(&j, &central_difference(&xi, &p, &q, &n, 1e-6)) < 1e-5);
            // One-sided differences stay within the smooth region.
            let h = 1e-8;
            let b0 = plane_distance(&xi, &p, &q, &n);
            let one_sided = Vector6::from_fn(|k, _| {
                let mut x = xi.to_vector();
                x[k] += h;
                (plane_distance(&Twist::from_vector(&x), &p, &q, &n) - b0) / h
            });
            assert!(rel_err(&j, &one_sided) < 1e-5);
            // Continuity against a tiny nonzero rotation.
            let tiny = Twist::new(Vector3::new(1e-9, 0.0, 0.0), xi.u);
            assert!((grad_plane_distance(&tiny, &p, &q, &n) - j).norm() < 1e-6);
        }
    }

    #[test]
    fn gradient_branches_agree_at_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..50 {
            let axis = rand_unit(&mut rng);
            let u = rand_vec(&mut rng, 1.0);
            let (p, q, n) = (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0), rand_unit(&mut rng));
            let below = grad_plane_distance(&Twist::new(axis * (SERIES_ANGLE * (1.0 - 1e-9)), u), &p, &q, &n);
            let above = grad_plane_distance(&Twist::new(axis * (SERIES_ANGLE * (1.0 + 1e-9)), u), &p, &q, &n);
            assert!((below - above).norm() < 1e-8 * (1.0 + above.norm()));
        }
    }

    #[test]
    fn zero_pose_translation_block_is_normal() {
        let n = Vector3::new(0.0, 0.6, 0.8);
        let p = Vector3::new(0.3, -0.2, 0.5);
        let j = grad_plane_distance(&Twist::zero(), &p, &p, &n);
        assert!((j.fixed_rows::<3>(3) - n).norm() < 1e-15);
    }

    fn plane_corr(p: &Vector3<f64>, t: &RigidTransform, qhat: Vector3<f64>, nhat: Vector3<f64>, gamma: f64) -> PlaneCorrespondence {
        PlaneCorrespondence {
            qhat,
            nhat,
            b: (t.apply(p) - qhat).dot(&nhat),
            gamma,
        }
    }

    #[test]
    fn gn_is_stationary_on_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let xi = Twist::new(rand_vec(&mut rng, 0.5), rand_vec(&mut rng, 0.5));
        let t = se3_exp(&xi);
        let src: Vec<Vector3<f64>> = (0..50).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let corr: Vec<PlaneCorrespondence> = src
            .iter()
            .map(|p| plane_corr(p, &t, t.apply(p), rand_unit(&mut rng), rng.random_range(0.1..1.0)))
            .collect();
        assert!(corr.iter().all(|c| c.b.abs() < 1e-14));
        let step = gauss_newton_step(&src, &corr, &xi).unwrap();
        assert!((step.to_vector() - xi.to_vector()).norm() < 1e-10);
    }

    #[test]
    fn gn_recovers_pure_translation_in_one_step() {
        // Targets are the sources shifted by v, so at zero rotation the
        // linearized residual vanishes exactly at (0, v).
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let v = Vector3::new(0.03, -0.05, 0.02);
        let src: Vec<Vector3<f64>> = (0..60).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let corr: Vec<PlaneCorrespondence> = src
            .iter()
            .map(|p| plane_corr(p, &RigidTransform::identity(), p + v, rand_unit(&mut rng), rng.random_range(0.2..1.0)))
            .collect();
        let step = gauss_newton_step(&src, &corr, &Twist::zero()).unwrap();
        assert!(step.delta.norm() < 1e-14);
        assert!((step.u - v).norm() < 1e-14);
    }

    #[test]
    fn gn_solves_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let xi = Twist::new(rand_vec(&mut rng, 0.4), rand_vec(&mut rng, 0.4));
        let t = se3_exp(&xi);
        let src: Vec<Vector3<f64>> = (0..80).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let corr: Vec<PlaneCorrespondence> = src
            .iter()
            .map(|p| plane_corr(p, &t, rand_vec(&mut rng, 1.0), rand_unit(&mut rng), rng.random_range(0.1..1.0)))
            .collect();
        let step = gauss_newton_step(&src, &corr, &xi).unwrap();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (p, c) in src.iter().zip(&corr) {
            let j = grad_plane_distance(&xi, p, &c.qhat, &c.nhat);
            h += j * j.transpose() * c.gamma;
            g += j * (c.gamma * (j.dot(&xi.to_vector()) - c.b));
        }
        let r = h * step.to_vector() - g;
        assert!(r.norm() < 1e-10 * g.norm().max(1.0));
    }

    #[test]
    fn gn_singular_system_is_damped_or_rejected() {
        let src = vec![Vector3::new(1.0, 0.0, 0.0); 10];
        let corr: Vec<PlaneCorrespondence> = src
            .iter()
            .map(|p| plane_corr(p, &RigidTransform::identity(), *p - Vector3::z() * 0.1, Vector3::z(), 1.0))
            .collect();
        let step = gauss_newton_step(&src, &corr, &Twist::zero()).unwrap();
        assert!(step.to_vector().iter().all(|v| v.is_finite()));
        let zero: Vec<PlaneCorrespondence> = corr.iter().map(|c| PlaneCorrespondence { gamma: 0.0, ..*c }).collect();
        assert!(matches!(gauss_newton_step(&src, &zero, &Twist::zero()), Err(Error::Degenerate(_))));
    }

    fn quadratic(min: f64) -> impl FnMut(&Twist) -> (f64, ()) {
        move |x: &Twist| ((x.u.x - min).powi(2), ())
    }

    #[test]
    fn line_search_guard_not_entered() {
        let prev = Twist::zero();
        let cand = Twist::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let out = line_search(quadratic(1.0), &prev, &cand, &cand, 0.0, 1.0, 20);
        assert_eq!(out.trials, 0);
        assert_eq!(out.xi, cand);
        assert!(out.decreased);
    }

    #[test]
    fn line_search_halves_overshoot() {
        // E(x) = (x - 0.3)^2 from x = 0 toward the overshooting x = 2.
        let prev = Twist::zero();
        let star = Twist::new(Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0));
        let e_prev = 0.09;
        let e_star = (2.0f64 - 0.3).powi(2);
        let out = line_search(quadratic(0.3), &prev, &star, &star, e_star, e_prev, 20);
        assert!(out.decreased);
        // tau = 1, 1/2, 1/4 -> x = 0.5 is the first point below 0.09.
        assert_eq!(out.trials, 3);
        assert!((out.xi.u.x - 0.5).abs() < 1e-15);
        assert!(out.energy < e_prev);
    }

    #[test]
    fn line_search_failure_returns_best_trial() {
        let prev = Twist::zero();
        let star = Twist::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let mut seen = Vec::new();
        let out = line_search(
            |x: &Twist| {
                let e = 1.0 + (x.u.x - 0.3).powi(2);
                seen.push(e);
                (e, ())
            },
            &prev,
            &star,
            &star,
            1.49,
            1.0,
            5,
        );
        assert!(!out.decreased);
        assert_eq!(out.trials, 5);
        let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.energy, min);
        assert!((out.xi.u.x - 0.25).abs() < 1e-15);
    }

    #[test]
    fn energy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let pts: Vec<Vector3<f64>> = (0..40).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let src = PointCloud::new(pts.clone());
        let t = RigidTransform::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(0.1, 0.0, 0.0));
        let on_plane: Vec<PlaneCorrespondence> = pts
            .iter()
            .map(|p| plane_corr(p, &t, t.apply(p) + Vector3::x() * 0.5, Vector3::z(), 1.0))
            .collect();
        assert!(energy_p2plane(&src, &t, &on_plane, 0.1).unwrap() < 1e-28);

        let one = PointCloud::new(vec![Vector3::zeros()]);
        let c = plane_corr(&Vector3::zeros(), &RigidTransform::identity(), Vector3::new(0.0, 0.0, -0.2), Vector3::z(), 1.0);
        let e = energy_p2plane(&one, &RigidTransform::identity(), &[c], 0.5).unwrap();
        assert!((e - crate::p2point::welsch(0.2, 0.5).unwrap()).abs() < 1e-15);

        let nu = 0.4;
        let rnd: Vec<PlaneCorrespondence> = pts
            .iter()
            .map(|p| plane_corr(p, &t, rand_vec(&mut rng, 1.0), rand_unit(&mut rng), 1.0))
            .collect();
        let mut want = 0.0;
        for (p, c) in pts.iter().zip(&rnd) {
            let x = t.rotation * p + t.translation - c.qhat;
            let b = x.x * c.nhat.x + x.y * c.nhat.y + x.z * c.nhat.z;
            want += 1.0 - (-(b * b) / (2.0 * nu * nu)).exp();
        }
        assert!((energy_p2plane(&src, &t, &rnd, nu).unwrap() - want).abs() < 1e-12);
        assert!(matches!(energy_p2plane(&src, &t, &rnd[..3], nu), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn stage_limits() {
        let cfg = P2PlaneConfig::default();
        let caps: Vec<usize> = (0..7).map(|s| cfg.stage_limit(s)).collect();
        assert_eq!(caps, vec![6, 7, 8, 9, 10, 10, 10]);
    }

    #[test]
    fn nu_formulas() {
        let tgt = crate::bench::shapes::bumpy_ellipsoid(400).unwrap();
        let src = tgt.slice(0, 200).without_normals();
        let init = RigidTransform::from_axis_angle(&Vector3::x(), 0.1, Vector3::new(0.02, 0.0, 0.0));
        let normals = tgt.normals().unwrap();
        let mut d: Vec<f64> = src
            .points()
            .iter()
            .map(|p| {
                let x = init.apply(p);
                let (mut bi, mut bd) = (0, f64::INFINITY);
                for (i, q) in tgt.points().iter().enumerate() {
                    let dd = (x - q).norm_squared();
                    if dd < bd {
                        bd = dd;
                        bi = i;
                    }
                }
                (x - tgt.points()[bi]).dot(&normals[bi]).abs()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let want = 3.0 * d[(d.len() - 1) / 2];
        assert!((compute_nu_max_p2pl(&src, &tgt, &init).unwrap() - want).abs() < 1e-15);
        assert_eq!(compute_nu_min_p2pl(&tgt).unwrap(), median_plane_distance(&tgt, 6).unwrap() / 6.0);
        assert!(matches!(
            compute_nu_max_p2pl(&src, &src, &init),
            Err(Error::MissingNormals)
        ));
    }

    #[test]
    fn identical_clouds() {
        let cloud = crate::bench::shapes::bumpy_ellipsoid(600).unwrap();
        let report = icp_robust_plane(&cloud, &cloud, &P2PlaneConfig::default()).unwrap();
        assert!(report.final_transform.frobenius_distance(&RigidTransform::identity()) < 1e-12);
        assert!(report.final_energy().unwrap() < 1e-20);
        let classic = icp_plane_classic(&cloud, &cloud, &P2PlaneConfig::default()).unwrap();
        assert_eq!(classic.iterations, 1);
    }

    #[test]
    fn recovers_known_motion() {
        let cloud = crate::bench::shapes::bumpy_ellipsoid(1500).unwrap();
        let truth = RigidTransform::from_axis_angle(&Vector3::new(0.2, 1.0, -0.3), 0.25, Vector3::new(0.04, 0.02, -0.03));
        let tgt = cloud.transformed(&truth);
        let src = cloud.without_normals();
        let cfg = P2PlaneConfig { trans_eps: 1e-9, ..Default::default() };
        for report in [
            icp_robust_plane(&src, &tgt, &cfg).unwrap(),
            icp_plane_classic(&src, &tgt, &P2PlaneConfig { trans_eps: 1e-20, ..cfg.clone() }).unwrap(),
        ] {
            assert!(report.final_transform.frobenius_distance(&truth) < 1e-7, "{}: {:?}", report.method, report.notes);
        }
        let robust = icp_robust_plane(&src, &tgt, &cfg).unwrap();
        assert!(robust.trace.monotonicity_violations().is_empty());
        let caps: Vec<usize> = (0..robust.trace.stage_nus().len()).map(|s| cfg.stage_limit(s)).collect();
        for r in robust.trace.records() {
            assert!(r.iter <= caps[r.stage]);
            assert!(r.nu.is_some());
        }
    }

    #[test]
    fn estimates_missing_target_normals() {
        let cloud = crate::bench::shapes::bumpy_ellipsoid(500).unwrap().without_normals();
        let report = icp_robust_plane(&cloud, &cloud, &P2PlaneConfig::default()).unwrap();
        assert!(report.notes.iter().any(|n| n.contains("normals estimated")));
    }
}
