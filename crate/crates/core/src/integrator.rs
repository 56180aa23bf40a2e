//! Adaptive TR-BDF2 with embedded third-order error estimate, Newton
//! convergence control and reuse of mass/Jacobian factorisations.
//!
//! The unknown of each implicit stage is the scaled derivative `wz = dt * w'`.
//! Systems are split into blocks (one per subdomain) that are visited in order
//! inside every Newton iteration, so interface data can be exchanged between
//! blocks as soon as one of them is updated.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::linalg::{LuFactor, SparseMatrix};

/// Butcher coefficients of TR-BDF2 and its embedded third-order row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tableau {
    pub gamma: f64,
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub bhat: [f64; 3],
    pub c: [f64; 3],
}

impl Tableau {
    pub fn new() -> Self {
        let gamma = (2.0 - 2f64.sqrt()) / 2.0;
        let b2 = (1.0 - 2.0 * gamma) / (4.0 * gamma);
        let bh2 = 1.0 / (12.0 * gamma * (1.0 - 2.0 * gamma));
        let bh3 = (2.0 - 6.0 * gamma) / (6.0 * (1.0 - 2.0 * gamma));
        let b = [1.0 - b2 - gamma, b2, gamma];
        Tableau {
            gamma,
            a: [[0.0; 3], [gamma, gamma, 0.0], b],
            b,
            bhat: [1.0 - bh2 - bh3, bh2, bh3],
            c: [0.0, 2.0 * gamma, 1.0],
        }
    }

    /// `bhat - b`.
    pub fn error_weights(&self) -> [f64; 3] {
        [self.bhat[0] - self.b[0], self.bhat[1] - self.b[1], self.bhat[2] - self.b[2]]
    }

    /// Stability function `R(z)` of the main method.
    pub fn stability(&self, z: f64) -> f64 {
        let a = &self.a;
        let k1 = z;
        let y2 = (1.0 + a[1][0] * k1) / (1.0 - a[1][1] * z);
        let k2 = z * y2;
        let y3 = (1.0 + a[2][0] * k1 + a[2][1] * k2) / (1.0 - a[2][2] * z);
        let k3 = z * y3;
        1.0 + self.b[0] * k1 + self.b[1] * k2 + self.b[2] * k3
    }

    /// Coefficients `(p31, p32, p33)` of the third-stage predictor
    /// `wz_new = p31 wz_n + p32 wz_ng + p33 (w_ng - w_n)`, obtained by
    /// differentiating the cubic Hermite interpolant on `[t_n, t_ng]` at `t_n + dt`.
    pub fn predictor(&self) -> [f64; 3] {
        let s = 1.0 / (2.0 * self.gamma);
        [3.0 * s * s - 4.0 * s + 1.0, 3.0 * s * s - 2.0 * s, 6.0 * s * s * (1.0 - s)]
    }
}

impl Default for Tableau {
    fn default() -> Self {
        Self::new()
    }
}

pub fn tableau() -> Tableau {
    Tableau::new()
}

/// Controller constants; defaults follow the reference parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    pub dt_max: f64,
    pub r_tol: f64,
    pub a_tol: f64,
    pub tol_n: f64,
    pub kappa_n: f64,
    /// Maximum Newton iteration index `K`.
    pub k_max: usize,
    pub fac_s1s2: f64,
    pub fac_min: f64,
    pub fac: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub k_i: f64,
    pub epsilon: f64,
    /// Initial step.
    pub dt0: f64,
    /// Reuse iteration matrices across stages and steps.
    pub mjcontrol: bool,
    /// `false` runs with the constant step `dt0` and never rejects on the error.
    pub adaptive: bool,
    /// Consecutive rejections tolerated before aborting.
    pub max_rejections: usize,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            dt_max: 2000.0,
            r_tol: 1e-6,
            a_tol: 1e-3,
            tol_n: 1e-6,
            kappa_n: 0.5,
            k_max: 10,
            fac_s1s2: 0.3,
            fac_min: 0.1,
            fac: 0.25f64.powf(1.0 / 3.0),
            ratio_min: 0.2,
            ratio_max: 5.0,
            k_i: 1.0 / 3.0,
            epsilon: 1e-10,
            dt0: 1e-3,
            mjcontrol: true,
            adaptive: true,
            max_rejections: 100,
        }
    }
}

impl ControllerParams {
    pub fn eta(&self) -> f64 {
        self.a_tol / self.r_tol
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_max", self.dt_max),
            ("r_tol", self.r_tol),
            ("a_tol", self.a_tol),
            ("tol_n", self.tol_n),
            ("kappa_n", self.kappa_n),
            ("fac_s1s2", self.fac_s1s2),
            ("fac_min", self.fac_min),
            ("fac", self.fac),
            ("ratio_min", self.ratio_min),
            ("ratio_max", self.ratio_max),
            ("k_i", self.k_i),
            ("epsilon", self.epsilon),
            ("dt0", self.dt0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!(Config, "controller.{name} must be positive and finite (got {v})");
            }
        }
        if !(self.ratio_min < 1.0 && self.ratio_max > 1.0) {
            bail!(Config, "controller needs ratio_min < 1 < ratio_max");
        }
        if self.k_max < 1 {
            bail!(Config, "controller.k_max must be at least 1");
        }
        if self.max_rejections < 1 {
            bail!(Config, "controller.max_rejections must be at least 1");
        }
        Ok(())
    }
}

/// `max_i |v_i| / sc_i`.
pub fn scaled_max_norm(v: &[f64], sc: &[f64]) -> Result<f64> {
    if v.len() != sc.len() {
        bail!(Argument, "vector has {} entries, scale has {}", v.len(), sc.len());
    }
    Ok(v.iter().zip(sc).fold(0.0, |m, (x, s)| m.max(x.abs() / s)))
}

fn scaled_norm(v: &[f64], sc: &[f64]) -> f64 {
    v.iter().zip(sc).fold(0.0, |m, (x, s)| m.max(x.abs() / s))
}

/// Booleans steering matrix evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    pub mjcontrol: bool,
    pub need_new_m: bool,
    pub need_new_j: bool,
    pub need_new_mj: bool,
    pub m_current: bool,
    pub j_current: bool,
    pub need_new_rate: bool,
}

impl Flags {
    pub fn initial(mjcontrol: bool) -> Self {
        Flags {
            mjcontrol,
            need_new_m: true,
            need_new_j: true,
            need_new_mj: true,
            m_current: false,
            j_current: false,
            need_new_rate: true,
        }
    }
}

/// Decision of the Newton stopping test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NewtonStatus {
    Converged,
    Continue,
    Reject,
}

/// Stage-level inputs of [`newton_converged`].
#[derive(Clone, Copy, Debug)]
pub struct NewtonContext {
    pub res_min: f64,
    /// `true` for the first implicit stage.
    pub first_stage: bool,
    pub mjcontrol: bool,
}

/// Newton stopping test on scaled increment norms. `res_old` is ignored at
/// `k = 0`; `theta` and `need_new_rate` are updated in place.
pub fn newton_converged(
    res_new: f64,
    res_old: f64,
    theta: &mut f64,
    k: usize,
    need_new_rate: &mut bool,
    ctx: &NewtonContext,
    p: &ControllerParams,
) -> NewtonStatus {
    let tol = p.kappa_n * p.tol_n;
    if res_new <= ctx.res_min {
        return NewtonStatus::Converged;
    }
    if k == 0 {
        if *need_new_rate && ctx.first_stage {
            if ctx.mjcontrol {
                *need_new_rate = false;
            }
            *theta = 0.0;
        } else if *theta / (1.0 - *theta) * res_new <= 0.1 * tol {
            return NewtonStatus::Converged;
        }
        return NewtonStatus::Continue;
    }
    if res_new > 0.9 * res_old {
        return NewtonStatus::Reject;
    }
    *theta = (0.9 * *theta).max(res_new / res_old);
    let e = *theta / (1.0 - *theta) * res_new;
    if e <= tol {
        NewtonStatus::Converged
    } else if k >= p.k_max || tol < e * theta.powi((p.k_max - k) as i32) {
        NewtonStatus::Reject
    } else {
        NewtonStatus::Continue
    }
}

/// A semi-discrete system `M w' = F(t, w)` split into blocks.
pub trait StageSystem {
    fn len(&self) -> usize;
    fn num_blocks(&self) -> usize;
    fn block_range(&self, b: usize) -> Range<usize>;
    /// `F_b(t, w)` for block `b`, reading the full state.
    fn rhs(&mut self, b: usize, t: f64, w: &[f64], out: &mut [f64]) -> Result<()>;
    fn mass_matvec(&self, b: usize, x: &[f64], out: &mut [f64]);
    fn refresh_mass(&mut self, b: usize, t: f64, w: &[f64]) -> Result<()>;
    fn refresh_jacobian(&mut self, b: usize, t: f64, w: &[f64]) -> Result<()>;
    /// Factorises `M / dt - gamma J` of block `b`.
    fn factor(&mut self, b: usize, dt: f64, gamma: f64) -> Result<()>;
    fn solve(&self, b: usize, rhs: &mut [f64]) -> Result<()>;
    fn solve_mass(&self, b: usize, rhs: &mut [f64]) -> Result<()>;
    /// Called after block `b` was updated inside a Newton iteration.
    fn after_block(&mut self, _b: usize, _t: f64, _w: &[f64]) -> Result<()> {
        Ok(())
    }
    /// Called with the predicted stage state before its Newton loop.
    fn begin_stage(&mut self, _t: f64, _w: &[f64]) -> Result<()> {
        Ok(())
    }
    /// Saves interface data before a step attempt.
    fn checkpoint(&mut self) {}
    /// Restores the data saved by [`StageSystem::checkpoint`] after a rejection.
    fn restore(&mut self) {}
}

/// Counters for cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub rhs_calls: usize,
    pub mass_evals: usize,
    pub jacobian_evals: usize,
    pub factorizations: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrator state between steps.
#[derive(Clone, Debug)]
pub struct StepState {
    pub t: f64,
    pub dt: f64,
    pub w: Vec<f64>,
    pub wz: Vec<f64>,
    pub sc: Vec<f64>,
    pub flags: Flags,
    pub theta: f64,
    pub stats: StepStats,
    consecutive_rejections: usize,
}

impl StepState {
    pub fn new(t: f64, w: Vec<f64>, p: &ControllerParams) -> Self {
        let n = w.len();
        StepState {
            t,
            dt: p.dt0,
            w,
            wz: vec![0.0; n],
            sc: vec![p.eta(); n],
            flags: Flags::initial(p.mjcontrol),
            theta: 0.0,
            stats: StepStats::default(),
            consecutive_rejections: 0,
        }
    }

    /// FSAL start: `wz = dt M^{-1} F(t, w)`.
    pub fn initialize<S: StageSystem + ?Sized>(&mut self, sys: &mut S) -> Result<()> {
        if sys.len() != self.w.len() {
            bail!(Argument, "system has {} unknowns, state has {}", sys.len(), self.w.len());
        }
        for b in 0..sys.num_blocks() {
            let r = sys.block_range(b);
            let mut f = vec![0.0; r.len()];
            sys.rhs(b, self.t, &self.w, &mut f)?;
            self.stats.rhs_calls += 1;
            sys.solve_mass(b, &mut f)?;
            for (z, v) in self.wz[r].iter_mut().zip(&f) {
                *z = self.dt * v;
            }
        }
        Ok(())
    }

    fn set_dt(&mut self, dt: f64) {
        if dt != self.dt {
            let r = dt / self.dt;
            self.wz.iter_mut().for_each(|z| *z *= r);
            self.dt = dt;
            self.flags.need_new_mj = true;
        }
    }
}

/// Why an attempted step was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cause {
    None,
    S1,
    S2,
    Err,
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cause::None => "none",
            Cause::S1 => "S1",
            Cause::S2 => "S2",
            Cause::Err => "err",
        })
    }
}

/// One attempted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub err: f64,
    pub accepted: bool,
    pub iters: [usize; 2],
    pub cause: Cause,
}

/// Step-size clamping before an attempt: `dt_min = eps |t|`, `dt <= dt_max`,
/// and the last step lands exactly on `t_final`.
pub fn prepare_step(state: &mut StepState, t_final: f64, p: &ControllerParams) {
    let dt_min = p.epsilon * state.t.abs();
    let mut dt = state.dt.max(dt_min).min(p.dt_max);
    let remaining = t_final - state.t;
    if dt >= remaining * (1.0 - 1e-12) {
        dt = remaining;
    }
    state.set_dt(dt);
}

/// Algorithm 4: refreshes mass, Jacobian and iteration matrices as flagged.
/// Returns the number of block assemblies performed.
pub fn mj_control<S: StageSystem + ?Sized>(sys: &mut S, state: &mut StepState, gamma: f64) -> Result<usize> {
    let f = &mut state.flags;
    if !f.mjcontrol {
        return Ok(0);
    }
    let mut count = 0;
    if f.need_new_m {
        for b in 0..sys.num_blocks() {
            sys.refresh_mass(b, state.t, &state.w)?;
            count += 1;
        }
        state.stats.mass_evals += 1;
        f.m_current = true;
        f.need_new_m = false;
        f.need_new_mj = true;
    }
    if f.need_new_j {
        for b in 0..sys.num_blocks() {
            sys.refresh_jacobian(b, state.t, &state.w)?;
            count += 1;
        }
        state.stats.jacobian_evals += 1;
        f.j_current = true;
        f.need_new_j = false;
        f.need_new_mj = true;
    }
    if f.need_new_mj {
        for b in 0..sys.num_blocks() {
            sys.factor(b, state.dt, gamma)?;
            count += 1;
        }
        state.stats.factorizations += 1;
        f.need_new_mj = false;
        f.need_new_rate = true;
    }
    Ok(count)
}

/// Result of one step attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// `state` now holds `t_new`, `w_new`, `wz_new`.
    Accepted { err: f64, iters: [usize; 2] },
    /// `state.dt` and `state.wz` were adjusted for the retry.
    Rejected { cause: Cause, err: f64, iters: [usize; 2] },
}

/// Newton iteration cap when the step is fixed and rejections are disallowed.
pub const FIXED_STEP_MAX_ITERS: usize = 200;

struct Stage {
    t: f64,
    first: bool,
}

/// Newton loop of one implicit stage. `w` and `wz` hold the initial guess and
/// are overwritten by the iterate. Returns `(converged, iterations)`.
#[allow(clippy::too_many_arguments)]
fn newton_stage<S: StageSystem + ?Sized>(
    sys: &mut S,
    state: &mut StepState,
    stage: Stage,
    w: &mut [f64],
    wz: &mut [f64],
    gamma: f64,
    p: &ControllerParams,
) -> Result<(bool, usize)> {
    let dt = state.dt;
    let res_min = 100.0 * f64::EPSILON * scaled_norm(w, &state.sc);
    let ctx = NewtonContext { res_min, first_stage: stage.first, mjcontrol: state.flags.mjcontrol };
    let mut delta = vec![0.0; w.len()];
    let mut scratch = Vec::new();
    let mut res_old = f64::INFINITY;
    sys.begin_stage(stage.t, w)?;
    let cap = if p.adaptive { p.k_max } else { FIXED_STEP_MAX_ITERS };
    for k in 0..=cap {
        for b in 0..sys.num_blocks() {
            let r = sys.block_range(b);
            let g = &mut delta[r.clone()];
            let ok = admissible(sys.rhs(b, stage.t, w, g))?;
            state.stats.rhs_calls += 1;
            if !ok {
                return Ok((false, k + 1));
            }
            scratch.resize(r.len(), 0.0);
            sys.mass_matvec(b, &wz[r.clone()], &mut scratch);
            for (gi, mi) in g.iter_mut().zip(&scratch) {
                *gi -= mi / dt;
            }
            if !state.flags.mjcontrol {
                sys.refresh_mass(b, stage.t, w)?;
                if !admissible(sys.refresh_jacobian(b, stage.t, w))? {
                    return Ok((false, k + 1));
                }
                sys.factor(b, dt, gamma)?;
                state.stats.factorizations += 1;
            }
            sys.solve(b, g)?;
            for i in r.clone() {
                wz[i] += delta[i];
                w[i] += gamma * delta[i];
            }
            if !admissible(sys.after_block(b, stage.t, w))? {
                return Ok((false, k + 1));
            }
        }
        let res =
            delta.iter().zip(w.iter()).zip(&state.sc).fold(0.0f64, |m, ((d, wi), s)| m.max(d.abs() / s.max(wi.abs())));
        if !res.is_finite() {
            return Ok((false, k + 1));
        }
        if !p.adaptive {
            if res <= res_min || res <= p.kappa_n * p.tol_n {
                return Ok((true, k + 1));
            }
            continue;
        }
        match newton_converged(res, res_old, &mut state.theta, k, &mut state.flags.need_new_rate, &ctx, p) {
            NewtonStatus::Converged => return Ok((true, k + 1)),
            NewtonStatus::Reject => return Ok((false, k + 1)),
            NewtonStatus::Continue => {}
        }
        res_old = res;
    }
    Ok((false, cap + 1))
}

/// `Ok(false)` when an iterate left the state space (e.g. a nonpositive
/// concentration), which fails the stage instead of aborting the run.
fn admissible(r: Result<()>) -> Result<bool> {
    match r {
        Ok(()) => Ok(true),
        Err(Error::State(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn update_scale(sc: &mut [f64], w: &[f64]) {
    for (s, x) in sc.iter_mut().zip(w) {
        *s = s.max(x.abs());
    }
}

/// One TR-BDF2 attempt (Algorithm 2).
pub fn trbdf2_step<S: StageSystem + ?Sized>(
    sys: &mut S,
    state: &mut StepState,
    p: &ControllerParams,
) -> Result<StepOutcome> {
    let tab = Tableau::new();
    let gamma = tab.gamma;
    let n = state.w.len();
    let eta = p.eta();
    for (s, x) in state.sc.iter_mut().zip(&state.w) {
        *s = x.abs().max(eta);
    }
    sys.checkpoint();
    mj_control(sys, state, gamma)?;

    let dt = state.dt;
    let t_ng = state.t + 2.0 * gamma * dt;
    let mut wz_ng = state.wz.clone();
    let mut w_ng: Vec<f64> = (0..n).map(|i| state.w[i] + 2.0 * gamma * state.wz[i]).collect();
    let (ok1, it1) = newton_stage(sys, state, Stage { t: t_ng, first: true }, &mut w_ng, &mut wz_ng, gamma, p)?;

    let mut iters = [it1, 0];
    let mut stage_ok = ok1;
    let mut cause = Cause::S1;
    let mut w_new = Vec::new();
    let mut wz_new = Vec::new();
    if ok1 {
        update_scale(&mut state.sc, &w_ng);
        let [p31, p32, p33] = tab.predictor();
        wz_new = (0..n).map(|i| p31 * state.wz[i] + p32 * wz_ng[i] + p33 * (w_ng[i] - state.w[i])).collect();
        w_new = (0..n).map(|i| state.w[i] + tab.b[0] * state.wz[i] + tab.b[1] * wz_ng[i] + gamma * wz_new[i]).collect();
        let (ok2, it2) =
            newton_stage(sys, state, Stage { t: state.t + dt, first: false }, &mut w_new, &mut wz_new, gamma, p)?;
        iters[1] = it2;
        stage_ok = ok2;
        cause = Cause::S2;
    }

    if !stage_ok {
        sys.restore();
        if !p.adaptive {
            return Err(Error::Abort(format!("Newton iteration failed at t={} with fixed step {dt}", state.t)));
        }
        let f = &mut state.flags;
        if f.mjcontrol && !(f.j_current && f.m_current) {
            f.need_new_j = !f.j_current;
            f.need_new_m = !f.m_current;
        } else {
            shrink(state, p.fac_s1s2 * dt, p)?;
        }
        reject(state, p)?;
        return Ok(StepOutcome::Rejected { cause, err: f64::NAN, iters });
    }

    update_scale(&mut state.sc, &w_new);
    let ew = tab.error_weights();
    let e1: Vec<f64> = (0..n).map(|i| ew[0] * state.wz[i] + ew[1] * wz_ng[i] + ew[2] * wz_new[i]).collect();
    let t_new = state.t + dt;
    let mut e2 = vec![0.0; n];
    for b in 0..sys.num_blocks() {
        let r = sys.block_range(b);
        if !state.flags.mjcontrol {
            sys.refresh_mass(b, t_new, &w_new)?;
            sys.refresh_jacobian(b, t_new, &w_new)?;
            sys.factor(b, dt, gamma)?;
            state.stats.factorizations += 1;
        }
        let mut x = vec![0.0; r.len()];
        sys.mass_matvec(b, &e1[r.clone()], &mut x);
        x.iter_mut().for_each(|v| *v /= dt);
        sys.solve(b, &mut x)?;
        e2[r].copy_from_slice(&x);
    }
    let err = scaled_norm(&e2, &state.sc).max(scaled_norm(&e1, &state.sc) / 16.0);

    if p.adaptive && !(err <= p.r_tol) {
        sys.restore();
        let factor = if err.is_finite() { p.fac_min.max(p.fac * (p.r_tol / err).powf(p.k_i)) } else { p.fac_min };
        shrink(state, dt * factor, p)?;
        reject(state, p)?;
        return Ok(StepOutcome::Rejected { cause: Cause::Err, err, iters });
    }

    state.t = t_new;
    state.w = w_new;
    state.wz = wz_new;
    state.stats.accepted += 1;
    state.consecutive_rejections = 0;
    Ok(StepOutcome::Accepted { err, iters })
}

fn shrink(state: &mut StepState, dt: f64, p: &ControllerParams) -> Result<()> {
    let dt_min = p.epsilon * state.t.abs();
    let dt = dt.max(dt_min);
    if dt <= dt_min {
        return Err(Error::Abort(format!("step size {dt:e} reached the floor {dt_min:e} at t={}", state.t)));
    }
    state.set_dt(dt);
    state.flags.need_new_mj = true;
    Ok(())
}

fn reject(state: &mut StepState, p: &ControllerParams) -> Result<()> {
    state.stats.rejected += 1;
    state.consecutive_rejections += 1;
    if state.consecutive_rejections > p.max_rejections {
        return Err(Error::Abort(format!("{} consecutive rejections at t={}", state.consecutive_rejections, state.t)));
    }
    Ok(())
}

/// Growth/shrink after an accepted step: `ratio = (R_TOL / err)^{k_I}` clamped
/// to `[ratio_min, ratio_max]`, applied when `|ratio - 1| > ratio_min`.
/// Returns the applied ratio (1 when unchanged).
pub fn accept_and_rescale(state: &mut StepState, err: f64, p: &ControllerParams) -> f64 {
    state.flags.j_current = false;
    if !p.adaptive {
        return 1.0;
    }
    let ratio = if err > 0.0 { (p.r_tol / err).powf(p.k_i) } else { p.ratio_max };
    let ratio = ratio.clamp(p.ratio_min, p.ratio_max);
    if (ratio - 1.0).abs() > p.ratio_min {
        state.set_dt(ratio * state.dt);
        ratio
    } else {
        1.0
    }
}

/// Advances to `t_final`, calling `on_accept(sys, state)` after every accepted
/// step (before the step size is rescaled). Returns the step log.
pub fn integrate<S, F>(
    sys: &mut S,
    state: &mut StepState,
    t_final: f64,
    p: &ControllerParams,
    mut on_accept: F,
) -> Result<Vec<StepRecord>>
where
    S: StageSystem + ?Sized,
    F: FnMut(&mut S, &mut StepState) -> Result<()>,
{
    let mut log = Vec::new();
    let tiny = 1e-12 * t_final.abs().max(1.0);
    while state.t < t_final - tiny {
        prepare_step(state, t_final, p);
        let (t0, dt) = (state.t, state.dt);
        match trbdf2_step(sys, state, p)? {
            StepOutcome::Accepted { err, iters } => {
                log.push(StepRecord { t: t0, dt, err, accepted: true, iters, cause: Cause::None });
                on_accept(sys, state)?;
                accept_and_rescale(state, err, p);
            }
            StepOutcome::Rejected { cause, err, iters } => {
                log.push(StepRecord { t: t0, dt, err, accepted: false, iters, cause });
            }
        }
    }
    Ok(log)
}

type RhsFn = Box<dyn FnMut(f64, &[f64], &mut [f64])>;
type JacFn = Box<dyn FnMut(f64, &[f64]) -> Vec<Vec<f64>>>;

/// Single-block dense system `w' = f(t, w)` with identity mass, for tests and
/// scripting.
pub struct DenseOdeSystem {
    n: usize,
    f: RhsFn,
    jac: JacFn,
    j: Vec<Vec<f64>>,
    lu: Option<LuFactor>,
}

impl DenseOdeSystem {
    pub fn new(
        n: usize,
        f: impl FnMut(f64, &[f64], &mut [f64]) + 'static,
        jac: impl FnMut(f64, &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Self {
        DenseOdeSystem { n, f: Box::new(f), jac: Box::new(jac), j: vec![vec![0.0; n]; n], lu: None }
    }
}

impl StageSystem for DenseOdeSystem {
    fn len(&self) -> usize {
        self.n
    }

    fn num_blocks(&self) -> usize {
        1
    }

    fn block_range(&self, _b: usize) -> Range<usize> {
        0..self.n
    }

    fn rhs(&mut self, _b: usize, t: f64, w: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, w, out);
        Ok(())
    }

    fn mass_matvec(&self, _b: usize, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn refresh_mass(&mut self, _b: usize, _t: f64, _w: &[f64]) -> Result<()> {
        Ok(())
    }

    fn refresh_jacobian(&mut self, _b: usize, t: f64, w: &[f64]) -> Result<()> {
        self.j = (self.jac)(t, w);
        Ok(())
    }

    fn factor(&mut self, _b: usize, dt: f64, gamma: f64) -> Result<()> {
        let rows: Vec<Vec<f64>> = (0..self.n)
            .map(|i| (0..self.n).map(|k| if i == k { 1.0 / dt } else { 0.0 } - gamma * self.j[i][k]).collect())
            .collect();
        self.lu = Some(LuFactor::new(&SparseMatrix::from_dense(&rows)?)?);
        Ok(())
    }

    fn solve(&self, _b: usize, rhs: &mut [f64]) -> Result<()> {
        match &self.lu {
            Some(lu) => lu.solve_in_place(rhs),
            None => bail!(State, "iteration matrix has not been factorised"),
        }
    }

    fn solve_mass(&self, _b: usize, _rhs: &mut [f64]) -> Result<()> {
        Ok(())
    }
}
