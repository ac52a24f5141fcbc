//! Periodic-orbit analysis: section returns, period estimation, waveform
//! classification, shooting refinement with Floquet multipliers, the largest
//! Lyapunov exponent, and the attractor verdict pipeline built on top.
//!
//! The Poincare section is the half-plane `py = 0, px > 0`, crossed in the
//! direction the flow actually rotates (`py` decreasing); the linear part of
//! the motion winds clockwise in the `(px, py)` plane, so this is the
//! orientation a limit cycle pierces once per loop. Crossings are located to
//! fourth order in the sample spacing by fitting a cubic through the four
//! samples around each sign change.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{integrate_fixed, FixedOpts, IntegrateError, Trajectory};
use crate::model::{jacobian, rhs, DimensionlessParams, SpinState};

/// Return-map residual below which a tail counts as periodic.
pub const DELTA_PER: f64 = 1e-5;
/// Dead band around `|mu| = 1` for stability calls on multipliers.
pub const EPS_FLOQUET: f64 = 1e-3;
/// Upper bound of the "weakly unstable" multiplier screen.
pub const WEAK_MULTIPLIER_CAP: f64 = 2.0;
/// Speed below which the flow has reached a fixed point.
pub const DELTA_FP: f64 = 1e-8;
/// Lyapunov exponent above which a non-periodic tail counts as chaotic.
pub const EPS_LYAP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("found {found} section crossings, need at least {need}")]
    TooFewCrossings { found: usize, need: usize },
    #[error("peak count inconsistent: modal value holds in only {modal_share:.0}% of half-cycles")]
    Inconsistent { modal_share: f64 },
    #[error("shooting left the domain ({what})")]
    LeftDomain { what: &'static str },
    #[error("shooting stalled after {iterations} iterations at residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular shooting system")]
    Singular,
    #[error("{name} must be finite and > 0, got {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// One transit of the section, located between samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub tau: f64,
    pub state: SpinState,
}

/// Cubic Lagrange basis on nodes {0, 1, 2, 3}.
fn lagrange4(v: [f64; 4], u: f64) -> f64 {
    let l0 = -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0;
    let l1 = u * (u - 2.0) * (u - 3.0) / 2.0;
    let l2 = -u * (u - 1.0) * (u - 3.0) / 2.0;
    let l3 = u * (u - 1.0) * (u - 2.0) / 6.0;
    v[0] * l0 + v[1] * l1 + v[2] * l2 + v[3] * l3
}

/// All section transits of a uniformly sampled trajectory.
pub fn section_crossings(traj: &Trajectory) -> Vec<Crossing> {
    let n = traj.len();
    let mut out = Vec::new();
    if n < 4 {
        return out;
    }
    let py = |i: usize| traj.samples[i].py;
    for k in 0..n - 1 {
        // descending transit of py = 0
        if !(py(k) > 0.0 && py(k + 1) <= 0.0) {
            continue;
        }
        let s = k.saturating_sub(1).min(n - 4);
        let grab = |f: fn(&SpinState) -> f64| -> [f64; 4] {
            [
                f(&traj.samples[s]),
                f(&traj.samples[s + 1]),
                f(&traj.samples[s + 2]),
                f(&traj.samples[s + 3]),
            ]
        };
        let vy = grab(|s| s.py);
        let (mut a, mut b) = ((k - s) as f64, (k - s + 1) as f64);
        // the cubic reproduces the bracketing samples, so bisection is safe
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if lagrange4(vy, m) > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        let u = 0.5 * (a + b);
        let px = lagrange4(grab(|s| s.px), u);
        if px <= 0.0 {
            continue;
        }
        let pz = lagrange4(grab(|s| s.pz), u);
        out.push(Crossing {
            tau: traj.time_at(s) + u * traj.dt,
            state: SpinState::new(px, lagrange4(vy, u), pz),
        });
    }
    out
}

/// Period statistics from section returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    pub period: f64,
    /// Largest distance between section states one lag apart.
    pub residual: f64,
    pub crossings: usize,
    /// How many crossings one full period spans.
    pub lag: usize,
}

fn crossings_in_tail(traj: &Trajectory, tail_fraction: f64) -> Vec<Crossing> {
    let t_start = traj.time_at(traj.tail_start(tail_fraction));
    section_crossings(traj)
        .into_iter()
        .filter(|c| c.tau >= t_start)
        .collect()
}

fn estimate_at_lag(cr: &[Crossing], lag: usize) -> PeriodEstimate {
    let n = cr.len();
    let spans = n - lag;
    let mut period = 0.0;
    let mut residual = 0.0f64;
    for i in 0..spans {
        period += cr[i + lag].tau - cr[i].tau;
        residual = residual.max(cr[i + lag].state.distance(&cr[i].state));
    }
    PeriodEstimate {
        period: period / spans as f64,
        residual,
        crossings: n,
        lag,
    }
}

/// Mean section-return time and return-map residual over the trailing
/// `tail_fraction` of the trajectory (at least 8 crossings required).
pub fn estimate_period(traj: &Trajectory, tail_fraction: f64) -> Result<PeriodEstimate, OrbitError> {
    let cr = crossings_in_tail(traj, tail_fraction);
    if cr.len() < 8 {
        return Err(OrbitError::TooFewCrossings { found: cr.len(), need: 8 });
    }
    Ok(estimate_at_lag(&cr, 1))
}

/// Like [`estimate_period`] but tries return lags up to `max_lag` and keeps
/// the shortest lag whose residual clears [`DELTA_PER`] (falling back to the
/// smallest residual). Covers orbits that pierce the section several times per
/// period.
pub fn estimate_period_lagged(
    traj: &Trajectory,
    tail_fraction: f64,
    max_lag: usize,
) -> Result<PeriodEstimate, OrbitError> {
    let cr = crossings_in_tail(traj, tail_fraction);
    if cr.len() < 8 {
        return Err(OrbitError::TooFewCrossings { found: cr.len(), need: 8 });
    }
    let mut best: Option<PeriodEstimate> = None;
    for lag in 1..=max_lag.max(1) {
        if cr.len() < lag + 4 {
            break;
        }
        let est = estimate_at_lag(&cr, lag);
        if est.residual <= DELTA_PER {
            return Ok(est);
        }
        if best.is_none_or(|b| est.residual < b.residual) {
            best = Some(est);
        }
    }
    Ok(best.expect("at least lag 1 evaluated"))
}

/// Count strict, prominent maxima of `px` per positive half-cycle (between an
/// ascending and the next descending zero of `px`) and return the modal count.
/// Prominence must reach 5% of the tail's peak-to-peak swing; at least 10
/// half-cycles must be present and at least 80% of them must agree.
pub fn peaks_per_half_cycle(traj: &Trajectory, period: f64) -> Result<u32, OrbitError> {
    if !(period.is_finite() && period > 0.0) {
        return Err(OrbitError::BadParam { name: "period", value: period });
    }
    // look at the last ~20 periods so early transients cannot vote
    let span = traj.t_end() - traj.t0;
    let start = if span > 20.0 * period {
        traj.len() - ((20.0 * period / traj.dt) as usize).min(traj.len())
    } else {
        0
    };
    let px: Vec<f64> = traj.samples[start..].iter().map(|s| s.px).collect();
    let (lo, hi) = px
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let prominence_floor = 0.05 * (hi - lo);

    // ascending/descending zeros of px delimit the half-cycles
    let mut counts: Vec<u32> = Vec::new();
    let mut lobe_start: Option<usize> = None;
    for k in 0..px.len() - 1 {
        if px[k] <= 0.0 && px[k + 1] > 0.0 {
            lobe_start = Some(k + 1);
        } else if px[k] > 0.0 && px[k + 1] <= 0.0 {
            if let Some(a) = lobe_start.take() {
                if k > a + 3 {
                    counts.push(prominent_maxima(&px[a..=k], prominence_floor));
                }
            }
        }
    }
    if counts.len() < 10 {
        return Err(OrbitError::TooFewCrossings { found: counts.len(), need: 10 });
    }
    let mut tally = std::collections::BTreeMap::new();
    for &c in &counts {
        *tally.entry(c).or_insert(0usize) += 1;
    }
    let (&modal, &votes) = tally.iter().max_by_key(|(_, &v)| v).unwrap();
    let modal_share = votes as f64 / counts.len() as f64;
    if modal_share < 0.8 {
        return Err(OrbitError::Inconsistent { modal_share: 100.0 * modal_share });
    }
    Ok(modal)
}

fn prominent_maxima(seg: &[f64], floor: f64) -> u32 {
    let mut count = 0;
    for j in 1..seg.len() - 1 {
        if !(seg[j] > seg[j - 1] && seg[j] > seg[j + 1]) {
            continue;
        }
        // walk outward until a higher sample appears; the prominence is the
        // rise above the deeper of the two intervening valleys
        let mut left_min = seg[j];
        let mut i = j;
        while i > 0 && seg[i - 1] <= seg[j] {
            i -= 1;
            left_min = left_min.min(seg[i]);
        }
        let mut right_min = seg[j];
        let mut i = j;
        while i + 1 < seg.len() && seg[i + 1] <= seg[j] {
            i += 1;
            right_min = right_min.min(seg[i]);
        }
        if seg[j] - left_min.max(right_min) >= floor {
            count += 1;
        }
    }
    count
}

/// Waveform family of a cycle, by peaks per positive half-cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleClass {
    /// Single-peaked waveform (one maximum per half-cycle).
    Lc1,
    /// Double-peaked waveform.
    Lc2,
    Other(u32),
}

impl CycleClass {
    fn from_peaks(n: u32) -> Self {
        match n {
            1 => CycleClass::Lc1,
            2 => CycleClass::Lc2,
            k => CycleClass::Other(k),
        }
    }
}

/// A refined periodic orbit, anchored on the section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    /// Section point (`py = 0`) the orbit returns to.
    pub anchor: SpinState,
    pub period: f64,
    /// Eigenvalues of the one-period monodromy matrix.
    pub multipliers: [Complex64; 3],
    pub cycle_class: CycleClass,
    /// Both nontrivial multipliers inside the unit circle by [`EPS_FLOQUET`].
    pub stable: bool,
    /// Distance of the closest multiplier from 1; above 1e-4 the orbit fails
    /// the consistency check every true cycle must satisfy.
    pub unit_multiplier_gap: f64,
    /// `|Phi_T(anchor) - anchor|` of the converged shooting iterate.
    pub return_residual: f64,
    /// Relative mismatch between `det M` and `exp(integral of tr J)`.
    pub abel_liouville_gap: f64,
}

impl PeriodicOrbit {
    /// Largest multiplier magnitude excluding the trivial one along the flow.
    pub fn max_nontrivial_multiplier(&self) -> f64 {
        let mut by_unit_distance = self.multipliers;
        by_unit_distance.sort_by(|a, b| {
            (a - 1.0).norm().partial_cmp(&(b - 1.0).norm()).unwrap()
        });
        by_unit_distance[1].norm().max(by_unit_distance[2].norm())
    }

    /// Slightly repelling: the screen for orbits that shed trajectories slowly.
    pub fn weakly_unstable(&self) -> bool {
        let mu = self.max_nontrivial_multiplier();
        mu > 1.0 + EPS_FLOQUET && mu < WEAK_MULTIPLIER_CAP
    }

    pub fn flagged(&self) -> bool {
        self.unit_multiplier_gap > 1e-4
    }
}

const SHOOT_DT: f64 = 5e-4;
const SHOOT_TOL: f64 = 1e-11;
const SHOOT_MAX_ITER: usize = 30;
const PERIOD_MIN: f64 = 0.3;
const PERIOD_MAX: f64 = 60.0;

/// One RK4 pass of state + variational matrix + trace integral over `[0, t]`.
fn flow_with_monodromy(
    y0: &SpinState,
    t: f64,
    p: &DimensionlessParams,
) -> (SpinState, Matrix3<f64>, f64) {
    let n = ((t / SHOOT_DT).ceil() as usize).max(400);
    let dt = t / n as f64;
    let mut z = [0.0f64; 13];
    z[0] = y0.px;
    z[1] = y0.py;
    z[2] = y0.pz;
    z[3] = 1.0;
    z[7] = 1.0;
    z[11] = 1.0;
    let deriv = |z: &[f64; 13]| -> [f64; 13] {
        let s = SpinState::new(z[0], z[1], z[2]);
        let f = rhs(&s, p, 1.0);
        let j = jacobian(&s, p);
        let mut d = [0.0f64; 13];
        d[0] = f.px;
        d[1] = f.py;
        d[2] = f.pz;
        for row in 0..3 {
            for col in 0..3 {
                let mut acc = 0.0;
                for m in 0..3 {
                    acc += j[(row, m)] * z[3 + 3 * m + col];
                }
                d[3 + 3 * row + col] = acc;
            }
        }
        d[12] = j.trace();
        d
    };
    for _ in 0..n {
        let k1 = deriv(&z);
        let mut z2 = z;
        for i in 0..13 {
            z2[i] = z[i] + 0.5 * dt * k1[i];
        }
        let k2 = deriv(&z2);
        for i in 0..13 {
            z2[i] = z[i] + 0.5 * dt * k2[i];
        }
        let k3 = deriv(&z2);
        for i in 0..13 {
            z2[i] = z[i] + dt * k3[i];
        }
        let k4 = deriv(&z2);
        for i in 0..13 {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let monodromy = Matrix3::from_fn(|r, c| z[3 + 3 * r + c]);
    (SpinState::new(z[0], z[1], z[2]), monodromy, z[12])
}

fn flow_only(y0: &SpinState, t: f64, p: &DimensionlessParams) -> SpinState {
    let n = ((t / SHOOT_DT).ceil() as usize).max(400);
    let dt = t / n as f64;
    let mut s = *y0;
    for _ in 0..n {
        s = crate::integrate::rk4_step(&s, p, dt, 1.0);
    }
    s
}

/// Newton shooting on the section return map with unknowns `(px, pz, period)`.
/// The guess anchor is projected onto the section (`py` forced to 0).
pub fn refine_orbit(
    anchor_guess: &SpinState,
    period_guess: f64,
    p: &DimensionlessParams,
) -> Result<PeriodicOrbit, OrbitError> {
    if !(period_guess.is_finite() && period_guess > 0.0) {
        return Err(OrbitError::BadParam { name: "period_guess", value: period_guess });
    }
    let mut u = [anchor_guess.px, anchor_guess.pz, period_guess];
    let mut rnorm = f64::INFINITY;
    for iteration in 0..SHOOT_MAX_ITER {
        if !(u.iter().all(|v| v.is_finite())) {
            return Err(OrbitError::LeftDomain { what: "non-finite iterate" });
        }
        if u[2] < PERIOD_MIN || u[2] > PERIOD_MAX {
            return Err(OrbitError::LeftDomain { what: "period left its allowed range" });
        }
        if u[0].abs().max(u[1].abs()) > 1e3 {
            return Err(OrbitError::LeftDomain { what: "anchor far outside the attractor region" });
        }
        let y0 = SpinState::new(u[0], 0.0, u[1]);
        let (yt, monodromy, trace_integral) = flow_with_monodromy(&y0, u[2], p);
        let residual = yt - y0;
        rnorm = residual.norm();
        if rnorm <= SHOOT_TOL {
            return finish_orbit(&y0, u[2], &monodromy, trace_integral, rnorm, p);
        }
        let ft = rhs(&yt, p, 1.0);
        let shoot = Matrix3::from_columns(&[
            Vector3::new(monodromy[(0, 0)] - 1.0, monodromy[(1, 0)], monodromy[(2, 0)]),
            Vector3::new(monodromy[(0, 2)], monodromy[(1, 2)], monodromy[(2, 2)] - 1.0),
            Vector3::new(ft.px, ft.py, ft.pz),
        ]);
        let b = -Vector3::new(residual.px, residual.py, residual.pz);
        let delta = shoot.lu().solve(&b).ok_or(OrbitError::Singular)?;
        // halve until the residual shrinks
        let mut lambda = 1.0;
        let mut advanced = false;
        for _ in 0..6 {
            let trial = [
                u[0] + lambda * delta[0],
                u[1] + lambda * delta[1],
                u[2] + lambda * delta[2],
            ];
            if trial[2] > PERIOD_MIN && trial[2] < PERIOD_MAX {
                let t0 = SpinState::new(trial[0], 0.0, trial[1]);
                let tres = (flow_only(&t0, trial[2], p) - t0).norm();
                if tres.is_finite() && tres < rnorm {
                    u = trial;
                    advanced = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !advanced {
            return Err(OrbitError::NoConvergence { iterations: iteration + 1, residual: rnorm });
        }
    }
    Err(OrbitError::NoConvergence { iterations: SHOOT_MAX_ITER, residual: rnorm })
}

fn finish_orbit(
    anchor: &SpinState,
    period: f64,
    monodromy: &Matrix3<f64>,
    trace_integral: f64,
    return_residual: f64,
    p: &DimensionlessParams,
) -> Result<PeriodicOrbit, OrbitError> {
    let eig = monodromy.complex_eigenvalues();
    let multipliers = [eig[0], eig[1], eig[2]];
    let unit_multiplier_gap = multipliers
        .iter()
        .map(|m| (m - 1.0).norm())
        .fold(f64::INFINITY, f64::min);
    let expected_det = trace_integral.exp();
    let abel_liouville_gap =
        (monodromy.determinant() - expected_det).abs() / expected_det.abs().max(f64::MIN_POSITIVE);

    let mut by_unit_distance = multipliers;
    by_unit_distance.sort_by(|a, b| (a - 1.0).norm().partial_cmp(&(b - 1.0).norm()).unwrap());
    let stable = by_unit_distance[1].norm() < 1.0 - EPS_FLOQUET
        && by_unit_distance[2].norm() < 1.0 - EPS_FLOQUET;

    // classify the waveform from one exact period, tiled to give the counter
    // enough half-cycles
    let n = ((period / 1e-3).ceil() as usize).max(64);
    let dt = period / n as f64;
    let mut s = *anchor;
    let mut one_period = Vec::with_capacity(n + 1);
    one_period.push(s);
    for _ in 0..n {
        s = crate::integrate::rk4_step(&s, p, dt, 1.0);
        one_period.push(s);
    }
    let mut samples = Vec::with_capacity(13 * n + 1);
    for _ in 0..13 {
        samples.extend_from_slice(&one_period[..n]);
    }
    samples.push(one_period[n]);
    let tiled = Trajectory { t0: 0.0, dt, samples };
    let cycle_class = CycleClass::from_peaks(peaks_per_half_cycle(&tiled, period)?);

    Ok(PeriodicOrbit {
        anchor: *anchor,
        period,
        multipliers,
        cycle_class,
        stable,
        unit_multiplier_gap,
        return_residual,
        abel_liouville_gap,
    })
}

/// Floquet data recomputed for an existing orbit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloquetReport {
    pub multipliers: [Complex64; 3],
    pub det_monodromy: f64,
    /// `integral of tr J` around the orbit.
    pub trace_integral: f64,
    pub abel_liouville_gap: f64,
}

/// Multipliers of a known orbit from one variational pass around it.
pub fn floquet_multipliers(
    orbit: &PeriodicOrbit,
    p: &DimensionlessParams,
) -> Result<FloquetReport, OrbitError> {
    if !(orbit.period.is_finite() && orbit.period > 0.0) {
        return Err(OrbitError::BadParam { name: "period", value: orbit.period });
    }
    let (_, monodromy, trace_integral) = flow_with_monodromy(&orbit.anchor, orbit.period, p);
    let eig = monodromy.complex_eigenvalues();
    let det = monodromy.determinant();
    let expected = trace_integral.exp();
    Ok(FloquetReport {
        multipliers: [eig[0], eig[1], eig[2]],
        det_monodromy: det,
        trace_integral,
        abel_liouville_gap: (det - expected).abs() / expected.abs().max(f64::MIN_POSITIVE),
    })
}

/// Settings for [`largest_lyapunov`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapOpts {
    pub t_total: f64,
    pub renorm_every: f64,
    pub dt: f64,
    /// Settling time integrated before the tangent dynamics starts.
    pub transient: f64,
    /// Leading fraction of the accumulation discarded as tangent transient.
    pub discard: f64,
}

impl Default for LyapOpts {
    fn default() -> Self {
        Self {
            t_total: 2000.0,
            renorm_every: 1.0,
            dt: 1e-3,
            transient: 200.0,
            discard: 0.2,
        }
    }
}

/// Largest Lyapunov exponent by tangent-vector growth with periodic
/// renormalization.
pub fn largest_lyapunov(
    p: &DimensionlessParams,
    state0: &SpinState,
    opts: &LyapOpts,
) -> Result<f64, OrbitError> {
    for (name, value) in [
        ("t_total", opts.t_total),
        ("renorm_every", opts.renorm_every),
        ("dt", opts.dt),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(OrbitError::BadParam { name, value });
        }
    }
    let mut s = *state0;
    if opts.transient > 0.0 {
        let n = (opts.transient / opts.dt).round() as usize;
        for k in 0..n {
            s = crate::integrate::rk4_step(&s, p, opts.dt, 1.0);
            if !s.is_finite() || s.norm() > 1e6 {
                return Err(OrbitError::Integrate(IntegrateError::Diverged {
                    tau: k as f64 * opts.dt,
                    bound: 1e6,
                }));
            }
        }
    }
    let steps_per_event = (opts.renorm_every / opts.dt).round().max(1.0) as usize;
    let events = (opts.t_total / opts.renorm_every).round().max(1.0) as usize;
    let mut v = [1.0f64, 0.0, 0.0];
    let mut logs = Vec::with_capacity(events);
    let deriv = |z: &[f64; 6]| -> [f64; 6] {
        let st = SpinState::new(z[0], z[1], z[2]);
        let f = rhs(&st, p, 1.0);
        let j = jacobian(&st, p);
        [
            f.px,
            f.py,
            f.pz,
            j[(0, 0)] * z[3] + j[(0, 1)] * z[4] + j[(0, 2)] * z[5],
            j[(1, 0)] * z[3] + j[(1, 1)] * z[4] + j[(1, 2)] * z[5],
            j[(2, 0)] * z[3] + j[(2, 1)] * z[4] + j[(2, 2)] * z[5],
        ]
    };
    for event in 0..events {
        let mut z = [s.px, s.py, s.pz, v[0], v[1], v[2]];
        for _ in 0..steps_per_event {
            let k1 = deriv(&z);
            let mut z2 = z;
            for i in 0..6 {
                z2[i] = z[i] + 0.5 * opts.dt * k1[i];
            }
            let k2 = deriv(&z2);
            for i in 0..6 {
                z2[i] = z[i] + 0.5 * opts.dt * k2[i];
            }
            let k3 = deriv(&z2);
            for i in 0..6 {
                z2[i] = z[i] + opts.dt * k3[i];
            }
            let k4 = deriv(&z2);
            for i in 0..6 {
                z[i] += opts.dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s = SpinState::new(z[0], z[1], z[2]);
        if !s.is_finite() || s.norm() > 1e6 {
            return Err(OrbitError::Integrate(IntegrateError::Diverged {
                tau: opts.transient + (event + 1) as f64 * opts.renorm_every,
                bound: 1e6,
            }));
        }
        let growth = (z[3] * z[3] + z[4] * z[4] + z[5] * z[5]).sqrt();
        logs.push(growth.ln());
        v = [z[3] / growth, z[4] / growth, z[5] / growth];
    }
    let skip = ((opts.discard * events as f64) as usize).min(events - 1);
    let kept = &logs[skip..];
    Ok(kept.iter().sum::<f64>() / (kept.len() as f64 * opts.renorm_every))
}

/// How [`detect_attractor`] integrates, settles, and decides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectProtocol {
    pub transient: f64,
    /// Analysis window integrated after the transient.
    pub window: f64,
    pub dt: f64,
    /// Output thinning for the analysis window.
    pub stride: usize,
    pub tail_fraction: f64,
    /// Times the transient is doubled when the verdict stays open.
    pub settle_doublings: u32,
    /// Half peak-to-peak swing of `px` below which nothing oscillates.
    pub min_amplitude: f64,
    pub delta_fp: f64,
    pub delta_per: f64,
    pub eps_lyap: f64,
    pub max_lag: usize,
    pub lyap: LyapOpts,
    pub divergence_bound: f64,
}

impl Default for DetectProtocol {
    fn default() -> Self {
        Self {
            transient: 200.0,
            window: 300.0,
            dt: 1e-3,
            stride: 10,
            tail_fraction: 0.5,
            settle_doublings: 2,
            min_amplitude: 1e-3,
            delta_fp: DELTA_FP,
            delta_per: DELTA_PER,
            eps_lyap: EPS_LYAP,
            max_lag: 4,
            lyap: LyapOpts { transient: 0.0, ..Default::default() },
            divergence_bound: 1e6,
        }
    }
}

/// What the long-time behavior settled into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttractorLabel {
    FixedPoint(SpinState),
    LimitCycle(PeriodicOrbit),
    Chaotic,
    Undecided,
}

/// Diagnostics backing a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttractorEvidence {
    /// `|rhs|` at the end of the transient.
    pub terminal_speed: f64,
    /// Half peak-to-peak swing of `px` over the analysis tail.
    pub amplitude: f64,
    pub period: Option<f64>,
    pub return_residual: Option<f64>,
    pub lyapunov: Option<f64>,
    /// Transient actually integrated before the verdict.
    pub transient_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorVerdict {
    pub label: AttractorLabel,
    pub evidence: AttractorEvidence,
}

/// Settle, then decide between fixed point, limit cycle and chaos; the
/// transient is doubled (up to `2^settle_doublings`) whenever the window
/// supports no call.
pub fn detect_attractor(
    p: &DimensionlessParams,
    state0: &SpinState,
    protocol: &DetectProtocol,
) -> Result<AttractorVerdict, OrbitError> {
    let mut evidence = AttractorEvidence::default();
    for doubling in 0..=protocol.settle_doublings {
        let transient = protocol.transient * f64::powi(2.0, doubling as i32);
        let settle = integrate_fixed(
            state0,
            p,
            &FixedOpts {
                dt: protocol.dt,
                t_end: transient,
                stride: usize::MAX,
                divergence_bound: protocol.divergence_bound,
                noise: None,
            },
        )?;
        let settled = settle.last();
        evidence.transient_used = transient;
        evidence.terminal_speed = rhs(&settled, p, 1.0).norm();
        if evidence.terminal_speed <= protocol.delta_fp {
            let point = crate::equilibria::refine_fixed_point(&settled, p).unwrap_or(settled);
            return Ok(AttractorVerdict {
                label: AttractorLabel::FixedPoint(point),
                evidence,
            });
        }

        let window = integrate_fixed(
            &settled,
            p,
            &FixedOpts {
                dt: protocol.dt,
                t_end: protocol.window,
                stride: protocol.stride,
                divergence_bound: protocol.divergence_bound,
                noise: None,
            },
        )?;
        let tail = &window.samples[window.tail_start(protocol.tail_fraction)..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.px), hi.max(s.px))
            });
        evidence.amplitude = 0.5 * (hi - lo);
        if evidence.amplitude < protocol.min_amplitude {
            // not oscillating and not yet stationary: keep settling
            evidence.terminal_speed = rhs(&window.last(), p, 1.0).norm();
            if evidence.terminal_speed <= protocol.delta_fp {
                let point =
                    crate::equilibria::refine_fixed_point(&window.last(), p).unwrap_or(window.last());
                return Ok(AttractorVerdict {
                    label: AttractorLabel::FixedPoint(point),
                    evidence,
                });
            }
            continue;
        }

        match estimate_period_lagged(&window, protocol.tail_fraction, protocol.max_lag) {
            Ok(est) => {
                evidence.period = Some(est.period);
                evidence.return_residual = Some(est.residual);
                if est.residual <= protocol.delta_per {
                    let crossings = crossings_in_tail(&window, protocol.tail_fraction);
                    let anchor = crossings.last().expect("estimate implies crossings").state;
                    match refine_orbit(&anchor, est.period, p) {
                        Ok(orbit) => {
                            return Ok(AttractorVerdict {
                                label: AttractorLabel::LimitCycle(orbit),
                                evidence,
                            })
                        }
                        Err(_) => continue, // settle longer before giving up
                    }
                }
            }
            Err(OrbitError::TooFewCrossings { .. }) => continue,
            Err(e) => return Err(e),
        }

        let lambda = largest_lyapunov(p, &window.last(), &protocol.lyap)?;
        evidence.lyapunov = Some(lambda);
        if lambda > protocol.eps_lyap {
            return Ok(AttractorVerdict { label: AttractorLabel::Chaotic, evidence });
        }
    }
    Ok(AttractorVerdict { label: AttractorLabel::Undecided, evidence })
}
