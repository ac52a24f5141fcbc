//! Equilibria of the feedback equations, their stability, and the analytic
//! instability boundaries of the pumped steady state.
//!
//! The pumped state `(0, 0, r)` always exists. Linearizing there gives a
//! transverse block with eigenvalues `((g r - 2) +- sqrt((g r)^2 - 4 omega^2))/2`
//! and a decoupled longitudinal eigenvalue `-1/r`, so instability onsets have
//! closed forms. For `g r > 1 + omega^2` a mirror-symmetric pair of off-axis
//! equilibria branches out at `pz = (1 + omega^2)/g`.

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{jacobian, rhs, DimensionlessParams, SpinState};

/// A real part this close to zero makes the stability call marginal.
pub const EPS_EIG: f64 = 1e-9;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;

#[derive(Debug, Error)]
pub enum EquilibriaError {
    #[error("Newton stalled after {iterations} iterations, residual {residual}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian during Newton at |p| = {norm}")]
    SingularJacobian { norm: f64 },
    #[error("not an equilibrium: |rhs| = {residual} exceeds {tol}")]
    NotAnEquilibrium { residual: f64, tol: f64 },
}

/// Which root of the flow a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedPointKind {
    /// The pumped steady state on the z axis.
    Pumped,
    /// Off-axis root with `px > 0`.
    OffAxisPlus,
    /// Its mirror image with `px < 0`.
    OffAxisMinus,
}

/// Stability summary of one equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub kind: FixedPointKind,
    pub state: SpinState,
    /// Sorted by descending real part (ties by descending imaginary part).
    pub eigenvalues: [Complex64; 3],
    pub max_real_part: f64,
    /// Count of eigenvalues with real part above [`EPS_EIG`].
    pub unstable_dim: usize,
    /// True when some real part sits within [`EPS_EIG`] of zero, in which case
    /// `unstable_dim` is not a reliable stability call.
    pub marginal: bool,
}

/// The pumped steady state `(0, 0, r)`.
pub fn pumped_state(p: &DimensionlessParams) -> SpinState {
    SpinState::new(0.0, 0.0, p.r)
}

/// The mirror pair of off-axis equilibria; present only for `g r > 1 + omega^2`.
/// Returned in `(+px, -px)` order.
pub fn off_axis_states(p: &DimensionlessParams) -> Option<[SpinState; 2]> {
    let margin = p.g * p.r - 1.0 - p.omega * p.omega;
    if margin <= 0.0 || p.g == 0.0 {
        return None;
    }
    let px = (margin / (p.g * p.g * p.r)).sqrt();
    let pz = (1.0 + p.omega * p.omega) / p.g;
    Some([
        SpinState::new(px, -p.omega * px, pz),
        SpinState::new(-px, p.omega * px, pz),
    ])
}

/// Closed-form eigenvalues at the pumped state: the transverse pair first,
/// then the longitudinal `-1/r`.
pub fn eigenvalues_pumped(p: &DimensionlessParams) -> [Complex64; 3] {
    let gr = p.g * p.r;
    let half_trace = (gr - 2.0) / 2.0;
    let discriminant = gr * gr - 4.0 * p.omega * p.omega;
    let (plus, minus) = if discriminant >= 0.0 {
        let s = discriminant.sqrt() / 2.0;
        (
            Complex64::new(half_trace + s, 0.0),
            Complex64::new(half_trace - s, 0.0),
        )
    } else {
        let s = (-discriminant).sqrt() / 2.0;
        (
            Complex64::new(half_trace, s),
            Complex64::new(half_trace, -s),
        )
    };
    [plus, minus, Complex64::new(-1.0 / p.r, 0.0)]
}

/// Newton refinement of an equilibrium guess, damped by residual halving.
pub fn refine_fixed_point(
    guess: &SpinState,
    p: &DimensionlessParams,
) -> Result<SpinState, EquilibriaError> {
    let mut s = *guess;
    let mut residual = rhs(&s, p, 1.0);
    let mut rnorm = residual.norm();
    if rnorm <= NEWTON_TOL {
        return Ok(s);
    }
    for _ in 0..NEWTON_MAX_ITER {
        let j = jacobian(&s, p);
        let b = -Vector3::new(residual.px, residual.py, residual.pz);
        let delta = j
            .lu()
            .solve(&b)
            .ok_or(EquilibriaError::SingularJacobian { norm: s.norm() })?;
        // halve the step until the residual actually shrinks
        let mut lambda = 1.0;
        let mut advanced = false;
        for _ in 0..6 {
            let trial = SpinState::new(
                s.px + lambda * delta[0],
                s.py + lambda * delta[1],
                s.pz + lambda * delta[2],
            );
            let trial_res = rhs(&trial, p, 1.0);
            if trial_res.is_finite() && trial_res.norm() < rnorm {
                s = trial;
                residual = trial_res;
                rnorm = residual.norm();
                advanced = true;
                break;
            }
            lambda *= 0.5;
        }
        if !advanced {
            return Err(EquilibriaError::NoConvergence {
                iterations: NEWTON_MAX_ITER,
                residual: rnorm,
            });
        }
        if rnorm <= NEWTON_TOL {
            return Ok(s);
        }
    }
    Err(EquilibriaError::NoConvergence {
        iterations: NEWTON_MAX_ITER,
        residual: rnorm,
    })
}

/// Linear stability report for a state that is already an equilibrium
/// (`|rhs| <= 1e-10`).
pub fn classify_fixed_point(
    state: &SpinState,
    p: &DimensionlessParams,
) -> Result<FixedPointReport, EquilibriaError> {
    let residual = rhs(state, p, 1.0).norm();
    const RES_TOL: f64 = 1e-10;
    if !(residual <= RES_TOL) {
        return Err(EquilibriaError::NotAnEquilibrium { residual, tol: RES_TOL });
    }
    let eig = jacobian(state, p).complex_eigenvalues();
    let mut eigenvalues = [eig[0], eig[1], eig[2]];
    eigenvalues.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap()
            .then(b.im.partial_cmp(&a.im).unwrap())
    });
    let max_real_part = eigenvalues[0].re;
    let unstable_dim = eigenvalues.iter().filter(|e| e.re > EPS_EIG).count();
    let marginal = eigenvalues.iter().any(|e| e.re.abs() <= EPS_EIG);
    let kind = if state.px.abs() <= 1e-8 * p.r.max(1.0) {
        FixedPointKind::Pumped
    } else if state.px > 0.0 {
        FixedPointKind::OffAxisPlus
    } else {
        FixedPointKind::OffAxisMinus
    };
    Ok(FixedPointReport {
        kind,
        state: *state,
        eigenvalues,
        max_real_part,
        unstable_dim,
        marginal,
    })
}

/// Worst-case pairing distance between two eigenvalue triples.
pub fn eigen_set_distance(a: &[Complex64; 3], b: &[Complex64; 3]) -> f64 {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    PERMS
        .iter()
        .map(|perm| {
            (0..3)
                .map(|i| (a[i] - b[perm[i]]).norm())
                .fold(0.0f64, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Analytic instability curves of the pumped state in the `(omega, g)` plane.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundarySet {
    /// Oscillatory onset `g = 2/r`, present for `omega > 1`.
    pub hopf: Vec<(f64, f64)>,
    /// Off-axis pair onset `g = (1 + omega^2)/r`, present for `omega < 1`.
    pub pitchfork: Vec<(f64, f64)>,
    /// Where the unstable dimension at the pumped state drops from 2 to 1,
    /// `g = (1 + omega^2)/r`, present for `omega > 1`.
    pub unstable_dim_change: Vec<(f64, f64)>,
}

/// Evaluate the boundary curves on a grid of `omega` values (`omega = 1`,
/// where all three meet, belongs to none of them).
pub fn analytic_boundaries(omega_grid: &[f64], r: f64) -> BoundarySet {
    let mut set = BoundarySet::default();
    for &omega in omega_grid {
        let g_pair = (1.0 + omega * omega) / r;
        if omega > 1.0 {
            set.hopf.push((omega, 2.0 / r));
            set.unstable_dim_change.push((omega, g_pair));
        } else if omega < 1.0 {
            set.pitchfork.push((omega, g_pair));
        }
    }
    set
}
