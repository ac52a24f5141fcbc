//! Bloch equations for a pumped spin ensemble with transverse feedback.
//!
//! The polarization `P` precesses about a static field along z while a feedback
//! coil applies a y-field proportional to `-P_x`. In dimensionless form
//! (`tau = t/T2`, `p = P/(R_op T2)`) the motion reduces to three parameters:
//! the precession angle per coherence time `omega`, the feedback gain `g`, and
//! the relaxation-time ratio `r`:
//!
//! ```text
//! px' = -px + omega py + g px pz
//! py' = -omega px - py
//! pz' = -g px^2 - pz / r + pump_scale
//! ```
//!
//! `pump_scale` is 1 for a clean pump and carries multiplicative pump noise
//! otherwise.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{name} must be finite and > 0, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("{name} must be finite and >= 0, got {value}")]
    Negative { name: &'static str, value: f64 },
}

fn require_positive(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::NotPositive { name, value })
    }
}

fn require_nonnegative(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ModelError::Negative { name, value })
    }
}

/// Laboratory-frame parameters of the pumped ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Static field along z, nT.
    pub b0_nt: f64,
    /// Gyromagnetic ratio, rad s^-1 nT^-1.
    pub gamma: f64,
    /// Longitudinal relaxation time, s.
    pub t1: f64,
    /// Transverse coherence time, s.
    pub t2: f64,
    /// Optical pumping rate, s^-1.
    pub rop: f64,
    /// Feedback gain: y-field drive per unit `P_x P_z`, s^-1.
    pub gamma_fb: f64,
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        require_nonnegative("b0_nt", self.b0_nt)?;
        require_positive("gamma", self.gamma)?;
        require_positive("t1", self.t1)?;
        require_positive("t2", self.t2)?;
        require_positive("rop", self.rop)?;
        require_nonnegative("gamma_fb", self.gamma_fb)?;
        Ok(())
    }
}

/// The three dimensionless parameters that fix the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionlessParams {
    /// Precession angle per coherence time, `gamma B0 T2`.
    pub omega: f64,
    /// Feedback gain, `Gamma_FB R_op T2^2`.
    pub g: f64,
    /// Relaxation-time ratio `T1/T2`.
    pub r: f64,
}

impl DimensionlessParams {
    pub fn new(omega: f64, g: f64, r: f64) -> Result<Self, ModelError> {
        require_nonnegative("omega", omega)?;
        require_nonnegative("g", g)?;
        require_positive("r", r)?;
        Ok(Self { omega, g, r })
    }
}

/// Map laboratory parameters onto `(omega, g, r)`.
pub fn nondimensionalize(p: &PhysicalParams) -> Result<DimensionlessParams, ModelError> {
    p.validate()?;
    Ok(DimensionlessParams {
        omega: p.gamma * p.b0_nt * p.t2,
        g: p.gamma_fb * p.rop * p.t2 * p.t2,
        r: p.t1 / p.t2,
    })
}

/// Reconstruct laboratory parameters from `(omega, g, r)` given the three scales
/// that nondimensionalization integrates out.
pub fn redimensionalize(
    d: &DimensionlessParams,
    gamma: f64,
    t2: f64,
    rop: f64,
) -> Result<PhysicalParams, ModelError> {
    require_positive("gamma", gamma)?;
    require_positive("t2", t2)?;
    require_positive("rop", rop)?;
    let p = PhysicalParams {
        b0_nt: d.omega / (gamma * t2),
        gamma,
        t1: d.r * t2,
        t2,
        rop,
        gamma_fb: d.g / (rop * t2 * t2),
    };
    p.validate()?;
    Ok(p)
}

/// Dimensionless spin polarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinState {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl SpinState {
    pub const fn new(px: f64, py: f64, pz: f64) -> Self {
        Self { px, py, pz }
    }

    pub fn norm(&self) -> f64 {
        (self.px * self.px + self.py * self.py + self.pz * self.pz).sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.pz.is_finite()
    }

    /// Image under the `(px, py) -> (-px, -py)` symmetry of the equations.
    pub fn mirrored(&self) -> Self {
        Self::new(-self.px, -self.py, self.pz)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.px, self.py, self.pz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for SpinState {
    type Output = SpinState;
    fn add(self, o: SpinState) -> SpinState {
        SpinState::new(self.px + o.px, self.py + o.py, self.pz + o.pz)
    }
}

impl std::ops::Sub for SpinState {
    type Output = SpinState;
    fn sub(self, o: SpinState) -> SpinState {
        SpinState::new(self.px - o.px, self.py - o.py, self.pz - o.pz)
    }
}

impl std::ops::Mul<f64> for SpinState {
    type Output = SpinState;
    fn mul(self, s: f64) -> SpinState {
        SpinState::new(self.px * s, self.py * s, self.pz * s)
    }
}

/// Right-hand side of the dimensionless equations of motion.
pub fn rhs(state: &SpinState, p: &DimensionlessParams, pump_scale: f64) -> SpinState {
    let SpinState { px, py, pz } = *state;
    SpinState {
        px: -px + p.omega * py + p.g * px * pz,
        py: -p.omega * px - py,
        pz: -p.g * px * px - pz / p.r + pump_scale,
    }
}

/// Jacobian of [`rhs`] with respect to the state (`pump_scale` drops out).
pub fn jacobian(state: &SpinState, p: &DimensionlessParams) -> Matrix3<f64> {
    let SpinState { px, pz, .. } = *state;
    Matrix3::new(
        -1.0 + p.g * pz, p.omega,  p.g * px,
        -p.omega,        -1.0,     0.0,
        -2.0 * p.g * px, 0.0,      -1.0 / p.r,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(omega: f64, g: f64, r: f64) -> DimensionlessParams {
        DimensionlessParams::new(omega, g, r).unwrap()
    }

    #[test]
    fn calibrated_field_points() {
        // gamma T2 = 0.3 rad/nT puts the two working fields at omega 1.494 and 1.956
        let base = PhysicalParams {
            b0_nt: 4.98,
            gamma: 0.3,
            t1: 1.0,
            t2: 1.0,
            rop: 1.0,
            gamma_fb: 5.0,
        };
        let d = nondimensionalize(&base).unwrap();
        assert_relative_eq!(d.omega, 1.494, max_relative = 1e-12);
        assert_relative_eq!(d.g, 5.0, max_relative = 1e-12);
        assert_relative_eq!(d.r, 1.0, max_relative = 1e-12);

        let high = PhysicalParams { b0_nt: 6.52, ..base };
        assert_relative_eq!(nondimensionalize(&high).unwrap().omega, 1.956, max_relative = 1e-12);
    }

    #[test]
    fn rejects_nonpositive_and_nonfinite() {
        let ok = PhysicalParams {
            b0_nt: 1.0,
            gamma: 0.3,
            t1: 2.0,
            t2: 1.0,
            rop: 1.0,
            gamma_fb: 5.0,
        };
        assert!(ok.validate().is_ok());
        assert!(PhysicalParams { t2: 0.0, ..ok }.validate().is_err());
        assert!(PhysicalParams { t1: -1.0, ..ok }.validate().is_err());
        assert!(PhysicalParams { rop: f64::NAN, ..ok }.validate().is_err());
        assert!(PhysicalParams { gamma_fb: -0.1, ..ok }.validate().is_err());
        assert!(DimensionlessParams::new(1.0, 1.0, 0.0).is_err());
        assert!(DimensionlessParams::new(-1.0, 1.0, 1.0).is_err());
        assert!(DimensionlessParams::new(1.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn pumped_steady_state_is_a_root() {
        for &(omega, g, r) in &[(1.494, 5.0, 1.0), (1.956, 13.4, 1.0), (0.5, 0.0, 2.5)] {
            let p = params(omega, g, r);
            let f = rhs(&SpinState::new(0.0, 0.0, r), &p, 1.0);
            assert_eq!(f.norm(), 0.0);
        }
    }

    #[test]
    fn decoupled_precession_without_feedback() {
        let p = params(1.494, 0.0, 1.0);
        let f = rhs(&SpinState::new(1.0, 0.0, 1.0), &p, 1.0);
        assert_relative_eq!(f.px, -1.0, max_relative = 1e-15);
        assert_relative_eq!(f.py, -1.494, max_relative = 1e-15);
        assert_eq!(f.pz, 0.0);
    }

    #[test]
    fn jacobian_at_steady_state_is_block_diagonal() {
        let p = params(1.956, 13.4, 2.0);
        let j = jacobian(&SpinState::new(0.0, 0.0, p.r), &p);
        assert_relative_eq!(j[(0, 0)], p.g * p.r - 1.0, max_relative = 1e-15);
        assert_eq!(j[(0, 1)], p.omega);
        assert_eq!(j[(0, 2)], 0.0);
        assert_eq!(j[(1, 0)], -p.omega);
        assert_eq!(j[(2, 0)], 0.0);
        assert_eq!(j[(2, 2)], -1.0 / p.r);
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            omega in 0.0..3.0f64,
            g in 0.0..45.0f64,
            r in 0.2..5.0f64,
            px in -2.0..2.0f64,
            py in -2.0..2.0f64,
            pz in -2.0..5.0f64,
        ) {
            let p = params(omega, g, r);
            let s = SpinState::new(px, py, pz);
            let j = jacobian(&s, &p);
            let h = 1e-6;
            for col in 0..3 {
                let mut lo = s.to_array();
                let mut hi = s.to_array();
                lo[col] -= h;
                hi[col] += h;
                let flo = rhs(&SpinState::from_array(lo), &p, 1.0).to_array();
                let fhi = rhs(&SpinState::from_array(hi), &p, 1.0).to_array();
                for row in 0..3 {
                    let fd = (fhi[row] - flo[row]) / (2.0 * h);
                    let scale = j[(row, col)].abs().max(1.0);
                    prop_assert!((j[(row, col)] - fd).abs() <= 1e-5 * scale,
                        "J[{row},{col}] = {} vs fd {}", j[(row, col)], fd);
                }
            }
        }

        #[test]
        fn mirror_symmetry_of_the_flow(
            px in -2.0..2.0f64,
            py in -2.0..2.0f64,
            pz in -2.0..5.0f64,
            pump in 0.5..1.5f64,
        ) {
            let p = params(1.494, 17.6, 1.0);
            let s = SpinState::new(px, py, pz);
            let f = rhs(&s, &p, pump);
            let fm = rhs(&s.mirrored(), &p, pump);
            prop_assert_eq!(fm.px, -f.px);
            prop_assert_eq!(fm.py, -f.py);
            prop_assert_eq!(fm.pz, f.pz);
        }

        #[test]
        fn nondimensionalize_roundtrip(
            omega in 1e-3..5.0f64,
            g in 1e-3..50.0f64,
            r in 0.1..10.0f64,
            gamma in 0.01..10.0f64,
            t2 in 0.01..10.0f64,
            rop in 0.01..10.0f64,
        ) {
            let d = params(omega, g, r);
            let phys = redimensionalize(&d, gamma, t2, rop).unwrap();
            let back = nondimensionalize(&phys).unwrap();
            prop_assert!((back.omega - d.omega).abs() <= 1e-12 * d.omega.abs());
            prop_assert!((back.g - d.g).abs() <= 1e-12 * d.g.abs());
            prop_assert!((back.r - d.r).abs() <= 1e-12 * d.r.abs());
        }
    }
}
