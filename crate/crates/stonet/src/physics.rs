//! Material laws for density-driven solute transport in porous media.
//!
//! The model couples Darcy flow under the Boussinesq approximation with
//! advective-dispersive transport of a single solute:
//!
//! ```text
//! v = -(k/mu) (grad p - rho(c) g)          Darcy velocity
//! rho(c) = rho0 + (rho_s - rho0) c          linear mixture density
//! D(v) = phi tau D_mol I
//!        + (aL - aT) (v (x) v)/|v| + aT |v| I   dispersion tensor
//! ```
//!
//! The `y` axis points downward, so the gravity vector is `(0, g)`. The
//! density law clamps `c` to [0, 1]: concentrations are mass fractions of
//! the saturated brine and small transients outside the physical range must
//! not extrapolate the density.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Symmetric 2x2 tensor (permeability, dispersion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor2 {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl SymTensor2 {
    /// Isotropic tensor `s I`.
    pub fn isotropic(s: f64) -> Self {
        SymTensor2 { xx: s, yy: s, xy: 0.0 }
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    /// Quadratic form `v . (T v)`.
    pub fn quad_form(&self, v: [f64; 2]) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }

    /// Smaller eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        0.5 * (self.xx + self.yy)
            - (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt()
    }
}

/// Physical constants of the tank problem. Defaults describe a 1.002 g/cm^3
/// saline plume entering fresh water at lab conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeterministicParams {
    /// Gravitational acceleration (m/s^2).
    pub g: f64,
    /// Fresh-water reference density (kg/m^3).
    pub rho0: f64,
    /// Saturated brine density (kg/m^3).
    pub rho_s: f64,
    /// Dynamic viscosity (Pa s).
    pub mu: f64,
    /// Porosity (-).
    pub phi: f64,
    /// Molecular diffusion coefficient (m^2/s).
    pub d_mol: f64,
    /// Rock-matrix permeability (m^2).
    pub k_r: f64,
    /// Longitudinal dispersivity (m).
    pub alpha_l: f64,
    /// Transverse dispersivity (m).
    pub alpha_t: f64,
    /// Tortuosity (-).
    pub tau: f64,
}

impl Default for DeterministicParams {
    fn default() -> Self {
        DeterministicParams {
            g: 9.81,
            rho0: 998.2,
            rho_s: 1002.0,
            mu: 1.002e-3,
            phi: 0.38,
            d_mol: 1.61e-9,
            k_r: 5.7e-11,
            alpha_l: 1.0e-3,
            alpha_t: 2.0e-4,
            tau: 1.0,
        }
    }
}

impl DeterministicParams {
    /// Validate physical admissibility.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("g", self.g),
            ("rho0", self.rho0),
            ("rho_s", self.rho_s),
            ("mu", self.mu),
            ("phi", self.phi),
            ("d_mol", self.d_mol),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("k_r", self.k_r),
            ("alpha_l", self.alpha_l),
            ("alpha_t", self.alpha_t),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.rho_s <= self.rho0 {
            return Err(Error::Config(format!(
                "brine density ({}) must exceed the reference density ({})",
                self.rho_s, self.rho0
            )));
        }
        if self.phi > 1.0 {
            return Err(Error::Config(format!("porosity must be <= 1, got {}", self.phi)));
        }
        if self.alpha_t > self.alpha_l {
            return Err(Error::Config(format!(
                "transverse dispersivity ({}) must not exceed longitudinal ({})",
                self.alpha_t, self.alpha_l
            )));
        }
        Ok(())
    }

    /// Hydrostatic gradient `rho0 * g` of the fresh-water column (Pa/m).
    pub fn rho0_g(&self) -> f64 {
        self.rho0 * self.g
    }

    /// Mixture density at concentration `c` (kg/m^3), clamped to the
    /// physical range [rho0, rho_s].
    pub fn density_of(&self, c: f64) -> f64 {
        self.rho0 + (self.rho_s - self.rho0) * c.clamp(0.0, 1.0)
    }

    /// Darcy velocity `-(k/mu) (grad_p - rho g)` for the total pressure
    /// gradient `grad_p` and local density `rho`. Gravity acts along +y.
    pub fn darcy_velocity(&self, k: SymTensor2, grad_p: [f64; 2], rho: f64) -> [f64; 2] {
        let drive = [grad_p[0], grad_p[1] - rho * self.g];
        let kv = k.mul_vec(drive);
        [-kv[0] / self.mu, -kv[1] / self.mu]
    }

    /// Hydrodynamic dispersion tensor for the Darcy velocity `v`.
    /// Degenerates smoothly to isotropic molecular diffusion
    /// `phi tau D_mol I` as `|v| -> 0`.
    pub fn dispersion_tensor(&self, v: [f64; 2]) -> SymTensor2 {
        let mol = self.phi * self.tau * self.d_mol;
        let speed = v[0].hypot(v[1]);
        if speed < 1e-30 {
            return SymTensor2::isotropic(mol);
        }
        let da = self.alpha_l - self.alpha_t;
        SymTensor2 {
            xx: mol + da * v[0] * v[0] / speed + self.alpha_t * speed,
            yy: mol + da * v[1] * v[1] / speed + self.alpha_t * speed,
            xy: da * v[0] * v[1] / speed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_is_linear_and_clamped() {
        let p = DeterministicParams::default();
        assert_eq!(p.density_of(0.0), 998.2);
        assert_eq!(p.density_of(1.0), 1002.0);
        assert!((p.density_of(0.5) - 1000.1).abs() < 1e-12);
        // Out-of-range transients clamp instead of extrapolating.
        assert_eq!(p.density_of(-0.2), 998.2);
        assert_eq!(p.density_of(1.5), 1002.0);
    }

    #[test]
    fn hydrostatic_gradient_matches_water_column() {
        let p = DeterministicParams::default();
        assert!((p.rho0_g() - 9792.342).abs() < 1e-9);
    }

    #[test]
    fn darcy_velocity_vanishes_under_hydrostatic_balance() {
        let p = DeterministicParams::default();
        let k = SymTensor2::isotropic(p.k_r);
        let rho = p.density_of(0.3);
        let v = p.darcy_velocity(k, [0.0, rho * p.g], rho);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn darcy_velocity_isotropic_lateral_drive() {
        // 10 Pa/m lateral drive through the rock matrix:
        // v_x = (5.7e-11 / 1.002e-3) * 10 = 5.68862e-7 m/s.
        let p = DeterministicParams::default();
        let k = SymTensor2::isotropic(p.k_r);
        let v = p.darcy_velocity(k, [-10.0, p.rho0 * p.g], p.rho0);
        assert!((v[0] - 5.688_622_754_491_018e-7).abs() < 1e-19);
        assert!(v[1].abs() < 1e-22);
    }

    #[test]
    fn darcy_velocity_anisotropic_hand_value() {
        // v = (1/mu) k d with d = (1, 0.5), mu = 1e-3:
        // v_x = 1e3 * (2e-10 + 1e-11 * 0.5) = 2.05e-7
        // v_y = 1e3 * (1e-11 + 5e-11 * 0.5) = 3.5e-8
        let p = DeterministicParams { mu: 1.0e-3, ..Default::default() };
        let k = SymTensor2 { xx: 2.0e-10, yy: 5.0e-11, xy: 1.0e-11 };
        let v = p.darcy_velocity(k, [-1.0, p.rho0 * p.g - 0.5], p.rho0);
        assert!((v[0] - 2.05e-7).abs() < 1e-19);
        assert!((v[1] - 3.5e-8).abs() < 1e-20);
    }

    #[test]
    fn dispersion_at_rest_is_molecular() {
        let p = DeterministicParams::default();
        let d = p.dispersion_tensor([0.0, 0.0]);
        let mol: f64 = 0.38 * 1.61e-9;
        assert!((mol - 6.118e-10).abs() < 1e-22);
        assert_eq!(d, SymTensor2::isotropic(mol));
    }

    #[test]
    fn dispersion_axis_aligned_hand_value() {
        // v = (1e-6, 0):
        // D_xx = 6.118e-10 + (1e-3 - 2e-4)*1e-6 + 2e-4*1e-6 = 1.6118e-9
        // D_yy = 6.118e-10 + 2e-4*1e-6 = 8.118e-10
        let p = DeterministicParams::default();
        let d = p.dispersion_tensor([1.0e-6, 0.0]);
        assert!((d.xx - 1.6118e-9).abs() < 1e-22);
        assert!((d.yy - 8.118e-10).abs() < 1e-22);
        assert_eq!(d.xy, 0.0);
    }

    #[test]
    fn dispersion_oblique_hand_value() {
        // v = (3e-7, 4e-7), |v| = 5e-7:
        // D_xx = 6.118e-10 + 8e-4*(9e-14/5e-7) + 2e-4*5e-7 = 8.558e-10
        // D_yy = 6.118e-10 + 8e-4*(1.6e-13/5e-7) + 1e-10 = 9.678e-10
        // D_xy = 8e-4*(1.2e-13/5e-7) = 1.92e-10
        let p = DeterministicParams::default();
        let d = p.dispersion_tensor([3.0e-7, 4.0e-7]);
        assert!((d.xx - 8.558e-10).abs() < 1e-22);
        assert!((d.yy - 9.678e-10).abs() < 1e-22);
        assert!((d.xy - 1.92e-10).abs() < 1e-22);
    }

    #[test]
    fn dispersion_is_positive_definite_for_random_velocities() {
        let p = DeterministicParams::default();
        let mut rng = crate::rng::StreamRng::from_parts(&[9, crate::rng::tag("disp")]);
        for _ in 0..10_000 {
            let v = [rng.uniform_in(-1e-5, 1e-5), rng.uniform_in(-1e-5, 1e-5)];
            let d = p.dispersion_tensor(v);
            assert!(d.min_eigenvalue() > 0.0, "not SPD at v = {v:?}");
            // Longitudinal eigenvalue exceeds transverse along v.
            let speed = v[0].hypot(v[1]);
            if speed > 1e-12 {
                let along = d.quad_form([v[0] / speed, v[1] / speed]);
                let perp = d.quad_form([-v[1] / speed, v[0] / speed]);
                assert!(along >= perp - 1e-25, "anisotropy inverted at {v:?}");
            }
        }
    }

    #[test]
    fn parameter_validation_catches_inversions() {
        let mut p = DeterministicParams::default();
        assert!(p.validate().is_ok());
        p.rho_s = 900.0;
        assert!(p.validate().is_err());
        let mut p = DeterministicParams { alpha_t: 2.0e-3, ..Default::default() };
        assert!(p.validate().is_err());
        p = DeterministicParams { phi: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
        p = DeterministicParams { mu: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_round_trip_through_json() {
        let p = DeterministicParams::default();
        let js = serde_json::to_string_pretty(&p).unwrap();
        let q: DeterministicParams = serde_json::from_str(&js).unwrap();
        assert_eq!(p, q);
        // Unknown fields are rejected, partial files fall back to defaults.
        assert!(serde_json::from_str::<DeterministicParams>("{\"gg\": 1.0}").is_err());
        let partial: DeterministicParams = serde_json::from_str("{\"phi\": 0.25}").unwrap();
        assert_eq!(partial.phi, 0.25);
        assert_eq!(partial.g, 9.81);
    }
}
