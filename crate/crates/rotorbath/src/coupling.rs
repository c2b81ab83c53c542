//! Magnetic point-dipole interaction tensors and the rotational pseudo-field.

use crate::constants::PhysicalConstants;
use crate::{Error, Result, Tensor3, Vector3};

/// `1 - 3 r_hat r_hat` scaled by `prefactor / |r|^3`.
fn point_dipole(prefactor: f64, r: Vector3) -> Tensor3 {
    let norm = r.norm();
    let rhat = r / norm;
    let scale = prefactor / norm.powi(3);
    (Tensor3::identity() - 3.0 * rhat * rhat.transpose()) * scale
}

/// Point-dipole hyperfine tensor between the NV electron spin and a nucleus
/// at position `r` (nm, NV at origin). Result in rad/s.
///
/// Valid outside the contact region; bath generation enforces a minimum
/// NV-nucleus distance so near-origin sites never reach this code path with
/// an unmodelled contact contribution.
pub fn hyperfine_tensor(constants: &PhysicalConstants, r: Vector3) -> Result<Tensor3> {
    if r.norm() == 0.0 {
        return Err(Error::ZeroLengthPosition);
    }
    Ok(point_dipole(constants.mu0_hbar_factor, r))
}

/// Point-dipole coupling tensor between two nuclei at `r_i`, `r_j` (nm).
/// The bath Hamiltonian contribution is `I_i . D_ij . I_j`. Result in rad/s.
pub fn nuclear_dipolar_tensor(
    constants: &PhysicalConstants,
    r_i: Vector3,
    r_j: Vector3,
) -> Result<Tensor3> {
    let r = r_j - r_i;
    if r.norm() == 0.0 {
        return Err(Error::CoincidentPositions);
    }
    Ok(point_dipole(constants.nuclear_dipolar_factor(), r))
}

/// Magnetic pseudo-field `omega_rot / gamma_n` (gauss) experienced by the
/// nuclear spins in the rotating frame.
pub fn pseudo_field(constants: &PhysicalConstants, omega_rot: f64) -> f64 {
    omega_rot / constants.gamma_n
}
