//! Physical constants and unit conventions.
//!
//! All internal energies are angular frequencies in rad/s. Magnetic fields are
//! gauss at API boundaries and converted exactly once, inside Hamiltonian
//! assembly, via the gyromagnetic ratios below. Lengths are nanometres.

/// CODATA reduced Planck constant, J s.
const HBAR: f64 = 1.054_571_817e-34;

/// CODATA vacuum magnetic permeability, T m / A.
const MU_0: f64 = 1.256_637_062_12e-6;

/// Fixed constants of the NV--13C system.
///
/// The gyromagnetic ratios and zero-field splitting are the conventional
/// values for the negatively charged NV centre and the 13C nucleus; the
/// hyperfine prefactor is derived from them together with CODATA values of
/// mu_0 and hbar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Electron gyromagnetic ratio, rad/s per gauss (2 pi x 2.8 MHz/G).
    pub gamma_e: f64,
    /// 13C gyromagnetic ratio, rad/s per gauss (2 pi x 1071.5 Hz/G).
    pub gamma_n: f64,
    /// NV ground-state zero-field splitting, rad/s (2 pi x 2870 MHz).
    pub d_zfs: f64,
    /// Point-dipole hyperfine prefactor mu_0 gamma_e gamma_n hbar / 4 pi,
    /// in rad/s nm^3.
    pub mu0_hbar_factor: f64,
    /// Diamond nearest-neighbour distance, nm.
    pub a0: f64,
}

impl PhysicalConstants {
    /// The standard constant set used throughout the crate.
    pub fn standard() -> Self {
        let gamma_e = std::f64::consts::TAU * 2.8e6;
        let gamma_n = std::f64::consts::TAU * 1071.5;
        // Gyromagnetic ratios are per gauss; convert to per tesla (x 1e4) for
        // the SI prefactor, then express the r^-3 scale in nm^3 (x 1e27).
        let mu0_hbar_factor = MU_0 / (4.0 * std::f64::consts::PI)
            * (gamma_e * 1.0e4)
            * (gamma_n * 1.0e4)
            * HBAR
            * 1.0e27;
        Self {
            gamma_e,
            gamma_n,
            d_zfs: std::f64::consts::TAU * 2870.0e6,
            mu0_hbar_factor,
            a0: 0.154,
        }
    }

    /// Prefactor of the nuclear-nuclear point-dipole tensor,
    /// mu_0 gamma_n^2 hbar / 4 pi, in rad/s nm^3.
    pub fn nuclear_dipolar_factor(&self) -> f64 {
        self.mu0_hbar_factor * self.gamma_n / self.gamma_e
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn ratio_of_gyromagnetic_ratios() {
        let c = PhysicalConstants::standard();
        let ratio = c.gamma_e / c.gamma_n;
        // 2.8e6 / 1071.5 = 2613.2
        assert!((ratio - 2613.2).abs() / 2613.2 < 1e-3);
    }

    #[test]
    fn all_constants_positive() {
        let c = PhysicalConstants::standard();
        assert!(c.gamma_e > 0.0);
        assert!(c.gamma_n > 0.0);
        assert!(c.d_zfs > 0.0);
        assert!(c.mu0_hbar_factor > 0.0);
        assert!(c.a0 > 0.0);
    }

    #[test]
    fn hyperfine_prefactor_matches_independent_arithmetic() {
        // Independent evaluation: mu0/4pi = 1.00000000055e-7 T m/A,
        // gamma_e = 2 pi x 2.8e10 rad/s/T, gamma_n = 2 pi x 1.0715e7 rad/s/T,
        // hbar = 1.054571817e-34 J s. The product is 1.2490e-22 rad/s m^3,
        // i.e. 1.2490e5 rad/s nm^3, or 2 pi x 19.88 kHz nm^3.
        let c = PhysicalConstants::standard();
        let khz_nm3 = c.mu0_hbar_factor / TAU / 1e3;
        assert!(
            (khz_nm3 - 19.9).abs() < 0.05,
            "hyperfine prefactor {khz_nm3} kHz nm^3, expected about 19.9"
        );
    }

    #[test]
    fn nuclear_dipolar_prefactor() {
        // mu_0 gamma_n^2 hbar / 4 pi = 47.8 rad/s nm^3 (7.6 Hz nm^3).
        let c = PhysicalConstants::standard();
        assert!((c.nuclear_dipolar_factor() - 47.8).abs() < 0.1);
    }
}
