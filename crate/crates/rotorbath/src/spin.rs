//! Angular-momentum operator matrices and tensor-product helpers.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::{CMatrix, Error, Result};

/// Cartesian spin operator matrices for a single spin, in the Zeeman basis
/// ordered by descending magnetic quantum number.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperatorSet {
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
}

impl SpinOperatorSet {
    /// Matrix dimension (2S + 1).
    pub fn dim(&self) -> usize {
        self.sz.nrows()
    }

    /// Operators as an `[sx, sy, sz]` array of references.
    pub fn axes(&self) -> [&CMatrix; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

/// Standard spin matrices for spin 1/2 or spin 1.
///
/// The basis is ordered by descending magnetic quantum number, so
/// `spin_operators(0.5)` has `sz = diag(1/2, -1/2)` and `spin_operators(1.0)`
/// has `sz = diag(1, 0, -1)`.
pub fn spin_operators(spin: f64) -> Result<SpinOperatorSet> {
    let two_s = (2.0 * spin).round();
    if (2.0 * spin - two_s).abs() > 1e-12 || !(two_s == 1.0 || two_s == 2.0) {
        return Err(Error::UnsupportedSpin(spin));
    }
    let dim = two_s as usize + 1;
    let s = spin;
    // m runs from +s down to -s; the raising operator connects row k to
    // column k+1 with the usual sqrt(s(s+1) - m(m+1)) element.
    let mut sp = DMatrix::zeros(dim, dim);
    for k in 0..dim - 1 {
        let m_lower = s - (k + 1) as f64;
        sp[(k, k + 1)] = C64::new((s * (s + 1.0) - m_lower * (m_lower + 1.0)).sqrt(), 0.0);
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm).scale(0.5);
    let sy = (&sp - &sm) * C64::new(0.0, -0.5);
    let mut sz = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        sz[(k, k)] = C64::new(s - k as f64, 0.0);
    }
    Ok(SpinOperatorSet { sx, sy, sz })
}

/// Complex identity matrix of the given dimension.
pub fn identity(dim: usize) -> CMatrix {
    DMatrix::identity(dim, dim)
}

/// Embed a single-site operator into a tensor product of `n_sites` two-level
/// sites (identity elsewhere), optionally prefixed by an identity factor of
/// dimension `lead_dim` for the electron.
pub fn embed_nuclear(op: &CMatrix, site: usize, n_sites: usize, lead_dim: usize) -> CMatrix {
    let mut out = identity(lead_dim);
    for k in 0..n_sites {
        let factor = if k == site { op.clone() } else { identity(2) };
        out = out.kronecker(&factor);
    }
    out
}

/// Embed an electron operator, appending identities for `n_sites` nuclei.
pub fn embed_electron(op: &CMatrix, n_sites: usize) -> CMatrix {
    op.kronecker(&identity(1 << n_sites))
}
