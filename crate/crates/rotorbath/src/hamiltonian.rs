//! Lab-frame and rotating-frame Hamiltonians for an NV plus a cluster of
//! `13C` nuclei, together with the effective-field reduction and the nuclear
//! Larmor-frequency diagnostics.
//!
//! The full Hamiltonian on the `3 x 2^g` product space is
//!
//! ```text
//! H = D_zfs Sz^2 + gamma_e B.S + gamma_n sum_i B.I_i
//!     + sum_i S.A_i.I_i + sum_{i<j} I_i.D_ij.I_j
//! ```
//!
//! Physical rotation about the laboratory `z` axis is handled in the crystal
//! frame: the Zeeman field is replaced by `R_z(-(omega_rot t - phi0)) B`,
//! tilted by the NV-axis misalignment `delta_theta`, and the additive
//! pseudo-field term `omega_rot (Sz + sum_i Iz_i)` is appended. For
//! `theta_b = 0` and `delta_theta = 0` this reduces to a static Hamiltonian
//! whose nuclear Zeeman field is shifted by `omega_rot / gamma_n`.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::coupling::{hyperfine_tensor, nuclear_dipolar_tensor};
use crate::spin::{embed_electron, embed_nuclear, spin_operators};
use crate::{CMatrix, Result, Tensor3, Vector3};

/// Electron spin projection used to condition nuclear evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElectronLevel {
    PlusOne,
    Zero,
    MinusOne,
}

impl ElectronLevel {
    /// The projection quantum number m_s.
    pub fn m(self) -> f64 {
        match self {
            Self::PlusOne => 1.0,
            Self::Zero => 0.0,
            Self::MinusOne => -1.0,
        }
    }

    /// Row/column index in the descending-m electron basis (+1, 0, -1).
    pub fn index(self) -> usize {
        match self {
            Self::PlusOne => 0,
            Self::Zero => 1,
            Self::MinusOne => 2,
        }
    }
}

impl std::fmt::Display for ElectronLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.m() as i8)
    }
}

/// Applied-field and rotation geometry.
///
/// `theta_b`/`phi_b` tilt the field away from the rotation axis; `omega_rot`
/// is the angular rotation rate; `delta_theta` is the residual angle between
/// the NV axis and the rotation axis; `phi0` anchors the rotation phase at
/// `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    /// Field magnitude, gauss.
    pub b_magnitude: f64,
    /// Polar tilt of B from the rotation axis, radians.
    pub theta_b: f64,
    /// Azimuth of B, radians.
    pub phi_b: f64,
    /// Rotation rate, rad/s.
    pub omega_rot: f64,
    /// NV-axis misalignment from the rotation axis, radians.
    pub delta_theta: f64,
    /// Initial rotation phase, radians.
    pub phi0: f64,
}

impl FieldGeometry {
    /// Static field of magnitude `b` along the rotation axis.
    pub fn static_axial(b: f64) -> Self {
        Self {
            b_magnitude: b,
            theta_b: 0.0,
            phi_b: 0.0,
            omega_rot: 0.0,
            delta_theta: 0.0,
            phi0: 0.0,
        }
    }

    /// Rotation frequency in Hz.
    pub fn f_rot(&self) -> f64 {
        self.omega_rot / std::f64::consts::TAU
    }

    /// Rotation period in seconds, `None` when stationary.
    pub fn rotation_period(&self) -> Option<f64> {
        (self.omega_rot != 0.0).then(|| std::f64::consts::TAU / self.omega_rot.abs())
    }

    /// Field vector in the frame of the rotation axis.
    pub fn lab_field(&self) -> Vector3 {
        Vector3::new(
            self.b_magnitude * self.theta_b.sin() * self.phi_b.cos(),
            self.b_magnitude * self.theta_b.sin() * self.phi_b.sin(),
            self.b_magnitude * self.theta_b.cos(),
        )
    }

    /// Field vector seen in the crystal (NV) frame at time `t`:
    /// `R_y(-delta_theta) R_z(-(omega_rot t - phi0)) B_lab`.
    pub fn crystal_field(&self, t: f64) -> Vector3 {
        let b = self.lab_field();
        let a = self.phi0 - self.omega_rot * t;
        let (sin_a, cos_a) = a.sin_cos();
        let bx = cos_a * b.x - sin_a * b.y;
        let by = sin_a * b.x + cos_a * b.y;
        let (sin_d, cos_d) = self.delta_theta.sin_cos();
        Vector3::new(cos_d * bx - sin_d * b.z, by, sin_d * bx + cos_d * b.z)
    }
}

/// Precomputed operator content of one NV + nuclear-cluster Hamiltonian.
///
/// All operator matrices live on the full `3 x 2^g` space; evaluating the
/// Hamiltonian at a field is a copy of the static part plus seven scaled
/// additions, so the per-time-step cost is dominated by diagonalization,
/// not assembly.
#[derive(Debug, Clone)]
pub struct ClusterHamiltonian {
    constants: PhysicalConstants,
    positions: Vec<Vector3>,
    dim: usize,
    /// D Sz^2 + hyperfine + nuclear dipole-dipole.
    static_intrinsic: CMatrix,
    sx: CMatrix,
    sy: CMatrix,
    sz: CMatrix,
    /// Collective nuclear operators, sum over cluster members.
    ix: CMatrix,
    iy: CMatrix,
    iz: CMatrix,
}

impl ClusterHamiltonian {
    /// Build the operators for a cluster of nuclei at `sites` (nm, NV frame).
    /// An empty cluster gives the bare NV on its 3-dimensional space.
    pub fn new(constants: &PhysicalConstants, sites: &[Vector3]) -> Result<Self> {
        let g = sites.len();
        let dim = 3 * (1 << g);
        let e_ops = spin_operators(1.0).expect("spin-1 is supported");
        let n_ops = spin_operators(0.5).expect("spin-1/2 is supported");

        let sx = embed_electron(&e_ops.sx, g);
        let sy = embed_electron(&e_ops.sy, g);
        let sz = embed_electron(&e_ops.sz, g);

        // Per-nucleus vector operators, then their collective sums.
        let mut nuc: Vec<[CMatrix; 3]> = Vec::with_capacity(g);
        for i in 0..g {
            nuc.push([
                embed_nuclear(&n_ops.sx, i, g, 3),
                embed_nuclear(&n_ops.sy, i, g, 3),
                embed_nuclear(&n_ops.sz, i, g, 3),
            ]);
        }
        let mut ix = CMatrix::zeros(dim, dim);
        let mut iy = CMatrix::zeros(dim, dim);
        let mut iz = CMatrix::zeros(dim, dim);
        for ops in &nuc {
            ix += &ops[0];
            iy += &ops[1];
            iz += &ops[2];
        }

        let mut static_intrinsic = &sz * &sz * C64::new(constants.d_zfs, 0.0);
        let s_ops = [&sx, &sy, &sz];
        for (i, site) in sites.iter().enumerate() {
            let a = hyperfine_tensor(constants, *site)?;
            for (row, s_op) in s_ops.iter().enumerate() {
                for (col, n_op) in nuc[i].iter().enumerate() {
                    if a[(row, col)] != 0.0 {
                        static_intrinsic += *s_op * n_op * C64::new(a[(row, col)], 0.0);
                    }
                }
            }
        }
        for i in 0..g {
            for j in i + 1..g {
                let d = nuclear_dipolar_tensor(constants, sites[i], sites[j])?;
                for row in 0..3 {
                    for col in 0..3 {
                        if d[(row, col)] != 0.0 {
                            static_intrinsic +=
                                &nuc[i][row] * &nuc[j][col] * C64::new(d[(row, col)], 0.0);
                        }
                    }
                }
            }
        }

        Ok(Self {
            constants: *constants,
            positions: sites.to_vec(),
            dim,
            static_intrinsic,
            sx,
            sy,
            sz,
            ix,
            iy,
            iz,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn n_spins(&self) -> usize {
        self.positions.len()
    }

    pub fn sites(&self) -> &[Vector3] {
        &self.positions
    }

    pub fn constants(&self) -> &PhysicalConstants {
        &self.constants
    }

    /// Assemble `static + gamma_e B.S + gamma_n B.I + omega (Sz + Iz)` into
    /// `out` without allocating.
    fn assemble_into(&self, b: Vector3, omega: f64, out: &mut CMatrix) {
        out.copy_from(&self.static_intrinsic);
        let ge = self.constants.gamma_e;
        let gn = self.constants.gamma_n;
        let terms: [(&CMatrix, f64); 8] = [
            (&self.sx, ge * b.x),
            (&self.sy, ge * b.y),
            (&self.sz, ge * b.z),
            (&self.ix, gn * b.x),
            (&self.iy, gn * b.y),
            (&self.iz, gn * b.z),
            (&self.sz, omega),
            (&self.iz, omega),
        ];
        let out_slice = out.as_mut_slice();
        for (op, coef) in terms {
            if coef == 0.0 {
                continue;
            }
            for (o, v) in out_slice.iter_mut().zip(op.as_slice()) {
                *o += v * coef;
            }
        }
    }

    /// Stationary laboratory-frame Hamiltonian for field `b` (gauss).
    pub fn lab(&self, b: Vector3) -> CMatrix {
        let mut h = CMatrix::zeros(self.dim, self.dim);
        self.assemble_into(b, 0.0, &mut h);
        h
    }

    /// Rotating-frame Hamiltonian at time `t`.
    pub fn rotating(&self, geometry: &FieldGeometry, t: f64) -> CMatrix {
        let mut h = CMatrix::zeros(self.dim, self.dim);
        self.rotating_into(geometry, t, &mut h);
        h
    }

    /// Allocation-free variant of [`Self::rotating`] for propagation loops.
    pub fn rotating_into(&self, geometry: &FieldGeometry, t: f64, out: &mut CMatrix) {
        self.assemble_into(geometry.crystal_field(t), geometry.omega_rot, out);
    }
}

/// Effective field experienced by one nucleus, conditioned on the electron
/// level (gauss, crystal frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveField {
    pub vector: Vector3,
    pub m_s: ElectronLevel,
}

/// Hyperfine-corrected nuclear response tensor
/// `g = 1 - gamma_e / (gamma_n D_zfs) (2 - 3|m_s|) A`.
pub fn effective_g_tensor(
    constants: &PhysicalConstants,
    hyperfine: &Tensor3,
    m_s: ElectronLevel,
) -> Tensor3 {
    let scale =
        constants.gamma_e / (constants.gamma_n * constants.d_zfs) * (2.0 - 3.0 * m_s.m().abs());
    Tensor3::identity() - hyperfine * scale
}

/// First-order state-dependent field `B_eff = m_s B_dip + B.g`, with the
/// electron dipole field taken as `B_dip = (A.z_nv) / gamma_n`.
///
/// The corresponding precession rate is `gamma_n |B_eff|`; it reproduces the
/// exact eigen-splitting of the full Hamiltonian to first order in the
/// hyperfine coupling.
pub fn effective_field(
    constants: &PhysicalConstants,
    b: Vector3,
    hyperfine: &Tensor3,
    m_s: ElectronLevel,
) -> EffectiveField {
    let b_dip = hyperfine * Vector3::z() / constants.gamma_n;
    let g = effective_g_tensor(constants, hyperfine, m_s);
    EffectiveField {
        vector: b_dip * m_s.m() + g.transpose() * b,
        m_s,
    }
}

/// [`effective_field`] in the rotating frame: evaluated at the crystal-frame
/// field of time `t`, with the nuclear pseudo-field `omega_rot / gamma_n`
/// added along the crystal `z` axis.
pub fn rotating_effective_field(
    constants: &PhysicalConstants,
    geometry: &FieldGeometry,
    hyperfine: &Tensor3,
    m_s: ElectronLevel,
    t: f64,
) -> EffectiveField {
    let mut eff = effective_field(constants, geometry.crystal_field(t), hyperfine, m_s);
    eff.vector.z += geometry.omega_rot / constants.gamma_n;
    eff
}

/// A Larmor-frequency reading from exact diagonalization.
///
/// `ambiguous` is set when an eigenlevel could not be attributed to the
/// requested electron level with a dominant overlap (near level crossings);
/// the value is then the best available assignment rather than a guess-free
/// quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarmorReading {
    /// Magnitude of the nuclear sublevel splitting, rad/s.
    pub angular: f64,
    pub ambiguous: bool,
}

impl LarmorReading {
    pub fn frequency_hz(&self) -> f64 {
        self.angular / std::f64::consts::TAU
    }
}

/// Minimum squared overlap below which an eigenlevel assignment is flagged.
const ASSIGNMENT_OVERLAP_FLOOR: f64 = 0.7;

/// Exact m_s-conditioned nuclear Larmor frequency of a single nucleus.
///
/// Diagonalizes the rotating-frame Hamiltonian of the one-spin cluster at
/// time `t` and returns `|E_{m_s, up} - E_{m_s, down}|`, where the two
/// sublevels are identified by maximum overlap with the product basis of the
/// hyperfine-free, rotation-free Hamiltonian at the same crystal-frame field.
pub fn larmor_frequency(
    constants: &PhysicalConstants,
    site: Vector3,
    geometry: &FieldGeometry,
    t: f64,
    m_s: ElectronLevel,
) -> Result<LarmorReading> {
    let cluster = ClusterHamiltonian::new(constants, &[site])?;
    Ok(larmor_from_cluster(&cluster, geometry, t, m_s))
}

/// [`larmor_frequency`] against a prebuilt one-spin cluster.
pub fn larmor_from_cluster(
    cluster: &ClusterHamiltonian,
    geometry: &FieldGeometry,
    t: f64,
    m_s: ElectronLevel,
) -> LarmorReading {
    assert_eq!(cluster.n_spins(), 1, "single-nucleus cluster required");
    let constants = cluster.constants();
    let b = geometry.crystal_field(t);
    let h = cluster.rotating(geometry, t);
    let eig = h.symmetric_eigen();

    // Reference basis: electron eigenvectors of D Sz^2 + gamma_e B.S (labelled
    // by their dominant bare projection) tensored with nuclear spinors along
    // B. Both factors are 1-spin problems solved exactly here.
    let e_ops = spin_operators(1.0).expect("spin-1 is supported");
    let mut h_e = CMatrix::zeros(3, 3);
    h_e += &e_ops.sz * &e_ops.sz * C64::new(constants.d_zfs, 0.0);
    h_e += &e_ops.sx * C64::new(constants.gamma_e * b.x, 0.0);
    h_e += &e_ops.sy * C64::new(constants.gamma_e * b.y, 0.0);
    h_e += &e_ops.sz * C64::new(constants.gamma_e * b.z, 0.0);
    let e_eig = h_e.symmetric_eigen();
    // Column of the electron eigenbasis whose dominant component is m_s.
    let mut e_col = 0;
    let mut best = -1.0;
    for k in 0..3 {
        let w = e_eig.eigenvectors[(m_s.index(), k)].norm_sqr();
        if w > best {
            best = w;
            e_col = k;
        }
    }

    let n_ops = spin_operators(0.5).expect("spin-1/2 is supported");
    let mut h_n = CMatrix::zeros(2, 2);
    h_n += &n_ops.sx * C64::new(constants.gamma_n * b.x, 0.0);
    h_n += &n_ops.sy * C64::new(constants.gamma_n * b.y, 0.0);
    h_n += &n_ops.sz * C64::new(constants.gamma_n * b.z, 0.0);
    let n_eig = h_n.symmetric_eigen();
    // "Up" is the higher-energy nuclear spinor; for B = 0 the splitting is
    // zero and any assignment below the overlap floor gets flagged anyway.
    let (up_col, down_col) = if n_eig.eigenvalues[0] >= n_eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };

    let mut energies = [0.0f64; 2];
    let mut ambiguous = false;
    let mut claimed = [usize::MAX; 2];
    for (slot, n_col) in [up_col, down_col].into_iter().enumerate() {
        // Product reference vector for (electron m_s, nuclear slot).
        let mut reference = nalgebra::DVector::<C64>::zeros(6);
        for e_row in 0..3 {
            for n_row in 0..2 {
                reference[e_row * 2 + n_row] =
                    e_eig.eigenvectors[(e_row, e_col)] * n_eig.eigenvectors[(n_row, n_col)];
            }
        }
        let mut best_overlap = -1.0;
        let mut best_k = 0;
        for k in 0..6 {
            let overlap: C64 = (0..6)
                .map(|r| reference[r].conj() * eig.eigenvectors[(r, k)])
                .sum();
            let w = overlap.norm_sqr();
            if w > best_overlap {
                best_overlap = w;
                best_k = k;
            }
        }
        if best_overlap < ASSIGNMENT_OVERLAP_FLOOR || claimed.contains(&best_k) {
            ambiguous = true;
        }
        claimed[slot] = best_k;
        energies[slot] = eig.eigenvalues[best_k];
    }

    LarmorReading {
        angular: (energies[0] - energies[1]).abs(),
        ambiguous,
    }
}

/// One sample of a per-spin precession-frequency time trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub spin_index: usize,
    pub r_nm: f64,
    pub time_s: f64,
    pub m_s: ElectronLevel,
    pub frequency_hz: f64,
    pub ambiguous: bool,
}

/// Per-spin Larmor-frequency traces over a time grid, suitable for plotting
/// the modulation of the bath precession under rotation.
pub fn frequency_trace(
    constants: &PhysicalConstants,
    sites: &[Vector3],
    geometry: &FieldGeometry,
    times: &[f64],
    m_s: ElectronLevel,
) -> Result<Vec<TracePoint>> {
    let mut out = Vec::with_capacity(sites.len() * times.len());
    for (spin_index, site) in sites.iter().enumerate() {
        let cluster = ClusterHamiltonian::new(constants, &[*site])?;
        for &t in times {
            let reading = larmor_from_cluster(&cluster, geometry, t, m_s);
            out.push(TracePoint {
                spin_index,
                r_nm: site.norm(),
                time_s: t,
                m_s,
                frequency_hz: reading.frequency_hz(),
                ambiguous: reading.ambiguous,
            });
        }
    }
    Ok(out)
}
