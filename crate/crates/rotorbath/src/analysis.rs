//! Post-processing: coherence-time extraction, fringe fits, coherence maps,
//! revival detection, and discrete-azimuth hop averaging.

use serde::{Deserialize, Serialize};

use crate::bath::{partition_clusters, BathConfiguration, BathParams};
use crate::constants::PhysicalConstants;
use crate::coupling::hyperfine_tensor;
use crate::echo::{bath_echo_signal, revival_time, EchoSettings};
use crate::hamiltonian::{effective_field, ElectronLevel, FieldGeometry};
use crate::lm::levenberg_marquardt;
use crate::{Error, Result, Vector3};

/// How a fit terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Iteration cap reached; parameters are best-so-far.
    MaxIterations,
}

/// Result of a stretched-exponential fit `S(tau) = A exp(-(tau/T2)^n)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StretchedExpFit {
    pub amplitude: f64,
    /// 1/e decay time, seconds.
    pub t2_eff: f64,
    /// Stretch exponent, clamped to [0.5, 4].
    pub stretch_n: f64,
    pub residual_rms: f64,
    pub status: FitStatus,
    pub iterations: usize,
}

const STRETCH_BOUNDS: (f64, f64) = (0.5, 4.0);
const FIT_ITERATION_CAP: usize = 200;

/// Deterministic stretched-exponential fit.
///
/// Initialization is fixed: amplitude from the first sample, `T2` from the
/// 1/e crossing of a linear interpolation of the data, `n = 1`. Abscissae
/// are normalized by their maximum before iterating, so rescaling every
/// `tau` by a constant rescales `t2_eff` by exactly the same constant.
///
/// Inputs must contain at least 4 samples at distinct positive `tau`.
/// Constant signals are rejected as degenerate rather than fit with an
/// arbitrarily large decay time.
pub fn fit_stretched_exponential(samples: &[(f64, f64)]) -> Result<StretchedExpFit> {
    if samples.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: samples.len(),
        });
    }
    let mut data = samples.to_vec();
    data.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if data[0].0 <= 0.0 || data.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidSamples);
    }
    let s_max = data.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    let s_min = data.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    if s_max - s_min < 1e-9 * s_max.abs().max(1.0) {
        return Err(Error::DegenerateFit);
    }

    let tau_ref = data.last().unwrap().0;
    let taus: Vec<f64> = data.iter().map(|d| d.0 / tau_ref).collect();
    let sigs: Vec<f64> = data.iter().map(|d| d.1).collect();

    let amplitude0 = sigs[0];
    let target = amplitude0 / std::f64::consts::E;
    let mut t2_0 = 1.0; // fall back to tau_max when the data never decays to 1/e
    for w in 0..taus.len() - 1 {
        let (s0, s1) = (sigs[w], sigs[w + 1]);
        if (s0 - target) * (s1 - target) <= 0.0 && s0 != s1 {
            let f = (s0 - target) / (s0 - s1);
            t2_0 = taus[w] + f * (taus[w + 1] - taus[w]);
            break;
        }
    }
    let p0 = [amplitude0, t2_0.max(1e-6).ln(), 1.0];

    let outcome = levenberg_marquardt(
        taus.len(),
        &p0,
        |p, r, j| {
            let (a, t2, n) = (p[0], p[1].exp(), p[2]);
            for (i, (&u, &s)) in taus.iter().zip(&sigs).enumerate() {
                let x = u / t2;
                let xn = x.powf(n);
                let e = (-xn).exp();
                r[i] = a * e - s;
                j[i * 3] = e;
                j[i * 3 + 1] = a * e * n * xn; // d/d(ln t2)
                j[i * 3 + 2] = -a * e * xn * x.ln();
            }
        },
        |p| {
            p[2] = p[2].clamp(STRETCH_BOUNDS.0, STRETCH_BOUNDS.1);
        },
        FIT_ITERATION_CAP,
    );

    Ok(StretchedExpFit {
        amplitude: outcome.params[0],
        t2_eff: outcome.params[1].exp() * tau_ref,
        stretch_n: outcome.params[2],
        residual_rms: outcome.residual_rms,
        status: if outcome.converged {
            FitStatus::Converged
        } else {
            FitStatus::MaxIterations
        },
        iterations: outcome.iterations,
    })
}

/// Result of a damped-sinusoid fit
/// `S(theta) = offset + A exp(-theta/theta_d) cos(k theta + phi)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DampedSinusoidFit {
    pub amplitude: f64,
    /// Decay angle of the envelope, radians.
    pub decay_angle: f64,
    /// Angular frequency of the fringe, radians^-1.
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
    pub residual_rms: f64,
    /// Linearized one-sigma uncertainty of `amplitude`.
    pub amplitude_stderr: f64,
    pub status: FitStatus,
    pub iterations: usize,
}

/// Deterministic damped-sinusoid fit with the fringe frequency initialized
/// from the dominant peak of an oversampled discrete spectrum of the
/// mean-subtracted data.
pub fn fit_damped_sinusoid(samples: &[(f64, f64)]) -> Result<DampedSinusoidFit> {
    if samples.len() < 8 {
        return Err(Error::TooFewSamples {
            needed: 8,
            got: samples.len(),
        });
    }
    let mut data = samples.to_vec();
    data.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = data.len();
    let span = data[n - 1].0 - data[0].0;
    if span <= 0.0 {
        return Err(Error::InvalidSamples);
    }
    let mean = data.iter().map(|d| d.1).sum::<f64>() / n as f64;
    let s_max = data.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    let s_min = data.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);

    // Oversampled spectrum of the mean-subtracted data; the dominant peak
    // initializes the frequency, its complex argument the phase. The scan
    // stops at the Nyquist frequency of the closest-spaced samples so an
    // alias can never win.
    let min_spacing = data
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .fold(f64::INFINITY, f64::min)
        .max(span * 1e-12);
    let m_max = (4 * n).min((2.0 * span / min_spacing).floor() as usize);
    let mut best_power = -1.0;
    let mut k0 = std::f64::consts::PI / span;
    let mut phi0 = 0.0;
    for m in 1..=m_max {
        let k = std::f64::consts::PI * m as f64 / (2.0 * span);
        let (mut re, mut im) = (0.0, 0.0);
        for d in &data {
            let arg = k * d.0;
            re += (d.1 - mean) * arg.cos();
            im -= (d.1 - mean) * arg.sin();
        }
        let power = re * re + im * im;
        if power > best_power {
            best_power = power;
            k0 = k;
            phi0 = im.atan2(re);
        }
    }

    let p0 = [
        mean,
        (s_max - s_min) / 2.0,
        (4.0 * span).ln(),
        k0,
        phi0,
    ];
    let thetas: Vec<f64> = data.iter().map(|d| d.0).collect();
    let sigs: Vec<f64> = data.iter().map(|d| d.1).collect();
    let outcome = levenberg_marquardt(
        n,
        &p0,
        |p, r, j| {
            let (off, a, theta_d, k, phi) = (p[0], p[1], p[2].exp(), p[3], p[4]);
            for (i, (&th, &s)) in thetas.iter().zip(&sigs).enumerate() {
                let env = (-th / theta_d).exp();
                let (sin, cos) = (k * th + phi).sin_cos();
                r[i] = off + a * env * cos - s;
                j[i * 5] = 1.0;
                j[i * 5 + 1] = env * cos;
                j[i * 5 + 2] = a * env * cos * th / theta_d; // d/d(ln theta_d)
                j[i * 5 + 3] = -a * env * sin * th;
                j[i * 5 + 4] = -a * env * sin;
            }
        },
        |_| {},
        FIT_ITERATION_CAP,
    );

    Ok(DampedSinusoidFit {
        offset: outcome.params[0],
        amplitude: outcome.params[1],
        decay_angle: outcome.params[2].exp(),
        frequency: outcome.params[3],
        phase: outcome.params[4],
        residual_rms: outcome.residual_rms,
        amplitude_stderr: outcome.variance_diag[1].max(0.0).sqrt(),
        status: if outcome.converged {
            FitStatus::Converged
        } else {
            FitStatus::MaxIterations
        },
        iterations: outcome.iterations,
    })
}

/// Why a map cell carries no coherence time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Fit,
    FitMaxIterations,
    TooFewSamples,
    DegenerateSignal,
}

/// One (tilt angle, rotation speed) cell of a coherence-time map.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct T2Cell {
    pub theta_b: f64,
    pub omega_rot: f64,
    pub t2_eff: Option<f64>,
    pub stretch_n: Option<f64>,
    pub residual_rms: Option<f64>,
    pub n_samples: usize,
    pub status: CellStatus,
}

/// Effective coherence time over a (theta_B, omega_rot) grid.
#[derive(Debug, Clone, Serialize)]
pub struct T2Map {
    pub theta_grid: Vec<f64>,
    pub omega_grid: Vec<f64>,
    /// Row-major: `cells[ti * omega_grid.len() + wi]`.
    pub cells: Vec<T2Cell>,
}

impl T2Map {
    pub fn cell(&self, theta_index: usize, omega_index: usize) -> &T2Cell {
        &self.cells[theta_index * self.omega_grid.len() + omega_index]
    }
}

/// Sampling policy of [`build_t2_map`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct T2MapParams {
    /// Total field magnitude, gauss (fixed while the tilt angle varies).
    pub b_magnitude: f64,
    pub bath: BathParams,
    pub seeds: Vec<u64>,
    pub settings: EchoSettings,
    /// Phenomenological envelope time constant, seconds.
    pub t2_phenom: Option<f64>,
    /// Maximum number of revival samples per cell.
    pub n_rev: usize,
    /// Sampling stops once the enveloped mean signal falls below this,
    /// keeping at least the 4 samples a fit needs.
    pub stop_threshold: f64,
    pub delta_theta: f64,
    pub phi0: f64,
}

impl Default for T2MapParams {
    fn default() -> Self {
        Self {
            b_magnitude: 20.0,
            bath: BathParams::default(),
            seeds: (1..=10).collect(),
            settings: EchoSettings::default(),
            t2_phenom: Some(150e-6),
            n_rev: 12,
            stop_threshold: 0.02,
            delta_theta: 0.0,
            phi0: 0.0,
        }
    }
}

/// Simulate and fit the effective coherence time for every grid cell.
///
/// For each `(theta_b, omega_rot)` the ensemble-averaged echo is sampled at
/// the rotationally shifted revival times `revival_time(B, f_rot, n)`,
/// multiplied by the phenomenological envelope, and fit with
/// [`fit_stretched_exponential`]. Bath configurations are generated once per
/// seed and shared by all cells; cells are filled in fixed grid order.
pub fn build_t2_map(
    constants: &PhysicalConstants,
    theta_grid: &[f64],
    omega_grid: &[f64],
    params: &T2MapParams,
) -> Result<T2Map> {
    assert!(
        !theta_grid.is_empty() && !omega_grid.is_empty(),
        "empty map grid"
    );
    let baths: Vec<_> = params
        .seeds
        .iter()
        .map(|&seed| {
            let bath = BathConfiguration::generate(constants, &params.bath, seed);
            let partition = partition_clusters(&bath, params.settings.g_max);
            (bath, partition)
        })
        .collect();

    let mut cells = Vec::with_capacity(theta_grid.len() * omega_grid.len());
    for &theta in theta_grid {
        for &omega in omega_grid {
            let geometry = FieldGeometry {
                b_magnitude: params.b_magnitude,
                theta_b: theta,
                phi_b: 0.0,
                omega_rot: omega,
                delta_theta: params.delta_theta,
                phi0: params.phi0,
            };
            let f_rot = geometry.f_rot();
            let mut samples: Vec<(f64, f64)> = Vec::with_capacity(params.n_rev);
            for rev in 1..=params.n_rev as u32 {
                let tau = revival_time(constants, params.b_magnitude, f_rot, rev)?;
                let mut mean = 0.0;
                for (bath, partition) in &baths {
                    let r = bath_echo_signal(
                        constants,
                        bath,
                        partition,
                        &geometry,
                        &params.settings,
                        &[tau],
                        0.0,
                    )?;
                    mean += r.signal[0];
                }
                mean /= baths.len() as f64;
                if let Some(t2) = params.t2_phenom {
                    if t2.is_finite() {
                        mean *= (-tau / t2).exp();
                    }
                }
                samples.push((tau, mean));
                if mean < params.stop_threshold && samples.len() >= 4 {
                    break;
                }
            }
            cells.push(fit_cell(theta, omega, &samples));
        }
    }
    Ok(T2Map {
        theta_grid: theta_grid.to_vec(),
        omega_grid: omega_grid.to_vec(),
        cells,
    })
}

fn fit_cell(theta_b: f64, omega_rot: f64, samples: &[(f64, f64)]) -> T2Cell {
    let n_samples = samples.len();
    match fit_stretched_exponential(samples) {
        Ok(fit) => T2Cell {
            theta_b,
            omega_rot,
            t2_eff: Some(fit.t2_eff),
            stretch_n: Some(fit.stretch_n),
            residual_rms: Some(fit.residual_rms),
            n_samples,
            status: match fit.status {
                FitStatus::Converged => CellStatus::Fit,
                FitStatus::MaxIterations => CellStatus::FitMaxIterations,
            },
        },
        Err(Error::DegenerateFit) => T2Cell {
            theta_b,
            omega_rot,
            t2_eff: None,
            stretch_n: None,
            residual_rms: None,
            n_samples,
            status: CellStatus::DegenerateSignal,
        },
        Err(_) => T2Cell {
            theta_b,
            omega_rot,
            t2_eff: None,
            stretch_n: None,
            residual_rms: None,
            n_samples,
            status: CellStatus::TooFewSamples,
        },
    }
}

/// A detected contrast revival.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Revival {
    pub time_s: f64,
    pub amplitude: f64,
    /// Distance to the nearest integer multiple of twice the rotation
    /// period.
    pub offset_from_2t_rot: f64,
}

/// Default prominence threshold of [`detect_revivals`], in units of the
/// signal's maximum absolute value.
pub const REVIVAL_PROMINENCE_DEFAULT: f64 = 0.05;

/// Local maxima of the sampled echo envelope with topographic prominence of
/// at least `prominence` (relative to the maximum absolute signal, so the
/// output is invariant under uniform vertical scaling). Offsets are
/// reported from the nearest multiple of `2 / f_rot`.
pub fn detect_revivals(
    tau_grid: &[f64],
    signal: &[f64],
    f_rot: f64,
    prominence: f64,
) -> Vec<Revival> {
    assert_eq!(tau_grid.len(), signal.len(), "grid/signal length mismatch");
    assert!(f_rot > 0.0, "rotational revivals need a finite rotation rate");
    let n = signal.len();
    if n < 3 {
        return Vec::new();
    }
    let scale = signal.iter().map(|s| s.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let rev_period = 2.0 / f_rot;
    let mut out = Vec::new();
    for i in 1..n - 1 {
        if !(signal[i] > signal[i - 1] && signal[i] >= signal[i + 1]) {
            continue;
        }
        // Topographic prominence: lowest point on each side before the
        // signal exceeds the peak again (or the record ends).
        let mut left_min = f64::INFINITY;
        for j in (0..i).rev() {
            left_min = left_min.min(signal[j]);
            if signal[j] > signal[i] {
                break;
            }
        }
        let mut right_min = f64::INFINITY;
        for s in &signal[i + 1..] {
            right_min = right_min.min(*s);
            if *s > signal[i] {
                break;
            }
        }
        let prom = (signal[i] - left_min.max(right_min)) / scale;
        if prom >= prominence {
            let k = (tau_grid[i] / rev_period).round();
            out.push(Revival {
                time_s: tau_grid[i],
                amplitude: signal[i],
                offset_from_2t_rot: tau_grid[i] - k * rev_period,
            });
        }
    }
    out
}

/// Three-azimuth hop average of the first-order nuclear frequency shift.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HopAverage {
    /// Mean of the three per-azimuth shifts, rad/s.
    pub mean_shift: f64,
    /// Shift at each azimuth (0, 120, 240 degrees), rad/s.
    pub shifts: [f64; 3],
}

impl HopAverage {
    pub fn max_single_angle(&self) -> f64 {
        self.shifts.iter().map(|s| s.abs()).fold(0.0, f64::max)
    }
}

/// Frequency shifts `gamma_n |B_eff| - gamma_n |B|` for the field tilted by
/// `theta` at azimuths 0, 120 and 240 degrees, and their mean.
///
/// At the magic angle the second-rank (anisotropic) part of the first-order
/// shift cancels in the mean; what remains is second order in the hyperfine
/// coupling. For `m_s = +-1` the electron dipole field contributes an
/// azimuth-independent part that does not cancel; the mean is reported
/// as-is rather than asserted to vanish.
pub fn magic_angle_hop_average(
    constants: &PhysicalConstants,
    site: Vector3,
    b_magnitude: f64,
    theta: f64,
    m_s: ElectronLevel,
) -> Result<HopAverage> {
    let hyperfine = hyperfine_tensor(constants, site)?;
    let mut shifts = [0.0; 3];
    for (k, shift) in shifts.iter_mut().enumerate() {
        let phi = std::f64::consts::TAU * k as f64 / 3.0;
        let b = Vector3::new(
            b_magnitude * theta.sin() * phi.cos(),
            b_magnitude * theta.sin() * phi.sin(),
            b_magnitude * theta.cos(),
        );
        let eff = effective_field(constants, b, &hyperfine, m_s);
        *shift = constants.gamma_n * (eff.vector.norm() - b_magnitude);
    }
    Ok(HopAverage {
        mean_shift: shifts.iter().sum::<f64>() / 3.0,
        shifts,
    })
}

/// The magic angle `acos(1/sqrt(3))`, radians.
pub const MAGIC_ANGLE: f64 = 0.9553166181245093;

/// Second-Legendre scaling `P2(cos theta) = (3 cos^2 theta - 1) / 2` of
/// secular dipolar couplings under rotation about an axis tilted by
/// `theta_b`.
pub fn dipolar_scaling_factor(theta_b: f64) -> f64 {
    let c = theta_b.cos();
    (3.0 * c * c - 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn stretched(tau: f64, a: f64, t2: f64, n: f64) -> f64 {
        a * (-(tau / t2).powf(n)).exp()
    }

    fn uniform(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 * 2.0f64.powi(-53)
    }

    #[test]
    fn recovers_exact_stretched_exponential() {
        let t2 = 100e-6;
        let samples: Vec<(f64, f64)> = (1..=10)
            .map(|k| {
                let tau = k as f64 * 30e-6;
                (tau, stretched(tau, 1.0, t2, 2.0))
            })
            .collect();
        let fit = fit_stretched_exponential(&samples).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        assert!((fit.t2_eff - t2).abs() / t2 < 0.01, "t2 {}", fit.t2_eff);
        assert!((fit.stretch_n - 2.0).abs() < 0.02, "n {}", fit.stretch_n);
        assert!((fit.amplitude - 1.0).abs() < 0.01);
    }

    #[test]
    fn noisy_monte_carlo_median_error_under_five_percent() {
        let t2 = 100e-6;
        let mut errors = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let samples: Vec<(f64, f64)> = (1..=50)
                .map(|k| {
                    let tau = k as f64 * 6e-6;
                    let noise = 0.01 * (2.0 * uniform(&mut rng) - 1.0);
                    (tau, stretched(tau, 1.0, t2, 2.0) + noise)
                })
                .collect();
            let fit = fit_stretched_exponential(&samples).unwrap();
            errors.push(((fit.t2_eff - t2) / t2).abs());
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errors[errors.len() / 2];
        assert!(median < 0.05, "median relative error {median}");
    }

    #[test]
    fn constant_signal_is_degenerate_not_huge_t2() {
        let samples: Vec<(f64, f64)> = (1..=10).map(|k| (k as f64 * 1e-5, 1.0)).collect();
        assert!(matches!(
            fit_stretched_exponential(&samples),
            Err(Error::DegenerateFit)
        ));
    }

    #[test]
    fn input_validation() {
        let short = vec![(1e-6, 1.0), (2e-6, 0.5), (3e-6, 0.2)];
        assert!(matches!(
            fit_stretched_exponential(&short),
            Err(Error::TooFewSamples { .. })
        ));
        let dup = vec![(1e-6, 1.0), (1e-6, 0.9), (3e-6, 0.5), (4e-6, 0.2)];
        assert!(matches!(
            fit_stretched_exponential(&dup),
            Err(Error::InvalidSamples)
        ));
        let nonpositive = vec![(0.0, 1.0), (1e-6, 0.9), (3e-6, 0.5), (4e-6, 0.2)];
        assert!(matches!(
            fit_stretched_exponential(&nonpositive),
            Err(Error::InvalidSamples)
        ));
    }

    #[test]
    fn scale_equivariance_of_t2() {
        let base: Vec<(f64, f64)> = (1..=12)
            .map(|k| {
                let tau = k as f64 * 0.4;
                (tau, stretched(tau, 0.9, 3.0, 1.4))
            })
            .collect();
        let fit = fit_stretched_exponential(&base).unwrap();
        // Power-of-two scaling preserves every intermediate bit.
        let scaled: Vec<(f64, f64)> = base.iter().map(|&(t, s)| (t * 1024.0, s)).collect();
        let fit_scaled = fit_stretched_exponential(&scaled).unwrap();
        assert_eq!(fit_scaled.t2_eff, fit.t2_eff * 1024.0);
        assert_eq!(fit_scaled.stretch_n, fit.stretch_n);
        // A general scale agrees to rounding.
        let scaled: Vec<(f64, f64)> = base.iter().map(|&(t, s)| (t * 137.0, s)).collect();
        let fit_scaled = fit_stretched_exponential(&scaled).unwrap();
        assert!((fit_scaled.t2_eff / 137.0 - fit.t2_eff).abs() < 1e-9 * fit.t2_eff);
    }

    #[test]
    fn undamped_cosine_recovers_amplitude_and_long_decay() {
        let span = 40f64.to_radians();
        let samples: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let th = k as f64 / 39.0 * span;
                (th, 0.3 + 0.5 * (th * 28.0 + 0.4).cos())
            })
            .collect();
        let fit = fit_damped_sinusoid(&samples).unwrap();
        assert!((fit.amplitude.abs() - 0.5).abs() < 0.005, "A {}", fit.amplitude);
        assert!(
            fit.decay_angle > 10.0 * span,
            "decay angle {} vs span {span}",
            fit.decay_angle
        );
        assert!((fit.frequency - 28.0).abs() < 0.3);
    }

    #[test]
    fn damped_cosine_decay_angle_within_five_percent() {
        let theta_d = 10f64.to_radians();
        let samples: Vec<(f64, f64)> = (0..60)
            .map(|k| {
                let th = k as f64 / 59.0 * 40f64.to_radians();
                let s = 0.1 + 0.6 * (-th / theta_d).exp() * (th * 25.0 - 0.7).cos();
                (th, s)
            })
            .collect();
        let fit = fit_damped_sinusoid(&samples).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        assert!(
            (fit.decay_angle - theta_d).abs() / theta_d < 0.05,
            "decay angle {} vs {theta_d}",
            fit.decay_angle
        );
    }

    #[test]
    fn white_noise_amplitude_consistent_with_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<(f64, f64)> = (0..48)
            .map(|k| (k as f64 * 0.02, 0.05 * (2.0 * uniform(&mut rng) - 1.0)))
            .collect();
        let fit = fit_damped_sinusoid(&samples).unwrap();
        let consistent_with_zero = fit.amplitude.abs() <= 3.0 * fit.amplitude_stderr.max(1e-12)
            || fit.amplitude.abs() < 0.05;
        assert!(
            fit.status == FitStatus::MaxIterations || consistent_with_zero,
            "A = {} +- {}",
            fit.amplitude,
            fit.amplitude_stderr
        );
    }

    #[test]
    fn synthetic_revivals_detected_on_grid() {
        let f_rot = 8.33e3;
        let grid: Vec<f64> = (1..=40).map(|k| k as f64 * 3.0e-5).collect();
        let signal: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let env = (std::f64::consts::PI * f_rot * t / 2.0).cos().powi(2);
                env * (-t / 2e-3).exp()
            })
            .collect();
        let revs = detect_revivals(&grid, &signal, f_rot, 0.05);
        assert!(revs.len() >= 3, "found {} revivals", revs.len());
        let dt = grid[1] - grid[0];
        for r in &revs {
            assert!(
                r.offset_from_2t_rot.abs() <= dt,
                "revival at {} offset {}",
                r.time_s,
                r.offset_from_2t_rot
            );
        }
        // Invariant under uniform vertical scaling.
        let scaled: Vec<f64> = signal.iter().map(|s| s * 0.2).collect();
        let revs_scaled = detect_revivals(&grid, &scaled, f_rot, 0.05);
        assert_eq!(revs.len(), revs_scaled.len());
        for (a, b) in revs.iter().zip(&revs_scaled) {
            assert_eq!(a.time_s, b.time_s);
        }
    }

    #[test]
    fn flat_decay_has_no_revivals() {
        let grid: Vec<f64> = (1..=30).map(|k| k as f64 * 1e-5).collect();
        let signal: Vec<f64> = grid.iter().map(|&t| (-t / 1e-4).exp()).collect();
        assert!(detect_revivals(&grid, &signal, 5e3, 0.05).is_empty());
    }

    #[test]
    fn hop_average_zero_without_hyperfine() {
        // A site far enough out that the hyperfine shift is negligible at
        // the reporting precision.
        let c = PhysicalConstants::standard();
        let hop = magic_angle_hop_average(
            &c,
            Vector3::new(0.0, 0.0, 500.0),
            40.0,
            MAGIC_ANGLE,
            ElectronLevel::Zero,
        )
        .unwrap();
        assert!(hop.mean_shift.abs() < 1e-6);
    }

    #[test]
    fn hop_average_at_pole_is_single_angle_shift() {
        let c = PhysicalConstants::standard();
        let site = Vector3::new(0.7, 0.4, 0.8);
        let hop =
            magic_angle_hop_average(&c, site, 40.0, 0.0, ElectronLevel::Zero).unwrap();
        for s in hop.shifts {
            assert!((s - hop.mean_shift).abs() < 1e-9 * hop.mean_shift.abs().max(1.0));
        }
    }

    #[test]
    fn magic_angle_cancellation_is_second_order() {
        let c = PhysicalConstants::standard();
        let dir = Vector3::new(0.62, 0.29, 0.73).normalize();
        let ratio = |r: f64| {
            let hop = magic_angle_hop_average(&c, dir * r, 40.0, MAGIC_ANGLE, ElectronLevel::Zero)
                .unwrap();
            hop.mean_shift.abs() / hop.max_single_angle()
        };
        // The residual-to-maximum ratio scales with the coupling, i.e. with
        // r^-3, confirming second-order smallness of the mean.
        let r1 = ratio(1.0);
        let r2 = ratio(2.0);
        assert!(r1 < 2e-2, "ratio at 1 nm: {r1}");
        assert!(r2 < r1 / 4.0, "ratio did not shrink: {r1} -> {r2}");
    }

    #[test]
    fn dipolar_scaling_values() {
        assert!(dipolar_scaling_factor(MAGIC_ANGLE).abs() < 1e-9);
        assert!((dipolar_scaling_factor(54.7356f64.to_radians())).abs() < 1e-6);
        assert_eq!(dipolar_scaling_factor(0.0), 1.0);
        assert!((dipolar_scaling_factor(std::f64::consts::FRAC_PI_2) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn t2_map_structure_and_phenomenological_cap() {
        let c = PhysicalConstants::standard();
        let params = T2MapParams {
            b_magnitude: 20.0,
            bath: BathParams {
                abundance: 0.011,
                radius: 1.3,
                min_distance: 0.25,
            },
            seeds: vec![1, 2],
            settings: EchoSettings::default(),
            t2_phenom: Some(150e-6),
            n_rev: 6,
            stop_threshold: 0.02,
            delta_theta: 0.0,
            phi0: 0.0,
        };
        let thetas = [0.0, 0.35];
        let omegas = [0.0, std::f64::consts::TAU * 5e3];
        let map = build_t2_map(&c, &thetas, &omegas, &params).unwrap();
        assert_eq!(map.cells.len(), 4);
        for (ti, &theta) in thetas.iter().enumerate() {
            for (wi, &omega) in omegas.iter().enumerate() {
                let cell = map.cell(ti, wi);
                assert_eq!(cell.theta_b, theta);
                assert_eq!(cell.omega_rot, omega);
                assert!(cell.n_samples >= 4);
            }
        }
        // theta_B = 0 column: the envelope is the only decay, so the fitted
        // time sits at the phenomenological cap.
        for wi in 0..2 {
            let t2 = map.cell(0, wi).t2_eff.expect("fit in axial column");
            assert!(
                (t2 - 150e-6).abs() / 150e-6 < 0.10,
                "axial t2 {} at omega index {wi}",
                t2
            );
        }
    }
}
