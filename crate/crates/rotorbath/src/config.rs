//! Run configuration: TOML parsing, flag overrides, validation, and the
//! record of which keys were defaulted.
//!
//! Precedence is flags > file > defaults. A configuration file only needs
//! the keys it wants to change; everything else takes the documented
//! default and is listed in the metadata sidecar as defaulted. Unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bath::BathParams;
use crate::echo::{EchoSettings, EngineKind, PhaseSchedule};
use crate::hamiltonian::{ElectronLevel, FieldGeometry};
use crate::{Error, Result};

/// What a run computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Freqs,
    Echo,
    Fringes,
    T2map,
    Hop,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Freqs => "freqs",
            Self::Echo => "echo",
            Self::Fringes => "fringes",
            Self::T2map => "t2map",
            Self::Hop => "hop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldBlock {
    pub b_magnitude_gauss: f64,
    pub theta_b_deg: f64,
    pub phi_b_deg: f64,
    pub f_rot_hz: f64,
    pub delta_theta_deg: f64,
    pub phi0_deg: f64,
}

impl Default for FieldBlock {
    fn default() -> Self {
        Self {
            b_magnitude_gauss: 30.0,
            theta_b_deg: 0.0,
            phi_b_deg: 0.0,
            f_rot_hz: 0.0,
            delta_theta_deg: 0.0,
            phi0_deg: 0.0,
        }
    }
}

impl FieldBlock {
    pub fn geometry(&self) -> FieldGeometry {
        FieldGeometry {
            b_magnitude: self.b_magnitude_gauss,
            theta_b: self.theta_b_deg.to_radians(),
            phi_b: self.phi_b_deg.to_radians(),
            omega_rot: std::f64::consts::TAU * self.f_rot_hz,
            delta_theta: self.delta_theta_deg.to_radians(),
            phi0: self.phi0_deg.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathBlock {
    pub abundance: f64,
    pub radius_nm: f64,
    pub min_distance_nm: f64,
    pub seeds: Vec<u64>,
}

impl Default for BathBlock {
    fn default() -> Self {
        let p = BathParams::default();
        Self {
            abundance: p.abundance,
            radius_nm: p.radius,
            min_distance_nm: p.min_distance,
            seeds: vec![1],
        }
    }
}

impl BathBlock {
    pub fn params(&self) -> BathParams {
        BathParams {
            abundance: self.abundance,
            radius: self.radius_nm,
            min_distance: self.min_distance_nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineBlock {
    pub engine: EngineKind,
    pub g_max: usize,
    pub dt_max_s: Option<f64>,
    /// Phenomenological envelope time constant, seconds. Omitted: the
    /// scenario default (150 us for t2map, disabled elsewhere). Zero:
    /// explicitly disabled.
    pub t2_phenom_s: Option<f64>,
    /// Worker threads; 0 uses all available cores. Results do not depend
    /// on this value.
    pub threads: usize,
}

impl Default for EngineBlock {
    fn default() -> Self {
        Self {
            engine: EngineKind::Conditional,
            g_max: 3,
            dt_max_s: None,
            t2_phenom_s: None,
            threads: 0,
        }
    }
}

impl EngineBlock {
    pub fn settings(&self) -> EchoSettings {
        EchoSettings {
            engine: self.engine,
            dt_max: self.dt_max_s,
            g_max: self.g_max,
        }
    }

    /// Envelope constant for a scenario: explicit zero disables, absent
    /// falls back to the scenario default.
    pub fn t2_phenom(&self, scenario: Scenario) -> Option<f64> {
        match self.t2_phenom_s {
            Some(t) if t == 0.0 => None,
            Some(t) => Some(t),
            None => match scenario {
                Scenario::T2map => Some(150e-6),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    /// Output directory; a relative path is resolved under the
    /// `ROTORBATH_OUT` environment variable when that is set.
    pub directory: String,
    /// Any of "csv", "plot".
    pub formats: Vec<String>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec!["csv".into(), "plot".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreqsBlock {
    /// Electron levels to trace (values in {-1, 0, 1}).
    pub m_s: Vec<i8>,
    pub time_points: usize,
    /// Trace length in rotation periods (ignored when stationary).
    pub periods: f64,
}

impl Default for FreqsBlock {
    fn default() -> Self {
        Self {
            m_s: vec![0, -1],
            time_points: 120,
            periods: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauGridKind {
    /// Sample at the rotationally shifted revival times 1..n_rev.
    Revivals,
    /// Uniform grid over (0, tau_max_s].
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoBlock {
    pub grid: TauGridKind,
    pub n_rev: usize,
    pub tau_max_s: Option<f64>,
    pub tau_points: usize,
    pub start_time_s: f64,
    /// Prominence threshold for revival detection on the averaged signal.
    pub prominence: f64,
}

impl Default for EchoBlock {
    fn default() -> Self {
        Self {
            grid: TauGridKind::Revivals,
            n_rev: 12,
            tau_max_s: None,
            tau_points: 120,
            start_time_s: 0.0,
            prominence: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FringesBlock {
    pub theta_max_deg: f64,
    pub theta_points: usize,
    /// Which contrast revival the echo time tracks (1 at 20 G, 2 at 40 G).
    pub revival_n: u32,
    pub phase_offset_rad: f64,
    pub phase_slope_rad_per_rad: f64,
    /// Explicit per-point phases; overrides the linear schedule.
    pub phase_schedule: Option<Vec<f64>>,
}

impl Default for FringesBlock {
    fn default() -> Self {
        Self {
            theta_max_deg: 40.0,
            theta_points: 41,
            revival_n: 1,
            phase_offset_rad: std::f64::consts::FRAC_PI_3,
            phase_slope_rad_per_rad: 0.0,
            phase_schedule: None,
        }
    }
}

impl FringesBlock {
    pub fn schedule(&self) -> PhaseSchedule {
        match &self.phase_schedule {
            Some(list) => PhaseSchedule::List(list.clone()),
            None => PhaseSchedule::Linear {
                offset: self.phase_offset_rad,
                slope: self.phase_slope_rad_per_rad,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2mapBlock {
    pub theta_deg: Vec<f64>,
    pub f_rot_hz: Vec<f64>,
    pub n_rev: usize,
    pub stop_threshold: f64,
}

impl Default for T2mapBlock {
    fn default() -> Self {
        Self {
            theta_deg: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            f_rot_hz: vec![0.0, 2.5e3, 5e3, 7.5e3],
            n_rev: 12,
            stop_threshold: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopBlock {
    pub r_nm: Vec<f64>,
    pub direction: [f64; 3],
    pub theta_deg: f64,
    pub m_s: i8,
}

impl Default for HopBlock {
    fn default() -> Self {
        Self {
            r_nm: vec![1.0, 1.5, 2.0, 3.0],
            direction: [0.62, 0.29, 0.73],
            theta_deg: 54.7356,
            m_s: 0,
        }
    }
}

/// A complete validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub field: FieldBlock,
    #[serde(default)]
    pub bath: BathBlock,
    #[serde(default)]
    pub engine: EngineBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub freqs: FreqsBlock,
    #[serde(default)]
    pub echo: EchoBlock,
    #[serde(default)]
    pub fringes: FringesBlock,
    #[serde(default)]
    pub t2map: T2mapBlock,
    #[serde(default)]
    pub hop: HopBlock,
}

/// A parsed configuration plus provenance: which keys the file or the
/// overrides provided, and which fell back to defaults.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provided_keys: BTreeSet<String>,
    pub defaulted_keys: BTreeSet<String>,
}

/// Parse a configuration file with `--set key.path=value` overrides.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigParse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text, overrides, &path.display().to_string())
}

/// [`parse_config`] on in-memory text (used by tests and `validate`).
pub fn parse_config_str(
    text: &str,
    overrides: &[String],
    origin: &str,
) -> Result<ResolvedConfig> {
    let parse_err = |message: String| Error::ConfigParse {
        path: origin.to_string(),
        message,
    };
    let mut value: toml::Value = text
        .parse()
        .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;

    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            parse_err(format!("override {item:?} is not of the form key.path=value"))
        })?;
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Value>()
            .ok()
            .and_then(|mut t| t.as_table_mut().and_then(|m| m.remove("v")))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        set_path(&mut value, key.trim(), parsed).map_err(parse_err)?;
    }

    let mut provided_keys = BTreeSet::new();
    collect_keys(&value, String::new(), &mut provided_keys);

    let config: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    validate(&config)?;

    let all_keys = {
        let full = toml::Value::try_from(&config).expect("config serializes");
        let mut keys = BTreeSet::new();
        collect_keys(&full, String::new(), &mut keys);
        keys
    };
    let defaulted_keys = all_keys.difference(&provided_keys).cloned().collect();
    Ok(ResolvedConfig {
        config,
        provided_keys,
        defaulted_keys,
    })
}

fn set_path(
    root: &mut toml::Value,
    path: &str,
    new: toml::Value,
) -> std::result::Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {path:?} has an empty segment"));
    }
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("override key {path:?} descends into a non-table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| format!("override key {path:?} descends into a non-table"))?;
    table.insert(parts[parts.len() - 1].to_string(), new);
    Ok(())
}

fn collect_keys(value: &toml::Value, prefix: String, out: &mut BTreeSet<String>) {
    match value {
        toml::Value::Table(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(v, key, out);
            }
        }
        _ => {
            out.insert(prefix);
        }
    }
}

fn range_err(key: &str, value: impl std::fmt::Display, allowed: &str) -> Error {
    Error::ConfigRange {
        key: key.into(),
        value: value.to_string(),
        allowed: allowed.into(),
    }
}

fn check(ok: bool, key: &str, value: impl std::fmt::Display, allowed: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(range_err(key, value, allowed))
    }
}

/// Documented parameter ranges. Physical parameters bracket the regimes the
/// model is meant for (fields to 100 G, rotation to 20 kHz, tilt to 90
/// degrees); the rest guard against degenerate runs.
fn validate(c: &RunConfig) -> Result<()> {
    let f = &c.field;
    check(
        (0.0..=100.0).contains(&f.b_magnitude_gauss),
        "field.b_magnitude_gauss",
        f.b_magnitude_gauss,
        "[0, 100] gauss",
    )?;
    check(
        (0.0..=90.0).contains(&f.theta_b_deg),
        "field.theta_b_deg",
        f.theta_b_deg,
        "[0, 90] degrees",
    )?;
    check(
        (0.0..=20_000.0).contains(&f.f_rot_hz),
        "field.f_rot_hz",
        f.f_rot_hz,
        "[0, 20000] Hz",
    )?;
    check(
        (0.0..=5.0).contains(&f.delta_theta_deg),
        "field.delta_theta_deg",
        f.delta_theta_deg,
        "[0, 5] degrees",
    )?;

    let b = &c.bath;
    check(
        (0.0..=1.0).contains(&b.abundance),
        "bath.abundance",
        b.abundance,
        "[0, 1]",
    )?;
    check(
        b.radius_nm > 0.0 && b.radius_nm <= 6.0,
        "bath.radius_nm",
        b.radius_nm,
        "(0, 6] nm",
    )?;
    check(
        (0.0..b.radius_nm).contains(&b.min_distance_nm),
        "bath.min_distance_nm",
        b.min_distance_nm,
        "[0, radius_nm) nm",
    )?;
    check(!b.seeds.is_empty(), "bath.seeds", "[]", "at least one seed")?;

    let e = &c.engine;
    check(
        (1..=6).contains(&e.g_max),
        "engine.g_max",
        e.g_max,
        "[1, 6]",
    )?;
    if let Some(dt) = e.dt_max_s {
        check(dt > 0.0, "engine.dt_max_s", dt, "positive seconds")?;
    }
    if let Some(t2) = e.t2_phenom_s {
        check(
            t2 >= 0.0,
            "engine.t2_phenom_s",
            t2,
            "seconds, >= 0 (0 disables)",
        )?;
    }
    check(
        e.threads <= 512,
        "engine.threads",
        e.threads,
        "[0, 512] (0 = all cores)",
    )?;

    for fmt in &c.output.formats {
        check(
            fmt == "csv" || fmt == "plot",
            "output.formats",
            fmt,
            "csv | plot",
        )?;
    }

    for m in &c.freqs.m_s {
        check((-1..=1).contains(m), "freqs.m_s", m, "-1 | 0 | 1")?;
    }
    check(
        c.freqs.time_points >= 1,
        "freqs.time_points",
        c.freqs.time_points,
        ">= 1",
    )?;
    check(
        c.freqs.periods > 0.0,
        "freqs.periods",
        c.freqs.periods,
        "> 0",
    )?;

    let echo = &c.echo;
    check(
        (1..=64).contains(&echo.n_rev),
        "echo.n_rev",
        echo.n_rev,
        "[1, 64]",
    )?;
    check(
        echo.tau_points >= 2,
        "echo.tau_points",
        echo.tau_points,
        ">= 2",
    )?;
    if let Some(tau) = echo.tau_max_s {
        check(tau > 0.0, "echo.tau_max_s", tau, "positive seconds")?;
    }
    check(
        (0.0..=1.0).contains(&echo.prominence),
        "echo.prominence",
        echo.prominence,
        "[0, 1]",
    )?;

    let fr = &c.fringes;
    check(
        fr.theta_max_deg > 0.0 && fr.theta_max_deg <= 90.0,
        "fringes.theta_max_deg",
        fr.theta_max_deg,
        "(0, 90] degrees",
    )?;
    check(
        fr.theta_points >= 2,
        "fringes.theta_points",
        fr.theta_points,
        ">= 2",
    )?;
    check(fr.revival_n >= 1, "fringes.revival_n", fr.revival_n, ">= 1")?;
    if let Some(list) = &fr.phase_schedule {
        check(
            list.len() == fr.theta_points,
            "fringes.phase_schedule",
            format!("{} entries", list.len()),
            "one entry per theta point",
        )?;
    }

    let t = &c.t2map;
    check(
        !t.theta_deg.is_empty() && t.theta_deg.iter().all(|v| (0.0..=90.0).contains(v)),
        "t2map.theta_deg",
        format!("{:?}", t.theta_deg),
        "non-empty, each in [0, 90] degrees",
    )?;
    check(
        !t.f_rot_hz.is_empty() && t.f_rot_hz.iter().all(|v| (0.0..=20_000.0).contains(v)),
        "t2map.f_rot_hz",
        format!("{:?}", t.f_rot_hz),
        "non-empty, each in [0, 20000] Hz",
    )?;
    check(
        (1..=64).contains(&t.n_rev),
        "t2map.n_rev",
        t.n_rev,
        "[1, 64]",
    )?;
    check(
        (0.0..1.0).contains(&t.stop_threshold),
        "t2map.stop_threshold",
        t.stop_threshold,
        "[0, 1)",
    )?;

    let h = &c.hop;
    check(
        !h.r_nm.is_empty() && h.r_nm.iter().all(|r| *r > 0.0),
        "hop.r_nm",
        format!("{:?}", h.r_nm),
        "non-empty, positive nm",
    )?;
    let dir_norm = (h.direction[0].powi(2) + h.direction[1].powi(2) + h.direction[2].powi(2))
        .sqrt();
    check(
        dir_norm > 1e-9,
        "hop.direction",
        format!("{:?}", h.direction),
        "non-zero vector",
    )?;
    check(
        (0.0..=90.0).contains(&h.theta_deg),
        "hop.theta_deg",
        h.theta_deg,
        "[0, 90] degrees",
    )?;
    check((-1..=1).contains(&h.m_s), "hop.m_s", h.m_s, "-1 | 0 | 1")?;
    Ok(())
}

/// Map a config-level m_s integer to the electron level.
pub fn electron_level(m_s: i8) -> ElectronLevel {
    match m_s {
        1 => ElectronLevel::PlusOne,
        0 => ElectronLevel::Zero,
        _ => ElectronLevel::MinusOne,
    }
}
