//! Run configuration: flat TOML sections of scalar keys.

use std::fmt::Write as _;
use std::path::Path;

use mesenchymal_core::kinetic::{initial, Grid, SimParams, SimState, Splitting};
use mesenchymal_core::measures::SpeedNode;
use mesenchymal_core::{DirectionMeasure, SpeedMeasure};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
}

fn default_n_theta() -> usize {
    mesenchymal_core::measures::DEFAULT_N_THETA
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplittingName {
    #[default]
    Lie,
    Strang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub mu: f64,
    pub kappa: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub splitting: SplittingName,
}

fn one() -> f64 {
    1.0
}

/// Speed distribution as `"s:w, s:w, ..."`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedsSection {
    pub nodes: String,
}

impl Default for SpeedsSection {
    fn default() -> Self {
        Self { nodes: "1:1".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    UniformNoise,
    GaussianBump,
    Aligned,
    PointMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub preset: Preset,
    /// Relative noise amplitude (`uniform_noise`).
    pub amplitude: Option<f64>,
    /// Required for `uniform_noise` unless given on the command line.
    pub seed: Option<u64>,
    pub center_x: Option<f64>,
    pub center_y: Option<f64>,
    pub width: Option<f64>,
    pub mass: Option<f64>,
    /// Fibre angle in degrees (`aligned`).
    pub gamma_deg: Option<f64>,
    pub rho: Option<f64>,
    pub cell_x: Option<usize>,
    pub cell_y: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FibreKind {
    #[default]
    Uniform,
    /// `½(δ_γ + δ_{-γ})`.
    Axial,
    /// `δ_γ`; not symmetric.
    Dirac,
}

/// Fibre measure used by the lifted presets and by `exact` / `limit-study`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FibreSection {
    #[serde(default)]
    pub kind: FibreKind,
    pub gamma_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Snapshot every this many steps (initial and final always written).
    #[serde(default = "ten")]
    pub every: u64,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default)]
    pub binary: bool,
}

fn ten() -> u64 {
    10
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { every: 10, csv: true, binary: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExactMethod {
    #[default]
    ConstantQ,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSection {
    pub times: Vec<f64>,
    #[serde(default)]
    pub method: ExactMethod,
    #[serde(default = "default_quad")]
    pub quad: usize,
}

fn default_quad() -> usize {
    mesenchymal_core::characteristics::DEFAULT_QUAD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub eps: Vec<f64>,
    #[serde(default = "default_relax")]
    pub relax_fraction: f64,
    #[serde(default = "half")]
    pub diffusion_cfl: f64,
    pub width: f64,
    pub center_x: Option<f64>,
    pub center_y: Option<f64>,
}

fn default_relax() -> f64 {
    0.05
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub params: ParamsSection,
    #[serde(default)]
    pub speeds: SpeedsSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub fibre: FibreSection,
    #[serde(default)]
    pub output: OutputSection,
    pub exact: Option<ExactSection>,
    pub limit: Option<LimitSection>,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{field}`: {msg}"))
}

fn finite_positive(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive, got {v}")))
    }
}

fn finite_nonnegative(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(config_err(field, format!("must be nonnegative, got {v}")))
    }
}

/// Parses `"s:w, s:w"`.
pub fn parse_speeds(s: &str) -> Result<SpeedMeasure, CliError> {
    let mut nodes = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (sp, w) = item
            .split_once(':')
            .ok_or_else(|| config_err("speeds.nodes", format!("expected speed:weight, got `{item}`")))?;
        let speed: f64 = sp
            .trim()
            .parse()
            .map_err(|_| config_err("speeds.nodes", format!("bad speed `{sp}`")))?;
        let weight: f64 = w
            .trim()
            .parse()
            .map_err(|_| config_err("speeds.nodes", format!("bad weight `{w}`")))?;
        nodes.push(SpeedNode { speed, weight });
    }
    SpeedMeasure::new(nodes).map_err(|e| config_err("speeds.nodes", e))
}

/// Formats a speed measure as `"s:w, s:w"` with round-trip precision.
pub fn format_speeds(m: &SpeedMeasure) -> String {
    let mut s = String::new();
    for (i, n) in m.nodes().iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{:?}:{:?}", n.speed, n.weight);
    }
    s
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if g.nx < 4 || g.ny < 4 {
            return Err(config_err("grid.nx/grid.ny", "need at least 4 cells per axis"));
        }
        finite_positive("grid.dx", g.dx)?;
        finite_positive("grid.dy", g.dy)?;
        if g.n_theta < 2 {
            return Err(config_err("grid.n_theta", "need at least 2 direction bins"));
        }
        let p = &self.params;
        finite_nonnegative("params.mu", p.mu)?;
        finite_nonnegative("params.kappa", p.kappa)?;
        finite_positive("params.epsilon", p.epsilon)?;
        finite_positive("params.dt", p.dt)?;
        finite_nonnegative("params.t_end", p.t_end)?;
        let speeds = parse_speeds(&self.speeds.nodes)?;
        let shift = p.dt * speeds.max_speed() / p.epsilon;
        let half = 0.5 * (g.nx as f64 * g.dx).min(g.ny as f64 * g.dy);
        if shift > half {
            return Err(config_err(
                "params.dt",
                format!("transport shift {shift} per step exceeds half the domain ({half})"),
            ));
        }
        let i = &self.initial;
        match i.preset {
            Preset::UniformNoise => {
                let a = i.amplitude.unwrap_or(0.01);
                if !(0.0..1.0).contains(&a) {
                    return Err(config_err("initial.amplitude", "must lie in [0, 1)"));
                }
            }
            Preset::GaussianBump => {
                finite_positive("initial.width", i.width.ok_or_else(|| config_err("initial.width", "required"))?)?;
            }
            Preset::Aligned => {
                i.gamma_deg.ok_or_else(|| config_err("initial.gamma_deg", "required"))?;
            }
            Preset::PointMass => {
                let cx = i.cell_x.ok_or_else(|| config_err("initial.cell_x", "required"))?;
                let cy = i.cell_y.ok_or_else(|| config_err("initial.cell_y", "required"))?;
                if cx >= g.nx || cy >= g.ny {
                    return Err(config_err("initial.cell_x/cell_y", "outside the grid"));
                }
            }
        }
        for (name, v) in [("initial.mass", i.mass), ("initial.rho", i.rho)] {
            if let Some(v) = v {
                finite_nonnegative(name, v)?;
            }
        }
        if matches!(self.fibre.kind, FibreKind::Axial | FibreKind::Dirac) && self.fibre.gamma_deg.is_none() {
            return Err(config_err("fibre.gamma_deg", "required for axial and dirac fibres"));
        }
        if self.output.every == 0 {
            return Err(config_err("output.every", "must be at least 1"));
        }
        if let Some(e) = &self.exact {
            if e.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(config_err("exact.times", "must be finite and nonnegative"));
            }
            if e.quad < 2 {
                return Err(config_err("exact.quad", "need at least 2 intervals"));
            }
        }
        if let Some(l) = &self.limit {
            if l.eps.is_empty() || l.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return Err(config_err("limit.eps", "must be a nonempty list of positive values"));
            }
            finite_positive("limit.width", l.width)?;
            finite_positive("limit.relax_fraction", l.relax_fraction)?;
            finite_positive("limit.diffusion_cfl", l.diffusion_cfl)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid.nx, self.grid.ny, self.grid.dx, self.grid.dy).expect("validated grid")
    }

    pub fn speeds(&self) -> SpeedMeasure {
        parse_speeds(&self.speeds.nodes).expect("validated speeds")
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            mu: self.params.mu,
            kappa: self.params.kappa,
            epsilon: self.params.epsilon,
            dt: self.params.dt,
            speeds: self.speeds(),
            splitting: match self.params.splitting {
                SplittingName::Lie => Splitting::Lie,
                SplittingName::Strang => Splitting::Strang,
            },
        }
    }

    pub fn fibre_measure(&self) -> DirectionMeasure {
        let n = self.grid.n_theta;
        let gamma = self.fibre.gamma_deg.unwrap_or(0.0).to_radians();
        match self.fibre.kind {
            FibreKind::Uniform => DirectionMeasure::uniform(n),
            FibreKind::Axial => DirectionMeasure::axial(gamma, n),
            FibreKind::Dirac => DirectionMeasure::dirac(gamma, n),
        }
    }

    fn center(&self) -> [f64; 2] {
        let g = self.grid();
        [
            self.initial.center_x.unwrap_or(0.5 * g.lx()),
            self.initial.center_y.unwrap_or(0.5 * g.ly()),
        ]
    }

    /// Builds the initial state. `seed` overrides the configured seed.
    pub fn initial_state(&self, seed: Option<u64>) -> Result<SimState, CliError> {
        let grid = self.grid();
        let speeds = self.speeds();
        let n = self.grid.n_theta;
        let i = &self.initial;
        let q = self.fibre_measure();
        let state = match i.preset {
            Preset::UniformNoise => {
                let seed = seed.or(i.seed).ok_or_else(|| {
                    config_err("initial.seed", "a seed is required for noisy initial data (or pass --seed)")
                })?;
                initial::uniform_noise(grid, n, &speeds, i.amplitude.unwrap_or(0.01), seed)
            }
            Preset::GaussianBump => initial::gaussian_bump(
                grid,
                &q,
                &speeds,
                self.center(),
                i.width.expect("validated"),
                i.mass.unwrap_or(1.0),
            ),
            Preset::Aligned => initial::aligned(
                grid,
                n,
                &speeds,
                i.gamma_deg.expect("validated").to_radians(),
                i.rho.unwrap_or(1.0),
            ),
            Preset::PointMass => initial::point_mass(
                grid,
                &q,
                &speeds,
                (i.cell_x.expect("validated"), i.cell_y.expect("validated")),
                i.mass.unwrap_or(1.0),
            ),
        };
        state.map_err(|e| CliError::Config(format!("initial condition: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
nx = 8
ny = 8
dx = 0.5
dy = 0.5
n_theta = 8

[params]
mu = 1.0
kappa = 5.0
dt = 0.1
t_end = 1.0

[initial]
preset = "uniform_noise"
amplitude = 0.01
seed = 3
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.params.epsilon, 1.0);
        assert_eq!(c.params.splitting, SplittingName::Lie);
        assert_eq!(c.speeds().len(), 1);
        assert_eq!(c.output.every, 10);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = MINIMAL.replace("kappa = 5.0", "kappa = 5.0\nkapa = 1.0");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("kapa"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn nonpositive_dt_names_field() {
        let text = MINIMAL.replace("dt = 0.1", "dt = 0.0");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("params.dt"), "{err}");
    }

    #[test]
    fn noise_needs_seed() {
        let text = MINIMAL.replace("seed = 3\n", "");
        let c = RunConfig::from_toml(&text).unwrap();
        assert!(c.initial_state(None).is_err());
        assert!(c.initial_state(Some(9)).is_ok());
    }

    #[test]
    fn speeds_parse_and_format() {
        let m = parse_speeds("0.5:0.25, 1.5:0.75").unwrap();
        assert_eq!(parse_speeds(&format_speeds(&m)).unwrap(), m);
        assert!(parse_speeds("1.0").is_err());
        assert!(parse_speeds("1.0:0.5").is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.speeds.nodes = format_speeds(&parse_speeds("0.1:0.3, 0.7:0.7").unwrap());
        c.params.dt = 0.1 + 0.2;
        c.exact = Some(ExactSection { times: vec![0.0, 1.0 / 3.0], method: ExactMethod::Explicit, quad: 64 });
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
