//! TOML run configuration.

use std::path::PathBuf;

use ksinv::diagnostics::EulerLagrangeReport;
use ksinv::inversion::InversionParams;
use ksinv::purestate::PureOptions;
use ksinv::{Boundary, Field, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub params: InversionParams,
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub pure: PureOptions,
    #[serde(default)]
    pub nonuniqueness: NonuniquenessConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    /// Half-width `L` of `[-L, L)^d`.
    pub extent: f64,
    pub points: usize,
    #[serde(default)]
    pub boundary: Boundary,
}

impl GridConfig {
    pub fn build(&self) -> ksinv::Result<Grid> {
        Grid::new(self.dim, self.extent, self.points, self.boundary)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub particles: usize,
    #[serde(default)]
    pub k: usize,
}

/// Where the target density (or, for `reconstruct` and `spectrum`, the
/// potential) comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetConfig {
    /// Fixed Gaussian sum, renormalized to mass `N`.
    Gaussians { gaussians: Vec<Gaussian> },
    /// Seeded random Gaussian sum.
    Random(RandomDensity),
    /// A field stored by a previous run (`.csv` or `.bin`).
    File { path: PathBuf },
    Potential(PotentialSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub center: Vec<f64>,
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDensity {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    pub sigma_range: [f64; 2],
    #[serde(default = "unit_range")]
    pub weight_range: [f64; 2],
    /// Centers are drawn in `[-c L, c L]^d`.
    #[serde(default = "half")]
    pub center_fraction: f64,
}

fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

fn half() -> f64 {
    0.5
}

/// `Σ a_i x_i² + Σ b_i x_i + Σ depth·exp(-|x - c|² / 2σ²) + Σ A sin(k·x)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSpec {
    pub quadratic: Vec<f64>,
    pub linear: Vec<f64>,
    pub bumps: Vec<Bump>,
    pub waves: Vec<Wave>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub sigma: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amplitude: f64,
    pub wavevector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonuniquenessConfig {
    /// Added to the Bohm potential, one inversion each.
    pub perturbations: Vec<PotentialSpec>,
}

impl Default for NonuniquenessConfig {
    fn default() -> Self {
        Self {
            perturbations: vec![PotentialSpec::default()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write `v_n` and `ρ_n` every this many iterations; 0 disables.
    pub checkpoint_stride: usize,
    /// Violation tolerance of the Euler–Lagrange check, per particle.
    pub euler_lagrange_tol: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint_stride: 0,
            euler_lagrange_tol: 1e-4,
        }
    }
}

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

fn check_vec(name: &str, v: &[f64], dim: usize) -> Result<(), ConfigError> {
    if !v.is_empty() && v.len() != dim {
        return Err(invalid(format!("{name} has {} entries, grid dimension is {dim}", v.len())));
    }
    Ok(())
}

impl PotentialSpec {
    pub fn validate(&self, dim: usize) -> Result<(), ConfigError> {
        check_vec("quadratic", &self.quadratic, dim)?;
        check_vec("linear", &self.linear, dim)?;
        for b in &self.bumps {
            check_vec("bump center", &b.center, dim)?;
            if !(b.sigma > 0.0) {
                return Err(invalid("bump sigma must be positive"));
            }
        }
        for w in &self.waves {
            check_vec("wavevector", &w.wavevector, dim)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, grid: &Grid) -> Field {
        let d = grid.dim();
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        Field::from_fn(*grid, |x| {
            let mut s = 0.0;
            for i in 0..d {
                s += at(&self.quadratic, i) * x[i] * x[i] + at(&self.linear, i) * x[i];
            }
            for b in &self.bumps {
                let r2: f64 = (0..d).map(|i| (x[i] - at(&b.center, i)).powi(2)).sum();
                s += b.depth * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            for w in &self.waves {
                let phase: f64 = (0..d).map(|i| at(&w.wavevector, i) * x[i]).sum();
                s += w.amplitude * phase.sin();
            }
            s
        })
    }
}

/// Isotropic Gaussian sum renormalized to mass `particles`.
pub fn gaussian_sum(grid: &Grid, gaussians: &[Gaussian], particles: usize) -> Result<Field, ConfigError> {
    if gaussians.is_empty() {
        return Err(invalid("at least one Gaussian is required"));
    }
    let d = grid.dim();
    for g in gaussians {
        check_vec("gaussian center", &g.center, d)?;
        if g.center.is_empty() {
            return Err(invalid("gaussian center is required"));
        }
        if !(g.sigma > 0.0) || !(g.weight > 0.0) {
            return Err(invalid("gaussian sigma and weight must be positive"));
        }
    }
    let rho = Field::from_fn(*grid, |x| {
        gaussians
            .iter()
            .map(|g| {
                let r2: f64 = (0..d).map(|i| (x[i] - g.center[i]).powi(2)).sum();
                g.weight * (-r2 / (2.0 * g.sigma * g.sigma)).exp()
            })
            .sum()
    });
    let mass = rho.integral();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(invalid("the Gaussians vanish on the grid"));
    }
    Ok(rho.scale(particles as f64 / mass))
}

/// Seeded random Gaussian sum with mass `particles`.
pub fn gen_density(grid: &Grid, spec: &RandomDensity, particles: usize) -> Result<Field, ConfigError> {
    let [s0, s1] = spec.sigma_range;
    let [w0, w1] = spec.weight_range;
    if spec.count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    if !(s0 > 0.0 && s1 >= s0) || !(w0 > 0.0 && w1 >= w0) {
        return Err(invalid("sigma and weight ranges must be positive and ordered"));
    }
    if !(spec.center_fraction >= 0.0 && spec.center_fraction <= 1.0) {
        return Err(invalid("center_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let reach = spec.center_fraction * grid.extent();
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let gaussians: Vec<Gaussian> = (0..spec.count)
        .map(|_| Gaussian {
            center: (0..grid.dim()).map(|_| draw(-reach, reach)).collect(),
            sigma: draw(s0, s1),
            weight: draw(w0, w1),
        })
        .collect();
    gaussian_sum(grid, &gaussians, particles)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| invalid(format!("malformed config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let grid = self.grid.build().map_err(|e| invalid(e.to_string()))?;
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        if self.problem.particles == 0 {
            return Err(invalid("particles must be at least 1"));
        }
        if self.problem.particles + self.problem.k >= grid.len() {
            return Err(invalid("the grid is too small for the requested state"));
        }
        if let Some(TargetConfig::Potential(p)) = &self.target {
            p.validate(grid.dim())?;
        }
        for p in &self.nonuniqueness.perturbations {
            p.validate(grid.dim())?;
        }
        Ok(())
    }

    /// `--seed` replaces every seed in the configuration.
    pub fn apply_seed(&mut self, seed: u64) {
        if let Some(TargetConfig::Random(r)) = &mut self.target {
            r.seed = seed;
        }
        self.pure.seed = seed;
        self.params.eigen.seed = seed;
    }

    pub fn target_density(&self, grid: &Grid) -> Result<Field, ConfigError> {
        let n = self.problem.particles;
        match &self.target {
            None => Err(invalid("missing [target] section")),
            Some(TargetConfig::Gaussians { gaussians }) => gaussian_sum(grid, gaussians, n),
            Some(TargetConfig::Random(spec)) => gen_density(grid, spec, n),
            Some(TargetConfig::File { path }) => read_field(path, grid),
            Some(TargetConfig::Potential(_)) => Err(invalid("this command needs a density target, not a potential")),
        }
    }

    pub fn target_potential(&self, grid: &Grid) -> Result<Field, ConfigError> {
        match &self.target {
            None => Err(invalid("missing [target] section")),
            Some(TargetConfig::Potential(p)) => Ok(p.evaluate(grid)),
            Some(TargetConfig::File { path }) => read_field(path, grid),
            Some(_) => Err(invalid("this command needs a potential target (kind = \"potential\" or \"file\")")),
        }
    }
}

fn read_field(path: &std::path::Path, grid: &Grid) -> Result<Field, ConfigError> {
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => ksinv::io::read_field_bin(path, grid),
        Some("csv") => ksinv::io::read_field_csv(path, grid),
        _ => return Err(invalid(format!("{}: expected a .csv or .bin file", path.display()))),
    };
    result.map_err(|e| invalid(e.to_string()))
}

/// Summary written as `inversion.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionSummary {
    pub converged: bool,
    pub iterations: usize,
    pub distance: f64,
    pub cost: f64,
    pub t: f64,
    pub temperature: f64,
    pub min_orbital_gap: f64,
    pub degeneracy: ksinv::manybody::DegeneracyReport,
    pub euler_lagrange: EulerLagrangeReport,
}
