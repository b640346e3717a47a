//! TOML configuration files for the CLI: a `[scenario]` table describing
//! geometry and priors, plus optional experiment settings (sweeps, grid,
//! test size, model path).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bench::ExperimentConfig;
use crate::dataset::ScenarioPrior;
use crate::error::{Error, Result};
use crate::geometry::ArrayGeometry;
use crate::music::SearchGrid;

/// `[scenario]` table. Spacings default to half a wavelength; angular
/// bounds default to +-60 degrees and range bounds to [2D, d_FA/4].
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_y: usize,
    pub n_z: usize,
    pub wavelength: f64,
    pub d_y: Option<f64>,
    pub d_z: Option<f64>,
    pub kappa: f64,
    pub snr_db: f64,
    pub num_sources: usize,
    pub num_snapshots: usize,
    pub azimuth_bounds: Option<[f64; 2]>,
    pub elevation_bounds: Option<[f64; 2]>,
    pub range_bounds: Option<[f64; 2]>,
}

impl ScenarioConfig {
    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let d_y = self.d_y.unwrap_or(self.wavelength / 2.0);
        let d_z = self.d_z.unwrap_or(self.wavelength / 2.0);
        ArrayGeometry::new(self.n_y, self.n_z, d_y, d_z, self.wavelength)
            .map_err(|e| Error::Config(format!("invalid scenario geometry: {e}")))
    }

    pub fn to_prior(&self) -> Result<ScenarioPrior> {
        let geom = self.geometry()?;
        let frac3 = std::f64::consts::FRAC_PI_3;
        let az = self.azimuth_bounds.map(|b| (b[0], b[1])).unwrap_or((-frac3, frac3));
        let el = self
            .elevation_bounds
            .map(|b| (b[0], b[1]))
            .unwrap_or((-frac3, frac3));
        let range = self.range_bounds.map(|b| (b[0], b[1])).unwrap_or((
            2.0 * geom.aperture(),
            geom.fraunhofer_distance() / 4.0,
        ));
        ScenarioPrior::with_bounds(
            geom,
            self.kappa,
            self.snr_db,
            self.num_sources,
            self.num_snapshots,
            az,
            el,
            range,
        )
        .map_err(|e| Error::Config(format!("invalid scenario: {e}")))
    }
}

/// Optional `[grid]` table; bounds default to the scenario prior's.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub azimuth_cells: usize,
    pub elevation_cells: usize,
    pub range_cells: usize,
    pub azimuth_bounds: Option<[f64; 2]>,
    pub elevation_bounds: Option<[f64; 2]>,
    pub range_bounds: Option<[f64; 2]>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            azimuth_cells: 60,
            elevation_cells: 60,
            range_cells: 40,
            azimuth_bounds: None,
            elevation_bounds: None,
            range_bounds: None,
        }
    }
}

impl GridConfig {
    pub fn to_grid(&self, prior: &ScenarioPrior) -> Result<SearchGrid> {
        let az = self
            .azimuth_bounds
            .map(|b| (b[0], b[1]))
            .unwrap_or(prior.azimuth_bounds);
        let el = self
            .elevation_bounds
            .map(|b| (b[0], b[1]))
            .unwrap_or(prior.elevation_bounds);
        let r = self
            .range_bounds
            .map(|b| (b[0], b[1]))
            .unwrap_or(prior.range_bounds);
        SearchGrid::uniform(
            az,
            el,
            r,
            (self.azimuth_cells, self.elevation_cells, self.range_cells),
        )
        .map_err(|e| Error::Config(format!("invalid grid: {e}")))
    }
}

/// Top-level configuration file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    pub snapshot_counts: Option<Vec<usize>>,
    pub kappas: Option<Vec<f64>>,
    pub test_size: Option<usize>,
    pub model: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Assemble the experiment sweep; `seed` wins over the file's seed.
    pub fn to_experiment(&self, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        let prior = self.scenario.to_prior()?;
        let grid = self.grid.clone().unwrap_or_default().to_grid(&prior)?;
        let config = ExperimentConfig {
            scenario: prior,
            snapshot_counts: self
                .snapshot_counts
                .clone()
                .unwrap_or_else(|| vec![25, 50, 75, 100]),
            kappas: self.kappas.clone().unwrap_or_else(|| vec![4.0, 8.0]),
            test_size: self.test_size.unwrap_or(50),
            grid,
            seed: seed_override.or(self.seed).unwrap_or(0),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SAMPLE: &str = r#"
snapshot_counts = [10, 20]
kappas = [4.0]
test_size = 5
seed = 7

[scenario]
n_y = 4
n_z = 4
wavelength = 0.1
kappa = 4.0
snr_db = 0.0
num_sources = 1
num_snapshots = 50
range_bounds = [0.43, 0.9]

[grid]
azimuth_cells = 20
elevation_cells = 20
range_cells = 10
"#;

    #[test]
    fn sample_config_round_trips() {
        let cfg = FileConfig::parse(SAMPLE).unwrap();
        let prior = cfg.scenario.to_prior().unwrap();
        assert_relative_eq!(prior.geom.d_y, 0.05);
        assert_eq!(prior.range_bounds, (0.43, 0.9));
        let exp = cfg.to_experiment(None).unwrap();
        assert_eq!(exp.seed, 7);
        assert_eq!(exp.snapshot_counts, vec![10, 20]);
        assert_eq!(exp.grid.azimuth.len(), 20);
        assert_eq!(exp.grid.range.len(), 10);
        // seed override wins
        assert_eq!(cfg.to_experiment(Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = FileConfig::parse(
            r#"
[scenario]
n_y = 16
n_z = 8
wavelength = 0.1
kappa = 8.0
snr_db = 0.0
num_sources = 3
num_snapshots = 25
"#,
        )
        .unwrap();
        let exp = cfg.to_experiment(None).unwrap();
        assert_eq!(exp.snapshot_counts, vec![25, 50, 75, 100]);
        assert_eq!(exp.kappas, vec![4.0, 8.0]);
        assert_eq!(exp.test_size, 50);
        // default range prior [2D, d_FA/4]
        let d = exp.scenario.geom.aperture();
        assert_relative_eq!(exp.scenario.range_bounds.0, 2.0 * d);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(
            FileConfig::parse("[scenario]\nbogus = 1\n"),
            Err(Error::Config(_))
        ));
        // empty default range window for a small aperture
        let cfg = FileConfig::parse(
            r#"
[scenario]
n_y = 4
n_z = 4
wavelength = 0.1
kappa = 4.0
snr_db = 0.0
num_sources = 1
num_snapshots = 50
"#,
        )
        .unwrap();
        assert!(matches!(cfg.to_experiment(None), Err(Error::Config(_))));
    }
}
