//! Experiment orchestration: estimate-to-truth matching, RMSE over trials,
//! the accuracy sweep over (kappa, T), the per-sample runtime comparison,
//! and the location scatter report. All reports render to CSV (header row,
//! `.` decimal, LF endings); only runtime columns depend on the clock.

use std::time::Instant;

use itertools::Itertools;

use crate::channel::{simulate_snapshots, ChannelModel};
use crate::dataset::ScenarioPrior;
use crate::error::{Error, Result};
use crate::geometry::SourcePosition;
use crate::music::{
    estimate_locations_music_from_split, SearchGrid, SpectrumOptions,
};
use crate::nn::model::Model;
use crate::nn::train::predict_locations;
use crate::rng::{derive_seed, rng_from_seed};
use crate::subspace::{eigendecompose, sample_covariance, SubspaceSplit};

/// Sweep description for the accuracy and runtime experiments. The scenario
/// supplies the geometry and priors; its kappa and snapshot count are
/// overridden per sweep point.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub scenario: ScenarioPrior,
    pub snapshot_counts: Vec<usize>,
    pub kappas: Vec<f64>,
    /// Number of test scenes L per sweep point.
    pub test_size: usize,
    pub grid: SearchGrid,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snapshot_counts.is_empty() || self.snapshot_counts.iter().any(|&t| t < 1) {
            return Err(Error::Config(
                "snapshot counts must be nonempty with every entry >= 1".into(),
            ));
        }
        if self.kappas.is_empty() {
            return Err(Error::Config("kappa list must be nonempty".into()));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Squared Euclidean distance between two positions.
fn dist_sq(a: &SourcePosition, b: &SourcePosition) -> f64 {
    (0..3).map(|i| (a.cartesian[i] - b.cartesian[i]).powi(2)).sum()
}

/// Minimum-total-squared-distance assignment: returns `perm` such that
/// `estimates[perm[l]]` pairs with `truths[l]`. Exhaustive for K <= 6,
/// Hungarian algorithm beyond.
pub fn match_sources(
    estimates: &[SourcePosition],
    truths: &[SourcePosition],
) -> Result<Vec<usize>> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need equal nonempty counts, got {} estimates and {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let k = truths.len();
    let cost = |t: usize, e: usize| dist_sq(&estimates[e], &truths[t]);
    if k <= 6 {
        let best = (0..k)
            .permutations(k)
            .min_by(|a, b| {
                let ca: f64 = (0..k).map(|t| cost(t, a[t])).sum();
                let cb: f64 = (0..k).map(|t| cost(t, b[t])).sum();
                ca.partial_cmp(&cb).unwrap()
            })
            .unwrap();
        return Ok(best);
    }
    Ok(hungarian(k, &cost))
}

/// O(n^3) Hungarian algorithm with row/column potentials.
fn hungarian(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based internals: way[j] is the previous column on the augmenting
    // path, p[j] is the row matched to column j
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// RMSE over matched trials:
/// sqrt( (1/(3KL)) sum_l sum_k ||truth_{k,l} - estimate_{k,l}||^2 ).
/// Each trial is matched with `match_sources` first.
pub fn rmse(trials: &[(Vec<SourcePosition>, Vec<SourcePosition>)]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("rmse needs at least one trial".into()));
    }
    let k = trials[0].0.len();
    let mut total = 0.0;
    for (truths, estimates) in trials {
        if truths.len() != k || estimates.len() != k {
            return Err(Error::InvalidArgument(
                "all trials must have the same source count".into(),
            ));
        }
        let perm = match_sources(estimates, truths)?;
        for (t, &e) in perm.iter().enumerate() {
            total += dist_sq(&estimates[e], &truths[t]);
        }
    }
    Ok((total / (3.0 * k as f64 * trials.len() as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmseRow {
    pub method: String,
    pub kappa: f64,
    pub snapshots: usize,
    pub rmse: f64,
    pub num_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RmseReport {
    pub rows: Vec<RmseRow>,
}

impl RmseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,kappa,snapshots,rmse_meters,num_trials\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method, r.kappa, r.snapshots, r.rmse, r.num_trials
            ));
        }
        out
    }

    /// RMSE averaged over the snapshot sweep for one (method, kappa).
    pub fn sweep_mean(&self, method: &str, kappa: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.kappa == kappa)
            .map(|r| r.rmse)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn get(&self, method: &str, kappa: f64, snapshots: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.kappa == kappa && r.snapshots == snapshots)
            .map(|r| r.rmse)
    }
}

/// One simulated test scene shared by both estimators.
struct TestScene {
    truths: Vec<SourcePosition>,
    split: SubspaceSplit,
}

/// Simulate scene `l` of a sweep point. Both the source draws and the
/// snapshot stream depend only on (seed, l), so every (kappa, T) point sees
/// the same truths, the same per-source scattering draw, and a T-snapshot
/// prefix of the same signal/noise stream — common random numbers, so a
/// sweep comparison isolates the effect of the swept parameter instead of
/// resampling the block-fading channel at every point.
fn simulate_scene(
    prior: &ScenarioPrior,
    channel: &ChannelModel,
    l: usize,
    seed: u64,
) -> Result<TestScene> {
    let mut source_rng = rng_from_seed(derive_seed(derive_seed(seed, 1), l as u64));
    let truths = prior.draw_sources(&mut source_rng);
    let batch_seed = derive_seed(derive_seed(seed, 2), l as u64);
    let batch = simulate_snapshots(
        &prior.geom,
        &truths,
        channel,
        prior.num_snapshots,
        prior.snr_db,
        batch_seed,
    )?;
    let split = eigendecompose(&sample_covariance(&batch))?;
    Ok(TestScene { truths, split })
}

/// Accuracy sweep: for every (kappa, T) simulate L scenes and run both
/// estimators on identical subspace splits (paired design).
pub fn run_rmse_experiment(model: &mut Model, config: &ExperimentConfig) -> Result<RmseReport> {
    config.validate()?;
    let k = config.scenario.num_sources;
    if model.arch.num_sources != k
        || model.arch.input_size != config.scenario.geom.num_antennas()
    {
        return Err(Error::Config(
            "model architecture does not match the scenario".into(),
        ));
    }
    let mut report = RmseReport::default();
    for (ki, &kappa) in config.kappas.iter().enumerate() {
        let mut prior = config.scenario.clone();
        prior.kappa = kappa;
        let channel = ChannelModel::new(&prior.geom, kappa)?;
        for (ti, &t) in config.snapshot_counts.iter().enumerate() {
            prior.num_snapshots = t;
            let mut music_trials = Vec::with_capacity(config.test_size);
            let mut cnn_trials = Vec::with_capacity(config.test_size);
            for l in 0..config.test_size {
                let scene = simulate_scene(&prior, &channel, l, config.seed)?;
                let music = estimate_locations_music_from_split(
                    &scene.split,
                    k,
                    &config.grid,
                    &prior.geom,
                    SpectrumOptions::default(),
                )?;
                let cnn = predict_locations(model, &scene.split)?;
                music_trials.push((scene.truths.clone(), music.positions));
                cnn_trials.push((scene.truths, cnn.positions));
            }
            for (method, trials) in [("music", &music_trials), ("cnn", &cnn_trials)] {
                report.rows.push(RmseRow {
                    method: method.to_string(),
                    kappa,
                    snapshots: t,
                    rmse: rmse(trials)?,
                    num_trials: config.test_size,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeRow {
    pub method: String,
    pub snapshots: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RuntimeReport {
    pub rows: Vec<RuntimeRow>,
}

impl RuntimeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,snapshots,mean_seconds,std_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.method, r.snapshots, r.mean_seconds, r.std_seconds
            ));
        }
        out
    }

    pub fn mean(&self, method: &str, snapshots: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.snapshots == snapshots)
            .map(|r| r.mean_seconds)
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample runtime comparison. Each test sample is preprocessed once
/// (covariance + eigendecomposition, reported under method `preprocess`);
/// the MUSIC spectrum/peak search and the model inference are then timed
/// separately on the shared split. Timed sections run single-threaded so
/// the numbers are comparable.
pub fn run_runtime_benchmark(
    model: &mut Model,
    config: &ExperimentConfig,
) -> Result<RuntimeReport> {
    config.validate()?;
    let k = config.scenario.num_sources;
    let mut report = RuntimeReport::default();
    let kappa = config.kappas[0];
    let channel = ChannelModel::new(&config.scenario.geom, kappa)?;
    let sequential = SpectrumOptions {
        parallel: false,
        ..SpectrumOptions::default()
    };
    for (ti, &t) in config.snapshot_counts.iter().enumerate() {
        let mut prior = config.scenario.clone();
        prior.kappa = kappa;
        prior.num_snapshots = t;
        let mut pre_times = Vec::with_capacity(config.test_size);
        let mut music_times = Vec::with_capacity(config.test_size);
        let mut cnn_times = Vec::with_capacity(config.test_size);
        for l in 0..config.test_size {
            let mut source_rng =
                rng_from_seed(derive_seed(derive_seed(config.seed, 1), l as u64));
            let truths = prior.draw_sources(&mut source_rng);
            let batch = simulate_snapshots(
                &prior.geom,
                &truths,
                &channel,
                t,
                prior.snr_db,
                derive_seed(derive_seed(config.seed, 100 + ti as u64), l as u64),
            )?;
            let start = Instant::now();
            let split = eigendecompose(&sample_covariance(&batch))?;
            pre_times.push(start.elapsed().as_secs_f64());
            let music = estimate_locations_music_from_split(
                &split,
                k,
                &config.grid,
                &prior.geom,
                sequential,
            )?;
            music_times.push(music.elapsed_seconds);
            let cnn = predict_locations(model, &split)?;
            cnn_times.push(cnn.elapsed_seconds);
        }
        for (method, times) in [
            ("preprocess", &pre_times),
            ("music", &music_times),
            ("cnn", &cnn_times),
        ] {
            let (mean, std) = mean_std(times);
            report.rows.push(RuntimeRow {
                method: method.to_string(),
                snapshots: t,
                mean_seconds: mean,
                std_seconds: std,
            });
        }
    }
    Ok(report)
}

/// Exact and estimated locations over random realizations as plottable CSV:
/// one row per (realization, source) with truth, MUSIC, and CNN coordinates.
/// Estimates are matched to truths so each row compares like with like.
pub fn scatter_report(
    model: &mut Model,
    config: &ExperimentConfig,
    num_realizations: usize,
) -> Result<String> {
    config.validate()?;
    if num_realizations == 0 {
        return Err(Error::Config("need at least one realization".into()));
    }
    let prior = &config.scenario;
    let k = prior.num_sources;
    let channel = ChannelModel::new(&prior.geom, prior.kappa)?;
    let mut out = String::from(
        "realization,source,truth_x,truth_y,truth_z,music_x,music_y,music_z,cnn_x,cnn_y,cnn_z\n",
    );
    for real in 0..num_realizations {
        let scene = simulate_scene(prior, &channel, real, config.seed)?;
        let music = estimate_locations_music_from_split(
            &scene.split,
            k,
            &config.grid,
            &prior.geom,
            SpectrumOptions::default(),
        )?;
        let cnn = predict_locations(model, &scene.split)?;
        let mp = match_sources(&music.positions, &scene.truths)?;
        let cp = match_sources(&cnn.positions, &scene.truths)?;
        for s in 0..k {
            let t = &scene.truths[s].cartesian;
            let m = &music.positions[mp[s]].cartesian;
            let c = &cnn.positions[cp[s]].cartesian;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                real, s, t[0], t[1], t[2], m[0], m[1], m[2], c[0], c[1], c[2]
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ArrayGeometry;
    use approx::assert_relative_eq;

    fn pos(x: f64, y: f64, z: f64) -> SourcePosition {
        SourcePosition::from_cartesian(x, y, z).unwrap()
    }

    #[test]
    fn identity_and_reversal_matchings() {
        let truths = vec![pos(1.0, 0.0, 0.0), pos(0.0, 1.0, 0.0), pos(0.0, 0.0, 1.0)];
        assert_eq!(match_sources(&truths, &truths).unwrap(), vec![0, 1, 2]);
        let reversed: Vec<_> = truths.iter().rev().cloned().collect();
        assert_eq!(match_sources(&reversed, &truths).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = rng_from_seed(17);
        for _ in 0..20 {
            let n = 5;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<SourcePosition> {
                (0..n)
                    .map(|_| {
                        pos(
                            rand::Rng::gen_range(rng, 0.5..2.0),
                            rand::Rng::gen_range(rng, -1.0..1.0),
                            rand::Rng::gen_range(rng, -1.0..1.0),
                        )
                    })
                    .collect()
            };
            let truths = draw(&mut rng);
            let ests = draw(&mut rng);
            let cost = |t: usize, e: usize| dist_sq(&ests[e], &truths[t]);
            let hung = hungarian(n, &cost);
            let hung_cost: f64 = (0..n).map(|t| cost(t, hung[t])).sum();
            let best_cost: f64 = (0..n)
                .permutations(n)
                .map(|p| (0..n).map(|t| cost(t, p[t])).sum())
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(hung_cost, best_cost, epsilon = 1e-12);
        }
    }

    #[test]
    fn matched_cost_is_minimal_over_permutations() {
        let mut rng = rng_from_seed(23);
        for _ in 0..20 {
            let k = 4;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<SourcePosition> {
                (0..k)
                    .map(|_| {
                        pos(
                            rand::Rng::gen_range(rng, 0.5..2.0),
                            rand::Rng::gen_range(rng, -1.0..1.0),
                            rand::Rng::gen_range(rng, -1.0..1.0),
                        )
                    })
                    .collect()
            };
            let truths = draw(&mut rng);
            let ests = draw(&mut rng);
            let perm = match_sources(&ests, &truths).unwrap();
            let cost: f64 = (0..k).map(|t| dist_sq(&ests[perm[t]], &truths[t])).sum();
            for p in (0..k).permutations(k) {
                let c: f64 = (0..k).map(|t| dist_sq(&ests[p[t]], &truths[t])).sum();
                assert!(cost <= c + 1e-12);
            }
        }
    }

    #[test]
    fn rmse_trivial_cases() {
        let truths = vec![pos(1.0, 0.5, -0.5)];
        assert_eq!(rmse(&[(truths.clone(), truths.clone())]).unwrap(), 0.0);
        // unit displacement on each axis: sqrt(3 / 3) = 1
        let shifted = vec![pos(2.0, 1.5, 0.5)];
        assert_relative_eq!(rmse(&[(truths, shifted)]).unwrap(), 1.0, epsilon = 1e-12);
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn rmse_matches_scalar_recomputation() {
        let mut rng = rng_from_seed(5);
        let k = 2;
        let trials: Vec<(Vec<SourcePosition>, Vec<SourcePosition>)> = (0..6)
            .map(|_| {
                let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                    (0..k)
                        .map(|_| {
                            pos(
                                rand::Rng::gen_range(rng, 0.5..2.0),
                                rand::Rng::gen_range(rng, -1.0..1.0),
                                rand::Rng::gen_range(rng, -1.0..1.0),
                            )
                        })
                        .collect::<Vec<_>>()
                };
                (draw(&mut rng), draw(&mut rng))
            })
            .collect();
        let got = rmse(&trials).unwrap();
        let mut total = 0.0;
        for (truths, ests) in &trials {
            let perm = match_sources(ests, truths).unwrap();
            for (t, &e) in perm.iter().enumerate() {
                for a in 0..3 {
                    total += (truths[t].cartesian[a] - ests[e].cartesian[a]).powi(2);
                }
            }
        }
        let expect = (total / (3.0 * k as f64 * trials.len() as f64)).sqrt();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    fn small_config() -> ExperimentConfig {
        let geom = ArrayGeometry::half_wavelength(3, 3, 0.1).unwrap();
        let scenario = ScenarioPrior::with_bounds(
            geom,
            8.0,
            10.0,
            1,
            20,
            (-0.8, 0.8),
            (-0.8, 0.8),
            (0.3, 0.7),
        )
        .unwrap();
        let grid = SearchGrid::uniform((-0.8, 0.8), (-0.8, 0.8), (0.3, 0.7), (10, 10, 6)).unwrap();
        ExperimentConfig {
            scenario,
            snapshot_counts: vec![10, 20],
            kappas: vec![8.0],
            test_size: 3,
            grid,
            seed: 99,
        }
    }

    fn small_model(geom_n: usize, k: usize) -> Model {
        use crate::nn::model::{Architecture, LabelNormalizer};
        let mut arch = Architecture::desk(geom_n, k);
        arch.conv_channels = [4, 4, 4, 4];
        arch.fc_sizes = [8, 8, 8];
        arch.pool_target = 2;
        Model::new(
            arch,
            LabelNormalizer::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn rmse_experiment_shape_and_determinism() {
        let config = small_config();
        let mut model = small_model(9, 1);
        let r1 = run_rmse_experiment(&mut model, &config).unwrap();
        let r2 = run_rmse_experiment(&mut model, &config).unwrap();
        // 1 kappa x 2 snapshot counts x 2 methods
        assert_eq!(r1.rows.len(), 4);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert!(r1.to_csv().starts_with("method,kappa,"));
        for row in &r1.rows {
            assert!(row.rmse >= 0.0);
            assert_eq!(row.num_trials, 3);
        }
        assert!(r1.get("music", 8.0, 10).is_some());
        assert!(r1.sweep_mean("cnn", 8.0).is_some());
    }

    #[test]
    fn runtime_report_has_positive_times() {
        let config = small_config();
        let mut model = small_model(9, 1);
        let report = run_runtime_benchmark(&mut model, &config).unwrap();
        // 2 snapshot counts x 3 timed stages
        assert_eq!(report.rows.len(), 6);
        for row in &report.rows {
            assert!(row.mean_seconds > 0.0, "{row:?}");
            assert!(row.std_seconds >= 0.0);
        }
        assert!(report.mean("cnn", 10).is_some());
    }

    #[test]
    fn scatter_rows_and_determinism() {
        let config = small_config();
        let mut model = small_model(9, 1);
        let csv1 = scatter_report(&mut model, &config, 4).unwrap();
        let csv2 = scatter_report(&mut model, &config, 4).unwrap();
        assert_eq!(csv1, csv2);
        let lines: Vec<&str> = csv1.trim_end().lines().collect();
        // header + 4 realizations x 1 source
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 11);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 11);
        }
    }
}
