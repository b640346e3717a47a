//! 3D MUSIC: pseudospectrum over an (azimuth, elevation, range) grid,
//! greedy peak extraction, and end-to-end location estimation.

use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{steering_vector, ArrayGeometry, SourcePosition};
use crate::subspace::{eigendecompose, split_subspaces, SampleCovariance, SubspaceSplit};

/// Search grid over (azimuth, elevation, range).
#[derive(Clone, Debug)]
pub struct SearchGrid {
    pub azimuth: Vec<f64>,
    pub elevation: Vec<f64>,
    pub range: Vec<f64>,
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} axis is empty")));
    }
    for w in axis.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument(format!(
                "{name} axis is not strictly increasing"
            )));
        }
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl SearchGrid {
    pub fn new(azimuth: Vec<f64>, elevation: Vec<f64>, range: Vec<f64>) -> Result<Self> {
        check_axis("azimuth", &azimuth)?;
        check_axis("elevation", &elevation)?;
        check_axis("range", &range)?;
        if range[0] <= 0.0 {
            return Err(Error::InvalidArgument("ranges must be positive".into()));
        }
        Ok(Self {
            azimuth,
            elevation,
            range,
        })
    }

    /// Evenly spaced grid over the given bounds (inclusive endpoints).
    pub fn uniform(
        az_bounds: (f64, f64),
        el_bounds: (f64, f64),
        r_bounds: (f64, f64),
        counts: (usize, usize, usize),
    ) -> Result<Self> {
        Self::new(
            linspace(az_bounds.0, az_bounds.1, counts.0),
            linspace(el_bounds.0, el_bounds.1, counts.1),
            linspace(r_bounds.0, r_bounds.1, counts.2),
        )
    }

    pub fn num_cells(&self) -> usize {
        self.azimuth.len() * self.elevation.len() * self.range.len()
    }

    fn dims(&self) -> [usize; 3] {
        [self.azimuth.len(), self.elevation.len(), self.range.len()]
    }
}

/// MUSIC pseudospectrum sampled on a grid; indexed (azimuth, elevation, range).
#[derive(Clone, Debug)]
pub struct MusicSpectrum {
    pub values: Vec<f64>,
    pub grid: SearchGrid,
}

impl MusicSpectrum {
    pub fn value(&self, ia: usize, ie: usize, ir: usize) -> f64 {
        let [_, ne, nr] = self.grid.dims();
        self.values[(ia * ne + ie) * nr + ir]
    }
}

/// Which estimator produced a [`LocationEstimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Music,
    Cnn,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Music => "music",
            Method::Cnn => "cnn",
        }
    }
}

/// K estimated source positions plus the time spent producing them.
#[derive(Clone, Debug)]
pub struct LocationEstimate {
    pub positions: Vec<SourcePosition>,
    pub method: Method,
    pub elapsed_seconds: f64,
    /// Set when peak extraction could not find K separable peaks.
    pub degenerate: bool,
}

/// S = 1 / ||U_n^H a||^2, with the denominator floored at 1e-12 * N.
pub fn pseudospectrum_value(noise_subspace: &DMatrix<Complex64>, steering: &[Complex64]) -> f64 {
    let n = noise_subspace.nrows();
    debug_assert_eq!(steering.len(), n);
    let mut denom = 0.0;
    for c in 0..noise_subspace.ncols() {
        let mut dot = Complex64::new(0.0, 0.0);
        for r in 0..n {
            dot += noise_subspace[(r, c)].conj() * steering[r];
        }
        denom += dot.norm_sqr();
    }
    1.0 / denom.max(1e-12 * n as f64)
}

/// Spectrum evaluation options.
#[derive(Clone, Copy, Debug)]
pub struct SpectrumOptions {
    /// Parallelize over grid cells (output is identical either way).
    pub parallel: bool,
    /// Precompute all steering vectors up front. Trades memory
    /// (num_cells x N complex values) for fewer recomputations when the
    /// spectrum is evaluated repeatedly; off by default because large grids
    /// do not fit.
    pub cache_steering: bool,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            parallel: true,
            cache_steering: false,
        }
    }
}

fn cell_value(
    noise_subspace: &DMatrix<Complex64>,
    geom: &ArrayGeometry,
    az: f64,
    el: f64,
    r: f64,
) -> f64 {
    let src = SourcePosition::from_spherical(az, el, r).expect("grid ranges positive");
    let a = steering_vector(geom, &src);
    pseudospectrum_value(noise_subspace, &a)
}

/// Evaluate the pseudospectrum at every grid cell.
pub fn compute_spectrum_opts(
    noise_subspace: &DMatrix<Complex64>,
    grid: &SearchGrid,
    geom: &ArrayGeometry,
    opts: SpectrumOptions,
) -> MusicSpectrum {
    let [na, ne, nr] = grid.dims();
    let total = na * ne * nr;
    let eval = |flat: usize| -> f64 {
        let ir = flat % nr;
        let ie = (flat / nr) % ne;
        let ia = flat / (nr * ne);
        cell_value(
            noise_subspace,
            geom,
            grid.azimuth[ia],
            grid.elevation[ie],
            grid.range[ir],
        )
    };
    let values: Vec<f64> = if opts.cache_steering {
        // precompute steering vectors once, then project
        let steers: Vec<Vec<Complex64>> = if opts.parallel {
            (0..total)
                .into_par_iter()
                .map(|flat| {
                    let ir = flat % nr;
                    let ie = (flat / nr) % ne;
                    let ia = flat / (nr * ne);
                    let src = SourcePosition::from_spherical(
                        grid.azimuth[ia],
                        grid.elevation[ie],
                        grid.range[ir],
                    )
                    .expect("grid ranges positive");
                    steering_vector(geom, &src)
                })
                .collect()
        } else {
            (0..total)
                .map(|flat| {
                    let ir = flat % nr;
                    let ie = (flat / nr) % ne;
                    let ia = flat / (nr * ne);
                    let src = SourcePosition::from_spherical(
                        grid.azimuth[ia],
                        grid.elevation[ie],
                        grid.range[ir],
                    )
                    .expect("grid ranges positive");
                    steering_vector(geom, &src)
                })
                .collect()
        };
        if opts.parallel {
            steers
                .par_iter()
                .map(|a| pseudospectrum_value(noise_subspace, a))
                .collect()
        } else {
            steers
                .iter()
                .map(|a| pseudospectrum_value(noise_subspace, a))
                .collect()
        }
    } else if opts.parallel {
        (0..total).into_par_iter().map(eval).collect()
    } else {
        (0..total).map(eval).collect()
    };
    MusicSpectrum {
        values,
        grid: grid.clone(),
    }
}

/// Evaluate the pseudospectrum with default options (parallel, no cache).
pub fn compute_spectrum(
    noise_subspace: &DMatrix<Complex64>,
    grid: &SearchGrid,
    geom: &ArrayGeometry,
) -> MusicSpectrum {
    compute_spectrum_opts(noise_subspace, grid, geom, SpectrumOptions::default())
}

/// Peaks extracted from a spectrum, in descending spectrum order.
#[derive(Clone, Debug)]
pub struct PeakSet {
    /// (azimuth, elevation, range) of each accepted cell.
    pub peaks: Vec<(f64, f64, f64)>,
    /// Grid indices (ia, ie, ir) of each accepted cell.
    pub indices: Vec<[usize; 3]>,
    /// True when fewer than k separable peaks existed and suppressed cells
    /// had to be returned.
    pub degenerate: bool,
}

/// Greedy peak extraction: repeatedly take the global maximum among
/// unsuppressed cells, then suppress everything within +-2 grid steps per
/// axis of the accepted peak.
pub fn find_peaks(spectrum: &MusicSpectrum, k: usize) -> Result<PeakSet> {
    let [na, ne, nr] = spectrum.grid.dims();
    let total = na * ne * nr;
    if k == 0 || k > total {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= {total}, got {k}"
        )));
    }
    const EXCLUSION: usize = 2;
    let mut suppressed = vec![false; total];
    let mut taken = vec![false; total];
    let mut peaks = Vec::with_capacity(k);
    let mut indices = Vec::with_capacity(k);
    let mut degenerate = false;
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in spectrum.values.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            if best.map_or(true, |b| v > spectrum.values[b]) {
                best = Some(i);
            }
        }
        let flat = match best {
            Some(f) => f,
            None => {
                // every cell suppressed: fall back to the best remaining
                // cell not already returned
                degenerate = true;
                let mut fallback: Option<usize> = None;
                for (i, &v) in spectrum.values.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    if fallback.map_or(true, |b| v > spectrum.values[b]) {
                        fallback = Some(i);
                    }
                }
                fallback.expect("k <= total cells")
            }
        };
        taken[flat] = true;
        let ir = flat % nr;
        let ie = (flat / nr) % ne;
        let ia = flat / (nr * ne);
        peaks.push((
            spectrum.grid.azimuth[ia],
            spectrum.grid.elevation[ie],
            spectrum.grid.range[ir],
        ));
        indices.push([ia, ie, ir]);
        let lo = |x: usize| x.saturating_sub(EXCLUSION);
        let hi = |x: usize, n: usize| (x + EXCLUSION + 1).min(n);
        for a in lo(ia)..hi(ia, na) {
            for e in lo(ie)..hi(ie, ne) {
                for r in lo(ir)..hi(ir, nr) {
                    suppressed[(a * ne + e) * nr + r] = true;
                }
            }
        }
    }
    Ok(PeakSet {
        peaks,
        indices,
        degenerate,
    })
}

/// Full MUSIC pipeline from a sample covariance. `elapsed_seconds` covers
/// the spectrum evaluation and peak extraction only.
pub fn estimate_locations_music(
    cov: &SampleCovariance,
    k: usize,
    grid: &SearchGrid,
    geom: &ArrayGeometry,
) -> Result<LocationEstimate> {
    let split = eigendecompose(cov)?;
    estimate_locations_music_from_split(&split, k, grid, geom, SpectrumOptions::default())
}

/// MUSIC from an existing eigendecomposition; lets callers share the
/// covariance/eigen preprocessing with the CNN path.
pub fn estimate_locations_music_from_split(
    split: &SubspaceSplit,
    k: usize,
    grid: &SearchGrid,
    geom: &ArrayGeometry,
    opts: SpectrumOptions,
) -> Result<LocationEstimate> {
    let (_, noise) = split_subspaces(split, k)?;
    let start = Instant::now();
    let spectrum = compute_spectrum_opts(&noise, grid, geom, opts);
    let peaks = find_peaks(&spectrum, k)?;
    let elapsed = start.elapsed().as_secs_f64();
    let positions = peaks
        .peaks
        .iter()
        .map(|&(az, el, r)| SourcePosition::from_spherical(az, el, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocationEstimate {
        positions,
        method: Method::Music,
        elapsed_seconds: elapsed,
        degenerate: peaks.degenerate,
    })
}

/// Dump a spectrum as a text header (axis lengths and values) followed by
/// the flat little-endian f64 payload in (azimuth, elevation, range) order.
pub fn write_spectrum<W: std::io::Write>(spectrum: &MusicSpectrum, w: &mut W) -> Result<()> {
    let fmt_axis = |axis: &[f64]| {
        axis.iter()
            .map(|v| format!("{v:.17e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    writeln!(w, "nfloc-spectrum v1")?;
    let [na, ne, nr] = spectrum.grid.dims();
    writeln!(w, "dims {na} {ne} {nr}")?;
    writeln!(w, "azimuth {}", fmt_axis(&spectrum.grid.azimuth))?;
    writeln!(w, "elevation {}", fmt_axis(&spectrum.grid.elevation))?;
    writeln!(w, "range {}", fmt_axis(&spectrum.grid.range))?;
    writeln!(w, "---")?;
    for v in &spectrum.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{simulate_snapshots, ChannelModel};
    use crate::subspace::sample_covariance;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(4, 4, 0.1).unwrap()
    }

    fn random_orthonormal(n: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<Complex64> {
        let m = DMatrix::<Complex64>::from_fn(n, n, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let h = &m * m.adjoint() + DMatrix::<Complex64>::identity(n, n);
        let eig = h.symmetric_eigen();
        eig.eigenvectors.columns(0, cols).into_owned()
    }

    #[test]
    fn pseudospectrum_matches_projector_form() {
        let mut rng = crate::rng::rng_from_seed(2);
        let n = 8;
        for _ in 0..20 {
            let un = random_orthonormal(n, 5, &mut rng);
            let a: Vec<Complex64> = (0..n)
                .map(|_| Complex64::from_polar(1.0, rng.gen_range(-3.0..3.0)))
                .collect();
            let av = DMatrix::<Complex64>::from_fn(n, 1, |i, _| a[i]);
            let denom = (av.adjoint() * &un * un.adjoint() * &av)[(0, 0)].re;
            let expect = 1.0 / denom.max(1e-12 * n as f64);
            let got = pseudospectrum_value(&un, &a);
            assert_relative_eq!(got, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn pseudospectrum_noise_eigenvector_gives_one() {
        let mut rng = crate::rng::rng_from_seed(6);
        let un = random_orthonormal(6, 3, &mut rng);
        let a: Vec<Complex64> = (0..6).map(|i| un[(i, 1)]).collect();
        assert_relative_eq!(pseudospectrum_value(&un, &a), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn pseudospectrum_orthogonal_hits_floor() {
        // steering orthogonal to the noise subspace -> floored peak
        let n = 4;
        let mut un = DMatrix::<Complex64>::zeros(n, 2);
        un[(2, 0)] = Complex64::new(1.0, 0.0);
        un[(3, 1)] = Complex64::new(1.0, 0.0);
        let mut a = vec![Complex64::new(0.0, 0.0); n];
        a[0] = Complex64::new(1.0, 0.0);
        assert_eq!(pseudospectrum_value(&un, &a), 1.0 / (1e-12 * n as f64));
    }

    #[test]
    fn single_cell_grid() {
        let mut rng = crate::rng::rng_from_seed(1);
        let un = random_orthonormal(16, 15, &mut rng);
        let grid = SearchGrid::new(vec![0.1], vec![-0.2], vec![0.5]).unwrap();
        let spec = compute_spectrum(&un, &grid, &geom());
        assert_eq!(spec.values.len(), 1);
        let expected = cell_value(&un, &geom(), 0.1, -0.2, 0.5);
        assert_eq!(spec.values[0], expected);
    }

    #[test]
    fn spectrum_independent_of_parallelism_and_cache() {
        let mut rng = crate::rng::rng_from_seed(8);
        let un = random_orthonormal(16, 15, &mut rng);
        let grid =
            SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.4, 0.9), (7, 6, 5)).unwrap();
        let base = compute_spectrum_opts(
            &un,
            &grid,
            &geom(),
            SpectrumOptions {
                parallel: false,
                cache_steering: false,
            },
        );
        for (parallel, cache) in [(true, false), (false, true), (true, true)] {
            let other = compute_spectrum_opts(
                &un,
                &grid,
                &geom(),
                SpectrumOptions {
                    parallel,
                    cache_steering: cache,
                },
            );
            assert_eq!(base.values, other.values);
        }
        for v in &base.values {
            assert!(v.is_finite() && *v > 0.0);
        }
    }

    #[test]
    fn on_grid_noiseless_source_is_global_max() {
        let g = geom();
        let grid =
            SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.43, 0.9), (9, 9, 7)).unwrap();
        let src = SourcePosition::from_spherical(
            grid.azimuth[6],
            grid.elevation[2],
            grid.range[4],
        )
        .unwrap();
        let model = ChannelModel::new(&g, f64::INFINITY).unwrap();
        let batch = simulate_snapshots(&g, &[src], &model, 8, f64::INFINITY, 5).unwrap();
        let cov = sample_covariance(&batch);
        let split = eigendecompose(&cov).unwrap();
        let (_, un) = split_subspaces(&split, 1).unwrap();
        let spec = compute_spectrum(&un, &grid, &g);
        // exhaustive argmax oracle
        let (mut best, mut best_v) = (0, f64::MIN);
        for (i, &v) in spec.values.iter().enumerate() {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        let nr = grid.range.len();
        let ne = grid.elevation.len();
        assert_eq!(best % nr, 4);
        assert_eq!((best / nr) % ne, 2);
        assert_eq!(best / (nr * ne), 6);
        // peak finder agrees
        let peaks = find_peaks(&spec, 1).unwrap();
        assert_eq!(peaks.indices[0], [6, 2, 4]);
        assert!(!peaks.degenerate);
    }

    #[test]
    fn two_separated_peaks_found() {
        // spectrum built analytically: two well-separated bumps
        let grid =
            SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.4, 0.9), (11, 11, 11)).unwrap();
        let mut values = vec![1.0; grid.num_cells()];
        let idx = |a: usize, e: usize, r: usize| (a * 11 + e) * 11 + r;
        values[idx(2, 2, 2)] = 50.0;
        values[idx(8, 8, 8)] = 500.0;
        let spec = MusicSpectrum {
            values,
            grid: grid.clone(),
        };
        let peaks = find_peaks(&spec, 2).unwrap();
        assert!(!peaks.degenerate);
        let mut got = peaks.indices.clone();
        got.sort();
        assert_eq!(got, vec![[2, 2, 2], [8, 8, 8]]);
        // descending spectrum order
        assert_eq!(peaks.indices[0], [8, 8, 8]);
    }

    #[test]
    fn close_peaks_trigger_suppression() {
        // second-best cell sits inside the exclusion radius of the first
        let grid =
            SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.4, 0.9), (7, 5, 5)).unwrap();
        let mut values = vec![1.0; 7 * 5 * 5];
        let idx = |a: usize, e: usize, r: usize| (a * 5 + e) * 5 + r;
        values[idx(2, 2, 2)] = 100.0;
        values[idx(2, 2, 3)] = 90.0; // within +-2 cells of the first peak
        values[idx(6, 4, 0)] = 5.0;
        let spec = MusicSpectrum {
            values,
            grid: grid.clone(),
        };
        let peaks = find_peaks(&spec, 2).unwrap();
        assert_eq!(peaks.indices[0], [2, 2, 2]);
        // the neighbor is skipped in favor of the separated cell
        assert_eq!(peaks.indices[1], [6, 4, 0]);
        assert!(!peaks.degenerate);
    }

    #[test]
    fn degenerate_when_everything_suppressed() {
        // tiny grid: one peak suppresses all cells, second pick must fall
        // back and raise the flag
        let grid = SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.4, 0.9), (3, 3, 3)).unwrap();
        let mut values = vec![1.0; 27];
        values[13] = 10.0;
        values[0] = 5.0;
        let spec = MusicSpectrum {
            values,
            grid: grid.clone(),
        };
        let peaks = find_peaks(&spec, 2).unwrap();
        assert!(peaks.degenerate);
        assert_eq!(peaks.peaks.len(), 2);
        assert_ne!(peaks.indices[0], peaks.indices[1]);
    }

    #[test]
    fn end_to_end_exact_on_grid_recovery() {
        let g = geom();
        let grid =
            SearchGrid::uniform((-1.0, 1.0), (-1.0, 1.0), (0.43, 0.9), (9, 9, 7)).unwrap();
        let src = SourcePosition::from_spherical(
            grid.azimuth[3],
            grid.elevation[5],
            grid.range[2],
        )
        .unwrap();
        let model = ChannelModel::new(&g, f64::INFINITY).unwrap();
        let batch = simulate_snapshots(&g, &[src], &model, 4, f64::INFINITY, 21).unwrap();
        let cov = sample_covariance(&batch);
        let est = estimate_locations_music(&cov, 1, &grid, &g).unwrap();
        assert_eq!(est.positions.len(), 1);
        for (a, b) in est.positions[0].cartesian.iter().zip(&src.cartesian) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert!(est.elapsed_seconds > 0.0);
    }

    #[test]
    fn spectrum_dump_round_trip_header() {
        let grid = SearchGrid::uniform((-0.5, 0.5), (-0.5, 0.5), (0.4, 0.6), (3, 2, 2)).unwrap();
        let spec = MusicSpectrum {
            values: (0..12).map(|i| i as f64 + 0.5).collect(),
            grid,
        };
        let mut buf = Vec::new();
        write_spectrum(&spec, &mut buf).unwrap();
        let text_end = buf.windows(4).position(|w| w == b"---\n").unwrap() + 4;
        let header = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert!(header.starts_with("nfloc-spectrum v1\ndims 3 2 2\n"));
        let payload = &buf[text_end..];
        assert_eq!(payload.len(), 12 * 8);
        let first = f64::from_le_bytes(payload[..8].try_into().unwrap());
        assert_eq!(first, 0.5);
    }
}
