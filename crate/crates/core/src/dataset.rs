//! Labeled (eigenvector tensor, source coordinates) datasets drawn from the
//! scenario priors, plus a bit-exact binary file format.
//!
//! File layout: a line-oriented text header (magic, version, geometry and
//! prior echo, record count), a `---` separator, then per record the
//! little-endian f32 input tensor, the f64 labels in meters, and the u64
//! per-record seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{simulate_snapshots, ChannelModel};
use crate::error::{Error, Result};
use crate::geometry::{source_to_cartesian, ArrayGeometry, SourcePosition};
use crate::rng::{derive_seed, rng_from_seed};
use crate::subspace::{cnn_input_tensor, eigendecompose, sample_covariance};
use crate::tensor::Tensor;

/// Random scenario description: geometry plus the distributions sources are
/// drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioPrior {
    pub geom: ArrayGeometry,
    pub kappa: f64,
    pub snr_db: f64,
    pub num_sources: usize,
    pub num_snapshots: usize,
    /// Azimuth bounds in radians.
    pub azimuth_bounds: (f64, f64),
    /// Elevation bounds in radians.
    pub elevation_bounds: (f64, f64),
    /// Range bounds in meters.
    pub range_bounds: (f64, f64),
}

impl ScenarioPrior {
    /// Default angular prior of +-60 degrees and the amplitude-flat
    /// near-field range window [2D, d_FA/4]. Fails when that window is
    /// empty (small apertures); pass explicit bounds instead.
    pub fn new(
        geom: ArrayGeometry,
        kappa: f64,
        snr_db: f64,
        num_sources: usize,
        num_snapshots: usize,
    ) -> Result<Self> {
        let d = geom.aperture();
        let range_bounds = (2.0 * d, geom.fraunhofer_distance() / 4.0);
        Self::with_bounds(
            geom,
            kappa,
            snr_db,
            num_sources,
            num_snapshots,
            (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            range_bounds,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bounds(
        geom: ArrayGeometry,
        kappa: f64,
        snr_db: f64,
        num_sources: usize,
        num_snapshots: usize,
        azimuth_bounds: (f64, f64),
        elevation_bounds: (f64, f64),
        range_bounds: (f64, f64),
    ) -> Result<Self> {
        if num_sources == 0 || num_snapshots == 0 {
            return Err(Error::InvalidArgument(
                "need at least one source and one snapshot".into(),
            ));
        }
        if range_bounds.0 <= 0.0 || range_bounds.0 >= range_bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "invalid range bounds [{}, {}]",
                range_bounds.0, range_bounds.1
            )));
        }
        if azimuth_bounds.0 >= azimuth_bounds.1 || elevation_bounds.0 >= elevation_bounds.1 {
            return Err(Error::InvalidArgument("invalid angular bounds".into()));
        }
        Ok(Self {
            geom,
            kappa,
            snr_db,
            num_sources,
            num_snapshots,
            azimuth_bounds,
            elevation_bounds,
            range_bounds,
        })
    }

    /// Draw one source uniformly from the prior.
    pub fn draw_source(&self, rng: &mut impl Rng) -> SourcePosition {
        let az = rng.gen_range(self.azimuth_bounds.0..self.azimuth_bounds.1);
        let el = rng.gen_range(self.elevation_bounds.0..self.elevation_bounds.1);
        let r = rng.gen_range(self.range_bounds.0..self.range_bounds.1);
        SourcePosition::from_spherical(az, el, r).expect("prior ranges positive")
    }

    /// Draw K sources and sort them canonically (ascending azimuth, ties by
    /// elevation then range).
    pub fn draw_sources(&self, rng: &mut impl Rng) -> Vec<SourcePosition> {
        let mut sources: Vec<SourcePosition> =
            (0..self.num_sources).map(|_| self.draw_source(rng)).collect();
        sort_canonical(&mut sources);
        sources
    }

    /// Axis-aligned Cartesian box containing every source the prior can
    /// produce, found by dense boundary sampling and padded by 1%.
    pub fn cartesian_bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        let steps = 96;
        for ai in 0..=steps {
            let az = self.azimuth_bounds.0
                + (self.azimuth_bounds.1 - self.azimuth_bounds.0) * ai as f64 / steps as f64;
            for ei in 0..=steps {
                let el = self.elevation_bounds.0
                    + (self.elevation_bounds.1 - self.elevation_bounds.0) * ei as f64
                        / steps as f64;
                for r in [self.range_bounds.0, self.range_bounds.1] {
                    let c = source_to_cartesian(az, el, r);
                    for a in 0..3 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
            }
        }
        for a in 0..3 {
            let pad = 0.01 * (hi[a] - lo[a]).max(1e-9);
            lo[a] -= pad;
            hi[a] += pad;
        }
        (lo, hi)
    }

    /// Euclidean diagonal of the prior's Cartesian bounding box.
    pub fn box_diagonal(&self) -> f64 {
        let (lo, hi) = self.cartesian_bounding_box();
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Sort sources by ascending azimuth, ties by elevation then range.
pub fn sort_canonical(sources: &mut [SourcePosition]) {
    sources.sort_by(|a, b| {
        a.azimuth
            .partial_cmp(&b.azimuth)
            .unwrap()
            .then(a.elevation.partial_cmp(&b.elevation).unwrap())
            .then(a.range.partial_cmp(&b.range).unwrap())
    });
}

/// One training/evaluation record. The input tensor is stored at f32, the
/// precision it is serialized with.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// 2 x N x N input tensor, row-major, f32.
    pub input: Vec<f32>,
    /// 3K labels in meters, canonical source order.
    pub labels: Vec<f64>,
    /// Seed this record was generated with.
    pub seed: u64,
}

impl DatasetRecord {
    pub fn input_tensor(&self, n: usize) -> Tensor {
        Tensor::from_vec(&[2, n, n], self.input.iter().map(|&v| v as f64).collect())
            .expect("record tensor consistent with N")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub prior: ScenarioPrior,
    pub master_seed: u64,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Generate one record from its derived seed.
fn generate_record(prior: &ScenarioPrior, model: &ChannelModel, seed: u64) -> DatasetRecord {
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let sources = prior.draw_sources(&mut rng);
    let batch = simulate_snapshots(
        &prior.geom,
        &sources,
        model,
        prior.num_snapshots,
        prior.snr_db,
        derive_seed(seed, 1),
    )
    .expect("prior guarantees valid batch arguments");
    let cov = sample_covariance(&batch);
    let split = eigendecompose(&cov).expect("sample covariance is Hermitian");
    let tensor = cnn_input_tensor(&split);
    let labels: Vec<f64> = sources.iter().flat_map(|s| s.cartesian).collect();
    DatasetRecord {
        input: tensor.data.iter().map(|&v| v as f32).collect(),
        labels,
        seed,
    }
}

/// Generate `count` records; per-record seeds derive from `master_seed`, so
/// generation parallelizes without losing determinism.
pub fn generate_dataset(prior: &ScenarioPrior, count: usize, master_seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    let model = ChannelModel::new(&prior.geom, prior.kappa)?;
    let records: Vec<DatasetRecord> = (0..count)
        .into_par_iter()
        .map(|i| generate_record(prior, &model, derive_seed(master_seed, i as u64)))
        .collect();
    Ok(Dataset {
        prior: prior.clone(),
        master_seed,
        records,
    })
}

/// Seeded shuffle then split; the parts are disjoint and exhaustive.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng_from_seed(seed));
    let n_train = ((dataset.len() as f64) * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| Dataset {
        prior: dataset.prior.clone(),
        master_seed: dataset.master_seed,
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
    };
    Ok((pick(&indices[..n_train]), pick(&indices[n_train..])))
}

const DATASET_MAGIC: &str = "NFDATASET v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Serialize a dataset. The byte stream is a pure function of the dataset.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, w: &mut W) -> Result<()> {
    let p = &dataset.prior;
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "n_y {}", p.geom.n_y)?;
    writeln!(w, "n_z {}", p.geom.n_z)?;
    writeln!(w, "d_y {}", fmt_f64(p.geom.d_y))?;
    writeln!(w, "d_z {}", fmt_f64(p.geom.d_z))?;
    writeln!(w, "wavelength {}", fmt_f64(p.geom.wavelength))?;
    writeln!(w, "kappa {}", fmt_f64(p.kappa))?;
    writeln!(w, "snr_db {}", fmt_f64(p.snr_db))?;
    writeln!(w, "num_sources {}", p.num_sources)?;
    writeln!(w, "num_snapshots {}", p.num_snapshots)?;
    writeln!(w, "azimuth_bounds {} {}", fmt_f64(p.azimuth_bounds.0), fmt_f64(p.azimuth_bounds.1))?;
    writeln!(
        w,
        "elevation_bounds {} {}",
        fmt_f64(p.elevation_bounds.0),
        fmt_f64(p.elevation_bounds.1)
    )?;
    writeln!(w, "range_bounds {} {}", fmt_f64(p.range_bounds.0), fmt_f64(p.range_bounds.1))?;
    writeln!(w, "master_seed {}", dataset.master_seed)?;
    writeln!(w, "count {}", dataset.len())?;
    writeln!(w, "---")?;
    for rec in &dataset.records {
        for v in &rec.input {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &rec.labels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&rec.seed.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Tracks the byte offset while reading so format errors can name it.
struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_line(&mut self) -> Result<String> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match self.inner.read(&mut byte)? {
                0 => {
                    return Err(Error::Format {
                        offset: self.offset,
                        message: "unexpected end of file in header".into(),
                    })
                }
                _ => {
                    self.offset += 1;
                    if byte[0] == b'\n' {
                        break;
                    }
                    line.push(byte[0]);
                }
            }
        }
        String::from_utf8(line).map_err(|_| Error::Format {
            offset: self.offset,
            message: "header is not valid UTF-8".into(),
        })
    }

    fn read_exact_at(&mut self, buf: &mut [u8], context: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                message: format!("truncated payload while reading {context}"),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

struct HeaderParser {
    offset_hint: u64,
}

impl HeaderParser {
    fn field<'a>(&self, line: &'a str, key: &str) -> Result<&'a str> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::Format {
                offset: self.offset_hint,
                message: format!("expected header key '{key}', got '{line}'"),
            })
    }

    fn parse<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T> {
        s.trim().parse().map_err(|_| Error::Format {
            offset: self.offset_hint,
            message: format!("cannot parse {what} from '{s}'"),
        })
    }

    fn pair(&self, s: &str, what: &str) -> Result<(f64, f64)> {
        let mut it = s.split_whitespace();
        let a = self.parse(it.next().unwrap_or(""), what)?;
        let b = self.parse(it.next().unwrap_or(""), what)?;
        Ok((a, b))
    }
}

pub fn read_dataset_from<R: Read>(r: R) -> Result<Dataset> {
    let mut r = CountingReader::new(r);
    let magic = r.read_line()?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic '{magic}', expected '{DATASET_MAGIC}'"),
        });
    }
    let mut next = |key: &str| -> Result<String> {
        let line = r.read_line()?;
        let hp = HeaderParser { offset_hint: r.offset };
        hp.field(&line, key).map(str::to_owned)
    };
    let n_y = next("n_y")?;
    let n_z = next("n_z")?;
    let d_y = next("d_y")?;
    let d_z = next("d_z")?;
    let wavelength = next("wavelength")?;
    let kappa = next("kappa")?;
    let snr_db = next("snr_db")?;
    let num_sources = next("num_sources")?;
    let num_snapshots = next("num_snapshots")?;
    let az = next("azimuth_bounds")?;
    let el = next("elevation_bounds")?;
    let rb = next("range_bounds")?;
    let master_seed = next("master_seed")?;
    let count = next("count")?;
    let sep = r.read_line()?;
    if sep != "---" {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("expected header terminator '---', got '{sep}'"),
        });
    }
    let hp = HeaderParser { offset_hint: r.offset };
    let geom = ArrayGeometry::new(
        hp.parse(&n_y, "n_y")?,
        hp.parse(&n_z, "n_z")?,
        hp.parse(&d_y, "d_y")?,
        hp.parse(&d_z, "d_z")?,
        hp.parse(&wavelength, "wavelength")?,
    )
    .map_err(|e| Error::Format {
        offset: hp.offset_hint,
        message: format!("invalid geometry: {e}"),
    })?;
    let prior = ScenarioPrior::with_bounds(
        geom,
        hp.parse(&kappa, "kappa")?,
        hp.parse(&snr_db, "snr_db")?,
        hp.parse(&num_sources, "num_sources")?,
        hp.parse(&num_snapshots, "num_snapshots")?,
        hp.pair(&az, "azimuth_bounds")?,
        hp.pair(&el, "elevation_bounds")?,
        hp.pair(&rb, "range_bounds")?,
    )
    .map_err(|e| Error::Format {
        offset: hp.offset_hint,
        message: format!("invalid prior: {e}"),
    })?;
    let count: usize = hp.parse(&count, "count")?;
    let master_seed: u64 = hp.parse(&master_seed, "master_seed")?;
    let n = prior.geom.num_antennas();
    let tensor_len = 2 * n * n;
    let label_len = 3 * prior.num_sources;
    let mut records = Vec::with_capacity(count);
    let mut tensor_buf = vec![0u8; tensor_len * 4];
    let mut label_buf = vec![0u8; label_len * 8];
    let mut seed_buf = [0u8; 8];
    for rec_idx in 0..count {
        let ctx = format!("record {rec_idx}");
        r.read_exact_at(&mut tensor_buf, &ctx)?;
        r.read_exact_at(&mut label_buf, &ctx)?;
        r.read_exact_at(&mut seed_buf, &ctx)?;
        let input: Vec<f32> = tensor_buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels: Vec<f64> = label_buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(DatasetRecord {
            input,
            labels,
            seed: u64::from_le_bytes(seed_buf),
        });
    }
    Ok(Dataset {
        prior,
        master_seed,
        records,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_prior() -> ScenarioPrior {
        let geom = ArrayGeometry::half_wavelength(4, 4, 0.1).unwrap();
        ScenarioPrior::with_bounds(
            geom,
            4.0,
            0.0,
            2,
            10,
            (-1.0, 1.0),
            (-1.0, 1.0),
            (0.43, 0.88),
        )
        .unwrap()
    }

    #[test]
    fn paper_scale_prior_bounds() {
        // N_y = 16, N_z = 8, lambda = 0.1: the diagonal aperture is
        // sqrt((15*0.05)^2 + (7*0.05)^2) = sqrt(0.685) ~ 0.8276 m,
        // d_FA = 2 D^2 / lambda = 13.70 m, window [1.6553, 3.4250] m
        let geom = ArrayGeometry::half_wavelength(16, 8, 0.1).unwrap();
        let prior = ScenarioPrior::new(geom, 4.0, 0.0, 3, 25).unwrap();
        assert_relative_eq!(geom.aperture(), 0.685f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(geom.fraunhofer_distance(), 13.7, epsilon = 1e-12);
        assert_relative_eq!(prior.range_bounds.0, 2.0 * 0.685f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(prior.range_bounds.1, 3.425, epsilon = 1e-12);
    }

    #[test]
    fn small_aperture_default_window_is_empty() {
        let geom = ArrayGeometry::half_wavelength(4, 4, 0.1).unwrap();
        assert!(ScenarioPrior::new(geom, 4.0, 0.0, 1, 10).is_err());
    }

    #[test]
    fn azimuth_draws_are_uniform() {
        // chi-squared goodness of fit, 20 bins; 36.191 is the 0.99
        // quantile of chi2 with 19 dof, so p > 0.01 iff stat < 36.191
        let prior = small_prior();
        let mut rng = rng_from_seed(31);
        let draws = 100_000;
        let mut bins = [0usize; 20];
        let (lo, hi) = prior.azimuth_bounds;
        for _ in 0..draws {
            let s = prior.draw_source(&mut rng);
            let b = (((s.azimuth - lo) / (hi - lo)) * 20.0) as usize;
            bins[b.min(19)] += 1;
        }
        let expect = draws as f64 / 20.0;
        let chi2: f64 = bins
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let prior = small_prior();
        let d1 = generate_dataset(&prior, 8, 42).unwrap();
        let d2 = generate_dataset(&prior, 8, 42).unwrap();
        assert_eq!(d1, d2);
        for rec in &d1.records {
            // canonical ordering: ascending azimuth of the label triples
            let az0 = rec.labels[1].atan2(rec.labels[0]);
            let az1 = rec.labels[4].atan2(rec.labels[3]);
            assert!(az0 <= az1);
        }
    }

    #[test]
    fn labels_round_trip_into_prior_box() {
        let prior = small_prior();
        let d = generate_dataset(&prior, 16, 7).unwrap();
        for rec in &d.records {
            for triple in rec.labels.chunks(3) {
                let s = SourcePosition::from_cartesian(triple[0], triple[1], triple[2]).unwrap();
                assert!(s.azimuth >= prior.azimuth_bounds.0 && s.azimuth <= prior.azimuth_bounds.1);
                assert!(
                    s.elevation >= prior.elevation_bounds.0
                        && s.elevation <= prior.elevation_bounds.1
                );
                assert!(s.range >= prior.range_bounds.0 && s.range <= prior.range_bounds.1);
            }
        }
    }

    #[test]
    fn bounding_box_contains_draws() {
        let prior = small_prior();
        let (lo, hi) = prior.cartesian_bounding_box();
        let mut rng = rng_from_seed(3);
        for _ in 0..2000 {
            let s = prior.draw_source(&mut rng);
            for a in 0..3 {
                assert!(s.cartesian[a] >= lo[a] && s.cartesian[a] <= hi[a]);
            }
        }
        assert!(prior.box_diagonal() > 0.0);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let prior = small_prior();
        let d = generate_dataset(&prior, 5, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        assert_eq!(d, back);
        let mut buf2 = Vec::new();
        write_dataset_to(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncation_names_record_and_offset() {
        let prior = small_prior();
        let d = generate_dataset(&prior, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        match read_dataset_from(buf.as_slice()) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("record 2"), "message: {message}");
                assert!(offset > 0);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let res = read_dataset_from(&b"WRONG v9\n"[..]);
        assert!(matches!(res, Err(Error::Format { .. })));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let prior = small_prior();
        let d = generate_dataset(&prior, 10, 9).unwrap();
        let (train, test) = split_dataset(&d, 0.7, 5).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(test.len(), 3);
        let mut all: Vec<u64> = train
            .records
            .iter()
            .chain(&test.records)
            .map(|r| r.seed)
            .collect();
        all.sort_unstable();
        let mut orig: Vec<u64> = d.records.iter().map(|r| r.seed).collect();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let (train2, _) = split_dataset(&d, 0.7, 5).unwrap();
        assert_eq!(train, train2);
        assert!(split_dataset(&d, 0.0, 1).is_err());
    }
}
