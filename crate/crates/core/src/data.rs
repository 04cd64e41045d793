//! Synthetic long-tailed tasks and line-oriented record files.
//!
//! ID classes are isotropic Gaussian blobs whose training counts decay
//! exponentially from `n_max` (class 0, the head) to `n_max / rho` (class
//! `k - 1`, the tail); the test split is balanced. Auxiliary outliers come
//! from a broad isotropic background with holes carved around every class
//! mean. True OOD samples come from an anisotropic Gaussian displaced along
//! the direction of the head classes, so they differ from the outliers in
//! both location and covariance.
//!
//! Files are text: a header line `<key>=<width>` followed by rows
//! `id,label,v1,...,v_width` (`k=` for logits, `d=` for features).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

pub const DEFAULT_MEAN_RADIUS: f64 = 4.0;

const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_OUTLIER: u64 = 3;
const STREAM_TRUE_OOD: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    IdTrain,
    IdTest,
    Outlier,
    TrueOod,
}

impl Provenance {
    pub fn is_id(self) -> bool {
        matches!(self, Provenance::IdTrain | Provenance::IdTest)
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Provenance::IdTrain => "id_train",
            Provenance::IdTest => "id_test",
            Provenance::Outlier => "outlier",
            Provenance::TrueOod => "true_ood",
        }
    }
}

/// Features with labels in `[0, k)` for ID sets and `-1` for outlier/OOD sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: Matrix,
    pub labels: Vec<i64>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(features: Matrix, labels: Vec<i64>, provenance: Provenance) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        let ok = if provenance.is_id() {
            labels.iter().all(|&y| y >= 0)
        } else {
            labels.iter().all(|&y| y == -1)
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "{provenance:?} labels must be {}",
                if provenance.is_id() { "non-negative" } else { "-1" }
            )));
        }
        Ok(Self {
            features,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &y in &self.labels {
            if let Ok(y) = usize::try_from(y) {
                if y < k {
                    counts[y] += 1;
                }
            }
        }
        counts
    }
}

/// Per-class training counts `round_half_up(n_max * rho^(-j/(k-1)))`, `j = 0..k`.
///
/// The endpoints are pinned to `n_max` and `round_half_up(n_max / rho)`.
pub fn class_counts(k: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidSpec(format!("k must be >= 2, got {k}")));
    }
    if !(rho.is_finite() && rho >= 1.0) {
        return Err(Error::InvalidSpec(format!("rho must be >= 1, got {rho}")));
    }
    let round = |x: f64| (x + 0.5).floor() as usize;
    let counts: Vec<usize> = (0..k)
        .map(|j| {
            if j == 0 {
                n_max
            } else if j == k - 1 {
                round(n_max as f64 / rho)
            } else {
                round(n_max as f64 * rho.powf(-(j as f64) / (k - 1) as f64))
            }
        })
        .collect();
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidSpec(format!(
            "class {j} would have no samples (n_max {n_max}, rho {rho})"
        )));
    }
    Ok(counts)
}

/// Default class means: `±radius` along coordinate axes when `k <= 2d`
/// (`+e_0, .., +e_{d-1}, -e_0, ..`), seeded random directions otherwise.
pub fn default_class_means(k: usize, d: usize, radius: f64, seed: u64) -> Matrix {
    let mut means = Matrix::zeros(k, d);
    if k <= 2 * d {
        for j in 0..k {
            let sign = if j < d { 1.0 } else { -1.0 };
            means[(j, j % d)] = sign * radius;
        }
    } else {
        let mut rng = rng_for(seed, STREAM_MEANS);
        for j in 0..k {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for t in 0..d {
                means[(j, t)] = radius * v[t] / norm;
            }
        }
    }
    means
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub k: usize,
    pub n_max: usize,
    pub rho: f64,
    pub d: usize,
    pub seed: u64,
    /// `k × d` class centers.
    pub class_means: Matrix,
    /// Isotropic per-class standard deviation.
    pub class_scale: f64,
    /// Balanced test split: samples per class.
    pub n_test_per_class: usize,
    /// Standard deviation of the outlier background.
    pub outlier_scale: f64,
}

impl LongTailSpec {
    pub fn new(k: usize, n_max: usize, rho: f64, d: usize, seed: u64) -> Self {
        Self {
            k,
            n_max,
            rho,
            d,
            seed,
            class_means: default_class_means(k, d, DEFAULT_MEAN_RADIUS, seed),
            class_scale: 1.0,
            n_test_per_class: 100,
            outlier_scale: DEFAULT_MEAN_RADIUS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        class_counts(self.k, self.n_max, self.rho)?;
        if self.d == 0 {
            return Err(Error::InvalidSpec("feature dimension must be positive".into()));
        }
        if self.class_means.rows() != self.k || self.class_means.cols() != self.d {
            return Err(Error::InvalidSpec(format!(
                "class means are {}×{}, expected {}×{}",
                self.class_means.rows(),
                self.class_means.cols(),
                self.k,
                self.d
            )));
        }
        for (name, v) in [("class_scale", self.class_scale), ("outlier_scale", self.outlier_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        class_counts(self.k, self.n_max, self.rho)
    }

    /// Minimum distance from a point to kept clear of every class mean.
    pub fn outlier_margin(&self) -> f64 {
        2.0 * self.class_scale
    }

    /// Unit vector toward the mean of the head-half class means.
    pub fn head_direction(&self) -> Vec<f64> {
        let head = self.k.div_ceil(2);
        let mut u = vec![0.0; self.d];
        for j in 0..head {
            for (t, v) in u.iter_mut().enumerate() {
                *v += self.class_means[(j, t)];
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let mut e = vec![0.0; self.d];
            e[0] = 1.0;
            return e;
        }
        u.iter().map(|x| x / norm).collect()
    }

    /// Center of the true-OOD cloud for a given displacement.
    pub fn true_ood_center(&self, shift: f64) -> Vec<f64> {
        self.head_direction().iter().map(|u| u * shift).collect()
    }

    /// Per-axis standard deviations of the true-OOD cloud, from `0.25` to `1.75` class scales.
    pub fn true_ood_axis_scales(&self) -> Vec<f64> {
        let denom = (self.d.max(2) - 1) as f64;
        (0..self.d)
            .map(|t| self.class_scale * (0.25 + 1.5 * t as f64 / denom))
            .collect()
    }
}

fn blob(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    scale: f64,
    out: &mut Vec<f64>,
) {
    for &c in center {
        let z: f64 = rng.sample(StandardNormal);
        out.push(c + scale * z);
    }
}

/// Long-tailed training split and balanced test split.
pub fn generate_long_tailed(spec: &LongTailSpec) -> Result<(SampleSet, SampleSet)> {
    spec.validate()?;
    let counts = spec.class_counts()?;
    let make = |counts: &[usize], stream: u64, provenance: Provenance| {
        let mut rng = rng_for(spec.seed, stream);
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * spec.d);
        let mut labels = Vec::with_capacity(total);
        for (j, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                blob(&mut rng, spec.class_means.row(j), spec.class_scale, &mut data);
                labels.push(j as i64);
            }
        }
        SampleSet::new(Matrix::from_vec(total, spec.d, data)?, labels, provenance)
    };
    let train = make(&counts, STREAM_TRAIN, Provenance::IdTrain)?;
    let test = make(&vec![spec.n_test_per_class; spec.k], STREAM_TEST, Provenance::IdTest)?;
    Ok((train, test))
}

fn unlabeled(data: Vec<f64>, n: usize, d: usize, provenance: Provenance) -> Result<SampleSet> {
    SampleSet::new(Matrix::from_vec(n, d, data)?, vec![-1; n], provenance)
}

/// Auxiliary outliers: `N(0, outlier_scale^2 I)` rejected within
/// [`LongTailSpec::outlier_margin`] of any class mean.
pub fn generate_outliers(spec: &LongTailSpec, n_out: usize) -> Result<SampleSet> {
    spec.validate()?;
    if n_out == 0 {
        return Err(Error::InvalidSpec("outlier count must be >= 1".into()));
    }
    let margin2 = spec.outlier_margin().powi(2);
    let mut rng = rng_for(spec.seed, STREAM_OUTLIER);
    let zero = vec![0.0; spec.d];
    let mut data = Vec::with_capacity(n_out * spec.d);
    let mut candidate = Vec::with_capacity(spec.d);
    let max_attempts = 1000 * n_out;
    let mut attempts = 0;
    let mut kept = 0;
    while kept < n_out {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidSpec(
                "outlier background leaves no room outside the class margins".into(),
            ));
        }
        candidate.clear();
        blob(&mut rng, &zero, spec.outlier_scale, &mut candidate);
        let clear = spec.class_means.iter_rows().all(|m| {
            m.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= margin2
        });
        if clear {
            data.extend_from_slice(&candidate);
            kept += 1;
        }
    }
    unlabeled(data, n_out, spec.d, Provenance::Outlier)
}

/// True OOD: anisotropic Gaussian centered at `shift` along [`LongTailSpec::head_direction`].
pub fn generate_true_ood(spec: &LongTailSpec, n_ood: usize, shift: f64) -> Result<SampleSet> {
    spec.validate()?;
    if n_ood == 0 {
        return Err(Error::InvalidSpec("true-OOD count must be >= 1".into()));
    }
    if !(shift.is_finite() && shift > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "true-OOD shift must be > 0, got {shift}"
        )));
    }
    let center = spec.true_ood_center(shift);
    let scales = spec.true_ood_axis_scales();
    let mut rng = rng_for(spec.seed, STREAM_TRUE_OOD);
    let mut data = Vec::with_capacity(n_ood * spec.d);
    for _ in 0..n_ood {
        for (c, s) in center.iter().zip(&scales) {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + s * z);
        }
    }
    unlabeled(data, n_ood, spec.d, Provenance::TrueOod)
}

/// One row of a logit file.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub sample_id: u64,
    /// Class index, or `-1` for OOD / unknown.
    pub label: i64,
    pub logits: Vec<f64>,
}

/// Writes `key=<width>` then one `id,label,v...` row per record.
fn write_table<'a, I>(path: &Path, key: &str, width: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (u64, i64, &'a [f64])>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{key}={width}").map_err(io)?;
    for (id, label, values) in rows {
        if values.len() != width {
            return Err(Error::Format(format!(
                "row {id} has {} values, the file width is {width}",
                values.len()
            )));
        }
        write!(w, "{id},{label}").map_err(io)?;
        for v in values {
            if !v.is_finite() {
                return Err(Error::Format(format!("row {id} has non-finite value {v}")));
            }
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One-pass reader for `key=<width>` record files.
pub struct TableReader<R> {
    inner: R,
    path: PathBuf,
    width: usize,
    line_no: usize,
    buf: String,
}

impl TableReader<BufReader<File>> {
    pub fn open(path: &Path, key: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file), path, key)
    }
}

impl<R: BufRead> TableReader<R> {
    pub fn new(mut inner: R, path: &Path, key: &str) -> Result<Self> {
        let mut buf = String::new();
        inner.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        };
        let header = buf.trim_end_matches(['\n', '\r']);
        let width = header
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| parse_err(format!("expected header `{key}=<int>`, found `{header}`")))?
            .parse::<usize>()
            .map_err(|e| parse_err(format!("bad width in header `{header}`: {e}")))?;
        if width == 0 {
            return Err(parse_err("width must be positive".into()));
        }
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            width,
            line_no: 1,
            buf,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            message,
        }
    }

    fn parse_row(&self, line: &str) -> Result<LogitRecord> {
        let mut fields = line.split(',');
        let id = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse::<u64>()
            .map_err(|e| self.err(format!("bad sample id: {e}")))?;
        let label = fields
            .next()
            .ok_or_else(|| self.err("missing label".into()))?
            .trim()
            .parse::<i64>()
            .map_err(|e| self.err(format!("bad label: {e}")))?;
        let values = fields
            .map(|f| {
                let v = f
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| self.err(format!("bad number `{f}`: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.err(format!("non-finite value `{f}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != self.width {
            return Err(self.err(format!(
                "row {id} has {} values, header declares {}",
                values.len(),
                self.width
            )));
        }
        Ok(LogitRecord {
            sample_id: id,
            label,
            logits: values,
        })
    }
}

impl<R: BufRead> Iterator for TableReader<R> {
    type Item = Result<LogitRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
            self.line_no += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let line = line.to_string();
            return Some(self.parse_row(&line));
        }
    }
}

pub fn write_logits(path: &Path, records: &[LogitRecord]) -> Result<()> {
    let k = records.first().map_or(0, |r| r.logits.len());
    if let Some(r) = records.iter().find(|r| r.logits.len() != k) {
        return Err(Error::Format(format!(
            "record {} has {} logits, the first record has {k}",
            r.sample_id,
            r.logits.len()
        )));
    }
    if !records.is_empty() && k < 2 {
        return Err(Error::Format("logit records need at least 2 classes".into()));
    }
    // an empty file still needs a well-formed header; width 2 is the smallest valid k
    let k = if records.is_empty() { 2 } else { k };
    write_table(
        path,
        "k",
        k,
        records
            .iter()
            .map(|r| (r.sample_id, r.label, r.logits.as_slice())),
    )
}

/// Streams the records of a logit file.
pub fn logit_reader(path: &Path) -> Result<TableReader<BufReader<File>>> {
    TableReader::open(path, "k")
}

pub fn read_logits(path: &Path) -> Result<Vec<LogitRecord>> {
    logit_reader(path)?.collect()
}

pub fn write_samples(path: &Path, set: &SampleSet) -> Result<()> {
    write_table(
        path,
        "d",
        set.features.cols(),
        set.features
            .iter_rows()
            .zip(&set.labels)
            .enumerate()
            .map(|(i, (row, &y))| (i as u64, y, row)),
    )
}

pub fn read_samples(path: &Path, provenance: Provenance) -> Result<SampleSet> {
    let reader = TableReader::open(path, "d")?;
    let d = reader.width();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in reader {
        let rec = rec?;
        data.extend_from_slice(&rec.logits);
        labels.push(rec.label);
    }
    let n = labels.len();
    SampleSet::new(Matrix::from_vec(n, d, data)?, labels, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_endpoints() {
        let c = class_counts(10, 1000, 100.0).unwrap();
        assert_eq!(c[0], 1000);
        assert_eq!(c[9], 10);
        assert_eq!(class_counts(5, 37, 1.0).unwrap(), vec![37; 5]);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(class_counts(10, 100, 0.5), Err(Error::InvalidSpec(_))));
        assert!(matches!(class_counts(1, 100, 2.0), Err(Error::InvalidSpec(_))));
        // n_max / rho rounds to zero
        assert!(matches!(class_counts(3, 10, 100.0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn generated_split_shapes() {
        let spec = LongTailSpec::new(10, 200, 10.0, 8, 3);
        let (train, test) = generate_long_tailed(&spec).unwrap();
        assert_eq!(train.class_counts(10), spec.class_counts().unwrap());
        assert_eq!(test.class_counts(10), vec![100; 10]);
        assert_eq!(train.features.cols(), 8);
        assert_eq!(test.provenance, Provenance::IdTest);
    }

    #[test]
    fn zero_counts_rejected() {
        let spec = LongTailSpec::new(4, 10, 2.0, 3, 0);
        assert!(generate_outliers(&spec, 0).is_err());
        assert!(generate_true_ood(&spec, 0, 1.0).is_err());
        assert!(matches!(generate_true_ood(&spec, 5, 0.0), Err(Error::InvalidSpec(_))));
        assert!(generate_true_ood(&spec, 5, -1.0).is_err());
    }

    #[test]
    fn outliers_respect_margin() {
        let spec = LongTailSpec::new(6, 50, 5.0, 4, 9);
        let out = generate_outliers(&spec, 300).unwrap();
        let m2 = spec.outlier_margin().powi(2);
        for x in out.features.iter_rows() {
            for mean in spec.class_means.iter_rows() {
                let d2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d2 >= m2);
            }
        }
        assert!(out.labels.iter().all(|&y| y == -1));
    }

    #[test]
    fn label_invariants_enforced() {
        assert!(SampleSet::new(Matrix::zeros(1, 2), vec![0], Provenance::Outlier).is_err());
        assert!(SampleSet::new(Matrix::zeros(1, 2), vec![-1], Provenance::IdTrain).is_err());
        assert!(SampleSet::new(Matrix::zeros(2, 2), vec![0], Provenance::IdTrain).is_err());
    }

    #[test]
    fn header_mismatch_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "k=3\n0,1,0.1,0.2,0.3\n1,-1,0.1,0.2,0.3,0.4\n").unwrap();
        let err = read_logits(&path).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("row 1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        for (body, line) in [
            ("d=3\n", 1),
            ("k=x\n", 1),
            ("k=2\n0,0,1.0,abc\n", 2),
            ("k=2\n0,0,1.0,NaN\n", 2),
            ("k=2\n0\n", 2),
        ] {
            std::fs::write(&path, body).unwrap();
            match read_logits(&path) {
                Err(Error::Parse { line: got, .. }) => assert_eq!(got, line, "{body:?}"),
                other => panic!("{body:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_body_and_inconsistent_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "k=4\n").unwrap();
        assert!(read_logits(&path).unwrap().is_empty());

        let recs = vec![
            LogitRecord { sample_id: 0, label: 0, logits: vec![0.0, 1.0] },
            LogitRecord { sample_id: 1, label: 0, logits: vec![0.0, 1.0, 2.0] },
        ];
        assert!(matches!(write_logits(&path, &recs), Err(Error::Format(_))));
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let spec = LongTailSpec::new(4, 30, 3.0, 3, 1);
        let (train, _) = generate_long_tailed(&spec).unwrap();
        write_samples(&path, &train).unwrap();
        assert_eq!(read_samples(&path, Provenance::IdTrain).unwrap(), train);
        assert!(read_logits(&path).is_err());
    }
}
