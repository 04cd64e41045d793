//! End-to-end experiments on the synthetic long-tailed benchmark: data
//! generation, two-stage training, and one-pass adaptation/evaluation under
//! several adaptation modes. The CLI is a thin layer over this module.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, LogitRecord, LongTailSpec, Provenance, SampleSet};
use crate::doda::{
    fit_energy_stats, init_outlier_distribution, run_stream, AdaptMode, EnergyStats,
    OutlierDistribution, StreamOptions, StreamOutcome, StreamSample, DEFAULT_ALPHA,
    DEFAULT_VIRTUAL_COUNT,
};
use crate::energy::{global_energy, LogitVector};
use crate::metrics::{MetricReport, ScoredSample};
use crate::nn::{train, Mlp, TrainConfig, TrainOutcome};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub k: usize,
    pub n_max: usize,
    pub rho: f64,
    pub d: usize,
    pub class_scale: f64,
    pub mean_radius: f64,
    pub outlier_scale: f64,
    pub n_test_per_class: usize,
    pub n_outliers: usize,
    pub n_true_ood: usize,
    pub shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_max: 1000,
            rho: 100.0,
            d: 8,
            class_scale: 1.0,
            mean_radius: data::DEFAULT_MEAN_RADIUS,
            outlier_scale: 4.0,
            n_test_per_class: 100,
            n_outliers: 5000,
            n_true_ood: 1000,
            shift: 6.0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> LongTailSpec {
        let mut spec = LongTailSpec::new(self.k, self.n_max, self.rho, self.d, seed);
        spec.class_means = data::default_class_means(self.k, self.d, self.mean_radius, seed);
        spec.class_scale = self.class_scale;
        spec.n_test_per_class = self.n_test_per_class;
        spec.outlier_scale = self.outlier_scale;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DodaConfig {
    pub alpha: f64,
    pub virtual_count: u64,
    /// Fractions of acceptance decisions taken from ground truth in the sweep.
    pub label_fractions: Vec<f64>,
    /// Start from an all-zero distribution instead of the outlier mean.
    pub zero_init: bool,
}

impl Default for DodaConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            virtual_count: DEFAULT_VIRTUAL_COUNT,
            label_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            zero_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// Fraction of the test stream drawn from true OOD.
    pub ood_fraction: f64,
    pub record_events: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            ood_fraction: 0.5,
            record_events: false,
        }
    }
}

/// Everything a run needs; reproducible from this value alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub doda: DodaConfig,
    pub stream: StreamConfig,
    pub alpha_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            hidden: vec![32],
            train: TrainConfig::default(),
            doda: DodaConfig::default(),
            stream: StreamConfig::default(),
            alpha_grid: vec![2.0, 2.5, 3.0, 3.5, 4.0],
        }
    }
}

impl RunConfig {
    pub fn layer_dims(&self, d: usize, k: usize) -> Vec<usize> {
        let mut dims = vec![d];
        dims.extend(&self.hidden);
        dims.push(k);
        dims
    }

    /// Copies the run seed into the training section so serialized configs agree.
    pub fn synced(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.stream.ood_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("ood_fraction must lie in (0, 1), got {f}")));
        }
        if !(self.doda.alpha.is_finite() && self.doda.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.doda.alpha)));
        }
        if let Some(p) = self.doda.label_fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("label fraction {p} outside [0, 1]")));
        }
        self.train.validate()?;
        self.data.spec(self.seed).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }
}

/// The four sample sets of one synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: LongTailSpec,
    pub id_train: SampleSet,
    pub id_test: SampleSet,
    pub outliers: SampleSet,
    pub true_ood: SampleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: LongTailSpec,
    pub shift: f64,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub n_outliers: usize,
    pub n_true_ood: usize,
    pub files: Vec<String>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let spec = cfg.spec(seed);
        let (id_train, id_test) = data::generate_long_tailed(&spec)?;
        let outliers = data::generate_outliers(&spec, cfg.n_outliers)?;
        let true_ood = data::generate_true_ood(&spec, cfg.n_true_ood, cfg.shift)?;
        Ok(Self {
            spec,
            id_train,
            id_test,
            outliers,
            true_ood,
        })
    }

    pub fn sets(&self) -> [&SampleSet; 4] {
        [&self.id_train, &self.id_test, &self.outliers, &self.true_ood]
    }

    pub fn manifest(&self, shift: f64) -> DatasetManifest {
        DatasetManifest {
            seed: self.spec.seed,
            spec: self.spec.clone(),
            shift,
            train_class_counts: self.id_train.class_counts(self.spec.k),
            test_class_counts: self.id_test.class_counts(self.spec.k),
            n_outliers: self.outliers.len(),
            n_true_ood: self.true_ood.len(),
            files: self
                .sets()
                .iter()
                .map(|s| format!("{}.csv", s.provenance.file_stem()))
                .collect(),
        }
    }

    /// Writes the four sample files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, shift: f64) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for set in self.sets() {
            let path = dir.join(format!("{}.csv", set.provenance.file_stem()));
            data::write_samples(&path, set)?;
        }
        let manifest = self.manifest(shift);
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let read = |p: Provenance| data::read_samples(&dir.join(format!("{}.csv", p.file_stem())), p);
        let ds = Self {
            spec: manifest.spec,
            id_train: read(Provenance::IdTrain)?,
            id_test: read(Provenance::IdTest)?,
            outliers: read(Provenance::Outlier)?,
            true_ood: read(Provenance::TrueOod)?,
        };
        for set in ds.sets() {
            if set.features.cols() != ds.spec.d {
                return Err(Error::Format(format!(
                    "{} has {} features, manifest declares d = {}",
                    set.provenance.file_stem(),
                    set.features.cols(),
                    ds.spec.d
                )));
            }
        }
        Ok(ds)
    }
}

pub fn train_on(ds: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    let model = Mlp::new(&cfg.layer_dims(ds.spec.d, ds.spec.k), cfg.seed)?;
    train(model, &ds.id_train, &ds.outliers, &cfg.train_config())
}

/// Logits of every row of `set`.
pub fn logits_of(model: &Mlp, set: &SampleSet) -> Result<Vec<LogitVector>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    model
        .forward(&set.features)?
        .iter_rows()
        .map(|r| LogitVector::new(r.to_vec()))
        .collect()
}

/// One test-stream element with its ground truth, kept outside the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub logits: LogitVector,
    pub is_ood: bool,
    pub class: Option<usize>,
}

/// Interleaves ID-test and true-OOD logits by a seeded shuffle. All ID samples
/// are used; the OOD count is set so that OOD makes up `ood_fraction` of the
/// stream, capped by what is available.
pub fn build_stream(
    id_logits: &[LogitVector],
    id_classes: &[usize],
    ood_logits: &[LogitVector],
    ood_fraction: f64,
    seed: u64,
) -> Result<Vec<StreamItem>> {
    if !(ood_fraction > 0.0 && ood_fraction < 1.0) {
        return Err(Error::Config(format!(
            "ood_fraction must lie in (0, 1), got {ood_fraction}"
        )));
    }
    let n_ood = ((id_logits.len() as f64 * ood_fraction / (1.0 - ood_fraction)).round() as usize)
        .min(ood_logits.len());
    let mut items: Vec<StreamItem> = id_logits
        .iter()
        .zip(id_classes)
        .map(|(l, &c)| StreamItem {
            logits: l.clone(),
            is_ood: false,
            class: Some(c),
        })
        .chain(ood_logits[..n_ood].iter().map(|l| StreamItem {
            logits: l.clone(),
            is_ood: true,
            class: None,
        }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    items.shuffle(&mut rng);
    Ok(items)
}

pub fn report_for(items: &[StreamItem], scores: &[f64]) -> Result<MetricReport> {
    let samples: Vec<ScoredSample> = items
        .iter()
        .zip(scores)
        .map(|(it, &s)| {
            let base = ScoredSample::new(s, !it.is_ood);
            match it.class {
                Some(c) => base.with_classes(it.logits.argmax(), c),
                None => base,
            }
        })
        .collect();
    MetricReport::evaluate(&samples)
}

/// Model outputs on the four sample sets, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSets {
    pub k: usize,
    pub id_train: Vec<LogitVector>,
    pub id_train_classes: Vec<usize>,
    pub id_test: Vec<LogitVector>,
    pub id_test_classes: Vec<usize>,
    pub outliers: Vec<LogitVector>,
    pub true_ood: Vec<LogitVector>,
}

impl LogitSets {
    pub fn from_model(model: &Mlp, ds: &Dataset) -> Result<Self> {
        if model.input_dim() != ds.spec.d || model.output_dim() != ds.spec.k {
            return Err(Error::Config(format!(
                "model maps {} -> {} but the data has d = {}, k = {}",
                model.input_dim(),
                model.output_dim(),
                ds.spec.d,
                ds.spec.k
            )));
        }
        Ok(Self {
            k: ds.spec.k,
            id_train: logits_of(model, &ds.id_train)?,
            id_train_classes: ds.id_train.labels.iter().map(|&y| y as usize).collect(),
            id_test: logits_of(model, &ds.id_test)?,
            id_test_classes: ds.id_test.labels.iter().map(|&y| y as usize).collect(),
            outliers: logits_of(model, &ds.outliers)?,
            true_ood: logits_of(model, &ds.true_ood)?,
        })
    }

    fn parts(&self) -> [(Provenance, &[LogitVector]); 4] {
        [
            (Provenance::IdTrain, &self.id_train),
            (Provenance::IdTest, &self.id_test),
            (Provenance::Outlier, &self.outliers),
            (Provenance::TrueOod, &self.true_ood),
        ]
    }

    /// Writes `<stem>.logits.csv` for each set into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (prov, rows) in self.parts() {
            let records: Vec<LogitRecord> = rows
                .iter()
                .enumerate()
                .map(|(i, l)| LogitRecord {
                    sample_id: i as u64,
                    label: match prov {
                        Provenance::IdTrain => self.id_train_classes[i] as i64,
                        Provenance::IdTest => self.id_test_classes[i] as i64,
                        _ => -1,
                    },
                    logits: l.values().to_vec(),
                })
                .collect();
            let name = format!("{}.logits.csv", prov.file_stem());
            data::write_logits(&dir.join(&name), &records)?;
            names.push(name);
        }
        Ok(names)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |p: Provenance| -> Result<(usize, Vec<LogitRecord>)> {
            let path = dir.join(format!("{}.logits.csv", p.file_stem()));
            let reader = data::logit_reader(&path)?;
            let k = reader.width();
            Ok((k, reader.collect::<Result<Vec<_>>>()?))
        };
        let (k, id_train) = read(Provenance::IdTrain)?;
        let (k_test, id_test) = read(Provenance::IdTest)?;
        let (k_out, outliers) = read(Provenance::Outlier)?;
        let (k_ood, true_ood) = read(Provenance::TrueOod)?;
        if [k_test, k_out, k_ood].iter().any(|&w| w != k) {
            return Err(Error::Format(format!(
                "logit files disagree on k: {k}, {k_test}, {k_out}, {k_ood}"
            )));
        }
        let vectors = |rows: &[LogitRecord]| -> Result<Vec<LogitVector>> {
            rows.iter()
                .map(|r| LogitVector::new(r.logits.clone()).map_err(|e| Error::at_sample(r.sample_id as usize, e)))
                .collect()
        };
        let classes = |rows: &[LogitRecord]| -> Result<Vec<usize>> {
            rows.iter()
                .map(|r| {
                    usize::try_from(r.label)
                        .ok()
                        .filter(|&c| c < k)
                        .ok_or_else(|| Error::Format(format!("ID row {} has label {}", r.sample_id, r.label)))
                })
                .collect()
        };
        Ok(Self {
            k,
            id_train: vectors(&id_train)?,
            id_train_classes: classes(&id_train)?,
            id_test: vectors(&id_test)?,
            id_test_classes: classes(&id_test)?,
            outliers: vectors(&outliers)?,
            true_ood: vectors(&true_ood)?,
        })
    }

    /// Seeded mixed test stream under `cfg`.
    pub fn test_stream(&self, cfg: &RunConfig) -> Result<Vec<StreamItem>> {
        build_stream(
            &self.id_test,
            &self.id_test_classes,
            &self.true_ood,
            cfg.stream.ood_fraction,
            cfg.seed,
        )
    }
}

/// Filter statistics and initial outlier distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub stats: EnergyStats,
    pub init: OutlierDistribution,
}

impl Detector {
    pub fn fit(sets: &LogitSets, doda: &DodaConfig) -> Result<Self> {
        let stats = fit_energy_stats(&sets.id_train, doda.alpha)?;
        let init = if doda.zero_init {
            OutlierDistribution::zeros(sets.k)?
        } else {
            init_outlier_distribution(sets.k, &sets.outliers, doda.virtual_count)?
        };
        Ok(Self { stats, init })
    }

    pub fn run(&self, items: &[StreamItem], mode: AdaptMode, record_events: bool) -> Result<StreamOutcome> {
        let stream = items.iter().map(|it| StreamSample {
            logits: it.logits.clone(),
            is_true_ood: Some(it.is_ood),
        });
        run_stream(
            self.init.clone(),
            &self.stats,
            stream,
            &StreamOptions {
                mode,
                record_events,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub report: MetricReport,
    pub steps: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub use_label_probability: f64,
    pub result: ModeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEvalReport {
    pub stream_len: usize,
    pub threshold: f64,
    /// Metrics on raw global energy, without any calibration.
    pub uncalibrated: MetricReport,
    pub no_tta: ModeResult,
    pub doda: ModeResult,
    pub oracle: ModeResult,
    pub sweep: Vec<SweepPoint>,
}

fn mode_result(items: &[StreamItem], out: &StreamOutcome) -> Result<ModeResult> {
    Ok(ModeResult {
        report: report_for(items, &out.scores)?,
        steps: out.steps,
        accepted: out.accepted,
    })
}

pub fn label_assisted(p: f64, seed: u64) -> AdaptMode {
    AdaptMode::LabelAssisted {
        use_label_probability: p,
        seed,
    }
}

/// Artifacts of one DODA run kept for plotting.
pub struct AdaptEvalRun {
    pub report: AdaptEvalReport,
    pub doda_outcome: StreamOutcome,
    pub items: Vec<StreamItem>,
}

/// Runs the test stream once per mode: frozen, filter, oracle and each sweep fraction.
pub fn adapt_eval(detector: &Detector, items: Vec<StreamItem>, cfg: &RunConfig) -> Result<AdaptEvalRun> {
    let raw = items
        .iter()
        .map(|it| global_energy(&it.logits))
        .collect::<Result<Vec<_>>>()?;
    let uncalibrated = report_for(&items, &raw)?;
    let frozen = detector.run(&items, AdaptMode::Frozen, false)?;
    let doda = detector.run(&items, AdaptMode::Filter, cfg.stream.record_events)?;
    let oracle = detector.run(&items, label_assisted(1.0, cfg.seed), false)?;
    let sweep = cfg
        .doda
        .label_fractions
        .iter()
        .map(|&p| {
            let out = detector.run(&items, label_assisted(p, cfg.seed), false)?;
            Ok(SweepPoint {
                use_label_probability: p,
                result: mode_result(&items, &out)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AdaptEvalReport {
        stream_len: items.len(),
        threshold: detector.stats.threshold(),
        uncalibrated,
        no_tta: mode_result(&items, &frozen)?,
        doda: mode_result(&items, &doda)?,
        oracle: mode_result(&items, &oracle)?,
        sweep,
    };
    Ok(AdaptEvalRun {
        report,
        doda_outcome: doda,
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTailReport {
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
    pub head: ModeResult,
    pub tail: ModeResult,
}

impl HeadTailReport {
    pub fn auroc_gap(&self) -> f64 {
        (self.head.report.auroc - self.tail.report.auroc).abs()
    }
}

/// DODA on two restricted streams: head-class ID samples with all OOD, then
/// tail-class ID samples with all OOD. The first `ceil(k/2)` classes are the head.
pub fn head_tail(detector: &Detector, items: &[StreamItem], k: usize) -> Result<HeadTailReport> {
    let n_head = k.div_ceil(2);
    let head_classes: Vec<usize> = (0..n_head).collect();
    let tail_classes: Vec<usize> = (n_head..k).collect();
    let run_subset = |keep: &dyn Fn(usize) -> bool| -> Result<ModeResult> {
        let subset: Vec<StreamItem> = items
            .iter()
            .filter(|it| it.is_ood || it.class.is_some_and(keep))
            .cloned()
            .collect();
        let out = detector.run(&subset, AdaptMode::Filter, false)?;
        mode_result(&subset, &out)
    };
    Ok(HeadTailReport {
        head: run_subset(&|c| c < n_head)?,
        tail: run_subset(&|c| c >= n_head)?,
        head_classes,
        tail_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub auroc: f64,
}

/// DODA AUROC for each alpha, everything else fixed.
pub fn alpha_sweep(detector: &Detector, items: &[StreamItem], grid: &[f64]) -> Result<Vec<AlphaPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    grid.iter()
        .map(|&alpha| {
            let det = Detector {
                stats: detector.stats.with_alpha(alpha).map_err(|e| Error::Config(e.to_string()))?,
                init: detector.init.clone(),
            };
            let out = det.run(items, AdaptMode::Filter, false)?;
            Ok(AlphaPoint {
                alpha,
                auroc: report_for(items, &out.scores)?.auroc,
            })
        })
        .collect()
}

/// Counts of `ln(value)` in `bins` equal-width bins over the pooled range of all populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub populations: Vec<(String, Vec<usize>)>,
}

pub fn log_histogram(populations: &[(&str, &[f64])], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let logs: Vec<Vec<f64>> = populations
        .iter()
        .map(|(_, v)| v.iter().map(|x| x.ln()).collect())
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in logs.iter().flatten() {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("histogram value ln = {v}")));
        }
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return Err(Error::InvalidInput("histogram over no values".into()));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    let populations = populations
        .iter()
        .zip(&logs)
        .map(|((name, _), vals)| {
            let mut counts = vec![0; bins];
            for v in vals {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            (name.to_string(), counts)
        })
        .collect();
    Ok(Histogram { edges, populations })
}
