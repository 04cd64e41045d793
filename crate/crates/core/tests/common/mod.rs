//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use adaptod::data::{Provenance, SampleSet};
use adaptod::dne::{total_loss, total_loss_and_grad, DneConfig};
use adaptod::energy::LogitBatch;
use adaptod::linalg::Matrix;
use adaptod::metrics::ScoredSample;
use adaptod::nn::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_REL_TOL: f64 = 1e-4;
/// Gradient entries are compared relative to `max(|analytic|, |numeric|, floor)`, where the floor
/// is the larger of `FD_FLOOR` and the smallest entry a central difference resolves to
/// `FD_REL_TOL`: rounding in the two loss evaluations alone contributes `eps * |L| / h`.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, k: usize, b_in: usize, b_out: usize) -> LogitBatch {
    LogitBatch::new(normal_matrix(rng, b_in, k, 1.0), normal_matrix(rng, b_out, k, 1.0)).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Straight `exp(f_ij) / sum_l exp(f_lj)` over the stacked rows, no shifting.
pub fn naive_normalize(batch: &LogitBatch) -> Vec<Vec<f64>> {
    let rows: Vec<&[f64]> = batch
        .id_rows()
        .iter_rows()
        .chain(batch.out_rows().iter_rows())
        .collect();
    let k = batch.k();
    let mut col_sum = vec![0.0; k];
    for r in &rows {
        for j in 0..k {
            col_sum[j] += r[j].exp();
        }
    }
    rows.iter()
        .map(|r| (0..k).map(|j| r[j].exp() / col_sum[j]).collect())
        .collect()
}

pub fn naive_dne(batch: &LogitBatch, cfg: &DneConfig) -> (f64, f64) {
    let f = naive_normalize(batch);
    let (b_in, k) = (batch.b_in(), batch.k());
    let b_out = f.len() - b_in;
    let mut class = 0.0;
    for j in 0..k {
        let mut c_in = 0.0;
        let mut c_out = 0.0;
        for (i, row) in f.iter().enumerate() {
            if i < b_in {
                c_in += row[j];
            } else {
                c_out += row[j];
            }
        }
        class += (cfg.m_in_c - c_in).max(0.0).powi(2);
        class += (c_out - cfg.m_out_c).max(0.0).powi(2);
    }
    let mut id_term = 0.0;
    let mut out_term = 0.0;
    for (i, row) in f.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if i < b_in {
            id_term += (cfg.m_in_s() - s).max(0.0).powi(2);
        } else {
            out_term += (s - cfg.m_out_s).max(0.0).powi(2);
        }
    }
    (class, id_term / b_in as f64 + out_term / b_out as f64)
}

/// `exp(f_j)` summed term by term.
pub fn naive_energy(logits: &[f64], p: Option<&[f64]>) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(j, f)| f.exp() / (1.0 + p.map_or(0.0, |p| p[j])))
        .sum()
}

/// One central-difference estimate and the floor its relative error is taken against.
#[derive(Debug, Clone, Copy)]
pub struct FdEntry {
    pub value: f64,
    pub floor: f64,
}

pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

pub fn central_difference(up: f64, down: f64, h: f64) -> FdEntry {
    let resolution = f64::EPSILON * up.abs().max(down.abs()) / h;
    FdEntry {
        value: (up - down) / (2.0 * h),
        floor: FD_FLOOR.max(resolution / FD_REL_TOL),
    }
}

pub fn rel_err(a: f64, n: FdEntry) -> f64 {
    (a - n.value).abs() / a.abs().max(n.value.abs()).max(n.floor)
}

/// Largest entry-wise relative error between an analytic gradient and its estimates.
pub fn max_rel_err(analytic: &[f64], numeric: &[FdEntry]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Central finite differences of `loss` with respect to the logits of `batch`, ID rows first.
pub fn fd_logit_grad(batch: &LogitBatch, loss: impl Fn(&LogitBatch) -> f64) -> Vec<FdEntry> {
    let b_in = batch.b_in();
    let stacked = batch.stacked();
    let mut out = Vec::with_capacity(stacked.as_slice().len());
    for idx in 0..stacked.as_slice().len() {
        let x = stacked.as_slice()[idx];
        let h = fd_step(x);
        let eval = |v: f64| {
            let mut m = stacked.clone();
            m.as_mut_slice()[idx] = v;
            let all: Vec<usize> = (0..m.rows()).collect();
            let b = LogitBatch::new(m.select_rows(&all[..b_in]), m.select_rows(&all[b_in..])).unwrap();
            loss(&b)
        };
        out.push(central_difference(eval(x + h), eval(x - h), h));
    }
    out
}

/// Loss of the MLP on stacked ID + outlier inputs through `total_loss`.
pub fn model_loss(model: &Mlp, x_in: &Matrix, x_out: &Matrix, labels: &[usize], cfg: &DneConfig) -> f64 {
    let b = LogitBatch::new(model.forward(x_in).unwrap(), model.forward(x_out).unwrap()).unwrap();
    total_loss(&b, labels, cfg).unwrap().total
}

/// Per-neuron loop forward pass, independent of the crate's batched kernel.
pub fn naive_forward(model: &Mlp, x: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.out_dim());
        for o in 0..layer.out_dim() {
            let mut acc = layer.bias[o];
            for t in 0..layer.in_dim() {
                acc += layer.weights[(o, t)] * a[t];
            }
            z.push(if l + 1 == layers.len() { acc } else { acc.max(0.0) });
        }
        a = z;
    }
    a
}

pub fn brute_auroc(s: &[ScoredSample]) -> f64 {
    let id: Vec<f64> = s.iter().filter(|x| x.is_id).map(|x| x.score).collect();
    let ood: Vec<f64> = s.iter().filter(|x| !x.is_id).map(|x| x.score).collect();
    let mut doubled = 0u128;
    for a in &id {
        for b in &ood {
            if a > b {
                doubled += 2;
            } else if a == b {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64
}

/// Precision at each positive's own score, positives visited from the highest score down.
pub fn brute_ap(s: &[ScoredSample], id_positive: bool) -> f64 {
    let key = |x: &ScoredSample| if id_positive { x.score } else { -x.score };
    let pos = |x: &ScoredSample| x.is_id == id_positive;
    let mut precisions: Vec<(f64, f64)> = Vec::new();
    for p in s.iter().filter(|x| pos(x)) {
        let t = key(p);
        let above = s.iter().filter(|x| key(x) >= t).count();
        let tp = s.iter().filter(|x| pos(x) && key(x) >= t).count();
        precisions.push((t, tp as f64 / above as f64));
    }
    precisions.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = precisions.len() as f64;
    let mut sum = 0.0;
    for (_, p) in precisions {
        sum += p;
    }
    sum / n
}

/// Scan every ID score as a threshold and keep the highest one reaching the target TPR.
pub fn brute_fpr(s: &[ScoredSample], tpr: f64) -> f64 {
    let n_id = s.iter().filter(|x| x.is_id).count();
    let n_ood = s.len() - n_id;
    let mut best = f64::NEG_INFINITY;
    for t in s.iter().filter(|x| x.is_id).map(|x| x.score) {
        let hit = s.iter().filter(|x| x.is_id && x.score >= t).count();
        if hit as f64 / n_id as f64 >= tpr && t > best {
            best = t;
        }
    }
    s.iter().filter(|x| !x.is_id && x.score >= best).count() as f64 / n_ood as f64
}

/// Random scored samples with both classes present; `ties` draws scores from a handful of values.
pub fn random_scored(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<ScoredSample> {
    let n = n.max(2);
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|_| {
            let score = if ties {
                rng.random_range(0..4) as f64 * 0.5
            } else {
                rng.random::<f64>()
            };
            ScoredSample::new(score, rng.random_bool(0.5))
        })
        .collect();
    out[0].is_id = true;
    out[1].is_id = false;
    out
}

/// Two isotropic blobs at `±sep` along the first axis.
pub fn blobs(seed: u64, n_per: usize, d: usize, sep: f64) -> SampleSet {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(2 * n_per * d);
    let mut labels = Vec::with_capacity(2 * n_per);
    for c in 0..2 {
        for _ in 0..n_per {
            for t in 0..d {
                let center = if t == 0 { if c == 0 { -sep } else { sep } } else { 0.0 };
                data.push(center + r.sample::<f64, _>(StandardNormal));
            }
            labels.push(c as i64);
        }
    }
    SampleSet::new(Matrix::from_vec(2 * n_per, d, data).unwrap(), labels, Provenance::IdTrain).unwrap()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// End-to-end gradient of `L_total` through the MLP against central differences on every
/// parameter. Coordinates whose perturbation flips a hidden unit's sign are skipped.
pub fn check_model_gradient(seed: u64, dims: &[usize], b_in: usize, b_out: usize) -> GradCheck {
    let mut r = rng(seed);
    let (d, k) = (dims[0], *dims.last().unwrap());
    let mut model = Mlp::new(dims, seed).unwrap();
    let x_in = normal_matrix(&mut r, b_in, d, 1.0);
    let x_out = normal_matrix(&mut r, b_out, d, 1.0);
    let labels = random_labels(&mut r, b_in, k);
    let cfg = DneConfig::new(k, b_in, b_out).unwrap();

    let x = x_in.vstack(&x_out).unwrap();
    let trace = model.forward_trace(&x).unwrap();
    let logits = trace.logits();
    let all: Vec<usize> = (0..logits.rows()).collect();
    let batch = LogitBatch::new(logits.select_rows(&all[..b_in]), logits.select_rows(&all[b_in..])).unwrap();
    let (_, upstream) = total_loss_and_grad(&batch, &labels, &cfg).unwrap();
    let analytic = model.backward_trace(&trace, &upstream, 0).unwrap().flat();
    let pattern = trace.relu_pattern();

    let theta = model.flat_params();
    let mut out = GradCheck { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for p in 0..theta.len() {
        let h = fd_step(theta[p]);
        let mut eval = |v: f64| {
            let mut t = theta.clone();
            t[p] = v;
            model.set_flat_params(&t).unwrap();
            let same = model.forward_trace(&x).unwrap().relu_pattern() == pattern;
            (model_loss(&model, &x_in, &x_out, &labels, &cfg), same)
        };
        let (up, same_up) = eval(theta[p] + h);
        let (down, same_down) = eval(theta[p] - h);
        if !(same_up && same_down) {
            out.skipped += 1;
            continue;
        }
        let numeric = central_difference(up, down, h);
        out.max_rel_err = out.max_rel_err.max(rel_err(analytic[p], numeric));
        out.checked += 1;
    }
    model.set_flat_params(&theta).unwrap();
    out
}

/// Random logit stream with a filter threshold near the median global energy.
pub struct DodaCase {
    pub stream: Vec<Vec<f64>>,
    pub init: Vec<f64>,
    pub virtual_count: u64,
    pub mu_in: f64,
    pub sigma_in: f64,
    pub alpha: f64,
}

pub fn doda_case(seed: u64) -> DodaCase {
    let mut r = rng(seed);
    let k = r.random_range(2..12);
    let n = r.random_range(1..300);
    let stream: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut energies: Vec<f64> = stream.iter().map(|x| naive_energy(x, None)).collect();
    energies.sort_by(f64::total_cmp);
    let median = energies[energies.len() / 2];
    let sigma_in = r.random_range(0.1..2.0);
    let alpha = r.random_range(1.0..4.0);
    DodaCase {
        init: (0..k).map(|_| r.random_range(0.0..3.0)).collect(),
        virtual_count: r.random_range(0..4),
        mu_in: median + alpha * sigma_in,
        sigma_in,
        alpha,
        stream,
    }
}

/// Bit patterns, for comparisons that must be exact.
pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
