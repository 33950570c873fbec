#![allow(dead_code)]

use std::path::Path;

use aahr::autodiff::{Mat, Tape, Var};
use aahr::params::gaussian;
use aahr::tensorio::{generate_synthetic, DatasetManifest, SynthSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let mut m = gaussian(rng, rows, cols, 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| x / n);
    }
    m
}

/// Unit rows rounded to the `f32` grid.
pub fn unit_rows_f32(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    unit_rows(rng, rows, cols).mapv(|x| f64::from(x as f32))
}

/// Values on a coarse grid so ties are common.
pub fn quantized(rng: &mut impl Rng, rows: usize, cols: usize, levels: u32) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
}

// Finite differences ---------------------------------------------------------

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose gradient is
/// zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest entrywise `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// over all inputs, with central differences of step [`FD_STEP`].
pub fn gradcheck<F>(inputs: &[Mat], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&tape, &leaves);
    assert_eq!(out.shape(), (1, 1), "gradcheck needs a scalar output");
    let grads = tape.gradients(out);
    let analytic: Vec<Mat> = leaves.iter().map(|v| grads.get_or_zero(*v)).collect();

    let eval = |xs: &[Mat]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.leaf(m.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        for idx in 0..xs[i].len() {
            let (r, c) = (idx / xs[i].ncols(), idx % xs[i].ncols());
            let x0 = xs[i][(r, c)];
            xs[i][(r, c)] = x0 + FD_STEP;
            let plus = eval(&xs);
            xs[i][(r, c)] = x0 - FD_STEP;
            let minus = eval(&xs);
            xs[i][(r, c)] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = a[(r, c)];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Sum of `c ⊙ x` for a fixed random `c`, turning any output into a scalar.
pub fn probe<'t>(x: &Var<'t>, c: &Mat) -> Var<'t> {
    x.mul_const(c.clone()).sum()
}

// Brute-force oracles --------------------------------------------------------

/// Hardest-negative hinge loss by scanning every negative.
pub fn triplet_oracle(sims: &Mat, gamma: f64) -> f64 {
    let m = sims.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let mut worst_text = 0.0f64;
        let mut worst_image = 0.0f64;
        for j in 0..m {
            if j == i {
                continue;
            }
            worst_text = worst_text.max(gamma - sims[(i, i)] + sims[(i, j)]);
            worst_image = worst_image.max(gamma - sims[(i, i)] + sims[(j, i)]);
        }
        total += worst_text + worst_image;
    }
    total
}

pub fn median_oracle(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Kept mask of the block-median filter, block by block.
pub fn filter_kept_oracle(s: &Mat) -> Array2<bool> {
    let m = s.nrows() / 2;
    let mut kept = Array2::from_elem(s.dim(), false);
    for (bi, bj) in [(0, 0), (0, m), (m, 0), (m, m)] {
        let mut values = Vec::new();
        for i in 0..m {
            for j in 0..m {
                values.push(s[(bi + i, bj + j)]);
            }
        }
        let med = median_oracle(&values);
        for i in 0..m {
            for j in 0..m {
                kept[(bi + i, bj + j)] = s[(bi + i, bj + j)] >= med;
            }
        }
    }
    kept
}

/// `⌈n/2⌉` plus the entries below the upper half that tie with the median.
pub fn kept_count_oracle(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let half = n.div_ceil(2);
    let med = median_oracle(values);
    half + v[..n - half].iter().filter(|&&x| x >= med).count()
}

/// Gallery order of every query by a full sort (score descending, index ascending).
pub fn full_sort_order(sims: &Array2<f32>) -> Vec<Vec<usize>> {
    sims.rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

pub struct OracleMetrics {
    pub hits: Vec<Vec<bool>>,
    pub r_precision: Vec<f64>,
    pub average_precision: Vec<f64>,
}

/// Per-query metrics from walking each fully sorted gallery list.
pub fn metrics_oracle(sims: &Array2<f32>, positives: &[Vec<usize>], ks: &[usize]) -> OracleMetrics {
    let orders = full_sort_order(sims);
    let mut hits = Vec::new();
    let mut r_precision = Vec::new();
    let mut average_precision = Vec::new();
    for (order, pos) in orders.iter().zip(positives) {
        let is_pos = |g: usize| pos.contains(&g);
        hits.push(ks.iter().map(|&k| order[..k].iter().any(|&g| is_pos(g))).collect());
        let r = pos.len();
        r_precision.push(order[..r].iter().filter(|&&g| is_pos(g)).count() as f64 / r as f64);
        let mut found = 0usize;
        let mut sum = 0.0;
        for (rank, &g) in order.iter().enumerate() {
            if is_pos(g) {
                found += 1;
                sum += found as f64 / (rank + 1) as f64;
                if found == r {
                    break;
                }
            }
        }
        average_precision.push(sum / r as f64);
    }
    OracleMetrics {
        hits,
        r_precision,
        average_precision,
    }
}

/// Order-independent percentage mean: values summed in ascending order.
pub fn mean_percent(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sum = 0.0;
    for x in &v {
        sum += x;
    }
    100.0 * (sum / v.len() as f64)
}

/// Ring-buffer oracle: a plain list of rows where the oldest rows fall off,
/// plus the total number of rows ever pushed.
pub struct FifoOracle {
    pub capacity: usize,
    pub rows: Vec<Vec<f64>>,
    pub pushed: usize,
}

impl FifoOracle {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: Vec::new(),
            pushed: 0,
        }
    }

    pub fn push(&mut self, batch: &Mat) {
        for r in batch.rows() {
            self.rows.push(r.to_vec());
            self.pushed += 1;
        }
        let excess = self.rows.len().saturating_sub(self.capacity);
        self.rows.drain(..excess);
    }
}

// Synthetic data -------------------------------------------------------------

pub fn synthetic_dataset(dir: &Path, seed: u64) -> DatasetManifest {
    generate_synthetic(&SynthSpec { seed, ..SynthSpec::default() }, dir).expect("synthetic data")
}

pub fn small_synthetic(dir: &Path, seed: u64) -> DatasetManifest {
    let spec = SynthSpec {
        num_concepts: 3,
        pairs_per_concept: 6,
        heldout_per_concept: 2,
        d_v: 12,
        d_w: 10,
        d_g: 8,
        n_r: 4,
        n_t: 3,
        seed,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec, dir).expect("synthetic data")
}
