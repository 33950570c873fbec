//! Batch-level instance neighborhood graph: association matrix, intra- and
//! joint-modal GCN, median-filtered GAT, and the interaction objective.
//!
//! The assembled graph is laid out as `[[S_ii, S_it], [S_ti, S_tt]]`, where
//! `S_it[i][j]` scores image `i` against text `j` and `S_ti[i][j]` scores
//! text `i` against image `j`. Graph matrices are computed from current
//! values and enter the differentiable path as constants.

use ndarray::{s, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, concat_rows, sum_all, Mat, Tape, Var};
use crate::encoder::NORM_FLOOR;
use crate::error::{Error, Result};
use crate::params::{gaussian, param_tree};
use crate::prototype::{
    alignment_targets, normalize_rows_in_place, pga_with_targets, AlignmentTargets, PrototypeBank, SinkhornConfig,
};

pub const MASK_VALUE: f64 = -1e9;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEGREE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationGraph {
    pub s_ii: Mat,
    pub s_tt: Mat,
    pub s_it: Mat,
    pub s_ti: Mat,
    /// `2m × 2m` block matrix.
    pub s: Mat,
    pub epsilon: f64,
}

impl AssociationGraph {
    pub fn batch_size(&self) -> usize {
        self.s_ii.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredGraph {
    pub s_tilde: Mat,
    pub alpha: f64,
    pub mask_value: f64,
}

impl FilteredGraph {
    pub fn kept(&self) -> ndarray::Array2<bool> {
        self.s_tilde.mapv(|v| v != self.mask_value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams<T> {
    pub intra_image: T,
    pub intra_text: T,
    pub joint: T,
    pub query: T,
    pub key: T,
    pub value: T,
}

param_tree!(GraphParams { intra_image: leaf, intra_text: leaf, joint: leaf, query: leaf, key: leaf, value: leaf });

impl GraphParams<Mat> {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let small = 0.5 / (d as f64).sqrt();
        let unit = 1.0 / (d as f64).sqrt();
        Self {
            intra_image: gaussian(rng, d, d, small),
            intra_text: gaussian(rng, d, d, small),
            joint: gaussian(rng, d, d, small),
            query: gaussian(rng, d, d, unit),
            key: gaussian(rng, d, d, unit),
            value: gaussian(rng, d, d, small),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> GraphParams<Var<'t>> {
        self.map("", &mut |_, m| tape.leaf(m.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub heads: usize,
    pub dropout_gcn: f64,
    pub dropout_gat: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            alpha: 1.5,
            heads: 1,
            dropout_gcn: 0.6,
            dropout_gat: 0.1,
        }
    }
}

// ---------------------------------------------------------------------------
// Graph construction

pub fn intra_modal_similarity(e: &Mat, epsilon: f64) -> Mat {
    let m = e.nrows();
    Mat::from_shape_fn((m, m), |(i, j)| {
        let dist: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        (-dist / epsilon).exp()
    })
}

/// `(s_it, s_ti)`: mean over regions of the best word match, and mean over
/// words of the best region match.
pub fn cross_modal_similarity(regions: &Mat, words: &Mat) -> Result<(f64, f64)> {
    if regions.nrows() == 0 || words.nrows() == 0 {
        return Err(Error::Precondition("cross-modal similarity needs nonempty region and word sets".into()));
    }
    if regions.ncols() != words.ncols() {
        return Err(Error::Shape(format!(
            "regions width {} vs words width {}",
            regions.ncols(),
            words.ncols()
        )));
    }
    let dots = regions.dot(&words.t());
    let best = |axis: Axis| -> f64 {
        let maxima: Vec<f64> = dots
            .axis_iter(axis)
            .map(|lane| lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect();
        maxima.iter().sum::<f64>() / maxima.len() as f64
    };
    Ok((best(Axis(0)), best(Axis(1))))
}

fn unit_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    normalize_rows_in_place(&mut out);
    out
}

pub fn assemble_graph(v: &Mat, t: &Mat, regions: &[Mat], words: &[Mat], epsilon: f64) -> Result<AssociationGraph> {
    let m = v.nrows();
    if m == 0 || t.nrows() != m || regions.len() != m || words.len() != m {
        return Err(Error::Shape(format!(
            "graph batch mismatch: {m} images, {} texts, {} region sets, {} word sets",
            t.nrows(),
            regions.len(),
            words.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("kernel temperature must be positive, got {epsilon}")));
    }
    let regions: Vec<Mat> = regions.iter().map(unit_rows).collect();
    let words: Vec<Mat> = words.iter().map(unit_rows).collect();
    let s_ii = intra_modal_similarity(v, epsilon);
    let s_tt = intra_modal_similarity(t, epsilon);
    let mut s_it = Mat::zeros((m, m));
    let mut s_ti = Mat::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            s_it[[i, j]] = cross_modal_similarity(&regions[i], &words[j])?.0;
            s_ti[[i, j]] = cross_modal_similarity(&regions[j], &words[i])?.1;
        }
    }
    let mut s = Mat::zeros((2 * m, 2 * m));
    s.slice_mut(s![..m, ..m]).assign(&s_ii);
    s.slice_mut(s![..m, m..]).assign(&s_it);
    s.slice_mut(s![m.., ..m]).assign(&s_ti);
    s.slice_mut(s![m.., m..]).assign(&s_tt);
    Ok(AssociationGraph {
        s_ii,
        s_tt,
        s_it,
        s_ti,
        s,
        epsilon,
    })
}

/// `D̃^{-1/2} A⁺ D̃^{-1/2}` with negative entries clamped to zero and
/// `D̃ = rowsum(A⁺) + 1e-6`.
pub fn normalized_adjacency(a: &Mat) -> Mat {
    let pos = a.mapv(|v| v.max(0.0));
    let inv_sqrt: Vec<f64> = pos.rows().into_iter().map(|r| 1.0 / (r.sum() + DEGREE_GUARD).sqrt()).collect();
    Mat::from_shape_fn(pos.dim(), |(i, j)| pos[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// `H + LeakyReLU(Â H W)` with an already normalized adjacency `Â`.
/// Dropout on the update applies when `dropout` is given.
pub fn gcn_var<'t>(h: &Var<'t>, a_hat: &Mat, w: &Var<'t>, dropout: Option<(&mut ChaCha8Rng, f64)>) -> Var<'t> {
    let tape = h.tape();
    let mut update = tape.constant(a_hat.clone()).matmul(h).matmul(w).leaky_relu(LEAKY_SLOPE);
    if let Some((rng, rate)) = dropout.filter(|(_, r)| *r > 0.0) {
        update = update.mul_const(dropout_mask(rng, update.shape(), rate));
    }
    h.add(&update)
}

pub fn gcn_layer(h: &Mat, a: &Mat, w: &Mat) -> Result<Mat> {
    let n = h.nrows();
    if n == 0 || a.dim() != (n, n) || w.dim() != (h.ncols(), h.ncols()) {
        return Err(Error::Shape(format!(
            "gcn: H {:?}, A {:?}, W {:?}",
            h.dim(),
            a.dim(),
            w.dim()
        )));
    }
    let tape = Tape::new();
    let out = gcn_var(&tape.constant(h.clone()), &normalized_adjacency(a), &tape.constant(w.clone()), None);
    Ok(out.value().as_ref().clone())
}

pub fn joint_gcn(h_i: &Mat, h_t: &Mat, s: &Mat, w: &Mat) -> Result<Mat> {
    if h_i.dim() != h_t.dim() {
        return Err(Error::Shape(format!("H_I {:?} vs H_T {:?}", h_i.dim(), h_t.dim())));
    }
    let h = ndarray::concatenate(Axis(0), &[h_i.view(), h_t.view()]).expect("equal widths");
    gcn_layer(&h, s, w)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Keeps entries at or above their block median (scaled by `alpha`) and masks the rest.
pub fn filter_graph(s: &Mat, alpha: f64) -> Result<FilteredGraph> {
    let (r, c) = s.dim();
    if r != c || r % 2 != 0 || r == 0 {
        return Err(Error::Shape(format!("association graph must be 2m × 2m, got {r}x{c}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("association graph has non-finite entries".into()));
    }
    let m = r / 2;
    let mut out = Mat::zeros((r, c));
    for (bi, bj) in [(0, 0), (0, m), (m, 0), (m, m)] {
        let block = s.slice(s![bi..bi + m, bj..bj + m]);
        let mut values: Vec<f64> = block.iter().copied().collect();
        let threshold = median(&mut values);
        out.slice_mut(s![bi..bi + m, bj..bj + m])
            .assign(&block.mapv(|v| if v >= threshold { alpha * v } else { MASK_VALUE }));
    }
    Ok(FilteredGraph {
        s_tilde: out,
        alpha,
        mask_value: MASK_VALUE,
    })
}

/// GAT output before the per-row renormalization, plus per-head attention.
pub struct GatOutput<'t> {
    pub out: Var<'t>,
    pub attention: Vec<Var<'t>>,
}

/// `H + concat_h softmax(Q_h K_hᵀ / √d_k + S̃) V_h`.
pub fn gat_var<'t>(
    h: &Var<'t>,
    s_tilde: &Mat,
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    heads: usize,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<GatOutput<'t>> {
    let (n, d) = h.shape();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} attention heads do not divide width {d}")));
    }
    if s_tilde.dim() != (n, n) {
        return Err(Error::Shape(format!("bias {:?} for {n} nodes", s_tilde.dim())));
    }
    if let Some(i) = s_tilde.rows().into_iter().position(|r| r.iter().all(|&x| x <= MASK_VALUE / 2.0)) {
        return Err(Error::Precondition(format!("attention row {i} is fully masked")));
    }
    let dk = d / heads;
    let (qa, ka, va) = (h.matmul(q), h.matmul(k), h.matmul(v));
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * dk, (head + 1) * dk);
        let logits = qa
            .slice_cols(a, b)
            .matmul(&ka.slice_cols(a, b).t())
            .scale(1.0 / (dk as f64).sqrt())
            .add_const(s_tilde);
        let attn = logits.softmax_rows();
        attention.push(attn);
        let mut weights = attn;
        if let Some((rng, rate)) = dropout.as_mut().filter(|(_, r)| *r > 0.0) {
            weights = weights.mul_const(dropout_mask(rng, (n, n), *rate));
        }
        outs.push(weights.matmul(&va.slice_cols(a, b)));
    }
    let merged = if heads == 1 { outs[0] } else { concat_cols(&outs) };
    Ok(GatOutput {
        out: h.add(&merged),
        attention,
    })
}

pub fn gat_layer(h: &Mat, s_tilde: &Mat, params: &GraphParams<Mat>, heads: usize) -> Result<Mat> {
    let tape = Tape::new();
    let g = gat_var(
        &tape.constant(h.clone()),
        s_tilde,
        &tape.constant(params.query.clone()),
        &tape.constant(params.key.clone()),
        &tape.constant(params.value.clone()),
        heads,
        None,
    )?;
    Ok(g.out.normalize_rows(NORM_FLOOR).value().as_ref().clone())
}

fn dropout<'a>(rng: &'a mut Option<&mut ChaCha8Rng>, rate: f64) -> Option<(&'a mut ChaCha8Rng, f64)> {
    rng.as_deref_mut().map(|r| (r, rate))
}

/// Enhanced embeddings `(v̂, t̂)` for a batch.
pub fn enhance_batch<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    graph: &AssociationGraph,
    p: &GraphParams<Var<'t>>,
    cfg: &GraphConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t>, Var<'t>)> {
    let m = graph.batch_size();
    let h_i = gcn_var(v, &normalized_adjacency(&graph.s_ii), &p.intra_image, dropout(&mut rng, cfg.dropout_gcn));
    let h_t = gcn_var(t, &normalized_adjacency(&graph.s_tt), &p.intra_text, dropout(&mut rng, cfg.dropout_gcn));
    let h = gcn_var(
        &concat_rows(&[h_i, h_t]),
        &normalized_adjacency(&graph.s),
        &p.joint,
        dropout(&mut rng, cfg.dropout_gcn),
    );
    let filtered = filter_graph(&graph.s, cfg.alpha)?;
    let gat = gat_var(
        &h,
        &filtered.s_tilde,
        &p.query,
        &p.key,
        &p.value,
        cfg.heads,
        dropout(&mut rng, cfg.dropout_gat),
    )?;
    let out = gat.out.normalize_rows(NORM_FLOOR);
    Ok((out.slice_rows(0, m), out.slice_rows(m, 2 * m)))
}

// ---------------------------------------------------------------------------
// Objectives

/// Index of the largest entry excluding `skip`; ties go to the lower index.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, v) in values.enumerate() {
        if j != skip && (best.0 == usize::MAX || v > best.1) {
            best = (j, v);
        }
    }
    best.0
}

/// Hardest-negative hinge loss over a square similarity matrix, summed over the batch.
pub fn triplet_var<'t>(sims: &Var<'t>, gamma: f64) -> Var<'t> {
    let (m, _) = sims.shape();
    if m < 2 {
        return sims.tape().scalar(0.0);
    }
    let s = sims.value();
    let diag: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).collect();
    let neg_text: Vec<(usize, usize)> = (0..m).map(|i| (i, hardest(s.row(i).iter().copied(), i))).collect();
    let neg_image: Vec<(usize, usize)> = (0..m).map(|i| (hardest(s.column(i).iter().copied(), i), i)).collect();
    let pos = sims.gather(diag);
    let hinge = |neg: Vec<(usize, usize)>| sims.gather(neg).sub(&pos).add_scalar(gamma).relu().sum();
    hinge(neg_text).add(&hinge(neg_image))
}

pub fn triplet_between<'t>(v: &Var<'t>, t: &Var<'t>, gamma: f64) -> Var<'t> {
    triplet_var(&v.matmul(&t.t()), gamma)
}

pub fn triplet_loss(sims: &Mat, gamma: f64) -> Result<f64> {
    if sims.nrows() != sims.ncols() || sims.is_empty() {
        return Err(Error::Shape(format!("triplet loss needs a square matrix, got {:?}", sims.dim())));
    }
    let tape = Tape::new();
    Ok(triplet_var(&tape.constant(sims.clone()), gamma).item())
}

/// The five interaction terms and their sum.
pub struct NsiTerms<'t> {
    pub base: Var<'t>,
    pub enhanced: Var<'t>,
    pub image_enhanced_text: Var<'t>,
    pub enhanced_image_text: Var<'t>,
    pub pga: Var<'t>,
    pub total: Var<'t>,
}

/// Interaction terms with explicit alignment targets for `(v̂, t̂)`.
#[allow(clippy::too_many_arguments)]
pub fn nsi_with_targets<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    v_hat: &Var<'t>,
    t_hat: &Var<'t>,
    prototypes: &Var<'t>,
    targets: &AlignmentTargets,
    tau: f64,
    gamma: f64,
) -> NsiTerms<'t> {
    let base = triplet_between(v, t, gamma);
    let enhanced = triplet_between(v_hat, t_hat, gamma);
    let image_enhanced_text = triplet_between(v, t_hat, gamma);
    let enhanced_image_text = triplet_between(v_hat, t, gamma);
    let pga = pga_with_targets(v_hat, t_hat, prototypes, targets, tau);
    let total = sum_all(&[base, enhanced, image_enhanced_text, enhanced_image_text, pga]);
    NsiTerms {
        base,
        enhanced,
        image_enhanced_text,
        enhanced_image_text,
        pga,
        total,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn nsi_var<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    v_hat: &Var<'t>,
    t_hat: &Var<'t>,
    prototypes: &Var<'t>,
    tau: f64,
    sinkhorn: SinkhornConfig,
    gamma: f64,
) -> Result<NsiTerms<'t>> {
    let targets = alignment_targets(v_hat, t_hat, prototypes, sinkhorn)?;
    Ok(nsi_with_targets(v, t, v_hat, t_hat, prototypes, &targets, tau, gamma))
}

pub fn nsi_loss(
    base: (&Mat, &Mat),
    enhanced: (&Mat, &Mat),
    bank: &PrototypeBank,
    sinkhorn: SinkhornConfig,
    gamma: f64,
) -> Result<f64> {
    let dim = base.0.dim();
    if base.1.dim() != dim || enhanced.0.dim() != dim || enhanced.1.dim() != dim {
        return Err(Error::Shape("interaction loss needs four equally shaped embedding sets".into()));
    }
    if dim.1 != bank.prototypes.ncols() {
        return Err(Error::Shape(format!("embeddings width {} vs prototypes {:?}", dim.1, bank.prototypes.dim())));
    }
    let tape = Tape::new();
    let c = |m: &Mat| tape.constant(m.clone());
    let terms = nsi_var(
        &c(base.0),
        &c(base.1),
        &c(enhanced.0),
        &c(enhanced.1),
        &c(&bank.prototypes),
        bank.tau,
        sinkhorn,
        gamma,
    )?;
    Ok(terms.total.item())
}
