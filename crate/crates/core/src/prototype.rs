//! Trainable prototypes shared by both modalities, Sinkhorn soft assignment
//! and the bidirectional prototype alignment loss.

use rand::Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::gaussian;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `k × d`
    pub prototypes: Mat,
    pub tau: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Mat, tau: f64) -> Result<Self> {
        if prototypes.nrows() < 2 {
            return Err(Error::Config(format!("need k >= 2 prototypes, got {}", prototypes.nrows())));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let mut bank = Self { prototypes, tau };
        bank.renormalize();
        Ok(bank)
    }

    pub fn init(rng: &mut impl Rng, k: usize, d: usize, tau: f64) -> Result<Self> {
        Self::new(gaussian(rng, k, d, 1.0), tau)
    }

    pub fn k(&self) -> usize {
        self.prototypes.nrows()
    }

    /// L2-normalizes every prototype row.
    pub fn renormalize(&mut self) {
        normalize_rows_in_place(&mut self.prototypes);
    }
}

pub(crate) fn normalize_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(crate::encoder::NORM_FLOOR);
        row.mapv_inplace(|v| v / n);
    }
}

/// Sinkhorn settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub iters: usize,
    pub eps: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { iters: 3, eps: 0.05 }
    }
}

/// Prototype-space distributions `softmax(E Pᵀ)` on the tape.
pub fn scores<'t>(embeddings: &Var<'t>, prototypes: &Var<'t>) -> Var<'t> {
    embeddings.matmul(&prototypes.t()).softmax_rows()
}

/// Cross-entropy of `softmax(scores / τ)` against constant `targets`, averaged over rows.
pub fn cross_entropy<'t>(scores: &Var<'t>, targets: &Mat, tau: f64) -> Var<'t> {
    let m = scores.shape().0 as f64;
    scores
        .scale(1.0 / tau)
        .log_softmax_rows()
        .mul_const(targets.clone())
        .sum()
        .scale(-1.0 / m)
}

/// Sinkhorn assignments of both modalities, used as constant targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets {
    pub d_v: Mat,
    pub d_t: Mat,
}

pub fn alignment_targets<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    prototypes: &Var<'t>,
    sinkhorn: SinkhornConfig,
) -> Result<AlignmentTargets> {
    let d_v = sinkhorn_assign(&scores(v, prototypes).value(), sinkhorn.iters, sinkhorn.eps)?;
    let d_t = sinkhorn_assign(&scores(t, prototypes).value(), sinkhorn.iters, sinkhorn.eps)?;
    Ok(AlignmentTargets { d_v, d_t })
}

/// `CE(softmax(u_v/τ), D_t) + CE(softmax(u_t/τ), D_v)` with the given targets.
pub fn pga_with_targets<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    prototypes: &Var<'t>,
    targets: &AlignmentTargets,
    tau: f64,
) -> Var<'t> {
    let u_v = scores(v, prototypes);
    let u_t = scores(t, prototypes);
    cross_entropy(&u_v, &targets.d_t, tau).add(&cross_entropy(&u_t, &targets.d_v, tau))
}

/// Bidirectional alignment loss from embeddings; the Sinkhorn assignments are
/// computed from current values and enter as constants.
pub fn pga_from_embeddings<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    prototypes: &Var<'t>,
    tau: f64,
    sinkhorn: SinkhornConfig,
) -> Result<Var<'t>> {
    let targets = alignment_targets(v, t, prototypes, sinkhorn)?;
    Ok(pga_with_targets(v, t, prototypes, &targets, tau))
}

// ---------------------------------------------------------------------------

/// Output of [`assign`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub u_v: Mat,
    pub u_t: Mat,
    pub d_v: Mat,
    pub d_t: Mat,
}

pub fn prototype_scores(embeddings: &Mat, bank: &PrototypeBank) -> Result<Mat> {
    if embeddings.ncols() != bank.prototypes.ncols() {
        return Err(Error::Shape(format!(
            "embeddings of width {} vs prototypes {:?}",
            embeddings.ncols(),
            bank.prototypes.dim()
        )));
    }
    let tape = Tape::new();
    let u = scores(&tape.constant(embeddings.clone()), &tape.constant(bank.prototypes.clone()));
    Ok(u.value().as_ref().clone())
}

/// Entropic transport plan before the final row rescale: rows carry mass
/// `1/m` (up to convergence) and columns exactly `1/k`.
pub fn sinkhorn_transport(scores: &Mat, iters: usize, eps: f64) -> Result<Mat> {
    if iters == 0 || !(eps > 0.0) {
        return Err(Error::Precondition(format!("sinkhorn needs iters >= 1 and eps > 0 (got {iters}, {eps})")));
    }
    if scores.is_empty() || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn scores must be finite and non-empty".into()));
    }
    let (m, k) = scores.dim();
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut plan = scores.mapv(|s| ((s - max) / eps).exp());
    let row_mass = 1.0 / m as f64;
    let col_mass = 1.0 / k as f64;
    for _ in 0..iters {
        for mut row in plan.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s * row_mass);
        }
        for mut col in plan.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v / s * col_mass);
        }
    }
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn underflowed; increase eps".into()));
    }
    Ok(plan)
}

/// Soft assignments: transport plan with rows rescaled to sum to 1.
pub fn sinkhorn_assign(scores: &Mat, iters: usize, eps: f64) -> Result<Mat> {
    let mut plan = sinkhorn_transport(scores, iters, eps)?;
    for mut row in plan.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(plan)
}

pub fn assign(v: &Mat, t: &Mat, bank: &PrototypeBank, sinkhorn: SinkhornConfig) -> Result<AssignmentResult> {
    let u_v = prototype_scores(v, bank)?;
    let u_t = prototype_scores(t, bank)?;
    let d_v = sinkhorn_assign(&u_v, sinkhorn.iters, sinkhorn.eps)?;
    let d_t = sinkhorn_assign(&u_t, sinkhorn.iters, sinkhorn.eps)?;
    Ok(AssignmentResult { u_v, u_t, d_v, d_t })
}

pub fn pga_loss(u_v: &Mat, u_t: &Mat, d_v: &Mat, d_t: &Mat, tau: f64) -> Result<f64> {
    let dim = u_v.dim();
    if u_t.dim() != dim || d_v.dim() != dim || d_t.dim() != dim {
        return Err(Error::Shape(format!(
            "pga shapes differ: u_v {dim:?}, u_t {:?}, d_v {:?}, d_t {:?}",
            u_t.dim(),
            d_v.dim(),
            d_t.dim()
        )));
    }
    let tape = Tape::new();
    let l_img = cross_entropy(&tape.constant(u_v.clone()), d_t, tau);
    let l_txt = cross_entropy(&tape.constant(u_t.clone()), d_v, tau);
    Ok(l_img.item() + l_txt.item())
}
