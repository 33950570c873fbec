//! Multi-granularity encoder: projection into the joint space, intra-instance
//! attention over local features, globally guided aggregation of the locals,
//! and a learned gate blending the aggregate with the global vector.
//!
//! The differentiable path works on [`Var`]s; the free functions taking
//! [`Mat`]/[`Array1`] arguments evaluate that same path on a scratch tape and
//! validate shapes at the boundary.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::autodiff::{concat_cols, sum_all, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{gaussian, near_identity, param_tree, Affine};
use crate::tensorio::{FeatureBundle, FeatureDims};

/// Denominator floor for cosine similarities and normalization.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub img_region: Affine<T>,
    pub txt_word: Affine<T>,
    pub img_global: Affine<T>,
    pub txt_global: Affine<T>,
}
param_tree!(ProjectionParams { img_region: tree, txt_word: tree, img_global: tree, txt_global: tree });

/// Single-head self-attention over the locals of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}
param_tree!(EnhancerParams { query: leaf, key: leaf, value: leaf, output: leaf });

/// `m` query transforms and `m` codebook transforms, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GglaParams<T> {
    pub queries: Vec<T>,
    pub codebooks: Vec<T>,
}
param_tree!(GglaParams { queries: list, codebooks: list });

/// Gates `[fine, global] (1 × 2d) → 1` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub image: Affine<T>,
    pub text: Affine<T>,
}
param_tree!(FusionParams { image: tree, text: tree });

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub projection: ProjectionParams<T>,
    pub img_enhancer: EnhancerParams<T>,
    pub txt_enhancer: EnhancerParams<T>,
    pub img_ggla: GglaParams<T>,
    pub txt_ggla: GglaParams<T>,
    pub fusion: FusionParams<T>,
}
param_tree!(EncoderParams {
    projection: tree,
    img_enhancer: tree,
    txt_enhancer: tree,
    img_ggla: tree,
    txt_ggla: tree,
    fusion: tree,
});

impl EnhancerParams<Mat> {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            query: gaussian(rng, d, d, s),
            key: gaussian(rng, d, d, s),
            value: gaussian(rng, d, d, s),
            output: gaussian(rng, d, d, 0.1 * s),
        }
    }

    /// Value and output maps zeroed, so the layer is the identity.
    pub fn identity(rng: &mut impl Rng, d: usize) -> Self {
        let mut e = Self::init(rng, d);
        e.value.fill(0.0);
        e.output.fill(0.0);
        e
    }
}

impl GglaParams<Mat> {
    pub fn init(rng: &mut impl Rng, d: usize, m_codes: usize) -> Self {
        Self {
            queries: (0..m_codes).map(|_| near_identity(rng, d, 0.5)).collect(),
            codebooks: (0..m_codes).map(|_| near_identity(rng, d, 0.5)).collect(),
        }
    }

    pub fn identity(d: usize, m_codes: usize) -> Self {
        Self {
            queries: vec![Mat::eye(d); m_codes],
            codebooks: vec![Mat::eye(d); m_codes],
        }
    }
}

impl EncoderParams<Mat> {
    pub fn init(rng: &mut impl Rng, dims: FeatureDims, d: usize, m_codes: usize) -> Self {
        Self {
            projection: ProjectionParams {
                img_region: Affine::init(rng, dims.d_v, d),
                txt_word: Affine::init(rng, dims.d_w, d),
                img_global: Affine::init(rng, dims.d_g, d),
                txt_global: Affine::init(rng, dims.d_g, d),
            },
            img_enhancer: EnhancerParams::init(rng, d),
            txt_enhancer: EnhancerParams::init(rng, d),
            img_ggla: GglaParams::init(rng, d, m_codes),
            txt_ggla: GglaParams::init(rng, d, m_codes),
            fusion: FusionParams {
                image: Affine::init(rng, 2 * d, 1),
                text: Affine::init(rng, 2 * d, 1),
            },
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.projection.img_region.weight.ncols()
    }

    pub fn input_dims(&self) -> FeatureDims {
        FeatureDims {
            d_v: self.projection.img_region.weight.nrows(),
            d_w: self.projection.txt_word.weight.nrows(),
            d_g: self.projection.img_global.weight.nrows(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderParams<Var<'t>> {
        self.map("", &mut |_, m| tape.leaf(m.clone()))
    }
}

// ---------------------------------------------------------------------------
// Differentiable building blocks

/// Residual self-attention; returns the enhanced rows and the attention matrix.
pub fn enhance<'t>(x: &Var<'t>, e: &EnhancerParams<Var<'t>>) -> (Var<'t>, Var<'t>) {
    let d = x.shape().1 as f64;
    let q = x.matmul(&e.query);
    let k = x.matmul(&e.key);
    let v = x.matmul(&e.value);
    let attn = q.matmul(&k.t()).scale(1.0 / d.sqrt()).softmax_rows();
    let out = x.add(&attn.matmul(&v).matmul(&e.output));
    (out, attn)
}

/// Cosine of a `1 × d` query against each row of `n × d` codewords, as `1 × n`.
pub fn cosine_coefficients<'t>(query: &Var<'t>, codebook: &Var<'t>) -> Var<'t> {
    let q = query.normalize_rows(NORM_FLOOR);
    let c = codebook.normalize_rows(NORM_FLOOR);
    q.matmul(&c.t())
}

/// Pooling weights (`1 × n`): mean of the per-transform cosine coefficients, softmaxed.
pub fn pooling_weights<'t>(query: &Var<'t>, codebook: &Var<'t>, g: &GglaParams<Var<'t>>) -> Var<'t> {
    let coeffs: Vec<Var<'t>> = g
        .queries
        .iter()
        .zip(&g.codebooks)
        .map(|(qm, cm)| cosine_coefficients(&query.matmul(qm), &codebook.matmul(cm)))
        .collect();
    sum_all(&coeffs).scale(1.0 / coeffs.len() as f64).softmax_rows()
}

/// Returns the normalized fused vector and the `1 × 1` gate.
pub fn fuse<'t>(fine: &Var<'t>, global: &Var<'t>, gate: &Affine<Var<'t>>) -> (Var<'t>, Var<'t>) {
    let g = gate.apply(&concat_cols(&[*fine, *global])).sigmoid();
    let mixed = fine.sub(global).scale_by(&g).add(global);
    (mixed.normalize_rows(NORM_FLOOR), g)
}

/// One modality's encoder output.
pub struct SideOutput<'t> {
    /// `1 × d`, unit norm.
    pub embedding: Var<'t>,
    /// Enhanced locals, `n × d`.
    pub locals: Var<'t>,
    pub weights: Var<'t>,
    pub gate: Var<'t>,
}

pub fn encode_side<'t>(
    tape: &'t Tape,
    locals: &Mat,
    global: &Mat,
    p: &EncoderParams<Var<'t>>,
    modality: Modality,
) -> SideOutput<'t> {
    let (local_map, global_map, enhancer, ggla, gate) = match modality {
        Modality::Image => (
            &p.projection.img_region,
            &p.projection.img_global,
            &p.img_enhancer,
            &p.img_ggla,
            &p.fusion.image,
        ),
        Modality::Text => (
            &p.projection.txt_word,
            &p.projection.txt_global,
            &p.txt_enhancer,
            &p.txt_ggla,
            &p.fusion.text,
        ),
    };
    let projected = local_map.apply(&tape.constant(locals.clone()));
    let g = global_map.apply(&tape.constant(global.clone()));
    let (enhanced, _) = enhance(&projected, enhancer);
    let weights = pooling_weights(&g, &enhanced, ggla);
    let fine = weights.matmul(&enhanced);
    let (embedding, gate) = fuse(&fine, &g, gate);
    SideOutput {
        embedding,
        locals: enhanced,
        weights,
        gate,
    }
}

// ---------------------------------------------------------------------------
// Value-level operations

/// Projected bundle in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBundle {
    pub regions: Mat,
    pub words: Mat,
    pub global_image: Array1<f64>,
    pub global_text: Array1<f64>,
}

/// Full-granularity embeddings of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub v: Array1<f64>,
    pub t: Array1<f64>,
    /// Neighborhood-enhanced variants; only populated during training.
    pub v_hat: Option<Array1<f64>>,
    pub t_hat: Option<Array1<f64>>,
    /// Enhanced region features, `n_r × d`.
    pub regions: Mat,
    /// Enhanced word features, `n_t × d`.
    pub words: Mat,
    pub gate_image: f64,
    pub gate_text: f64,
}

fn row(v: &Array1<f64>) -> Mat {
    v.clone().insert_axis(Axis(0))
}

fn flat(m: &Mat) -> Array1<f64> {
    m.row(0).to_owned()
}

fn check_affine(a: &Affine<Mat>, x: &Mat, what: &str) -> Result<()> {
    if x.ncols() != a.weight.nrows() || a.bias.dim() != (1, a.weight.ncols()) {
        return Err(Error::Shape(format!(
            "{what}: input width {} incompatible with map {}x{} (bias {:?})",
            x.ncols(),
            a.weight.nrows(),
            a.weight.ncols(),
            a.bias.dim()
        )));
    }
    Ok(())
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what}: non-finite input")))
    }
}

pub fn project_bundle(b: &FeatureBundle, p: &ProjectionParams<Mat>) -> Result<ProjectedBundle> {
    check_affine(&p.img_region, &b.regions, "regions")?;
    check_affine(&p.txt_word, &b.words, "words")?;
    check_affine(&p.img_global, &b.global_image, "global_image")?;
    check_affine(&p.txt_global, &b.global_text, "global_text")?;
    let tape = Tape::new();
    let bound = p.map("", &mut |_, m| tape.leaf(m.clone()));
    let apply = |a: &Affine<Var<'_>>, x: &Mat| a.apply(&tape.constant(x.clone())).value().as_ref().clone();
    Ok(ProjectedBundle {
        regions: apply(&bound.img_region, &b.regions),
        words: apply(&bound.txt_word, &b.words),
        global_image: flat(&apply(&bound.img_global, &b.global_image)),
        global_text: flat(&apply(&bound.txt_global, &b.global_text)),
    })
}

/// Enhanced locals and the row-stochastic attention matrix.
pub fn enhance_locals_with_attention(x: &Mat, e: &EnhancerParams<Mat>) -> Result<(Mat, Mat)> {
    if x.nrows() == 0 {
        return Err(Error::Precondition("enhance_locals needs at least one row".into()));
    }
    check_finite(x, "enhance_locals")?;
    let d = x.ncols();
    for m in [&e.query, &e.key, &e.value, &e.output] {
        if m.dim() != (d, d) {
            return Err(Error::Shape(format!("enhancer map {:?} does not match width {d}", m.dim())));
        }
    }
    let tape = Tape::new();
    let bound = e.map("", &mut |_, m| tape.leaf(m.clone()));
    let (out, attn) = enhance(&tape.constant(x.clone()), &bound);
    let out = out.value().as_ref().clone();
    check_finite(&out, "enhance_locals output")?;
    Ok((out, attn.value().as_ref().clone()))
}

pub fn enhance_locals(x: &Mat, e: &EnhancerParams<Mat>) -> Result<Mat> {
    enhance_locals_with_attention(x, e).map(|(out, _)| out)
}

fn check_codebook(query: &Array1<f64>, codebook: &Mat) -> Result<()> {
    if codebook.nrows() == 0 || codebook.ncols() != query.len() {
        return Err(Error::Shape(format!(
            "query of length {} against codebook {:?}",
            query.len(),
            codebook.dim()
        )));
    }
    Ok(())
}

fn check_nonzero(m: &Mat, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        if r.dot(&r).sqrt() < NORM_FLOOR {
            return Err(Error::Numeric(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

pub fn ggla_coefficients(query: &Array1<f64>, codebook: &Mat) -> Result<Array1<f64>> {
    check_codebook(query, codebook)?;
    let q = row(query);
    check_nonzero(&q, "query")?;
    check_nonzero(codebook, "codeword")?;
    let tape = Tape::new();
    let c = cosine_coefficients(&tape.constant(q), &tape.constant(codebook.clone()));
    Ok(flat(&c.value()))
}

pub fn ggla_weights(query: &Array1<f64>, codebook: &Mat, g: &GglaParams<Mat>) -> Result<Array1<f64>> {
    check_codebook(query, codebook)?;
    if g.queries.is_empty() || g.queries.len() != g.codebooks.len() {
        return Err(Error::Shape(format!(
            "need m >= 1 matched transforms, got {} queries / {} codebooks",
            g.queries.len(),
            g.codebooks.len()
        )));
    }
    let d = query.len();
    if g.queries.iter().chain(&g.codebooks).any(|m| m.dim() != (d, d)) {
        return Err(Error::Shape(format!("transforms must be {d}x{d}")));
    }
    let q = row(query);
    check_nonzero(&q, "query")?;
    check_nonzero(codebook, "codeword")?;
    let tape = Tape::new();
    let bound = g.map("", &mut |_, m| tape.leaf(m.clone()));
    let w = pooling_weights(&tape.constant(q), &tape.constant(codebook.clone()), &bound);
    Ok(flat(&w.value()))
}

pub fn ggla_aggregate(weights: &Array1<f64>, locals: &Mat) -> Result<Array1<f64>> {
    if weights.len() != locals.nrows() {
        return Err(Error::Shape(format!(
            "{} weights for {} local features",
            weights.len(),
            locals.nrows()
        )));
    }
    Ok(weights.dot(locals))
}

/// Returns the unit-norm fused vector and the gate value.
pub fn gated_fuse(
    fine: &Array1<f64>,
    global: &Array1<f64>,
    f: &FusionParams<Mat>,
    modality: Modality,
) -> Result<(Array1<f64>, f64)> {
    let gate = match modality {
        Modality::Image => &f.image,
        Modality::Text => &f.text,
    };
    let d = fine.len();
    if global.len() != d || gate.weight.dim() != (2 * d, 1) || gate.bias.dim() != (1, 1) {
        return Err(Error::Shape(format!(
            "fusion of {d}/{} vectors with gate {:?}",
            global.len(),
            gate.weight.dim()
        )));
    }
    let tape = Tape::new();
    let bound = gate.map("", &mut |_, m| tape.leaf(m.clone()));
    let (fused, g) = fuse(&tape.constant(row(fine)), &tape.constant(row(global)), &bound);
    Ok((flat(&fused.value()), g.item()))
}

pub fn check_bundle_dims(b: &FeatureBundle, p: &EncoderParams<Mat>) -> Result<()> {
    b.validate()?;
    let want = p.input_dims();
    let have = (b.regions.ncols(), b.words.ncols(), b.global_image.ncols(), b.global_text.ncols());
    if have != (want.d_v, want.d_w, want.d_g, want.d_g) {
        return Err(Error::Shape(format!(
            "bundle {} widths {have:?} do not match encoder inputs {want:?}",
            b.pair_id
        )));
    }
    Ok(())
}

pub fn encode_pair(b: &FeatureBundle, p: &EncoderParams<Mat>) -> Result<EmbeddingPair> {
    check_bundle_dims(b, p)?;
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let img = encode_side(&tape, &b.regions, &b.global_image, &bound, Modality::Image);
    let txt = encode_side(&tape, &b.words, &b.global_text, &bound, Modality::Text);
    Ok(EmbeddingPair {
        v: flat(&img.embedding.value()),
        t: flat(&txt.embedding.value()),
        v_hat: None,
        t_hat: None,
        regions: img.locals.value().as_ref().clone(),
        words: txt.locals.value().as_ref().clone(),
        gate_image: img.gate.item(),
        gate_text: txt.gate.item(),
    })
}

/// Unit-norm embedding of one modality, computed without touching the other side.
pub fn encode_modality(locals: &Mat, global: &Mat, p: &EncoderParams<Mat>, modality: Modality) -> Array1<f64> {
    let tape = Tape::new();
    let bound = p.bind(&tape);
    flat(&encode_side(&tape, locals, global, &bound, modality).embedding.value())
}
