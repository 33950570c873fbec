//! Momentum encoder copies, FIFO memory banks and the momentum contrastive loss.

use crate::autodiff::{concat_cols, Mat, Tape, Var};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::params::{named, round_to_f32};

/// Shadow copy of the encoder updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEncoder {
    pub params: EncoderParams<Mat>,
    pub m_tilde: f64,
}

impl MomentumEncoder {
    pub fn new(live: &EncoderParams<Mat>, m_tilde: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m_tilde) {
            return Err(Error::Config(format!("momentum coefficient {m_tilde} outside [0, 1]")));
        }
        Ok(Self {
            params: live.clone(),
            m_tilde,
        })
    }

    pub fn update(&mut self, live: &EncoderParams<Mat>) -> Result<()> {
        let live = named(|f| live.visit("", f));
        let mut shadow = Vec::new();
        self.params.visit_mut("", &mut |name, m| shadow.push((name, m)));
        momentum_update_tensors(&live, &mut shadow, self.m_tilde)
    }
}

/// `θ_m ← m̃·θ_m + (1 − m̃)·θ` for matching named tensors.
pub fn momentum_update_tensors(live: &[(String, &Mat)], shadow: &mut [(String, &mut Mat)], m_tilde: f64) -> Result<()> {
    if live.len() != shadow.len() {
        return Err(Error::Congruence(format!(
            "{} live tensors vs {} momentum tensors",
            live.len(),
            shadow.len()
        )));
    }
    for ((ln, lv), (sn, sv)) in live.iter().zip(shadow.iter()) {
        if ln != sn || lv.dim() != sv.dim() {
            return Err(Error::Congruence(format!(
                "live {ln} {:?} vs momentum {sn} {:?}",
                lv.dim(),
                sv.dim()
            )));
        }
    }
    let keep = 1.0 - m_tilde;
    for ((_, lv), (_, sv)) in live.iter().zip(shadow.iter_mut()) {
        sv.zip_mut_with(lv, |s, &l| *s = m_tilde * *s + keep * l);
    }
    Ok(())
}

/// Ring buffer of past momentum features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    buffer: Mat,
    write_index: usize,
    filled: usize,
}

/// Tolerance on row norms accepted by [`MemoryBank::push`].
pub const ROW_NORM_TOL: f64 = 1e-4;

impl MemoryBank {
    pub fn new(capacity: usize, d: usize) -> Result<Self> {
        if capacity == 0 || d == 0 {
            return Err(Error::Config(format!("memory bank needs positive capacity and width, got {capacity}x{d}")));
        }
        Ok(Self {
            buffer: Mat::zeros((capacity, d)),
            write_index: 0,
            filled: 0,
        })
    }

    /// Restores a bank from its raw state.
    pub fn from_parts(buffer: Mat, write_index: usize, filled: usize) -> Result<Self> {
        let capacity = buffer.nrows();
        if capacity == 0 || write_index >= capacity || filled > capacity {
            return Err(Error::Format(format!(
                "inconsistent bank state: capacity {capacity}, write index {write_index}, filled {filled}"
            )));
        }
        Ok(Self {
            buffer,
            write_index,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_index(&self) -> usize {
        self.write_index
    }

    /// Raw `N × d` storage, including unfilled rows.
    pub fn buffer(&self) -> &Mat {
        &self.buffer
    }

    /// Filled rows in storage order.
    pub fn contents(&self) -> Mat {
        self.buffer.slice(ndarray::s![..self.filled, ..]).to_owned()
    }

    /// Filled rows from oldest to newest.
    pub fn in_insertion_order(&self) -> Mat {
        let n = self.capacity();
        let start = if self.filled < n { 0 } else { self.write_index };
        let mut out = Mat::zeros((self.filled, self.dim()));
        for i in 0..self.filled {
            out.row_mut(i).assign(&self.buffer.row((start + i) % n));
        }
        out
    }

    /// Writes `feats` at the write index with wraparound; entries are stored at `f32` precision.
    pub fn push(&mut self, feats: &Mat) -> Result<()> {
        let (b, d) = feats.dim();
        if b > self.capacity() {
            return Err(Error::Capacity {
                capacity: self.capacity(),
                batch: b,
            });
        }
        if d != self.dim() {
            return Err(Error::Shape(format!("bank width {} vs features {d}", self.dim())));
        }
        for (i, row) in feats.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= ROW_NORM_TOL) {
                return Err(Error::Precondition(format!("bank row {i} has norm {norm}, expected 1")));
            }
        }
        let n = self.capacity();
        for row in feats.rows() {
            let mut dst = self.buffer.row_mut(self.write_index);
            dst.assign(&row);
            dst.mapv_inplace(|v| f64::from(v as f32));
            self.write_index = (self.write_index + 1) % n;
        }
        self.filled = (self.filled + b).min(n);
        Ok(())
    }
}

pub fn bank_push(bank: &mut MemoryBank, feats: &Mat) -> Result<()> {
    bank.push(feats)
}

fn check_mcl(anchors: (usize, usize), positives: &Mat, bank: &MemoryBank) -> Result<()> {
    if anchors.0 == 0 {
        return Err(Error::Precondition("contrastive loss needs at least one anchor".into()));
    }
    if positives.dim() != anchors {
        return Err(Error::Shape(format!(
            "anchors {anchors:?} vs positives {:?}",
            positives.dim()
        )));
    }
    if bank.dim() != anchors.1 {
        return Err(Error::Shape(format!("anchors of width {} vs bank width {}", anchors.1, bank.dim())));
    }
    Ok(())
}

/// InfoNCE of `anchors` against their momentum `positives` and the filled bank
/// rows, summed over the batch. Positives and bank rows are constants.
pub fn mcl_term<'t>(anchors: &Var<'t>, positives: &Mat, bank: &MemoryBank, tau: f64) -> Result<Var<'t>> {
    check_mcl(anchors.shape(), positives, bank)?;
    let tape = anchors.tape();
    if bank.filled() == 0 {
        return Ok(tape.scalar(0.0));
    }
    let pos = anchors.mul_const(positives.clone()).row_sums();
    let neg = anchors.matmul(&tape.constant(bank.contents().reversed_axes()));
    let logits = concat_cols(&[pos, neg]);
    let m = anchors.shape().0;
    let first: Vec<(usize, usize)> = (0..m).map(|i| (i, 0)).collect();
    Ok(logits.scale(1.0 / tau).log_softmax_rows().gather(first).sum().neg())
}

/// Image→text plus text→image contrastive loss on the tape.
pub fn mcl_pair<'t>(
    v: &Var<'t>,
    t: &Var<'t>,
    z_v: &Mat,
    z_t: &Mat,
    bank_v: &MemoryBank,
    bank_t: &MemoryBank,
    tau: f64,
) -> Result<Var<'t>> {
    Ok(mcl_term(v, z_t, bank_t, tau)?.add(&mcl_term(t, z_v, bank_v, tau)?))
}

/// Value-level single-direction loss.
pub fn mcl_loss(anchors: &Mat, positives: &Mat, bank: &MemoryBank, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(mcl_term(&tape.constant(anchors.clone()), positives, bank, tau)?.item())
}

/// Rounds every tensor of the shadow copy to `f32`.
pub fn round_momentum(enc: &mut MomentumEncoder) {
    enc.params.visit_mut("", &mut |_, m| round_to_f32(m));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use crate::prototype::normalize_rows_in_place;
    use crate::tensorio::FeatureDims;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, r: usize, d: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = gaussian(&mut rng, r, d, 1.0);
        normalize_rows_in_place(&mut m);
        m.mapv_inplace(|v| f64::from(v as f32));
        m
    }

    fn encoder(seed: u64) -> EncoderParams<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(&mut rng, FeatureDims { d_v: 5, d_w: 4, d_g: 3 }, 6, 2)
    }

    #[test]
    fn momentum_extremes() {
        let live = encoder(1);
        let start = encoder(2);
        let mut frozen = MomentumEncoder { params: start.clone(), m_tilde: 1.0 };
        frozen.update(&live).unwrap();
        assert_eq!(frozen.params, start);
        let mut copy = MomentumEncoder { params: start, m_tilde: 0.0 };
        copy.update(&live).unwrap();
        assert_eq!(copy.params, live);
    }

    #[test]
    fn default_coefficient_example() {
        let live = [("w".to_string(), &array![[0.0]])];
        let mut s = array![[1.0]];
        momentum_update_tensors(&live, &mut [("w".to_string(), &mut s)], 0.999).unwrap();
        assert_eq!(s[[0, 0]], 0.999);
    }

    #[test]
    fn shape_mismatch_is_congruence_error() {
        let live = encoder(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = EncoderParams::init(&mut rng, FeatureDims { d_v: 5, d_w: 4, d_g: 3 }, 8, 2);
        let mut enc = MomentumEncoder::new(&other, 0.9).unwrap();
        assert!(matches!(enc.update(&live), Err(Error::Congruence(_))));
        assert!(MomentumEncoder::new(&live, 1.5).is_err());
    }

    #[test]
    fn fill_and_evict() {
        let mut bank = MemoryBank::new(4, 3).unwrap();
        let a = unit_rows(1, 4, 3);
        bank.push(&a).unwrap();
        assert_eq!(bank.contents(), a);
        let batches: Vec<Mat> = (0..3).map(|s| unit_rows(10 + s, 2, 3)).collect();
        let mut bank = MemoryBank::new(4, 3).unwrap();
        for b in &batches {
            bank.push(b).unwrap();
        }
        let expected = ndarray::concatenate(ndarray::Axis(0), &[batches[1].view(), batches[2].view()]).unwrap();
        assert_eq!(bank.in_insertion_order(), expected);
        assert_eq!(bank.filled(), 4);
    }

    #[test]
    fn push_rejects_oversized_and_unnormalized() {
        let mut bank = MemoryBank::new(2, 3).unwrap();
        assert!(matches!(bank.push(&unit_rows(0, 3, 3)), Err(Error::Capacity { capacity: 2, batch: 3 })));
        assert!(matches!(bank.push(&Mat::ones((1, 3))), Err(Error::Precondition(_))));
    }

    #[test]
    fn empty_bank_gives_zero_loss() {
        let bank = MemoryBank::new(4, 3).unwrap();
        let a = unit_rows(3, 2, 3);
        assert_eq!(mcl_loss(&a, &a, &bank, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_log_one_plus_filled() {
        let mut bank = MemoryBank::new(8, 2).unwrap();
        let e = array![[1.0, 0.0]];
        for _ in 0..5 {
            bank.push(&e).unwrap();
        }
        let l = mcl_loss(&e, &e, &bank, 0.1).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_infonce() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        let anchor = array![[1.0, 0.0]];
        let pos = array![[0.9, (1.0f64 - 0.81).sqrt()]];
        let neg = array![[0.1, (1.0f64 - 0.01).sqrt()]];
        bank.push(&neg).unwrap();
        let l = mcl_loss(&anchor, &pos, &bank, 1.0).unwrap();
        let stored = f64::from(0.1f32);
        let expected = -(0.9f64.exp() / (0.9f64.exp() + stored.exp())).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3711).abs() < 1e-4);
    }

    #[test]
    fn gradient_reaches_anchors_only() {
        let mut bank = MemoryBank::new(4, 3).unwrap();
        bank.push(&unit_rows(5, 3, 3)).unwrap();
        let tape = Tape::new();
        let a = tape.leaf(unit_rows(6, 2, 3));
        let p = tape.leaf(unit_rows(7, 2, 3));
        let l = mcl_term(&a, &p.value(), &bank, 0.1).unwrap();
        let g = tape.gradients(l);
        assert!(g.get(a).is_some_and(|m| m.iter().any(|v| *v != 0.0)));
        assert!(g.get(p).is_none_or(|m| m.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn loss_drops_as_positive_aligns() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.push(&array![[0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let anchor = array![[1.0, 0.0]];
        let mut prev = f64::INFINITY;
        for angle in [1.2f64, 0.8, 0.4, 0.0] {
            let pos = array![[angle.cos(), angle.sin()]];
            let l = mcl_loss(&anchor, &pos, &bank, 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }
}
