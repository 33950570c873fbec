//! Training: the full objective, AdamW with warmup, momentum and bank
//! maintenance, checkpoints and inference-time embedding.
//!
//! Step order: forward, loss, backward, optimizer step, momentum update,
//! bank push. Parameters, optimizer moments and momentum copies are kept on
//! the `f32` grid after every step, so a checkpoint written to disk resumes
//! bit for bit. Randomness is derived from the seed and the epoch (batch
//! order) or the step (dropout), so no generator state needs saving.

mod checkpoint;
mod config;
mod embed;

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, sum_all, Mat, Tape, Var};
use crate::encoder::{encode_modality, encode_side, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::momentum::{mcl_pair, round_momentum, MemoryBank, MomentumEncoder};
use crate::neighborhood::{assemble_graph, enhance_batch, nsi_var, triplet_between, GraphParams};
use crate::params::{named, param_tree, round_to_f32};
use crate::prototype::{normalize_rows_in_place, pga_from_embeddings, PrototypeBank};
use crate::tensorio::{DatasetManifest, FeatureBundle, FeatureDims};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
pub use config::{Objective, TrainConfig};
pub use embed::{
    embed, embed_bundles, embed_split, evaluate_embeddings, ground_truth, read_embeddings, write_embeddings,
    EmbeddingSet, INDEX_FILE, IMAGE_EMBEDDINGS_FILE, TEXT_EMBEDDINGS_FILE,
};

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    /// `k × d`, rows unit-norm.
    pub prototypes: T,
    pub graph: GraphParams<T>,
}

param_tree!(ModelParams { encoder: tree, prototypes: leaf, graph: tree });

impl ModelParams<Mat> {
    pub fn init(config: &TrainConfig, dims: FeatureDims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::init(&mut rng, dims, config.embed_dim, config.num_codes);
        let prototypes = PrototypeBank::init(&mut rng, config.num_prototypes, config.embed_dim, config.tau)?.prototypes;
        let graph = GraphParams::init(&mut rng, config.embed_dim);
        let mut p = Self {
            encoder,
            prototypes,
            graph,
        };
        p.visit_mut("", &mut |_, m| round_to_f32(m));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        self.map("", &mut |_, m| Mat::zeros(m.dim()))
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map("", &mut |_, m| tape.leaf(m.clone()))
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ModelParams<Mat>,
    pub v: ModelParams<Mat>,
}

impl AdamW {
    pub fn new(params: &ModelParams<Mat>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Update number `t` (1-based).
    pub fn step(&mut self, params: &mut ModelParams<Mat>, grads: &ModelParams<Mat>, lr: f64, weight_decay: f64, t: u64) {
        let grads = named(|f| grads.visit("", f));
        let mut ps = Vec::new();
        params.visit_mut("", &mut |_, x| ps.push(x));
        let mut ms = Vec::new();
        self.m.visit_mut("", &mut |_, x| ms.push(x));
        let mut vs = Vec::new();
        self.v.visit_mut("", &mut |_, x| vs.push(x));
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for (((p, m), v), (_, g)) in ps.into_iter().zip(ms).zip(vs).zip(grads) {
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = f64::from((BETA1 * *m + (1.0 - BETA1) * g) as f32);
                    *v = f64::from((BETA2 * *v + (1.0 - BETA2) * g * g) as f32);
                    let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *p = f64::from((*p - lr * (update + weight_decay * *p)) as f32);
                });
        }
    }
}

/// Complete mutable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub dims: FeatureDims,
    pub params: ModelParams<Mat>,
    pub momentum: MomentumEncoder,
    pub optimizer: AdamW,
    pub bank_image: MemoryBank,
    pub bank_text: MemoryBank,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Planned steps, used by the warmup schedule.
    pub total_steps: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, dims: FeatureDims, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config, dims)?;
        let momentum = MomentumEncoder::new(&params.encoder, config.m_tilde)?;
        Ok(Self {
            config: config.clone(),
            dims,
            optimizer: AdamW::new(&params),
            momentum,
            params,
            bank_image: MemoryBank::new(config.bank_size, config.embed_dim)?,
            bank_text: MemoryBank::new(config.bank_size, config.embed_dim)?,
            step: 0,
            total_steps,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.config.warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate for the next step.
    pub fn learning_rate(&self) -> f64 {
        let warm = self.warmup_steps();
        if warm == 0 || self.step >= warm {
            self.config.learning_rate
        } else {
            self.config.learning_rate * (self.step + 1) as f64 / warm as f64
        }
    }
}

/// Loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// Prototype alignment on base embeddings.
    pub pga: f64,
    pub mcl: f64,
    pub nsi: f64,
    pub nsi_triplet_base: f64,
    pub nsi_triplet_enhanced: f64,
    pub nsi_triplet_image_enhanced_text: f64,
    pub nsi_triplet_enhanced_image_text: f64,
    pub nsi_pga: f64,
    /// Stand-alone triplet loss of the triplet-only objective.
    pub triplet: f64,
}

impl LossComponents {
    pub fn all_finite(&self) -> bool {
        [
            self.total,
            self.pga,
            self.mcl,
            self.nsi,
            self.nsi_triplet_base,
            self.nsi_triplet_enhanced,
            self.nsi_triplet_image_enhanced_text,
            self.nsi_triplet_enhanced_image_text,
            self.nsi_pga,
            self.triplet,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One JSON log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossComponents,
}

const SHUFFLE_DOMAIN: u64 = 0x5348_5546_464c_4531;
const DROPOUT_DOMAIN: u64 = 0x4452_4f50_4f55_5431;

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// Dropout generator for a given step.
pub fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    stream_rng(seed, DROPOUT_DOMAIN, step)
}

/// Sample order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_DOMAIN, epoch));
    order
}

struct Forward<'t> {
    total: Var<'t>,
    losses: LossComponents,
    z_v: Option<Mat>,
    z_t: Option<Mat>,
}

fn check_batch(state: &TrainState, batch: &[&FeatureBundle]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Precondition(format!("a training batch needs at least 2 pairs, got {}", batch.len())));
    }
    if batch.len() > state.config.bank_size {
        return Err(Error::Capacity {
            capacity: state.config.bank_size,
            batch: batch.len(),
        });
    }
    for b in batch {
        crate::encoder::check_bundle_dims(b, &state.params.encoder)?;
    }
    Ok(())
}

fn momentum_features(enc: &EncoderParams<Mat>, batch: &[&FeatureBundle]) -> (Mat, Mat) {
    let d = enc.joint_dim();
    let mut z_v = Mat::zeros((batch.len(), d));
    let mut z_t = Mat::zeros((batch.len(), d));
    for (i, b) in batch.iter().enumerate() {
        z_v.row_mut(i).assign(&encode_modality(&b.regions, &b.global_image, enc, Modality::Image));
        z_t.row_mut(i).assign(&encode_modality(&b.words, &b.global_text, enc, Modality::Text));
    }
    (z_v, z_t)
}

fn forward<'t>(
    tape: &'t Tape,
    state: &TrainState,
    p: &ModelParams<Var<'t>>,
    batch: &[&FeatureBundle],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<'t>> {
    let cfg = &state.config;
    let mut v_rows = Vec::with_capacity(batch.len());
    let mut t_rows = Vec::with_capacity(batch.len());
    let mut regions = Vec::with_capacity(batch.len());
    let mut words = Vec::with_capacity(batch.len());
    for b in batch {
        let img = encode_side(tape, &b.regions, &b.global_image, &p.encoder, Modality::Image);
        let txt = encode_side(tape, &b.words, &b.global_text, &p.encoder, Modality::Text);
        v_rows.push(img.embedding);
        t_rows.push(txt.embedding);
        regions.push(img.locals.value().as_ref().clone());
        words.push(txt.locals.value().as_ref().clone());
    }
    let v = concat_rows(&v_rows);
    let t = concat_rows(&t_rows);

    match cfg.objective {
        Objective::TripletOnly => {
            let tri = triplet_between(&v, &t, cfg.gamma);
            let value = tri.item();
            Ok(Forward {
                total: tri,
                losses: LossComponents {
                    total: value,
                    triplet: value,
                    ..LossComponents::default()
                },
                z_v: None,
                z_t: None,
            })
        }
        Objective::Full => {
            let (z_v, z_t) = momentum_features(&state.momentum.params, batch);
            let pga = pga_from_embeddings(&v, &t, &p.prototypes, cfg.tau, cfg.sinkhorn())?;
            let mcl = mcl_pair(&v, &t, &z_v, &z_t, &state.bank_image, &state.bank_text, cfg.tau)?;
            let graph = assemble_graph(&v.value(), &t.value(), &regions, &words, cfg.epsilon_kernel)?;
            let (v_hat, t_hat) = enhance_batch(&v, &t, &graph, &p.graph, &cfg.graph(), rng)?;
            let nsi = nsi_var(&v, &t, &v_hat, &t_hat, &p.prototypes, cfg.tau, cfg.sinkhorn(), cfg.gamma)?;
            let total = sum_all(&[pga, mcl, nsi.total]);
            let losses = LossComponents {
                total: total.item(),
                pga: pga.item(),
                mcl: mcl.item(),
                nsi: nsi.total.item(),
                nsi_triplet_base: nsi.base.item(),
                nsi_triplet_enhanced: nsi.enhanced.item(),
                nsi_triplet_image_enhanced_text: nsi.image_enhanced_text.item(),
                nsi_triplet_enhanced_image_text: nsi.enhanced_image_text.item(),
                nsi_pga: nsi.pga.item(),
                triplet: 0.0,
            };
            Ok(Forward {
                total,
                losses,
                z_v: Some(z_v),
                z_t: Some(z_t),
            })
        }
    }
}

/// Evaluates the objective without changing the state. Dropout uses the
/// stream of `dropout_step`; `None` disables dropout.
pub fn evaluate_objective(state: &TrainState, batch: &[&FeatureBundle], dropout_step: Option<u64>) -> Result<LossComponents> {
    check_batch(state, batch)?;
    let tape = Tape::new();
    let bound = state.params.bind(&tape);
    let mut rng = dropout_step.map(|s| dropout_rng(state.config.seed, s));
    Ok(forward(&tape, state, &bound, batch, rng.as_mut())?.losses)
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[&FeatureBundle]) -> Result<StepReport> {
    check_batch(state, batch)?;
    let tape = Tape::new();
    let bound = state.params.bind(&tape);
    let mut rng = dropout_rng(state.config.seed, state.step);
    let fwd = forward(&tape, state, &bound, batch, Some(&mut rng))?;
    if !fwd.losses.all_finite() {
        return Err(Error::Training {
            step: state.step,
            components: serde_json::to_string(&fwd.losses).expect("losses serialize"),
        });
    }
    let grads = tape.gradients(fwd.total);
    let grads = bound.map("", &mut |_, v| grads.get_or_zero(*v));
    let lr = state.learning_rate();
    let t = state.step + 1;
    state
        .optimizer
        .step(&mut state.params, &grads, lr, state.config.weight_decay, t);
    normalize_rows_in_place(&mut state.params.prototypes);
    round_to_f32(&mut state.params.prototypes);
    if let (Some(z_v), Some(z_t)) = (fwd.z_v, fwd.z_t) {
        state.momentum.update(&state.params.encoder)?;
        round_momentum(&mut state.momentum);
        state.bank_image.push(&z_v)?;
        state.bank_text.push(&z_t)?;
    }
    let report = StepReport {
        step: state.step,
        epoch: state.step / steps_per_epoch_hint(state),
        lr,
        losses: fwd.losses,
    };
    state.step = t;
    Ok(report)
}

fn steps_per_epoch_hint(state: &TrainState) -> u64 {
    let epochs = state.config.epochs as u64;
    if epochs == 0 || state.total_steps == 0 {
        u64::MAX
    } else {
        (state.total_steps / epochs).max(1)
    }
}

/// Bundles of one split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: &str) -> Result<Vec<FeatureBundle>> {
    manifest
        .pairs_in_split(split)
        .map(|p| manifest.read_bundle(&p.pair_id))
        .collect()
}

pub fn steps_per_epoch(num_pairs: usize, batch_size: usize) -> usize {
    num_pairs / batch_size
}

/// Where and how [`train`] persists its progress.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Receives `train_log.jsonl` and the `checkpoint/` directory.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains on the manifest's `train` split.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    opts: TrainOptions<'_>,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<TrainState> {
    config.validate()?;
    let bundles = load_split(manifest, "train")?;
    if bundles.len() < config.batch_size {
        return Err(Error::Dataset(format!(
            "{} training pairs is fewer than batch size {}",
            bundles.len(),
            config.batch_size
        )));
    }
    let spe = steps_per_epoch(bundles.len(), config.batch_size) as u64;
    let total = spe * config.epochs as u64;
    let mut state = match opts.resume {
        Some(dir) => {
            let mut s = load_checkpoint(dir)?;
            let mut expected = s.config.clone();
            expected.epochs = config.epochs;
            expected.checkpoint_every = config.checkpoint_every;
            if expected != *config {
                return Err(Error::Congruence(format!(
                    "config differs from the checkpoint in {} beyond epochs and checkpoint_every",
                    dir.display()
                )));
            }
            s.config = config.clone();
            s.total_steps = total;
            s
        }
        None => TrainState::new(config, manifest.dims, total)?,
    };
    if state.dims != manifest.dims {
        return Err(Error::Congruence(format!(
            "checkpoint feature dims {:?} differ from manifest {:?}",
            state.dims, manifest.dims
        )));
    }

    let mut log = match opts.out_dir {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join(LOG_FILE);
            let file = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            };
            Some((file.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while state.step < total {
        let epoch = state.step / spe;
        let pos = (state.step % spe) as usize;
        if epoch != order_epoch {
            order = epoch_order(bundles.len(), config.seed, epoch);
            order_epoch = epoch;
        }
        let b = config.batch_size;
        let batch: Vec<&FeatureBundle> = order[pos * b..(pos + 1) * b].iter().map(|&i| &bundles[i]).collect();
        let mut report = train_step(&mut state, &batch)?;
        report.epoch = epoch;
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&report);
        let epoch_done = state.step % spe == 0;
        if let (true, Some(out)) = (epoch_done && config.checkpoint_every > 0, opts.out_dir) {
            if (epoch + 1).is_multiple_of(config.checkpoint_every as u64) {
                save_checkpoint(&state, &out.join(CHECKPOINT_DIR))?;
            }
        }
    }
    if let Some(out) = opts.out_dir {
        save_checkpoint(&state, &out.join(CHECKPOINT_DIR))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{generate_synthetic, SynthSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            bank_size: 8,
            embed_dim: 8,
            num_codes: 2,
            num_prototypes: 4,
            epochs: 2,
            ..TrainConfig::synthetic()
        }
    }

    fn tiny_data(dir: &Path) -> DatasetManifest {
        let spec = SynthSpec {
            num_concepts: 2,
            pairs_per_concept: 4,
            heldout_per_concept: 1,
            d_v: 6,
            d_w: 5,
            d_g: 4,
            n_r: 3,
            n_t: 2,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, dir).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        let dims = FeatureDims { d_v: 3, d_w: 3, d_g: 3 };
        let mut s = TrainState::new(&tiny_config(), dims, 100).unwrap();
        assert_eq!(s.warmup_steps(), 5);
        assert!((s.learning_rate() - 1e-4).abs() < 1e-18);
        s.step = 5;
        assert_eq!(s.learning_rate(), 5e-4);
    }

    #[test]
    fn components_sum_to_total() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let bundles = load_split(&m, "train").unwrap();
        let batch: Vec<&FeatureBundle> = bundles.iter().take(4).collect();
        let mut s = TrainState::new(&tiny_config(), m.dims, 4).unwrap();
        for _ in 0..3 {
            let r = train_step(&mut s, &batch).unwrap().losses;
            let sum = r.pga + r.mcl + r.nsi + r.triplet;
            assert!((r.total - sum).abs() < 1e-6);
            let nsi = r.nsi_triplet_base
                + r.nsi_triplet_enhanced
                + r.nsi_triplet_image_enhanced_text
                + r.nsi_triplet_enhanced_image_text
                + r.nsi_pga;
            assert!((r.nsi - nsi).abs() < 1e-6);
        }
        assert_eq!(s.bank_image.filled(), 8);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn single_pair_batch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let bundles = load_split(&m, "train").unwrap();
        let mut s = TrainState::new(&tiny_config(), m.dims, 4).unwrap();
        assert!(matches!(train_step(&mut s, &[&bundles[0]]), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let config = TrainConfig { epochs: 0, ..tiny_config() };
        let s = train(&config, &m, TrainOptions::default(), &mut |_| {}).unwrap();
        assert_eq!(s, TrainState::new(&config, m.dims, 0).unwrap());
    }
}
