//! Training loops and the evaluation protocols: contrastive pretraining,
//! linear evaluation on frozen representations, full finetuning, the
//! cosine-similarity distribution analysis and the loss-by-seed comparison
//! matrix.
//!
//! One run is single-threaded and bit-reproducible from its [`RunConfig`];
//! [`run_matrix`] may execute independent cells in parallel, each owning its
//! rng streams and encoder state.

use crate::augment::{self, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::losses::{self, EmbeddingBatch, Temperature};
use crate::model::{self, EncoderParams, LinearHead, EMBED_DIM, REPR_DIM};
use crate::numerics::{tensor, Tape, Tensor, Var};
use crate::opt::Adam;
use crate::rng::{self, Domain};
use crate::synthgen::{self, Modality, SensorWindow, WorldSpec};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

/// Shuffle-stream payload bases keeping the pretrain, head-training and
/// finetune epoch streams disjoint.
const HEAD_SHUFFLE_BASE: u64 = 1 << 32;
const FINETUNE_SHUFFLE_BASE: u64 = 2 << 32;
/// Init-stream payloads: encoders use the modality code, the head uses this.
const HEAD_INIT_PAYLOAD: u64 = 100;

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nce,
    Sicl,
    Supcon,
    SiSupcon,
    Cmc,
    SiCmc,
}

impl LossKind {
    pub fn all() -> [LossKind; 6] {
        [
            LossKind::Nce,
            LossKind::Sicl,
            LossKind::Supcon,
            LossKind::SiSupcon,
            LossKind::Cmc,
            LossKind::SiCmc,
        ]
    }

    pub fn is_multimodal(self) -> bool {
        matches!(self, LossKind::Cmc | LossKind::SiCmc)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, LossKind::Supcon | LossKind::SiSupcon)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LossKind::Nce => "nce",
            LossKind::Sicl => "sicl",
            LossKind::Supcon => "supcon",
            LossKind::SiSupcon => "si_supcon",
            LossKind::Cmc => "cmc",
            LossKind::SiCmc => "si_cmc",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nce" => Ok(LossKind::Nce),
            "sicl" => Ok(LossKind::Sicl),
            "supcon" => Ok(LossKind::Supcon),
            "si_supcon" => Ok(LossKind::SiSupcon),
            "cmc" => Ok(LossKind::Cmc),
            "si_cmc" => Ok(LossKind::SiCmc),
            _ => Err(Error::contract(format!("unknown loss kind {s:?}"))),
        }
    }
}

/// Cross-subject split by subject id.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_subjects: Vec<u16>,
    pub test_subjects: Vec<u16>,
}

impl SplitSpec {
    pub fn train_set(&self) -> BTreeSet<u16> {
        self.train_subjects.iter().copied().collect()
    }

    pub fn test_set(&self) -> BTreeSet<u16> {
        self.test_subjects.iter().copied().collect()
    }
}

/// One experiment: world, augmentation policy, loss, optimizer settings and
/// split. Defaults are the desk-scale settings; paper-scale epoch counts
/// (300/100) remain available through the config file.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub loss: LossKind,
    pub tau: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub linear_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Modality encoded by unimodal losses.
    pub modality: Modality,
    /// Encoder learning rate during finetuning; `None` uses `lr`.
    pub finetune_encoder_lr: Option<f64>,
    pub world: WorldSpec,
    pub augmentation: AugmentationPolicy,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss: LossKind::Nce,
            tau: 0.1,
            lr: 0.001,
            pretrain_epochs: 60,
            linear_epochs: 30,
            batch_size: 64,
            seed: 0,
            modality: Modality::Inertial,
            finetune_encoder_lr: None,
            world: WorldSpec::default(),
            augmentation: AugmentationPolicy::default(),
            split: SplitSpec {
                train_subjects: (0..8).collect(),
                test_subjects: (8..12).collect(),
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.augmentation.validate()?;
        Temperature::new(self.tau)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract("config: lr must be finite and >= 0"));
        }
        if self.pretrain_epochs == 0 || self.linear_epochs == 0 {
            return Err(Error::contract("config: epoch counts must be positive"));
        }
        if self.batch_size < 4 {
            return Err(Error::contract("config: batch_size must be >= 4"));
        }
        if self.split.train_subjects.is_empty() || self.split.test_subjects.is_empty() {
            return Err(Error::contract("config: both subject sets must be nonempty"));
        }
        let train = self.split.train_set();
        let test = self.split.test_set();
        if train.intersection(&test).next().is_some() {
            return Err(Error::contract("config: train and test subjects overlap"));
        }
        for &s in train.union(&test) {
            if s >= self.world.num_subjects {
                return Err(Error::contract(format!(
                    "config: subject {s} outside world of {} subjects",
                    self.world.num_subjects
                )));
            }
        }
        Ok(())
    }

    fn temperature(&self) -> Temperature {
        Temperature::new(self.tau).expect("validated")
    }

    /// Seed of the augmentation stream; combines the run seed with the
    /// policy's own seed so distinct runs draw distinct augmentations.
    fn augment_seed(&self) -> u64 {
        self.seed.wrapping_add(self.augmentation.rng_seed)
    }
}

/// The encoders produced by one pretraining run: one per modality, primary
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub entries: Vec<(Modality, EncoderParams)>,
}

impl EncoderStack {
    pub fn primary(&self) -> &EncoderParams {
        &self.entries[0].1
    }

    pub fn primary_modality(&self) -> Modality {
        self.entries[0].0
    }

    /// Total representation width: 64 per modality.
    pub fn repr_dim(&self) -> usize {
        self.entries.len() * REPR_DIM
    }

    /// Named tensors with `modality.` prefixes for checkpointing.
    pub fn checkpoint_entries(&self) -> Vec<(String, &Tensor)> {
        self.entries
            .iter()
            .flat_map(|(m, p)| {
                p.named()
                    .into_iter()
                    .map(move |(name, t)| (format!("{m}.{name}"), t))
            })
            .collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.checkpoint_entries();
        let mut buf = Vec::new();
        model::write_checkpoint(&mut buf, &entries)?;
        Ok(buf)
    }

    pub fn from_checkpoint(entries: &[(String, Tensor)]) -> Result<Self> {
        let mut stack = Vec::new();
        for modality in [Modality::Inertial, Modality::Secondary] {
            let prefix = format!("{modality}.");
            let own: Vec<(String, Tensor)> = entries
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(n, t)| (n[prefix.len()..].to_string(), t.clone()))
                .collect();
            if !own.is_empty() {
                stack.push((modality, EncoderParams::from_named(&own)?));
            }
        }
        if stack.is_empty() {
            return Err(Error::format("checkpoint holds no encoder tensors"));
        }
        Ok(EncoderStack { entries: stack })
    }
}

/// Result of [`pretrain`]: encoders, the loss-vs-epoch curve and the subject
/// audit of every window consumed.
pub struct PretrainOutput {
    pub encoders: EncoderStack,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub consumed_subjects: BTreeSet<u16>,
}

fn stack_windows(windows: &[&SensorWindow]) -> Result<Tensor> {
    let (c, t) = windows[0].values.dims2()?;
    let mut data = Vec::with_capacity(windows.len() * c * t);
    for w in windows {
        if w.values.shape() != windows[0].values.shape() {
            return Err(Error::shape("batch windows disagree on shape".to_string()));
        }
        data.extend_from_slice(w.values.data());
    }
    Tensor::from_vec(vec![windows.len(), c, t], data)
}

fn shuffled_indices(n: usize, seed: u64, payload: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Batch, payload));
    order
}

/// Injects an analytic cotangent: records `sum(z * grad)` so that
/// `backward` propagates `grad` into the subgraph below `z`.
fn inject_cotangent(tape: &mut Tape, z: Var, grad: Tensor) -> Result<Var> {
    let g = tape.input(grad);
    let prod = tape.mul(z, g)?;
    Ok(tape.sum_all(prod))
}

fn divergence_report(step: usize, value: f64, z: &Tensor) -> Error {
    let (lo, hi) = z
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Error::contract(format!(
        "pretraining diverged at step {step}: loss {value}; embeddings in [{lo:.4}, {hi:.4}]"
    ))
}

/// Contrastive pretraining on the train-subject windows only.
pub fn pretrain(config: &RunConfig, windows: &[SensorWindow]) -> Result<PretrainOutput> {
    config.validate()?;
    let (train, _) = synthgen::split(windows, &config.split.train_set(), &config.split.test_set())?;
    let sessions = synthgen::pair_sessions(&train)?;
    if sessions.len() < config.batch_size {
        return Err(Error::contract(format!(
            "pretrain: {} train sessions cannot fill one batch of {}",
            sessions.len(),
            config.batch_size
        )));
    }
    let consumed_subjects: BTreeSet<u16> = train.iter().map(|w| w.subject_id).collect();

    let modalities: Vec<Modality> = if config.loss.is_multimodal() {
        vec![Modality::Inertial, Modality::Secondary]
    } else {
        vec![config.modality]
    };
    let mut encoders: Vec<(Modality, EncoderParams)> = modalities
        .iter()
        .map(|&m| {
            let mut init_rng = rng::stream(config.seed, Domain::Init, m.code() as u64);
            (m, EncoderParams::init(m.channels(), &mut init_rng))
        })
        .collect();

    let mut adam = Adam::new(config.lr);
    let tau = config.temperature();
    let mut loss_curve = Vec::with_capacity(config.pretrain_epochs);
    let mut step = 0usize;

    for epoch in 0..config.pretrain_epochs {
        let order = shuffled_indices(sessions.len(), config.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks_exact(config.batch_size) {
            step += 1;
            let mut aug_rng = rng::stream(config.augment_seed(), Domain::Augment, step as u64);
            let value = if config.loss.is_multimodal() {
                train_step_multimodal(
                    config,
                    &train,
                    &sessions,
                    chunk,
                    &mut encoders,
                    &mut adam,
                    tau,
                    &mut aug_rng,
                    step,
                )?
            } else {
                train_step_unimodal(
                    config,
                    &train,
                    &sessions,
                    chunk,
                    &mut encoders[0].1,
                    &mut adam,
                    tau,
                    &mut aug_rng,
                    step,
                )?
            };
            epoch_loss += value;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
        log::debug!(
            "epoch {epoch}: mean {} loss {}",
            config.loss,
            loss_curve[epoch]
        );
    }

    Ok(PretrainOutput {
        encoders: EncoderStack { entries: encoders },
        loss_curve,
        consumed_subjects,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step_unimodal(
    config: &RunConfig,
    train: &[SensorWindow],
    sessions: &[(usize, usize)],
    chunk: &[usize],
    encoder: &mut EncoderParams,
    adam: &mut Adam,
    tau: Temperature,
    aug_rng: &mut impl rand::Rng,
    step: usize,
) -> Result<f64> {
    let b = chunk.len();
    // two augmented views per session: rows [0,b) are view one, [b,2b) view two
    let mut views = Vec::with_capacity(2 * b);
    let mut subjects = Vec::with_capacity(2 * b);
    let mut labels = Vec::with_capacity(2 * b);
    for _pass in 0..2 {
        for &s in chunk {
            let (inertial, secondary) = sessions[s];
            let idx = match config.modality {
                Modality::Inertial => inertial,
                Modality::Secondary => secondary,
            };
            let source = &train[idx];
            let view = augment::apply(&config.augmentation, source, aug_rng)?;
            subjects.push(source.subject_id);
            labels.push(source.activity_id);
            views.push(view);
        }
    }
    let pairing: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();

    let refs: Vec<&SensorWindow> = views.iter().collect();
    let x = stack_windows(&refs)?;
    let mut tape = Tape::new();
    let x = tape.input(x);
    let fwd = encoder.forward(&mut tape, x)?;
    let z = tape.value(fwd.z).clone();

    let batch = EmbeddingBatch::new_unchecked(z.clone(), subjects, Some(labels), Some(pairing));
    let out = match config.loss {
        LossKind::Nce => losses::nce_loss(&batch, tau)?,
        LossKind::Sicl => losses::sicl_loss(&batch, tau)?,
        LossKind::Supcon => losses::supcon_loss(&batch, tau)?,
        LossKind::SiSupcon => losses::si_supcon_loss(&batch, tau)?,
        _ => unreachable!("multimodal losses take the other path"),
    };
    if !out.value.is_finite() {
        return Err(divergence_report(step, out.value, &z));
    }
    let root = inject_cotangent(&mut tape, fwd.z, out.grad_z)?;
    let mut grads = tape.backward(root)?;
    apply_encoder_update(encoder, &fwd.params, &mut grads, config.modality, adam)?;
    Ok(out.value)
}

#[allow(clippy::too_many_arguments)]
fn train_step_multimodal(
    config: &RunConfig,
    train: &[SensorWindow],
    sessions: &[(usize, usize)],
    chunk: &[usize],
    encoders: &mut [(Modality, EncoderParams)],
    adam: &mut Adam,
    tau: Temperature,
    aug_rng: &mut impl rand::Rng,
    step: usize,
) -> Result<f64> {
    let mut views_k = Vec::with_capacity(chunk.len());
    let mut views_m = Vec::with_capacity(chunk.len());
    let mut subjects = Vec::with_capacity(chunk.len());
    for &s in chunk {
        let (inertial, secondary) = sessions[s];
        views_k.push(augment::apply(&config.augmentation, &train[inertial], aug_rng)?);
        views_m.push(augment::apply(&config.augmentation, &train[secondary], aug_rng)?);
        subjects.push(train[inertial].subject_id);
    }
    let refs_k: Vec<&SensorWindow> = views_k.iter().collect();
    let refs_m: Vec<&SensorWindow> = views_m.iter().collect();

    let mut tape = Tape::new();
    let xk = stack_windows(&refs_k)?;
    let xm = stack_windows(&refs_m)?;
    let xk = tape.input(xk);
    let xm = tape.input(xm);
    let fwd_k = encoders[0].1.forward(&mut tape, xk)?;
    let fwd_m = encoders[1].1.forward(&mut tape, xm)?;
    let zk = tape.value(fwd_k.z).clone();
    let zm = tape.value(fwd_m.z).clone();

    let bk = EmbeddingBatch::new_unchecked(zk.clone(), subjects.clone(), None, None);
    let bm = EmbeddingBatch::new_unchecked(zm, subjects, None, None);
    let out = match config.loss {
        LossKind::Cmc => losses::cmc_loss(&bk, &bm, tau)?,
        LossKind::SiCmc => losses::si_cmc_loss(&bk, &bm, tau)?,
        _ => unreachable!("unimodal losses take the other path"),
    };
    if !out.value.is_finite() {
        return Err(divergence_report(step, out.value, &zk));
    }
    let root_k = inject_cotangent(&mut tape, fwd_k.z, out.grad_k)?;
    let root_m = inject_cotangent(&mut tape, fwd_m.z, out.grad_m)?;
    let root = tape.add(root_k, root_m)?;
    let mut grads = tape.backward(root)?;
    let (first, second) = encoders.split_at_mut(1);
    apply_encoder_update(&mut first[0].1, &fwd_k.params, &mut grads, first[0].0, adam)?;
    apply_encoder_update(&mut second[0].1, &fwd_m.params, &mut grads, second[0].0, adam)?;
    Ok(out.value)
}

/// Adam update for every parameter the loss actually reached; parameters off
/// the gradient path (the projector during finetuning) are left untouched.
fn apply_encoder_update(
    encoder: &mut EncoderParams,
    param_vars: &[(&'static str, Var)],
    grads: &mut crate::numerics::Gradients,
    modality: Modality,
    adam: &mut Adam,
) -> Result<()> {
    let keys: Vec<String> = param_vars
        .iter()
        .map(|(name, _)| format!("{modality}.{name}"))
        .collect();
    let grad_tensors: Vec<Option<Tensor>> =
        param_vars.iter().map(|(_, var)| grads.take(*var)).collect();
    let mut updates: Vec<(&str, &mut Tensor, &Tensor)> = Vec::with_capacity(keys.len());
    for ((key, grad), (_, param)) in keys
        .iter()
        .zip(&grad_tensors)
        .zip(encoder.named_mut().into_iter())
    {
        if let Some(grad) = grad {
            updates.push((key.as_str(), param, grad));
        }
    }
    adam.step(&mut updates)
}

/// Representations of a window set under an encoder stack: one row per
/// unimodal window, or per session with both modalities concatenated.
pub struct FeatureSet {
    /// `[N, repr_dim]` pooled representations `h`.
    pub h: Tensor,
    pub labels: Vec<u16>,
    pub subjects: Vec<u16>,
}

/// Chunked batched encoding of many windows.
fn encode_many(params: &EncoderParams, windows: &[&SensorWindow]) -> Result<(Tensor, Tensor)> {
    let n = windows.len();
    let mut h = Tensor::zeros(&[n, REPR_DIM]);
    let mut z = Tensor::zeros(&[n, EMBED_DIM]);
    for (chunk_idx, chunk) in windows.chunks(256).enumerate() {
        let x = stack_windows(chunk)?;
        let mut tape = Tape::new();
        let x = tape.input(x);
        let fwd = params.forward(&mut tape, x)?;
        let base = chunk_idx * 256;
        let hc = tape.value(fwd.h);
        let zc = tape.value(fwd.z);
        h.data_mut()[base * REPR_DIM..base * REPR_DIM + hc.len()].copy_from_slice(hc.data());
        z.data_mut()[base * EMBED_DIM..base * EMBED_DIM + zc.len()].copy_from_slice(zc.data());
    }
    Ok((h, z))
}

/// Pooled representations for linear evaluation. For a dual stack the two
/// modality representations of each session are concatenated.
pub fn extract_features(stack: &EncoderStack, windows: &[SensorWindow]) -> Result<FeatureSet> {
    if stack.entries.len() == 1 {
        let modality = stack.primary_modality();
        let of_modality: Vec<&SensorWindow> =
            windows.iter().filter(|w| w.modality == modality).collect();
        if of_modality.is_empty() {
            return Err(Error::contract(format!("no {modality} windows to evaluate")));
        }
        let (h, _) = encode_many(stack.primary(), &of_modality)?;
        Ok(FeatureSet {
            h,
            labels: of_modality.iter().map(|w| w.activity_id).collect(),
            subjects: of_modality.iter().map(|w| w.subject_id).collect(),
        })
    } else {
        let sessions = synthgen::pair_sessions(windows)?;
        let mut parts = Vec::new();
        for (modality, params) in &stack.entries {
            let of_modality: Vec<&SensorWindow> = sessions
                .iter()
                .map(|&(i, s)| {
                    let idx = if *modality == Modality::Inertial { i } else { s };
                    &windows[idx]
                })
                .collect();
            let (h, _) = encode_many(params, &of_modality)?;
            parts.push(h);
        }
        let h = tensor::concat_cols(&parts[0], &parts[1])?;
        Ok(FeatureSet {
            h,
            labels: sessions.iter().map(|&(i, _)| windows[i].activity_id).collect(),
            subjects: sessions.iter().map(|&(i, _)| windows[i].subject_id).collect(),
        })
    }
}

/// Unit-norm projection embeddings of the primary modality's windows, with
/// their subject ids.
pub fn primary_embeddings(
    stack: &EncoderStack,
    windows: &[SensorWindow],
) -> Result<(Tensor, Vec<u16>)> {
    let modality = stack.primary_modality();
    let of_modality: Vec<&SensorWindow> =
        windows.iter().filter(|w| w.modality == modality).collect();
    if of_modality.is_empty() {
        return Err(Error::contract(format!("no {modality} windows")));
    }
    let (_, z) = encode_many(stack.primary(), &of_modality)?;
    Ok((z, of_modality.iter().map(|w| w.subject_id).collect()))
}

/// Trains a softmax linear probe on fixed features with Adam.
pub fn train_linear_probe(
    features: &Tensor,
    labels: &[u16],
    num_classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LinearHead> {
    let (n, dim) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::contract("probe: labels misaligned with features"));
    }
    let mut head_rng = rng::stream(seed, Domain::Init, HEAD_INIT_PAYLOAD);
    let mut head = LinearHead::init(num_classes, dim, &mut head_rng);
    let mut adam = Adam::new(lr);
    for epoch in 0..epochs {
        let order = shuffled_indices(n, seed, HEAD_SHUFFLE_BASE + epoch as u64);
        for chunk in order.chunks(batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(features.row(i));
                y.push(labels[i] as usize);
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(vec![chunk.len(), dim], x)?);
            let fwd = head.forward(&mut tape, x)?;
            let ce = tape.cross_entropy(fwd.logits, &y)?;
            let mut grads = tape.backward(ce)?;
            let gw = grads.take(fwd.weight).expect("head weight gradient");
            let gb = grads.take(fwd.bias).expect("head bias gradient");
            adam.step(&mut [
                ("head_w", &mut head.weight, &gw),
                ("head_b", &mut head.bias, &gb),
            ])?;
        }
    }
    Ok(head)
}

/// Top-1 predictions, ties resolved to the lowest class index.
pub fn predict(head: &LinearHead, features: &Tensor) -> Result<Vec<u16>> {
    let logits = head.classify(features)?;
    let (n, k) = logits.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect())
}

/// Plain accuracy of a probe on a feature set.
pub fn probe_accuracy(head: &LinearHead, features: &Tensor, labels: &[u16]) -> Result<f64> {
    let preds = predict(head, features)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Class-wise top-1 accuracies and their macro mean over classes present in
/// the label set; absent classes are excluded with a warning.
fn class_wise_accuracy(
    preds: &[u16],
    labels: &[u16],
    num_classes: u16,
) -> (BTreeMap<u16, f64>, f64) {
    let mut correct = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        *totals.entry(l).or_insert(0usize) += 1;
        if p == l {
            *correct.entry(l).or_insert(0usize) += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    for class in 0..num_classes {
        match totals.get(&class) {
            Some(&n) => {
                let c = correct.get(&class).copied().unwrap_or(0);
                per_class.insert(class, c as f64 / n as f64);
            }
            None => {
                log::warn!("class {class} absent from the evaluation set; excluded from the mean");
            }
        }
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    (per_class, mean)
}

/// Per-run evaluation summary.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_accuracy: BTreeMap<u16, f64>,
    pub mean_class_accuracy: f64,
    pub sim_stats: SimStats,
    pub config: RunConfig,
    pub wall_time_secs: f64,
}

impl EvalReport {
    /// Equality of everything except the wall time.
    pub fn same_numbers(&self, other: &EvalReport) -> bool {
        self.per_class_accuracy == other.per_class_accuracy
            && self.mean_class_accuracy == other.mean_class_accuracy
            && self.sim_stats == other.sim_stats
            && self.config == other.config
    }
}

/// Linear evaluation: the encoder stays frozen, a linear head is trained on
/// train-subject representations and scored on held-out-subject windows.
pub fn linear_eval(
    stack: &EncoderStack,
    config: &RunConfig,
    windows: &[SensorWindow],
) -> Result<EvalReport> {
    Ok(linear_eval_audited(stack, config, windows)?.0)
}

/// [`linear_eval`] plus the subject audit of windows consumed for training.
pub fn linear_eval_audited(
    stack: &EncoderStack,
    config: &RunConfig,
    windows: &[SensorWindow],
) -> Result<(EvalReport, BTreeSet<u16>)> {
    config.validate()?;
    let started = Instant::now();
    let (train, test) =
        synthgen::split(windows, &config.split.train_set(), &config.split.test_set())?;
    let train_features = extract_features(stack, &train)?;
    let consumed: BTreeSet<u16> = train_features.subjects.iter().copied().collect();
    let head = train_linear_probe(
        &train_features.h,
        &train_features.labels,
        config.world.num_activities as usize,
        config.linear_epochs,
        config.lr,
        config.batch_size,
        config.seed,
    )?;
    let test_features = extract_features(stack, &test)?;
    let preds = predict(&head, &test_features.h)?;
    let (per_class, mean) =
        class_wise_accuracy(&preds, &test_features.labels, config.world.num_activities);
    let analysis = analyze_similarities(stack, &test, config.seed)?;
    let report = EvalReport {
        per_class_accuracy: per_class,
        mean_class_accuracy: mean,
        sim_stats: analysis.stats,
        config: config.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, consumed))
}

/// Finetuning: encoder(s) and head train jointly with cross-entropy on
/// train-subject windows; `init` of `None` starts from random weights.
pub fn finetune(
    init: Option<&EncoderStack>,
    config: &RunConfig,
    windows: &[SensorWindow],
) -> Result<EvalReport> {
    Ok(finetune_audited(init, config, windows)?.0)
}

pub fn finetune_audited(
    init: Option<&EncoderStack>,
    config: &RunConfig,
    windows: &[SensorWindow],
) -> Result<(EvalReport, BTreeSet<u16>)> {
    config.validate()?;
    let started = Instant::now();
    let (train, test) =
        synthgen::split(windows, &config.split.train_set(), &config.split.test_set())?;

    let mut stack = match init {
        Some(s) => s.clone(),
        None => {
            let modalities: Vec<Modality> = if config.loss.is_multimodal() {
                vec![Modality::Inertial, Modality::Secondary]
            } else {
                vec![config.modality]
            };
            EncoderStack {
                entries: modalities
                    .iter()
                    .map(|&m| {
                        let mut r = rng::stream(config.seed, Domain::Init, m.code() as u64);
                        (m, EncoderParams::init(m.channels(), &mut r))
                    })
                    .collect(),
            }
        }
    };
    let mut head_rng = rng::stream(config.seed, Domain::Init, HEAD_INIT_PAYLOAD);
    let mut head = LinearHead::init(
        config.world.num_activities as usize,
        stack.repr_dim(),
        &mut head_rng,
    );

    let dual = stack.entries.len() == 2;
    let items: Vec<Vec<usize>> = if dual {
        synthgen::pair_sessions(&train)?
            .iter()
            .map(|&(i, s)| vec![i, s])
            .collect()
    } else {
        train
            .iter()
            .enumerate()
            .filter(|(_, w)| w.modality == stack.primary_modality())
            .map(|(i, _)| vec![i])
            .collect()
    };
    if items.is_empty() {
        return Err(Error::contract("finetune: no train windows"));
    }
    let consumed: BTreeSet<u16> = items.iter().map(|idxs| train[idxs[0]].subject_id).collect();

    let mut enc_adam = Adam::new(config.finetune_encoder_lr.unwrap_or(config.lr));
    let mut head_adam = Adam::new(config.lr);
    for epoch in 0..config.linear_epochs {
        let order = shuffled_indices(
            items.len(),
            config.seed,
            FINETUNE_SHUFFLE_BASE + epoch as u64,
        );
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| train[items[i][0]].activity_id as usize)
                .collect();
            let mut tape = Tape::new();
            let mut fwds = Vec::new();
            let mut h_vars = Vec::new();
            for (slot, (_, params)) in stack.entries.iter().enumerate() {
                let refs: Vec<&SensorWindow> =
                    chunk.iter().map(|&i| &train[items[i][slot]]).collect();
                let x = stack_windows(&refs)?;
                let x = tape.input(x);
                let fwd = params.forward(&mut tape, x)?;
                h_vars.push(fwd.h);
                fwds.push(fwd);
            }
            let h = if dual {
                tape.concat_cols(h_vars[0], h_vars[1])?
            } else {
                h_vars[0]
            };
            let head_fwd = head.forward(&mut tape, h)?;
            let ce = tape.cross_entropy(head_fwd.logits, &labels)?;
            let mut grads = tape.backward(ce)?;
            for (fwd, (modality, params)) in fwds.iter().zip(stack.entries.iter_mut()) {
                apply_encoder_update(params, &fwd.params, &mut grads, *modality, &mut enc_adam)?;
            }
            let gw = grads.take(head_fwd.weight).expect("head weight gradient");
            let gb = grads.take(head_fwd.bias).expect("head bias gradient");
            head_adam.step(&mut [
                ("head_w", &mut head.weight, &gw),
                ("head_b", &mut head.bias, &gb),
            ])?;
        }
    }

    let test_features = extract_features(&stack, &test)?;
    let preds = predict(&head, &test_features.h)?;
    let (per_class, mean) =
        class_wise_accuracy(&preds, &test_features.labels, config.world.num_activities);
    let analysis = analyze_similarities(&stack, &test, config.seed)?;
    let report = EvalReport {
        per_class_accuracy: per_class,
        mean_class_accuracy: mean,
        sim_stats: analysis.stats,
        config: config.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, consumed))
}

/// Summary statistics of the two cosine-similarity populations.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SimStats {
    pub mean_all: f64,
    pub std_all: f64,
    pub mean_intra_subject: f64,
    pub std_intra_subject: f64,
    /// `|mean_all - mean_intra_subject|`; small means subject identity barely
    /// shifts the similarity distribution.
    pub gap: f64,
}

/// Fixed-range histogram over [-1, 1].
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 50;

impl Histogram {
    fn new() -> Self {
        Histogram {
            lo: -1.0,
            hi: 1.0,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    fn add(&mut self, v: f64) {
        let unit = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        let bin = ((unit * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        self.counts[bin] += 1;
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=HISTOGRAM_BINS)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / HISTOGRAM_BINS as f64)
            .collect()
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SimAnalysis {
    pub stats: SimStats,
    pub hist_all: Histogram,
    pub hist_intra: Histogram,
    pub pairs_all: usize,
    pub pairs_intra: usize,
}

const MAX_PAIRS: usize = 1_000_000;

/// Cosine-similarity populations over the `z` embeddings of an evaluation
/// set: all pairs versus intra-subject pairs, subsampled to at most 10^6
/// pairs with a seeded stream. For a dual stack the primary (inertial)
/// encoder's embeddings are analyzed.
pub fn analyze_similarities(
    stack: &EncoderStack,
    windows: &[SensorWindow],
    seed: u64,
) -> Result<SimAnalysis> {
    let modality = stack.primary_modality();
    let of_modality: Vec<&SensorWindow> =
        windows.iter().filter(|w| w.modality == modality).collect();
    let n = of_modality.len();
    if n < 2 {
        return Err(Error::contract(
            "similarity analysis needs at least two windows",
        ));
    }
    let (_, z) = encode_many(stack.primary(), &of_modality)?;
    let subjects: Vec<u16> = of_modality.iter().map(|w| w.subject_id).collect();

    let total_pairs = n * (n - 1) / 2;
    let mut rng = rng::stream(seed, Domain::Analyze, 0);
    let mut all = Population::new();
    let mut intra = Population::new();
    let record = |i: usize, j: usize, all: &mut Population, intra: &mut Population| {
        let sim: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
        all.add(sim);
        if subjects[i] == subjects[j] {
            intra.add(sim);
        }
    };
    if total_pairs <= MAX_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                record(i, j, &mut all, &mut intra);
            }
        }
    } else {
        use rand::Rng;
        let mut drawn = 0usize;
        while drawn < MAX_PAIRS {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i == j {
                continue;
            }
            record(i.min(j), i.max(j), &mut all, &mut intra);
            drawn += 1;
        }
    }
    if intra.count == 0 {
        return Err(Error::contract(
            "similarity analysis: no intra-subject pairs (need two windows of one subject)",
        ));
    }
    let (mean_all, std_all) = all.stats();
    let (mean_intra, std_intra) = intra.stats();
    Ok(SimAnalysis {
        stats: SimStats {
            mean_all,
            std_all,
            mean_intra_subject: mean_intra,
            std_intra_subject: std_intra,
            gap: (mean_all - mean_intra).abs(),
        },
        hist_all: all.hist,
        hist_intra: intra.hist,
        pairs_all: all.count,
        pairs_intra: intra.count,
    })
}

struct Population {
    count: usize,
    sum: f64,
    sum_sq: f64,
    hist: Histogram,
}

impl Population {
    fn new() -> Self {
        Population {
            count: 0,
            sum: 0.0,
            sum_sq: 0.0,
            hist: Histogram::new(),
        }
    }

    fn add(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
        self.hist.add(v);
    }

    fn stats(&self) -> (f64, f64) {
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

/// A (loss, seed) grid over a base configuration.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MatrixSpec {
    pub base: RunConfig,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub loss: LossKind,
    pub seed: u64,
    pub report: EvalReport,
}

/// The configuration of one matrix cell: the seed drives both the world and
/// the training streams.
pub fn cell_config(base: &RunConfig, loss: LossKind, seed: u64) -> RunConfig {
    let mut config = base.clone();
    config.loss = loss;
    config.seed = seed;
    config.world.rng_seed = seed;
    config
}

/// Generate, pretrain and linearly evaluate one configuration.
pub fn run_cell(config: &RunConfig) -> Result<EvalReport> {
    let windows = synthgen::generate(&config.world)?;
    let pretrained = pretrain(config, &windows)?;
    linear_eval(&pretrained.encoders, config, &windows)
}

/// Executes every (loss, seed) cell, optionally in parallel. Per-cell errors
/// are reported without aborting the rest of the matrix.
pub fn run_matrix(spec: &MatrixSpec, jobs: usize) -> Vec<(LossKind, u64, Result<CellReport>)> {
    let cells: Vec<(LossKind, u64)> = spec
        .losses
        .iter()
        .flat_map(|&l| spec.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let jobs = jobs.max(1).min(cells.len().max(1));
    let next = std::sync::Mutex::new(0usize);
    let results: Vec<std::sync::Mutex<Option<(LossKind, u64, Result<CellReport>)>>> =
        (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().expect("queue lock");
                    let idx = *guard;
                    if idx >= cells.len() {
                        break;
                    }
                    *guard += 1;
                    idx
                };
                let (loss, seed) = cells[idx];
                let config = cell_config(&spec.base, loss, seed);
                let outcome = run_cell(&config).map(|report| CellReport { loss, seed, report });
                *results[idx].lock().expect("result lock") = Some((loss, seed, outcome));
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result lock").expect("cell ran"))
        .collect()
}

/// `loss,seed,mean_class_accuracy,gap` rows for successful cells.
pub fn comparison_csv(cells: &[CellReport]) -> String {
    let mut out = String::from("loss,seed,mean_class_accuracy,gap\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            cell.loss, cell.seed, cell.report.mean_class_accuracy, cell.report.sim_stats.gap
        ));
    }
    out
}

/// `epoch,mean_loss` rows.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss:.8}\n"));
    }
    out
}

/// `bin_lo,bin_hi,count_all,count_intra` rows of the two similarity
/// histograms.
pub fn histogram_csv(analysis: &SimAnalysis) -> String {
    let mut out = String::from("bin_lo,bin_hi,count_all,count_intra\n");
    let edges = analysis.hist_all.bin_edges();
    for i in 0..HISTOGRAM_BINS {
        out.push_str(&format!(
            "{:.4},{:.4},{},{}\n",
            edges[i],
            edges[i + 1],
            analysis.hist_all.counts[i],
            analysis.hist_intra.counts[i]
        ));
    }
    out
}

/// Per-anchor Q diagnostics as CSV (`anchor,subject,p,q,loss`).
pub fn anchor_diagnostics_csv(diags: &[losses::AnchorDiagnostics]) -> String {
    let mut out = String::from("anchor,subject,p,q,loss\n");
    for d in diags {
        out.push_str(&format!(
            "{},{},{:.8},{:.8},{:.8}\n",
            d.anchor, d.subject, d.p, d.q, d.loss
        ));
    }
    out
}
