//! Epoch-based training.
//!
//! Every epoch: refresh descriptors for a freshly drawn negative pool with
//! the current model, sample anchors and mine hard negatives, then walk
//! mini-batches of anchors (each contributing one triplet per mined
//! negative), taking one Adam step per batch. The GeM exponent has its own
//! learning rate and is projected back to `p >= 1` after every step.
//!
//! Checkpoints are written each epoch at f32 precision. Parameters and
//! optimizer moments are rounded through the same f32 quantization at the
//! start of every epoch, which makes save-then-load an exact identity on
//! training state: a killed-and-resumed run retraces the uninterrupted one
//! bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{DescriptorModel, ModelGrads};
use crate::checkpoint::{
    model_from_checkpoint, model_to_checkpoint, quantize, read_checkpoint, write_checkpoint,
    Checkpoint, Tensor,
};
use crate::error::{Error, Result};
use crate::loss::{total_loss_backward, ClassId, LossConfig, Triplet};
use crate::mining::{mine_hard_negatives, sample_anchors, LabeledPool, MiningConfig};
use crate::pooling::{Descriptor, GemParam};
use crate::synth::LabeledImage;

/// Training hyperparameters. Defaults follow the full-scale recipe:
/// 50 epochs, batch 8, lr 1e-6 (1e-4 for the exponent), exponential decay
/// 0.01, margin 1.25, lambda 10, frozen backbone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_p: f64,
    pub decay: f64,
    pub loss: LossConfig,
    pub mining: MiningConfig,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-6,
            lr_p: 1e-4,
            decay: 0.01,
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
            freeze_backbone: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: the 64-anchor / 512-pool mining sizes, with the
    /// loss shape and batch size of the full recipe. Learning rates are
    /// raised to suit training a fresh small model rather than fine-tuning
    /// a large pretrained one.
    pub fn desk_profile(seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            lr_p: 1e-2,
            mining: MiningConfig::desk_profile(seed),
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lr_p > 0.0) || !self.decay.is_finite() || self.decay < 0.0 {
            return Err(Error::validation("learning rates must be positive and decay >= 0"));
        }
        if self.lr_p < self.lr {
            return Err(Error::validation(format!(
                "lr_p ({}) must be at least lr ({})",
                self.lr_p, self.lr
            )));
        }
        self.loss.validate()?;
        self.mining.validate()
    }

    /// Decayed learning rate for an epoch: `lr * exp(-decay * epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * (-self.decay * epoch as f64).exp()
    }

    pub fn lr_p_at(&self, epoch: usize) -> f64 {
        self.lr_p * (-self.decay * epoch as f64).exp()
    }
}

/// Per-epoch training statistics. `val_loss` is absent when the dataset is
/// too small to hold out a validation class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub fos: f64,
    pub sos: f64,
    pub p: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochStats {
    /// Equality over the deterministic fields; wall time is excluded.
    pub fn deterministic_eq(&self, other: &EpochStats) -> bool {
        let opt_bits = |v: Option<f64>| v.map(f64::to_bits);
        self.epoch == other.epoch
            && self.total.to_bits() == other.total.to_bits()
            && self.fos.to_bits() == other.fos.to_bits()
            && self.sos.to_bits() == other.sos.to_bits()
            && self.p.to_bits() == other.p.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && opt_bits(self.val_loss) == opt_bits(other.val_loss)
    }
}

/// Line-delimited training report, one JSON record per epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("stats serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<TrainReport> {
        let mut epochs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            epochs.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::format(format!("report line {}: {e}", i + 1), 0))?,
            );
        }
        Ok(TrainReport { epochs })
    }

    pub fn deterministic_eq(&self, other: &TrainReport) -> bool {
        self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(other.epochs.iter())
                .all(|(a, b)| a.deterministic_eq(b))
    }
}

// ---------------------------------------------------------------------------
// Adam with two parameter groups (the GeM exponent vs everything else)
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers mirroring the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    conv_m: Vec<(Array2<f64>, Array1<f64>)>,
    conv_v: Vec<(Array2<f64>, Array1<f64>)>,
    soa_m: BTreeMap<usize, [Array2<f64>; 4]>,
    soa_v: BTreeMap<usize, [Array2<f64>; 4]>,
    gem_m: f64,
    gem_v: f64,
    whiten_m: (Array2<f64>, Array1<f64>),
    whiten_v: (Array2<f64>, Array1<f64>),
}

impl AdamState {
    pub fn new(model: &DescriptorModel) -> Self {
        let conv_zeros: Vec<(Array2<f64>, Array1<f64>)> = model
            .convs
            .iter()
            .map(|c| (Array2::zeros(c.weight.dim()), Array1::zeros(c.bias.len())))
            .collect();
        let soa_zeros: BTreeMap<usize, [Array2<f64>; 4]> = model
            .soa
            .iter()
            .map(|(&ins, p)| {
                (
                    ins,
                    [
                        Array2::zeros(p.wq.dim()),
                        Array2::zeros(p.wk.dim()),
                        Array2::zeros(p.wv.dim()),
                        Array2::zeros(p.w_out.dim()),
                    ],
                )
            })
            .collect();
        AdamState {
            step: 0,
            conv_m: conv_zeros.clone(),
            conv_v: conv_zeros,
            soa_m: soa_zeros.clone(),
            soa_v: soa_zeros,
            gem_m: 0.0,
            gem_v: 0.0,
            whiten_m: (
                Array2::zeros(model.whitening.weight.dim()),
                Array1::zeros(model.whitening.bias.len()),
            ),
            whiten_v: (
                Array2::zeros(model.whitening.weight.dim()),
                Array1::zeros(model.whitening.bias.len()),
            ),
        }
    }

    /// Round all moments through f32, matching on-disk precision.
    pub fn quantize(&mut self) {
        for (w, b) in self.conv_m.iter_mut().chain(self.conv_v.iter_mut()) {
            w.mapv_inplace(quantize);
            b.mapv_inplace(quantize);
        }
        for mats in self.soa_m.values_mut().chain(self.soa_v.values_mut()) {
            for m in mats.iter_mut() {
                m.mapv_inplace(quantize);
            }
        }
        self.gem_m = quantize(self.gem_m);
        self.gem_v = quantize(self.gem_v);
        self.whiten_m.0.mapv_inplace(quantize);
        self.whiten_m.1.mapv_inplace(quantize);
        self.whiten_v.0.mapv_inplace(quantize);
        self.whiten_v.1.mapv_inplace(quantize);
    }
}

fn adam_update(
    theta: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    correction1: f64,
    correction2: f64,
) {
    *m = BETA1 * *m + (1.0 - BETA1) * grad;
    *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
    let m_hat = *m / correction1;
    let v_hat = *v / correction2;
    *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// One optimizer step. `lr` drives every parameter except the GeM
/// exponent, which uses `lr_p`; frozen backbones skip their convolution
/// parameters entirely. The exponent is projected to `p >= 1` afterwards
/// and all parameters are checked to stay finite.
pub fn adam_step(
    model: &mut DescriptorModel,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
    lr_p: f64,
    freeze_backbone: bool,
) -> Result<()> {
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);

    if !freeze_backbone {
        for (idx, grad) in grads.convs.iter().enumerate() {
            if let Some((gw, gb)) = grad {
                let conv = &mut model.convs[idx];
                let (mw, mb) = &mut state.conv_m[idx];
                let (vw, vb) = &mut state.conv_v[idx];
                for ((t, &g), (m, v)) in conv
                    .weight
                    .iter_mut()
                    .zip(gw.iter())
                    .zip(mw.iter_mut().zip(vw.iter_mut()))
                {
                    adam_update(t, g, m, v, lr, c1, c2);
                }
                for ((t, &g), (m, v)) in conv
                    .bias
                    .iter_mut()
                    .zip(gb.iter())
                    .zip(mb.iter_mut().zip(vb.iter_mut()))
                {
                    adam_update(t, g, m, v, lr, c1, c2);
                }
            }
        }
    }

    for (&ins, g) in &grads.soa {
        let params = model.soa.get_mut(&ins).expect("gradient matches model layout");
        let m = state.soa_m.get_mut(&ins).expect("state matches model");
        let v = state.soa_v.get_mut(&ins).expect("state matches model");
        let pairs: [(&mut Array2<f64>, &Array2<f64>); 4] = [
            (&mut params.wq, &g.d_wq),
            (&mut params.wk, &g.d_wk),
            (&mut params.wv, &g.d_wv),
            (&mut params.w_out, &g.d_w_out),
        ];
        for (slot, (theta, grad)) in pairs.into_iter().enumerate() {
            for ((t, &gv), (mv, vv)) in theta
                .iter_mut()
                .zip(grad.iter())
                .zip(m[slot].iter_mut().zip(v[slot].iter_mut()))
            {
                adam_update(t, gv, mv, vv, lr, c1, c2);
            }
        }
    }

    if let Some((gw, gb)) = &grads.whiten {
        for ((t, &g), (m, v)) in model
            .whitening
            .weight
            .iter_mut()
            .zip(gw.iter())
            .zip(state.whiten_m.0.iter_mut().zip(state.whiten_v.0.iter_mut()))
        {
            adam_update(t, g, m, v, lr, c1, c2);
        }
        for ((t, &g), (m, v)) in model
            .whitening
            .bias
            .iter_mut()
            .zip(gb.iter())
            .zip(state.whiten_m.1.iter_mut().zip(state.whiten_v.1.iter_mut()))
        {
            adam_update(t, g, m, v, lr, c1, c2);
        }

        let mut p = model.gem.value();
        adam_update(&mut p, grads.gem_p, &mut state.gem_m, &mut state.gem_v, lr_p, c1, c2);
        model.gem = GemParam::new(GemParam::project(p))?;
    }

    ensure_finite(model)
}

fn ensure_finite(model: &DescriptorModel) -> Result<()> {
    let finite2 = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
    let finite1 = |a: &Array1<f64>| a.iter().all(|v| v.is_finite());
    let ok = model
        .convs
        .iter()
        .all(|c| finite2(&c.weight) && finite1(&c.bias))
        && model
            .soa
            .values()
            .all(|p| finite2(&p.wq) && finite2(&p.wk) && finite2(&p.wv) && finite2(&p.w_out))
        && model.gem.value().is_finite()
        && finite2(&model.whitening.weight)
        && finite1(&model.whitening.bias);
    if ok {
        Ok(())
    } else {
        Err(Error::validation("optimizer step produced non-finite parameters"))
    }
}

fn grad_norm(grads: &ModelGrads) -> f64 {
    let mut acc = 0.0;
    for g in grads.convs.iter().flatten() {
        acc += g.0.iter().map(|v| v * v).sum::<f64>();
        acc += g.1.iter().map(|v| v * v).sum::<f64>();
    }
    for g in grads.soa.values() {
        for m in [&g.d_wq, &g.d_wk, &g.d_wv, &g.d_w_out] {
            acc += m.iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc += grads.gem_p * grads.gem_p;
    if let Some((w, b)) = &grads.whiten {
        acc += w.iter().map(|v| v * v).sum::<f64>();
        acc += b.iter().map(|v| v * v).sum::<f64>();
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Epoch logic
// ---------------------------------------------------------------------------

/// Classes held out for validation: 10% of the classes (at least one when
/// more than one exists), chosen by the run seed alone.
pub fn validation_classes(dataset: &[LabeledImage], seed: u64) -> BTreeSet<ClassId> {
    let classes: BTreeSet<ClassId> = dataset.iter().map(|i| i.class).collect();
    if classes.len() < 2 {
        return BTreeSet::new();
    }
    let mut ordered: Vec<ClassId> = classes.into_iter().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x56414c); // validation-split stream
    for i in (1..ordered.len()).rev() {
        let j = rng.gen_range(0..=i);
        ordered.swap(i, j);
    }
    let n_val = (ordered.len() / 10).max(1);
    ordered.into_iter().take(n_val).collect()
}

/// Fixed validation triplet identities: anchors and positives from the
/// held-out classes, negatives uniform over the remaining classes.
fn validation_triplet_ids(
    dataset: &[LabeledImage],
    val_classes: &BTreeSet<ClassId>,
    seed: u64,
) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x56414c54); // validation-triplet stream
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.iter().enumerate() {
        by_class.entry(item.class).or_default().push(i);
    }
    let others: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, it)| !val_classes.contains(&it.class))
        .map(|(i, _)| i)
        .collect();
    let mut triplets = Vec::new();
    for class in val_classes {
        let members = &by_class[class];
        if members.len() < 2 || others.is_empty() {
            continue;
        }
        for _ in 0..4 {
            let a = members[rng.gen_range(0..members.len())];
            let p = loop {
                let cand = members[rng.gen_range(0..members.len())];
                if cand != a {
                    break cand;
                }
            };
            let n = others[rng.gen_range(0..others.len())];
            triplets.push((a, p, n));
            if triplets.len() >= 32 {
                return triplets;
            }
        }
    }
    triplets
}

fn extract_all(model: &DescriptorModel, items: &[&LabeledImage]) -> Result<Vec<Descriptor>> {
    items
        .par_iter()
        .map(|item| model.descriptor(&item.image))
        .collect()
}

/// One mini-batch as indices into a unique-image list.
struct BatchPlan<'a> {
    images: Vec<&'a LabeledImage>,
    /// (anchor, positive, negative) indices into `images`, plus classes
    triplets: Vec<(usize, usize, usize, ClassId, ClassId)>,
}

impl<'a> BatchPlan<'a> {
    fn intern(&mut self, seen: &mut BTreeMap<String, usize>, img: &'a LabeledImage) -> usize {
        if let Some(&idx) = seen.get(&img.id) {
            return idx;
        }
        let idx = self.images.len();
        seen.insert(img.id.clone(), idx);
        self.images.push(img);
        idx
    }
}

fn run_batch(
    model: &mut DescriptorModel,
    plan: &BatchPlan<'_>,
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch_index: usize,
) -> Result<(f64, f64, f64, f64)> {
    let snapshot: &DescriptorModel = model;
    let forwards: Vec<_> = plan
        .images
        .par_iter()
        .map(|img| snapshot.descriptor_cached(&img.image))
        .collect::<Result<Vec<_>>>()?;

    let triplets: Vec<Triplet> = plan
        .triplets
        .iter()
        .map(|&(a, p, n, ca, cn)| {
            Triplet::new(forwards[a].0.clone(), forwards[p].0.clone(), forwards[n].0.clone(), ca, cn)
        })
        .collect::<Result<Vec<_>>>()?;

    let (terms, tgrads) = total_loss_backward(&triplets, &cfg.loss)?;
    if !terms.total.is_finite() {
        return Err(Error::TrainingAborted {
            epoch: epoch_index,
            message: format!("non-finite batch loss {}", terms.total),
        });
    }

    // accumulate descriptor gradients per unique image across roles
    let dim = forwards[0].0.dim();
    let mut d_desc: Vec<Array1<f64>> = vec![Array1::zeros(dim); plan.images.len()];
    for (t, g) in plan.triplets.iter().zip(tgrads.iter()) {
        d_desc[t.0] += &g.d_anchor;
        d_desc[t.1] += &g.d_positive;
        d_desc[t.2] += &g.d_negative;
    }

    let want_conv = !cfg.freeze_backbone;
    let per_image: Vec<ModelGrads> = forwards
        .par_iter()
        .zip(d_desc.par_iter())
        .map(|((_, cache), g)| snapshot.descriptor_backward(cache, g, want_conv))
        .collect();
    let mut total = per_image[0].clone();
    for g in &per_image[1..] {
        total.add(g);
    }

    let norm = grad_norm(&total);
    adam_step(model, &total, state, cfg.lr_at(epoch_index), cfg.lr_p_at(epoch_index), cfg.freeze_backbone)
        .map_err(|e| Error::TrainingAborted { epoch: epoch_index, message: e.to_string() })?;
    Ok((terms.total, terms.fos, terms.sos, norm))
}

/// Run one training epoch in place, returning its statistics.
pub fn run_epoch(
    model: &mut DescriptorModel,
    dataset: &[LabeledImage],
    cfg: &TrainConfig,
    epoch_index: usize,
    state: &mut AdamState,
) -> Result<EpochStats> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch_index as u64 + 1);

    let val_classes = validation_classes(dataset, cfg.seed);
    let trainable: Vec<&LabeledImage> = dataset
        .iter()
        .filter(|i| !val_classes.contains(&i.class))
        .collect();
    if trainable.is_empty() {
        return Err(Error::validation("no training items outside the validation classes"));
    }

    // (1) negative pool, re-drawn per epoch, described with the current model
    let mut pool_indices: Vec<usize> = (0..trainable.len()).collect();
    for i in (1..pool_indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool_indices.swap(i, j);
    }
    pool_indices.truncate(cfg.mining.pool_size.min(trainable.len()));
    pool_indices.sort_unstable();
    let pool_items: Vec<&LabeledImage> = pool_indices.iter().map(|&i| trainable[i]).collect();
    let pool = LabeledPool::new(
        extract_all(model, &pool_items)?,
        pool_items.iter().map(|i| i.class).collect(),
        pool_items.iter().map(|i| i.id.clone()).collect(),
    )?;

    // (2) anchors and their mined negatives
    let classes: Vec<ClassId> = trainable.iter().map(|i| i.class).collect();
    let mining_cfg = MiningConfig { seed: rng.gen(), ..cfg.mining };
    let anchors = sample_anchors(&classes, &mining_cfg)?;
    let anchor_items: Vec<&LabeledImage> =
        anchors.pairs.iter().map(|&(a, _)| trainable[a]).collect();
    let anchor_descriptors = extract_all(model, &anchor_items)?;

    struct AnchorGroup<'a> {
        anchor: &'a LabeledImage,
        positive: &'a LabeledImage,
        negatives: Vec<&'a LabeledImage>,
    }
    let mut groups = Vec::new();
    for (&(a_idx, p_idx), a_desc) in anchors.pairs.iter().zip(anchor_descriptors.iter()) {
        let anchor = trainable[a_idx];
        let mined = mine_hard_negatives(a_desc, anchor.class, &pool, cfg.mining.negatives_per_anchor)?;
        groups.push(AnchorGroup {
            anchor,
            positive: trainable[p_idx],
            negatives: mined.iter().map(|&i| pool_items[i]).collect(),
        });
    }

    // (3) mini-batches of anchors, one optimizer step each
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in groups.chunks(cfg.batch_size) {
        let mut plan = BatchPlan { images: Vec::new(), triplets: Vec::new() };
        let mut seen = BTreeMap::new();
        for group in chunk {
            let a = plan.intern(&mut seen, group.anchor);
            let p = plan.intern(&mut seen, group.positive);
            for neg in &group.negatives {
                let n = plan.intern(&mut seen, neg);
                plan.triplets
                    .push((a, p, n, group.anchor.class, neg.class));
            }
        }
        let (total, fos, sos, norm) = run_batch(model, &plan, cfg, state, epoch_index)?;
        sums.0 += total;
        sums.1 += fos;
        sums.2 += sos;
        sums.3 += norm;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::validation("epoch produced no batches"));
    }
    let n = batches as f64;

    // (4) held-out validation loss with the updated model
    let val_ids = validation_triplet_ids(dataset, &val_classes, cfg.seed);
    let val_loss = if val_ids.is_empty() {
        None
    } else {
        let mut unique: Vec<usize> = val_ids
            .iter()
            .flat_map(|&(a, p, n)| [a, p, n])
            .collect();
        unique.sort_unstable();
        unique.dedup();
        let items: Vec<&LabeledImage> = unique.iter().map(|&i| &dataset[i]).collect();
        let descs = extract_all(model, &items)?;
        let lookup: BTreeMap<usize, usize> =
            unique.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
        let triplets: Vec<Triplet> = val_ids
            .iter()
            .map(|&(a, p, n)| {
                Triplet::new(
                    descs[lookup[&a]].clone(),
                    descs[lookup[&p]].clone(),
                    descs[lookup[&n]].clone(),
                    dataset[a].class,
                    dataset[n].class,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // model selection uses the plain held-out triplet loss, so runs
        // with different second-order weights stay comparable
        Some(crate::loss::fos_loss(&triplets, cfg.loss.margin)?)
    };

    Ok(EpochStats {
        epoch: epoch_index,
        total: sums.0 / n,
        fos: sums.1 / n,
        sos: sums.2 / n,
        p: model.gem.value(),
        grad_norm: sums.3 / n,
        val_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Multi-epoch driver with checkpointing and resume
// ---------------------------------------------------------------------------

/// Quantize a model through the checkpoint's f32 representation; equal to
/// a save-then-load round trip by construction.
pub fn quantize_model(model: &DescriptorModel) -> DescriptorModel {
    model_from_checkpoint(&model_to_checkpoint(model)).expect("self round-trip")
}

const STATE_FILE: &str = "train_state.solc";
const REPORT_FILE: &str = "train_report.jsonl";
const BEST_FILE: &str = "best.solc";

fn adam_to_tensors(state: &AdamState, ckpt: &mut Checkpoint) {
    let mut put2 = |name: String, a: &Array2<f64>| {
        ckpt.tensors.insert(name, Tensor::from_array2(a));
    };
    for (i, ((mw, _), (vw, _))) in state.conv_m.iter().zip(state.conv_v.iter()).enumerate() {
        put2(format!("adam.m.conv{}.weight", i + 1), mw);
        put2(format!("adam.v.conv{}.weight", i + 1), vw);
    }
    for (i, ((_, mb), (_, vb))) in state.conv_m.iter().zip(state.conv_v.iter()).enumerate() {
        ckpt.tensors
            .insert(format!("adam.m.conv{}.bias", i + 1), Tensor::from_array1(mb));
        ckpt.tensors
            .insert(format!("adam.v.conv{}.bias", i + 1), Tensor::from_array1(vb));
    }
    for (moments, tag) in [(&state.soa_m, "m"), (&state.soa_v, "v")] {
        for (&ins, mats) in moments.iter() {
            for (name, mat) in ["wq", "wk", "wv", "w_out"].iter().zip(mats.iter()) {
                ckpt.tensors.insert(
                    format!("adam.{tag}.soa{ins}.{name}"),
                    Tensor::from_array2(mat),
                );
            }
        }
    }
    ckpt.tensors.insert("adam.m.gem.p".into(), Tensor::scalar(state.gem_m));
    ckpt.tensors.insert("adam.v.gem.p".into(), Tensor::scalar(state.gem_v));
    ckpt.tensors
        .insert("adam.m.whiten.weight".into(), Tensor::from_array2(&state.whiten_m.0));
    ckpt.tensors
        .insert("adam.m.whiten.bias".into(), Tensor::from_array1(&state.whiten_m.1));
    ckpt.tensors
        .insert("adam.v.whiten.weight".into(), Tensor::from_array2(&state.whiten_v.0));
    ckpt.tensors
        .insert("adam.v.whiten.bias".into(), Tensor::from_array1(&state.whiten_v.1));
    ckpt.tensors
        .insert("adam.step".into(), Tensor::scalar(state.step as f64));
}

fn adam_from_tensors(ckpt: &Checkpoint, model: &DescriptorModel) -> Result<AdamState> {
    let mut state = AdamState::new(model);
    for (i, ((mw, mb), (vw, vb))) in state
        .conv_m
        .iter_mut()
        .zip(state.conv_v.iter_mut())
        .enumerate()
    {
        *mw = ckpt.tensor(&format!("adam.m.conv{}.weight", i + 1))?.to_array2()?;
        *mb = ckpt.tensor(&format!("adam.m.conv{}.bias", i + 1))?.to_array1()?;
        *vw = ckpt.tensor(&format!("adam.v.conv{}.weight", i + 1))?.to_array2()?;
        *vb = ckpt.tensor(&format!("adam.v.conv{}.bias", i + 1))?.to_array1()?;
    }
    for (moments, tag) in [(&mut state.soa_m, "m"), (&mut state.soa_v, "v")] {
        for (&ins, mats) in moments.iter_mut() {
            for (name, mat) in ["wq", "wk", "wv", "w_out"].iter().zip(mats.iter_mut()) {
                *mat = ckpt
                    .tensor(&format!("adam.{tag}.soa{ins}.{name}"))?
                    .to_array2()?;
            }
        }
    }
    state.gem_m = ckpt.tensor("adam.m.gem.p")?.to_scalar()?;
    state.gem_v = ckpt.tensor("adam.v.gem.p")?.to_scalar()?;
    state.whiten_m.0 = ckpt.tensor("adam.m.whiten.weight")?.to_array2()?;
    state.whiten_m.1 = ckpt.tensor("adam.m.whiten.bias")?.to_array1()?;
    state.whiten_v.0 = ckpt.tensor("adam.v.whiten.weight")?.to_array2()?;
    state.whiten_v.1 = ckpt.tensor("adam.v.whiten.bias")?.to_array1()?;
    state.step = ckpt.tensor("adam.step")?.to_scalar()? as u64;
    Ok(state)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// checkpoint with the lowest validation loss (final model when no
    /// validation split exists)
    pub model: DescriptorModel,
    pub final_model: DescriptorModel,
    pub report: TrainReport,
    pub best_epoch: Option<usize>,
}

/// Train for up to `cfg.epochs` epochs.
///
/// With a run directory, per-epoch model checkpoints, the optimizer state
/// and the report are written there, and an interrupted run resumes from
/// the last completed epoch.
pub fn train(
    model: DescriptorModel,
    dataset: &[LabeledImage],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            final_model: model,
            report: TrainReport::default(),
            best_epoch: None,
        });
    }

    let mut model = model;
    let mut state = AdamState::new(&model);
    let mut report = TrainReport::default();
    let mut start_epoch = 0usize;
    let mut best_epoch: Option<usize> = None;
    let mut best_val = f64::INFINITY;
    let mut best_model: Option<DescriptorModel> = None;

    if let Some(dir) = run_dir {
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            let ckpt = read_checkpoint(&state_path)?;
            model = model_from_checkpoint(&ckpt)?;
            state = adam_from_tensors(&ckpt, &model)?;
            start_epoch = ckpt
                .header
                .meta
                .get("next_epoch")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            if let Some(e) = ckpt.header.meta.get("best_epoch").and_then(|s| s.parse().ok()) {
                best_epoch = Some(e);
                best_val = ckpt
                    .header
                    .meta
                    .get("best_val")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(f64::INFINITY);
                let best_path = dir.join(BEST_FILE);
                if best_path.exists() {
                    best_model = Some(model_from_checkpoint(&read_checkpoint(&best_path)?)?);
                }
            }
            let report_path = dir.join(REPORT_FILE);
            if report_path.exists() {
                report = TrainReport::from_jsonl(&std::fs::read_to_string(report_path)?)?;
                report.epochs.truncate(start_epoch);
            }
        }
    }

    for epoch in start_epoch..cfg.epochs {
        // round parameters and moments to their on-disk precision, so a
        // resumed run and a straight run see identical state here
        model = quantize_model(&model);
        state.quantize();

        let stats = run_epoch(&mut model, dataset, cfg, epoch, &mut state)?;

        let snapshot = quantize_model(&model);
        let is_best = match stats.val_loss {
            Some(v) => v < best_val,
            None => false,
        };
        if is_best {
            best_val = stats.val_loss.expect("checked above");
            best_epoch = Some(epoch);
            best_model = Some(snapshot.clone());
        }
        report.epochs.push(stats);

        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            crate::checkpoint::save_model(&dir.join(format!("epoch_{epoch:03}.solc")), &snapshot)?;
            if is_best {
                crate::checkpoint::save_model(&dir.join(BEST_FILE), &snapshot)?;
            }
            let mut ckpt = model_to_checkpoint(&model);
            adam_to_tensors(&state, &mut ckpt);
            ckpt.header.meta.insert("next_epoch".into(), (epoch + 1).to_string());
            if let Some(be) = best_epoch {
                ckpt.header.meta.insert("best_epoch".into(), be.to_string());
                ckpt.header.meta.insert("best_val".into(), format!("{best_val:e}"));
            }
            write_checkpoint(&dir.join(STATE_FILE), &ckpt)?;
            crate::imageio::write_atomic(&dir.join(REPORT_FILE), report.to_jsonl().as_bytes())?;
        }
    }

    let final_model = quantize_model(&model);
    let best = best_model.unwrap_or_else(|| final_model.clone());
    Ok(TrainOutcome { model: best, final_model, report, best_epoch })
}
