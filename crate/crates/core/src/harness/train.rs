use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tape};
use crate::error::Result;
use crate::nn::{save_checkpoint, Checkpoint, LoadReport, MomentumCopies, MultiModalModel, Net};
use crate::objectives::{
    finetune_loss, fuse_questions, pretrain_losses, ContrastiveContext, EmbeddingQueue, LossBundle, PretrainBatch,
    VqaBatch,
};
use crate::optim::{AdamW, WarmupSchedule};
use crate::perturb::{perturbed_training_step, PerturbationReport, Phase};
use crate::synthdata::{gen_pretrain_set, gen_vqa_set, CaptionPair, QuestionType, VqaSample};

use super::{Accuracy, ExperimentConfig, MetricsRecord};

// ChaCha8 stream ids for the harness; the data generator uses 1–3.
const STREAM_PRETRAIN_INIT: u64 = 11;
const STREAM_PRETRAIN_ORDER: u64 = 12;
const STREAM_PRETRAIN_AUX: u64 = 13;
const STREAM_DECODER_INIT: u64 = 14;
const STREAM_FINETUNE_ORDER: u64 = 15;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// SHA-256 hex digests of what a run consumed, for checking that runs
/// meant to differ only in perturbation flags saw the same inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunDigests {
    pub data: String,
    pub init: String,
    pub order: String,
}

fn hex(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_params(params: &ParamStore<f64>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(h)
}

fn hash_pretrain_data(data: &[CaptionPair]) -> String {
    let mut h = Sha256::new();
    for p in data {
        for &x in p.scene.grid() {
            h.update(x.to_le_bytes());
        }
        for &id in &p.caption_ids {
            h.update((id as u64).to_le_bytes());
        }
    }
    hex(h)
}

fn hash_vqa_data(sets: &[&[VqaSample]]) -> String {
    let mut h = Sha256::new();
    for set in sets {
        for s in *set {
            for &x in s.scene.grid() {
                h.update(x.to_le_bytes());
            }
            for &id in s.question_ids.iter().chain(&s.answer_ids) {
                h.update((id as u64).to_le_bytes());
            }
        }
        h.update(b"|");
    }
    hex(h)
}

/// Shuffled batches of `0..n` for one epoch. A trailing batch smaller than
/// `min_batch` is merged into the previous one.
fn epoch_batches(n: usize, batch: usize, min_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().unwrap().len() < min_batch {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn batches_per_epoch(n: usize, batch: usize, min_batch: usize) -> usize {
    let full = n.div_ceil(batch);
    if full > 1 && n % batch != 0 && n % batch < min_batch {
        full - 1
    } else {
        full
    }
}

/// Running means of one epoch's step statistics.
#[derive(Default)]
struct EpochStats {
    steps: usize,
    itc: f64,
    itm: f64,
    mlm: f64,
    lm: f64,
    perturbed_steps: usize,
    norm: f64,
    clip: f64,
}

impl EpochStats {
    fn add_report(&mut self, report: &PerturbationReport) {
        if !report.is_empty() {
            self.perturbed_steps += 1;
            self.norm += report.mean_pre_clip_norm();
            self.clip += report.mean_clip_fraction();
        }
    }

    fn perturbation(&self, enabled: bool, record: &mut MetricsRecord) {
        if enabled && self.perturbed_steps > 0 {
            record.perturb_norm = Some(self.norm / self.perturbed_steps as f64);
            record.clip_frac = Some(self.clip / self.perturbed_steps as f64);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: MultiModalModel,
    pub records: Vec<MetricsRecord>,
    pub digests: RunDigests,
    /// Written when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
        }
    }
}

/// Pre-trains on ITC + ITM + MLM, one (optionally perturbed) step per batch
/// followed by the momentum update. With `out` set, the checkpoint is
/// rewritten after every epoch, so a failed run leaves the last good one.
pub fn run_pretrain(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = gen_pretrain_set(cfg.seed, cfg.data.pretrain_pairs);
    let mut model = MultiModalModel::new(cfg.model.clone(), false, &mut rng(cfg.seed, STREAM_PRETRAIN_INIT))?;
    let init_digest = hash_params(&model.params);
    let mut momentum = MomentumCopies::from_live(&model.params, cfg.momentum)?;
    let mut queue = EmbeddingQueue::new(cfg.queue_size, cfg.model.contrastive_dim);
    let mut optimizer = AdamW::new(cfg.optim, &model.params);
    let mut order_rng = rng(cfg.seed, STREAM_PRETRAIN_ORDER);
    let mut aux_rng = rng(cfg.seed, STREAM_PRETRAIN_AUX);
    let mut order_hash = Sha256::new();

    let p = &cfg.pretrain;
    let steps = batches_per_epoch(data.len(), p.batch, 2);
    let schedule = WarmupSchedule::new(steps * p.epochs, p.warmup, p.lr)?;
    let ckpt_path = out.map(|d| d.join(PRETRAIN_CHECKPOINT));
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
    }

    let mut records = Vec::with_capacity(p.epochs);
    let mut step = 0;
    for epoch in 1..=p.epochs {
        let mut stats = EpochStats::default();
        for idx in epoch_batches(data.len(), p.batch, 2, &mut order_rng) {
            for &i in &idx {
                order_hash.update((i as u64).to_le_bytes());
            }
            let pairs: Vec<&CaptionPair> = idx.iter().map(|&i| &data[i]).collect();
            let batch = PretrainBatch::prepare(&pairs, cfg.mask_rate, &mut aux_rng)?;
            let (mom_img, mom_txt) = momentum.features(&model.config, &batch.image_refs(), &batch.captions)?;
            let ctx = ContrastiveContext {
                momentum: Some((&mom_img, &mom_txt)),
                queue: &queue,
                temperature: cfg.itc_temperature,
            };
            let lr = schedule.lr_at(step)?;
            let MultiModalModel { config, params } = &mut model;
            let outcome = perturbed_training_step(params, &mut optimizer, &cfg.ggp, Phase::Pretrain, lr, |p| {
                let tape = Tape::new();
                let bound = p.bind(&tape);
                let net = Net::new(&tape, &bound, config);
                let losses = pretrain_losses(&net, &batch, ctx, cfg.loss_weights)?;
                let values: LossBundle = losses.values(&tape);
                let mut grads = tape.backward(losses.total)?;
                let grads = p.collect_grads(&mut grads, &bound);
                Ok((values.total, grads, values))
            })?;
            queue.push(&mom_img, &mom_txt)?;
            momentum.update(&model.params)?;
            stats.steps += 1;
            stats.itc += outcome.aux.itc;
            stats.itm += outcome.aux.itm;
            stats.mlm += outcome.aux.mlm;
            stats.add_report(&outcome.report);
            step += 1;
        }
        let n = stats.steps as f64;
        let mut rec = MetricsRecord::new(Phase::Pretrain, epoch);
        rec.loss_itc = Some(stats.itc / n);
        rec.loss_itm = Some(stats.itm / n);
        rec.loss_mlm = Some(stats.mlm / n);
        stats.perturbation(cfg.ggp.enabled_pretrain, &mut rec);
        records.push(rec);
        if let Some(path) = &ckpt_path {
            save_checkpoint(path, &model.config, &model.params)?;
        }
    }
    Ok(PretrainOutcome {
        model,
        records,
        digests: RunDigests {
            data: hash_pretrain_data(&data),
            init: init_digest,
            order: hex(order_hash),
        },
        checkpoint_path: ckpt_path,
    })
}

/// Exact-match accuracy of greedy decodes against `[ANS] … [END]` answers.
/// Evaluation reads the parameters as they are; it never perturbs them.
pub fn evaluate(model: &MultiModalModel, samples: &[VqaSample], batch: usize) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for chunk in samples.chunks(batch.max(1)) {
        let tape = Tape::new();
        let bound = model.params.bind_constant(&tape);
        let net = Net::new(&tape, &bound, &model.config);
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.scene.grid()).collect();
        let questions: Vec<Vec<usize>> = chunk.iter().map(|s| s.question_ids.clone()).collect();
        let (fused, valid) = fuse_questions(&net, &images, &questions)?;
        let decoded = net.greedy_decode(fused, &valid)?;
        for (s, d) in chunk.iter().zip(&decoded) {
            let hit = usize::from(*d == s.answer_ids);
            match s.question_type {
                QuestionType::Open => {
                    acc.total_open += 1;
                    acc.correct_open += hit;
                }
                QuestionType::Closed => {
                    acc.total_closed += 1;
                    acc.correct_closed += hit;
                }
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: MultiModalModel,
    pub records: Vec<MetricsRecord>,
    pub load_report: LoadReport,
    pub digests: RunDigests,
    /// Validation accuracy after the last epoch.
    pub val_accuracy: Accuracy,
    /// Training-set accuracy after the last epoch.
    pub train_accuracy: Accuracy,
    pub checkpoint_path: Option<PathBuf>,
}

/// Fine-tunes a pre-trained checkpoint on VQA with the answer-generation
/// loss, evaluating on the validation split after every epoch.
pub fn run_finetune(cfg: &ExperimentConfig, pretrained: &Checkpoint, out: Option<&Path>) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (train, val) = gen_vqa_set(cfg.seed, cfg.data.vqa_train, cfg.data.vqa_val)?;
    let mut model = MultiModalModel::new(cfg.model.clone(), true, &mut rng(cfg.seed, STREAM_DECODER_INIT))?;
    let load_report = model.load_from(pretrained)?;
    let init_digest = hash_params(&model.params);
    let mut optimizer = AdamW::new(cfg.optim, &model.params);
    let mut order_rng = rng(cfg.seed, STREAM_FINETUNE_ORDER);
    let mut order_hash = Sha256::new();

    let f = &cfg.finetune;
    let steps = batches_per_epoch(train.len(), f.batch, 1);
    let schedule = WarmupSchedule::new(steps * f.epochs, f.warmup, f.lr)?;

    let mut records = Vec::with_capacity(f.epochs);
    let mut val_accuracy = Accuracy::default();
    let mut step = 0;
    for epoch in 1..=f.epochs {
        let mut stats = EpochStats::default();
        for idx in epoch_batches(train.len(), f.batch, 1, &mut order_rng) {
            for &i in &idx {
                order_hash.update((i as u64).to_le_bytes());
            }
            let samples: Vec<&VqaSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = VqaBatch::from_samples(&samples);
            let lr = schedule.lr_at(step)?;
            let MultiModalModel { config, params } = &mut model;
            let outcome = perturbed_training_step(params, &mut optimizer, &cfg.ggp, Phase::Finetune, lr, |p| {
                let tape = Tape::new();
                let bound = p.bind(&tape);
                let net = Net::new(&tape, &bound, config);
                let loss = finetune_loss(&net, &batch)?;
                let value = tape.item(loss);
                let mut grads = tape.backward(loss)?;
                let grads = p.collect_grads(&mut grads, &bound);
                Ok((value, grads, ()))
            })?;
            stats.steps += 1;
            stats.lm += outcome.loss;
            stats.add_report(&outcome.report);
            step += 1;
        }
        val_accuracy = evaluate(&model, &val, f.batch.max(32))?;
        let mut rec = MetricsRecord::new(Phase::Finetune, epoch).with_accuracy(&val_accuracy);
        rec.loss_lm = Some(stats.lm / stats.steps as f64);
        stats.perturbation(cfg.ggp.enabled_finetune, &mut rec);
        records.push(rec);
    }
    let train_accuracy = evaluate(&model, &train, f.batch.max(32))?;
    let checkpoint_path = match out {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let path = d.join(FINETUNE_CHECKPOINT);
            save_checkpoint(&path, &model.config, &model.params)?;
            Some(path)
        }
        None => None,
    };
    Ok(FinetuneOutcome {
        model,
        records,
        load_report,
        digests: RunDigests {
            data: hash_vqa_data(&[&train, &val]),
            init: init_digest,
            order: hex(order_hash),
        },
        val_accuracy,
        train_accuracy,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let mut r = rng(1, 99);
        for (n, b, min) in [(10, 4, 2), (9, 4, 2), (8, 4, 2), (5, 4, 1), (3, 8, 2)] {
            let batches = epoch_batches(n, b, min, &mut r);
            assert_eq!(batches.len(), batches_per_epoch(n, b, min));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() >= min.min(n)));
        }
    }
}
