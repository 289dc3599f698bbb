//! Pre-training losses (image-text contrastive, image-text matching, masked
//! language modeling) and the fine-tuning answer-generation loss.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Net;
use crate::synthdata::{CaptionPair, Vocab, VqaSample, ANS, END, MASK};
use crate::Tensor;

/// Inputs to the contrastive loss must be unit rows to within this.
pub const NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_QUEUE_SIZE: usize = 256;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Ring buffer of momentum-encoder `(image, text)` embedding pairs.
/// A capacity of zero disables the queue.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a batch of unit rows `[N, dim]`, evicting the oldest entries.
    pub fn push(&mut self, images: &Tensor, texts: &Tensor) -> Result<()> {
        check_unit_rows("queue images", images, self.dim)?;
        check_unit_rows("queue texts", texts, self.dim)?;
        if images.shape() != texts.shape() {
            return Err(Error::ShapeMismatch {
                op: "queue push",
                lhs: images.shape().to_vec(),
                rhs: texts.shape().to_vec(),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (i, t) in images.data().chunks(self.dim).zip(texts.data().chunks(self.dim)) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((i.to_vec(), t.to_vec()));
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.entries.iter().map(|(i, t)| (i.as_slice(), t.as_slice()))
    }

    fn stacked(&self, pick_text: bool) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self
            .entries
            .iter()
            .flat_map(|(i, t)| if pick_text { t } else { i }.iter().copied())
            .collect();
        Some(Tensor::new(vec![self.entries.len(), self.dim], data).expect("non-empty queue"))
    }
}

fn check_unit_rows(what: &str, t: &Tensor, dim: usize) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != dim {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{what}: expected [N, {dim}]"),
        });
    }
    for (r, row) in t.data().chunks(dim).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {r} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Candidate pool for one direction: the in-batch rows followed by the queue.
fn candidates(tape: &Tape<f64>, batch: Var, queued: Option<Tensor>) -> Result<Var> {
    match queued {
        Some(q) => {
            let q = tape.constant(q);
            tape.concat(&[batch, q], 0)
        }
        None => Ok(batch),
    }
}

/// Symmetric InfoNCE between unit image and text embeddings `[N, C]`.
///
/// Image `i` is scored against every in-batch text plus every queued text,
/// and symmetrically for texts; the matching pair is the target. When
/// `momentum` holds momentum-encoder embeddings they replace the live ones
/// on the candidate side. The queue is read, not updated.
pub fn itc_loss(
    tape: &Tape<f64>,
    img: Var,
    txt: Var,
    momentum: Option<(&Tensor, &Tensor)>,
    queue: &EmbeddingQueue,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let shape = tape.shape(img);
    if shape != tape.shape(txt) || shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "itc_loss",
            lhs: shape,
            rhs: tape.shape(txt),
        });
    }
    let (n, dim) = (shape[0], shape[1]);
    check_unit_rows("image embeddings", &tape.value(img), dim)?;
    check_unit_rows("text embeddings", &tape.value(txt), dim)?;
    if !queue.is_empty() && queue.dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "itc_loss queue",
            lhs: vec![queue.dim()],
            rhs: vec![dim],
        });
    }
    let (img_side, txt_side) = match momentum {
        Some((mi, mt)) => {
            check_unit_rows("momentum image embeddings", mi, dim)?;
            check_unit_rows("momentum text embeddings", mt, dim)?;
            if mi.shape()[0] != n || mt.shape()[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "itc_loss momentum",
                    lhs: mi.shape().to_vec(),
                    rhs: vec![n, dim],
                });
            }
            (tape.constant(mi.clone()), tape.constant(mt.clone()))
        }
        None => (img, txt),
    };
    let targets: Vec<usize> = (0..n).collect();
    let inv_t = 1.0 / temperature;

    let txt_cands = candidates(tape, txt_side, queue.stacked(true))?;
    let i2t = tape.matmul(img, tape.transpose(txt_cands)?)?;
    let i2t = tape.softmax_cross_entropy(tape.scale(i2t, inv_t)?, &targets)?;

    let img_cands = candidates(tape, img_side, queue.stacked(false))?;
    let t2i = tape.matmul(txt, tape.transpose(img_cands)?)?;
    let t2i = tape.softmax_cross_entropy(tape.scale(t2i, inv_t)?, &targets)?;

    tape.scale(tape.add(i2t, t2i)?, 0.5)
}

/// For each `i`, a caption index `j ≠ i` drawn uniformly from the batch.
pub fn itm_negatives<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "image-text matching needs a batch of at least 2 for in-batch negatives".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Matched/mismatched classification over the `N` true pairs followed by
/// the `N` pairs `(image i, caption negatives[i])`. Label 1 means matched.
pub fn itm_loss(net: &Net, image_tokens: Var, text: &crate::nn::TextEncoding, negatives: &[usize]) -> Result<Var> {
    let t = net.tape;
    let n = t.shape(image_tokens)[0];
    if negatives.len() != n || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need one negative per pair and at least 2 pairs, got {} for {n}",
            negatives.len()
        )));
    }
    if negatives.iter().enumerate().any(|(i, &j)| j == i || j >= n) {
        return Err(Error::InvalidArgument(
            "negative caption must differ from the positive".into(),
        ));
    }
    let images = t.concat(&[image_tokens, image_tokens], 0)?;
    let neg_tokens = net.select_batch(text.tokens, negatives)?;
    let mut valid = text.valid.clone();
    valid.extend(negatives.iter().map(|&j| text.valid[j].clone()));
    let pairs = crate::nn::TextEncoding {
        cls: text.cls,
        tokens: t.concat(&[text.tokens, neg_tokens], 0)?,
        valid,
    };
    let fused = net.fuse(images, &pairs, true)?;
    let logits = net.itm_logits(fused)?;
    let labels: Vec<usize> = (0..2 * n).map(|k| usize::from(k < n)).collect();
    t.softmax_cross_entropy(logits, &labels)
}

/// Replaces exactly `max(1, round(rate · maskable))` non-special tokens with
/// `[MASK]`. Returns the masked sequence and the sorted masked positions.
pub fn mlm_mask<R: Rng>(ids: &[usize], rate: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    if maskable.is_empty() {
        return Err(Error::InvalidArgument("sequence has no maskable tokens".into()));
    }
    let count = ((rate * maskable.len() as f64).round() as usize).clamp(1, maskable.len());
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, maskable.len(), count)
        .into_iter()
        .map(|k| maskable[k])
        .collect();
    positions.sort_unstable();
    let mut masked = ids.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    Ok((masked, positions))
}

/// Cross-entropy at masked positions `(batch, position)` of fused states,
/// against the original token ids.
pub fn mlm_loss(net: &Net, fused: Var, targets: &[(usize, usize)], original: &[Vec<usize>]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    let labels = targets
        .iter()
        .map(|&(b, p)| {
            original
                .get(b)
                .and_then(|s| s.get(p))
                .copied()
                .ok_or(Error::IndexOutOfRange {
                    what: "masked position",
                    index: p,
                    bound: original.get(b).map_or(0, Vec::len),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = net.mlm_logits(fused, targets)?;
    net.tape.softmax_cross_entropy(logits, &labels)
}

/// Teacher-forced cross-entropy of `[ANS] … [END]` answers, averaged over
/// every predicted token in the batch.
pub fn vqa_loss(net: &Net, fused: Var, fused_valid: &[Vec<bool>], answers: &[Vec<usize>]) -> Result<Var> {
    if answers.len() != fused_valid.len() {
        return Err(Error::InvalidArgument("one answer per question required".into()));
    }
    for a in answers {
        if a.len() < 2 || a[0] != ANS || *a.last().unwrap() != END {
            return Err(Error::InvalidArgument(format!(
                "answer {a:?} must be [ANS] … [END] with at least one predicted token"
            )));
        }
    }
    let prefixes: Vec<Vec<usize>> = answers.iter().map(|a| a[..a.len() - 1].to_vec()).collect();
    let logits = net.decode_answer(fused, fused_valid, &prefixes)?;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (b, a) in answers.iter().enumerate() {
        for p in 0..a.len() - 1 {
            positions.push((b, p));
            labels.push(a[p + 1]);
        }
    }
    let rows = net.gather_positions(logits, &positions)?;
    net.tape.softmax_cross_entropy(rows, &labels)
}

/// Relative weights of the pre-training losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itc: 1.0,
            itm: 1.0,
            mlm: 1.0,
        }
    }
}

/// Scalar pre-training loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Loss nodes of one pre-training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub itc: Var,
    pub itm: Var,
    pub mlm: Var,
    pub total: Var,
    pub weights: LossWeights,
}

impl PretrainLosses {
    pub fn values(&self, tape: &Tape<f64>) -> LossBundle {
        LossBundle {
            itc: tape.item(self.itc),
            itm: tape.item(self.itm),
            mlm: tape.item(self.mlm),
            total: tape.item(self.total),
            weights: self.weights,
        }
    }
}

/// A pre-training batch with its sampled masks and ITM negatives fixed, so
/// the same batch can be evaluated more than once.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub images: Vec<Vec<f64>>,
    pub captions: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
    /// `(batch, position)` of every masked token.
    pub mlm_targets: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
}

impl PretrainBatch {
    pub fn prepare<R: Rng>(pairs: &[&CaptionPair], mask_rate: f64, rng: &mut R) -> Result<Self> {
        let mut masked = Vec::with_capacity(pairs.len());
        let mut mlm_targets = Vec::new();
        for (b, p) in pairs.iter().enumerate() {
            let (ids, pos) = mlm_mask(&p.caption_ids, mask_rate, rng)?;
            masked.push(ids);
            mlm_targets.extend(pos.into_iter().map(|q| (b, q)));
        }
        Ok(Self {
            images: pairs.iter().map(|p| p.scene.grid().to_vec()).collect(),
            captions: pairs.iter().map(|p| p.caption_ids.clone()).collect(),
            masked,
            mlm_targets,
            negatives: itm_negatives(pairs.len(), rng)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&[f64]> {
        self.images.iter().map(Vec::as_slice).collect()
    }
}

/// Contrastive settings for one pre-training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveContext<'a> {
    pub momentum: Option<(&'a Tensor, &'a Tensor)>,
    pub queue: &'a EmbeddingQueue,
    pub temperature: f64,
}

/// Builds the weighted ITC + ITM + MLM loss for one batch.
pub fn pretrain_losses(
    net: &Net,
    batch: &PretrainBatch,
    ctx: ContrastiveContext<'_>,
    weights: LossWeights,
) -> Result<PretrainLosses> {
    let t = net.tape;
    let (img_cls, img_tokens) = net.encode_image(&batch.image_refs())?;
    let text = net.encode_text(&batch.captions)?;
    let img_feat = net.image_features(img_cls)?;
    let txt_feat = net.text_features(text.cls)?;
    let itc = itc_loss(t, img_feat, txt_feat, ctx.momentum, ctx.queue, ctx.temperature)?;

    let itm = itm_loss(net, img_tokens, &text, &batch.negatives)?;

    let masked = net.encode_text(&batch.masked)?;
    let fused = net.fuse(img_tokens, &masked, true)?;
    let mlm = mlm_loss(net, fused, &batch.mlm_targets, &batch.captions)?;

    let total = t.add(
        t.add(t.scale(itc, weights.itc)?, t.scale(itm, weights.itm)?)?,
        t.scale(mlm, weights.mlm)?,
    )?;
    Ok(PretrainLosses {
        itc,
        itm,
        mlm,
        total,
        weights,
    })
}

/// A fine-tuning batch of images, questions and `[ANS] … [END]` answers.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaBatch {
    pub images: Vec<Vec<f64>>,
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
}

impl VqaBatch {
    pub fn from_samples(samples: &[&VqaSample]) -> Self {
        Self {
            images: samples.iter().map(|s| s.scene.grid().to_vec()).collect(),
            questions: samples.iter().map(|s| s.question_ids.clone()).collect(),
            answers: samples.iter().map(|s| s.answer_ids.clone()).collect(),
        }
    }

    pub fn image_refs(&self) -> Vec<&[f64]> {
        self.images.iter().map(Vec::as_slice).collect()
    }
}

/// Encodes and fuses questions with their images; returns fused states and
/// the question padding mask.
pub fn fuse_questions(net: &Net, images: &[&[f64]], questions: &[Vec<usize>]) -> Result<(Var, Vec<Vec<bool>>)> {
    let (_, img_tokens) = net.encode_image(images)?;
    let text = net.encode_text(questions)?;
    let fused = net.fuse(img_tokens, &text, true)?;
    Ok((fused, text.valid))
}

/// Fine-tuning loss for one batch.
pub fn finetune_loss(net: &Net, batch: &VqaBatch) -> Result<Var> {
    let (fused, valid) = fuse_questions(net, &batch.image_refs(), &batch.questions)?;
    vqa_loss(net, fused, &valid, &batch.answers)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthdata::CLS;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn itc_value(img: &Tensor, txt: &Tensor, queue: &EmbeddingQueue) -> f64 {
        let tape = Tape::new();
        let i = tape.leaf(img.clone());
        let t = tape.leaf(txt.clone());
        let l = itc_loss(&tape, i, t, None, queue, DEFAULT_TEMPERATURE).unwrap();
        tape.item(l)
    }

    #[test]
    fn single_pair_without_queue_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = unit_rows(&mut rng, 1, 4);
        let f = unit_rows(&mut rng, 1, 4);
        assert_eq!(itc_value(&e, &f, &EmbeddingQueue::new(8, 4)), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let img = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let txt = Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = itc_value(&img, &txt, &EmbeddingQueue::new(0, 3));
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_inputs_are_rejected() {
        let tape = Tape::new();
        let i = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2e-3]).unwrap());
        let t = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(itc_loss(&tape, i, t, None, &EmbeddingQueue::new(4, 2), 0.07).is_err());
    }

    #[test]
    fn queue_keeps_the_most_recent_entries_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = EmbeddingQueue::new(5, 3);
        let mut pushed = Vec::new();
        for _ in 0..4 {
            let a = unit_rows(&mut rng, 2, 3);
            let b = unit_rows(&mut rng, 2, 3);
            q.push(&a, &b).unwrap();
            for (x, y) in a.data().chunks(3).zip(b.data().chunks(3)) {
                pushed.push((x.to_vec(), y.to_vec()));
            }
            assert_eq!(q.len(), pushed.len().min(5));
        }
        let tail = &pushed[pushed.len() - 5..];
        for ((i, t), (ei, et)) in q.iter().zip(tail) {
            assert_eq!(i, ei.as_slice());
            assert_eq!(t, et.as_slice());
        }
        let bad = Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap();
        assert!(q.push(&bad, &bad).is_err());
    }

    #[test]
    fn negatives_never_pick_the_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..10 {
            let neg = itm_negatives(n, &mut rng).unwrap();
            assert!(neg.iter().enumerate().all(|(i, &j)| j != i && j < n));
        }
        assert!(itm_negatives(1, &mut rng).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ids = vec![CLS];
        ids.extend(6..26);
        let (masked, pos) = mlm_mask(&ids, 0.15, &mut rng).unwrap();
        assert_eq!(pos.len(), 3);
        assert!(pos.iter().all(|&p| masked[p] == MASK && p != 0));
        let (_, pos) = mlm_mask(&[CLS, 10], 0.15, &mut rng).unwrap();
        assert_eq!(pos, vec![1]);
        assert!(mlm_mask(&[CLS, crate::synthdata::SEP], 0.15, &mut rng).is_err());
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let ids: Vec<usize> = std::iter::once(CLS).chain(6..40).collect();
        let a = mlm_mask(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mlm_mask(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
