use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::synthdata::{ANS, END, PAD};
use crate::Tensor;

use super::ModelConfig;

/// Additive attention-mask value for blocked keys; `exp` of it underflows to 0.
const BLOCKED: f64 = -1e9;

/// Forward-pass builder over one tape and one set of bound parameters.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub tape: &'a Tape<f64>,
    pub params: &'a BoundParams,
    pub cfg: &'a ModelConfig,
}

/// Output of the text encoder for a padded batch.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// `[B, D]` summary at position 0.
    pub cls: Var,
    /// `[B, L, D]` per-position states.
    pub tokens: Var,
    /// `valid[b][i]` is false at padding positions.
    pub valid: Vec<Vec<bool>>,
}

impl<'a> Net<'a> {
    pub fn new(tape: &'a Tape<f64>, params: &'a BoundParams, cfg: &'a ModelConfig) -> Self {
        Self { tape, params, cfg }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    fn linear(&self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn layer_norm(&self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }

    /// Multi-head attention of `xq: [B, Sq, D]` over `xkv: [B, Sk, D]`.
    /// `mask` is an additive `[B·H, Sq, Sk]` constant.
    fn attention(&self, xq: Var, xkv: Var, prefix: &str, mask: Option<Var>) -> Result<Var> {
        let t = self.tape;
        let (h, d) = (self.cfg.heads, self.cfg.width);
        let dh = d / h;
        let sq_shape = t.shape(xq);
        let sk_shape = t.shape(xkv);
        let (b, sq, sk) = (sq_shape[0], sq_shape[1], sk_shape[1]);
        if sk_shape[0] != b || sk_shape[2] != d || sq_shape[2] != d {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: sq_shape,
                rhs: sk_shape,
            });
        }
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let k = self.linear(xkv, &format!("{prefix}.k"))?;
        let v = self.linear(xkv, &format!("{prefix}.v"))?;
        let q = t.reshape(q, &[b, sq, h, dh])?;
        let q = t.permute(q, &[0, 2, 1, 3])?;
        let q = t.reshape(q, &[b * h, sq, dh])?;
        let k = t.reshape(k, &[b, sk, h, dh])?;
        let k = t.permute(k, &[0, 2, 3, 1])?;
        let k = t.reshape(k, &[b * h, dh, sk])?;
        let v = t.reshape(v, &[b, sk, h, dh])?;
        let v = t.permute(v, &[0, 2, 1, 3])?;
        let v = t.reshape(v, &[b * h, sk, dh])?;
        let scores = t.matmul(q, k)?;
        let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = t.add(scores, m)?;
        }
        let attn = t.softmax(scores)?;
        let ctx = t.matmul(attn, v)?;
        let ctx = t.reshape(ctx, &[b, h, sq, dh])?;
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[b, sq, d])?;
        self.linear(ctx, &format!("{prefix}.o"))
    }

    /// `[B·H, Sq, Sk]` mask blocking invalid keys and, if `causal`, future positions.
    fn mask(&self, key_valid: &[Vec<bool>], sq: usize, causal: bool) -> Result<Option<Var>> {
        let blocks_any = causal || key_valid.iter().flatten().any(|v| !v);
        if !blocks_any {
            return Ok(None);
        }
        let h = self.cfg.heads;
        let sk = key_valid[0].len();
        let mut data = Vec::with_capacity(key_valid.len() * h * sq * sk);
        for valid in key_valid {
            for _ in 0..h {
                for i in 0..sq {
                    for (j, &ok) in valid.iter().enumerate() {
                        let open = ok && (!causal || j <= i);
                        data.push(if open { 0.0 } else { BLOCKED });
                    }
                }
            }
        }
        let m = Tensor::new(vec![key_valid.len() * h, sq, sk], data)?;
        Ok(Some(self.tape.constant(m)))
    }

    fn ffn(&self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(x, &format!("{prefix}.fc1"))?;
        let y = self.tape.gelu(y)?;
        self.linear(y, &format!("{prefix}.fc2"))
    }

    /// Pre-norm transformer block with optional cross-attention.
    fn block(&self, x: Var, prefix: &str, self_mask: Option<Var>, cross: Option<(Var, Option<Var>)>) -> Result<Var> {
        let t = self.tape;
        let n = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(n, n, &format!("{prefix}.attn"), self_mask)?;
        let mut x = t.add(x, a)?;
        if let Some((kv, cross_mask)) = cross {
            let n = self.layer_norm(x, &format!("{prefix}.ln_cross"))?;
            let c = self.attention(n, kv, &format!("{prefix}.cross"), cross_mask)?;
            x = t.add(x, c)?;
        }
        let n = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let f = self.ffn(n, &format!("{prefix}.ffn"))?;
        t.add(x, f)
    }

    fn first_position(&self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x);
        let first = self.tape.slice(x, 1, 0, 1)?;
        self.tape.reshape(first, &[s[0], s[2]])
    }

    /// Splits each 8×8 image into 2×2 patches and runs the visual encoder.
    /// Returns (`[B, D]` summary, `[B, 1 + P, D]` tokens).
    pub fn encode_image(&self, images: &[&[f64]]) -> Result<(Var, Var)> {
        let cfg = self.cfg;
        let (side, ps) = (cfg.image_size, cfg.patch_size);
        let per_row = side / ps;
        let (np, pd, d) = (cfg.num_patches(), cfg.patch_dim(), cfg.width);
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let mut patches = Vec::with_capacity(images.len() * np * pd);
        for img in images {
            if img.len() != side * side {
                return Err(Error::InvalidShape {
                    shape: vec![img.len()],
                    reason: format!("expected a {side}×{side} image"),
                });
            }
            for p in 0..np {
                let (pr, pc) = (p / per_row, p % per_row);
                for i in 0..ps {
                    for j in 0..ps {
                        patches.push(img[(pr * ps + i) * side + pc * ps + j]);
                    }
                }
            }
        }
        let t = self.tape;
        let b = images.len();
        let x = t.constant(Tensor::new(vec![b, np, pd], patches)?);
        let x = self.linear(x, "visual.patch_embed")?;
        let cls = self.p("visual.cls")?;
        let cls = t.embedding(cls, &vec![0; b])?;
        let cls = t.reshape(cls, &[b, 1, d])?;
        let x = t.concat(&[cls, x], 1)?;
        let x = t.add(x, self.p("visual.pos")?)?;
        let mut x = x;
        for i in 0..cfg.visual_depth {
            x = self.block(x, &format!("visual.layers.{i}"), None, None)?;
        }
        let x = self.layer_norm(x, "visual.ln_final")?;
        Ok((self.first_position(x)?, x))
    }

    /// Runs the text encoder over `[CLS]`-prefixed id sequences, padding to the
    /// longest. `[PAD]` ids are masked out of attention.
    pub fn encode_text(&self, sequences: &[Vec<usize>]) -> Result<TextEncoding> {
        let cfg = self.cfg;
        let t = self.tape;
        let (ids, valid, len) = pad(sequences, cfg.max_text_len + 1, "text")?;
        for &id in &ids {
            if id >= cfg.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    bound: cfg.vocab_size,
                });
            }
        }
        let b = sequences.len();
        let x = t.embedding(self.p("text.tok_embed")?, &ids)?;
        let x = t.reshape(x, &[b, len, cfg.width])?;
        let pos = t.slice(self.p("text.pos")?, 0, 0, len)?;
        let mut x = t.add(x, pos)?;
        let mask = self.mask(&valid, len, false)?;
        for i in 0..cfg.text_depth {
            x = self.block(x, &format!("text.layers.{i}"), mask, None)?;
        }
        let x = self.layer_norm(x, "text.ln_final")?;
        Ok(TextEncoding {
            cls: self.first_position(x)?,
            tokens: x,
            valid,
        })
    }

    /// Fusion encoder: text-side self-attention plus cross-attention to the
    /// image tokens. With `image_attention` off the cross-attention branch is
    /// dropped and the output depends on the text alone.
    pub fn fuse(&self, image_tokens: Var, text: &TextEncoding, image_attention: bool) -> Result<Var> {
        let ti = self.tape.shape(image_tokens);
        let tt = self.tape.shape(text.tokens);
        if ti.len() != 3 || ti[0] != tt[0] || ti[2] != tt[2] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: ti,
                rhs: tt,
            });
        }
        let mask = self.mask(&text.valid, tt[1], false)?;
        let mut x = text.tokens;
        for i in 0..self.cfg.fusion_depth {
            let cross = image_attention.then_some((image_tokens, None));
            x = self.block(x, &format!("fusion.layers.{i}"), mask, cross)?;
        }
        self.layer_norm(x, "fusion.ln_final")
    }

    /// Next-token logits `[B, P, V]` for `[ANS]`-prefixed answer prefixes,
    /// conditioned on fused question-image states `[B, L, D]`. Position `i`
    /// sees only prefix positions `≤ i`.
    pub fn decode_answer(&self, fused: Var, fused_valid: &[Vec<bool>], prefixes: &[Vec<usize>]) -> Result<Var> {
        let cfg = self.cfg;
        let t = self.tape;
        if prefixes.iter().any(|p| p.first() != Some(&ANS)) {
            return Err(Error::InvalidArgument("answer prefix must start with [ANS]".into()));
        }
        let (ids, valid, len) = pad(prefixes, cfg.max_answer_len, "answer")?;
        let b = prefixes.len();
        let x = t.embedding(self.p("decoder.tok_embed")?, &ids)?;
        let x = t.reshape(x, &[b, len, cfg.width])?;
        let pos = t.slice(self.p("decoder.pos")?, 0, 0, len)?;
        let mut x = t.add(x, pos)?;
        let self_mask = self.mask(&valid, len, true)?;
        let cross_mask = self.mask(fused_valid, len, false)?;
        for i in 0..cfg.decoder_depth {
            x = self.block(x, &format!("decoder.layers.{i}"), self_mask, Some((fused, cross_mask)))?;
        }
        let x = self.layer_norm(x, "decoder.ln_final")?;
        self.linear(x, "decoder.head")
    }

    /// Greedy decoding from `[ANS]`, appending the arg-max token until every
    /// sequence has produced `[END]` or the length limit is hit. Sequences
    /// keep their leading `[ANS]` and, when produced, the trailing `[END]`.
    pub fn greedy_decode(&self, fused: Var, fused_valid: &[Vec<bool>]) -> Result<Vec<Vec<usize>>> {
        let b = fused_valid.len();
        let v = self.cfg.vocab_size;
        let mut seqs = vec![vec![ANS]; b];
        let mut done = vec![false; b];
        for len in 1..self.cfg.max_answer_len {
            let logits = self.decode_answer(fused, fused_valid, &seqs)?;
            let next: Vec<usize> = self.tape.with_data(logits, |data| {
                (0..b)
                    .map(|i| {
                        let row = &data[(i * len + len - 1) * v..(i * len + len) * v];
                        argmax(row)
                    })
                    .collect()
            });
            for i in 0..b {
                // finished rows keep growing so all prefixes share one length
                seqs[i].push(if done[i] { END } else { next[i] });
                done[i] |= next[i] == END;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        for s in &mut seqs {
            if let Some(p) = s.iter().position(|&t| t == END) {
                s.truncate(p + 1);
            }
        }
        Ok(seqs)
    }

    /// Unit-norm contrastive image features `[B, C]`.
    pub fn image_features(&self, cls: Var) -> Result<Var> {
        let z = self.linear(cls, "img_proj")?;
        self.tape.normalize_rows(z)
    }

    pub fn text_features(&self, cls: Var) -> Result<Var> {
        let z = self.linear(cls, "txt_proj")?;
        self.tape.normalize_rows(z)
    }

    /// Match/mismatch logits `[B, 2]` from the fused summary position.
    pub fn itm_logits(&self, fused: Var) -> Result<Var> {
        let first = self.first_position(fused)?;
        self.linear(first, "itm_head")
    }

    /// Vocabulary logits `[M, V]` at the given `(batch, position)` pairs.
    pub fn mlm_logits(&self, fused: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let rows = self.gather_positions(fused, positions)?;
        self.linear(rows, "mlm_head")
    }

    /// Rows `[M, D]` of a `[B, L, D]` tensor at `(batch, position)` pairs.
    pub fn gather_positions(&self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let s = self.tape.shape(x);
        let (b, l, d) = (s[0], s[1], s[2]);
        let flat = self.tape.reshape(x, &[b * l, d])?;
        let ids: Vec<usize> = positions
            .iter()
            .map(|&(bi, pi)| {
                if bi >= b || pi >= l {
                    Err(Error::IndexOutOfRange {
                        what: "position",
                        index: bi * l + pi,
                        bound: b * l,
                    })
                } else {
                    Ok(bi * l + pi)
                }
            })
            .collect::<Result<_>>()?;
        self.tape.embedding(flat, &ids)
    }

    /// Batch rows `idx` of a `[B, ...]` tensor.
    pub fn select_batch(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.tape.shape(x);
        let rest: usize = s[1..].iter().product();
        let flat = self.tape.reshape(x, &[s[0], rest])?;
        let picked = self.tape.embedding(flat, idx)?;
        let mut shape = s;
        shape[0] = idx.len();
        self.tape.reshape(picked, &shape)
    }
}

/// First index of the largest value.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Pads sequences with `[PAD]` to the longest length; errors past `max_len`.
fn pad(seqs: &[Vec<usize>], max_len: usize, what: &str) -> Result<(Vec<usize>, Vec<Vec<bool>>, usize)> {
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("empty {what} batch or sequence")));
    }
    let len = seqs.iter().map(Vec::len).max().unwrap();
    if len > max_len {
        return Err(Error::InvalidArgument(format!(
            "{what} sequence of length {len} exceeds the maximum of {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut v: Vec<bool> = s.iter().map(|&id| id != PAD).collect();
        v.resize(len, false);
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        valid.push(v);
    }
    Ok((ids, valid, len))
}
