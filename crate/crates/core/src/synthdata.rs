//! Deterministic "shape-world" data: 8×8 images holding one or two simple
//! shapes, with templated captions and yes/no or one-word VQA questions.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`, with independent streams selected by `set_stream`:
//! stream 1 for pre-training scenes, 2 for VQA train, 3 for VQA validation.
//! ChaCha is a counter-based generator whose output is specified bit-for-bit,
//! so the same seed yields the same corpus on every platform.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID: usize = 8;
pub const DIM_LEVEL: f64 = 0.4;
pub const BRIGHT_LEVEL: f64 = 0.9;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const ANS: usize = 3;
pub const END: usize = 4;
pub const SEP: usize = 5;

const SPECIALS: [&str; 6] = ["[PAD]", "[CLS]", "[MASK]", "[ANS]", "[END]", "[SEP]"];
const CONTENT: [&str; 40] = [
    "square",
    "cross",
    "diag",
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "dim",
    "bright",
    "yes",
    "no",
    "is",
    "there",
    "a",
    "what",
    "shape",
    "at",
    "where",
    "the",
    "any",
    "in",
    "of",
    "image",
    "how",
    "many",
    "shapes",
    "one",
    "two",
    "object",
    "which",
    "quadrant",
    "contains",
    "it",
    "and",
    "with",
    "are",
    "to",
    "see",
    "this",
    "corner",
];

/// Fixed word list: specials at ids 0..6, then content words.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        Self {
            words: SPECIALS.iter().chain(CONTENT.iter()).copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown word `{word}`")))
    }

    pub fn word(&self, id: usize) -> Result<&'static str> {
        self.words.get(id).copied().ok_or(Error::IndexOutOfRange {
            what: "vocabulary id",
            index: id,
            bound: self.words.len(),
        })
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Word ids; `[PAD]` is reserved for batching and rejected here.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| match w.as_ref() {
                "[PAD]" => Err(Error::InvalidArgument("[PAD] cannot be tokenized".into())),
                w => self.id(w),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<&'static str>> {
        ids.iter().map(|&i| self.word(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Square,
    Cross,
    Diag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Brightness {
    Dim,
    Bright,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Cross, ShapeKind::Diag];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Cross => "cross",
            ShapeKind::Diag => "diag",
        }
    }

    /// Pixel offsets relative to the shape's top-left corner.
    pub fn pixels(self) -> &'static [(usize, usize)] {
        match self {
            ShapeKind::Square => &[(0, 0), (0, 1), (1, 0), (1, 1)],
            ShapeKind::Cross => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
            ShapeKind::Diag => &[(0, 0), (1, 1), (2, 2)],
        }
    }

    /// Largest offset (per axis) that keeps the shape inside a 4×4 quadrant.
    pub fn max_offset(self) -> usize {
        match self {
            ShapeKind::Square => 2,
            ShapeKind::Cross | ShapeKind::Diag => 1,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::BottomRight => "bottom-right",
        }
    }

    pub fn origin(self) -> (usize, usize) {
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, 4),
            Quadrant::BottomLeft => (4, 0),
            Quadrant::BottomRight => (4, 4),
        }
    }
}

impl Brightness {
    pub fn word(self) -> &'static str {
        match self {
            Brightness::Dim => "dim",
            Brightness::Bright => "bright",
        }
    }

    pub fn level(self) -> f64 {
        match self {
            Brightness::Dim => DIM_LEVEL,
            Brightness::Bright => BRIGHT_LEVEL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub quadrant: Quadrant,
    pub brightness: Brightness,
    /// (row, col) offset of the shape inside its quadrant.
    pub offset: (usize, usize),
}

/// One or two shapes in distinct quadrants, sorted by quadrant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    shapes: Vec<PlacedShape>,
    grid: Vec<f64>,
}

impl ShapeScene {
    pub fn new(mut shapes: Vec<PlacedShape>) -> Result<Self> {
        if shapes.is_empty() || shapes.len() > 2 {
            return Err(Error::InvalidArgument("a scene holds one or two shapes".into()));
        }
        shapes.sort_by_key(|s| s.quadrant);
        if shapes.windows(2).any(|w| w[0].quadrant == w[1].quadrant) {
            return Err(Error::InvalidArgument("shapes must occupy distinct quadrants".into()));
        }
        let mut grid = vec![0.0; GRID * GRID];
        for s in &shapes {
            let (dy, dx) = s.offset;
            if dy > s.kind.max_offset() || dx > s.kind.max_offset() {
                return Err(Error::InvalidArgument(format!(
                    "offset {:?} leaves the quadrant",
                    s.offset
                )));
            }
            let (r0, c0) = s.quadrant.origin();
            for &(r, c) in s.kind.pixels() {
                grid[(r0 + dy + r) * GRID + c0 + dx + c] = s.brightness.level();
            }
        }
        Ok(Self { shapes, grid })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let count = rng.gen_range(1..=2);
        let quadrants: Vec<Quadrant> = Quadrant::ALL.choose_multiple(rng, count).copied().collect();
        let shapes = quadrants
            .into_iter()
            .map(|quadrant| {
                let kind = ShapeKind::ALL[rng.gen_range(0..3)];
                let brightness = if rng.gen::<bool>() {
                    Brightness::Bright
                } else {
                    Brightness::Dim
                };
                let max = kind.max_offset();
                let offset = (rng.gen_range(0..=max), rng.gen_range(0..=max));
                PlacedShape {
                    kind,
                    quadrant,
                    brightness,
                    offset,
                }
            })
            .collect();
        Self::new(shapes).expect("random scene is valid")
    }

    pub fn shapes(&self) -> &[PlacedShape] {
        &self.shapes
    }

    /// Row-major 8×8 intensities in [0, 1].
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn shape_at(&self, q: Quadrant) -> Option<&PlacedShape> {
        self.shapes.iter().find(|s| s.quadrant == q)
    }

    pub fn count(&self, kind: ShapeKind) -> usize {
        self.shapes.iter().filter(|s| s.kind == kind).count()
    }

    /// Caption words, e.g. `bright square top-left [SEP] dim cross bottom-right`.
    pub fn caption_words(&self) -> Vec<&'static str> {
        let mut words = Vec::new();
        for (i, s) in self.shapes.iter().enumerate() {
            if i > 0 {
                words.push("[SEP]");
            }
            words.extend([s.brightness.word(), s.kind.word(), s.quadrant.word()]);
        }
        words
    }

    /// Key identifying the rendered image.
    pub fn grid_key(&self) -> Vec<u64> {
        self.grid.iter().map(|x| x.to_bits()).collect()
    }
}

/// Image-caption pair for pre-training. `caption_ids` starts with `[CLS]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub scene: ShapeScene,
    pub caption_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Open,
    Closed,
}

/// `question_ids` starts with `[CLS]`; `answer_ids` is `[ANS] word [END]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub scene: ShapeScene,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub question_type: QuestionType,
}

impl VqaSample {
    /// Answer tokens between `[ANS]` and `[END]`.
    pub fn answer_words(&self) -> &[usize] {
        &self.answer_ids[1..self.answer_ids.len() - 1]
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn with_cls(vocab: &Vocab, words: &[&str]) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(words).expect("template words are in the vocabulary"));
    ids
}

pub fn gen_pretrain_set(seed: u64, n: usize) -> Vec<CaptionPair> {
    let vocab = Vocab::standard();
    let mut rng = stream_rng(seed, 1);
    (0..n)
        .map(|_| {
            let scene = ShapeScene::random(&mut rng);
            let caption_ids = with_cls(&vocab, &scene.caption_words());
            CaptionPair { scene, caption_ids }
        })
        .collect()
}

/// Builds a question about `scene`, half closed (yes/no) and half open.
fn make_question(scene: &ShapeScene, rng: &mut impl Rng) -> (Vec<&'static str>, &'static str, QuestionType) {
    if rng.gen::<bool>() {
        let want_yes = rng.gen::<bool>();
        if rng.gen::<bool>() {
            // is there a {shape}
            let candidates: Vec<ShapeKind> = ShapeKind::ALL
                .iter()
                .copied()
                .filter(|&k| (scene.count(k) > 0) == want_yes)
                .collect();
            let kind = *candidates.choose(rng).expect("a scene never holds all three kinds");
            let answer = if want_yes { "yes" } else { "no" };
            (vec!["is", "there", "a", kind.word()], answer, QuestionType::Closed)
        } else {
            // is there a {shape} at {quadrant}
            let (kind, quadrant) = if want_yes {
                let s = scene.shapes().choose(rng).expect("non-empty scene");
                (s.kind, s.quadrant)
            } else {
                let q = *Quadrant::ALL.choose(rng).unwrap();
                let present = scene.shape_at(q).map(|s| s.kind);
                let options: Vec<ShapeKind> = ShapeKind::ALL.iter().copied().filter(|&k| Some(k) != present).collect();
                (*options.choose(rng).unwrap(), q)
            };
            let answer = if want_yes { "yes" } else { "no" };
            (
                vec!["is", "there", "a", kind.word(), "at", quadrant.word()],
                answer,
                QuestionType::Closed,
            )
        }
    } else {
        let unique: Vec<&PlacedShape> = scene.shapes().iter().filter(|s| scene.count(s.kind) == 1).collect();
        if rng.gen::<bool>() || unique.is_empty() {
            // what shape is at {quadrant}
            let s = scene.shapes().choose(rng).expect("non-empty scene");
            (
                vec!["what", "shape", "is", "at", s.quadrant.word()],
                s.kind.word(),
                QuestionType::Open,
            )
        } else {
            // where is the {shape}
            let s = unique.choose(rng).unwrap();
            (
                vec!["where", "is", "the", s.kind.word()],
                s.quadrant.word(),
                QuestionType::Open,
            )
        }
    }
}

fn vqa_sample(vocab: &Vocab, scene: ShapeScene, rng: &mut impl Rng) -> VqaSample {
    let (question, answer, question_type) = make_question(&scene, rng);
    VqaSample {
        question_ids: with_cls(vocab, &question),
        answer_ids: vec![ANS, vocab.id(answer).unwrap(), END],
        question_type,
        scene,
    }
}

/// Train and validation VQA splits; no validation image appears in train.
pub fn gen_vqa_set(seed: u64, n_train: usize, n_val: usize) -> Result<(Vec<VqaSample>, Vec<VqaSample>)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("VQA splits must be non-empty".into()));
    }
    let vocab = Vocab::standard();
    let mut rng = stream_rng(seed, 2);
    let train: Vec<VqaSample> = (0..n_train)
        .map(|_| {
            let scene = ShapeScene::random(&mut rng);
            vqa_sample(&vocab, scene, &mut rng)
        })
        .collect();
    let seen: HashSet<Vec<u64>> = train.iter().map(|s| s.scene.grid_key()).collect();
    let mut rng = stream_rng(seed, 3);
    let mut val = Vec::with_capacity(n_val);
    while val.len() < n_val {
        let scene = ShapeScene::random(&mut rng);
        if seen.contains(&scene.grid_key()) {
            continue;
        }
        val.push(vqa_sample(&vocab, scene, &mut rng));
    }
    Ok((train, val))
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    kind: &'static str,
    grid: &'a [f64],
    caption_ids: &'a [usize],
}

#[derive(Serialize)]
struct VqaRecord<'a> {
    kind: &'static str,
    split: &'a str,
    question_type: QuestionType,
    grid: &'a [f64],
    question_ids: &'a [usize],
    answer_ids: &'a [usize],
}

/// Writes one JSON object per line.
pub fn export_pretrain_jsonl(pairs: &[CaptionPair], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let rec = PretrainRecord {
            kind: "pretrain",
            grid: p.scene.grid(),
            caption_ids: &p.caption_ids,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_vqa_jsonl(split: &str, samples: &[VqaSample], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let rec = VqaRecord {
            kind: "vqa",
            split,
            question_type: s.question_type,
            grid: s.scene.grid(),
            question_ids: &s.question_ids,
            answer_ids: &s.answer_ids,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout() {
        let v = Vocab::standard();
        assert_eq!(v.len(), 46);
        assert_eq!(v.id("[PAD]").unwrap(), PAD);
        assert_eq!(v.id("[MASK]").unwrap(), MASK);
        assert_eq!(v.id("[SEP]").unwrap(), SEP);
        assert!(Vocab::is_special(SEP) && !Vocab::is_special(v.id("square").unwrap()));
    }

    #[test]
    fn tokenize_round_trip_and_errors() {
        let v = Vocab::standard();
        for id in 1..v.len() {
            let w = v.word(id).unwrap();
            let ids = v.tokenize(&[w]).unwrap();
            assert_eq!(v.detokenize(&ids).unwrap(), vec![w]);
            assert!(!ids.contains(&PAD));
        }
        assert!(v.tokenize(&["giraffe"]).is_err());
        assert!(v.tokenize(&["[PAD]"]).is_err());
        assert!(v.detokenize(&[999]).is_err());
    }

    #[test]
    fn scenes_reject_overlap_and_bad_offsets() {
        let s = |q, off| PlacedShape {
            kind: ShapeKind::Cross,
            quadrant: q,
            brightness: Brightness::Dim,
            offset: off,
        };
        assert!(ShapeScene::new(vec![s(Quadrant::TopLeft, (0, 0)), s(Quadrant::TopLeft, (1, 1))]).is_err());
        assert!(ShapeScene::new(vec![s(Quadrant::TopLeft, (2, 0))]).is_err());
        assert!(ShapeScene::new(vec![]).is_err());
    }

    #[test]
    fn caption_format() {
        let scene = ShapeScene::new(vec![
            PlacedShape {
                kind: ShapeKind::Cross,
                quadrant: Quadrant::BottomRight,
                brightness: Brightness::Dim,
                offset: (0, 0),
            },
            PlacedShape {
                kind: ShapeKind::Square,
                quadrant: Quadrant::TopLeft,
                brightness: Brightness::Bright,
                offset: (1, 2),
            },
        ])
        .unwrap();
        assert_eq!(
            scene.caption_words().join(" "),
            "bright square top-left [SEP] dim cross bottom-right"
        );
        assert_eq!(scene.grid()[GRID + 2], BRIGHT_LEVEL);
        assert_eq!(scene.grid()[4 * GRID + 5], DIM_LEVEL);
    }

    #[test]
    fn empty_vqa_split_is_rejected() {
        assert!(gen_vqa_set(0, 0, 5).is_err());
    }
}
