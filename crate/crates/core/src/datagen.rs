//! Synthetic corpora: a text continuation task over a stochastic grammar and
//! a grid-image question task whose answers need the image.
//!
//! Vocabulary layout (64 ids):
//! `0` EOS · `1..=8` colors · `9..=18` digits · `19..=26` system/template ·
//! `27..=63` grammar ("function words").

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngState};
use crate::target::{AssembledSequence, EOS, ImagePatchGrid, TargetParams, TextRole, TextToken};
use crate::tensor::Matrix;

pub const VOCAB: usize = 64;
pub const COLORS: std::ops::RangeInclusive<usize> = 1..=8;
pub const NUM_COLORS: usize = 8;
pub const DIGIT_BASE: usize = 9;
pub const SYS_A: usize = 19;
pub const SYS_B: usize = 20;
pub const Q_TEXT: usize = 21;
pub const Q_CELL: usize = 22;
pub const Q_ROW: usize = 23;
pub const Q_COUNT: usize = 24;
pub const GRAMMAR_START: usize = 27;
pub const GRAMMAR_END: usize = 64;
pub const PATCH_DIM: usize = 8;
pub const PATCH_NOISE: f64 = 0.05;

/// Grammar words per sentence before EOS is forced.
pub const MAX_WORDS: usize = 20;
const TERMINALS: usize = 8;
const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.25, 0.15];

pub fn color_token(c: usize) -> usize {
    1 + c
}

pub fn digit_token(d: usize) -> usize {
    DIGIT_BASE + d
}

pub fn is_color(t: usize) -> bool {
    COLORS.contains(&t)
}

pub fn is_grammar(t: usize) -> bool {
    (GRAMMAR_START..GRAMMAR_END).contains(&t)
}

/// First-order chain over grammar tokens: each token has three successors
/// with fixed probabilities. A few "terminal" words have EOS as their most
/// likely successor, so sentence length varies and ending is a property of
/// the language rather than of position.
#[derive(Clone, Debug)]
pub struct Grammar {
    seed: u64,
    terminal: Vec<bool>,
}

impl Grammar {
    pub fn new(seed: u64) -> Self {
        let n = GRAMMAR_END - GRAMMAR_START;
        let mut rng = RngState::derive(seed, u64::MAX);
        let mut terminal = vec![false; n];
        for i in rand::seq::index::sample(&mut rng, n, TERMINALS) {
            terminal[i] = true;
        }
        Self { seed, terminal }
    }

    pub fn is_terminal(&self, t: usize) -> bool {
        is_grammar(t) && self.terminal[t - GRAMMAR_START]
    }

    pub fn successors(&self, prev: usize) -> [usize; 3] {
        let mut rng = RngState::derive(self.seed, prev as u64);
        let n = GRAMMAR_END - GRAMMAR_START;
        let mut out = [EOS; 3];
        let mut k = usize::from(self.is_terminal(prev));
        while k < 3 {
            let t = GRAMMAR_START + rng.random_range(0..n);
            if !out[..k].contains(&t) {
                out[k] = t;
                k += 1;
            }
        }
        out
    }

    pub fn next(&self, prev: usize, rng: &mut RngState) -> usize {
        let s = self.successors(prev);
        let u = rng.uniform();
        let mut cum = 0.0;
        for (i, p) in SUCCESSOR_PROBS.iter().enumerate() {
            cum += p;
            if u < cum {
                return s[i];
            }
        }
        s[2]
    }

    /// Continues the chain from `prev` until EOS; EOS is forced after
    /// `max_words` words. The returned sentence always ends with EOS.
    pub fn sentence(&self, mut prev: usize, max_words: usize, rng: &mut RngState) -> Vec<usize> {
        let mut out = Vec::new();
        while out.len() < max_words {
            prev = self.next(prev, rng);
            if prev == EOS {
                break;
            }
            out.push(prev);
        }
        out.push(EOS);
        out
    }

    fn random_token(rng: &mut RngState) -> usize {
        GRAMMAR_START + rng.random_range(0..GRAMMAR_END - GRAMMAR_START)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridImage {
    pub side: usize,
    /// Color token per cell, row-major.
    pub colors: Vec<usize>,
}

impl GridImage {
    /// Patch features: scaled one-hot color + positional offset + noise.
    /// The noise is seeded from the colors, so features are recomputable.
    pub fn patch_features(&self) -> Result<ImagePatchGrid> {
        let m = self.side * self.side;
        if self.colors.len() != m || !self.colors.iter().all(|&c| is_color(c)) {
            return Err(Error::InvalidArgument("grid colors must be color tokens, side² of them".into()));
        }
        let key = self.colors.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &c| {
            (h ^ c as u64).wrapping_mul(0x0100_0000_01b3)
        });
        let mut rng = RngState::derive(key, self.side as u64);
        let noise = Normal::new(0.0, PATCH_NOISE).expect("finite");
        let mut patches = Matrix::zeros(m, PATCH_DIM);
        for (k, &c) in self.colors.iter().enumerate() {
            let row = patches.row_mut(k);
            row[c - 1] += 2.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x += 0.3 * ((k * 7 + j * 3) as f64).cos() + noise.sample(&mut rng);
            }
        }
        ImagePatchGrid::new(self.side, patches)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Text,
    Cell,
    Row,
    Count,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub system: Vec<usize>,
    pub image: Option<GridImage>,
    pub instruction: Vec<usize>,
    pub answer: Vec<usize>,
}

impl InstructionExample {
    pub fn kind(&self) -> QuestionKind {
        match self.instruction.first() {
            Some(&Q_CELL) => QuestionKind::Cell,
            Some(&Q_ROW) => QuestionKind::Row,
            Some(&Q_COUNT) => QuestionKind::Count,
            _ => QuestionKind::Text,
        }
    }

    pub fn grid(&self) -> Result<Option<ImagePatchGrid>> {
        self.image.as_ref().map(GridImage::patch_features).transpose()
    }

    /// Prompt: `[system | image | instruction]`.
    pub fn prompt(&self, target: &TargetParams) -> Result<AssembledSequence> {
        let grid = self.grid()?;
        target.assemble_sequence(
            &TextToken::list(&self.system, TextRole::System),
            grid.as_ref(),
            &TextToken::list(&self.instruction, TextRole::Instruction),
        )
    }

    /// Prompt followed by the reference answer.
    pub fn full_sequence(&self, target: &TargetParams) -> Result<AssembledSequence> {
        let mut seq = self.prompt(target)?;
        seq.extend_text(&self.answer, target)?;
        Ok(seq)
    }

    /// Index in `answer` of the first color or digit the image determines.
    pub fn visual_answer_index(&self) -> Option<usize> {
        (self.kind() != QuestionKind::Text).then_some(0)
    }

    /// Cell index, row index or color token the question is about.
    pub fn operand(&self) -> Option<usize> {
        match self.kind() {
            QuestionKind::Text => None,
            QuestionKind::Cell | QuestionKind::Row => self.instruction.last().map(|d| d - DIGIT_BASE),
            QuestionKind::Count => self.instruction.last().copied(),
        }
    }
}

fn system_tokens() -> Vec<usize> {
    vec![SYS_A, SYS_B]
}

pub fn text_example(grammar: &Grammar, rng: &mut RngState) -> InstructionExample {
    let (a, b) = (Grammar::random_token(rng), Grammar::random_token(rng));
    let answer = grammar.sentence(b, MAX_WORDS, rng);
    InstructionExample {
        system: system_tokens(),
        image: None,
        instruction: vec![Q_TEXT, a, b],
        answer,
    }
}

/// Instruction `[Q, a, b, operand]`; answer = the image-determined token(s),
/// then a sentence continuing from `b`.
pub fn visual_example(grammar: &Grammar, side: usize, rng: &mut RngState) -> InstructionExample {
    let m = side * side;
    let colors: Vec<usize> = (0..m).map(|_| color_token(rng.random_range(0..NUM_COLORS))).collect();
    let (a, b) = (Grammar::random_token(rng), Grammar::random_token(rng));
    let u = rng.uniform();
    let (question, operand, visual) = if u < 0.6 {
        let k = rng.random_range(0..m);
        (Q_CELL, digit_token(k), vec![colors[k]])
    } else if u < 0.8 {
        let r = rng.random_range(0..side);
        (Q_ROW, digit_token(r), colors[r * side..(r + 1) * side].to_vec())
    } else {
        let c = color_token(rng.random_range(0..NUM_COLORS));
        let count = colors.iter().filter(|&&x| x == c).count();
        (Q_COUNT, c, vec![digit_token(count)])
    };
    let mut answer = visual;
    answer.extend(grammar.sentence(b, MAX_WORDS, rng));
    InstructionExample {
        system: system_tokens(),
        image: Some(GridImage { side, colors }),
        instruction: vec![question, a, b, operand],
        answer,
    }
}

/// `count` text examples; example `i` uses its own stream derived from `seed`.
pub fn gen_text_corpus(count: usize, grammar_seed: u64, seed: u64) -> Result<Vec<InstructionExample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let g = Grammar::new(grammar_seed);
    Ok((0..count)
        .map(|i| text_example(&g, &mut RngState::derive(seed, i as u64)))
        .collect())
}

pub fn gen_visual_corpus(count: usize, side: usize, grammar_seed: u64, seed: u64) -> Result<Vec<InstructionExample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if side == 0 || side * side > 10 {
        return Err(Error::InvalidArgument("grid side must be 1..=3 (cell indices are single digits)".into()));
    }
    let g = Grammar::new(grammar_seed);
    Ok((0..count)
        .map(|i| visual_example(&g, side, &mut RngState::derive(seed, i as u64)))
        .collect())
}

/// Seed-stable 90/10 split: `true` for held-out examples.
pub fn is_held_out(seed: u64, index: usize) -> bool {
    derive_seed(seed ^ 0x5eed, index as u64).is_multiple_of(10)
}

pub fn split(corpus: &[InstructionExample], seed: u64) -> (Vec<InstructionExample>, Vec<InstructionExample>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, ex) in corpus.iter().enumerate() {
        if is_held_out(seed, i) {
            held.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    (train, held)
}

pub fn write_jsonl<W: Write>(examples: &[InstructionExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
