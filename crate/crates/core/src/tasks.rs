//! Synthetic tasks: copy, associative recall, phonebook lookup and byte-level
//! language modelling.
//!
//! Token 0 is padding everywhere. A batch pairs each sequence with a mask that
//! marks the positions whose token is a prediction target.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{Rng, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    AssocRecall,
    Phonebook,
    CharLm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::AssocRecall => "assoc_recall",
            TaskKind::Phonebook => "phonebook",
            TaskKind::CharLm => "char_lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "copy" => TaskKind::Copy,
            "assoc_recall" | "assoc-recall" => TaskKind::AssocRecall,
            "phonebook" => TaskKind::Phonebook,
            "char_lm" | "char-lm" => TaskKind::CharLm,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Tokens drawn by the task are below this bound.
    pub vocab: usize,
    /// Phonebook entries or recall pairs.
    pub n_entries: usize,
    /// Byte corpus for `CharLm`.
    pub corpus: Option<Vec<u8>>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa", "do", "gu", "be", "fi", "ho", "ju",
];
const NAME_SYLLABLES: usize = 2;
const DIGITS: usize = 7;
const ENTRY_LEN: usize = 2 * NAME_SYLLABLES + 1 + DIGITS + 1;
const QUERY_LEN: usize = 2 * NAME_SYLLABLES + 2;

impl TaskSpec {
    pub fn new(kind: TaskKind, seq_len: usize, vocab: usize) -> Self {
        TaskSpec {
            kind,
            seq_len,
            vocab,
            n_entries: 4,
            corpus: None,
        }
    }

    pub fn with_entries(mut self, n: usize) -> Self {
        self.n_entries = n;
        self
    }

    pub fn with_corpus(mut self, corpus: Vec<u8>) -> Self {
        self.corpus = Some(corpus);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 8 {
            return Err(invalid("task sequences need at least 8 tokens"));
        }
        match self.kind {
            TaskKind::Copy => {
                if self.vocab < 2 {
                    return Err(invalid("copy needs a vocabulary of at least 2"));
                }
            }
            TaskKind::AssocRecall => {
                let keys = (self.vocab - 1) / 2;
                if self.vocab < 5 || self.n_entries == 0 || self.n_entries > keys {
                    return Err(invalid("associative recall needs 1..=(vocab-1)/2 pairs"));
                }
                if 2 * self.n_entries + 2 > self.seq_len {
                    return Err(invalid("recall pairs and query do not fit in seq_len"));
                }
            }
            TaskKind::Phonebook => {
                if self.vocab < 128 {
                    return Err(invalid("phonebook uses ASCII and needs vocab >= 128"));
                }
                if self.n_entries == 0 || self.n_entries > SYLLABLES.len().pow(NAME_SYLLABLES as u32) {
                    return Err(invalid("phonebook entry count out of range"));
                }
                if self.n_entries * ENTRY_LEN + QUERY_LEN + DIGITS > self.seq_len {
                    return Err(invalid("phonebook entries and answer do not fit in seq_len"));
                }
            }
            TaskKind::CharLm => {
                if self.vocab < 256 {
                    return Err(invalid("byte-level modelling needs vocab >= 256"));
                }
                match &self.corpus {
                    Some(c) if c.len() > self.seq_len => {}
                    _ => return Err(invalid("corpus must be longer than seq_len")),
                }
            }
        }
        Ok(())
    }

    /// Length of the answer region; the whole second half for copy.
    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.seq_len / 2,
            TaskKind::AssocRecall => 1,
            TaskKind::Phonebook => DIGITS,
            TaskKind::CharLm => self.seq_len - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn gen_task(spec: &TaskSpec, batch: usize, seed: u64) -> Result<Batch> {
    let mut rng = SeedStream::new(seed).rng(spec.kind.name());
    gen_task_with(spec, batch, &mut rng)
}

/// Draws `batch` examples from `rng`.
pub fn gen_task_with(spec: &TaskSpec, batch: usize, rng: &mut Rng) -> Result<Batch> {
    spec.validate()?;
    let mut out = Batch {
        tokens: Vec::with_capacity(batch),
        mask: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let (t, m) = match spec.kind {
            TaskKind::Copy => copy(spec, rng),
            TaskKind::AssocRecall => recall(spec, rng),
            TaskKind::Phonebook => phonebook(spec, rng).0,
            TaskKind::CharLm => char_lm(spec, rng),
        };
        out.tokens.push(t);
        out.mask.push(m);
    }
    Ok(out)
}

fn copy(spec: &TaskSpec, rng: &mut Rng) -> (Vec<u32>, Vec<bool>) {
    let half = spec.seq_len / 2;
    let mut tokens = vec![0u32; spec.seq_len];
    let mut mask = vec![false; spec.seq_len];
    for i in 0..half {
        let tok = rng.random_range(1..spec.vocab as u32);
        tokens[i] = tok;
        tokens[half + i] = tok;
        mask[half + i] = true;
    }
    (tokens, mask)
}

fn recall(spec: &TaskSpec, rng: &mut Rng) -> (Vec<u32>, Vec<bool>) {
    let keys_n = (spec.vocab - 1) / 2;
    let mut keys: Vec<u32> = (1..=keys_n as u32).collect();
    keys.shuffle(rng);
    let mut tokens = vec![0u32; spec.seq_len];
    let mut mask = vec![false; spec.seq_len];
    let mut values = Vec::with_capacity(spec.n_entries);
    for (i, &k) in keys.iter().take(spec.n_entries).enumerate() {
        let v = rng.random_range(keys_n as u32 + 1..=2 * keys_n as u32);
        tokens[2 * i] = k;
        tokens[2 * i + 1] = v;
        values.push(v);
    }
    let pick = rng.random_range(0..spec.n_entries);
    let t = spec.seq_len;
    tokens[t - 2] = keys[pick];
    tokens[t - 1] = values[pick];
    mask[t - 1] = true;
    (tokens, mask)
}

/// A phonebook example plus the queried name and its number.
pub fn phonebook(spec: &TaskSpec, rng: &mut Rng) -> ((Vec<u32>, Vec<bool>), (String, String)) {
    let mut all: Vec<usize> = (0..SYLLABLES.len().pow(NAME_SYLLABLES as u32)).collect();
    all.shuffle(rng);
    let name = |mut idx: usize| {
        let mut s = String::new();
        for _ in 0..NAME_SYLLABLES {
            s.push_str(SYLLABLES[idx % SYLLABLES.len()]);
            idx /= SYLLABLES.len();
        }
        s
    };
    let mut text = String::new();
    let mut book = Vec::with_capacity(spec.n_entries);
    for &idx in all.iter().take(spec.n_entries) {
        let n = name(idx);
        let digits: String = (0..DIGITS).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
        text.push_str(&n);
        text.push(':');
        text.push_str(&digits);
        text.push(';');
        book.push((n, digits));
    }
    let (qn, qd) = book[rng.random_range(0..book.len())].clone();
    text.push('?');
    text.push_str(&qn);
    text.push(':');
    let answer_start = text.len();
    text.push_str(&qd);
    let mut tokens: Vec<u32> = text.bytes().map(u32::from).collect();
    let mut mask = vec![false; spec.seq_len];
    mask[answer_start..answer_start + DIGITS].iter_mut().for_each(|m| *m = true);
    tokens.resize(spec.seq_len, 0);
    ((tokens, mask), (qn, qd))
}

fn char_lm(spec: &TaskSpec, rng: &mut Rng) -> (Vec<u32>, Vec<bool>) {
    let corpus = spec.corpus.as_deref().expect("validated");
    let start = rng.random_range(0..=corpus.len() - spec.seq_len);
    let tokens = corpus[start..start + spec.seq_len].iter().map(|&b| u32::from(b)).collect();
    let mut mask = vec![true; spec.seq_len];
    mask[0] = false;
    (tokens, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_halves() {
        let b = gen_task(&TaskSpec::new(TaskKind::Copy, 16, 8), 3, 1).unwrap();
        for (t, m) in b.tokens.iter().zip(&b.mask) {
            assert_eq!(t[..8], t[8..]);
            assert!(t.iter().all(|&x| (1..8).contains(&x)));
            assert_eq!(m.iter().filter(|&&x| x).count(), 8);
            assert!(m[8..].iter().all(|&x| x));
        }
    }

    #[test]
    fn phonebook_lookup() {
        let spec = TaskSpec::new(TaskKind::Phonebook, 96, 256).with_entries(4);
        let mut rng = SeedStream::new(9).rng("pb");
        let ((tokens, mask), (name, digits)) = phonebook(&spec, &mut rng);
        let text: String = tokens.iter().take_while(|&&t| t != 0).map(|&t| char::from(t as u8)).collect();
        let (book, query) = text.split_once('?').unwrap();
        let found = book
            .split(';')
            .find_map(|e| e.strip_prefix(&alloc::format!("{name}:")))
            .unwrap();
        assert_eq!(found, digits);
        assert_eq!(book.split(';').filter(|e| !e.is_empty()).count(), 4);
        assert!(query.starts_with(&alloc::format!("{name}:")));
        let answer: String = tokens.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| char::from(t as u8)).collect();
        assert_eq!(answer, digits);
    }

    #[test]
    fn recall_answer_matches_pair() {
        let spec = TaskSpec::new(TaskKind::AssocRecall, 20, 17).with_entries(5);
        let b = gen_task(&spec, 4, 3).unwrap();
        for (t, m) in b.tokens.iter().zip(&b.mask) {
            let q = t[18];
            let i = (0..5).find(|&i| t[2 * i] == q).unwrap();
            assert_eq!(t[2 * i + 1], t[19]);
            assert_eq!(m.iter().filter(|&&x| x).count(), 1);
        }
    }

    #[test]
    fn deterministic() {
        let spec = TaskSpec::new(TaskKind::Copy, 32, 10);
        assert_eq!(gen_task(&spec, 4, 5).unwrap(), gen_task(&spec, 4, 5).unwrap());
        assert_ne!(gen_task(&spec, 4, 5).unwrap(), gen_task(&spec, 4, 6).unwrap());
    }

    #[test]
    fn rejects_oversized() {
        assert!(TaskSpec::new(TaskKind::Phonebook, 40, 256).with_entries(4).validate().is_err());
        assert!(TaskSpec::new(TaskKind::Copy, 4, 8).validate().is_err());
        assert!(TaskSpec::new(TaskKind::CharLm, 16, 256).validate().is_err());
    }
}
