//! Synthetic parallel corpora, TSV loading, vocabulary, and batching.
//!
//! The stock task is sequence reversal through a fixed token bijection:
//! the source is a uniform random token sequence, the target is the source
//! reversed with every token remapped. Reversal forces non-trivial
//! cross-attention; a plain copy task is kept as an easier alternative.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{counter_rng, Stream};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Counter values for the data stream, so corpus generation, the token
/// bijection, and per-epoch shuffles never share a generator.
const CTR_CORPUS: u64 = 1 << 40;
const CTR_BIJECTION: u64 = (1 << 40) + 1;

/// Token table with fixed reserved ids pad=0, bos=1, eos=2, unk=3.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn new() -> Self {
        let mut v = Vocab { token_to_id: HashMap::new(), id_to_token: Vec::new() };
        for t in RESERVED {
            v.token_to_id.insert(t.to_string(), v.id_to_token.len() as u32);
            v.id_to_token.push(t.to_string());
        }
        v
    }

    /// Vocabulary over every token in `seqs`, ids assigned in first
    /// appearance order after the reserved ids.
    pub fn build<'a>(seqs: impl Iterator<Item = &'a [String]>) -> Self {
        let mut v = Vocab::new();
        for seq in seqs {
            for tok in seq {
                if !v.token_to_id.contains_key(tok) {
                    v.token_to_id.insert(tok.clone(), v.id_to_token.len() as u32);
                    v.id_to_token.push(tok.clone());
                }
            }
        }
        v
    }

    /// Id for a token; unknown tokens map to [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }
}

/// One sentence pair as token ids, without bos/eos markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitId::Train => write!(f, "train"),
            SplitId::Dev => write!(f, "dev"),
            SplitId::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "dev" => Ok(SplitId::Dev),
            "test" => Ok(SplitId::Test),
            other => Err(Error::usage(format!("unknown split '{}'", other))),
        }
    }
}

/// A parallel corpus with a fixed 90/5/5 train/dev/test split and
/// vocabularies built from the train split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl Corpus {
    pub fn split(&self, id: SplitId) -> &[Pair] {
        match id {
            SplitId::Train => &self.train,
            SplitId::Dev => &self.dev,
            SplitId::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_sentence_len(&self) -> usize {
        [&self.train, &self.dev, &self.test]
            .iter()
            .flat_map(|s| s.iter())
            .map(|p| p.src.len().max(p.tgt.len()))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Reversal,
    Copy,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Reversal => write!(f, "reversal"),
            TaskKind::Copy => write!(f, "copy"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reversal" => Ok(TaskKind::Reversal),
            "copy" => Ok(TaskKind::Copy),
            other => Err(Error::usage(format!("unknown task '{}'", other))),
        }
    }
}

/// Split sizes for n pairs: dev and test take floor(5%) each.
fn split_sizes(n: usize) -> Result<(usize, usize)> {
    let held = n / 20;
    if held == 0 {
        return Err(Error::usage(format!(
            "corpus of {} pairs is too small for a 90/5/5 split (need >= 20)",
            n
        )));
    }
    Ok((n - 2 * held, held))
}

/// Build a corpus from string pairs: split first, then build vocabularies
/// from the train split only, mapping unseen dev/test tokens to unk.
fn assemble(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Corpus> {
    let (n_train, held) = split_sizes(pairs.len())?;
    let src_vocab = Vocab::build(pairs[..n_train].iter().map(|(s, _)| s.as_slice()));
    let tgt_vocab = Vocab::build(pairs[..n_train].iter().map(|(_, t)| t.as_slice()));
    let encode = |chunk: &[(Vec<String>, Vec<String>)]| {
        chunk
            .iter()
            .map(|(s, t)| Pair {
                src: s.iter().map(|w| src_vocab.id(w)).collect(),
                tgt: t.iter().map(|w| tgt_vocab.id(w)).collect(),
            })
            .collect::<Vec<_>>()
    };
    Ok(Corpus {
        train: encode(&pairs[..n_train]),
        dev: encode(&pairs[n_train..n_train + held]),
        test: encode(&pairs[n_train + held..]),
        src_vocab,
        tgt_vocab,
    })
}

/// Generate a synthetic translation task. Sources are distinct uniform
/// random sequences; reversal targets are the reversed source mapped
/// through a fixed seeded bijection over the token set.
pub fn gen_task(
    kind: TaskKind,
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
    n_pairs: usize,
    seed: u64,
) -> Result<Corpus> {
    if vocab_size < 8 {
        return Err(Error::usage(format!("vocab_size must be >= 8, got {}", vocab_size)));
    }
    let (lo, hi) = (*len_range.start(), *len_range.end());
    if lo == 0 || lo > hi {
        return Err(Error::usage(format!("bad length range {}..={}", lo, hi)));
    }
    split_sizes(n_pairs)?;

    let tokens: Vec<String> = (0..vocab_size).map(|i| format!("t{}", i)).collect();
    let mut bijection: Vec<usize> = (0..vocab_size).collect();
    bijection.shuffle(&mut counter_rng(seed, Stream::Data, CTR_BIJECTION));

    let mut rng = counter_rng(seed, Stream::Data, CTR_CORPUS);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    let max_attempts = n_pairs.saturating_mul(100).max(10_000);
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::usage(format!(
                "could not generate {} distinct sequences from vocab {} lengths {}..={}",
                n_pairs, vocab_size, lo, hi
            )));
        }
        let len = rng.gen_range(lo..=hi);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt: Vec<usize> = match kind {
            TaskKind::Reversal => src.iter().rev().map(|&i| bijection[i]).collect(),
            TaskKind::Copy => src.clone(),
        };
        pairs.push((
            src.iter().map(|&i| tokens[i].clone()).collect(),
            tgt.iter().map(|&i| tokens[i].clone()).collect(),
        ));
    }
    assemble(pairs)
}

pub fn gen_reversal_task(
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
    n_pairs: usize,
    seed: u64,
) -> Result<Corpus> {
    gen_task(TaskKind::Reversal, vocab_size, len_range, n_pairs, seed)
}

/// Load a whitespace-tokenized TSV corpus: one pair per line, source then
/// target separated by a single tab.
pub fn load_tsv_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {}", path.display(), e)))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!("{}:{}: expected TAB-separated pair", path.display(), lineno + 1))
        })?;
        pairs.push((
            src.split_whitespace().map(str::to_string).collect(),
            tgt.split_whitespace().map(str::to_string).collect(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::usage(format!("{}: empty corpus", path.display())));
    }
    assemble(pairs)
}

/// Write all three splits, in order, to the TSV format `load_tsv_corpus`
/// reads. Reloading reproduces identical id sequences.
pub fn write_tsv_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for split in [SplitId::Train, SplitId::Dev, SplitId::Test] {
        for pair in corpus.split(split) {
            let src: Vec<&str> = pair.src.iter().map(|&i| corpus.src_vocab.token(i)).collect();
            let tgt: Vec<&str> = pair.tgt.iter().map(|&i| corpus.tgt_vocab.token(i)).collect();
            out.push_str(&src.join(" "));
            out.push('\t');
            out.push_str(&tgt.join(" "));
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// One padded batch. `tgt_in` is bos-prefixed, `tgt_out` is the same
/// sentence shifted left with eos appended; pad fills both to `tgt_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0) + 1;
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (i, p) in pairs.iter().enumerate() {
            src[i * src_len..i * src_len + p.src.len()].copy_from_slice(&p.src);
            tgt_in[i * tgt_len] = BOS;
            tgt_in[i * tgt_len + 1..i * tgt_len + 1 + p.tgt.len()].copy_from_slice(&p.tgt);
            tgt_out[i * tgt_len..i * tgt_len + p.tgt.len()].copy_from_slice(&p.tgt);
            tgt_out[i * tgt_len + p.tgt.len()] = EOS;
        }
        Batch { src, tgt_in, tgt_out, size, src_len, tgt_len }
    }

    /// Count of non-pad target positions.
    pub fn nonpad_targets(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// The batches of one epoch: a deterministic shuffle (or corpus order),
/// chunked and padded.
pub fn epoch_batches(
    pairs: &[Pair],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if shuffle {
        order.shuffle(&mut counter_rng(seed, Stream::Data, epoch));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs)
        })
        .collect()
}

/// Endless batch stream; re-shuffles at every epoch boundary.
pub struct BatchIter<'a> {
    pairs: &'a [Pair],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl<'a> BatchIter<'a> {
    pub fn new(pairs: &'a [Pair], batch_size: usize, seed: u64, shuffle: bool) -> Self {
        let queue = epoch_batches(pairs, batch_size, seed, shuffle, 0).into_iter();
        BatchIter { pairs, batch_size, seed, shuffle, epoch: 0, queue }
    }

    pub fn next_batch(&mut self) -> Batch {
        loop {
            if let Some(b) = self.queue.next() {
                return b;
            }
            self.epoch += 1;
            self.queue =
                epoch_batches(self.pairs, self.batch_size, self.seed, self.shuffle, self.epoch)
                    .into_iter();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn reversal_applies_bijection_to_reversed_source() {
        let corpus = gen_reversal_task(8, 3..=5, 40, 7).unwrap();
        // Recover the bijection from the pairs and check it is a function
        // and injective.
        let mut map: HashMap<u32, u32> = HashMap::new();
        for p in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            assert_eq!(p.src.len(), p.tgt.len());
            for (i, &s) in p.src.iter().rev().enumerate() {
                let t = p.tgt[i];
                let prev = map.insert(s, t);
                if let Some(prev) = prev {
                    assert_eq!(prev, t, "bijection not consistent for source id {}", s);
                }
            }
        }
        let targets: HashSet<u32> = map.values().copied().collect();
        assert_eq!(targets.len(), map.len());
    }

    #[test]
    fn copy_task_copies() {
        let corpus = gen_task(TaskKind::Copy, 8, 3..=4, 40, 7).unwrap();
        for p in &corpus.train {
            let src: Vec<&str> = p.src.iter().map(|&i| corpus.src_vocab.token(i)).collect();
            let tgt: Vec<&str> = p.tgt.iter().map(|&i| corpus.tgt_vocab.token(i)).collect();
            assert_eq!(src, tgt);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_reversal_task(16, 4..=6, 100, 3).unwrap();
        let b = gen_reversal_task(16, 4..=6, 100, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        let c = gen_reversal_task(16, 4..=6, 100, 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_are_disjoint_by_source_sequence() {
        let corpus = gen_reversal_task(16, 3..=6, 400, 11).unwrap();
        let train: HashSet<&Vec<u32>> = corpus.train.iter().map(|p| &p.src).collect();
        let dev: HashSet<&Vec<u32>> = corpus.dev.iter().map(|p| &p.src).collect();
        let test: HashSet<&Vec<u32>> = corpus.test.iter().map(|p| &p.src).collect();
        assert!(train.is_disjoint(&dev));
        assert!(train.is_disjoint(&test));
        assert!(dev.is_disjoint(&test));
        assert_eq!(corpus.dev.len(), 20);
        assert_eq!(corpus.test.len(), 20);
        assert_eq!(corpus.train.len(), 360);
    }

    #[test]
    fn too_few_pairs_is_a_usage_error() {
        assert!(gen_reversal_task(8, 3..=4, 19, 0).is_err());
    }

    #[test]
    fn tsv_single_line_parses() {
        let dir = std::env::temp_dir().join(format!("hm-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.tsv");
        // One pair parses but is too small to split.
        std::fs::write(&path, "a b\tc d\n").unwrap();
        let err = load_tsv_corpus(&path).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        // 20 distinct lines split fine: 1 pair lands in dev, 1 in test.
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(&format!("a b{}\tc d{}\n", i, i));
        }
        std::fs::write(&path, &text).unwrap();
        let corpus = load_tsv_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 20);
        assert_eq!(corpus.train[0].src.len(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tsv_errors_name_the_line() {
        let dir = std::env::temp_dir().join(format!("hm-data2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.tsv");
        std::fs::write(&path, "a\tb\nno tab here\n").unwrap();
        let err = load_tsv_corpus(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{}", err);
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_tsv_corpus(&path).unwrap_err(), Error::Usage(_)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tsv_roundtrip_preserves_ids() {
        let corpus = gen_reversal_task(16, 3..=6, 200, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("hm-data3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.tsv");
        write_tsv_corpus(&corpus, &path).unwrap();
        let reloaded = load_tsv_corpus(&path).unwrap();
        assert_eq!(corpus.train, reloaded.train);
        assert_eq!(corpus.dev, reloaded.dev);
        assert_eq!(corpus.test, reloaded.test);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn batch_shift_relation_holds() {
        let corpus = gen_reversal_task(16, 3..=6, 100, 9).unwrap();
        for batch in epoch_batches(&corpus.train, 8, 1, true, 0) {
            for r in 0..batch.size {
                let row_in = &batch.tgt_in[r * batch.tgt_len..(r + 1) * batch.tgt_len];
                let row_out = &batch.tgt_out[r * batch.tgt_len..(r + 1) * batch.tgt_len];
                assert_eq!(row_in[0], BOS);
                for i in 0..batch.tgt_len - 1 {
                    if row_in[i + 1] != PAD {
                        assert_eq!(row_out[i], row_in[i + 1]);
                    }
                }
                let real = row_out.iter().position(|&t| t == EOS).unwrap();
                assert!(row_out[real + 1..].iter().all(|&t| t == PAD));
            }
        }
    }

    #[test]
    fn batch_size_one_adds_no_padding() {
        let corpus = gen_reversal_task(16, 3..=6, 60, 2).unwrap();
        for batch in epoch_batches(&corpus.train, 1, 1, false, 0) {
            assert!(!batch.src.contains(&PAD));
            assert!(!batch.tgt_out.contains(&PAD));
        }
    }

    #[test]
    fn unshuffled_batches_preserve_corpus_order() {
        let corpus = gen_reversal_task(16, 3..=6, 60, 2).unwrap();
        let batches = epoch_batches(&corpus.train, 4, 1, false, 0);
        let mut flat: Vec<Vec<u32>> = Vec::new();
        for b in &batches {
            for r in 0..b.size {
                let row = &b.src[r * b.src_len..(r + 1) * b.src_len];
                flat.push(row.iter().copied().filter(|&t| t != PAD).collect());
            }
        }
        let expect: Vec<Vec<u32>> = corpus.train.iter().map(|p| p.src.clone()).collect();
        assert_eq!(flat, expect);
    }

    #[test]
    fn every_pair_appears_once_per_epoch() {
        let corpus = gen_reversal_task(16, 3..=6, 100, 13).unwrap();
        for epoch in [0u64, 1, 2] {
            let mut seen: Vec<Vec<u32>> = Vec::new();
            for b in epoch_batches(&corpus.train, 7, 3, true, epoch) {
                for r in 0..b.size {
                    let row = &b.src[r * b.src_len..(r + 1) * b.src_len];
                    seen.push(row.iter().copied().filter(|&t| t != PAD).collect());
                }
            }
            let mut expect: Vec<Vec<u32>> = corpus.train.iter().map(|p| p.src.clone()).collect();
            seen.sort();
            expect.sort();
            assert_eq!(seen, expect, "epoch {}", epoch);
        }
        // Different epochs, different order.
        let e0 = epoch_batches(&corpus.train, 7, 3, true, 0);
        let e1 = epoch_batches(&corpus.train, 7, 3, true, 1);
        assert_ne!(e0[0].src, e1[0].src);
    }
}
