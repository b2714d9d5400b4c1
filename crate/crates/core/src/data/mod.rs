//! Corpus ingestion, tokenization and batch assembly.
//!
//! Every training window carries `W` tokens of lookahead past its body so that
//! proximity targets can be built for every body position. Windows are
//! contiguous with stride `T`; the final window is padded with the invalid
//! sentinel id `V`.

mod synthetic;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use synthetic::synthetic_corpus;

pub type TokenId = u32;

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocab {
    /// Each byte is its own token (`V = 256`).
    Byte,
    /// Explicit symbol table; id = position in the table.
    Toy { symbols: Vec<Vec<u8>> },
}

impl Vocab {
    pub fn size(&self) -> usize {
        match self {
            Vocab::Byte => BYTE_VOCAB,
            Vocab::Toy { symbols } => symbols.len(),
        }
    }

    /// The invalid id used for padding: one past the last real id.
    pub fn sentinel(&self) -> TokenId {
        self.size() as TokenId
    }

    /// Reads a toy vocabulary: one symbol per line, id = line number.
    pub fn from_toy_file(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)?;
        let symbols: Vec<Vec<u8>> = text
            .split(|&b| b == b'\n')
            .map(|l| l.strip_suffix(b"\r").unwrap_or(l).to_vec())
            .filter(|l| !l.is_empty())
            .collect();
        if symbols.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "toy vocabulary has no symbols".into(),
            });
        }
        Ok(Vocab::Toy { symbols })
    }

    pub fn tokenize(&self, bytes: &[u8]) -> Result<Vec<TokenId>> {
        match self {
            Vocab::Byte => Ok(bytes.iter().map(|&b| b as TokenId).collect()),
            Vocab::Toy { symbols } => {
                let mut out = Vec::new();
                let mut pos = 0;
                while pos < bytes.len() {
                    // longest matching symbol wins; ties go to the lower id
                    let best = symbols
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| bytes[pos..].starts_with(s))
                        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)));
                    match best {
                        Some((id, sym)) => {
                            out.push(id as TokenId);
                            pos += sym.len();
                        }
                        None => return Err(Error::Tokenize { offset: pos }),
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &t in tokens {
            match self {
                Vocab::Byte if (t as usize) < BYTE_VOCAB => out.push(t as u8),
                Vocab::Toy { symbols } if (t as usize) < symbols.len() => {
                    out.extend_from_slice(&symbols[t as usize])
                }
                _ => {}
            }
        }
        out
    }
}

/// Reads a file and tokenizes it with `vocab`.
pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let bytes = std::fs::read(path)?;
    vocab.tokenize(&bytes)
}

/// Shannon entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(tokens: &[TokenId], vocab_size: usize) -> f64 {
    let mut counts = vec![0u64; vocab_size];
    let mut n = 0u64;
    for &t in tokens {
        if (t as usize) < vocab_size {
            counts[t as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Splits a stream into `(train, heldout)` with the held-out part being the
/// final `fraction` of the stream, cut on a multiple of `seq_len`.
pub fn split_heldout(stream: &[TokenId], fraction: f64, seq_len: usize) -> (&[TokenId], &[TokenId]) {
    let keep = ((stream.len() as f64) * (1.0 - fraction)).floor() as usize;
    let cut = (keep / seq_len.max(1)) * seq_len.max(1);
    stream.split_at(cut.min(stream.len()))
}

/// Token ids of length `T + W`: a body of `T` positions plus `W` lookahead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    body_len: usize,
    window: usize,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, body_len: usize, window: usize, vocab_size: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::contract("window size must be at least 1"));
        }
        if tokens.len() != body_len + window {
            return Err(Error::contract(format!(
                "sequence length {} != T + W = {} + {}",
                tokens.len(),
                body_len,
                window
            )));
        }
        let sentinel = vocab_size as TokenId;
        if let Some(bad) = tokens.iter().find(|&&t| t > sentinel) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {vocab_size} and not the sentinel"
            )));
        }
        Ok(TokenSequence {
            tokens,
            body_len,
            window,
            vocab_size,
        })
    }

    /// Whole stream as the body, padded with `W` sentinels.
    pub fn padded(stream: &[TokenId], window: usize, vocab_size: usize) -> Result<Self> {
        let mut tokens = stream.to_vec();
        tokens.resize(stream.len() + window, vocab_size as TokenId);
        TokenSequence::new(tokens, stream.len(), window, vocab_size)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn body_len(&self) -> usize {
        self.body_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_valid(&self, pos: usize) -> bool {
        (self.tokens[pos] as usize) < self.vocab_size
    }
}

/// One training batch of `B` windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub window: usize,
    pub vocab_size: usize,
    /// `B × T` model inputs.
    pub inputs: Vec<TokenId>,
    /// `B × T`, `ntp_targets[b,t] = overhang[b,t+1]`.
    pub ntp_targets: Vec<TokenId>,
    /// `B × (T + W)` raw window tokens.
    pub overhang: Vec<TokenId>,
}

impl Batch {
    pub fn from_windows(windows: &[&[TokenId]], seq_len: usize, window: usize, vocab_size: usize) -> Result<Self> {
        let width = seq_len + window;
        if windows.is_empty() || windows.iter().any(|w| w.len() != width) {
            return Err(Error::contract(format!(
                "batch needs at least one window of exactly T + W = {width} tokens"
            )));
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq_len);
        let mut ntp_targets = Vec::with_capacity(windows.len() * seq_len);
        let mut overhang = Vec::with_capacity(windows.len() * width);
        for w in windows {
            inputs.extend_from_slice(&w[..seq_len]);
            ntp_targets.extend_from_slice(&w[1..seq_len + 1]);
            overhang.extend_from_slice(w);
        }
        Ok(Batch {
            batch_size: windows.len(),
            seq_len,
            window,
            vocab_size,
            inputs,
            ntp_targets,
            overhang,
        })
    }

    fn valid(&self, t: TokenId) -> bool {
        (t as usize) < self.vocab_size
    }

    pub fn overhang_row(&self, b: usize) -> &[TokenId] {
        let w = self.seq_len + self.window;
        &self.overhang[b * w..(b + 1) * w]
    }

    /// Row `b` of the overhang as a target-construction sequence.
    pub fn sequence(&self, b: usize) -> Result<TokenSequence> {
        TokenSequence::new(self.overhang_row(b).to_vec(), self.seq_len, self.window, self.vocab_size)
    }

    /// Positions with a valid input and a valid next token.
    pub fn ntp_mask(&self) -> Vec<bool> {
        self.inputs
            .iter()
            .zip(&self.ntp_targets)
            .map(|(&i, &t)| self.valid(i) && self.valid(t))
            .collect()
    }

    /// `B × T × N` targets, `[b,t,n-1] = overhang[b,t+n]`; requires `N <= W`.
    pub fn mtp_targets(&self, future: usize) -> Result<Vec<TokenId>> {
        if future == 0 || future > self.window {
            return Err(Error::contract(format!(
                "{future} future tokens need an overhang of at least that many (have {})",
                self.window
            )));
        }
        let mut out = Vec::with_capacity(self.batch_size * self.seq_len * future);
        for b in 0..self.batch_size {
            let row = self.overhang_row(b);
            for t in 0..self.seq_len {
                out.extend_from_slice(&row[t + 1..t + 1 + future]);
            }
        }
        Ok(out)
    }

    /// Validity of each `(b, t, n)` MTP target.
    pub fn mtp_mask(&self, future: usize) -> Result<Vec<bool>> {
        let targets = self.mtp_targets(future)?;
        Ok(targets
            .chunks(future)
            .zip(&self.inputs)
            .flat_map(|(tg, &inp)| tg.iter().map(move |&t| (inp, t)))
            .map(|(inp, t)| self.valid(inp) && self.valid(t))
            .collect())
    }

    /// Number of body tokens that are real text.
    pub fn real_tokens(&self) -> usize {
        self.inputs.iter().filter(|&&t| self.valid(t)).count()
    }
}

/// Contiguous stride-`T` windows over a token stream.
#[derive(Debug, Clone)]
pub struct WindowSet {
    stream: Arc<Vec<TokenId>>,
    seq_len: usize,
    window: usize,
    vocab_size: usize,
}

impl WindowSet {
    pub fn new(stream: Vec<TokenId>, seq_len: usize, window: usize, vocab_size: usize) -> Result<Self> {
        if seq_len == 0 || window == 0 {
            return Err(Error::contract("T and W must both be at least 1"));
        }
        let needed = seq_len.max(2);
        if stream.len() < needed {
            return Err(Error::CorpusTooSmall {
                len: stream.len(),
                needed,
            });
        }
        let sentinel = vocab_size as TokenId;
        if let Some(bad) = stream.iter().find(|&&t| t >= sentinel) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(WindowSet {
            stream: Arc::new(stream),
            seq_len,
            window,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.stream.len().div_ceil(self.seq_len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn stream(&self) -> &[TokenId] {
        &self.stream
    }

    /// Window `i`: tokens `[i·T, i·T + T + W)`, sentinel-padded past the end.
    pub fn window_tokens(&self, i: usize) -> Vec<TokenId> {
        let start = i * self.seq_len;
        let end = (start + self.seq_len + self.window).min(self.stream.len());
        let mut w = self.stream[start.min(end)..end].to_vec();
        w.resize(self.seq_len + self.window, self.vocab_size as TokenId);
        w
    }

    /// Window order for one pass, a seeded permutation of all windows.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let windows: Vec<Vec<TokenId>> = indices.iter().map(|&i| self.window_tokens(i)).collect();
        let refs: Vec<&[TokenId]> = windows.iter().map(Vec::as_slice).collect();
        Batch::from_windows(&refs, self.seq_len, self.window, self.vocab_size)
    }

    /// Number of batches of size `b` in one pass (the last may be short).
    pub fn batches_per_epoch(&self, b: usize) -> usize {
        self.len().div_ceil(b.max(1))
    }

    /// The batch used at global index `k` of an endless seeded sequence of
    /// passes; a pure function of `(seed, k)`.
    pub fn nth_batch(&self, batch_size: usize, seed: u64, k: usize) -> Result<Batch> {
        let per = self.batches_per_epoch(batch_size);
        let (epoch, idx) = (k / per, k % per);
        let order = self.epoch_order(seed, epoch as u64);
        let lo = idx * batch_size;
        let hi = (lo + batch_size).min(order.len());
        self.batch(&order[lo..hi])
    }

    /// All windows in order, grouped into batches of `b` (evaluation use).
    pub fn sequential_batches(&self, b: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n).step_by(b.max(1)).map(move |lo| {
            let idx: Vec<usize> = (lo..(lo + b).min(n)).collect();
            self.batch(&idx)
        })
    }
}

/// One seeded pass over contiguous windows of `stream`, `B` windows per batch.
pub fn make_batches(
    stream: &[TokenId],
    seq_len: usize,
    window: usize,
    batch_size: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let set = WindowSet::new(stream.to_vec(), seq_len, window, vocab_size)?;
    let order = set.epoch_order(seed, 0);
    let batches = order
        .chunks(batch_size)
        .map(|idx| set.batch(idx))
        .collect::<Result<Vec<_>>>()?;
    Ok(batches.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_vocab_identity() {
        assert_eq!(Vocab::Byte.tokenize(b"ab").unwrap(), vec![97, 98]);
        assert!(Vocab::Byte.tokenize(b"").unwrap().is_empty());
    }

    #[test]
    fn toy_vocab_longest_match_and_miss() {
        let v = Vocab::Toy {
            symbols: vec![b"a".to_vec(), b"ab".to_vec(), b"c".to_vec()],
        };
        assert_eq!(v.tokenize(b"abac").unwrap(), vec![1, 0, 2]);
        assert!(matches!(v.tokenize(b"acx"), Err(Error::Tokenize { offset: 2 })));
        assert_eq!(v.sentinel(), 3);
    }

    #[test]
    fn first_batch_is_direct_slice() {
        let stream: Vec<u32> = (0..12).collect();
        let set = WindowSet::new(stream, 4, 4, 256).unwrap();
        assert_eq!(set.window_tokens(0), (0..8).collect::<Vec<_>>());
        let b = set.batch(&[0]).unwrap();
        assert_eq!(b.overhang, (0..8).collect::<Vec<_>>());
        assert_eq!(b.inputs, vec![0, 1, 2, 3]);
        assert_eq!(b.ntp_targets, vec![1, 2, 3, 4]);
    }

    #[test]
    fn stream_of_exactly_t_is_one_padded_window() {
        let stream: Vec<u32> = vec![5, 6, 7, 8];
        let batches: Vec<Batch> = make_batches(&stream, 4, 3, 2, 256, 1).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].overhang, vec![5, 6, 7, 8, 256, 256, 256]);
        assert_eq!(batches[0].ntp_mask(), vec![true, true, true, false]);
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        assert!(matches!(
            make_batches(&[1, 2, 3], 4, 2, 1, 256, 0),
            Err(Error::CorpusTooSmall { len: 3, .. })
        ));
    }

    #[test]
    fn mtp_targets_follow_overhang() {
        let stream: Vec<u32> = (0..10).collect();
        let set = WindowSet::new(stream, 4, 3, 256).unwrap();
        let b = set.batch(&[1]).unwrap();
        let tg = b.mtp_targets(3).unwrap();
        // position t=0 of window 1 is token 4
        assert_eq!(&tg[..3], &[5, 6, 7]);
        assert_eq!(&tg[9..], &[8, 9, 256]);
        assert_eq!(b.mtp_mask(3).unwrap()[11], false);
        assert!(b.mtp_targets(4).is_err());
    }

    #[test]
    fn heldout_split_is_window_aligned() {
        let stream: Vec<u32> = vec![0; 1000];
        let (train, held) = split_heldout(&stream, 0.05, 64);
        assert_eq!(train.len(), 896);
        assert_eq!(held.len(), 104);
    }

    #[test]
    fn unigram_entropy_uniform() {
        let toks: Vec<u32> = (0..4).cycle().take(400).collect();
        assert!((unigram_entropy(&toks, 256) - 4f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn batches_cover_stream_and_respect_invariants(
            len in 2usize..200, t in 1usize..9, w in 1usize..6, b in 1usize..4, seed in any::<u64>()
        ) {
            prop_assume!(len >= t);
            let stream: Vec<u32> = (0..len as u32).map(|i| (i * 7 + 3) % 11).collect();
            let batches: Vec<Batch> = make_batches(&stream, t, w, b, 11, seed).unwrap().collect();
            let rerun: Vec<Batch> = make_batches(&stream, t, w, b, 11, seed).unwrap().collect();
            prop_assert_eq!(&batches, &rerun);

            let set = WindowSet::new(stream.clone(), t, w, 11).unwrap();
            let mut seen = vec![None; set.len()];
            for batch in &batches {
                for r in 0..batch.batch_size {
                    let row = batch.overhang_row(r);
                    let idx = (0..set.len()).find(|&i| set.window_tokens(i) == row && seen[i].is_none()).unwrap();
                    seen[idx] = Some(row[..t].to_vec());
                    for tt in 0..t {
                        let valid = (batch.ntp_targets[r * t + tt] as usize) < 11;
                        if valid {
                            prop_assert_eq!(batch.ntp_targets[r * t + tt], row[tt + 1]);
                        }
                    }
                    prop_assert!(row.iter().all(|&x| x <= 11));
                }
            }
            let joined: Vec<u32> = seen.into_iter().flat_map(|s| s.unwrap()).filter(|&x| x < 11).collect();
            prop_assert_eq!(joined, stream);
        }
    }
}
