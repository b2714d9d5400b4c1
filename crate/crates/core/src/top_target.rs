//! Proximity-score targets for token order prediction.
//!
//! For body position `t` and vocabulary token `v`, the score is `W - d` where
//! `d` is the distance from `t` to the first occurrence of `v` among positions
//! `t+1 ..= t+W`; tokens that do not occur in that window score `-inf`.
//!
//! Three constructions are provided:
//!
//! - [`build_dense`]: one backward pass over the sequence with a `next[v]`
//!   table, emitting a `T × V` matrix.
//! - [`build_sparse`]: a backward pass that derives each row from the row after
//!   it, storing only the finite entries (at most `min(W, V)` per position).
//! - [`oracle_forward_scan`]: a direct forward search per `(t, v)`, used to
//!   check the other two.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{TokenId, TokenSequence};
use crate::error::{Error, Result};

/// `T × V` proximity scores; entries are `-inf` or integers in `[0, W-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTargets {
    body_len: usize,
    vocab_size: usize,
    window: usize,
    scores: Vec<f32>,
}

impl DenseTargets {
    fn empty(body_len: usize, vocab_size: usize, window: usize) -> Self {
        DenseTargets {
            body_len,
            vocab_size,
            window,
            scores: vec![f32::NEG_INFINITY; body_len * vocab_size],
        }
    }

    pub fn body_len(&self) -> usize {
        self.body_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.scores[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn get(&self, t: usize, v: usize) -> f32 {
        self.scores[t * self.vocab_size + v]
    }

    /// `true` for rows with at least one finite score.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.body_len)
            .map(|t| self.row(t).iter().any(|s| s.is_finite()))
            .collect()
    }

    /// Bitwise comparison, treating `-inf == -inf`.
    pub fn bitwise_eq(&self, other: &DenseTargets) -> bool {
        self.body_len == other.body_len
            && self.vocab_size == other.vocab_size
            && self.window == other.window
            && self
                .scores
                .iter()
                .zip(&other.scores)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Finite entries of each target row, position-major with an offset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTargets {
    body_len: usize,
    vocab_size: usize,
    window: usize,
    offsets: Vec<usize>,
    tokens: Vec<TokenId>,
    scores: Vec<u32>,
}

impl SparseTargets {
    pub fn body_len(&self) -> usize {
        self.body_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `(tokens, scores)` of position `t`, closest token first.
    pub fn row(&self, t: usize) -> (&[TokenId], &[u32]) {
        let (lo, hi) = (self.offsets[t], self.offsets[t + 1]);
        (&self.tokens[lo..hi], &self.scores[lo..hi])
    }

    pub fn total_pairs(&self) -> usize {
        self.tokens.len()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.offsets.windows(2).map(|w| w[1] > w[0]).collect()
    }

    pub fn densify(&self) -> DenseTargets {
        let mut dense = DenseTargets::empty(self.body_len, self.vocab_size, self.window);
        for t in 0..self.body_len {
            let (toks, scores) = self.row(t);
            for (&v, &s) in toks.iter().zip(scores) {
                dense.scores[t * self.vocab_size + v as usize] = s as f32;
            }
        }
        dense
    }

    /// Heap bytes held by the structure.
    pub fn heap_bytes(&self) -> usize {
        self.offsets.capacity() * std::mem::size_of::<usize>()
            + self.tokens.capacity() * std::mem::size_of::<TokenId>()
            + self.scores.capacity() * std::mem::size_of::<u32>()
    }

    /// Heap bytes of an exactly sized structure holding `T·min(W, V)` pairs.
    pub fn theoretical_bytes(body_len: usize, vocab_size: usize, window: usize) -> usize {
        (body_len + 1) * std::mem::size_of::<usize>()
            + body_len * window.min(vocab_size) * (std::mem::size_of::<TokenId>() + std::mem::size_of::<u32>())
    }

    /// Serializes to the flat little-endian target file format:
    ///
    /// ```text
    /// magic    4 bytes  "TOPT"
    /// version  u32      1
    /// T        u64
    /// V        u32
    /// W        u32
    /// counts   T × u32  pairs per position
    /// pairs    Σcounts × (token u32, score u32), position-major
    /// ```
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 4 * self.body_len + 8 * self.tokens.len());
        buf.extend_from_slice(TARGET_MAGIC);
        buf.extend_from_slice(&TARGET_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.body_len as u64).to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.window as u32).to_le_bytes());
        for win in self.offsets.windows(2) {
            buf.extend_from_slice(&((win[1] - win[0]) as u32).to_le_bytes());
        }
        for (&v, &s) in self.tokens.iter().zip(&self.scores) {
            buf.extend_from_slice(&v.to_le_bytes());
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..4] != TARGET_MAGIC {
            return Err(bad("missing TOPT header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != TARGET_FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let vocab_size = u32_at(16) as usize;
        let window = u32_at(20) as usize;
        let counts_end = body_len
            .checked_mul(4)
            .and_then(|n| n.checked_add(24))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated pair counts"))?;
        let mut offsets = Vec::with_capacity(body_len + 1);
        offsets.push(0usize);
        for t in 0..body_len {
            let c = u32_at(24 + 4 * t) as usize;
            offsets.push(offsets[t] + c);
        }
        let total = offsets[body_len];
        if bytes.len() != counts_end + 8 * total {
            return Err(bad("pair section length does not match counts"));
        }
        let mut tokens = Vec::with_capacity(total);
        let mut scores = Vec::with_capacity(total);
        for i in 0..total {
            let o = counts_end + 8 * i;
            let (v, s) = (u32_at(o), u32_at(o + 4));
            if v as usize >= vocab_size || s as usize >= window {
                return Err(bad("pair out of range"));
            }
            tokens.push(v);
            scores.push(s);
        }
        Ok(SparseTargets {
            body_len,
            vocab_size,
            window,
            offsets,
            tokens,
            scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

pub const TARGET_MAGIC: &[u8; 4] = b"TOPT";
pub const TARGET_FORMAT_VERSION: u32 = 1;

fn check(seq: &TokenSequence, vocab_size: usize, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::contract("window size must be at least 1"));
    }
    if seq.window() != window || seq.vocab_size() != vocab_size {
        return Err(Error::contract(format!(
            "sequence built for V={}, W={} used with V={vocab_size}, W={window}",
            seq.vocab_size(),
            seq.window()
        )));
    }
    if seq.tokens().len() != seq.body_len() + window {
        return Err(Error::contract("sequence length must be T + W"));
    }
    Ok(())
}

/// Dense targets via a single backward pass with a next-occurrence table.
///
/// `next[v]` starts at `T + W` (out of reach). Walking `t` from `T+W-1` down to
/// `0`, row `t` is scored from `next[]` while it still describes positions
/// strictly after `t`, then `x[t]` (if valid) is recorded as the most recent
/// occurrence.
pub fn build_dense(seq: &TokenSequence, vocab_size: usize, window: usize) -> Result<DenseTargets> {
    check(seq, vocab_size, window)?;
    let (body, x) = (seq.body_len(), seq.tokens());
    let total = body + window;
    let mut y = DenseTargets::empty(body, vocab_size, window);
    let mut next = vec![total; vocab_size];
    for t in (0..total).rev() {
        if t < body {
            let row = &mut y.scores[t * vocab_size..(t + 1) * vocab_size];
            for (v, slot) in row.iter_mut().enumerate() {
                let d = next[v] - t;
                if d > 0 && d <= window {
                    *slot = (window - d) as f32;
                }
            }
        }
        if (x[t] as usize) < vocab_size {
            next[x[t] as usize] = t;
        }
    }
    Ok(y)
}

/// Sparse targets via the row recurrence
/// `row(t) = {x[t+1]: W-1} ∪ {v: s-1 | (v, s) ∈ row(t+1), s ≥ 1, v ≠ x[t+1]}`.
///
/// Time `O((T+W)·min(W,V))`, extra memory one carried row.
pub fn build_sparse(seq: &TokenSequence, vocab_size: usize, window: usize) -> Result<SparseTargets> {
    check(seq, vocab_size, window)?;
    let (body, x) = (seq.body_len(), seq.tokens());
    let total = body + window;
    let top = (window - 1) as u32;

    // Rows come out back to front. Each row is appended in reverse pair order
    // so that one reversal of the flat buffers at the end restores both the
    // position order and the closest-first order within each row.
    let bound = body * window.min(vocab_size);
    let mut tokens: Vec<TokenId> = Vec::with_capacity(bound);
    let mut scores: Vec<u32> = Vec::with_capacity(bound);
    let mut counts: Vec<usize> = Vec::with_capacity(body);
    let mut carry: Vec<(TokenId, u32)> = Vec::with_capacity(window.min(vocab_size));
    let mut scratch: Vec<(TokenId, u32)> = Vec::with_capacity(window.min(vocab_size));
    // row(total - 1) is empty: nothing lies after the last position
    for t in (0..total.saturating_sub(1)).rev() {
        let nxt = x[t + 1];
        scratch.clear();
        let nxt_valid = (nxt as usize) < vocab_size;
        if nxt_valid {
            scratch.push((nxt, top));
        }
        for &(v, s) in &carry {
            if s >= 1 && !(nxt_valid && v == nxt) {
                scratch.push((v, s - 1));
            }
        }
        std::mem::swap(&mut carry, &mut scratch);
        if t < body {
            for &(v, s) in carry.iter().rev() {
                tokens.push(v);
                scores.push(s);
            }
            counts.push(carry.len());
        }
    }
    tokens.reverse();
    scores.reverse();
    tokens.shrink_to_fit();
    scores.shrink_to_fit();
    let mut offsets = Vec::with_capacity(body + 1);
    offsets.push(0);
    for &c in counts.iter().rev() {
        offsets.push(offsets.last().unwrap() + c);
    }
    Ok(SparseTargets {
        body_len: body,
        vocab_size,
        window,
        offsets,
        tokens,
        scores,
    })
}

/// Reference construction: for every `(t, v)`, scan positions `t+1 ..= t+W`
/// forward for the first `v`. `O(T·W·V)`.
pub fn oracle_forward_scan(seq: &TokenSequence, vocab_size: usize, window: usize) -> Result<DenseTargets> {
    check(seq, vocab_size, window)?;
    let x = seq.tokens();
    let mut y = DenseTargets::empty(seq.body_len(), vocab_size, window);
    for t in 0..seq.body_len() {
        for v in 0..vocab_size {
            for d in 1..=window {
                if x[t + d] as usize == v {
                    y.scores[t * vocab_size + v] = (window - d) as f32;
                    break;
                }
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NINF: f32 = f32::NEG_INFINITY;

    fn seq(tokens: &[u32], window: usize, vocab: usize) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), tokens.len() - window, window, vocab).unwrap()
    }

    #[test]
    fn worked_example() {
        let s = seq(&[0, 1, 0, 2], 2, 3);
        let oracle = oracle_forward_scan(&s, 3, 2).unwrap();
        assert_eq!(oracle.row(0), &[0.0, 1.0, NINF]);
        assert_eq!(oracle.row(1), &[1.0, NINF, 0.0]);
        let dense = build_dense(&s, 3, 2).unwrap();
        assert!(dense.bitwise_eq(&oracle));
        let sparse = build_sparse(&s, 3, 2).unwrap();
        assert_eq!(sparse.row(0), (&[1u32, 0][..], &[1u32, 0][..]));
        assert_eq!(sparse.row(1), (&[0u32, 2][..], &[1u32, 0][..]));
        assert!(sparse.densify().bitwise_eq(&dense));
    }

    #[test]
    fn constant_sequence() {
        let (t, w) = (5, 3);
        let s = seq(&vec![2; t + w], w, 4);
        let dense = build_dense(&s, 4, w).unwrap();
        for r in 0..t {
            assert_eq!(dense.row(r), &[NINF, NINF, (w - 1) as f32, NINF]);
        }
        assert!(oracle_forward_scan(&s, 4, w).unwrap().bitwise_eq(&dense));
    }

    #[test]
    fn window_boundary() {
        // token 0 recurs at distance 3 from t = 0
        let x = [0, 1, 1, 0];
        let w3 = build_dense(&seq(&x, 3, 2), 2, 3).unwrap();
        assert_eq!(w3.get(0, 0), 0.0);
        let w2 = build_dense(&seq(&[0, 1, 1, 0], 2, 2), 2, 2).unwrap();
        // with W = 2 the recurrence at d = 3 is out of the window
        assert_eq!(w2.get(0, 0), NINF);
        assert_eq!(w2.get(1, 0), 0.0);
    }

    #[test]
    fn sentinel_tail_gives_empty_rows() {
        let s = TokenSequence::padded(&[0, 1, 2], 2, 3).unwrap();
        let sparse = build_sparse(&s, 3, 2).unwrap();
        assert_eq!(sparse.row(2).0.len(), 0);
        assert_eq!(sparse.valid_mask(), vec![true, true, false]);
        assert_eq!(build_dense(&s, 3, 2).unwrap().valid_mask(), vec![true, true, false]);
    }

    #[test]
    fn wrong_length_is_contract_error() {
        let s = seq(&[0, 1, 0, 2], 2, 3);
        assert!(build_dense(&s, 3, 1).is_err());
        assert!(TokenSequence::new(vec![0, 1, 2], 2, 2, 3).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let s = seq(&[0, 1, 0, 2, 1, 1, 0], 3, 3);
        let sparse = build_sparse(&s, 3, 3).unwrap();
        let mut buf = Vec::new();
        sparse.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TOPT");
        let back = SparseTargets::read_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, sparse);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(SparseTargets::read_from(&buf[..buf.len() - 1], Path::new("mem")).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<u32>, usize, usize)> {
        (2usize..10, 1usize..8, 1usize..40).prop_flat_map(|(v, w, t)| {
            (
                proptest::collection::vec(0u32..=(v as u32), t + w),
                Just(v),
                Just(w),
            )
        })
    }

    proptest! {
        #[test]
        fn row_max_and_monotonicity((x, v, w) in arb_case()) {
            // keep sentinels to a tail, as in padded windows
            let mut x = x;
            if let Some(p) = x.iter().position(|&t| t as usize == v) {
                for t in &mut x[p..] { *t = v as u32; }
            }
            let s = seq(&x, w, v);
            let dense = build_dense(&s, v, w).unwrap();
            for t in 0..s.body_len() {
                let row = dense.row(t);
                if (x[t + 1] as usize) < v {
                    let max = row.iter().copied().fold(NINF, f32::max);
                    prop_assert_eq!(max, (w - 1) as f32);
                    prop_assert_eq!(row[x[t + 1] as usize], max);
                    prop_assert_eq!(row.iter().filter(|&&s| s == max).count(), 1);
                }
                // sooner first occurrence means strictly larger score
                let first = |tok: usize| (1..=w).find(|&d| x[t + d] as usize == tok);
                for a in 0..v {
                    for b in 0..v {
                        if let (Some(da), Some(db)) = (first(a), first(b)) {
                            if da < db { prop_assert!(row[a] > row[b]); }
                        }
                    }
                }
                if w == 1 {
                    let finite: Vec<usize> = (0..v).filter(|&k| row[k].is_finite()).collect();
                    if (x[t + 1] as usize) < v {
                        prop_assert_eq!(finite, vec![x[t + 1] as usize]);
                        prop_assert_eq!(row[x[t + 1] as usize], 0.0);
                    }
                }
            }
            let sparse = build_sparse(&s, v, w).unwrap();
            for t in 0..s.body_len() {
                let (toks, _) = sparse.row(t);
                prop_assert!(toks.len() <= w.min(v));
                let mut u = toks.to_vec(); u.sort(); u.dedup();
                prop_assert_eq!(u.len(), toks.len());
            }
            prop_assert!(sparse.densify().bitwise_eq(&dense));
        }
    }
}
