//! Token streams, unigram statistics and rare-target selection.
//!
//! Binary formats (little-endian):
//!
//! | file | layout |
//! |------|--------|
//! | token stream | `"RTK1"`, u64 count, count x u32 ids, u64 boundary count, u64 boundaries |
//! | validity mask | `"RWM1"`, u64 vocab, vocab x u8 (0/1) |
//! | frequencies | `"RFQ1"`, u64 vocab, vocab x u64 counts |
//!
//! Document boundaries are exclusive end offsets. Tokens after the last
//! boundary form one more document.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"RTK1";
pub const MASK_MAGIC: &[u8; 4] = b"RWM1";
pub const FREQ_MAGIC: &[u8; 4] = b"RFQ1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, boundaries: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let s = TokenStream::unchecked(ids, boundaries)?;
        s.check_vocab(vocab_size)?;
        Ok(s)
    }

    fn unchecked(ids: Vec<u32>, boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("document boundaries must be strictly increasing"));
        }
        if boundaries.last().is_some_and(|&b| b > ids.len()) {
            return Err(Error::contract(format!(
                "document boundary beyond stream length {}",
                ids.len()
            )));
        }
        Ok(TokenStream { ids, boundaries })
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().position(|&t| t as usize >= vocab_size) {
            Some(i) => Err(Error::contract(format!(
                "token id {} at index {i} is outside vocab of {vocab_size}",
                self.ids[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Non-empty document ranges in stream order.
    pub fn documents(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for &b in self.boundaries.iter().chain(std::iter::once(&self.ids.len())) {
            if b > start {
                out.push(start..b);
            }
            start = start.max(b);
        }
        out
    }

    /// Teacher-forcing blocks: each document's input positions are cut into
    /// consecutive runs of at most `context_len` tokens. Block inputs are
    /// `ids[start..start+len]`, its targets `ids[start+1..start+len+1]`.
    pub fn scoring_blocks(&self, context_len: usize) -> Vec<ScoringBlock> {
        assert!(context_len >= 1);
        let mut out = Vec::new();
        for doc in self.documents() {
            let mut start = doc.start;
            // the last token of a document has nothing to predict
            while start + 1 < doc.end {
                let len = context_len.min(doc.end - 1 - start);
                out.push(ScoringBlock { start, len });
                start += len;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringBlock {
    pub start: usize,
    pub len: usize,
}

impl ScoringBlock {
    pub fn inputs<'a>(&self, stream: &'a TokenStream) -> &'a [u32] {
        &stream.ids[self.start..self.start + self.len]
    }

    pub fn targets<'a>(&self, stream: &'a TokenStream) -> &'a [u32] {
        &stream.ids[self.start + 1..self.start + self.len + 1]
    }

    /// Absolute positions of the predicted tokens.
    pub fn target_positions(&self) -> Range<usize> {
        self.start + 1..self.start + self.len + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FrequencyTable { counts, total }
    }

    pub fn from_stream(stream: &TokenStream, vocab_size: usize) -> Self {
        unigram_frequencies(stream, vocab_size)
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }
}

/// Counts token occurrences. Ids must be below `vocab_size`.
pub fn unigram_frequencies(stream: &TokenStream, vocab_size: usize) -> FrequencyTable {
    let mut counts = vec![0u64; vocab_size];
    for &t in stream.ids() {
        counts[t as usize] += 1;
    }
    FrequencyTable {
        counts,
        total: stream.len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask(Vec<bool>);

impl ValidityMask {
    pub fn new(valid: Vec<bool>) -> Self {
        ValidityMask(valid)
    }

    pub fn all(vocab_size: usize, value: bool) -> Self {
        ValidityMask(vec![value; vocab_size])
    }

    pub fn is_valid(&self, token: u32) -> bool {
        self.0[token as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// One rare-token prediction: the model reads `context` and must predict `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub context: Vec<u32>,
    pub target: u32,
    /// Absolute position of `target` in the stream.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMeta {
    pub percentile: f64,
    /// Per-type frequency threshold; targets need a count strictly below it.
    /// `None` at the 100th percentile, where every seen type qualifies.
    pub threshold: Option<f64>,
    pub context_len: usize,
    pub candidates: usize,
    pub after_frequency: usize,
    pub after_mask: usize,
    pub mask_source: String,
    pub subsampled_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub pairs: Vec<EvalPair>,
    pub meta: SelectionMeta,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.position).collect()
    }

    /// Keeps at most `max` pairs, drawn uniformly with `seed` and returned in
    /// stream order.
    pub fn subsample(mut self, max: usize, seed: u64) -> Self {
        if self.pairs.len() <= max {
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, self.pairs.len(), max).into_vec();
        keep.sort_unstable();
        self.meta.subsampled_from = Some(self.pairs.len());
        self.pairs = keep.into_iter().map(|i| self.pairs[i].clone()).collect();
        self
    }
}

/// Linear-interpolation percentile of ascending `sorted` values, `p` in `[0, 100]`.
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Two-stage rare-target filter.
///
/// Stage 1 keeps targets whose token count is strictly below the
/// `percentile`-th linear-interpolation percentile of counts over token
/// types with a non-zero count (at 100 every type qualifies). Stage 2 keeps
/// targets whose token is marked valid. Each kept pair carries the tokens of
/// its scoring block that precede it, at most `context_len`, never crossing a
/// document boundary.
pub fn select_rare_targets(
    stream: &TokenStream,
    freq: &FrequencyTable,
    percentile: f64,
    mask: &ValidityMask,
    context_len: usize,
) -> Result<EvalSet> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::contract(format!("percentile {percentile} outside (0, 100]")));
    }
    if context_len == 0 {
        return Err(Error::contract("context_len must be at least 1"));
    }
    let vocab = freq.vocab_size();
    if mask.len() != vocab {
        return Err(Error::contract(format!(
            "mask covers {} tokens but frequency table covers {vocab}",
            mask.len()
        )));
    }
    stream.check_vocab(vocab)?;

    let mut nonzero: Vec<f64> = freq.counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    nonzero.sort_by(f64::total_cmp);
    let threshold = if percentile >= 100.0 {
        f64::INFINITY
    } else if nonzero.is_empty() {
        0.0
    } else {
        percentile_linear(&nonzero, percentile)
    };

    let mut candidates = 0;
    let mut after_frequency = 0;
    let mut pairs = Vec::new();
    for block in stream.scoring_blocks(context_len) {
        for (offset, position) in block.target_positions().enumerate() {
            candidates += 1;
            let token = stream.ids()[position];
            if (freq.counts[token as usize] as f64) >= threshold {
                continue;
            }
            after_frequency += 1;
            if !mask.is_valid(token) {
                continue;
            }
            pairs.push(EvalPair {
                context: stream.ids()[block.start..block.start + offset + 1].to_vec(),
                target: token,
                position,
            });
        }
    }
    if after_frequency == 0 {
        return Err(Error::analysis(format!(
            "empty eval set: no targets survive stage 1 (frequency below percentile {percentile}, threshold {threshold})"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::analysis(
            "empty eval set: no targets survive stage 2 (validity mask)",
        ));
    }
    let after_mask = pairs.len();
    Ok(EvalSet {
        pairs,
        meta: SelectionMeta {
            percentile,
            threshold: threshold.is_finite().then_some(threshold),
            context_len,
            candidates,
            after_frequency,
            after_mask,
            mask_source: String::new(),
            subsampled_from: None,
        },
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4], what: &str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::format(path, format!("not a {what} file")));
        }
        Ok(Reader { bytes, at: 4, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "length mismatch: truncated file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.bytes.len() - self.at) {
            return Err(Error::format(self.path, "length mismatch: declared count exceeds file"));
        }
        Ok(n)
    }

    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(self.path, "length mismatch: trailing bytes"));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_token_stream(stream: &TokenStream, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * stream.len() + 8 * stream.boundaries.len());
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for &t in stream.ids() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out.extend_from_slice(&(stream.boundaries.len() as u64).to_le_bytes());
    for &b in &stream.boundaries {
        out.extend_from_slice(&(b as u64).to_le_bytes());
    }
    write(path.as_ref(), &out)
}

pub fn load_token_stream(path: impl AsRef<Path>) -> Result<TokenStream> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path, STREAM_MAGIC, "token stream")?;
    let n = r.count(4)?;
    let ids = r
        .take(4 * n)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let nb = r.count(8)?;
    let boundaries = r
        .take(8 * nb)?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    r.finish()?;
    TokenStream::unchecked(ids, boundaries).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(mask: &ValidityMask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + mask.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    out.extend(mask.0.iter().map(|&v| u8::from(v)));
    write(path.as_ref(), &out)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<ValidityMask> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path, MASK_MAGIC, "validity mask")?;
    let n = r.count(1)?;
    let raw = r.take(n)?;
    r.finish()?;
    let mut valid = Vec::with_capacity(n);
    for (i, &b) in raw.iter().enumerate() {
        match b {
            0 => valid.push(false),
            1 => valid.push(true),
            _ => return Err(Error::format(path, format!("mask byte {b} at index {i} is not 0/1"))),
        }
    }
    Ok(ValidityMask(valid))
}

pub fn save_frequencies(freq: &FrequencyTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 8 * freq.counts.len());
    out.extend_from_slice(FREQ_MAGIC);
    out.extend_from_slice(&(freq.counts.len() as u64).to_le_bytes());
    for &c in &freq.counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    write(path.as_ref(), &out)
}

pub fn load_frequencies(path: impl AsRef<Path>) -> Result<FrequencyTable> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, path, FREQ_MAGIC, "frequency table")?;
    let n = r.count(8)?;
    let counts = r
        .take(8 * n)?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    Ok(FrequencyTable::new(counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(ids: &[u32], boundaries: &[usize], vocab: usize) -> TokenStream {
        TokenStream::new(ids.to_vec(), boundaries.to_vec(), vocab).unwrap()
    }

    #[test]
    fn counting() {
        let f = unigram_frequencies(&stream(&[1, 1, 2], &[], 4), 4);
        assert_eq!(f.counts, vec![0, 2, 1, 0]);
        assert_eq!(f.total, 3);
        let e = unigram_frequencies(&stream(&[], &[], 4), 4);
        assert_eq!(e.counts, vec![0; 4]);
        assert_eq!(e.total, 0);
    }

    #[test]
    fn percentile_matches_hand_computation() {
        // counts {1, 1, 10, 100}: rank 1.5 -> 1 + 0.5 * 9
        assert_eq!(percentile_linear(&[1.0, 1.0, 10.0, 100.0], 50.0), 5.5);
        assert_eq!(percentile_linear(&[3.0], 50.0), 3.0);
        assert_eq!(percentile_linear(&[1.0, 2.0], 100.0), 2.0);
    }

    // tokens a=0 (100), b=1 (10), c=2 (1), d=3 (1)
    fn abcd_freq() -> FrequencyTable {
        FrequencyTable::new(vec![100, 10, 1, 1])
    }

    #[test]
    fn stage_one_keeps_types_below_threshold() {
        let s = stream(&[0, 2, 1, 3, 0, 2, 1], &[], 4);
        let eval = select_rare_targets(&s, &abcd_freq(), 50.0, &ValidityMask::all(4, true), 8).unwrap();
        assert_eq!(eval.meta.threshold, Some(5.5));
        let targets: Vec<u32> = eval.pairs.iter().map(|p| p.target).collect();
        assert_eq!(targets, vec![2, 3, 2]);
        assert_eq!(eval.positions(), vec![1, 3, 5]);
        assert_eq!(eval.pairs[1].context, vec![0, 2, 1]);
    }

    #[test]
    fn all_false_mask_names_stage_two() {
        let s = stream(&[0, 2, 1, 3], &[], 4);
        let err = select_rare_targets(&s, &abcd_freq(), 50.0, &ValidityMask::all(4, false), 8).unwrap_err();
        assert!(err.to_string().contains("empty eval set"));
        assert!(err.to_string().contains("stage 2"), "{err}");
    }

    #[test]
    fn no_rare_tokens_names_stage_one() {
        let s = stream(&[2, 0, 0, 0], &[], 4);
        let err = select_rare_targets(&s, &abcd_freq(), 50.0, &ValidityMask::all(4, true), 8).unwrap_err();
        assert!(err.to_string().contains("stage 1"), "{err}");
    }

    #[test]
    fn percentile_hundred_admits_everything() {
        let s = stream(&[0, 1, 2, 3, 0], &[], 4);
        let eval = select_rare_targets(&s, &abcd_freq(), 100.0, &ValidityMask::all(4, true), 8).unwrap();
        assert_eq!(eval.len(), 4);
    }

    #[test]
    fn contexts_respect_documents_and_length() {
        let s = stream(&[2, 2, 2, 2, 2, 2, 2, 2], &[3, 8], 4);
        let eval = select_rare_targets(&s, &abcd_freq(), 50.0, &ValidityMask::all(4, true), 2).unwrap();
        // doc 0 = [0,3): targets 1,2. doc 1 = [3,8): targets 4..=7
        assert_eq!(eval.positions(), vec![1, 2, 4, 5, 6, 7]);
        for p in &eval.pairs {
            assert!(!p.context.is_empty() && p.context.len() <= 2);
            let start = p.position - p.context.len();
            assert!(start >= if p.position < 3 { 0 } else { 3 });
        }
    }

    #[test]
    fn scoring_blocks_cover_each_target_once() {
        let s = stream(&[0; 20], &[7, 8, 20], 4);
        let blocks = s.scoring_blocks(4);
        let mut covered: Vec<usize> = blocks.iter().flat_map(|b| b.target_positions()).collect();
        covered.sort_unstable();
        let expected: Vec<usize> = (1..7).chain(9..20).collect();
        assert_eq!(covered, expected);
        assert!(blocks.iter().all(|b| b.len <= 4));
    }

    #[test]
    fn invalid_boundaries_rejected() {
        assert!(TokenStream::new(vec![0, 1], vec![1, 1], 4).is_err());
        assert!(TokenStream::new(vec![0, 1], vec![3], 4).is_err());
        assert!(TokenStream::new(vec![0, 9], vec![], 4).is_err());
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = stream(&[3, 1, 4, 1, 5], &[2, 5], 8);
        save_token_stream(&s, dir.path().join("s")).unwrap();
        assert_eq!(load_token_stream(dir.path().join("s")).unwrap(), s);
        let m = ValidityMask::new(vec![true, false, true]);
        save_mask(&m, dir.path().join("m")).unwrap();
        assert_eq!(load_mask(dir.path().join("m")).unwrap(), m);
        let f = FrequencyTable::new(vec![0, 7, 2]);
        save_frequencies(&f, dir.path().join("f")).unwrap();
        assert_eq!(load_frequencies(dir.path().join("f")).unwrap(), f);
        let bytes = fs::read(dir.path().join("m")).unwrap();
        assert_eq!(&bytes[..4], b"RWM1");
        assert_eq!(bytes.len(), 4 + 8 + 3);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, b"XXXX\0\0\0\0\0\0\0\0").unwrap();
        assert!(load_mask(&p).unwrap_err().to_string().contains("not a validity mask file"));
        let mut bytes = MASK_MAGIC.to_vec();
        bytes.extend_from_slice(&5u64.to_le_bytes());
        bytes.extend_from_slice(&[1, 0]);
        fs::write(&p, &bytes).unwrap();
        assert!(load_mask(&p).unwrap_err().to_string().contains("length mismatch"));
    }

    proptest! {
        #[test]
        fn frequency_additivity(a in prop::collection::vec(0u32..6, 0..40), b in prop::collection::vec(0u32..6, 0..40)) {
            let fa = unigram_frequencies(&stream(&a, &[], 6), 6);
            let fb = unigram_frequencies(&stream(&b, &[], 6), 6);
            let ab: Vec<u32> = a.iter().chain(&b).copied().collect();
            let fab = unigram_frequencies(&stream(&ab, &[], 6), 6);
            let sum: Vec<u64> = fa.counts.iter().zip(&fb.counts).map(|(x, y)| x + y).collect();
            prop_assert_eq!(fab.counts, sum);
            prop_assert_eq!(fab.total, fa.total + fb.total);
        }

        #[test]
        fn raising_percentile_keeps_targets(
            ids in prop::collection::vec(0u32..10, 5..60),
            counts in prop::collection::vec(0u64..50, 10),
            p in 1.0f64..99.0,
            dp in 0.0f64..50.0,
        ) {
            let s = stream(&ids, &[], 10);
            let f = FrequencyTable::new(counts);
            let m = ValidityMask::all(10, true);
            let lo = select_rare_targets(&s, &f, p, &m, 4);
            let hi = select_rare_targets(&s, &f, (p + dp).min(100.0), &m, 4);
            if let Ok(lo) = lo {
                let hi = hi.unwrap();
                let hp = hi.positions();
                prop_assert!(lo.positions().iter().all(|x| hp.contains(x)));
            }
        }
    }
}
