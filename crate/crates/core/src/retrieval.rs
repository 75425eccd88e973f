//! Retrieval metadata: `Encode` over the key cache and `Retrieval` of top-k
//! indices from a query.
//!
//! Two retrievers are registered by name. `exact` scores every key by dot
//! product and keeps no metadata of its own; it is the ground truth. `sign_hash`
//! stores one bit per random hyperplane per key and ranks keys by Hamming
//! affinity to the query's signature, a compact stand-in for hash-based
//! retrievers.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::attention::{dot, dot_scores, top_k_by_score, HeadTensor};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_HASH_BITS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverVariant {
    Exact,
    SignHash,
}

impl RetrieverVariant {
    pub fn name(self) -> &'static str {
        match self {
            RetrieverVariant::Exact => "exact",
            RetrieverVariant::SignHash => "sign_hash",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverSpec {
    pub variant: RetrieverVariant,
    pub hash_bits: usize,
    pub seed: u64,
}

impl Default for RetrieverSpec {
    fn default() -> Self {
        Self {
            variant: RetrieverVariant::SignHash,
            hash_bits: DEFAULT_HASH_BITS,
            seed: 0,
        }
    }
}

/// Per-head retrieval metadata plus the scoring rule that reads it.
pub trait Retriever: Send + Sync + Debug {
    fn variant(&self) -> RetrieverVariant;

    /// Number of key rows encoded.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn metadata_bytes(&self) -> u64;

    /// Relevance of every encoded row to `q`; higher is better.
    fn scores(&self, q: &[f64], keys: &HeadTensor) -> Result<Vec<f64>>;

    /// Top-`k` rows by score, ascending, lower index winning ties.
    fn retrieve(&self, q: &[f64], keys: &HeadTensor, k: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if k == 0 || k > n {
            return Err(Error::arg(format!("retrieve k={k} from {n} rows")));
        }
        top_k_by_score(&self.scores(q, keys)?, k)
    }

    /// Encodes one appended key row.
    fn append(&mut self, key_row: &[f64]) -> Result<()>;

    fn clone_box(&self) -> Box<dyn Retriever>;
}

impl Clone for Box<dyn Retriever> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Debug, Clone)]
pub struct ExactRetriever {
    rows: usize,
    cols: usize,
}

impl ExactRetriever {
    pub fn encode(keys: &HeadTensor) -> Self {
        Self {
            rows: keys.rows(),
            cols: keys.cols(),
        }
    }
}

impl Retriever for ExactRetriever {
    fn variant(&self) -> RetrieverVariant {
        RetrieverVariant::Exact
    }

    fn len(&self) -> usize {
        self.rows
    }

    /// Only a handle to the key matrix.
    fn metadata_bytes(&self) -> u64 {
        std::mem::size_of::<usize>() as u64
    }

    fn scores(&self, q: &[f64], keys: &HeadTensor) -> Result<Vec<f64>> {
        if q.len() != self.cols || keys.cols() != self.cols {
            return Err(Error::shape("query/key width differs from encoded keys"));
        }
        if keys.rows() < self.rows {
            return Err(Error::shape("key matrix shorter than encoded metadata"));
        }
        let mut s = dot_scores(q, keys);
        s.truncate(self.rows);
        Ok(s)
    }

    fn append(&mut self, key_row: &[f64]) -> Result<()> {
        if key_row.len() != self.cols {
            return Err(Error::shape("appended key width"));
        }
        self.rows += 1;
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Retriever> {
        Box::new(self.clone())
    }
}

/// Random-hyperplane signatures: bit `b` of row `j` is `P_b . K_j >= 0`.
#[derive(Debug, Clone)]
pub struct SignHashRetriever {
    bits: usize,
    cols: usize,
    /// `bits x cols`, row-major, drawn from a seeded standard normal.
    projection: Vec<f64>,
    words_per_row: usize,
    codes: Vec<u64>,
}

impl SignHashRetriever {
    pub fn new(cols: usize, bits: usize, seed: u64) -> Result<Self> {
        if bits == 0 || cols == 0 {
            return Err(Error::arg("sign hash needs >= 1 bit and >= 1 column"));
        }
        let mut r = rng::seeded(seed);
        let projection = rng::gaussian_vec(&mut r, bits * cols);
        Ok(Self {
            bits,
            cols,
            projection,
            words_per_row: bits.div_ceil(64),
            codes: Vec::new(),
        })
    }

    pub fn encode(keys: &HeadTensor, bits: usize, seed: u64) -> Result<Self> {
        let mut this = Self::new(keys.cols(), bits, seed)?;
        for i in 0..keys.rows() {
            this.append(keys.row(i))?;
        }
        Ok(this)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_bytes(&self) -> u64 {
        (self.projection.len() * std::mem::size_of::<f64>()) as u64
    }

    /// Packed signature of an arbitrary vector.
    pub fn signature(&self, v: &[f64]) -> Vec<u64> {
        let mut words = vec![0u64; self.words_per_row];
        for b in 0..self.bits {
            let p = &self.projection[b * self.cols..(b + 1) * self.cols];
            if dot(p, v) >= 0.0 {
                words[b / 64] |= 1 << (b % 64);
            }
        }
        words
    }

    pub fn code(&self, row: usize) -> &[u64] {
        &self.codes[row * self.words_per_row..(row + 1) * self.words_per_row]
    }

    /// Bit `b` of row `row`.
    pub fn bit(&self, row: usize, b: usize) -> bool {
        self.code(row)[b / 64] >> (b % 64) & 1 == 1
    }
}

impl Retriever for SignHashRetriever {
    fn variant(&self) -> RetrieverVariant {
        RetrieverVariant::SignHash
    }

    fn len(&self) -> usize {
        self.codes.len() / self.words_per_row
    }

    /// The bit matrix only; the projection is shared configuration.
    fn metadata_bytes(&self) -> u64 {
        (self.len() * self.bits).div_ceil(8) as u64
    }

    fn scores(&self, q: &[f64], _keys: &HeadTensor) -> Result<Vec<f64>> {
        if q.len() != self.cols {
            return Err(Error::shape("query width differs from encoded keys"));
        }
        let sig = self.signature(q);
        Ok(self
            .codes
            .chunks_exact(self.words_per_row)
            .map(|code| {
                let dist: u32 = code.iter().zip(&sig).map(|(a, b)| (a ^ b).count_ones()).sum();
                (self.bits as u32 - dist) as f64
            })
            .collect())
    }

    fn append(&mut self, key_row: &[f64]) -> Result<()> {
        if key_row.len() != self.cols {
            return Err(Error::shape("appended key width"));
        }
        let sig = self.signature(key_row);
        self.codes.extend(sig);
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Retriever> {
        Box::new(self.clone())
    }
}

pub type RetrieverFactory = fn(&HeadTensor, &RetrieverSpec) -> Result<Box<dyn Retriever>>;

/// Name-keyed retriever constructors.
#[derive(Clone)]
pub struct RetrieverRegistry {
    entries: BTreeMap<&'static str, RetrieverFactory>,
}

impl RetrieverRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: RetrieverFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, keys: &HeadTensor, spec: &RetrieverSpec) -> Result<Box<dyn Retriever>> {
        let f = self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "retriever",
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        f(keys, spec)
    }
}

impl Default for RetrieverRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("exact", |k, _| Ok(Box::new(ExactRetriever::encode(k))));
        r.register("sign_hash", |k, s| {
            Ok(Box::new(SignHashRetriever::encode(k, s.hash_bits, s.seed)?))
        });
        r
    }
}

/// Builds metadata for `keys` with the retriever named by `spec.variant`.
pub fn encode(keys: &HeadTensor, spec: &RetrieverSpec) -> Result<Box<dyn Retriever>> {
    if keys.rows() == 0 {
        return Err(Error::shape("encode over an empty key matrix"));
    }
    RetrieverRegistry::default().build(spec.variant.name(), keys, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{topk_select_exact, TensorRole};

    fn random_keys(seed: u64, n: usize, d: usize) -> HeadTensor {
        let mut r = rng::seeded(seed);
        HeadTensor::new(TensorRole::Key, d, rng::gaussian_vec(&mut r, n * d)).unwrap()
    }

    #[test]
    fn exact_matches_sort_oracle() {
        let keys = random_keys(3, 50, 8);
        let ret = encode(&keys, &RetrieverSpec { variant: RetrieverVariant::Exact, ..Default::default() }).unwrap();
        let q = rng::gaussian_vec(&mut rng::seeded(4), 8);
        assert_eq!(ret.retrieve(&q, &keys, 5).unwrap(), topk_select_exact(&q, &keys, 5).unwrap());
        assert_eq!(ret.metadata_bytes(), std::mem::size_of::<usize>() as u64);
    }

    #[test]
    fn sign_hash_bit_accounting() {
        let keys = random_keys(1, 10, 128);
        let h = SignHashRetriever::encode(&keys, 256, 9).unwrap();
        let key_bits = 10 * 128 * 16;
        assert_eq!(h.metadata_bytes() * 8 * 1000 / key_bits, 125);
    }

    #[test]
    fn sign_hash_is_deterministic() {
        let keys = random_keys(1, 20, 16);
        let a = SignHashRetriever::encode(&keys, 256, 5).unwrap();
        let b = SignHashRetriever::encode(&keys, 256, 5).unwrap();
        assert_eq!(a.codes, b.codes);
        let c = SignHashRetriever::encode(&keys, 256, 6).unwrap();
        assert_ne!(a.codes, c.codes);
    }

    #[test]
    fn appended_row_bits_match_projection_signs() {
        let keys = random_keys(11, 33, 16);
        let head = keys.gather(&(0..32).collect::<Vec<_>>()).unwrap();
        let mut h = SignHashRetriever::encode(&head, 256, 2).unwrap();
        h.append(keys.row(32)).unwrap();
        assert_eq!(h.len(), 33);
        for b in 0..256 {
            let p = &h.projection()[b * 16..(b + 1) * 16];
            assert_eq!(h.bit(32, b), dot(p, keys.row(32)) >= 0.0);
        }
    }

    #[test]
    fn retrieve_rejects_large_k() {
        let keys = random_keys(1, 4, 4);
        let h = SignHashRetriever::encode(&keys, 64, 0).unwrap();
        assert!(h.retrieve(&[1.0; 4], &keys, 5).is_err());
    }

    #[test]
    fn unknown_retriever_name() {
        let keys = random_keys(1, 4, 4);
        let err = RetrieverRegistry::default()
            .build("quest", &keys, &RetrieverSpec::default())
            .unwrap_err();
        assert!(err.to_string().contains("exact, sign_hash"));
    }
}
