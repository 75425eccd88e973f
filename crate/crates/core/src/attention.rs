//! Dense decode-step attention kernels.
//!
//! Everything here works on a single query vector against one KV head and
//! accumulates in `f64`. Storage width (`ModelShape::bytes_per_element`) only
//! feeds byte accounting elsewhere; it never changes the arithmetic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HEAD_DIM: usize = 128;
pub const DEFAULT_BYTES_PER_ELEMENT: usize = 2;
pub const DEFAULT_SINK_TOKENS: usize = 4;
pub const DEFAULT_RECENT_TOKENS: usize = 64;

/// Layer/head geometry of the modeled transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
}

fn default_head_dim() -> usize {
    DEFAULT_HEAD_DIM
}

fn default_bytes_per_element() -> usize {
    DEFAULT_BYTES_PER_ELEMENT
}

impl ModelShape {
    pub fn new(
        num_layers: usize,
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let shape = Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.num_kv_heads == 0 || self.num_q_heads == 0 {
            return Err(Error::config("head counts must be >= 1"));
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_q_heads ({}) must be a multiple of num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.head_dim == 0 {
            return Err(Error::config("head_dim must be >= 1"));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::config("bytes_per_element must be >= 1"));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    /// Query-head indices served by `kv_head`.
    pub fn group(&self, kv_head: usize) -> std::ops::Range<usize> {
        let m = self.group_size();
        kv_head * m..(kv_head + 1) * m
    }

    /// Bytes of one token's K row plus V row for a single head.
    pub fn kv_row_bytes(&self) -> u64 {
        (2 * self.head_dim * self.bytes_per_element) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    Query,
    Key,
    Value,
}

/// Row-major `tokens x head_dim` matrix for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    role: TensorRole,
    cols: usize,
    data: Vec<f64>,
}

impl HeadTensor {
    pub fn new(role: TensorRole, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::shape("head tensor needs at least one column"));
        }
        if data.len() % cols != 0 {
            return Err(Error::shape(format!(
                "{} elements do not divide into rows of {cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("head tensor"));
        }
        Ok(Self { role, cols, data })
    }

    pub fn empty(role: TensorRole, cols: usize) -> Self {
        Self {
            role,
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows(role: TensorRole, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::shape("no rows"))?;
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(role, cols, rows.concat())
    }

    pub fn role(&self) -> TensorRole {
        self.role
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "row of length {} appended to tensor with {} columns",
                row.len(),
                self.cols
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("appended row"));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Copies the selected rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<HeadTensor> {
        let n = self.rows();
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(HeadTensor {
            role: self.role,
            cols: self.cols,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub values: Vec<f64>,
    /// Sum of the normalized softmax weights; 1 up to rounding.
    pub weight_sum: f64,
    /// Set when sink/recent counts had to be clamped to the sequence length.
    pub window_clamped: bool,
}

/// Dot product with four interleaved partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_query(q: &[f64], keys: &HeadTensor) -> Result<()> {
    if q.len() != keys.cols() {
        return Err(Error::shape(format!(
            "query length {} vs key width {}",
            q.len(),
            keys.cols()
        )));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    Ok(())
}

/// Softmax-weighted sum over `(key_row, value_row)` pairs with max subtraction.
fn attend<'a, I>(q: &[f64], rows: I, value_dim: usize) -> Result<AttentionOutput>
where
    I: Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
{
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = rows.clone().map(|(k, _)| dot(q, k) * scale).collect();
    if scores.is_empty() {
        return Err(Error::shape("attention over zero rows"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut out = vec![0.0; value_dim];
    let mut weight_sum = 0.0;
    for (w, (_, v)) in weights.iter().zip(rows) {
        let w = w / total;
        weight_sum += w;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention output"));
    }
    Ok(AttentionOutput {
        values: out,
        weight_sum,
        window_clamped: false,
    })
}

fn check_kv(keys: &HeadTensor, values: &HeadTensor) -> Result<()> {
    if keys.rows() != values.rows() {
        return Err(Error::shape(format!(
            "{} key rows vs {} value rows",
            keys.rows(),
            values.rows()
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::shape("empty KV"));
    }
    Ok(())
}

/// `softmax(q K^T / sqrt(d_k)) V` over every row.
pub fn full_attention(q: &[f64], keys: &HeadTensor, values: &HeadTensor) -> Result<AttentionOutput> {
    check_query(q, keys)?;
    check_kv(keys, values)?;
    let rows = (0..keys.rows()).map(|i| (keys.row(i), values.row(i)));
    attend(q, rows, values.cols())
}

/// Orders indices by descending score, lowest index first on ties.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
}

/// Indices of the `k` largest scores, ascending. Ties go to the lower index.
pub fn top_k_by_score(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("top-k with k={k} over {n} candidates")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, by_score_desc(scores));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

pub fn dot_scores(q: &[f64], keys: &HeadTensor) -> Vec<f64> {
    (0..keys.rows()).map(|i| dot(q, keys.row(i))).collect()
}

/// Exact top-k by raw dot product.
pub fn topk_select_exact(q: &[f64], keys: &HeadTensor, k: usize) -> Result<Vec<usize>> {
    check_query(q, keys)?;
    top_k_by_score(&dot_scores(q, keys), k)
}

/// Attention restricted to `indices`, softmax normalized over the subset.
pub fn topk_attention(
    q: &[f64],
    keys: &HeadTensor,
    values: &HeadTensor,
    indices: &[usize],
) -> Result<AttentionOutput> {
    check_query(q, keys)?;
    check_kv(keys, values)?;
    if indices.is_empty() {
        return Err(Error::arg("empty index set"));
    }
    let n = keys.rows();
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::Index { index: i, len: n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::arg(format!("duplicate index {i}")));
        }
    }
    let rows = indices.iter().map(|&i| (keys.row(i), values.row(i)));
    attend(q, rows, values.cols())
}

/// Sink prefix and recent suffix, merged and ascending. The flag reports clamping.
pub fn streaming_indices(n: usize, sink_count: usize, recent_count: usize) -> (Vec<usize>, bool) {
    let clamped = sink_count.saturating_add(recent_count) > n;
    let sink_end = sink_count.min(n);
    let recent_start = n.saturating_sub(recent_count).max(sink_end);
    let idx = (0..sink_end).chain(recent_start..n).collect();
    (idx, clamped)
}

pub fn streaming_attention(
    q: &[f64],
    keys: &HeadTensor,
    values: &HeadTensor,
    sink_count: usize,
    recent_count: usize,
) -> Result<AttentionOutput> {
    let (idx, clamped) = streaming_indices(keys.rows(), sink_count, recent_count);
    if idx.is_empty() {
        return Err(Error::arg("sink and recent windows are both empty"));
    }
    let mut out = topk_attention(q, keys, values, &idx)?;
    out.window_clamped = clamped;
    Ok(out)
}

/// `alpha * full + (1 - alpha) * streaming`, elementwise.
pub fn blended_attention(
    q: &[f64],
    keys: &HeadTensor,
    values: &HeadTensor,
    alpha: f64,
    sink_count: usize,
    recent_count: usize,
) -> Result<AttentionOutput> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha {alpha} outside [0, 1]")));
    }
    let full = full_attention(q, keys, values)?;
    let stream = streaming_attention(q, keys, values, sink_count, recent_count)?;
    if alpha == 1.0 {
        return Ok(full);
    }
    if alpha == 0.0 {
        return Ok(stream);
    }
    let values = full
        .values
        .iter()
        .zip(&stream.values)
        .map(|(f, s)| alpha * f + (1.0 - alpha) * s)
        .collect();
    Ok(AttentionOutput {
        values,
        weight_sum: alpha * full.weight_sum + (1.0 - alpha) * stream.weight_sum,
        window_clamped: stream.window_clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Either input was the zero vector; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("cosine input"));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Similarity {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Rows addressed by token position, e.g. a cache buffer or a persistent head.
#[derive(Debug, Clone, Copy)]
pub struct RowSource<'a> {
    pub tokens: &'a [usize],
    /// Row-major, aligned with `tokens`.
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

/// Attention over the union of several row sources, deduplicated by token
/// position (first source wins) and evaluated in ascending token order.
pub fn hybrid_attention(q: &[f64], sources: &[RowSource<'_>]) -> Result<AttentionOutput> {
    let d = q.len();
    let mut rows: Vec<(usize, &[f64], &[f64])> = Vec::new();
    for src in sources {
        if src.keys.len() != src.tokens.len() * d || src.values.len() % src.tokens.len().max(1) != 0
        {
            return Err(Error::shape("row source does not match its token list"));
        }
        let vd = src.values.len() / src.tokens.len().max(1);
        for (j, &t) in src.tokens.iter().enumerate() {
            rows.push((t, &src.keys[j * d..(j + 1) * d], &src.values[j * vd..(j + 1) * vd]));
        }
    }
    rows.sort_by_key(|r| r.0);
    rows.dedup_by_key(|r| r.0);
    let vd = rows
        .first()
        .map(|r| r.2.len())
        .ok_or_else(|| Error::arg("hybrid attention over no rows"))?;
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    attend(q, rows.iter().map(|r| (r.1, r.2)), vd)
}
