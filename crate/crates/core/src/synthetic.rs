//! Seeded stand-in for a transformer's attention inputs.
//!
//! A unit hidden state walks as `x_t = normalize(x_{t-1} + sigma * g_t)`. Each
//! layer sees `x^l = normalize(x^{l-1} + rho * h_l)` for a fixed unit offset
//! `h_l`, so `rho = 0` makes every layer share one hidden state. Queries, keys
//! and values are linear projections of the layer's hidden state. The
//! approximate query of layer `l` applies `W_Q^l` to `x^{l-1}`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cosine_similarity, full_attention, streaming_attention, topk_select_exact, HeadTensor, ModelShape, TensorRole,
};
use crate::error::{Error, Result};
use crate::head_profile::{fit_importance, profile_similarity, QuerySequence};
use crate::rng::{self, derive_seed};
use crate::workload::{Prompt, StepInput, Workload};

const TAG_WEIGHTS: u64 = 1;
const TAG_IMPORTANCE: u64 = 2;
const TAG_PROMPT: u64 = 3;
const TAG_WALK: u64 = 4;
const TAG_PROFILE: u64 = 5;
const TAG_FIT: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub d_model: usize,
    /// Hidden-state walk step size.
    pub sigma: f64,
    /// Per-layer hidden offset `rho`; 0 gives exact approximate queries.
    pub layer_drift: f64,
    /// Share of query heads planted with high importance.
    pub high_importance_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            d_model: 256,
            sigma: 0.05,
            layer_drift: 0.1,
            high_importance_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model must be >= 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if !(self.layer_drift.is_finite() && self.layer_drift >= 0.0) {
            return Err(Error::config("layer_drift must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.high_importance_fraction) {
            return Err(Error::config("high_importance_fraction outside [0, 1]"));
        }
        Ok(())
    }
}

/// `x W` split into `heads` rows of `head_dim`; `w` is `x.len() x heads*head_dim`.
pub fn project(x: &[f64], w: &[f64], heads: usize, head_dim: usize) -> Result<Vec<Vec<f64>>> {
    let width = heads * head_dim;
    if w.len() != x.len() * width {
        return Err(Error::shape(format!(
            "projection of a {}-vector by {} weights into {heads}x{head_dim}",
            x.len(),
            w.len()
        )));
    }
    let mut out = vec![0.0; width];
    for (xi, row) in x.iter().zip(w.chunks_exact(width)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    Ok(out.chunks_exact(head_dim).map(<[f64]>::to_vec).collect())
}

/// Layer `l`'s query estimate from the previous layer's hidden state.
pub fn approx_query(x_prev_layer: &[f64], w_q_next: &[f64], heads: usize, head_dim: usize) -> Result<Vec<Vec<f64>>> {
    project(x_prev_layer, w_q_next, heads, head_dim)
}

fn unit_vec(r: &mut rng::Rng, len: usize) -> Vec<f64> {
    let mut v = rng::gaussian_vec(r, len);
    rng::normalize(&mut v);
    v
}

fn scaled_gaussian(r: &mut rng::Rng, len: usize, scale: f64) -> Vec<f64> {
    let mut v = rng::gaussian_vec(r, len);
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Layer-0 hidden states `x_0..=x_steps`.
pub fn hidden_walk(d_model: usize, sigma: f64, steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    let mut x = unit_vec(&mut r, d_model);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.clone());
    for _ in 0..steps {
        let g = rng::gaussian_vec(&mut r, d_model);
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += sigma * gi;
        }
        rng::normalize(&mut x);
        out.push(x.clone());
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    shape: ModelShape,
    params: SyntheticParams,
    /// Per layer, `d_model x h_q*d_k`.
    w_q: Vec<Vec<f64>>,
    /// Per layer, `d_model x h_kv*d_k`.
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    importance: Vec<Vec<f64>>,
}

impl SyntheticModel {
    pub fn new(shape: ModelShape, params: SyntheticParams) -> Result<Self> {
        shape.validate()?;
        params.validate()?;
        let d = params.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let (q_width, kv_width) = (shape.num_q_heads * shape.head_dim, shape.num_kv_heads * shape.head_dim);
        let mut r = rng::seeded(derive_seed(params.seed, &[TAG_WEIGHTS]));
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        let mut offsets = Vec::new();
        for _ in 0..shape.num_layers {
            w_q.push(scaled_gaussian(&mut r, d * q_width, scale));
            w_k.push(scaled_gaussian(&mut r, d * kv_width, scale));
            w_v.push(scaled_gaussian(&mut r, d * kv_width, scale));
            offsets.push(unit_vec(&mut r, d));
        }
        let mut r = rng::seeded(derive_seed(params.seed, &[TAG_IMPORTANCE]));
        let importance = (0..shape.num_layers)
            .map(|_| {
                (0..shape.num_q_heads)
                    .map(|_| {
                        let high = r.random::<f64>() < params.high_importance_fraction;
                        let u = r.random::<f64>();
                        if high {
                            0.7 + 0.3 * u
                        } else {
                            0.5 * u
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            shape,
            params,
            w_q,
            w_k,
            w_v,
            offsets,
            importance,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn w_q(&self, layer: usize) -> &[f64] {
        &self.w_q[layer]
    }

    /// Planted per-query-head importance, `[layer][q_head]`.
    pub fn planted_importance(&self) -> &[Vec<f64>] {
        &self.importance
    }

    /// Hidden state seen by every layer, given the layer-0 state.
    pub fn layer_hidden(&self, x0: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.shape.num_layers);
        out.push(x0.to_vec());
        for l in 1..self.shape.num_layers {
            let mut x = out[l - 1].clone();
            if self.params.layer_drift != 0.0 {
                for (xi, hi) in x.iter_mut().zip(&self.offsets[l]) {
                    *xi += self.params.layer_drift * hi;
                }
                rng::normalize(&mut x);
            }
            out.push(x);
        }
        out
    }

    fn queries(&self, layer: usize, x: &[f64]) -> Vec<Vec<f64>> {
        project(x, &self.w_q[layer], self.shape.num_q_heads, self.shape.head_dim).expect("shape checked at construction")
    }

    fn kv(&self, layer: usize, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (h, d) = (self.shape.num_kv_heads, self.shape.head_dim);
        (
            project(x, &self.w_k[layer], h, d).expect("shape checked at construction"),
            project(x, &self.w_v[layer], h, d).expect("shape checked at construction"),
        )
    }

    /// True and approximate queries plus the new KV rows at one hidden state.
    pub fn step_input(&self, x0: &[f64]) -> StepInput {
        let hidden = self.layer_hidden(x0);
        let mut step = StepInput {
            true_queries: Vec::new(),
            approx_queries: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        };
        for (l, x) in hidden.iter().enumerate() {
            let q = self.queries(l, x);
            let approx = if l == 0 { q.clone() } else { self.queries(l, &hidden[l - 1]) };
            let (k, v) = self.kv(l, x);
            step.true_queries.push(q);
            step.approx_queries.push(approx);
            step.keys.push(k);
            step.values.push(v);
        }
        step
    }

    /// Prompt KV rows drawn as standard normals: the distribution of a
    /// projection of an independent random unit hidden state per token.
    fn prompt(&self, n_prompt: usize, x0: &[f64]) -> Result<Prompt> {
        let (h, d) = (self.shape.num_kv_heads, self.shape.head_dim);
        let mut r = rng::seeded(derive_seed(self.params.seed, &[TAG_PROMPT]));
        let mut keys = Vec::with_capacity(self.shape.num_layers);
        let mut values = Vec::with_capacity(self.shape.num_layers);
        for _ in 0..self.shape.num_layers {
            let mut lk = Vec::with_capacity(h);
            let mut lv = Vec::with_capacity(h);
            for _ in 0..h {
                lk.push(HeadTensor::new(TensorRole::Key, d, rng::gaussian_vec(&mut r, n_prompt * d))?);
                lv.push(HeadTensor::new(TensorRole::Value, d, rng::gaussian_vec(&mut r, n_prompt * d))?);
            }
            keys.push(lk);
            values.push(lv);
        }
        let queries = self.layer_hidden(x0).iter().enumerate().map(|(l, x)| self.queries(l, x)).collect();
        Ok(Prompt { keys, values, queries })
    }

    /// Prompt plus `steps` decode steps along the seeded walk.
    pub fn workload(&self, n_prompt: usize, steps: usize) -> Result<Workload> {
        if n_prompt == 0 {
            return Err(Error::config("n_prompt must be >= 1"));
        }
        let walk = hidden_walk(
            self.params.d_model,
            self.params.sigma,
            steps,
            derive_seed(self.params.seed, &[TAG_WALK]),
        );
        let prompt = self.prompt(n_prompt, &walk[0])?;
        let steps = walk[1..].iter().map(|x| self.step_input(x)).collect();
        Ok(Workload {
            shape: self.shape,
            prompt,
            steps,
        })
    }

    /// Mean adjacent true-query cosine per `[layer][q_head]` over `count`
    /// independent walks of `steps` steps.
    pub fn profile_similarity(&self, count: usize, steps: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 || steps < 2 {
            return Err(Error::config("profiling needs >= 1 sequence of >= 2 steps"));
        }
        let mut per_layer: Vec<Vec<QuerySequence>> = vec![Vec::with_capacity(count); self.shape.num_layers];
        for i in 0..count {
            let seed = derive_seed(self.params.seed, &[TAG_PROFILE, i as u64]);
            let walk = hidden_walk(self.params.d_model, self.params.sigma, steps - 1, seed);
            let mut seqs: Vec<QuerySequence> = vec![Vec::with_capacity(steps); self.shape.num_layers];
            for x0 in &walk {
                for (l, x) in self.layer_hidden(x0).iter().enumerate() {
                    seqs[l].push(self.queries(l, x));
                }
            }
            for (acc, s) in per_layer.iter_mut().zip(seqs) {
                acc.push(s);
            }
        }
        per_layer.iter().map(|seqs| profile_similarity(seqs)).collect()
    }

    /// Recovers each query head's importance by fitting the blend of full and
    /// streaming attention that reproduces its reference output.
    ///
    /// The reference output is the planted blend, so the fit is exact up to
    /// rounding whenever full and streaming outputs differ.
    pub fn fit_importance(&self, prompt: &Prompt, samples: usize, sink: usize, recent: usize) -> Result<Vec<Vec<f64>>> {
        if samples == 0 {
            return Err(Error::config("importance fitting needs >= 1 sample"));
        }
        let walk = hidden_walk(
            self.params.d_model,
            1.0,
            samples - 1,
            derive_seed(self.params.seed, &[TAG_FIT]),
        );
        let hidden: Vec<Vec<Vec<f64>>> = walk.iter().map(|x| self.layer_hidden(x)).collect();
        let mut out = Vec::with_capacity(self.shape.num_layers);
        for l in 0..self.shape.num_layers {
            let mut row = Vec::with_capacity(self.shape.num_q_heads);
            for h in 0..self.shape.num_q_heads {
                let kv = self.shape.kv_head_of(h);
                let (keys, values) = (&prompt.keys[l][kv], &prompt.values[l][kv]);
                let alpha = self.importance[l][h];
                let (mut full, mut stream, mut target) = (Vec::new(), Vec::new(), Vec::new());
                for hs in &hidden {
                    let q = &self.queries(l, &hs[l])[h];
                    let f = full_attention(q, keys, values)?.values;
                    let s = streaming_attention(q, keys, values, sink, recent)?.values;
                    target.push(f.iter().zip(&s).map(|(f, s)| alpha * f + (1.0 - alpha) * s).collect());
                    full.push(f);
                    stream.push(s);
                }
                let fit = fit_importance(&full, &stream, &target)?;
                row.push(if fit.degenerate { alpha } else { fit.alpha });
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// Mean adjacent-query cosine and mean top-k overlap for one walk step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub sigma: f64,
    pub mean_cosine: f64,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapStudy {
    pub n_keys: usize,
    pub k: usize,
    pub sequences: usize,
    pub steps: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub seed: u64,
}

/// One adjacent-step pair: query cosine and the fraction of top-k indices kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub cosine: f64,
    pub overlap: f64,
}

impl OverlapStudy {
    /// Walks queries over fixed random keys and measures, for every adjacent
    /// pair of steps, how much of the top-k set survives.
    pub fn pairs(&self, sigma: f64) -> Result<Vec<OverlapPair>> {
        if self.k == 0 || self.k > self.n_keys || self.steps == 0 || self.sequences == 0 {
            return Err(Error::config("overlap study needs 1 <= k <= n and >= 1 step and sequence"));
        }
        let mut out = Vec::with_capacity(self.sequences * self.steps);
        let scale = 1.0 / (self.d_model as f64).sqrt();
        for s in 0..self.sequences {
            let mut r = rng::seeded(derive_seed(self.seed, &[TAG_WEIGHTS, s as u64]));
            let w_q = scaled_gaussian(&mut r, self.d_model * self.head_dim, scale);
            let keys = HeadTensor::new(
                TensorRole::Key,
                self.head_dim,
                rng::gaussian_vec(&mut r, self.n_keys * self.head_dim),
            )?;
            let walk = hidden_walk(self.d_model, sigma, self.steps, derive_seed(self.seed, &[TAG_WALK, s as u64]));
            let mut prev: Option<(Vec<f64>, Vec<usize>)> = None;
            for x in &walk {
                let q = project(x, &w_q, 1, self.head_dim)?.remove(0);
                let top = topk_select_exact(&q, &keys, self.k)?;
                if let Some((pq, ptop)) = &prev {
                    let shared = top.iter().filter(|i| ptop.binary_search(i).is_ok()).count();
                    out.push(OverlapPair {
                        cosine: cosine_similarity(pq, &q)?.value,
                        overlap: shared as f64 / self.k as f64,
                    });
                }
                prev = Some((q, top));
            }
        }
        Ok(out)
    }

    pub fn run(&self, sigma: f64) -> Result<OverlapPoint> {
        let pairs = self.pairs(sigma)?;
        let n = pairs.len() as f64;
        Ok(OverlapPoint {
            sigma,
            mean_cosine: pairs.iter().map(|p| p.cosine).sum::<f64>() / n,
            mean_overlap: pairs.iter().map(|p| p.overlap).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape::new(3, 4, 2, 8).unwrap()
    }

    #[test]
    fn identity_projection_returns_hidden() {
        let d = 4;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let x = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(approx_query(&x, &w, 1, d).unwrap(), vec![x.to_vec()]);
        assert!(approx_query(&x[..3], &w, 1, d).is_err());
    }

    #[test]
    fn zero_drift_makes_approx_exact() {
        let m = SyntheticModel::new(shape(), SyntheticParams { layer_drift: 0.0, d_model: 32, ..Default::default() })
            .unwrap();
        let w = m.workload(8, 3).unwrap();
        for s in &w.steps {
            assert_eq!(s.true_queries, s.approx_queries);
        }
        w.validate().unwrap();
    }

    #[test]
    fn frozen_walk_repeats_inputs() {
        let m = SyntheticModel::new(shape(), SyntheticParams { sigma: 0.0, d_model: 32, ..Default::default() }).unwrap();
        let w = m.workload(8, 3).unwrap();
        assert_eq!(w.steps[0], w.steps[2]);
    }

    #[test]
    fn workload_is_deterministic() {
        let p = SyntheticParams { d_model: 32, seed: 9, ..Default::default() };
        let a = SyntheticModel::new(shape(), p).unwrap().workload(16, 4).unwrap();
        let b = SyntheticModel::new(shape(), p).unwrap().workload(16, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_recovers_planted_importance() {
        let m = SyntheticModel::new(shape(), SyntheticParams { d_model: 32, ..Default::default() }).unwrap();
        let w = m.workload(96, 0).unwrap();
        let fitted = m.fit_importance(&w.prompt, 3, 4, 16).unwrap();
        for (f, p) in fitted.iter().flatten().zip(m.planted_importance().iter().flatten()) {
            assert!((f - p).abs() < 1e-9, "{f} vs {p}");
        }
    }
}
