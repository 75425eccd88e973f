//! Decode inputs independent of where they come from: the synthetic model or
//! a recorded trace.

use crate::attention::{HeadTensor, ModelShape};
use crate::error::{Error, Result};

/// Prompt KV plus the step-0 queries that seed every cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// `[layer][kv_head]`, `n_prompt` rows each.
    pub keys: Vec<Vec<HeadTensor>>,
    pub values: Vec<Vec<HeadTensor>>,
    /// `[layer][q_head]` true queries of the last prompt token.
    pub queries: Vec<Vec<Vec<f64>>>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.keys.first().and_then(|l| l.first()).map_or(0, HeadTensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything one decode step needs, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// `[layer][q_head]`.
    pub true_queries: Vec<Vec<Vec<f64>>>,
    /// `[layer][q_head]`, computed from the previous layer's hidden state.
    pub approx_queries: Vec<Vec<Vec<f64>>>,
    /// `[layer][kv_head]` rows of the token decoded at this step.
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub shape: ModelShape,
    pub prompt: Prompt,
    pub steps: Vec<StepInput>,
}

fn check_grid(name: &str, grid: &[Vec<Vec<f64>>], layers: usize, heads: usize, d: usize) -> Result<()> {
    if grid.len() != layers || grid.iter().any(|l| l.len() != heads || l.iter().any(|r| r.len() != d)) {
        return Err(Error::shape(format!("{name} is not {layers} x {heads} x {d}")));
    }
    Ok(())
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        s.validate()?;
        let (l, hq, hkv, d) = (s.num_layers, s.num_q_heads, s.num_kv_heads, s.head_dim);
        let n = self.prompt.len();
        if n == 0 {
            return Err(Error::shape("empty prompt"));
        }
        for grid in [&self.prompt.keys, &self.prompt.values] {
            if grid.len() != l
                || grid
                    .iter()
                    .any(|layer| layer.len() != hkv || layer.iter().any(|t| t.rows() != n || t.cols() != d))
            {
                return Err(Error::shape(format!("prompt KV is not {l} x {hkv} x {n} x {d}")));
            }
        }
        check_grid("prompt queries", &self.prompt.queries, l, hq, d)?;
        for (t, step) in self.steps.iter().enumerate() {
            check_grid(&format!("step {t} true queries"), &step.true_queries, l, hq, d)?;
            check_grid(&format!("step {t} approx queries"), &step.approx_queries, l, hq, d)?;
            check_grid(&format!("step {t} keys"), &step.keys, l, hkv, d)?;
            check_grid(&format!("step {t} values"), &step.values, l, hkv, d)?;
        }
        Ok(())
    }

    /// Per-layer true-query sequences `[layer][step][q_head][d]`, prompt query first.
    pub fn query_sequences(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.shape.num_layers)
            .map(|l| {
                std::iter::once(self.prompt.queries[l].clone())
                    .chain(self.steps.iter().map(|s| s.true_queries[l].clone()))
                    .collect()
            })
            .collect()
    }
}
