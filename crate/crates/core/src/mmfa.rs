//! Multi-modal feature aggregation: the three modality class tokens attend to
//! each expert's token set through that expert's own head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoders::{Attention, VisualFeatures};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryPool {
    /// Concatenate the three attended outputs (3·D per expert).
    #[default]
    Flatten,
    /// Average them (D per expert).
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmfaConfig {
    pub heads: usize,
    pub ffn_expansion: usize,
    pub query_pool: QueryPool,
}

impl Default for MmfaConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_expansion: 2,
            query_pool: QueryPool::Flatten,
        }
    }
}

/// `(B, 3, D)` query of stacked modality class tokens.
pub fn build_query(feats: &VisualFeatures) -> Result<Tensor> {
    feats.cls()
}

/// `FFN(LN(CA(Q, X)))`.
#[derive(Debug, Clone)]
pub struct AggregationHead {
    pub attn: Attention,
    pub ln: LayerNorm,
    pub ffn: Mlp,
    pool: QueryPool,
}

/// Output of one head.
#[derive(Debug, Clone)]
pub struct Aggregated {
    /// `(B, 3·D)` or `(B, D)` with mean pooling.
    pub vector: Tensor,
    /// Cross-attention output before LN/FFN, `(B, 3, D)`.
    pub attended: Tensor,
    /// `(B, heads, 3, L)`.
    pub weights: Tensor,
}

impl AggregationHead {
    pub fn new(vb: &VarBuilder, dim: usize, cfg: &MmfaConfig) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {} heads", cfg.heads)));
        }
        Ok(Self {
            attn: Attention::new(&vb.pp("attn"), dim, cfg.heads)?,
            ln: LayerNorm::new(&vb.pp("ln"), dim)?,
            ffn: Mlp::new(&vb.pp("ffn"), dim, dim * cfg.ffn_expansion)?,
            pool: cfg.query_pool,
        })
    }

    pub fn forward(&self, q: &Tensor, x: &Tensor) -> Result<Aggregated> {
        let (b, nq, d) = q.dims3()?;
        if x.dims3()?.2 != d || x.dims()[0] != b {
            return Err(Error::Shape(format!("query {:?} vs features {:?}", q.dims(), x.dims())));
        }
        let (attended, weights) = self.attn.forward(q, x)?;
        let y = self.ffn.forward(&self.ln.forward(&attended)?)?;
        let vector = match self.pool {
            QueryPool::Flatten => y.reshape((b, nq * d))?,
            QueryPool::Mean => y.mean(1)?,
        };
        Ok(Aggregated {
            vector,
            attended,
            weights,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mmfa {
    pub heads: Vec<AggregationHead>,
}

impl Mmfa {
    pub fn new(vb: &VarBuilder, dim: usize, entries: usize, cfg: &MmfaConfig) -> Result<Self> {
        Ok(Self {
            heads: (0..entries)
                .map(|i| AggregationHead::new(&vb.pp(format!("heads.{i}")), dim, cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Concatenates per-expert aggregated vectors in entry order.
    pub fn forward(&self, q: &Tensor, entries: &[Tensor]) -> Result<(Tensor, Vec<Aggregated>)> {
        if entries.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} aggregation heads but {} expert entries",
                self.heads.len(),
                entries.len()
            )));
        }
        let outs: Vec<Aggregated> = self
            .heads
            .iter()
            .zip(entries)
            .map(|(h, x)| h.forward(q, x))
            .collect::<Result<_>>()?;
        let parts: Vec<&Tensor> = outs.iter().map(|o| &o.vector).collect();
        Ok((Tensor::cat(&parts, 1)?, outs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tensor, to_vec1, ParamStore};

    fn head() -> AggregationHead {
        AggregationHead::new(&ParamStore::new(3).root().pp("h"), 8, &MmfaConfig::default()).unwrap()
    }

    #[test]
    fn single_key_returns_projected_value() {
        let h = head();
        let q = tensor((0..24).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 3, 8]).unwrap();
        let x = tensor((0..8).map(|i| i as f64 * 0.1 - 0.3).collect(), &[1, 1, 8]).unwrap();
        let out = h.forward(&q, &x).unwrap();
        let v = h.attn.out.forward(&h.attn.v.forward(&x).unwrap()).unwrap();
        let v = to_vec1(&v).unwrap();
        let att = to_vec1(&out.attended).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((att[r * 8 + c] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_queries_identical_outputs_and_stochastic_rows() {
        let h = head();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.2).collect();
        let q = tensor([row.clone(), row.clone(), row].concat(), &[1, 3, 8]).unwrap();
        let x = tensor((0..48).map(|i| (i as f64).cos()).collect(), &[1, 6, 8]).unwrap();
        let out = h.forward(&q, &x).unwrap();
        let a = to_vec1(&out.attended).unwrap();
        assert_eq!(a[..8], a[8..16]);
        assert_eq!(a[..8], a[16..]);
        let w = to_vec1(&out.weights).unwrap();
        for row in w.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.vector.dims(), &[1, 24]);
    }

    #[test]
    fn entry_count_checked() {
        let m = Mmfa::new(&ParamStore::new(0).root(), 8, 2, &MmfaConfig::default()).unwrap();
        let q = tensor(vec![0.1; 24], &[1, 3, 8]).unwrap();
        let x = tensor(vec![0.2; 48], &[1, 6, 8]).unwrap();
        assert!(m.forward(&q, &[x.clone()]).is_err());
        assert_eq!(m.forward(&q, &[x.clone(), x]).unwrap().0.dims(), &[1, 48]);
    }
}
