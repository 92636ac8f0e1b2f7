//! Context-shared structure-aware experts: residual blocks over the
//! concatenated multi-modal token sequence, mixed by soft routing weights.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::ctx::ForwardCtx;
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{self, Linear, VarBuilder};
use crate::tmse::{RouteType, SemanticExpert};

/// Same block as the semantic experts.
pub type StructureExpert = SemanticExpert;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsseConfig {
    pub num_experts: usize,
    pub expansion: usize,
    pub route_type: RouteType,
}

impl Default for CsseConfig {
    fn default() -> Self {
        Self {
            num_experts: 3,
            expansion: 2,
            route_type: RouteType::ModalityShared,
        }
    }
}

/// Token-wise logits, mean-pooled over tokens, softmax over experts.
#[derive(Debug, Clone)]
pub struct SharedRoute {
    pub fc: Linear,
}

impl SharedRoute {
    pub fn new(vb: &VarBuilder, dim: usize, experts: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&vb.pp("fc"), dim, experts)?,
        })
    }

    /// `tokens`: `(B, L, D)` -> `omega (B, N_C)`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let logits = self.fc.forward(tokens)?.mean(1)?;
        nn::softmax_last(&logits)
    }
}

/// Weighted sum over experts: `outputs[i]` is `(B, L, D)`, `omega` is
/// `(B, N_C)`.
pub fn mix(outputs: &[Tensor], omega: &Tensor) -> Result<Tensor> {
    let (_, nc) = omega.dims2()?;
    if nc != outputs.len() {
        return Err(Error::Shape(format!(
            "{} expert outputs but {nc} routing weights",
            outputs.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (i, o) in outputs.iter().enumerate() {
        let w = omega.narrow(1, i, 1)?.unsqueeze(D::Minus1)?;
        let term = o.broadcast_mul(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::Shape("no structure experts".into()))
}

#[derive(Debug, Clone)]
enum Route {
    Shared(SharedRoute),
    Specific(PerModality<SharedRoute>),
}

/// Structure feature, the raw per-expert outputs and the routing weights.
#[derive(Debug, Clone)]
pub struct StructureOutput {
    /// `(B, 3N, D)`.
    pub mixed: Tensor,
    pub expert_outputs: Vec<Tensor>,
    /// `(B, N_C)` for shared routing, `(B, 3, N_C)` per modality otherwise.
    pub omega: Tensor,
}

#[derive(Debug, Clone)]
pub struct Csse {
    pub cfg: CsseConfig,
    pub experts: Vec<StructureExpert>,
    route: Route,
}

impl Csse {
    pub fn new(vb: &VarBuilder, dim: usize, cfg: &CsseConfig, dropout: f64) -> Result<Self> {
        if cfg.num_experts == 0 {
            return Err(Error::Config("structure experts need N_C >= 1".into()));
        }
        let experts = (0..cfg.num_experts)
            .map(|i| {
                SemanticExpert::new(
                    &vb.pp(format!("experts.{i}")),
                    dim,
                    cfg.expansion,
                    dropout,
                    &format!("csse.experts.{i}"),
                )
            })
            .collect::<Result<_>>()?;
        let route = match cfg.route_type {
            RouteType::ModalityShared => Route::Shared(SharedRoute::new(&vb.pp("route"), dim, cfg.num_experts)?),
            RouteType::ModalitySpecific => Route::Specific(PerModality::try_from_fn(|m| {
                SharedRoute::new(&vb.pp(format!("route.{m}")), dim, cfg.num_experts)
            })?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            experts,
            route,
        })
    }

    /// `tokens`: `(B, 3N, D)` concatenated patch tokens.
    pub fn forward(&self, tokens: &Tensor, ctx: &ForwardCtx) -> Result<StructureOutput> {
        let outputs: Vec<Tensor> = self
            .experts
            .iter()
            .map(|e| e.forward(tokens, ctx))
            .collect::<Result<_>>()?;
        match &self.route {
            Route::Shared(r) => {
                let omega = r.forward(tokens)?;
                Ok(StructureOutput {
                    mixed: mix(&outputs, &omega)?,
                    expert_outputs: outputs,
                    omega,
                })
            }
            Route::Specific(routes) => {
                let n = tokens.dims()[1] / 3;
                let mut parts = Vec::new();
                let mut omegas = Vec::new();
                for m in Modality::ALL {
                    let slice = |t: &Tensor| t.narrow(1, m.index() * n, n);
                    let omega = routes.get(m).forward(&slice(tokens)?)?;
                    let outs: Vec<Tensor> = outputs.iter().map(slice).collect::<candle_core::Result<_>>()?;
                    parts.push(mix(&outs, &omega)?);
                    omegas.push(omega);
                }
                Ok(StructureOutput {
                    mixed: Tensor::cat(&parts, 1)?,
                    expert_outputs: outputs,
                    omega: Tensor::stack(&omegas, 1)?,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tensor, to_vec1, to_vec2, ParamStore};

    fn zero_all(store: &ParamStore, prefix: &str) {
        for name in store.names().into_iter().filter(|n| n.starts_with(prefix)) {
            let v = store.get(&name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }

    fn tokens() -> Tensor {
        tensor((0..2 * 6 * 4).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.4).collect(), &[2, 6, 4]).unwrap()
    }

    #[test]
    fn zero_route_is_uniform_and_sums_to_one() {
        let store = ParamStore::new(0);
        let r = SharedRoute::new(&store.root().pp("r"), 4, 3).unwrap();
        for row in to_vec2(&r.forward(&tokens()).unwrap()).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        zero_all(&store, "r.");
        for row in to_vec2(&r.forward(&tokens()).unwrap()).unwrap() {
            for w in row {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_experts_give_input() {
        let store = ParamStore::new(0);
        let cfg = CsseConfig {
            num_experts: 2,
            ..Default::default()
        };
        let c = Csse::new(&store.root().pp("c"), 4, &cfg, 0.1).unwrap();
        for i in 0..2 {
            zero_all(&store, &format!("c.experts.{i}.mlp.fc2"));
        }
        let x = tokens();
        let out = c.forward(&x, &ForwardCtx::eval()).unwrap();
        let (a, b) = (to_vec1(&out.mixed).unwrap(), to_vec1(&x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mixture() {
        let o1 = tokens();
        let o2 = (tokens() * 3.0).unwrap();
        let omega = tensor(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(to_vec1(&mix(&[o1.clone(), o2], &omega).unwrap()).unwrap(), to_vec1(&o1).unwrap());
        assert!(mix(&[o1], &omega).is_err());
    }

    #[test]
    fn specific_routes_give_weights_per_modality() {
        let store = ParamStore::new(0);
        let cfg = CsseConfig {
            route_type: RouteType::ModalitySpecific,
            ..Default::default()
        };
        let c = Csse::new(&store.root().pp("c"), 4, &cfg, 0.1).unwrap();
        let out = c.forward(&tokens(), &ForwardCtx::eval()).unwrap();
        assert_eq!(out.omega.dims(), &[2, 3, 3]);
        assert_eq!(out.mixed.dims(), &[2, 6, 4]);
    }
}
