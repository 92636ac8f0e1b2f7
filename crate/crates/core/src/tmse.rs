//! Text-modulated semantic-sampling experts.
//!
//! Each expert owns a sampling route per modality. The route scores every
//! patch token (`alpha`) and predicts a threshold from the class token
//! (`sigma`); tokens scoring above the threshold survive. During training the
//! score map is modulated by the cosine relevance between the tokens and a
//! random subset of caption sentences.

use candle_core::{DType, Tensor, D};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctx::ForwardCtx;
use crate::data::CaptionRecord;
use crate::encoders::{TextEncoder, VisualFeatures};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{self, LayerNorm, Linear, Mlp, VarBuilder};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouteType {
    #[default]
    ModalitySpecific,
    ModalityShared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Keep every token.
    AllToken,
    /// Keep the highest-scoring fraction of tokens.
    TopK,
    /// Threshold the score map at a constant.
    FixedSigma,
    /// Threshold at the learned per-sample `sigma`.
    #[default]
    Dynamic,
}

impl SamplingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AllToken => "all_token",
            Self::TopK => "top_k",
            Self::FixedSigma => "fixed_sigma",
            Self::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all_token" => Ok(Self::AllToken),
            "top_k" => Ok(Self::TopK),
            "fixed_sigma" => Ok(Self::FixedSigma),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(format!("unknown sampling strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmseConfig {
    pub num_experts: usize,
    /// MLP expansion inside each expert.
    pub expansion: usize,
    /// Largest sentence subset drawn per modality.
    pub k_max: usize,
    pub route_type: RouteType,
    pub sampling: SamplingStrategy,
    pub top_k_fraction: f64,
    pub fixed_sigma: f64,
    /// Modulate routes with caption relevance while training.
    pub text_modulation: bool,
    /// Also modulate at evaluation time (full captions).
    pub modulate_at_eval: bool,
}

impl Default for TmseConfig {
    fn default() -> Self {
        Self {
            num_experts: 3,
            expansion: 2,
            k_max: 3,
            route_type: RouteType::ModalitySpecific,
            sampling: SamplingStrategy::Dynamic,
            top_k_fraction: 0.5,
            fixed_sigma: 0.0,
            text_modulation: true,
            modulate_at_eval: false,
        }
    }
}

/// `Dropout(MLP(LN(x))) + x`.
#[derive(Debug, Clone)]
pub struct SemanticExpert {
    pub ln: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
    name: String,
}

impl SemanticExpert {
    pub fn new(vb: &VarBuilder, dim: usize, expansion: usize, dropout: f64, name: &str) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&vb.pp("ln"), dim)?,
            mlp: Mlp::new(&vb.pp("mlp"), dim, dim * expansion)?,
            dropout,
            name: name.to_string(),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.mlp.forward(&self.ln.forward(x)?)?;
        Ok((ctx.dropout(&h, self.dropout, &self.name)? + x)?)
    }
}

/// Token score head and threshold head: `FC -> ReLU -> FC` each.
#[derive(Debug, Clone)]
pub struct SamplingRoute {
    pub tok_fc1: Linear,
    pub tok_fc2: Linear,
    pub cls_fc1: Linear,
    pub cls_fc2: Linear,
}

impl SamplingRoute {
    pub fn new(vb: &VarBuilder, dim: usize) -> Result<Self> {
        let r = (dim / 2).max(1);
        Ok(Self {
            tok_fc1: Linear::new(&vb.pp("tok_fc1"), dim, r)?,
            tok_fc2: Linear::new(&vb.pp("tok_fc2"), r, 1)?,
            cls_fc1: Linear::new(&vb.pp("cls_fc1"), dim, r)?,
            cls_fc2: Linear::new(&vb.pp("cls_fc2"), r, 1)?,
        })
    }

    /// `tok`: `(B, N, D)`, `cls`: `(B, D)`. Returns `alpha (B, N)` and
    /// `sigma (B, 1)`.
    pub fn forward(&self, tok: &Tensor, cls: &Tensor, grid: (usize, usize)) -> Result<(Tensor, Tensor)> {
        let (_, n, _) = tok.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1)));
        }
        let alpha = self.tok_fc2.forward(&self.tok_fc1.forward(tok)?.relu()?)?.squeeze(D::Minus1)?;
        let sigma = self.cls_fc2.forward(&self.cls_fc1.forward(cls)?.relu()?)?;
        Ok((alpha, sigma))
    }
}

/// `gamma = tanh(FC([alpha, beta])) + alpha`, one FC over the channel pair
/// at every location.
#[derive(Debug, Clone)]
pub struct ModulationNet {
    pub fuse: Linear,
}

impl ModulationNet {
    pub fn new(vb: &VarBuilder) -> Result<Self> {
        Ok(Self {
            fuse: Linear::new(&vb.pp("fuse"), 2, 1)?,
        })
    }

    pub fn forward(&self, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if alpha.dims() != beta.dims() {
            return Err(Error::Shape(format!(
                "alpha {:?} and beta {:?} differ",
                alpha.dims(),
                beta.dims()
            )));
        }
        let stacked = Tensor::stack(&[alpha, beta], D::Minus1)?;
        let fused = self.fuse.forward(&stacked)?.squeeze(D::Minus1)?.tanh()?;
        Ok((fused + alpha)?)
    }
}

/// Cosine relevance between a text vector per sample `(B, D)` and every
/// token `(B, N, D)`; the denominator is floored at `1e-8`.
pub fn relevance(text_cls: &Tensor, tok: &Tensor) -> Result<Tensor> {
    let t = text_cls.unsqueeze(1)?;
    let dot = tok.broadcast_mul(&t)?.sum(D::Minus1)?;
    let tn = t.sqr()?.sum(D::Minus1)?.sqrt()?;
    let xn = tok.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = xn.broadcast_mul(&tn)?.maximum(1e-8)?;
    Ok((dot / denom)?)
}

/// Hard 0/1 threshold `map > sigma` with a straight-through gradient.
pub fn binarize(map: &Tensor, sigma: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
    let d = map.broadcast_sub(sigma)?;
    ctx.straight_through(&d, |d| Ok(d.gt(0.0)?.to_dtype(DType::F64)?))
}

/// Keeps the `ceil(fraction * N)` highest entries per row; ties resolve to
/// the lower index.
pub fn top_k_hard(map: &Tensor, fraction: f64) -> Result<Tensor> {
    let (b, n) = map.dims2()?;
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let rows = nn::to_vec2(map)?;
    let mut out = vec![0.0; b * n];
    for (r, row) in rows.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        for &i in &idx[..k] {
            out[r * n + i] = 1.0;
        }
    }
    nn::tensor(out, &[b, n])
}

/// Identifies one sentence draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceKey {
    pub seed: u64,
    pub expert: usize,
    pub step: u64,
    pub sample: u64,
}

/// Random nonempty subset of `sentences`, size uniform in
/// `1..=min(n, k_max)`, joined in original order.
pub fn sample_subset(sentences: &[String], k_max: usize, key: SentenceKey, m: Modality) -> Result<String> {
    let n = sentences.len();
    if n == 0 {
        return Err(Error::EmptyCaption);
    }
    let mut r = rng::stream(
        key.seed,
        &[tag::SENTENCE, key.expert as u64, key.step, m.index() as u64, key.sample],
    );
    let k = r.random_range(1..=n.min(k_max.max(1)));
    let mut picked = index::sample(&mut r, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked.iter().map(|&i| sentences[i].as_str()).collect::<Vec<_>>().join(" "))
}

/// One sentence subset per modality; in evaluation the full captions.
pub fn sample_sentences(
    captions: &PerModality<CaptionRecord>,
    k_max: usize,
    key: SentenceKey,
    train: bool,
) -> Result<PerModality<String>> {
    PerModality::try_from_fn(|m| {
        let c = captions.get(m);
        if c.sentences.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if train {
            sample_subset(&c.sentences, k_max, key, m)
        } else {
            Ok(c.text.clone())
        }
    })
}

/// Captions for a batch plus the keys that make sentence draws reproducible.
pub struct TextInput<'a> {
    pub captions: Vec<&'a PerModality<CaptionRecord>>,
    /// Stable per-sample key (hash of the sample id).
    pub sample_keys: Vec<u64>,
    pub encoder: &'a TextEncoder,
}

/// Routing artifacts of one expert on one modality, detached.
#[derive(Debug, Clone)]
pub struct RouteState {
    pub expert: usize,
    pub modality: Modality,
    /// `(B, N)`.
    pub alpha: Tensor,
    /// `(B, 1)`.
    pub sigma: Tensor,
    pub beta: Option<Tensor>,
    pub gamma: Option<Tensor>,
    /// Hard 0/1 mask `(B, N)`.
    pub mask: Tensor,
}

impl RouteState {
    pub fn density(&self) -> Result<f64> {
        Ok(self.mask.mean_all()?.to_scalar::<f64>()?)
    }
}

#[derive(Debug, Clone)]
enum Routes {
    Specific(PerModality<SamplingRoute>),
    Shared(SamplingRoute),
}

impl Routes {
    fn get(&self, m: Modality) -> &SamplingRoute {
        match self {
            Routes::Specific(r) => r.get(m),
            Routes::Shared(r) => r,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tmse {
    pub cfg: TmseConfig,
    pub experts: Vec<SemanticExpert>,
    routes: Vec<Routes>,
    pub modnets: Vec<PerModality<ModulationNet>>,
}

impl Tmse {
    pub fn new(vb: &VarBuilder, dim: usize, cfg: &TmseConfig, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        if !(0.0..=1.0).contains(&cfg.top_k_fraction) || cfg.top_k_fraction == 0.0 {
            return Err(Error::Config("top_k_fraction must lie in (0, 1]".into()));
        }
        let mut experts = Vec::new();
        let mut routes = Vec::new();
        let mut modnets = Vec::new();
        for i in 0..cfg.num_experts {
            let name = format!("experts.{i}");
            experts.push(SemanticExpert::new(&vb.pp(&name), dim, cfg.expansion, dropout, &format!("tmse.{name}"))?);
            let rvb = vb.pp(format!("routes.{i}"));
            routes.push(match cfg.route_type {
                RouteType::ModalitySpecific => {
                    Routes::Specific(PerModality::try_from_fn(|m| SamplingRoute::new(&rvb.pp(m), dim))?)
                }
                RouteType::ModalityShared => Routes::Shared(SamplingRoute::new(&rvb.pp("shared"), dim)?),
            });
            let mvb = vb.pp(format!("modnets.{i}"));
            modnets.push(PerModality::try_from_fn(|m| ModulationNet::new(&mvb.pp(m)))?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            experts,
            routes,
            modnets,
        })
    }

    pub fn route(&self, expert: usize, m: Modality) -> &SamplingRoute {
        self.routes[expert].get(m)
    }

    pub fn modulates(&self, ctx: &ForwardCtx) -> bool {
        self.cfg.text_modulation && (ctx.is_train() || self.cfg.modulate_at_eval)
    }

    fn text_cls(&self, texts: &TextInput, expert: usize, m: Modality, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut strings = Vec::with_capacity(texts.captions.len());
        for (caps, &sample) in texts.captions.iter().zip(&texts.sample_keys) {
            let key = SentenceKey {
                seed: ctx.seed,
                expert,
                step: ctx.step,
                sample,
            };
            let c = caps.get(m);
            strings.push(if ctx.is_train() {
                sample_subset(&c.sentences, self.cfg.k_max, key, m)?
            } else {
                c.text.clone()
            });
        }
        let refs: Vec<&str> = strings.iter().map(String::as_str).collect();
        texts.encoder.encode_cls(&refs)
    }

    fn mask(&self, alpha_or_gamma: &Tensor, sigma: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        match self.cfg.sampling {
            SamplingStrategy::AllToken => Ok(alpha_or_gamma.ones_like()?),
            SamplingStrategy::Dynamic => binarize(alpha_or_gamma, sigma, ctx),
            SamplingStrategy::FixedSigma => {
                let s = Tensor::full(self.cfg.fixed_sigma, sigma.dims(), sigma.device())?;
                binarize(alpha_or_gamma, &s, ctx)
            }
            SamplingStrategy::TopK => {
                let f = self.cfg.top_k_fraction;
                ctx.straight_through(alpha_or_gamma, |d| top_k_hard(d, f))
            }
        }
    }

    /// Per-expert masked features `(B, 3N, D)` and route diagnostics.
    pub fn forward(
        &self,
        feats: &VisualFeatures,
        texts: Option<&TextInput>,
        ctx: &ForwardCtx,
    ) -> Result<(Vec<Tensor>, Vec<RouteState>)> {
        let modulate = self.modulates(ctx);
        if modulate && texts.is_none() {
            return Err(Error::Config("text modulation needs captions for every sample".into()));
        }
        let tok: Vec<Tensor> = Modality::ALL.iter().map(|&m| feats.tok_of(m)).collect::<Result<_>>()?;
        let cls: Vec<Tensor> = Modality::ALL.iter().map(|&m| feats.cls_of(m)).collect::<Result<_>>()?;
        let mut outputs = Vec::with_capacity(self.experts.len());
        let mut states = Vec::new();
        for (i, expert) in self.experts.iter().enumerate() {
            let mut parts = Vec::with_capacity(3);
            for m in Modality::ALL {
                let (alpha, sigma) = self.route(i, m).forward(&tok[m.index()], &cls[m.index()], feats.grid)?;
                let (beta, gamma) = if modulate {
                    let t = self.text_cls(texts.expect("checked above"), i, m, ctx)?;
                    let beta = relevance(&t, &tok[m.index()])?;
                    let gamma = self.modnets[i].get(m).forward(&alpha, &beta)?;
                    (Some(beta), Some(gamma))
                } else {
                    (None, None)
                };
                let map = gamma.as_ref().unwrap_or(&alpha);
                let mask = self.mask(map, &sigma, ctx)?;
                let transformed = expert.forward(&tok[m.index()], ctx)?;
                parts.push(transformed.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?);
                states.push(RouteState {
                    expert: i,
                    modality: m,
                    alpha: alpha.detach(),
                    sigma: sigma.detach(),
                    beta: beta.map(|b| b.detach()),
                    gamma: gamma.map(|g| g.detach()),
                    mask: mask.detach(),
                });
            }
            outputs.push(Tensor::cat(&parts, 1)?);
        }
        Ok((outputs, states))
    }
}
