//! Visual and text encoders.
//!
//! The visual encoder is a small pre-norm transformer shared by the three
//! modalities (or three copies with `separate_branches`). The text encoder is
//! a frozen hashing-token embedder followed by one frozen transformer layer;
//! it runs in plain `f64` arithmetic because it never takes part in
//! backpropagation.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{self, Init, LayerNorm, Linear, Mlp, ParamStore, VarBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// (height, width) of every input image.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    /// Hash buckets of the text tokenizer.
    pub vocab_size: usize,
    /// Tokens kept per text (after the class token).
    pub max_text_len: usize,
    pub separate_branches: bool,
    /// Always true; kept in the config so checkpoints state it.
    pub freeze_text: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: (32, 16),
            patch_size: 8,
            depth: 2,
            heads: 4,
            dim: 64,
            mlp_ratio: 2,
            vocab_size: 1024,
            max_text_len: 64,
            separate_branches: false,
            freeze_text: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.freeze_text {
            return Err(Error::Config("the text encoder is always frozen".into()));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 {
            return Err(Error::Config("vocab_size and max_text_len must be positive".into()));
        }
        Ok(())
    }
}

/// Splits an image into row-major `patch x patch` tiles, each flattened
/// channel-last and scaled to [0, 1].
pub fn patchify(img: &RgbImage, patch: usize) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(w * h * 3);
    for gy in 0..h / patch {
        for gx in 0..w / patch {
            for y in 0..patch {
                for x in 0..patch {
                    let p = img.get_pixel((gx * patch + x) as u32, (gy * patch + y) as u32);
                    out.extend(p.0.iter().map(|&c| c as f64 / 255.0));
                }
            }
        }
    }
    out
}

/// Patchifies a batch of aligned samples into a `(B, 3, N, 3*p*p)` tensor.
pub fn patchify_batch(images: &[&PerModality<RgbImage>], cfg: &EncoderConfig) -> Result<Tensor> {
    let (h, w) = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * 3 * cfg.num_patches() * cfg.patch_dim());
    for imgs in images {
        for m in Modality::ALL {
            let img = imgs.get(m);
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::Shape(format!(
                    "{m} image is {}x{}, encoder expects {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(patchify(img, cfg.patch_size));
        }
    }
    nn::tensor(data, &[images.len(), 3, cfg.num_patches(), cfg.patch_dim()])
}

/// Multi-head attention where queries and keys/values may differ.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(vb: &VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&vb.pp("q"), dim, dim)?,
            k: Linear::new(&vb.pp("k"), dim, dim)?,
            v: Linear::new(&vb.pp("v"), dim, dim)?,
            out: Linear::new(&vb.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the output `(B, Lq, D)` and the attention weights
    /// `(B, heads, Lq, Lk)`.
    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, lq, d) = q.dims3()?;
        let qh = self.split(&self.q.forward(q)?)?;
        let kh = self.split(&self.k.forward(kv)?)?;
        let vh = self.split(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = nn::softmax_last(&scores)?;
        let ctx = attn.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        Ok((self.out.forward(&ctx)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(vb: &VarBuilder, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&vb.pp("ln1"), dim)?,
            attn: Attention::new(&vb.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&vb.pp("ln2"), dim)?,
            mlp: Mlp::new(&vb.pp("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?.0)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Trunk {
    fn new(vb: &VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            patch_embed: Linear::new(&vb.pp("patch_embed"), cfg.patch_dim(), d)?,
            cls: vb.get(&[1, 1, d], "cls_token", Init::Normal(0.02))?,
            pos: vb.get(&[1, 1 + cfg.num_patches(), d], "pos_embed", Init::Normal(0.02))?,
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&vb.pp(format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&vb.pp("norm"), d)?,
        })
    }

    /// `tokens`: `(B, N, D)` embedded patches; returns `(B, 1+N, D)`.
    fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, tokens], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}

/// Per-modality `[cls; tok]` features for a batch.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    /// `(B, 3, 1+N, D)` in modality order rgb, nir, tir.
    pub all: Tensor,
    pub grid: (usize, usize),
}

impl VisualFeatures {
    pub fn batch(&self) -> usize {
        self.all.dims()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `(B, 3, D)` class tokens.
    pub fn cls(&self) -> Result<Tensor> {
        Ok(self.all.narrow(2, 0, 1)?.squeeze(2)?)
    }

    /// `(B, D)` class token of one modality.
    pub fn cls_of(&self, m: Modality) -> Result<Tensor> {
        Ok(self.all.narrow(1, m.index(), 1)?.narrow(2, 0, 1)?.squeeze(2)?.squeeze(1)?)
    }

    /// `(B, N, D)` patch tokens of one modality.
    pub fn tok_of(&self, m: Modality) -> Result<Tensor> {
        let n = self.num_tokens();
        Ok(self.all.narrow(1, m.index(), 1)?.squeeze(1)?.narrow(1, 1, n)?)
    }

    /// `(B, 3N, D)` patch tokens concatenated over modalities.
    pub fn tok_concat(&self) -> Result<Tensor> {
        let parts = Modality::ALL
            .iter()
            .map(|&m| self.tok_of(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    cfg: EncoderConfig,
    trunks: Vec<Trunk>,
    modality_embed: Tensor,
}

impl VisualEncoder {
    pub fn new(vb: &VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let trunks = if cfg.separate_branches {
            Modality::ALL
                .iter()
                .map(|m| Trunk::new(&vb.pp(format!("branch_{m}")), cfg))
                .collect::<Result<_>>()?
        } else {
            vec![Trunk::new(vb, cfg)?]
        };
        Ok(Self {
            cfg: cfg.clone(),
            trunks,
            modality_embed: vb.get(&[3, cfg.dim], "modality_embed", Init::Normal(0.02))?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `patches`: `(B, 3, N, 3*p*p)` from [`patchify_batch`].
    pub fn forward(&self, patches: &Tensor) -> Result<VisualFeatures> {
        let (b, m, n, p) = patches.dims4()?;
        if m != 3 || n != self.cfg.num_patches() || p != self.cfg.patch_dim() {
            return Err(Error::Shape(format!(
                "visual encoder expects (B, 3, {}, {}), got {:?}",
                self.cfg.num_patches(),
                self.cfg.patch_dim(),
                patches.dims()
            )));
        }
        let d = self.cfg.dim;
        let me = self.modality_embed.reshape((1, 3, 1, d))?;
        let all = if self.trunks.len() == 1 {
            let t = &self.trunks[0];
            let x = t.patch_embed.forward(patches)?.broadcast_add(&me)?;
            t.forward(&x.reshape((b * 3, n, d))?)?.reshape((b, 3, n + 1, d))?
        } else {
            let outs = Modality::ALL
                .iter()
                .map(|&mo| {
                    let t = &self.trunks[mo.index()];
                    let x = t
                        .patch_embed
                        .forward(&patches.narrow(1, mo.index(), 1)?.squeeze(1)?)?
                        .broadcast_add(&self.modality_embed.narrow(0, mo.index(), 1)?)?;
                    Ok(t.forward(&x)?.unsqueeze(1)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&outs, 1)?
        };
        Ok(VisualFeatures {
            all,
            grid: self.cfg.grid(),
        })
    }
}

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn bucket(token: &str, vocab: usize) -> usize {
    (crate::rng::string_key(token) % vocab as u64) as usize
}

/// Frozen text features of one string.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// Class token, length D.
    pub cls: Vec<f64>,
    /// `L x D` token features including the class token at row 0.
    pub tok: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

impl DenseLayer {
    fn read(lin: &Linear) -> Result<Self> {
        Ok(Self {
            w: nn::to_vec1(&lin.weight)?,
            b: match &lin.bias {
                Some(b) => nn::to_vec1(b)?,
                None => vec![0.0; lin.out_dim()],
            },
            n_in: lin.in_dim(),
            n_out: lin.out_dim(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
                self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(w.iter().zip(b))
        .map(|(v, (w, b))| (v - mean) * inv * w + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Snapshot of the frozen text weights in plain arrays.
#[derive(Debug, Clone)]
struct TextWeights {
    embed: Vec<f64>,
    cls: Vec<f64>,
    pos: Vec<f64>,
    ln1: (Vec<f64>, Vec<f64>),
    q: DenseLayer,
    k: DenseLayer,
    v: DenseLayer,
    out: DenseLayer,
    ln2: (Vec<f64>, Vec<f64>),
    fc1: DenseLayer,
    fc2: DenseLayer,
    norm: (Vec<f64>, Vec<f64>),
}

/// Frozen deterministic text encoder with a per-string cache.
#[derive(Debug)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    block: Block,
    embed: Tensor,
    cls: Tensor,
    pos: Tensor,
    norm: LayerNorm,
    weights: Mutex<Option<TextWeights>>,
    cache: Mutex<HashMap<String, TextFeatures>>,
}

impl TextEncoder {
    pub fn new(vb: &VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let vb = vb.frozen();
        let d = cfg.dim;
        Ok(Self {
            cfg: cfg.clone(),
            block: Block::new(&vb.pp("block"), d, cfg.heads, cfg.mlp_ratio)?,
            embed: vb.get(&[cfg.vocab_size, d], "token_embed", Init::Normal(1.0))?,
            cls: vb.get(&[d], "cls_token", Init::Normal(1.0))?,
            pos: vb.get(&[cfg.max_text_len + 1, d], "pos_embed", Init::Normal(0.1))?,
            norm: LayerNorm::new(&vb.pp("norm"), d)?,
            weights: Mutex::new(None),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Drops cached weights and encodings; call after loading parameters.
    pub fn reset_cache(&self) {
        *self.weights.lock().expect("text weights") = None;
        self.cache.lock().expect("text cache").clear();
    }

    fn snapshot(&self) -> Result<TextWeights> {
        let mut guard = self.weights.lock().expect("text weights");
        if let Some(w) = guard.as_ref() {
            return Ok(w.clone());
        }
        let ln = |l: &LayerNorm| -> Result<(Vec<f64>, Vec<f64>)> { Ok((nn::to_vec1(&l.weight)?, nn::to_vec1(&l.bias)?)) };
        let w = TextWeights {
            embed: nn::to_vec1(&self.embed)?,
            cls: nn::to_vec1(&self.cls)?,
            pos: nn::to_vec1(&self.pos)?,
            ln1: ln(&self.block.ln1)?,
            q: DenseLayer::read(&self.block.attn.q)?,
            k: DenseLayer::read(&self.block.attn.k)?,
            v: DenseLayer::read(&self.block.attn.v)?,
            out: DenseLayer::read(&self.block.attn.out)?,
            ln2: ln(&self.block.ln2)?,
            fc1: DenseLayer::read(&self.block.mlp.fc1)?,
            fc2: DenseLayer::read(&self.block.mlp.fc2)?,
            norm: ln(&self.norm)?,
        };
        *guard = Some(w.clone());
        Ok(w)
    }

    fn encode_uncached(&self, text: &str, w: &TextWeights) -> TextFeatures {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let tokens = tokenize(text);
        let mut x: Vec<Vec<f64>> = vec![w.cls.clone()];
        for t in tokens.iter().take(self.cfg.max_text_len) {
            let b = bucket(t, self.cfg.vocab_size);
            x.push(w.embed[b * d..(b + 1) * d].to_vec());
        }
        for (i, row) in x.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += w.pos[i * d + j];
            }
        }
        let l = x.len();
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &w.ln1.0, &w.ln1.1)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| w.q.apply(r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| w.k.apply(r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| w.v.apply(r)).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![vec![0.0; d]; l];
        for hd in 0..heads {
            let s = hd * dh..(hd + 1) * dh;
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| q[i][s.clone()].iter().zip(&k[j][s.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..l {
                    for c in s.clone() {
                        ctx[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..l {
            let o = w.out.apply(&ctx[i]);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h2 = layer_norm(&x[i], &w.ln2.0, &w.ln2.1);
            let m = w.fc2.apply(&w.fc1.apply(&h2).into_iter().map(gelu).collect::<Vec<_>>());
            for c in 0..d {
                x[i][c] += m[c];
            }
        }
        let tok: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &w.norm.0, &w.norm.1)).collect();
        TextFeatures {
            cls: tok[0].clone(),
            tok,
        }
    }

    pub fn encode_one(&self, text: &str) -> Result<TextFeatures> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(f) = self.cache.lock().expect("text cache").get(text) {
            return Ok(f.clone());
        }
        let w = self.snapshot()?;
        let f = self.encode_uncached(text, &w);
        self.cache.lock().expect("text cache").insert(text.to_string(), f.clone());
        Ok(f)
    }

    pub fn encode(&self, texts: &[&str]) -> Result<Vec<TextFeatures>> {
        texts.iter().map(|t| self.encode_one(t)).collect()
    }

    /// `(len, D)` tensor of class tokens, detached from any graph.
    pub fn encode_cls(&self, texts: &[&str]) -> Result<Tensor> {
        let d = self.cfg.dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        for t in texts {
            data.extend(self.encode_one(t)?.cls);
        }
        nn::tensor(data, &[texts.len(), d])
    }
}

/// Cosine similarity of two vectors, used by tests and diagnostics.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-8)
}

/// Builds both encoders on a fresh store (test and tooling helper).
pub fn build_encoders(store: &ParamStore, cfg: &EncoderConfig) -> Result<(VisualEncoder, TextEncoder)> {
    let root = store.root();
    Ok((
        VisualEncoder::new(&root.pp("visual"), cfg)?,
        TextEncoder::new(&root.pp("text"), cfg)?,
    ))
}

/// Mean squared activation per token, `(B, L)`; used for activation maps.
pub fn token_energy(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.mean(D::Minus1)?)
}
