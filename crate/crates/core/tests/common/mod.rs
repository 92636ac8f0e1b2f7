#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use mmreid::captions::{
    run_pipeline, AttributeSchema, MllmClient, PipelineConfig, RecordingClient, ReplayClient, SimulatedBackend,
    SimulatedClient,
};
use mmreid::ctx::{ForwardCtx, MaskPolicy, MaskTape};
use mmreid::data::{self, DatasetIndex, Split};
use mmreid::eval::{ItemMeta, Protocol};
use mmreid::model::{Batch, Next, NextConfig};
use mmreid::nn;

/// One analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-300)
    }
}

/// Two samples of two different identities from the synthetic generator.
pub fn micro_batch(cfg: &NextConfig) -> Batch {
    let d = data::generate_synthetic(2, 2, cfg.encoder.image_size, 3).unwrap();
    let a = d.indices(Split::Train).into_iter().find(|&i| d.records[i].identity == 0).unwrap();
    let b = d.indices(Split::Train).into_iter().find(|&i| d.records[i].identity == 1).unwrap();
    let samples = [d.sample(a, None).unwrap(), d.sample(b, None).unwrap()];
    Batch::from_samples(&samples, &cfg.encoder).unwrap()
}

fn total_loss(model: &Next, batch: &Batch, ctx: &ForwardCtx) -> f64 {
    let out = model.forward(batch, ctx).unwrap();
    model.loss(&out, &batch.labels).unwrap().total.to_scalar::<f64>().unwrap()
}

/// Central differences of the training loss at the entry of largest analytic
/// gradient in each probe parameter. Hard masks are replayed from the
/// unperturbed forward so the finite differences see the straight-through
/// surrogate.
pub fn gradient_check(cfg: &NextConfig, probes: &[&str], h: f64) -> Vec<GradProbe> {
    let model = Next::new(cfg, 2).unwrap();
    let batch = micro_batch(cfg);
    let tape = MaskTape::new();
    let mut ctx = ForwardCtx::train(cfg.seed, 5);
    ctx.masks = MaskPolicy::Record(tape.clone());
    let out = model.forward(&batch, &ctx).unwrap();
    let grads = model.loss(&out, &batch.labels).unwrap().total.backward().unwrap();
    ctx.masks = MaskPolicy::Replay(tape.clone());
    probes
        .iter()
        .map(|&name| {
            let var = model.store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let g = nn::to_vec1(&grads.get(var.as_tensor()).expect("parameter has a gradient").flatten_all().unwrap()).unwrap();
            let index = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            let orig = model.store.entry(name, index).unwrap();
            model.store.set_entry(name, index, orig + h).unwrap();
            tape.rewind();
            let plus = total_loss(&model, &batch, &ctx);
            model.store.set_entry(name, index, orig - h).unwrap();
            tape.rewind();
            let minus = total_loss(&model, &batch, &ctx);
            model.store.set_entry(name, index, orig).unwrap();
            GradProbe {
                name: name.to_string(),
                index,
                analytic: g[index],
                numeric: (plus - minus) / (2.0 * h),
            }
        })
        .collect()
}

pub const GRAD_PROBES: [&str; 7] = [
    "tmse.routes.0.rgb.tok_fc1.weight",
    "tmse.routes.1.nir.cls_fc2.bias",
    "tmse.modnets.0.tir.fuse.weight",
    "visual.patch_embed.weight",
    "csse.route.fc.weight",
    "mmfa.heads.3.attn.q.weight",
    "classifier.weight",
];

/// Brute-force retrieval metrics written from the definitions: for each
/// query, every valid gallery item is ranked by counting the valid items
/// that precede it.
pub struct OracleResult {
    pub map: f64,
    pub cmc: [f64; 3],
    pub skipped: usize,
}

pub fn oracle_keep(q: &ItemMeta, g: &ItemMeta, protocol: Protocol) -> bool {
    if q.key == g.key {
        return false;
    }
    match protocol {
        Protocol::None => true,
        Protocol::StandardCamera => !(q.identity == g.identity && q.camera == g.camera),
        Protocol::Msvr310Strict => !(q.identity == g.identity && q.time_label == g.time_label),
    }
}

pub fn oracle(dist: &[Vec<f64>], q: &[ItemMeta], g: &[ItemMeta], protocol: Protocol) -> Option<OracleResult> {
    let mut aps = Vec::new();
    let mut first = Vec::new();
    for (qi, qm) in q.iter().enumerate() {
        let valid: Vec<usize> = (0..g.len()).filter(|&j| oracle_keep(qm, &g[j], protocol)).collect();
        let before = |j: usize, k: usize| dist[qi][k] < dist[qi][j] || (dist[qi][k] == dist[qi][j] && k < j);
        // rank (1-based) of every valid item
        let mut ranked: Vec<(usize, usize)> = valid
            .iter()
            .map(|&j| (1 + valid.iter().filter(|&&k| before(j, k)).count(), j))
            .collect();
        ranked.sort();
        let relevant: Vec<usize> = ranked
            .iter()
            .filter(|(_, j)| g[*j].identity == qm.identity)
            .map(|(r, _)| *r)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for (n, &r) in relevant.iter().enumerate() {
            sum += (n + 1) as f64 / r as f64;
        }
        aps.push(sum / relevant.len() as f64);
        first.push(relevant[0]);
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    let cmc = [1, 5, 10].map(|k| first.iter().filter(|&&r| r <= k).count() as f64 / n);
    Some(OracleResult {
        map: aps.iter().sum::<f64>() / n,
        cmc,
        skipped: q.len() - aps.len(),
    })
}

/// Writes a synthetic dataset to `root`, captions it with the simulated
/// backends while recording fixtures into `fixtures`.
pub fn record_fixtures(index: &DatasetIndex, root: &Path, fixtures: &Path) {
    data::write_dataset(index, root, true).unwrap();
    let truths = data::simulated_truths(index).unwrap();
    let schema = AttributeSchema::person();
    let clients: Vec<Arc<dyn MllmClient>> = SimulatedBackend::reference_pair()
        .into_iter()
        .map(|b| {
            let sim: Arc<dyn MllmClient> = Arc::new(SimulatedClient::new(b, schema.clone(), truths.clone(), 11));
            Arc::new(RecordingClient::new(sim, fixtures)) as Arc<dyn MllmClient>
        })
        .collect();
    let summary = run_pipeline(root, &clients, &replay_config()).unwrap();
    assert!(summary.ok(), "{:?}", summary.failed);
}

pub fn replay_config() -> PipelineConfig {
    PipelineConfig {
        priority: vec!["alpha".into(), "beta".into()],
        resume: false,
        ..PipelineConfig::default()
    }
}

pub fn replay_clients(fixtures: &Path) -> Vec<Arc<dyn MllmClient>> {
    ReplayClient::discover(fixtures)
        .unwrap()
        .into_iter()
        .map(|c| Arc::new(c) as Arc<dyn MllmClient>)
        .collect()
}

/// Sorted (relative path, bytes) listing of every file under `dir`.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
