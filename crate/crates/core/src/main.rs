use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmreid::ablation::{run_study, ExpertBank, StudyAxis, StudySpec};
use mmreid::captions::{
    run_pipeline, AttributeSchema, CaptionComposer, ComplementConfig, ExecClient, MllmClient, PipelineConfig,
    RecordingClient, ReplayClient, SimulatedBackend, SimulatedClient,
};
use mmreid::data::{self, load_dataset, write_dataset, ObjectType, Split, SyntheticConfig};
use mmreid::eval::{evaluate, Protocol};
use mmreid::model::{Next, OptimizerConfig};
use mmreid::tmse::SamplingStrategy;
use mmreid::train::{retrieval_set, train, EvalSplit, TrainConfig};

#[derive(Parser)]
#[command(name = "mmreid", version, about = "Tri-modal re-identification with mixtures of experts")]
struct Cli {
    /// TOML file with [synth], [caption], [train], [eval], [study] and [diag] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal dataset.
    Synth(SynthArgs),
    /// Run the attribute and caption pipeline over a dataset.
    Caption(CaptionArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an ablation study.
    Study(StudyArgs),
    /// Export masks, routing weights and attention maps.
    Diag(DiagArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthSection {
    ids: usize,
    per_id: usize,
    height: usize,
    width: usize,
    test_ids: usize,
    seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            ids: 8,
            per_id: 4,
            height: 32,
            width: 16,
            test_ids: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CaptionSection {
    object_type: ObjectType,
    priority: Vec<String>,
    threshold: f64,
    low_markers: Vec<String>,
    concurrency: usize,
    resume: bool,
    /// `template`, or the backend id of a client used as the caption LLM.
    composer: String,
    seed: u64,
}

impl Default for CaptionSection {
    fn default() -> Self {
        let c = ComplementConfig::default();
        Self {
            object_type: ObjectType::Person,
            priority: Vec::new(),
            threshold: c.threshold,
            low_markers: c.low_markers,
            concurrency: 4,
            resume: true,
            composer: "template".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalSection {
    protocol: Protocol,
    split: EvalSplit,
    normalize: bool,
    batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::None,
            split: EvalSplit::Auto,
            normalize: false,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DiagSection {
    count: usize,
    samples: Vec<String>,
}

impl Default for DiagSection {
    fn default() -> Self {
        Self {
            count: 1,
            samples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    synth: SynthSection,
    caption: CaptionSection,
    train: TrainConfig,
    eval: EvalSection,
    study: StudySpec,
    diag: DiagSection,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Extra identities split into query and gallery.
    #[arg(long)]
    test_ids: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    root: PathBuf,
    /// Replay recorded fixtures (one subdirectory per backend).
    #[arg(long, conflicts_with_all = ["simulate", "exec"])]
    replay: Option<PathBuf>,
    /// Use the offline simulated backends (synthetic data only).
    #[arg(long)]
    simulate: bool,
    /// External client as NAME=PROGRAM; repeatable.
    #[arg(long)]
    exec: Vec<String>,
    /// Record every exchange into this fixture directory.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// `template` or the backend id of one of the clients.
    #[arg(long)]
    composer: Option<String>,
    /// Backend tie-break order, comma separated.
    #[arg(long, value_delimiter = ',')]
    priority: Option<Vec<String>>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    object_type: Option<ObjectType>,
    /// Recaption samples that already have sidecars.
    #[arg(long)]
    no_resume: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer profile: `desk` or `reference`.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_tmse: bool,
    #[arg(long)]
    no_csse: bool,
    #[arg(long)]
    no_mmfa: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    sampling: Option<SamplingStrategy>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long, value_parser = parse_eval_split)]
    eval_split: Option<EvalSplit>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long, value_parser = parse_eval_split)]
    split: Option<EvalSplit>,
    /// L2-normalize embeddings before ranking.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// modules | route_type | sampling_strategy | caption_quality | expert_count
    #[arg(long)]
    axis: Option<StudyAxis>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    qualities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    expert_counts: Option<Vec<usize>>,
    /// semantic | structure
    #[arg(long, value_parser = parse_bank)]
    bank: Option<ExpertBank>,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sample ids, comma separated; defaults to the first `--count` samples.
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<String>>,
    #[arg(long)]
    count: Option<usize>,
}

fn parse_eval_split(s: &str) -> Result<EvalSplit, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown split {s:?} (auto|test|train)"))
}

fn parse_bank(s: &str) -> Result<ExpertBank, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown bank {s:?} (semantic|structure)"))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

/// Writes the resolved configuration next to the command's outputs, under its
/// `[section]` so the file can be passed back through `--config`.
fn echo_config<T: Serialize>(dir: &Path, name: &str, section: &str, value: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let wrapped = std::collections::BTreeMap::from([(section, value)]);
    let text = toml::to_string_pretty(&wrapped).context("serializing resolved config")?;
    data::write_atomic(&dir.join(name), text.as_bytes())?;
    println!("resolved config:\n{text}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    data::write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn cmd_synth(a: SynthArgs, mut s: SynthSection) -> anyhow::Result<()> {
    s.ids = a.ids.unwrap_or(s.ids);
    s.per_id = a.per_id.unwrap_or(s.per_id);
    s.height = a.height.unwrap_or(s.height);
    s.width = a.width.unwrap_or(s.width);
    s.test_ids = a.test_ids.unwrap_or(s.test_ids);
    s.seed = a.seed.unwrap_or(s.seed);
    let cfg = SyntheticConfig {
        test_ids: s.test_ids,
        ..SyntheticConfig::new(s.ids, s.per_id, (s.height, s.width), s.seed)
    };
    let index = data::generate_synthetic_with(&cfg)?;
    write_dataset(&index, &a.out, a.force)?;
    echo_config(&a.out, "synth_config.toml", "synth", &s)?;
    let st = index.stats();
    println!(
        "wrote {} samples ({} identities, {} cameras) to {}",
        st.samples,
        st.identities,
        st.cameras,
        a.out.display()
    );
    Ok(())
}

fn cmd_caption(a: CaptionArgs, mut s: CaptionSection) -> anyhow::Result<bool> {
    if let Some(p) = a.priority {
        s.priority = p;
    }
    s.threshold = a.threshold.unwrap_or(s.threshold);
    s.concurrency = a.concurrency.unwrap_or(s.concurrency);
    s.object_type = a.object_type.unwrap_or(s.object_type);
    s.composer = a.composer.unwrap_or(s.composer);
    s.seed = a.seed.unwrap_or(s.seed);
    if a.no_resume {
        s.resume = false;
    }
    let mut clients: Vec<Arc<dyn MllmClient>> = Vec::new();
    if let Some(dir) = &a.replay {
        for c in ReplayClient::discover(dir)? {
            clients.push(Arc::new(c));
        }
        if clients.is_empty() {
            bail!("no backend fixtures under {}", dir.display());
        }
    }
    if a.simulate {
        let index = mmreid::data::load_dataset_with(
            &a.root,
            s.object_type,
            data::LoadOptions {
                require_captions: false,
                check_image_sizes: false,
            },
        )?;
        let truths = data::simulated_truths(&index)?;
        let schema = AttributeSchema::for_object(s.object_type);
        for b in SimulatedBackend::reference_pair() {
            clients.push(Arc::new(SimulatedClient::new(b, schema.clone(), truths.clone(), s.seed)));
        }
    }
    for spec in &a.exec {
        let (name, program) = spec
            .split_once('=')
            .with_context(|| format!("--exec expects NAME=PROGRAM, got {spec:?}"))?;
        clients.push(Arc::new(ExecClient::new(name, program, Vec::new())));
    }
    if clients.is_empty() {
        bail!("no clients configured; use --replay, --simulate or --exec");
    }
    if let Some(dir) = &a.record {
        clients = clients
            .into_iter()
            .map(|c| Arc::new(RecordingClient::new(c, dir)) as Arc<dyn MllmClient>)
            .collect();
    }
    let composer = if s.composer == "template" {
        CaptionComposer::Template
    } else {
        let c = clients
            .iter()
            .find(|c| c.backend_id() == s.composer)
            .with_context(|| format!("composer backend {:?} is not among the clients", s.composer))?;
        CaptionComposer::Llm(c.clone())
    };
    echo_config(&a.root, "caption_config.toml", "caption", &s)?;
    let cfg = PipelineConfig {
        object_type: s.object_type,
        priority: s.priority.clone(),
        complement: ComplementConfig {
            low_markers: s.low_markers.clone(),
            threshold: s.threshold,
        },
        composer,
        concurrency: s.concurrency,
        resume: s.resume,
    };
    let summary = run_pipeline(&a.root, &clients, &cfg)?;
    write_json(&a.root.join("caption_summary.json"), &summary)?;
    println!(
        "captioned {} samples, skipped {}, failed {}",
        summary.written.len(),
        summary.skipped.len(),
        summary.failed.len()
    );
    for (id, why) in &summary.failed {
        eprintln!("failed {id}: {why}");
    }
    Ok(summary.ok())
}

fn cmd_train(a: TrainArgs, mut t: TrainConfig) -> anyhow::Result<()> {
    if let Some(p) = &a.profile {
        t.model.optimizer = match p.as_str() {
            "desk" => OptimizerConfig::desk(),
            "reference" => OptimizerConfig::reference(),
            other => bail!("unknown optimizer profile {other:?} (desk|reference)"),
        };
    }
    t.steps = a.steps.unwrap_or(t.steps);
    t.model.seed = a.seed.unwrap_or(t.model.seed);
    t.model.optimizer.lr = a.lr.unwrap_or(t.model.optimizer.lr);
    t.p = a.p.unwrap_or(t.p);
    t.k = a.k.unwrap_or(t.k);
    t.model.dropout = a.dropout.unwrap_or(t.model.dropout);
    t.eval_every = a.eval_every.unwrap_or(t.eval_every);
    t.protocol = a.protocol.unwrap_or(t.protocol);
    t.eval_split = a.eval_split.unwrap_or(t.eval_split);
    if let Some(s) = a.sampling {
        t.model.tmse.sampling = s;
    }
    if a.no_tmse {
        t.model.modules.tmse = false;
    }
    if a.no_csse {
        t.model.modules.csse = false;
    }
    if a.no_mmfa {
        t.model.modules.mmfa = false;
    }
    if a.no_augment {
        t.augment = None;
    }
    t.validate()?;
    let index = load_dataset(&a.data, ObjectType::Person)?;
    if t.protocol == Protocol::Msvr310Strict && !index.has_time_labels() {
        bail!("protocol msvr310_strict needs time labels for every sample");
    }
    echo_config(&a.out, "config.toml", "train", &t)?;
    let outcome = train(&index, &t, Some(&a.out))?;
    if let Some(e) = outcome.final_eval() {
        write_json(&a.out.join("final_metrics.json"), &e)?;
        println!(
            "final ({} split, {}): mAP {:.4} R1 {:.4} R5 {:.4} R10 {:.4}",
            e.split, e.report.protocol, e.report.map, e.report.r1, e.report.r5, e.report.r10
        );
    }
    if let Some(l) = outcome.log.last() {
        println!(
            "last step: id {:.4} triplet {:.4} total {:.4} acc {:.3}",
            l.losses.id_loss, l.losses.triplet_loss, l.losses.total, l.losses.accuracy
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, mut e: EvalSection) -> anyhow::Result<()> {
    e.protocol = a.protocol.unwrap_or(e.protocol);
    e.split = a.split.unwrap_or(e.split);
    e.normalize |= a.normalize;
    let model = Next::load(&a.checkpoint)?;
    let index = load_dataset(&a.data, ObjectType::Person)?;
    if e.protocol == Protocol::Msvr310Strict && !index.has_time_labels() {
        bail!("protocol msvr310_strict needs time labels for every sample");
    }
    echo_config(&a.out, "config.toml", "eval", &e)?;
    let (set, split) = retrieval_set(&model, &index, e.split, e.batch)?;
    let report = evaluate(&set, e.protocol, e.normalize)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    println!(
        "{split} split, protocol {}: mAP {:.4} R1 {:.4} R5 {:.4} R10 {:.4} ({} queries, {} skipped)",
        report.protocol, report.map, report.r1, report.r5, report.r10, report.num_queries, report.num_skipped
    );
    Ok(())
}

fn cmd_study(a: StudyArgs, mut s: StudySpec) -> anyhow::Result<()> {
    s.axis = a.axis.unwrap_or(s.axis);
    s.base.steps = a.steps.unwrap_or(s.base.steps);
    if let Some(v) = a.seeds {
        s.seeds = v;
    }
    if let Some(v) = a.qualities {
        s.qualities = v;
    }
    if let Some(v) = a.expert_counts {
        s.expert_counts = v;
    }
    s.expert_bank = a.bank.unwrap_or(s.expert_bank);
    let index = load_dataset(&a.data, ObjectType::Person)?;
    echo_config(&a.out, "config.toml", "study", &s)?;
    let report = run_study(&s, &index, Some(&a.out))?;
    report.write(&a.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_diag(a: DiagArgs, mut d: DiagSection) -> anyhow::Result<()> {
    if let Some(v) = a.samples {
        d.samples = v;
    }
    d.count = a.count.unwrap_or(d.count);
    let model = Next::load(&a.checkpoint)?;
    let index = load_dataset(&a.data, ObjectType::Person)?;
    let picks: Vec<usize> = if d.samples.is_empty() {
        let train = index.indices(Split::Train);
        let pool = if train.is_empty() { (0..index.len()).collect() } else { train };
        pool.into_iter().take(d.count.max(1)).collect()
    } else {
        d.samples
            .iter()
            .map(|id| {
                index
                    .records
                    .iter()
                    .position(|r| &r.sample_id == id)
                    .with_context(|| format!("sample {id} not in dataset"))
            })
            .collect::<anyhow::Result<_>>()?
    };
    echo_config(&a.out, "config.toml", "diag", &d)?;
    let size = Some(model.cfg.encoder.image_size);
    let samples = picks
        .iter()
        .map(|&i| index.sample(i, size))
        .collect::<mmreid::Result<Vec<_>>>()?;
    let summary = mmreid::diag::export_diagnostics(&model, &samples, &a.out)?;
    write_json(&a.out.join("diag_summary.json"), &summary)?;
    println!(
        "wrote {} mask images, {} structure maps, {} attention maps",
        summary.mask_images.len(),
        summary.structure_images.len(),
        summary.attention_images.len()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, cfg.synth).map(|_| true),
        Command::Caption(a) => cmd_caption(a, cfg.caption),
        Command::Train(a) => cmd_train(a, cfg.train).map(|_| true),
        Command::Eval(a) => cmd_eval(a, cfg.eval).map(|_| true),
        Command::Study(a) => cmd_study(a, cfg.study).map(|_| true),
        Command::Diag(a) => cmd_diag(a, cfg.diag).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
