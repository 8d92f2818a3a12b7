use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evchain::dataio::{
    ensure_config, load_qa_dataset, read_distilled, read_records, write_json, Ablation,
    DatasetFormat, PipelineConfig, RecordFile, RecordWriter, DISTILLED_KIND,
};
use evchain::metrics::{evaluate_gqa, GroundedPrediction, PredictionRecord, WindowPolicy};
use evchain::pipeline::{
    ChainRecord, RejectRecord, RunReport, Runner, Stage, StageOutput, VerdictRecord, CHAINS_KIND,
    POOLS_KIND, REFINED_KIND, REJECTS_KIND, SEGMENTS_KIND, TRACE_KIND, VERDICTS_KIND,
};
use evchain::review::ScoreStore;
use evchain::scorer::{CachedScorer, MockScorer, MockWorld, RemoteScorer, Scorer};
use evchain::search::{Refinement, TraceRecord};
use evchain::types::{DistilledSample, EvidencePool, QaSample};
use evchain_review::{load_chains, router, ReviewState};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// Mock world for the bundled toy corpus; used by `--mock-scorer` unless
/// another world is configured.
const TOY_WORLD: &str = include_str!("../data/toy/mock_world.json");

static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser, Debug)]
#[command(
    name = "evchain",
    version,
    about = "Evidence-chain synthesis for grounded video QA"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated: hier, search, multihop.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Answer every model call from the deterministic mock world.
    #[arg(long, global = true)]
    mock_scorer: bool,
    /// Mock world fixture; defaults to the bundled toy world.
    #[arg(long, global = true)]
    mock_world: Option<PathBuf>,
    /// Chat-completions URL of the model endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Record per-sample failures as rejects instead of stopping.
    #[arg(long, global = true)]
    keep_going: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (overrides the config; 0 uses every core).
    #[arg(long, global = true)]
    concurrency: Option<usize>,
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// QA dataset (.csv or .jsonl).
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split every video into hierarchical segments.
    Segment(DatasetArg),
    /// Caption segments into evidence pools.
    BuildPool {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Narrow each pool to its most informative segments.
    Refine {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Find one evidence chain per sample.
    Search {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Summarize, filter and emit training records.
    Distill {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Every stage in sequence.
    Synthesize(DatasetArg),
    /// Score grounded predictions against a gold dataset.
    EvaluateGqa {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        window_policy: Option<WindowPolicy>,
    },
    /// Summarize the artifacts in the output directory.
    Report {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve distilled chains for rubric annotation.
    ServeReview {
        #[arg(long)]
        distilled: Option<PathBuf>,
        /// Dataset supplying video uris.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Score log; created if missing.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static client assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    hash: String,
    out: PathBuf,
    keep_going: bool,
    mock: bool,
    mock_world: Option<PathBuf>,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = g.seed {
            cfg.seed = seed;
        }
        if let Some(a) = g.ablation {
            cfg.ablation = a;
        }
        if let Some(url) = &g.endpoint {
            cfg.endpoint.url = url.clone();
        }
        if let Some(n) = g.concurrency {
            cfg.concurrency = n;
        }
        cfg.validate()?;
        let out = cfg
            .paths
            .output_dir
            .clone()
            .filter(|_| g.out == Path::new("out"))
            .unwrap_or_else(|| g.out.clone());
        Ok(Self {
            hash: cfg.config_hash(),
            mock_world: g
                .mock_world
                .clone()
                .or_else(|| cfg.paths.mock_world.clone()),
            cfg,
            out,
            keep_going: g.keep_going,
            mock: g.mock_scorer,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn scorer(&self) -> Result<Box<dyn Scorer>> {
        if self.mock {
            return Ok(Box::new(MockScorer::new(self.world()?)));
        }
        let mut endpoint = self.cfg.endpoint.clone();
        endpoint.seed = endpoint.seed.or(Some(self.cfg.seed));
        let remote = RemoteScorer::new(endpoint)?;
        Ok(match &self.cfg.paths.cache_dir {
            Some(dir) => Box::new(CachedScorer::open(remote, &dir.join("responses.jsonl"))?),
            None => Box::new(CachedScorer::in_memory(remote)),
        })
    }

    fn samples(&self, path: &Path) -> Result<(Vec<QaSample>, Vec<RejectRecord>)> {
        let ds = load_qa_dataset(path, DatasetFormat::from_path(path)?)?;
        let mut rejects = Vec::new();
        for r in &ds.rejects {
            let id = r
                .sample_id
                .clone()
                .unwrap_or_else(|| format!("row {}", r.row));
            let detail = r.reasons.join("; ");
            if !self.keep_going {
                bail!("{}: {id}: {detail}", path.display());
            }
            log::warn!("{id}: rejected: {detail}");
            rejects.push(RejectRecord {
                sample_id: id,
                stage: Stage::Load,
                error: detail,
            });
        }
        if self.mock {
            // Fail early on worlds that cannot describe a sample.
            let world = self.world()?;
            for s in &ds.samples {
                world
                    .check_options(&s.sample_id, s.options.len())
                    .map_err(|e| anyhow!("mock world: {e}"))?;
            }
        }
        Ok((ds.samples, rejects))
    }

    /// The mock world, reseeded from the config.
    fn world(&self) -> Result<MockWorld> {
        let mut world: MockWorld = match &self.mock_world {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => serde_json::from_str(TOY_WORLD).expect("bundled world"),
        };
        world.seed = self.cfg.seed;
        world.validate().map_err(|e| anyhow!("mock world: {e}"))?;
        Ok(world)
    }

    fn read<T: DeserializeOwned>(&self, path: &Path, kind: &str) -> Result<Vec<T>> {
        let file: RecordFile<T> = read_records(path, kind)?;
        ensure_config(&file, path, &self.hash)?;
        if let Some(t) = &file.truncation {
            log::warn!(
                "{}: truncated after {} records ({})",
                path.display(),
                t.records_written,
                t.reason
            );
        }
        Ok(file.records)
    }

    fn write<T: Serialize>(
        &self,
        name: &str,
        kind: &str,
        items: &[T],
        interrupted: bool,
    ) -> Result<usize> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let mut w = RecordWriter::create(&self.path(name), kind, &self.hash)?;
        for item in items {
            w.write(item)?;
        }
        Ok(if interrupted {
            w.truncate("interrupted")?
        } else {
            w.finish()?
        })
    }

    fn write_rejects(&self, name: &str, rejects: &[RejectRecord]) -> Result<()> {
        if !rejects.is_empty() || name == "rejects.jsonl" {
            self.write(name, REJECTS_KIND, rejects, false)?;
        }
        Ok(())
    }

    fn write_stage<T: Serialize>(
        &self,
        stage: Stage,
        name: &str,
        kind: &str,
        mut out: StageOutput<T>,
        mut load_rejects: Vec<RejectRecord>,
    ) -> Result<usize> {
        let interrupted = out.interrupted() || CANCEL.load(Ordering::SeqCst);
        let n = self.write(name, kind, &out.items, interrupted)?;
        load_rejects.append(&mut out.rejects);
        self.write_rejects(&format!("rejects_{stage}.jsonl"), &load_rejects)?;
        log::info!(
            "{stage}: wrote {n} records to {}",
            self.path(name).display()
        );
        if interrupted {
            bail!("interrupted; partial output written");
        }
        Ok(n)
    }
}

fn input_or(ctx: &Ctx, input: &Option<PathBuf>, default: &str) -> PathBuf {
    input.clone().unwrap_or_else(|| ctx.path(default))
}

fn runner<'a>(ctx: &'a Ctx, scorer: &'a dyn Scorer) -> Runner<'a> {
    let mut r = Runner::new(&ctx.cfg, scorer);
    r.keep_going = ctx.keep_going;
    r.cancel = Some(&CANCEL);
    r
}

fn synthesize(ctx: &Ctx, dataset: &Path) -> Result<()> {
    let (samples, load_rejects) = ctx.samples(dataset)?;
    let scorer = ctx.scorer()?;
    let run = runner(ctx, scorer.as_ref()).synthesize(&samples)?;
    let cut = run.interrupted || CANCEL.load(Ordering::SeqCst);
    ctx.write("segments.jsonl", SEGMENTS_KIND, &run.segments, cut)?;
    ctx.write("pools.jsonl", POOLS_KIND, &run.pools, cut)?;
    ctx.write("refined.jsonl", REFINED_KIND, &run.refined, cut)?;
    ctx.write("chains.jsonl", CHAINS_KIND, &run.chains, cut)?;
    ctx.write("trace.jsonl", TRACE_KIND, &run.traces, cut)?;
    ctx.write("verdicts.jsonl", VERDICTS_KIND, &run.verdicts, cut)?;
    ctx.write("distilled.jsonl", DISTILLED_KIND, &run.records, cut)?;
    let mut rejects = load_rejects;
    rejects.extend(run.rejects.iter().cloned());
    ctx.write_rejects("rejects.jsonl", &rejects)?;
    let mut report = run.report(samples.len(), &ctx.hash, ctx.cfg.ablation);
    let loaded = rejects.iter().filter(|r| r.stage == Stage::Load).count();
    if loaded > 0 {
        report.rejects.insert(Stage::Load, loaded);
    }
    write_json(&ctx.path("report.json"), &report)?;
    print!("{}", report.to_text());
    if cut {
        bail!("interrupted; partial output written with truncation markers");
    }
    Ok(())
}

fn report(ctx: &Ctx, dataset: Option<&Path>) -> Result<()> {
    let opt = |name: &str| {
        let p = ctx.path(name);
        p.exists().then_some(p)
    };
    let pools: Vec<EvidencePool> = opt("pools.jsonl")
        .map(|p| ctx.read(&p, POOLS_KIND))
        .transpose()?
        .unwrap_or_default();
    let refined: Vec<Refinement> = opt("refined.jsonl")
        .map(|p| ctx.read(&p, REFINED_KIND))
        .transpose()?
        .unwrap_or_default();
    let chains: Vec<ChainRecord> = opt("chains.jsonl")
        .map(|p| ctx.read(&p, CHAINS_KIND))
        .transpose()?
        .unwrap_or_default();
    let verdicts: Vec<VerdictRecord> = opt("verdicts.jsonl")
        .map(|p| ctx.read(&p, VERDICTS_KIND))
        .transpose()?
        .unwrap_or_default();
    let records: Vec<DistilledSample> = match opt("distilled.jsonl") {
        Some(p) => {
            let f = read_distilled(&p)?;
            ensure_config(&f, &p, &ctx.hash)?;
            f.records
        }
        None => Vec::new(),
    };
    let mut rejects: Vec<RejectRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut names = vec!["rejects.jsonl".to_string()];
    for stage in [
        Stage::Load,
        Stage::Segment,
        Stage::Pool,
        Stage::Refine,
        Stage::Search,
        Stage::Distill,
    ] {
        names.push(format!("rejects_{stage}.jsonl"));
    }
    for name in names {
        if let Some(p) = opt(&name) {
            for r in ctx.read::<RejectRecord>(&p, REJECTS_KIND)? {
                if seen.insert((r.sample_id.clone(), r.stage)) {
                    rejects.push(r);
                }
            }
        }
    }
    let samples = match dataset {
        Some(p) => load_qa_dataset(p, DatasetFormat::from_path(p)?)?
            .samples
            .len(),
        None => chains.len().max(pools.len()),
    };
    let report = RunReport::build(
        samples,
        &ctx.hash,
        ctx.cfg.ablation,
        &pools,
        &refined,
        &chains,
        &verdicts,
        &records,
        &rejects,
    );
    print!("{}", report.to_text());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if v.get("format_version").is_some() || v.get("truncated").is_some() {
            continue;
        }
        out.push(
            serde_json::from_value(v).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn evaluate(
    ctx: &Ctx,
    dataset: &Path,
    predictions: &Path,
    policy: Option<WindowPolicy>,
) -> Result<()> {
    let gold = load_qa_dataset(dataset, DatasetFormat::from_path(dataset)?)?;
    let policy = policy.unwrap_or(ctx.cfg.window_policy);
    let by_id: std::collections::HashMap<&str, &QaSample> = gold
        .samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s))
        .collect();
    let mut preds = Vec::new();
    for rec in read_predictions(predictions)? {
        let g = by_id
            .get(rec.sample_id.as_str())
            .ok_or_else(|| anyhow!("prediction for unknown sample {}", rec.sample_id))?;
        preds.push(GroundedPrediction::from_record(&rec, g, policy)?);
    }
    let report = evaluate_gqa(&preds, &gold.samples)?;
    std::fs::create_dir_all(&ctx.out)?;
    write_json(&ctx.path("gqa_report.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.cfg.concurrency)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Segment(d) => {
            let (samples, rejects) = ctx.samples(&d.dataset)?;
            let scorer = ctx.scorer()?;
            let out = runner(&ctx, scorer.as_ref()).segment(&samples)?;
            let n: usize = out.items.iter().map(|p| p.len()).sum();
            ctx.write_stage(
                Stage::Segment,
                "segments.jsonl",
                SEGMENTS_KIND,
                out,
                rejects,
            )?;
            println!("{n} segments");
            Ok(())
        }
        Command::BuildPool { data, input } => {
            let (samples, rejects) = ctx.samples(&data.dataset)?;
            let segments: Vec<EvidencePool> =
                ctx.read(&input_or(&ctx, input, "segments.jsonl"), SEGMENTS_KIND)?;
            let scorer = ctx.scorer()?;
            let out = runner(&ctx, scorer.as_ref()).build_pools(&samples, &segments)?;
            ctx.write_stage(Stage::Pool, "pools.jsonl", POOLS_KIND, out, rejects)
                .map(drop)
        }
        Command::Refine { data, input } => {
            let (samples, rejects) = ctx.samples(&data.dataset)?;
            let pools: Vec<EvidencePool> =
                ctx.read(&input_or(&ctx, input, "pools.jsonl"), POOLS_KIND)?;
            let scorer = ctx.scorer()?;
            let out = runner(&ctx, scorer.as_ref()).refine(&samples, &pools)?;
            ctx.write_stage(Stage::Refine, "refined.jsonl", REFINED_KIND, out, rejects)
                .map(drop)
        }
        Command::Search { data, input } => {
            let (samples, rejects) = ctx.samples(&data.dataset)?;
            let refined: Vec<Refinement> = match ctx.cfg.strategy {
                evchain::dataio::Strategy::Search => {
                    ctx.read(&input_or(&ctx, input, "refined.jsonl"), REFINED_KIND)?
                }
                _ => Vec::new(),
            };
            let scorer = ctx.scorer()?;
            let out = runner(&ctx, scorer.as_ref()).search(&samples, &refined)?;
            let interrupted = out.interrupted();
            let mut chains = Vec::new();
            let mut traces: Vec<TraceRecord> = Vec::new();
            let StageOutput {
                items,
                rejects: stage_rejects,
                skipped,
            } = out;
            for item in items {
                traces.extend(item.trace);
                chains.push(item.chain);
            }
            ctx.write("trace.jsonl", TRACE_KIND, &traces, interrupted)?;
            let out = StageOutput {
                items: chains,
                rejects: stage_rejects,
                skipped,
            };
            ctx.write_stage(Stage::Search, "chains.jsonl", CHAINS_KIND, out, rejects)
                .map(drop)
        }
        Command::Distill { data, input } => {
            let (samples, rejects) = ctx.samples(&data.dataset)?;
            let chains: Vec<ChainRecord> =
                ctx.read(&input_or(&ctx, input, "chains.jsonl"), CHAINS_KIND)?;
            let scorer = ctx.scorer()?;
            let out = runner(&ctx, scorer.as_ref()).distill(&samples, &chains)?;
            let interrupted = out.interrupted();
            let StageOutput {
                items,
                rejects: stage_rejects,
                skipped,
            } = out;
            let mut verdicts = Vec::new();
            let mut records = Vec::new();
            for item in items {
                verdicts.push(item.verdict);
                records.extend(item.records);
            }
            ctx.write("distilled.jsonl", DISTILLED_KIND, &records, interrupted)?;
            let out = StageOutput {
                items: verdicts,
                rejects: stage_rejects,
                skipped,
            };
            ctx.write_stage(
                Stage::Distill,
                "verdicts.jsonl",
                VERDICTS_KIND,
                out,
                rejects,
            )
            .map(drop)
        }
        Command::Synthesize(d) => synthesize(&ctx, &d.dataset),
        Command::EvaluateGqa {
            data,
            predictions,
            window_policy,
        } => evaluate(&ctx, &data.dataset, predictions, *window_policy),
        Command::Report { dataset } => report(&ctx, dataset.as_deref()),
        Command::ServeReview {
            distilled,
            dataset,
            scores,
            addr,
            static_dir,
        } => {
            let distilled = distilled
                .clone()
                .unwrap_or_else(|| ctx.path("distilled.jsonl"));
            let scores = scores.clone().unwrap_or_else(|| ctx.path("scores.jsonl"));
            let chains = load_chains(&distilled, dataset.as_deref())?;
            let state = Arc::new(ReviewState::new(chains, ScoreStore::open(&scores)?));
            evchain_review::serve_blocking(*addr, router(state, static_dir.as_deref()))?;
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if !matches!(cli.command, Command::ServeReview { .. }) {
        if let Err(e) = ctrlc::set_handler(|| {
            log::warn!("interrupt received; finishing in-flight samples");
            CANCEL.store(true, Ordering::SeqCst);
        }) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
