use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use qmkgf::client::{embed_vector, HttpClient, ModelServiceClient, StubClient, StubTables};
use qmkgf::config::PipelineConfig;
use qmkgf::kg::{IngestReport, KnowledgeGraph};
use qmkgf::metrics::{parse_eval, EvalSummary, ExampleResult, MetricReport};
use qmkgf::pipeline::{self, center_pipeline, Artifacts};
use qmkgf::reward::{parse_rm_examples, score, train_rm, AttentionParams, RmTrainConfig};
use qmkgf::subgraph::{dump_subgraph, multi_hop_subgraph, one_hop_subgraph, pagerank_subgraph, PathKind};
use qmkgf::vector::cosine;
use qmkgf::Error;

/// Stdout writes that tolerate a closed pipe (`qmkgf ... | head`).
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "qmkgf", version, about = "Query-aware multi-path knowledge graph fusion for RAG")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = "QMKGF_CONFIG")]
    config: Option<PathBuf>,
    /// Use the deterministic in-process model client.
    #[arg(long, global = true)]
    stub: bool,
    /// JSON lookup tables for the stub client.
    #[arg(long, global = true)]
    stub_tables: Option<PathBuf>,
    /// Base URL of the model service
    #[arg(long, global = true)]
    service_url: Option<String>,
    /// Seed for reward-model initialization
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Chunks kept after reranking.
    #[arg(long = "k", global = true)]
    k: Option<usize>,
    /// Neighbors kept per subgraph.
    #[arg(long = "K", global = true)]
    big_k: Option<usize>,
    /// Chunks retrieved per expansion item
    #[arg(long = "per-item-k", global = true)]
    per_item_k: Option<usize>,
    /// Reward-model attention heads
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Embedding dimension
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Subgraph fusion strategy
    #[arg(long, global = true, value_parser = ["rm_fusion", "all_fusion", "top5_fusion"])]
    strategy: Option<String>,
    /// Fixed fusion threshold instead of the derived one.
    #[arg(long, global = true, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Print every pipeline stage as JSON.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract triples from a JSONL corpus into a KG file.
    BuildKg {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed entities and chunks into an artifacts directory.
    Index {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reward model on `{"query","subgraph","score"}` lines.
    TrainRm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Answer one question.
    Query {
        question: String,
        #[arg(long)]
        artifacts: PathBuf,
    },
    /// Score answers and rankings against references.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Dump one subgraph around an entity.
    InspectSubgraph {
        entity: String,
        #[arg(long, value_parser = ["onehop", "multihop", "pagerank", "fused"])]
        kind: String,
        #[arg(long)]
        artifacts: PathBuf,
        /// Query used for scoring and fusion; defaults to the entity name.
        #[arg(long)]
        query: Option<String>,
    },
}

/// Exit status 2 marks bad input or usage, 1 a runtime failure.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation(_)
            | Error::NotFound(_)
            | Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input(message: String) -> Failure {
    Failure { code: 2, message }
}

type CliResult<T> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read(path)?).map_err(|_| input(format!("{} is not UTF-8", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: 1,
            message: format!("cannot create {}: {e}", dir.display()),
        })?;
    }
    fs::write(path, bytes).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::parse(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    let mut set = |key: &str, value: Option<String>| -> CliResult<()> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set("seed", cli.seed.map(|v| v.to_string()))?;
    set("k", cli.k.map(|v| v.to_string()))?;
    set("K", cli.big_k.map(|v| v.to_string()))?;
    set("per_item_k", cli.per_item_k.map(|v| v.to_string()))?;
    set("heads", cli.heads.map(|v| v.to_string()))?;
    set("dim", cli.dim.map(|v| v.to_string()))?;
    set("strategy", cli.strategy.clone())?;
    set("tau", cli.tau.map(|v| v.to_string()))?;
    set("service_url", cli.service_url.clone())?;
    if cli.stub {
        cfg.stub = true;
    }
    if let Some(p) = &cli.stub_tables {
        cfg.stub_tables = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_client(cfg: &PipelineConfig) -> CliResult<Box<dyn ModelServiceClient>> {
    if cfg.stub {
        let mut stub = StubClient::new(cfg.dim)?;
        if let Some(p) = &cfg.stub_tables {
            stub = stub.with_tables(StubTables::from_json(&read_text(p)?)?);
        }
        return Ok(Box::new(stub));
    }
    match &cfg.service_url {
        Some(url) => Ok(Box::new(HttpClient::new(url.clone(), cfg.timeout()))),
        None => Err(input("no model service: pass --stub or set service_url".into())),
    }
}

/// Trained parameters from the artifacts directory, else the seeded
/// initialization for the configured shape.
fn load_params(dir: &Path, cfg: &PipelineConfig) -> CliResult<AttentionParams<f64>> {
    let path = dir.join(pipeline::RM_FILE);
    let p = if path.exists() {
        AttentionParams::from_bytes(&read(&path)?)?
    } else {
        AttentionParams::seeded(cfg.dim, cfg.heads, cfg.seed)?
    };
    if p.dim() != cfg.dim || p.heads() != cfg.heads {
        return Err(input(format!(
            "reward model is d={} h={}, config wants d={} h={}",
            p.dim(),
            p.heads(),
            cfg.dim,
            cfg.heads
        )));
    }
    Ok(p)
}

fn load_artifacts(dir: &Path, cfg: &PipelineConfig) -> CliResult<Artifacts> {
    let a = Artifacts::load(dir)?;
    if a.dim() != cfg.dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim,
            actual: a.dim(),
        }
        .into());
    }
    Ok(a)
}

fn json_pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn build_kg(cfg: &PipelineConfig, corpus: &Path, out: &Path) -> CliResult<()> {
    let chunks = pipeline::parse_corpus(&read_text(corpus)?)?;
    let client = make_client(cfg)?;
    let mut kg = KnowledgeGraph::new();
    let mut report = IngestReport::default();
    for c in &chunks {
        let records: Vec<_> = client
            .extract_triples(&c.text)?
            .into_iter()
            .map(|mut r| {
                r.source_chunk.get_or_insert_with(|| c.id.clone());
                r
            })
            .collect();
        report.absorb(kg.ingest_extraction(&records));
    }
    write(out, &kg.save())?;
    outln!("chunks: {}", chunks.len());
    outln!("entities: {}", kg.entity_count());
    outln!("triples: {}", kg.triple_count());
    outln!("merged: {}", report.merged);
    outln!("rejected: {}", report.rejected);
    Ok(())
}

fn index(cfg: &PipelineConfig, kg_path: &Path, corpus: &Path, out: &Path) -> CliResult<()> {
    let kg = KnowledgeGraph::load(&read(kg_path)?)?;
    let corpus_text = read_text(corpus)?;
    let chunks = pipeline::parse_corpus(&corpus_text)?;
    let client = make_client(cfg)?;
    let (entities, skipped) = pipeline::build_entity_index(&kg, client.as_ref(), cfg.dim)?;
    let documents = pipeline::build_document_index(&chunks, client.as_ref(), cfg.dim)?;
    write(&out.join(pipeline::ENTITY_INDEX_FILE), &entities.to_bytes())?;
    write(&out.join(pipeline::DOCUMENT_INDEX_FILE), &documents.to_bytes())?;
    write(&out.join(pipeline::KG_FILE), &kg.save())?;
    write(&out.join(pipeline::CORPUS_FILE), corpus_text.as_bytes())?;
    outln!("entities: {}", entities.len());
    outln!("documents: {}", documents.len());
    for id in skipped {
        outln!("skipped entity (zero embedding): {id}");
    }
    Ok(())
}

fn train(cfg: &PipelineConfig, data: &Path, out: &Path, epochs: Option<usize>, lr: Option<f64>) -> CliResult<()> {
    let examples = parse_rm_examples(&read_text(data)?)?;
    if examples.is_empty() {
        return Err(input(format!("{} has no training examples", data.display())));
    }
    let client = make_client(cfg)?;
    let tc = RmTrainConfig {
        epochs: epochs.unwrap_or(cfg.rm_epochs),
        lr: lr.unwrap_or(cfg.rm_lr),
        seed: cfg.seed,
        heads: cfg.heads,
    };
    let t = train_rm::<f64>(&examples, client.as_ref(), &tc)?;
    if t.params.dim() != cfg.dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim,
            actual: t.params.dim(),
        }
        .into());
    }
    write(out, &t.params.to_bytes())?;
    let stride = (t.curve.len() / 10).max(1);
    for (epoch, mse) in t.curve.iter().enumerate() {
        if epoch % stride == 0 || epoch + 1 == t.curve.len() {
            outln!("epoch {epoch:>5} mse {mse:.6}");
        }
    }
    outln!("initial_mse: {:.6}", t.initial_mse);
    outln!("final_mse: {:.6}", t.final_mse);
    Ok(())
}

fn query(cfg: &PipelineConfig, question: &str, dir: &Path, trace: bool) -> CliResult<()> {
    let artifacts = load_artifacts(dir, cfg)?;
    let params = load_params(dir, cfg)?;
    let client = make_client(cfg)?;
    let out = pipeline::run_qmkgf(question, &artifacts, &params, cfg, client.as_ref())?;
    if trace {
        outln!("{}", json_pretty(&out.trace));
    } else {
        outln!("{}", out.answer);
    }
    Ok(())
}

fn eval(cfg: &PipelineConfig, data: &Path, dir: &Path, json: Option<&Path>) -> CliResult<()> {
    let examples = parse_eval(&read_text(data)?)?;
    if examples.is_empty() {
        return Err(input(format!("{} has no evaluation examples", data.display())));
    }
    let artifacts = load_artifacts(dir, cfg)?;
    let params = load_params(dir, cfg)?;
    let client = make_client(cfg)?;
    let client = client.as_ref();
    // collect() keeps input order whatever the completion order
    let results = examples
        .par_iter()
        .map(|ex| {
            let out = pipeline::run_qmkgf(&ex.query, &artifacts, &params, cfg, client)?;
            let ranked: Vec<&str> = out.trace.ranked_ids();
            let gold = ex.gold_chunks.iter().cloned().collect();
            let metrics = MetricReport::compute(&out.answer, &ex.reference, &ranked, &gold, cfg.k)?;
            Ok(ExampleResult {
                query: ex.query.clone(),
                ranked: ranked.iter().map(|s| s.to_string()).collect(),
                answer: out.answer,
                metrics,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let summary = EvalSummary::new(cfg.k, results)?;
    out!("{}", summary.table());
    if let Some(p) = json {
        write(p, json_pretty(&summary).as_bytes())?;
    }
    Ok(())
}

fn inspect(cfg: &PipelineConfig, entity: &str, kind: &str, dir: &Path, q: Option<&str>) -> CliResult<()> {
    let artifacts = load_artifacts(dir, cfg)?;
    if !artifacts.kg.contains(entity) {
        return Err(input(format!("unknown entity '{entity}'")));
    }
    let params = load_params(dir, cfg)?;
    let client = make_client(cfg)?;
    let client = client.as_ref();
    let name = artifacts.kg.entity(entity).map_or(entity, |e| e.name.as_str());
    let q = q.unwrap_or(name);
    let index = &artifacts.entity_index;
    let sim = |a: &str, b: &str| -> qmkgf::Result<f64> {
        match (index.get(a), index.get(b)) {
            (Some(x), Some(y)) => cosine(x, y),
            _ => Ok(-1.0),
        }
    };
    let g = &artifacts.kg;
    let kind: PathKind = kind.parse()?;
    let dump = match kind {
        PathKind::OneHop | PathKind::MultiHop => {
            let sub = if kind == PathKind::OneHop {
                one_hop_subgraph(g, entity, cfg.subgraph_k, &sim)?
            } else {
                multi_hop_subgraph(g, entity, cfg.subgraph_k, &sim)?
            };
            let s = score(q, &sub, &params, client, cfg.attention_mode)?;
            dump_subgraph(&sub, Some(s), None)
        }
        PathKind::PageRank => {
            let (sub, pr) = pagerank_subgraph::<f64>(g, entity, cfg.subgraph_k, &cfg.pagerank())?;
            let s = score(q, &sub, &params, client, cfg.attention_mode)?;
            dump_subgraph(&sub, Some(s), Some(&pr.scores))
        }
        PathKind::Fused => {
            let q_vec = embed_vector::<f64>(client, q)?;
            let (sub, _) = center_pipeline(q, &q_vec, entity, &artifacts, &params, cfg, client)?;
            dump_subgraph(&sub, None, None)
        }
    };
    out!("{dump}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::BuildKg { corpus, out } => build_kg(&cfg, corpus, out),
        Command::Index { kg, corpus, out } => index(&cfg, kg, corpus, out),
        Command::TrainRm { data, out, epochs, lr } => train(&cfg, data, out, *epochs, *lr),
        Command::Query { question, artifacts } => query(&cfg, question, artifacts, cli.trace),
        Command::Eval { data, artifacts, json } => eval(&cfg, data, artifacts, json.as_deref()),
        Command::InspectSubgraph {
            entity,
            kind,
            artifacts,
            query,
        } => inspect(&cfg, entity, kind, artifacts, query.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
