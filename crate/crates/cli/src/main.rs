use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use progfv::encode::Vocab;
use progfv::exec::execute;
use progfv::gvat::{export_dot, export_json, GraphStructure};
use progfv::learn::train::{
    evaluate, prepare, train_verifier, write_metrics, EvalReport, Prepared, VerifierConfig, Verifier, VerifyExample,
};
use progfv::learn::ParamStore;
use progfv::program::{parse_program, print_program};
use progfv::search::{search, CandidateSet, SearchLimits};
use progfv::select::{select_top, selection_accuracy, selection_vocab, train_selector, SelectConfig, SelectionLoss, Selector};
use progfv::synth::synthetic_corpus;
use progfv::tabular::{load_statements, load_tables, Label, Statement, StatementFormat, Table, TableFormat, TableMap};
use progfv::verbalize::{verbalize_with, VerbalizeOptions};

/// Table fact verification with executable programs.
#[derive(Parser)]
#[command(name = "progfv", version)]
struct Cli {
    /// Directory that relative data paths are resolved against.
    #[arg(long, global = true, env = "PROGFV_DATA_ROOT")]
    data_root: Option<PathBuf>,

    /// Log more to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a program on a table and print the root value.
    Exec(ExecArgs),
    /// Print one sentence per executed operation.
    Verbalize(VerbalizeArgs),
    /// Enumerate candidate programs for statements (JSONL).
    Search(SearchArgs),
    /// Train the program selector.
    RankTrain(RankTrainArgs),
    /// Score a trained selector and export its chosen programs.
    RankEval(RankEvalArgs),
    /// Train the graph verifier.
    VerifyTrain(VerifyTrainArgs),
    /// Evaluate a trained verifier.
    VerifyEval(VerifyEvalArgs),
    /// Dump the evidence graph of one program as JSON or DOT.
    Graph(GraphArgs),
    /// Render an evaluation report as a markdown table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TableArg {
    /// Table file.
    #[arg(long)]
    table: PathBuf,
    #[arg(long, value_enum, default_value = "tabfact")]
    table_format: TableFormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormatArg {
    Tabfact,
    Native,
}

impl From<TableFormatArg> for TableFormat {
    fn from(f: TableFormatArg) -> Self {
        match f {
            TableFormatArg::Tabfact => TableFormat::Tabfact,
            TableFormatArg::Native => TableFormat::Native,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatementFormatArg {
    Jsonl,
    Tabfact,
}

impl From<StatementFormatArg> for StatementFormat {
    fn from(f: StatementFormatArg) -> Self {
        match f {
            StatementFormatArg::Jsonl => StatementFormat::Jsonl,
            StatementFormatArg::Tabfact => StatementFormat::Tabfact,
        }
    }
}

#[derive(Args)]
struct ExecArgs {
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    program: String,
    /// Also print the execution trace as JSON.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct VerbalizeArgs {
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    program: String,
    /// Emit JSON with entity spans instead of plain sentences.
    #[arg(long)]
    spans: bool,
    /// Keep the raw casing of headers and cells.
    #[arg(long)]
    raw_case: bool,
    /// Leave out the root operation's sentence.
    #[arg(long)]
    drop_root: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Table file or directory of tables.
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tabfact")]
    table_format: TableFormatArg,
    /// Statement file.
    #[arg(long)]
    statements: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "jsonl")]
    statement_format: StatementFormatArg,
}

#[derive(Args)]
struct LimitArgs {
    /// Maximum operations per program.
    #[arg(long, default_value_t = 7)]
    max_ops: usize,
    #[arg(long, default_value_t = 200)]
    max_candidates: usize,
    /// Wall-clock budget per statement; 0 disables it.
    #[arg(long, default_value_t = 1000)]
    time_budget_ms: u64,
}

impl LimitArgs {
    fn limits(&self) -> SearchLimits {
        SearchLimits {
            max_ops: self.max_ops,
            max_candidates: self.max_candidates,
            time_budget: (self.time_budget_ms > 0).then(|| Duration::from_millis(self.time_budget_ms)),
            ..SearchLimits::default()
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    /// A single statement; needs --table.
    #[arg(long, requires = "table", conflicts_with = "statements")]
    statement: Option<String>,
    /// Gold label for --statement.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(i64).range(0..=1))]
    label: i64,
    #[arg(long)]
    table: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    limits: LimitArgs,
    /// Worker threads; output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct RankTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    limits: LimitArgs,
    /// JSON file with selector hyperparameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output directory for the checkpoint, vocabulary and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Margin,
    Ce,
}

#[derive(Args)]
struct RankEvalArgs {
    /// Directory written by rank-train.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    limits: LimitArgs,
    #[arg(long)]
    seed: u64,
    /// Write the selected program per statement here (JSONL).
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyDataArgs {
    /// Use N generated examples instead of files.
    #[arg(long, conflicts_with_all = ["tables", "statements", "programs"])]
    synthetic: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    /// Program per statement (JSONL with statement_id and program).
    #[arg(long)]
    programs: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyTrainArgs {
    #[command(flatten)]
    input: VerifyDataArgs,
    /// Fraction of examples held out for validation, taken from the end.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// JSON file with verifier hyperparameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip graph propagation (ablation).
    #[arg(long)]
    no_graph_attention: bool,
    /// Gate with the propagated statement-table node.
    #[arg(long)]
    gate_updated: bool,
    #[arg(long)]
    raw_case: bool,
    /// Optimizer steps with the statement-table encoder frozen.
    #[arg(long)]
    freeze_statement_table_steps: Option<usize>,
    /// Node feature width.
    #[arg(long)]
    dim: Option<usize>,
    /// Attention projection width per head.
    #[arg(long)]
    heads_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyEvalArgs {
    /// Directory written by verify-train.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: VerifyDataArgs,
    /// Seeds the generated corpus when --synthetic is used.
    #[arg(long)]
    seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    statement: String,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    program: String,
    #[arg(long, value_enum, default_value = "json")]
    format: GraphFormat,
    #[arg(long)]
    raw_case: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by verify-eval.
    #[arg(long)]
    metrics: PathBuf,
}

/// Resolves data paths against the optional data root.
struct Ctx {
    data_root: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn table(&self, arg: &TableArg) -> Result<Table> {
        let tables = load_tables(&self.path(&arg.table), arg.table_format.into())?;
        tables.into_values().next().ok_or_else(|| anyhow!("{}: no table", arg.table.display()))
    }

    fn dataset(&self, data: &DataArgs) -> Result<(TableMap, Vec<Statement>)> {
        let (Some(t), Some(s)) = (&data.tables, &data.statements) else {
            bail!(UsageError("--tables and --statements are required".into()));
        };
        let tables = load_tables(&self.path(t), data.table_format.into())?;
        let statements = load_statements(&self.path(s), data.statement_format.into(), &tables)?;
        Ok((tables, statements))
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

fn search_all(tables: &TableMap, statements: &[Statement], limits: &SearchLimits, jobs: usize) -> Result<Vec<CandidateSet>> {
    Ok(pool(jobs)?.install(|| {
        statements
            .par_iter()
            .map(|s| search(s, &tables[&s.table_id], limits))
            .collect()
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| path.display().to_string())
}

fn cmd_exec(ctx: &Ctx, a: &ExecArgs) -> Result<()> {
    let table = ctx.table(&a.table)?;
    let program = parse_program(&a.program)?;
    let (value, trace) = execute(&program, &table)?;
    println!("{value}");
    if a.trace {
        println!("{}", serde_json::to_string(&trace.to_json())?);
    }
    Ok(())
}

fn cmd_verbalize(ctx: &Ctx, a: &VerbalizeArgs) -> Result<()> {
    let table = ctx.table(&a.table)?;
    let program = parse_program(&a.program)?;
    let mut v = verbalize_with(&program, &table, VerbalizeOptions { raw_case: a.raw_case })?;
    // the root comes last in post-order
    if a.drop_root {
        v.sentences.pop();
        v.spans.pop();
    }
    if a.spans {
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        for s in &v.sentences {
            println!("{s}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchLine<'a> {
    statement_id: &'a str,
    program: String,
    label: u8,
    partition: &'static str,
}

fn cmd_search(ctx: &Ctx, a: &SearchArgs) -> Result<()> {
    let limits = a.limits.limits();
    let sets = match &a.statement {
        Some(text) => {
            let table = load_tables(&ctx.path(a.table.as_ref().expect("required by clap")), a.data.table_format.into())?
                .into_values()
                .next()
                .ok_or_else(|| anyhow!("no table"))?;
            let s = Statement {
                id: format!("{}#0", table.id),
                table_id: table.id.clone(),
                text: text.clone(),
                label: Label::from_int(a.label).expect("range checked by clap"),
                tag: None,
            };
            vec![search(&s, &table, &limits)]
        }
        None => {
            let (tables, statements) = ctx.dataset(&a.data)?;
            search_all(&tables, &statements, &limits, a.jobs)?
        }
    };
    let mut out = std::io::stdout().lock();
    for set in &sets {
        for (i, c) in set.programs.iter().enumerate() {
            let line = SearchLine {
                statement_id: &set.statement.id,
                program: print_program(&c.program),
                label: c.label.as_u8(),
                partition: if set.consistent.contains(&i) { "consistent" } else { "inconsistent" },
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RankManifest {
    config: SelectConfig,
    max_ops: usize,
    max_candidates: usize,
}

fn cmd_rank_train(ctx: &Ctx, a: &RankTrainArgs) -> Result<()> {
    let mut config: SelectConfig = match &a.config {
        Some(p) => read_json(&ctx.path(p))?,
        None => SelectConfig::default(),
    };
    if let Some(loss) = a.loss {
        config.loss = match loss {
            LossArg::Margin => SelectionLoss::Margin,
            LossArg::Ce => SelectionLoss::Ce,
        };
    }
    config.gamma = a.gamma.unwrap_or(config.gamma);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.lr = a.lr.unwrap_or(config.lr);
    config.dim = a.dim.unwrap_or(config.dim);
    config.seed = a.seed;

    let (tables, statements) = ctx.dataset(&a.data)?;
    let sets = search_all(&tables, &statements, &a.limits.limits(), a.jobs)?;
    let vocab = selection_vocab(&sets, 1);
    let (store, selector, history) = train_selector(&sets, &vocab, &config)?;

    fs::create_dir_all(&a.out)?;
    store.save(&a.out.join("selector"))?;
    vocab.save(&a.out.join("vocab.json"))?;
    let manifest = RankManifest {
        config,
        max_ops: a.limits.max_ops,
        max_candidates: a.limits.max_candidates,
    };
    write_json(&a.out.join("config.json"), &manifest)?;
    let lines: Vec<String> = history.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(a.out.join("metrics.jsonl"), lines.join("\n") + "\n")?;
    let accuracy = selection_accuracy(&store, &vocab, &selector, &sets);
    println!("{}", serde_json::json!({ "selection_accuracy": accuracy, "count": sets.len() }));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SelectedProgram {
    statement_id: String,
    program: String,
}

fn cmd_rank_eval(ctx: &Ctx, a: &RankEvalArgs) -> Result<()> {
    let manifest: RankManifest = read_json(&a.model.join("config.json"))?;
    let store = ParamStore::load(&a.model.join("selector"))?;
    let vocab = Vocab::load(&a.model.join("vocab.json"))?;
    let selector =
        Selector::attach(&store, manifest.config.gamma).ok_or_else(|| anyhow!("{}: not a selector", a.model.display()))?;
    log::debug!("rank-eval seed {}", a.seed);

    let (tables, statements) = ctx.dataset(&a.data)?;
    let sets = search_all(&tables, &statements, &a.limits.limits(), a.jobs)?;
    let picks: Vec<Option<usize>> = pool(a.jobs)?
        .install(|| sets.par_iter().map(|c| select_top(&store, &vocab, &selector, c).ok()).collect());
    let correct = sets
        .iter()
        .zip(&picks)
        .filter(|(c, p)| p.is_some_and(|i| c.programs[i].label == c.statement.label))
        .count();
    if let Some(path) = &a.export {
        let mut text = String::new();
        for (c, p) in sets.iter().zip(&picks) {
            if let Some(i) = p {
                let row = SelectedProgram {
                    statement_id: c.statement.id.clone(),
                    program: print_program(&c.programs[*i].program),
                };
                text.push_str(&serde_json::to_string(&row)?);
                text.push('\n');
            }
        }
        fs::write(path, text).with_context(|| path.display().to_string())?;
    }
    let accuracy = if sets.is_empty() { 0.0 } else { correct as f64 / sets.len() as f64 };
    println!("{}", serde_json::json!({ "selection_accuracy": accuracy, "count": sets.len() }));
    Ok(())
}

fn verify_examples(ctx: &Ctx, input: &VerifyDataArgs, seed: u64) -> Result<Vec<VerifyExample>> {
    if let Some(n) = input.synthetic {
        return Ok(synthetic_corpus(n, seed)
            .into_iter()
            .map(|e| VerifyExample {
                statement: e.statement,
                table: Arc::new(e.table),
                program: e.program,
            })
            .collect());
    }
    let Some(programs) = &input.programs else {
        bail!(UsageError("either --synthetic or --programs with --tables and --statements is required".into()));
    };
    let (tables, statements) = ctx.dataset(&input.data)?;
    let path = ctx.path(programs);
    let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    let mut chosen = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: SelectedProgram =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let program = parse_program(&row.program).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        chosen.insert(row.statement_id, program);
    }
    let tables: BTreeMap<String, Arc<Table>> = tables.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
    let mut out = Vec::new();
    for s in statements {
        match chosen.remove(&s.id) {
            Some(program) => out.push(VerifyExample {
                table: tables[&s.table_id].clone(),
                statement: s,
                program,
            }),
            None => log::warn!("no program for {}, skipping", s.id),
        }
    }
    Ok(out)
}

fn cmd_verify_train(ctx: &Ctx, a: &VerifyTrainArgs) -> Result<()> {
    let mut config: VerifierConfig = match &a.config {
        Some(p) => read_json(&ctx.path(p))?,
        None => VerifierConfig::default(),
    };
    config.no_graph |= a.no_graph_attention;
    config.gate_updated |= a.gate_updated;
    config.raw_case |= a.raw_case;
    config.freeze_steps = a.freeze_statement_table_steps.unwrap_or(config.freeze_steps);
    config.dim = a.dim.unwrap_or(config.dim);
    config.att_dim = a.heads_dim.unwrap_or(config.att_dim);
    config.layers = a.layers.unwrap_or(config.layers);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.lr = a.lr.unwrap_or(config.lr);
    config.batch = a.batch.unwrap_or(config.batch);
    config.patience = a.patience.or(config.patience);
    config.seed = a.seed;
    if !(0.0..1.0).contains(&a.val_fraction) {
        bail!(UsageError(format!("--val-fraction {} is outside [0, 1)", a.val_fraction)));
    }

    let data = prepare(&verify_examples(ctx, &a.input, a.seed)?, config.raw_case)?;
    let n_val = (data.len() as f64 * a.val_fraction).round() as usize;
    let (train, val) = data.split_at(data.len() - n_val);
    let trained = train_verifier(train, val, &config)?;

    fs::create_dir_all(&a.out)?;
    trained.store.save(&a.out.join("model"))?;
    trained.vocab.save(&a.out.join("vocab.json"))?;
    write_json(&a.out.join("config.json"), &config)?;
    write_metrics(&a.out, &trained.history)?;
    let last = trained.history.last();
    let summary = serde_json::json!({
        "train": train.len(),
        "val": val.len(),
        "best_epoch": trained.best_epoch,
        "train_accuracy": last.map(|m| m.train_accuracy),
        "val_accuracy": last.and_then(|m| m.val_accuracy),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_verify_eval(ctx: &Ctx, a: &VerifyEvalArgs) -> Result<()> {
    let config: VerifierConfig = read_json(&a.model.join("config.json"))?;
    let store = ParamStore::load(&a.model.join("model"))?;
    let vocab = Vocab::load(&a.model.join("vocab.json"))?;
    let verifier = Verifier::attach(&store).ok_or_else(|| anyhow!("{}: not a verifier", a.model.display()))?;
    let data: Vec<Prepared> = prepare(&verify_examples(ctx, &a.input, a.seed)?, config.raw_case)?;
    let options = config.options();
    let chunk = data.len().div_ceil(a.jobs.max(1)).max(1);
    let parts: Vec<EvalReport> = pool(a.jobs)?.install(|| {
        data.par_chunks(chunk)
            .map(|part| evaluate(part, &store, &vocab, &verifier, options))
            .collect::<Result<_, _>>()
    })?;
    let report = merge_reports(&parts);
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = &a.output {
        fs::write(path, text + "\n").with_context(|| path.display().to_string())?;
    }
    Ok(())
}

/// Combines reports over disjoint parts, weighting by count.
fn merge_reports(parts: &[EvalReport]) -> EvalReport {
    let mut out = EvalReport::default();
    let weighted = |acc: f64, n: usize, a: f64, m: usize| {
        if n + m == 0 {
            0.0
        } else {
            (acc * n as f64 + a * m as f64) / (n + m) as f64
        }
    };
    for p in parts {
        out.accuracy = weighted(out.accuracy, out.count, p.accuracy, p.count);
        out.count += p.count;
        for (tag, t) in &p.tags {
            let e = out.tags.entry(tag.clone()).or_default();
            e.accuracy = weighted(e.accuracy, e.count, t.accuracy, t.count);
            e.count += t.count;
        }
    }
    out
}

fn cmd_graph(ctx: &Ctx, a: &GraphArgs) -> Result<()> {
    let table = ctx.table(&a.table)?;
    let program = parse_program(&a.program)?;
    let v = verbalize_with(&program, &table, VerbalizeOptions { raw_case: a.raw_case })?;
    let g = GraphStructure::build(&program, &v)?;
    match a.format {
        GraphFormat::Json => {
            let mut doc = export_json(&g);
            doc["statement"] = serde_json::Value::String(a.statement.clone());
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        GraphFormat::Dot => print!("{}", export_dot(&g)),
    }
    Ok(())
}

fn render_report(r: &EvalReport) -> String {
    let mut out = String::from("| split | accuracy | count |\n|---|---:|---:|\n");
    out.push_str(&format!("| all | {:.4} | {} |\n", r.accuracy, r.count));
    for (tag, t) in &r.tags {
        out.push_str(&format!("| {tag} | {:.4} | {} |\n", t.accuracy, t.count));
    }
    out
}

fn cmd_report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let report: EvalReport = read_json(&ctx.path(&a.metrics))?;
    print!("{}", render_report(&report));
    Ok(())
}

/// Joins an error's causes, skipping any already quoted by its parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { data_root: cli.data_root };
    match &cli.command {
        Command::Exec(a) => cmd_exec(&ctx, a),
        Command::Verbalize(a) => cmd_verbalize(&ctx, a),
        Command::Search(a) => cmd_search(&ctx, a),
        Command::RankTrain(a) => cmd_rank_train(&ctx, a),
        Command::RankEval(a) => cmd_rank_eval(&ctx, a),
        Command::VerifyTrain(a) => cmd_verify_train(&ctx, a),
        Command::VerifyEval(a) => cmd_verify_eval(&ctx, a),
        Command::Graph(a) => cmd_graph(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand) {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
