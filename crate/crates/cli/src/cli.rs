//! Argument parsing and command dispatch for the `simpa` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use simpa_core::annotation::{
    generate_trs_candidates, judge_bundle, judge_trs, AlphaMetric, BundleAnnotation, MatchAnnotation, MATCH_SCHEME,
};
use simpa_core::config::Config;
use simpa_core::feedback::PromotionMode;
use simpa_core::project::{DetectRequest, Project};
use simpa_core::store::parse_complete_lines;
use simpa_core::taxonomy::{Key, TrsSet};
use simpa_core::tasks::{bundle_tasks, match_tasks, QueueParams};
use simpa_core::utilization::assessment_bundle;

use crate::metrics::{self, Source};

#[derive(Debug, Parser)]
#[command(name = "simpa", version, about = "Statement-to-item matching personality assessment")]
pub struct Cli {
    /// Project directory.
    #[arg(long, short = 'p', global = true, default_value = ".")]
    pub project: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auto,
    Annotated,
}

impl From<ModeArg> for PromotionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => PromotionMode::AutoThreshold,
            ModeArg::Annotated => PromotionMode::Annotated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Match,
    Bundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ordinal,
    Nominal,
}

impl From<MetricArg> for AlphaMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Ordinal => AlphaMetric::Ordinal,
            MetricArg::Nominal => AlphaMetric::Nominal,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project directory with the bundled inventory as set `ipip`.
    Init {
        #[arg(long, default_value = "simpa")]
        name: String,
    },
    /// Statement sets.
    #[command(subcommand)]
    Trs(TrsCommand),
    /// Comment corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Run detection over the corpus.
    Detect {
        #[arg(long)]
        trs_set: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        pass_index: u32,
    },
    /// List completed detection runs.
    Runs,
    /// Facet and domain scores of a run (also stored under scores/).
    Score {
        run: String,
        #[command(flatten)]
        output: Output,
    },
    /// Percentile ranks of a run on one domain.
    Percentiles {
        run: String,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        min_tis: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Export the 20 dense features of a run as CSV.
    Features {
        run: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statements a target would be judged on for one domain.
    Bundle {
        run: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        k_per_facet: Option<usize>,
    },
    /// Run the feedback loop.
    Loop {
        #[arg(long, value_enum, default_value = "auto")]
        mode: ModeArg,
        #[arg(long)]
        promote_threshold: Option<f64>,
        #[arg(long)]
        max_passes: Option<u32>,
        /// Promotable annotation categories (annotated mode).
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<u8>>,
        /// Start from this run instead of a fresh detection pass.
        #[arg(long)]
        from_run: Option<String>,
    },
    /// Show the state of the latest loop.
    LoopStatus,
    /// Review and apply promotion candidates by hand.
    #[command(subcommand)]
    Promotions(PromotionsCommand),
    /// Annotation tasks and records.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Agreement and quality metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Draft statements with the configured generative service.
    Generate {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        facet: String,
        /// 1 or -1.
        #[arg(long, allow_hyphen_values = true)]
        key: i64,
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Ask the generative service to judge statements or bundles.
    #[command(subcommand)]
    Judge(JudgeCommand),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Directory holding the console's static files.
        #[arg(long)]
        console_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrsCommand {
    /// Import a TRS file as a new set.
    Load {
        path: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    List,
    /// Item counts by provenance and facet.
    Stats { set: String },
    /// The set and its ancestors.
    Lineage { set: String },
    /// Print the set as TRS records.
    Show { set: String },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Validate and append a comment file.
    Ingest { path: PathBuf },
    /// First-person sentence availability.
    Availability {
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Subcommand)]
pub enum PromotionsCommand {
    List {
        run: String,
        #[arg(long, value_enum, default_value = "annotated")]
        mode: ModeArg,
    },
    /// Create a child set holding the approved candidates.
    Approve {
        run: String,
        #[arg(long, value_enum, default_value = "annotated")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Write open tasks for an annotator as JSON lines.
    ExportTasks {
        #[arg(long, value_enum, default_value = "match")]
        kind: TaskKind,
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        annotator: String,
        #[arg(long, default_value_t = usize::MAX)]
        limit: usize,
    },
    /// Append annotation records from a JSON-lines file.
    Import {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "match")]
        kind: TaskKind,
    },
    /// Record one match annotation.
    Match {
        #[arg(long)]
        run: String,
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        annotator: String,
        #[arg(long)]
        category: u8,
        #[arg(long)]
        corrected_facet: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        corrected_key: Option<i64>,
    },
    /// Record one bundle grade.
    Bundle {
        #[arg(long)]
        target: String,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        annotator: String,
        /// above_average, average, below_average or cannot_decide.
        #[arg(long)]
        label: String,
    },
    /// Print stored annotation records.
    Export {
        #[arg(long, value_enum, default_value = "match")]
        kind: TaskKind,
    },
    /// Print the seven-category match scheme.
    Scheme,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Krippendorff's alpha.
    Alpha {
        #[arg(long, value_enum, default_value = "match")]
        source: Source,
        /// Read an items × annotators CSV instead of the project store.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Pairwise percent agreement.
    Pairwise {
        #[arg(long, value_enum, default_value = "match")]
        source: Source,
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Share of correct matches among each statement's top candidates.
    Quality {
        run: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        distribution_k: usize,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Subcommand)]
pub enum JudgeCommand {
    /// Judge one statement of a set against its facet.
    Trs {
        #[arg(long)]
        set: String,
        #[arg(long)]
        id: String,
    },
    /// Grade a target's bundle; `--record-as` stores the grade.
    Bundle {
        #[arg(long)]
        run: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        record_as: Option<String>,
    },
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn emit(out: &mut dyn Write, output: &Output, json: &impl Serialize, csv: impl FnOnce() -> simpa_core::Result<String>) -> anyhow::Result<()> {
    let text = match output.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(json)?;
            s.push('\n');
            s
        }
        Format::Csv => csv()?,
    };
    match &output.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_lines<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> anyhow::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *out, r)?;
        writeln!(out)?;
    }
    Ok(())
}

fn key_from(v: i64) -> anyhow::Result<Key> {
    Key::from_sign(v).ok_or_else(|| anyhow::anyhow!("key must be 1 or -1, got {v}"))
}

fn open(path: &Path) -> anyhow::Result<Project> {
    Project::open(path).with_context(|| format!("opening project at {}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let root = cli.project;
    match cli.command {
        Command::Init { name } => {
            std::fs::create_dir_all(&root)?;
            let p = Project::init(&root, Config::new(name))?;
            emit_json(out, &p.list_sets()?)
        }
        Command::Trs(cmd) => {
            let p = open(&root)?;
            match cmd {
                TrsCommand::Load { path, name } => emit_json(out, &p.import_set(&path, name.as_deref())?),
                TrsCommand::List => emit_json(out, &p.list_sets()?),
                TrsCommand::Stats { set } => emit_json(out, &p.load_set(&set)?.stats(p.taxonomy())),
                TrsCommand::Lineage { set } => emit_json(out, &p.lineage(&set)?),
                TrsCommand::Show { set } => {
                    out.write_all(p.load_set(&set)?.to_jsonl().as_bytes())?;
                    Ok(())
                }
            }
        }
        Command::Corpus(cmd) => {
            let p = open(&root)?;
            match cmd {
                CorpusCommand::Ingest { path } => emit_json(out, &p.ingest(&path)?),
                CorpusCommand::Availability { output } => {
                    let stats = p.availability()?;
                    emit(out, &output, &stats, || stats.to_csv())
                }
            }
        }
        Command::Detect {
            trs_set,
            backend,
            threshold,
            pass_index,
        } => {
            let p = open(&root)?;
            let mut req: DetectRequest = p.default_detect_request(trs_set.as_deref())?;
            if let Some(b) = backend {
                req.backend = b;
            }
            if let Some(t) = threshold {
                req.threshold = t;
            }
            req.pass_index = pass_index;
            emit_json(out, &p.detect(&req)?.run)
        }
        Command::Runs => emit_json(out, &open(&root)?.runs()?),
        Command::Score { run, output } => {
            let p = open(&root)?;
            let sheets = p.score_run(&run)?;
            emit(out, &output, &sheets, || score_csv(&sheets))
        }
        Command::Percentiles {
            run,
            domain,
            min_tis,
            output,
        } => {
            let p = open(&root)?;
            let min_tis = min_tis.unwrap_or(p.config().utilization.min_tis);
            let table = p.percentiles(&run, &domain, min_tis)?;
            emit(out, &output, &table, || table.to_csv())
        }
        Command::Features { run, out: path } => {
            let p = open(&root)?;
            let csv = p.features(&run)?.to_csv()?;
            match path {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(())
        }
        Command::Bundle {
            run,
            target,
            domain,
            k_per_facet,
        } => {
            let p = open(&root)?;
            let k = k_per_facet.unwrap_or(p.config().utilization.k_per_facet);
            emit_json(out, &assessment_bundle(&target, &domain, &p.run_matches(&run)?, p.taxonomy(), k)?)
        }
        Command::Loop {
            mode,
            promote_threshold,
            max_passes,
            categories,
            from_run,
        } => {
            let p = open(&root)?;
            let mut policy = p.config().feedback_policy(mode.into());
            if let Some(t) = promote_threshold {
                policy.promote_threshold = t;
            }
            if let Some(n) = max_passes {
                policy.max_passes = n;
            }
            if let Some(c) = categories {
                policy.allowed_categories = c.into_iter().collect();
            }
            emit_json(out, &p.run_loop(&policy, from_run.as_deref())?)
        }
        Command::LoopStatus => emit_json(out, &open(&root)?.loop_status()?),
        Command::Promotions(cmd) => {
            let p = open(&root)?;
            match cmd {
                PromotionsCommand::List { run, mode } => emit_json(out, &p.promotion_candidates(&run, mode.into())?),
                PromotionsCommand::Approve { run, mode, ids } => {
                    let _lock = p.lock("promotions")?;
                    emit_json(out, &p.approve_promotions(&run, mode.into(), &ids)?)
                }
            }
        }
        Command::Annotate(cmd) => annotate(open(&root)?, cmd, out),
        Command::Metrics(cmd) => metrics_cmd(&root, cmd, out),
        Command::Generate { domain, facet, key, n } => {
            let p = open(&root)?;
            let svc = p.generation_service()?;
            let outcome = generate_trs_candidates(&svc, p.taxonomy(), &domain, &facet, key_from(key)?, n)?;
            if outcome.candidates.is_empty() && n > 0 {
                eprintln!("no statements parsed; raw reply: {:?}", outcome.raw.unwrap_or_default());
            }
            emit_lines(out, &outcome.candidates)
        }
        Command::Judge(cmd) => {
            let p = open(&root)?;
            let svc = p.generation_service()?;
            match cmd {
                JudgeCommand::Trs { set, id } => {
                    let set: TrsSet = p.load_set(&set)?;
                    let trs = set.get(&id).with_context(|| format!("no statement {id}"))?;
                    emit_json(out, &judge_trs(&svc, trs, &trs.facet, &trs.domain)?)
                }
                JudgeCommand::Bundle {
                    run,
                    target,
                    domain,
                    record_as,
                } => {
                    let k = p.config().utilization.k_per_facet;
                    let statements = assessment_bundle(&target, &domain, &p.run_matches(&run)?, p.taxonomy(), k)?;
                    let di = p.taxonomy().domain_index(&domain).context("unknown domain")?;
                    let name = p.taxonomy().domains()[di].name.clone();
                    let judgment = judge_bundle(&svc, &name, &statements)?;
                    if let (Some(who), Some(label)) = (record_as, judgment.label) {
                        p.add_bundle_annotation(&BundleAnnotation {
                            annotator_id: who,
                            target_id: target,
                            domain: name,
                            label,
                            created_at: p.now(),
                        })?;
                    }
                    emit_json(out, &judgment)
                }
            }
        }
        Command::Serve { bind, console_dir } => {
            let p = open(&root)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(p, &bind, console_dir))
        }
    }
}

fn score_csv(sheets: &[simpa_core::utilization::ScoreSheet]) -> simpa_core::Result<String> {
    let mut s = String::from("target_id,domain,positive,negative,tis_total,score,keyed_proportion\n");
    for sheet in sheets {
        for d in &sheet.domains {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                sheet.target_id,
                d.domain,
                d.positive,
                d.negative,
                d.tis_total,
                d.score,
                d.keyed_proportion.map(|p| p.to_string()).unwrap_or_default()
            ));
        }
    }
    Ok(s)
}

fn annotate(p: Project, cmd: AnnotateCommand, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        AnnotateCommand::ExportTasks {
            kind,
            run,
            annotator,
            limit,
        } => {
            let run = p.resolve_run(run.as_deref())?;
            let cfg = p.config().annotation.clone();
            let params = QueueParams {
                annotator: &annotator,
                per_item: cfg.annotators_per_item,
                limit,
                now: p.now(),
                leases: None,
            };
            match kind {
                TaskKind::Match => {
                    let set = p.load_set(&run.trs_set)?;
                    let page = match_tasks(
                        &run.run_id,
                        &p.run_best_matches(&run.run_id)?,
                        &set,
                        &p.annotation_index()?,
                        cfg.top_k,
                        &params,
                    );
                    emit_lines(out, &page.tasks)
                }
                TaskKind::Bundle => {
                    let page = bundle_tasks(
                        &p.run_matches(&run.run_id)?,
                        p.taxonomy(),
                        p.config().utilization.k_per_facet,
                        &p.bundle_annotations()?,
                        &params,
                    );
                    emit_lines(out, &page.tasks)
                }
            }
        }
        AnnotateCommand::Import { path, kind } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let source = path.display().to_string();
            let n = match kind {
                TaskKind::Match => {
                    let rows: Vec<MatchAnnotation> = parse_complete_lines(&text, &source)?;
                    for r in &rows {
                        p.add_match_annotation(r)?;
                    }
                    rows.len()
                }
                TaskKind::Bundle => {
                    let rows: Vec<BundleAnnotation> = parse_complete_lines(&text, &source)?;
                    for r in &rows {
                        p.add_bundle_annotation(r)?;
                    }
                    rows.len()
                }
            };
            emit_json(out, &serde_json::json!({ "imported": n }))
        }
        AnnotateCommand::Match {
            run,
            sentence,
            annotator,
            category,
            corrected_facet,
            corrected_key,
        } => {
            let a = MatchAnnotation {
                annotator_id: annotator,
                run_id: run,
                sentence_id: sentence,
                category,
                corrected_facet,
                corrected_key: corrected_key.map(key_from).transpose()?,
                created_at: p.now(),
            };
            p.add_match_annotation(&a)?;
            emit_json(out, &a)
        }
        AnnotateCommand::Bundle {
            target,
            domain,
            annotator,
            label,
        } => {
            let label = serde_json::from_value(serde_json::Value::String(label.clone()))
                .with_context(|| format!("unknown label {label:?}"))?;
            let a = BundleAnnotation {
                annotator_id: annotator,
                target_id: target,
                domain,
                label,
                created_at: p.now(),
            };
            emit_json(out, &p.add_bundle_annotation(&a)?)
        }
        AnnotateCommand::Export { kind } => match kind {
            TaskKind::Match => emit_lines(out, &p.match_annotations()?),
            TaskKind::Bundle => emit_lines(out, &p.bundle_annotations()?),
        },
        AnnotateCommand::Scheme => emit_json(out, &MATCH_SCHEME),
    }
}

fn matrix_for(root: &Path, source: Source, matrix: Option<PathBuf>) -> anyhow::Result<simpa_core::annotation::LabelMatrix> {
    match matrix {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(metrics::parse_matrix_csv(&text)?)
        }
        None => Ok(metrics::project_matrix(&open(root)?, source)?),
    }
}

fn metrics_cmd(root: &Path, cmd: MetricsCommand, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        MetricsCommand::Alpha { source, matrix, metric } => {
            let default = if matrix.is_some() { AlphaMetric::Ordinal } else { source.default_metric() };
            let m = matrix_for(root, source, matrix)?;
            emit_json(out, &metrics::alpha_report(&m, metric.map_or(default, Into::into)))
        }
        MetricsCommand::Pairwise { source, matrix, output } => {
            let m = matrix_for(root, source, matrix)?;
            let report = metrics::pairwise_report(&m);
            emit(out, &output, &report, || report.to_csv())
        }
        MetricsCommand::Quality {
            run,
            k,
            distribution_k,
            output,
        } => {
            let p = open(root)?;
            if k == 0 {
                bail!("k must be >= 1");
            }
            let report = metrics::quality_report(&p, &run, k, distribution_k)?;
            emit(out, &output, &report, || report.to_csv())
        }
    }
}
