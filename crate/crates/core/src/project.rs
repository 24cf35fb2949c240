//! A project directory and every operation that reads or writes it. The CLI
//! and the HTTP service both go through this type, so the same sequence of
//! operations leaves the same bytes on disk.
//!
//! ```text
//! simpa.toml                 configuration
//! .lock                      single-writer lock for detection and loops
//! trs/<set>.jsonl            statement sets (immutable once written)
//! trs/<set>.meta.json
//! corpus/comments.jsonl      ingested comments (append-only)
//! runs.jsonl                 completed detection runs (append-only)
//! runs/<run>/progress.json   checkpoint of a run in flight
//! runs/<run>/matches.jsonl   best matches at or above the threshold
//! runs/<run>/below.jsonl     best matches below the threshold
//! annotations/matches.jsonl  match annotations (append-only)
//! annotations/bundles.jsonl  bundle annotations (append-only)
//! scores/<run>.jsonl         score sheets
//! loops/status.json          state of the latest loop
//! loops/<loop>.json          loop reports
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationIndex, BundleAnnotation, MatchAnnotation};
use crate::config::Config;
use crate::corpus::{availability_report, extract_candidates, parse_comments, AvailabilityStats, Comment, FilterConfig, PronounMatcher, SentenceCandidate};
use crate::detection::{detect_chunked, check_threshold, DetectionOutput, DetectionRun, TisMatch};
use crate::error::{Error, Result};
use crate::feedback::{child_set_name, iterate, select_promotions, LoopReport, PassHost, PassRun, PromotionMode, PromotionOutcome, PromotionPolicy};
use crate::remote::{GenerationService, HttpTransport, Transport, UreqTransport};
use crate::similarity::{build_backend, build_backend_with, Embedder};
use crate::store::{append_line, append_lines, read_json, read_lines, write_atomic, write_json_atomic, LockGuard};
use crate::taxonomy::{expand, parse_trs_records, TraitTaxonomy, TrsSet};
use crate::utilization::{export_features, percentiles, score, FeatureMatrix, PercentileTable, ScoreSheet};

pub const CONFIG_FILE: &str = "simpa.toml";
/// Fixed clock (epoch seconds) for reproducible output.
pub const CLOCK_ENV: &str = "SIMPA_CLOCK";

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

/// Wall-clock seconds, or the value of `SIMPA_CLOCK` when set.
pub fn default_clock() -> Clock {
    if let Some(fixed) = std::env::var(CLOCK_ENV).ok().and_then(|v| v.trim().parse::<u64>().ok()) {
        return Arc::new(move || fixed);
    }
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub items: usize,
    pub active: usize,
    pub max_generation: u32,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub run: DetectionRun,
    pub state: RunState,
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub trs_set: String,
    pub backend: String,
    pub threshold: f64,
    #[serde(default)]
    pub pass_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopState {
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopStatus {
    pub state: LoopState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<LoopReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub total: usize,
}

/// A loop that has been recorded as running and holds the project lock.
pub struct LoopTicket {
    _lock: LockGuard,
    pub loop_id: String,
    pub started_at: u64,
}

impl LoopTicket {
    pub fn status(&self) -> LoopStatus {
        LoopStatus {
            state: LoopState::Running,
            loop_id: Some(self.loop_id.clone()),
            started_at: Some(self.started_at),
            finished_at: None,
            error: None,
            report: None,
        }
    }
}

pub struct Project {
    root: PathBuf,
    config: Config,
    taxonomy: TraitTaxonomy,
    clock: Clock,
    transport: Option<Arc<dyn HttpTransport>>,
}

fn valid_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid name {name:?}")))
    }
}

impl Project {
    /// Creates a project directory and registers the bundled inventory as
    /// the set `ipip`.
    pub fn init(root: &Path, config: Config) -> Result<Project> {
        config.validate()?;
        let cfg_path = root.join(CONFIG_FILE);
        if cfg_path.exists() {
            return Err(Error::InvalidArgument(format!("{} already exists", cfg_path.display())));
        }
        for dir in ["trs", "corpus", "runs", "annotations", "scores", "loops"] {
            fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
        }
        write_atomic(&cfg_path, config.to_toml()?.as_bytes())?;
        let project = Project::open(root)?;
        let mut ipip = TrsSet::ipip_neo();
        ipip.name = "ipip".into();
        project.save_set(&ipip)?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Project> {
        let config = Config::load(&root.join(CONFIG_FILE))?;
        let taxonomy = match config.project.taxonomy.as_str() {
            "big_five" => TraitTaxonomy::big_five(),
            path => TraitTaxonomy::from_json_file(&resolve(root, path))?,
        };
        Ok(Project {
            root: root.to_path_buf(),
            config,
            taxonomy,
            clock: default_clock(),
            transport: None,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Routes remote backends through `transport` instead of real HTTP.
    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn taxonomy(&self) -> &TraitTaxonomy {
        &self.taxonomy
    }

    pub fn now(&self) -> u64 {
        (self.clock)()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn lock_path(&self) -> PathBuf {
        self.path(".lock")
    }

    pub fn lock(&self, holder: &str) -> Result<LockGuard> {
        LockGuard::acquire(&self.lock_path(), holder)
    }

    pub fn is_locked(&self) -> bool {
        LockGuard::is_locked(&self.lock_path())
    }

    // statement sets

    fn set_path(&self, name: &str) -> PathBuf {
        self.path("trs").join(format!("{name}.jsonl"))
    }

    fn set_meta_path(&self, name: &str) -> PathBuf {
        self.path("trs").join(format!("{name}.meta.json"))
    }

    /// Stores a set. Sets are immutable: saving a different set under an
    /// existing name fails, saving the identical set again is a no-op.
    pub fn save_set(&self, set: &TrsSet) -> Result<SetMeta> {
        valid_name(&set.name)?;
        let body = set.to_jsonl();
        let path = self.set_path(&set.name);
        if path.exists() {
            let existing = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if existing == body {
                return read_json(&self.set_meta_path(&set.name));
            }
            return Err(Error::InvalidArgument(format!("set {} already exists", set.name)));
        }
        if let Some(parent) = &set.parent {
            if !self.set_path(parent).exists() {
                return Err(Error::NotFound(format!("parent set {parent}")));
            }
        }
        let meta = SetMeta {
            name: set.name.clone(),
            parent: set.parent.clone(),
            items: set.len(),
            active: set.active().count(),
            max_generation: set.max_generation(),
            created_at: self.now(),
        };
        write_atomic(&path, body.as_bytes())?;
        write_json_atomic(&self.set_meta_path(&set.name), &meta)?;
        Ok(meta)
    }

    pub fn load_set(&self, name: &str) -> Result<TrsSet> {
        valid_name(name)?;
        let path = self.set_path(name);
        let meta: SetMeta = read_json(&self.set_meta_path(name)).map_err(|_| Error::NotFound(format!("set {name}")))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let items = parse_trs_records(&text, &path.display().to_string())?;
        TrsSet::new(name, meta.parent, items, &self.taxonomy)
    }

    pub fn list_sets(&self) -> Result<Vec<SetMeta>> {
        let dir = self.path("trs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".meta.json") {
                out.push(read_json::<SetMeta>(&self.set_meta_path(stem))?);
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    /// Loads a TRS file into the project under `name` (default: file stem).
    pub fn import_set(&self, path: &Path, name: Option<&str>) -> Result<SetMeta> {
        let mut set = crate::taxonomy::load_inventory(path, &self.taxonomy)?;
        if let Some(n) = name {
            set.name = n.to_string();
        }
        self.save_set(&set)
    }

    /// The set followed by its ancestors.
    pub fn lineage(&self, name: &str) -> Result<Vec<SetMeta>> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut next = Some(name.to_string());
        while let Some(n) = next {
            if !seen.insert(n.clone()) {
                return Err(Error::InvalidArgument(format!("lineage cycle at {n}")));
            }
            let meta: SetMeta = read_json(&self.set_meta_path(&n)).map_err(|_| Error::NotFound(format!("set {n}")))?;
            next = meta.parent.clone();
            out.push(meta);
        }
        Ok(out)
    }

    fn free_set_name(&self, base: &str) -> String {
        if !self.set_path(base).exists() {
            return base.to_string();
        }
        (2..).map(|i| format!("{base}-{i}")).find(|n| !self.set_path(n).exists()).expect("unbounded")
    }

    // corpus

    fn comments_path(&self) -> PathBuf {
        self.path("corpus").join("comments.jsonl")
    }

    pub fn comments(&self) -> Result<Vec<Comment>> {
        read_lines(&self.comments_path())
    }

    /// Validates a comment file and appends it to the corpus. Comment ids
    /// already present are rejected.
    pub fn ingest(&self, path: &Path) -> Result<IngestReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.ingest_text(&text, &path.display().to_string())
    }

    pub fn ingest_text(&self, text: &str, source: &str) -> Result<IngestReport> {
        let incoming = parse_comments(text, source)?;
        let existing = self.comments()?;
        let ids: HashSet<&str> = existing.iter().map(|c| c.comment_id.as_str()).collect();
        if let Some(dup) = incoming.iter().find(|c| ids.contains(c.comment_id.as_str())) {
            return Err(Error::InvalidComment {
                target_id: dup.target_id.clone(),
                comment_id: dup.comment_id.clone(),
                message: "comment id already ingested".into(),
            });
        }
        append_lines(&self.comments_path(), &incoming)?;
        Ok(IngestReport {
            added: incoming.len(),
            total: existing.len() + incoming.len(),
        })
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            min_tokens: self.config.detection.min_tokens,
            matcher: PronounMatcher {
                case_insensitive: self.config.detection.case_insensitive,
                contractions: true,
            },
        }
    }

    pub fn candidates(&self) -> Result<Vec<SentenceCandidate>> {
        extract_candidates(&self.comments()?, &self.filter_config())
    }

    pub fn availability(&self) -> Result<AvailabilityStats> {
        Ok(availability_report(&self.comments()?, &self.filter_config().matcher))
    }

    // detection

    pub fn embedder(&self, backend_id: &str) -> Result<Arc<dyn Embedder>> {
        let desc = self.config.backend(backend_id)?;
        match &self.transport {
            Some(t) => build_backend_with(desc, &self.root, t.clone()),
            None => build_backend(desc, &self.root),
        }
    }

    /// Client for the `[generation]` service, sharing the injected transport.
    pub fn generation_service(&self) -> Result<GenerationService> {
        let cfg = self
            .config
            .generation
            .clone()
            .ok_or_else(|| Error::Config("no [generation] section".into()))?;
        let t: Arc<dyn HttpTransport> = match &self.transport {
            Some(t) => t.clone(),
            None => Arc::new(UreqTransport::default()),
        };
        Ok(GenerationService::new(cfg, Transport::new(t)))
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.path("runs").join(run_id)
    }

    pub fn runs(&self) -> Result<Vec<DetectionRun>> {
        read_lines(&self.path("runs.jsonl"))
    }

    pub fn run(&self, run_id: &str) -> Result<DetectionRun> {
        self.runs()?
            .into_iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| Error::NotFound(format!("run {run_id}")))
    }

    pub fn latest_run(&self) -> Result<Option<DetectionRun>> {
        Ok(self.runs()?.pop())
    }

    /// `run_id`, or the latest completed run when `None`.
    pub fn resolve_run(&self, run_id: Option<&str>) -> Result<DetectionRun> {
        match run_id {
            Some(id) => self.run(id),
            None => self.latest_run()?.ok_or_else(|| Error::NotFound("no completed detection run".into())),
        }
    }

    /// Stored results of a completed run.
    pub fn run_output(&self, run_id: &str) -> Result<DetectionOutput> {
        self.run(run_id)?;
        self.read_output(run_id)
    }

    fn read_output(&self, run_id: &str) -> Result<DetectionOutput> {
        let dir = self.run_dir(run_id);
        Ok(DetectionOutput {
            matches: read_lines(&dir.join("matches.jsonl"))?,
            below: read_lines(&dir.join("below.jsonl"))?,
        })
    }

    pub fn run_matches(&self, run_id: &str) -> Result<Vec<TisMatch>> {
        self.run(run_id)?;
        read_lines(&self.run_dir(run_id).join("matches.jsonl"))
    }

    /// Best matches of a run, near misses included.
    pub fn run_best_matches(&self, run_id: &str) -> Result<Vec<TisMatch>> {
        let out = self.run_output(run_id)?;
        Ok(out.matches.into_iter().chain(out.below).collect())
    }

    pub fn pass_run(&self, run_id: &str) -> Result<PassRun> {
        Ok(PassRun {
            run: self.run(run_id)?,
            output: self.run_output(run_id)?,
        })
    }

    fn unfinished_run(&self, req: &DetectRequest) -> Result<Option<RunProgress>> {
        let dir = self.path("runs");
        let mut found = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path().join("progress.json");
            if p.exists() {
                let prog: RunProgress = read_json(&p)?;
                if prog.state == RunState::Running
                    && prog.run.trs_set == req.trs_set
                    && prog.run.backend_id == req.backend
                    && prog.run.threshold.to_bits() == req.threshold.to_bits()
                    && prog.run.pass_index == req.pass_index
                {
                    found.push(prog);
                }
            }
        }
        found.sort_by(|a, b| a.run.run_id.cmp(&b.run.run_id));
        Ok(found.pop())
    }

    fn next_run_id(&self) -> Result<String> {
        let dir = self.path("runs");
        let n = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.count();
        Ok(format!("run-{:04}", n + 1))
    }

    /// Runs detection under the project lock.
    pub fn detect(&self, req: &DetectRequest) -> Result<PassRun> {
        let _lock = self.lock("detect")?;
        self.detect_locked(req)
    }

    /// Runs detection, resuming an interrupted run with the same parameters.
    /// The caller must hold the project lock.
    pub fn detect_locked(&self, req: &DetectRequest) -> Result<PassRun> {
        check_threshold(req.threshold)?;
        let set = self.load_set(&req.trs_set)?;
        let embedder = self.embedder(&req.backend)?;
        let candidates = self.candidates()?;
        let (mut progress, resumed) = match self.unfinished_run(req)? {
            Some(p) => (p, true),
            None => {
                let run = DetectionRun {
                    run_id: self.next_run_id()?,
                    trs_set: req.trs_set.clone(),
                    backend_id: req.backend.clone(),
                    threshold: req.threshold,
                    pass_index: req.pass_index,
                    created_at: self.now(),
                    match_count: 0,
                };
                (
                    RunProgress {
                        run,
                        state: RunState::Running,
                        completed: 0,
                        total: candidates.len(),
                    },
                    false,
                )
            }
        };
        let dir = self.run_dir(&progress.run.run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let progress_path = dir.join("progress.json");
        let matches_path = dir.join("matches.jsonl");
        let below_path = dir.join("below.jsonl");
        if resumed {
            if progress.total != candidates.len() {
                return Err(Error::InvalidArgument(format!(
                    "corpus changed since {} started; remove runs/{} to start over",
                    progress.run.run_id, progress.run.run_id
                )));
            }
            // drop rows written after the last checkpoint
            let done: HashSet<&str> = candidates[..progress.completed].iter().map(|c| c.sentence_id.as_str()).collect();
            for p in [&matches_path, &below_path] {
                let rows: Vec<TisMatch> = read_lines(p)?;
                let kept: Vec<&TisMatch> = rows.iter().filter(|m| done.contains(m.sentence_id.as_str())).collect();
                let mut buf = Vec::new();
                for m in kept {
                    serde_json::to_writer(&mut buf, m)?;
                    buf.push(b'\n');
                }
                write_atomic(p, &buf)?;
            }
            log::info!("resuming {} at {}/{}", progress.run.run_id, progress.completed, progress.total);
        } else {
            write_atomic(&matches_path, b"")?;
            write_atomic(&below_path, b"")?;
        }
        write_json_atomic(&progress_path, &progress)?;
        let start = progress.completed;
        let chunk = self.config.detection.chunk_size;
        let result = detect_chunked(
            &candidates[start..],
            &set,
            embedder.as_ref(),
            req.threshold,
            req.pass_index,
            chunk,
            |done, part| {
                append_lines(&matches_path, &part.matches)?;
                append_lines(&below_path, &part.below)?;
                progress.completed = start + done;
                write_json_atomic(&progress_path, &progress)
            },
        );
        if let Err(e) = result {
            return Err(match e {
                Error::PartialDetection { completed, source, .. } => Error::PartialDetection {
                    completed: start + completed,
                    total: candidates.len(),
                    source,
                },
                other => other,
            });
        }
        let output = self.read_output(&progress.run.run_id)?;
        progress.run.match_count = output.matches.len();
        progress.state = RunState::Done;
        progress.completed = candidates.len();
        write_json_atomic(&dir.join("run.json"), &progress.run)?;
        write_json_atomic(&progress_path, &progress)?;
        append_line(&self.path("runs.jsonl"), &progress.run)?;
        Ok(PassRun {
            run: progress.run,
            output,
        })
    }

    /// Detection with the configured defaults.
    pub fn default_detect_request(&self, trs_set: Option<&str>) -> Result<DetectRequest> {
        let set = match trs_set {
            Some(s) => s.to_string(),
            None => self
                .config
                .project
                .default_trs_set
                .clone()
                .ok_or_else(|| Error::Config("no trs set given and project.default_trs_set unset".into()))?,
        };
        Ok(DetectRequest {
            trs_set: set,
            backend: self.config.detection.backend.clone(),
            threshold: self.config.detection.threshold,
            pass_index: 0,
        })
    }

    // utilization

    /// Score sheets of a run, also written to `scores/<run>.jsonl`.
    pub fn score_run(&self, run_id: &str) -> Result<Vec<ScoreSheet>> {
        let sheets = score(&self.run_matches(run_id)?, &self.taxonomy)?;
        let mut buf = Vec::new();
        for s in &sheets {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        let dir = self.path("scores");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join(format!("{run_id}.jsonl")), &buf)?;
        Ok(sheets)
    }

    pub fn sheets(&self, run_id: &str) -> Result<Vec<ScoreSheet>> {
        score(&self.run_matches(run_id)?, &self.taxonomy)
    }

    pub fn percentiles(&self, run_id: &str, domain: &str, min_tis: u64) -> Result<PercentileTable> {
        percentiles(&self.sheets(run_id)?, &self.taxonomy, domain, min_tis)
    }

    pub fn features(&self, run_id: &str) -> Result<FeatureMatrix> {
        export_features(&self.sheets(run_id)?)
    }

    // annotations

    fn match_annotations_path(&self) -> PathBuf {
        self.path("annotations").join("matches.jsonl")
    }

    fn bundle_annotations_path(&self) -> PathBuf {
        self.path("annotations").join("bundles.jsonl")
    }

    pub fn match_annotations(&self) -> Result<Vec<MatchAnnotation>> {
        read_lines(&self.match_annotations_path())
    }

    pub fn bundle_annotations(&self) -> Result<Vec<BundleAnnotation>> {
        read_lines(&self.bundle_annotations_path())
    }

    pub fn annotation_index(&self) -> Result<AnnotationIndex> {
        Ok(AnnotationIndex::new(&self.match_annotations()?))
    }

    /// Validates an annotation against its run and appends it.
    pub fn add_match_annotation(&self, a: &MatchAnnotation) -> Result<()> {
        a.validate()?;
        self.run(&a.run_id)?;
        let best = self.run_best_matches(&a.run_id)?;
        let m = best
            .iter()
            .find(|m| m.sentence_id == a.sentence_id)
            .ok_or_else(|| Error::NotFound(format!("sentence {} in run {}", a.sentence_id, a.run_id)))?;
        if let Some(f) = &a.corrected_facet {
            if self.taxonomy.facet_id(&m.domain, f).is_none() {
                return Err(Error::InvalidAnnotation(format!("facet {f:?} is not in domain {}", m.domain)));
            }
        }
        append_line(&self.match_annotations_path(), a)
    }

    /// Appends a bundle grade with the domain in canonical form and returns
    /// the stored record.
    pub fn add_bundle_annotation(&self, a: &BundleAnnotation) -> Result<BundleAnnotation> {
        a.validate()?;
        let di = self
            .taxonomy
            .domain_index(&a.domain)
            .ok_or_else(|| Error::InvalidAnnotation(format!("unknown domain {:?}", a.domain)))?;
        let mut a = a.clone();
        a.domain = self.taxonomy.domains()[di].name.clone();
        append_line(&self.bundle_annotations_path(), &a)?;
        Ok(a)
    }

    // promotions and the loop

    fn policy(&self, mode: PromotionMode) -> PromotionPolicy {
        self.config.feedback_policy(mode)
    }

    /// Promotions the policy would select from a run.
    pub fn promotion_candidates(&self, run_id: &str, mode: PromotionMode) -> Result<PromotionOutcome> {
        let pass = self.pass_run(run_id)?;
        let set = self.load_set(&pass.run.trs_set)?;
        let policy = self.policy(mode);
        policy.validate(pass.run.threshold)?;
        let index = self.annotation_index()?;
        select_promotions(&pass.run, &pass.output, &set, &self.taxonomy, &policy, Some(&index))
    }

    /// Expands the run's set with the approved candidates and saves the
    /// child set.
    pub fn approve_promotions(&self, run_id: &str, mode: PromotionMode, approved: &[String]) -> Result<SetMeta> {
        let run = self.run(run_id)?;
        let parent = self.load_set(&run.trs_set)?;
        let outcome = self.promotion_candidates(run_id, mode)?;
        let known: HashSet<&str> = outcome.promoted.iter().map(|t| t.id.as_str()).collect();
        if let Some(bad) = approved.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::NotFound(format!("promotion candidate {bad}")));
        }
        let chosen: Vec<_> = outcome
            .promoted
            .into_iter()
            .filter(|t| approved.iter().any(|a| *a == t.id))
            .collect();
        let name = self.free_set_name(&child_set_name(&parent.name, run.pass_index + 1));
        let child = expand(&parent, chosen, name, &self.taxonomy)?;
        self.save_set(&child)
    }

    fn loop_status_path(&self) -> PathBuf {
        self.path("loops").join("status.json")
    }

    pub fn loop_status(&self) -> Result<LoopStatus> {
        let p = self.loop_status_path();
        if !p.exists() {
            return Ok(LoopStatus {
                state: LoopState::Idle,
                loop_id: None,
                started_at: None,
                finished_at: None,
                error: None,
                report: None,
            });
        }
        read_json(&p)
    }

    pub fn loop_report(&self, loop_id: &str) -> Result<LoopReport> {
        valid_name(loop_id)?;
        read_json(&self.path("loops").join(format!("{loop_id}.json")))
    }

    fn next_loop_id(&self) -> Result<String> {
        let dir = self.path("loops");
        let n = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("loop-"))
            .count();
        Ok(format!("loop-{:04}", n + 1))
    }

    /// Runs the feedback loop under the project lock, starting from
    /// `start_run` or, when `None`, from a fresh pass-0 detection with the
    /// configured defaults.
    pub fn run_loop(&self, policy: &PromotionPolicy, start_run: Option<&str>) -> Result<LoopReport> {
        let ticket = self.begin_loop(self.lock("loop")?)?;
        self.execute_loop(ticket, policy, start_run)
    }

    /// Records a running loop under a lock the caller already holds. The HTTP
    /// service does this before answering, then runs the loop in the
    /// background with [`Project::execute_loop`].
    pub fn begin_loop(&self, lock: LockGuard) -> Result<LoopTicket> {
        let ticket = LoopTicket {
            _lock: lock,
            loop_id: self.next_loop_id()?,
            started_at: self.now(),
        };
        write_json_atomic(&self.loop_status_path(), &ticket.status())?;
        Ok(ticket)
    }

    pub fn execute_loop(&self, ticket: LoopTicket, policy: &PromotionPolicy, start_run: Option<&str>) -> Result<LoopReport> {
        let result = self.loop_body(policy, start_run);
        let mut status = ticket.status();
        status.finished_at = Some(self.now());
        match &result {
            Ok(report) => {
                write_json_atomic(&self.path("loops").join(format!("{}.json", ticket.loop_id)), report)?;
                status.state = LoopState::Done;
                status.report = Some(report.clone());
            }
            Err(e) => {
                status.state = LoopState::Failed;
                status.error = Some(e.to_string());
            }
        }
        write_json_atomic(&self.loop_status_path(), &status)?;
        result
    }

    fn loop_body(&self, policy: &PromotionPolicy, start_run: Option<&str>) -> Result<LoopReport> {
        let initial = match start_run {
            Some(id) => self.pass_run(id)?,
            None => self.detect_locked(&self.default_detect_request(None)?)?,
        };
        let set = self.load_set(&initial.run.trs_set)?;
        let mut host = ProjectHost {
            project: self,
            backend: initial.run.backend_id.clone(),
            threshold: initial.run.threshold,
        };
        iterate(&mut host, set, initial, &self.taxonomy, policy)
    }
}

/// Loop host writing every pass into the project.
struct ProjectHost<'a> {
    project: &'a Project,
    backend: String,
    threshold: f64,
}

impl PassHost for ProjectHost<'_> {
    fn save_set(&mut self, set: &TrsSet) -> Result<()> {
        self.project.save_set(set).map(|_| ())
    }

    fn detect(&mut self, set: &TrsSet, pass_index: u32) -> Result<PassRun> {
        self.project.detect_locked(&DetectRequest {
            trs_set: set.name.clone(),
            backend: self.backend.clone(),
            threshold: self.threshold,
            pass_index,
        })
    }

    fn annotations(&self) -> Result<Option<AnnotationIndex>> {
        self.project.annotation_index().map(Some)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> Clock {
        Arc::new(|| 1_700_000_000)
    }

    fn project(dir: &Path) -> Project {
        Project::init(dir, Config::new("t")).unwrap().with_clock(fixed())
    }

    const CORPUS: &str = concat!(
        r#"{"target_id":"a","comment_id":"c1","body":"I love large parties. The weather is bad."}"#,
        "\n",
        r#"{"target_id":"b","comment_id":"c2","body":"I prefer to be alone. I really prefer to be alone at home."}"#,
        "\n"
    );

    #[test]
    fn init_and_sets() {
        let dir = tempfile::tempdir().unwrap();
        let p = project(dir.path());
        let sets = p.list_sets().unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].items, 300);
        assert!(Project::init(dir.path(), Config::new("t")).is_err());
        let ipip = p.load_set("ipip").unwrap();
        p.save_set(&ipip).unwrap();
        let mut other = ipip.clone();
        other = crate::taxonomy::deactivate(&other, &["N1-01"], "ipip").unwrap();
        assert!(p.save_set(&other).is_err());
        assert!(p.load_set("../x").is_err());
    }

    #[test]
    fn ingest_detect_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = project(dir.path());
        assert_eq!(p.ingest_text(CORPUS, "mem").unwrap().added, 2);
        assert!(p.ingest_text(CORPUS, "mem").is_err());
        let req = p.default_detect_request(None).unwrap();
        let pass = p.detect(&req).unwrap();
        assert_eq!(pass.run.run_id, "run-0001");
        assert_eq!(pass.run.created_at, 1_700_000_000);
        assert_eq!(pass.output.matches.len() + pass.output.below.len(), 3);
        assert_eq!(p.runs().unwrap().len(), 1);
        assert_eq!(p.run_output("run-0001").unwrap(), pass.output);
        let sheets = p.score_run("run-0001").unwrap();
        assert!(!sheets.is_empty());
        assert!(dir.path().join("scores/run-0001.jsonl").exists());
        assert!(!p.is_locked());
    }

    #[test]
    fn annotation_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = project(dir.path());
        p.ingest_text(CORPUS, "mem").unwrap();
        let pass = p.detect(&p.default_detect_request(None).unwrap()).unwrap();
        let m = &pass.output.matches[0];
        let mut a = MatchAnnotation {
            annotator_id: "x".into(),
            run_id: pass.run.run_id.clone(),
            sentence_id: m.sentence_id.clone(),
            category: 1,
            corrected_facet: None,
            corrected_key: None,
            created_at: p.now(),
        };
        p.add_match_annotation(&a).unwrap();
        a.sentence_id = "nope:0".into();
        assert!(matches!(p.add_match_annotation(&a), Err(Error::NotFound(_))));
        a.sentence_id = m.sentence_id.clone();
        a.category = 6;
        a.corrected_facet = Some("Orderliness".into());
        assert!(p.add_match_annotation(&a).is_err());
        assert_eq!(p.match_annotations().unwrap().len(), 1);
    }

    #[test]
    fn loop_runs_and_records_status() {
        let dir = tempfile::tempdir().unwrap();
        let p = project(dir.path());
        p.ingest_text(CORPUS, "mem").unwrap();
        let policy = p.config().feedback_policy(PromotionMode::AutoThreshold);
        let report = p.run_loop(&policy, None).unwrap();
        assert!(!report.passes.is_empty());
        let status = p.loop_status().unwrap();
        assert_eq!(status.state, LoopState::Done);
        assert_eq!(status.report.as_ref(), Some(&report));
        let _g = p.lock("test").unwrap();
        assert!(matches!(p.run_loop(&policy, None), Err(Error::Locked(_))));
    }
}
