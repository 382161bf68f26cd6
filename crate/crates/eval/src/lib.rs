//! Automatic evaluation over stored transcripts.
//!
//! [`run_ablation`] replays every user turn of a set of human-counselor
//! transcripts through the engine once per mode. The model always sees the
//! real dialogue so far (teacher forcing); its reply is scored against the
//! counselor's actual reply at the same turn.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use psyprobe_core::domain::{DialogueTurn, SessionMode, Speaker};
use psyprobe_core::engine::{Engine, Stage, TurnInput};
use psyprobe_core::gateway::{Backend, Gateway, GatewayConfig, PromptTemplates};
use psyprobe_core::metrics::{question_rate, score_pair, PairScores, Smoothing, Tokenizer};
use psyprobe_core::session::{read_transcript, BackendFactory, TranscriptError, TurnEntry};
use serde::{Deserialize, Serialize};

/// How generated replies are paired with references. Recorded in every
/// report so the numbers are never read without it.
pub const ALIGNMENT_NOTE: &str =
    "references matched by user-turn position; user turns without a following counselor reply are skipped";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no transcripts (*.jsonl) in {0}")]
    EmptyTranscript(PathBuf),
    #[error("{0}: no counselor reference turns")]
    MissingReferences(PathBuf),
    #[error("{path}: {source}")]
    Transcript {
        path: PathBuf,
        #[source]
        source: TranscriptError,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend unavailable: {0}")]
    Backend(String),
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
}

/// Averaged scores for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: SessionMode,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// Share of generated replies that ask a question; 0 when nothing was
    /// generated.
    pub question_rate: f64,
    pub pairs: usize,
}

impl ModeRow {
    fn new(mode: SessionMode, scores: &[PairScores], replies: &[String]) -> Self {
        let m = PairScores::mean(scores);
        Self {
            mode,
            r1: m.r1,
            r2: m.r2,
            rl: m.rl,
            b1: m.b1,
            b2: m.b2,
            b3: m.b3,
            b4: m.b4,
            question_rate: question_rate(replies).unwrap_or(0.0),
            pairs: scores.len(),
        }
    }

    pub fn metrics(&self) -> [f64; 8] {
        [
            self.r1,
            self.r2,
            self.rl,
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.question_rate,
        ]
    }
}

/// A turn the backend could not complete. It is left out of the averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnFailure {
    pub transcript: String,
    pub mode: SessionMode,
    pub turn_index: u32,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tokenizer: Tokenizer,
    pub smoothing: Smoothing,
    pub alignment: String,
    pub transcripts: Vec<String>,
    pub rows: Vec<ModeRow>,
    /// User turns with no counselor reply after them.
    pub skipped_turns: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<TurnFailure>,
}

const HEADERS: [&str; 8] = ["R-1", "R-2", "R-L", "B-1", "B-2", "B-3", "B-4", "QR"];

impl MetricReport {
    /// Aligned text table, one row per mode.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "mode");
        for h in HEADERS {
            let _ = write!(out, " {h:>7}");
        }
        out.push_str("   pairs\n");
        for row in &self.rows {
            let _ = write!(out, "{:<10}", row.mode.to_string());
            for v in row.metrics() {
                let _ = write!(out, " {v:>7.4}");
            }
            let _ = writeln!(out, " {:>7}", row.pairs);
        }
        if self.skipped_turns > 0 {
            let _ = writeln!(
                out,
                "skipped user turns without a reference: {}",
                self.skipped_turns
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "failed turns: {}", self.failures.len());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub tokenizer: Tokenizer,
    pub smoothing: Smoothing,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            tokenizer: Tokenizer::Whitespace,
            smoothing: Smoothing::None,
        }
    }
}

/// What the ablation needs to build one gateway per transcript and mode.
#[derive(Clone)]
pub struct AblationBackend {
    pub engine: Engine,
    pub templates: Arc<PromptTemplates>,
    pub factory: BackendFactory,
    pub gateway: GatewayConfig,
}

impl AblationBackend {
    pub fn mock() -> Self {
        Self {
            engine: Engine::default(),
            templates: Arc::new(PromptTemplates::builtin()),
            factory: psyprobe_core::session::mock_backend_factory(),
            gateway: GatewayConfig::mock(),
        }
    }
}

/// One loaded reference transcript.
#[derive(Debug, Clone)]
pub struct Reference {
    pub name: String,
    pub entries: Vec<TurnEntry>,
}

/// Loads every `*.jsonl` file in `dir`, sorted by file name.
pub fn load_references(dir: &Path) -> Result<Vec<Reference>, EvalError> {
    let read = std::fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::EmptyTranscript(dir.to_path_buf()));
    }
    paths
        .into_iter()
        .map(|path| {
            let entries = read_transcript(&path).map_err(|source| EvalError::Transcript {
                path: path.clone(),
                source,
            })?;
            if !entries.iter().any(|e| e.speaker == Speaker::Agent) {
                return Err(EvalError::MissingReferences(path));
            }
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok(Reference { name, entries })
        })
        .collect()
}

/// Result of regenerating one transcript under one mode.
#[derive(Debug, Clone, Default)]
struct ModeRun {
    scores: Vec<PairScores>,
    replies: Vec<String>,
    failures: Vec<TurnFailure>,
}

/// Session facts the engine needs, from the transcript's first line when
/// present.
fn session_facts(entries: &[TurnEntry]) -> (String, String, String) {
    if let Some(meta) = entries.iter().find_map(|e| e.meta.as_ref()) {
        return (
            meta.concern.clone(),
            meta.emotion.clone(),
            meta.language.clone(),
        );
    }
    let language = if entries.iter().any(|e| e.text.chars().any(is_hangul)) {
        "ko"
    } else {
        "en"
    };
    (String::new(), String::new(), language.to_string())
}

fn is_hangul(c: char) -> bool {
    ('\u{AC00}'..='\u{D7A3}').contains(&c)
}

fn run_mode(
    reference: &Reference,
    mode: SessionMode,
    backend: &AblationBackend,
    client: &Arc<dyn Backend>,
    options: ScoreOptions,
) -> ModeRun {
    let gateway = Gateway::new(
        client.clone(),
        backend.templates.clone(),
        backend.gateway.clone(),
    );
    let (concern, emotion, language) = session_facts(&reference.entries);
    let entries = &reference.entries;
    let mut memory = backend.engine.new_memory();
    let mut run = ModeRun::default();

    for (i, entry) in entries.iter().enumerate() {
        if entry.speaker != Speaker::User {
            continue;
        }
        let Some(target) = entries.get(i + 1).filter(|e| e.speaker == Speaker::Agent) else {
            continue;
        };
        let history: Vec<DialogueTurn> = entries[..i]
            .iter()
            .map(|e| DialogueTurn {
                speaker: e.speaker,
                text: e.text.clone(),
            })
            .collect();
        let input = TurnInput {
            mode,
            message: &entry.text,
            concern: &concern,
            emotion: &emotion,
            language: &language,
            history: &history,
        };
        match backend.engine.run_turn(&gateway, &memory, input) {
            Ok(out) => {
                run.scores.push(score_pair(
                    &out.reply,
                    &target.text,
                    options.tokenizer,
                    options.smoothing,
                ));
                run.replies.push(out.reply);
                memory = out.memory;
            }
            Err(e) => {
                run.failures.push(TurnFailure {
                    transcript: reference.name.clone(),
                    mode,
                    turn_index: entry.turn_index,
                    stage: e.stage,
                    message: e.source.to_string(),
                });
                // Keep the turn count moving so later turns see the right index.
                memory.turn_index += 1;
            }
        }
    }
    run
}

fn skipped_turns(entries: &[TurnEntry]) -> usize {
    entries
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            e.speaker == Speaker::User
                && entries
                    .get(i + 1)
                    .is_none_or(|next| next.speaker != Speaker::Agent)
        })
        .count()
}

/// Scores already loaded references. Each transcript runs on its own thread;
/// results are folded in transcript order so the report is deterministic.
/// All threads share one backend so a live provider's rate limit holds.
pub fn ablate_references(
    references: &[Reference],
    modes: &[SessionMode],
    backend: &AblationBackend,
    options: ScoreOptions,
) -> Result<MetricReport, EvalError> {
    let client = (backend.factory)(&backend.gateway).map_err(EvalError::Backend)?;
    let client = &client;
    let per_transcript: Vec<Vec<ModeRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = references
            .iter()
            .map(|r| {
                scope.spawn(move || {
                    modes
                        .iter()
                        .map(|&m| run_mode(r, m, backend, client, options))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });

    let mut totals: Vec<ModeRun> = vec![ModeRun::default(); modes.len()];
    for runs in per_transcript {
        for (total, run) in totals.iter_mut().zip(runs) {
            total.scores.extend(run.scores);
            total.replies.extend(run.replies);
            total.failures.extend(run.failures);
        }
    }
    let rows = modes
        .iter()
        .zip(&totals)
        .map(|(&m, t)| ModeRow::new(m, &t.scores, &t.replies))
        .collect();
    Ok(MetricReport {
        tokenizer: options.tokenizer,
        smoothing: options.smoothing,
        alignment: ALIGNMENT_NOTE.to_string(),
        transcripts: references.iter().map(|r| r.name.clone()).collect(),
        rows,
        skipped_turns: references.iter().map(|r| skipped_turns(&r.entries)).sum(),
        failures: totals.into_iter().flat_map(|t| t.failures).collect(),
    })
}

/// Regenerates every counselor turn in `dir` under each mode and scores it
/// against the human reply.
pub fn run_ablation(
    dir: &Path,
    modes: &[SessionMode],
    backend: &AblationBackend,
    options: ScoreOptions,
) -> Result<MetricReport, EvalError> {
    let references = load_references(dir)?;
    ablate_references(&references, modes, backend, options)
}

/// Line-aligned corpus scoring: line i of `candidates` against line i of
/// `references`. Returns the mean and the number of pairs.
pub fn score_lines(
    candidates: &str,
    references: &str,
    options: ScoreOptions,
) -> Result<(PairScores, usize), EvalError> {
    let c: Vec<&str> = candidates.lines().collect();
    let r: Vec<&str> = references.lines().collect();
    if c.len() != r.len() {
        return Err(EvalError::LengthMismatch {
            candidates: c.len(),
            references: r.len(),
        });
    }
    let scores: Vec<PairScores> = c
        .iter()
        .zip(&r)
        .map(|(c, r)| score_pair(c, r, options.tokenizer, options.smoothing))
        .collect();
    Ok((PairScores::mean(&scores), scores.len()))
}
