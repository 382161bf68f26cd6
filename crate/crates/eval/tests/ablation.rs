use std::path::{Path, PathBuf};
use std::sync::Arc;

use psyprobe_core::domain::SessionMode;
use psyprobe_core::engine::Stage;
use psyprobe_core::gateway::{
    Backend, BackendError, BackendRequest, FnBackend, MockBackend, PromptKind,
};
use psyprobe_core::metrics::Tokenizer;
use psyprobe_eval::{
    load_references, run_ablation, AblationBackend, EvalError, MetricReport, ScoreOptions,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// A directory holding copies of the named fixture transcripts.
fn dir_with(names: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for name in names {
        std::fs::copy(
            fixtures().join("transcripts").join(name),
            dir.path().join(name),
        )
        .unwrap();
    }
    dir
}

fn mock_report(dir: &Path, modes: &[SessionMode]) -> MetricReport {
    run_ablation(
        dir,
        modes,
        &AblationBackend::mock(),
        ScoreOptions::default(),
    )
    .unwrap()
}

#[test]
fn two_modes_give_two_deterministic_rows() {
    let dir = dir_with(&["thesis_en.jsonl"]);
    let modes = [SessionMode::Full, SessionMode::WoSB];
    let a = mock_report(dir.path(), &modes);
    let b = mock_report(dir.path(), &modes);
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.rows[0].mode, SessionMode::Full);
    assert_eq!(a.rows[1].mode, SessionMode::WoSB);
    // Seven answered user turns; the closing message has no reply to score.
    assert!(a.rows.iter().all(|r| r.pairs == 7));
    assert_eq!(a.skipped_turns, 1);
    assert!(a.failures.is_empty());
    for row in &a.rows {
        assert!(
            row.metrics().iter().all(|v| (0.0..=1.0).contains(v)),
            "{row:?}"
        );
    }
}

#[test]
fn report_matches_golden() {
    let dir = dir_with(&["thesis_en.jsonl"]);
    let report = mock_report(dir.path(), SessionMode::ALL);
    let actual = serde_json::to_string_pretty(&report).unwrap() + "\n";
    let golden = fixtures().join("thesis_en.report.json");
    if std::env::var_os("PSYPROBE_BLESS").is_some() {
        std::fs::write(&golden, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).unwrap();
    assert_eq!(
        actual, expected,
        "rerun with PSYPROBE_BLESS=1 if the change is intended"
    );
}

#[test]
fn question_ideation_changes_question_rate() {
    let dir = dir_with(&["thesis_en.jsonl"]);
    let report = mock_report(dir.path(), &[SessionMode::Full, SessionMode::WoQIC]);
    let (full, wo_qic) = (&report.rows[0], &report.rows[1]);
    assert_ne!(full.question_rate, wo_qic.question_rate);
    assert!(full.question_rate > wo_qic.question_rate);
}

#[test]
fn baseline_and_full_differ_in_text() {
    let dir = dir_with(&["thesis_en.jsonl"]);
    let report = mock_report(dir.path(), &[SessionMode::Full, SessionMode::Baseline]);
    assert_ne!(report.rows[0].r1, report.rows[1].r1);
}

#[test]
fn transcripts_are_pooled_in_name_order() {
    let dir = dir_with(&["thesis_en.jsonl", "career_dialogue_ko.jsonl"]);
    let options = ScoreOptions {
        tokenizer: Tokenizer::Char,
        ..ScoreOptions::default()
    };
    let report = run_ablation(
        dir.path(),
        &[SessionMode::Full],
        &AblationBackend::mock(),
        options,
    )
    .unwrap();
    assert_eq!(
        report.transcripts,
        ["career_dialogue_ko.jsonl", "thesis_en.jsonl"]
    );
    assert_eq!(report.rows[0].pairs, 12 + 7);
    assert_eq!(report.tokenizer, Tokenizer::Char);
}

#[test]
fn empty_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("notes.txt"), "not a transcript").unwrap();
    let err = run_ablation(
        dir.path(),
        &[SessionMode::Full],
        &AblationBackend::mock(),
        ScoreOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::EmptyTranscript(_)), "{err}");
}

#[test]
fn transcript_without_counselor_turns_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("transcripts/thesis_en.jsonl")).unwrap();
    let users: String = text
        .lines()
        .filter(|l| l.contains("\"user\""))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.path().join("users_only.jsonl"), users).unwrap();
    assert!(matches!(
        load_references(dir.path()),
        Err(EvalError::MissingReferences(_))
    ));
}

#[test]
fn malformed_transcript_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.jsonl"), "{not json}\n").unwrap();
    let err = load_references(dir.path()).unwrap_err();
    assert!(err.to_string().contains("broken.jsonl"), "{err}");
}

#[test]
fn backend_failures_are_attributed_per_turn() {
    let mock = MockBackend::builtin();
    let failing = Arc::new(FnBackend::new(move |req: &BackendRequest<'_>| {
        if req.kind == PromptKind::Critic {
            Err(BackendError::Status {
                status: 503,
                body: "unavailable".into(),
            })
        } else {
            mock.complete(req)
        }
    })) as Arc<dyn Backend>;
    let backend = AblationBackend {
        factory: Arc::new(move |_| Ok(failing.clone())),
        ..AblationBackend::mock()
    };
    let dir = dir_with(&["thesis_en.jsonl"]);
    let report = run_ablation(
        dir.path(),
        &[SessionMode::Full, SessionMode::WoQIC],
        &backend,
        ScoreOptions::default(),
    )
    .unwrap();
    // Only the critic is broken, and only the full mode calls it.
    assert_eq!(report.rows[0].pairs, 0);
    assert_eq!(report.rows[1].pairs, 7);
    assert_eq!(report.failures.len(), 7);
    assert!(report
        .failures
        .iter()
        .all(|f| f.mode == SessionMode::Full && f.stage == Stage::ResponseGenerator));
    let turns: Vec<u32> = report.failures.iter().map(|f| f.turn_index).collect();
    assert_eq!(turns, (0..7).collect::<Vec<_>>());
}

#[test]
fn unavailable_backend_is_an_error() {
    let backend = AblationBackend {
        factory: Arc::new(|_| Err("no API key".into())),
        ..AblationBackend::mock()
    };
    let dir = dir_with(&["thesis_en.jsonl"]);
    let err = run_ablation(
        dir.path(),
        &[SessionMode::Full],
        &backend,
        ScoreOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::Backend(_)));
}
