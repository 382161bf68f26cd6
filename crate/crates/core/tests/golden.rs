//! Golden transcripts: each `*.script.json` under `fixtures/golden` must replay
//! to its sibling `.jsonl` byte for byte. Set `PSYPROBE_BLESS=1` to rewrite the
//! expected files after an intentional change.

use std::path::{Path, PathBuf};

use psyprobe_core::domain::Speaker;
use psyprobe_core::engine::Engine;
use psyprobe_core::replay::{first_difference, replay_to_string, ReplayScript};
use psyprobe_core::session::import_entries;
use psyprobe_core::text;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn scripts() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".script.json"))
        .collect();
    out.sort();
    out
}

fn expected_path(script: &Path) -> PathBuf {
    let name = script
        .file_name()
        .unwrap()
        .to_string_lossy()
        .replace(".script.json", ".jsonl");
    script.with_file_name(name)
}

fn load(script: &Path) -> ReplayScript {
    serde_json::from_str(&std::fs::read_to_string(script).unwrap()).unwrap()
}

#[test]
fn golden_transcripts_replay_byte_identically() {
    let bless = std::env::var_os("PSYPROBE_BLESS").is_some();
    let scripts = scripts();
    assert!(scripts.len() >= 2, "golden scripts missing");
    for script in scripts {
        let actual = replay_to_string(&load(&script), Engine::default()).unwrap();
        let expected_file = expected_path(&script);
        if bless {
            std::fs::write(&expected_file, &actual).unwrap();
            continue;
        }
        let expected = std::fs::read_to_string(&expected_file).unwrap_or_else(|_| {
            panic!(
                "{} missing; run with PSYPROBE_BLESS=1",
                expected_file.display()
            )
        });
        if let Some((line, want, got)) = first_difference(&expected, &actual) {
            panic!(
                "{} differs at line {line}\nexpected: {want}\nactual:   {got}",
                expected_file.display()
            );
        }
    }
}

#[test]
fn golden_agent_turns_respect_length_and_question_limits() {
    for script in scripts() {
        let entries =
            import_entries(&std::fs::read_to_string(expected_path(&script)).unwrap()).unwrap();
        let agent: Vec<_> = entries
            .iter()
            .filter(|e| e.speaker == Speaker::Agent)
            .collect();
        assert_eq!(agent.len(), load(&script).messages.len());
        for e in agent {
            assert!(text::sentence_count(&e.text) <= 4, "too long: {}", e.text);
            assert!(
                text::question_count(&e.text) <= 1,
                "too many questions: {}",
                e.text
            );
            assert!(e.stage_artifacts.is_some() && e.memory_snapshot.is_some());
        }
    }
}
