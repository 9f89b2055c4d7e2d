//! End-to-end pipeline runs against scripted and replayed backends.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use seamstress_core::llm_backend::{builtin_profile, ReplayBackend, ScriptedBackend};
use seamstress_core::metadata::MetadataStore;
use seamstress_core::orchestrator::{run_pipeline, PlanFile, RunConfig, UnitStatus};
use seamstress_core::prompts::{
    LlmResponsePart, PromptEnvelope, FILES_SCHEMA, MAP_SCHEMA, REPAIR_SCHEMA, TRANSLATE_SCHEMA,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn parts(payload: &str) -> Vec<LlmResponsePart> {
    LlmResponsePart::single(payload)
}

fn rust_fn(name: &str, value: i64) -> String {
    serde_json::json!({ "rust": format!("pub fn {name}() -> i32 {{\n    {value}\n}}\n") })
        .to_string()
}

fn map_answer(names: &[&str]) -> String {
    let entries: Vec<serde_json::Value> = names
        .iter()
        .map(|n| serde_json::json!({ "c_name": n, "rust_name": n }))
        .collect();
    serde_json::Value::Array(entries).to_string()
}

/// Source files under the workspace, keyed by relative path.
fn source_snapshot(rust_root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(rust_root).sort_by_file_name() {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.components().any(|c| c.as_os_str() == "target") {
            continue;
        }
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = path
            .strip_prefix(rust_root)
            .unwrap()
            .to_string_lossy()
            .replace('\\', "/");
        out.insert(rel, fs::read(path).unwrap());
    }
    out
}

fn run_events(out_dir: &Path, event: &str) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(out_dir.join("run.jsonl")).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == event)
        .collect()
}

/// Scripted responses for the three-module toy project: beta's first unit
/// is translated with a bad import, repaired with a two-file patch (code
/// line plus a manifest append), and everything else translates cleanly.
fn toy_script(
    counters: Rc<RefCell<BTreeMap<String, usize>>>,
) -> impl FnMut(&PromptEnvelope) -> Result<Vec<LlmResponsePart>, seamstress_core::llm_backend::BackendError>
{
    move |env: &PromptEnvelope| {
        let unit = env.unit.to_string();
        *counters
            .borrow_mut()
            .entry(format!("{}:{unit}", env.schema_id))
            .or_insert(0) += 1;
        let payload = match (env.schema_id.as_str(), unit.as_str()) {
            (TRANSLATE_SCHEMA, "alpha.1") => rust_fn("alpha_one", 105),
            (TRANSLATE_SCHEMA, "alpha.2") => rust_fn("alpha_two", -5),
            (TRANSLATE_SCHEMA, "gamma.1") => rust_fn("gamma_one", 98),
            (TRANSLATE_SCHEMA, "gamma.2") => {
                // Split mid-document and return the parts out of order to
                // exercise multipart reassembly end to end.
                let whole = rust_fn("gamma_two", 138);
                let (head, tail) = whole.split_at(whole.len() / 2);
                return Ok(vec![
                    LlmResponsePart {
                        part_index: 2,
                        total_parts: Some(2),
                        payload_fragment: tail.to_string(),
                    },
                    LlmResponsePart {
                        part_index: 1,
                        total_parts: Some(2),
                        payload_fragment: head.to_string(),
                    },
                ]);
            }
            (TRANSLATE_SCHEMA, "beta.1") => serde_json::json!({
                "rust": "use crate::missing_module::*;\n\npub fn beta_one() -> i32 {\n    gamma_one() + 78\n}\n"
            })
            .to_string(),
            (TRANSLATE_SCHEMA, "beta.2") => rust_fn("beta_two", 278),
            (FILES_SCHEMA, "beta.1") => {
                serde_json::json!({ "files": ["src/beta/unit1.rs", "Cargo.toml"] }).to_string()
            }
            (REPAIR_SCHEMA, "beta.1") => serde_json::json!({
                "repairs": [
                    {
                        "file": "src/beta/unit1.rs",
                        "start_line": 1,
                        "end_line": 1,
                        "replacement": "use crate::gamma::*;"
                    },
                    {
                        // The scaffolded manifest is 8 lines; 9..9 appends.
                        "file": "Cargo.toml",
                        "start_line": 9,
                        "end_line": 9,
                        "replacement": "# patched during repair"
                    }
                ]
            })
            .to_string(),
            (MAP_SCHEMA, "alpha.1") => map_answer(&["alpha_one"]),
            (MAP_SCHEMA, "alpha.2") => map_answer(&["alpha_two"]),
            (MAP_SCHEMA, "beta.1") => map_answer(&["beta_one"]),
            (MAP_SCHEMA, "beta.2") => map_answer(&["beta_two"]),
            (MAP_SCHEMA, "gamma.1") => map_answer(&["gamma_one"]),
            (MAP_SCHEMA, "gamma.2") => map_answer(&["gamma_two"]),
            other => panic!("unexpected prompt: {other:?}"),
        };
        Ok(parts(&payload))
    }
}

#[test]
fn end_to_end_repair_then_deterministic_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("out1");
    let counters = Rc::new(RefCell::new(BTreeMap::new()));
    let profile = builtin_profile("claude-3.5-sonnet").unwrap();
    let mut backend = ScriptedBackend::new(profile, toy_script(counters.clone()));

    let mut config = RunConfig::new(fixture("toy"), &out1);
    config.cap = Some(30);
    let outcome = run_pipeline(&config, &mut backend).unwrap();

    // Every unit compiled; both coverage figures are exactly 1.
    assert_eq!(outcome.aborted_units, 0);
    assert_eq!(outcome.report.units_total, 6);
    assert_eq!(outcome.report.units_compiled, 6);
    assert_eq!(outcome.report.line_coverage, 1.0);
    assert_eq!(outcome.report.element_coverage, 1.0);
    assert_eq!(outcome.report.elements_total, 6);
    assert_eq!(outcome.report.elements_mapped, 6);
    assert_eq!(outcome.report.final_build_ok, Some(true));

    // The bad import surfaced as a module-system error before the repair.
    assert!(*outcome.report.error_histogram.get("Modules").unwrap_or(&0) >= 1);

    // Modules ran dependencies-first: beta references gamma, so gamma's
    // units come before beta's.
    let order: Vec<String> = run_events(&out1, "translate")
        .iter()
        .map(|e| e["unit"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        order,
        vec!["alpha.1", "alpha.2", "gamma.1", "gamma.2", "beta.1", "beta.2"]
    );

    // The repair rewrote the import line and appended to the manifest.
    let unit1 = fs::read_to_string(out1.join("rust/src/beta/unit1.rs")).unwrap();
    assert!(unit1.starts_with("use crate::gamma::*;\n"));
    assert!(!unit1.contains("missing_module"));
    let manifest = fs::read_to_string(out1.join("rust/Cargo.toml")).unwrap();
    assert!(manifest.ends_with("# patched during repair\n"));
    let patched = run_events(&out1, "patched");
    assert_eq!(patched.len(), 1);
    assert_eq!(
        patched[0]["files"],
        serde_json::json!(["Cargo.toml", "src/beta/unit1.rs"])
    );

    // Unit statuses and metadata round out the run state.
    let plan: PlanFile =
        serde_json::from_str(&fs::read_to_string(out1.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan.statuses.len(), 6);
    assert!(plan
        .statuses
        .values()
        .all(|s| *s == UnitStatus::Compiled));
    let store = MetadataStore::load(&out1.join("metadata.json")).unwrap();
    assert_eq!(store.elements.len(), 6);
    assert!(store.elements.iter().all(|e| e.is_mapped()));
    assert!(store
        .elements
        .iter()
        .all(|e| e.confidence.as_deref() == Some("exact-name")));

    // The workspace passes a real toolchain check on its own.
    let check = seamstress_core::orchestrator::check_workspace(
        &out1.join("rust"),
        std::time::Duration::from_secs(120),
    )
    .unwrap();
    assert!(check.success, "log: {}", check.raw_log);

    // Each prompt kind was sent exactly as often as the scenario needs.
    {
        let c = counters.borrow();
        assert_eq!(c[&format!("{TRANSLATE_SCHEMA}:beta.1")], 1);
        assert_eq!(c[&format!("{FILES_SCHEMA}:beta.1")], 1);
        assert_eq!(c[&format!("{REPAIR_SCHEMA}:beta.1")], 1);
        assert_eq!(c.iter().filter(|(k, _)| k.starts_with(MAP_SCHEMA)).count(), 6);
    }

    // Replaying the recorded transcript reproduces the workspace byte for
    // byte without inventing any new prompts.
    let out2 = tmp.path().join("out2");
    let mut replay = ReplayBackend::load(&out1.join("transcript"), None).unwrap();
    let mut config2 = RunConfig::new(fixture("toy"), &out2);
    config2.cap = Some(30);
    let outcome2 = run_pipeline(&config2, &mut replay).unwrap();
    assert_eq!(outcome2.aborted_units, 0);
    assert_eq!(outcome2.report.line_coverage, 1.0);
    assert_eq!(outcome2.report.element_coverage, 1.0);

    let first = source_snapshot(&out1.join("rust"));
    let second = source_snapshot(&out2.join("rust"));
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (rel, bytes) in &first {
        assert_eq!(bytes, &second[rel], "{rel} differs between runs");
    }
}

#[test]
fn failing_unit_aborts_and_poisons_the_rest_of_its_module() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let counters = Rc::new(RefCell::new(BTreeMap::new()));
    let counters_in = counters.clone();
    let profile = builtin_profile("claude-3.5-sonnet").unwrap();
    let mut backend = ScriptedBackend::new(profile, move |env: &PromptEnvelope| {
        let unit = env.unit.to_string();
        *counters_in
            .borrow_mut()
            .entry(format!("{}:{unit}", env.schema_id))
            .or_insert(0) += 1;
        let payload = match (env.schema_id.as_str(), unit.as_str()) {
            (TRANSLATE_SCHEMA, "delta.1") => {
                serde_json::json!({ "rust": "pub fn delta_one() -> i32 { missing_name }\n" })
                    .to_string()
            }
            (FILES_SCHEMA, "delta.1") => {
                serde_json::json!({ "files": ["src/delta/unit1.rs"] }).to_string()
            }
            (REPAIR_SCHEMA, "delta.1") => serde_json::json!({
                "repairs": [{
                    "file": "src/delta/unit1.rs",
                    "start_line": 1,
                    "end_line": 1,
                    "replacement": "pub fn delta_one() -> i32 { still_missing }"
                }]
            })
            .to_string(),
            other => panic!("unexpected prompt: {other:?}"),
        };
        Ok(parts(&payload))
    });

    let mut config = RunConfig::new(fixture("solo"), &out);
    config.cap = Some(30);
    config.max_repair_attempts = 2;
    let outcome = run_pipeline(&config, &mut backend).unwrap();

    // Both units aborted: the first on its own, the second by propagation,
    // without its translation ever being requested.
    assert_eq!(outcome.aborted_units, 2);
    assert_eq!(outcome.report.units_aborted, 2);
    assert_eq!(outcome.report.line_coverage, 0.0);
    assert_eq!(outcome.report.element_coverage, 0.0);
    {
        let c = counters.borrow();
        assert_eq!(c[&format!("{TRANSLATE_SCHEMA}:delta.1")], 1);
        assert_eq!(c[&format!("{REPAIR_SCHEMA}:delta.1")], 2);
        assert!(!c.contains_key(&format!("{TRANSLATE_SCHEMA}:delta.2")));
    }
    let aborts = run_events(&out, "abort");
    assert_eq!(aborts.len(), 2);
    assert_eq!(aborts[0]["unit"], "delta.1");
    assert_eq!(aborts[0]["propagated"], false);
    assert_eq!(aborts[1]["unit"], "delta.2");
    assert_eq!(aborts[1]["propagated"], true);

    // The failed unit was rolled back: its file is gone, the manifest is
    // pristine, and the workspace still passes a check.
    assert!(!out.join("rust/src/delta/unit1.rs").exists());
    let mod_rs = fs::read_to_string(out.join("rust/src/delta/mod.rs")).unwrap();
    assert_eq!(mod_rs, "");
    assert_eq!(outcome.report.final_build_ok, Some(true));
}

#[test]
fn ten_consecutive_unit_failures_halve_the_cap_exactly_once() {
    let tmp = tempfile::tempdir().unwrap();
    let project = tmp.path().join("many");
    fs::create_dir_all(&project).unwrap();
    for i in 1..=12 {
        fs::write(
            project.join(format!("m{i:02}.c")),
            format!("int m{i:02}_f(void) {{ return {i}; }}\n"),
        )
        .unwrap();
    }
    let out = tmp.path().join("out");
    let profile = builtin_profile("claude-3.5-sonnet").unwrap();
    // Every translation response is undecodable, so every unit aborts.
    let mut backend = ScriptedBackend::new(profile, |_env: &PromptEnvelope| {
        Ok(parts("this is not json"))
    });

    let mut config = RunConfig::new(&project, &out);
    config.cap = Some(100);
    config.max_format_retries = 1;
    let outcome = run_pipeline(&config, &mut backend).unwrap();

    assert_eq!(outcome.aborted_units, 12);
    let plan: PlanFile =
        serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    // One stall halving after the tenth consecutive failure: 100 -> 50,
    // and the two failures after it do not trigger another.
    assert_eq!(plan.cap_lines, 50);
    assert_eq!(plan.history.len(), 2);
    assert_eq!(plan.history[0].cap, 100);
    assert_eq!(plan.history[0].trigger, "initial");
    assert_eq!(plan.history[1].cap, 50);
    assert_eq!(plan.history[1].trigger, "stall");
    let stalls = run_events(&out, "shrink");
    assert_eq!(stalls.len(), 1);
    assert_eq!(stalls[0]["trigger"], "stall");
}
