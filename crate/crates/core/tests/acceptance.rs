//! Acceptance gate for the whole pipeline: nine criteria, each checked by an
//! independent body and reported as one pass/fail line. The single test at the
//! bottom runs them sequentially so the per-criterion timings are honest, and
//! fails if any criterion failed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use seamstress_core::c_model::{self, reference_edges, tarjan, CFile, ElementKind};
use seamstress_core::cli::{cmd_analyze, Flags, Settings};
use seamstress_core::llm_backend::{
    builtin_profile, BackendProfile, ReplayBackend, ScriptedBackend,
};
use seamstress_core::metadata::{ElementRecord, MetadataStore};
use seamstress_core::orchestrator::{
    apply_patches, categorize, check_workspace, classify_code, compute_coverage, run_pipeline,
    ErrorCategory, PlanFile, RunConfig, UnitStatus, DEFAULT_MAX_REPAIR_ATTEMPTS,
};
use seamstress_core::preprocess::{module_atoms, preprocess_project, LineOrigin, Preprocessed};
use seamstress_core::prompts::{
    build_translation_prompt, estimate_tokens, LlmResponsePart, PatchSpec, PromptEnvelope,
    PromptError, RulesProfile, TemplateSet, TokenBudget, FILES_SCHEMA, MAP_SCHEMA, REPAIR_SCHEMA,
    TRANSLATE_SCHEMA,
};
use seamstress_core::segment::{
    indivisible_spans, plan_modules, shrink, ModulePlan, ShrinkOutcome, ShrinkTrigger, UnitId,
    UnitPlan, DEFAULT_FLOOR,
};

// =========================================================================
// shared helpers
// =========================================================================

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Run the analyze command over a directory and parse its JSON output.
fn analyze_json(dir: &Path) -> serde_json::Value {
    let flags = Flags {
        project: Some(dir.to_path_buf()),
        report_format: Some("json".to_string()),
        ..Flags::default()
    };
    let settings = Settings::resolve(flags, None).expect("analyze settings");
    let out = cmd_analyze(&settings).expect("analyze command");
    serde_json::from_str(&out.stdout).expect("analyze JSON")
}

fn load_preprocessed(root: &Path) -> (c_model::CProject, Preprocessed) {
    let project = c_model::load_project(root).expect("load project");
    let pre = preprocess_project(&project, &[]).expect("preprocess project");
    (project, pre)
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

/// Source files under a workspace root, keyed by relative path.
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

// =========================================================================
// random C project generator (used by criteria 2 and 3)
// =========================================================================

struct GenExpect {
    /// Guard macros the project both defines and tests: their feature
    /// records must default on.
    features_on: Vec<String>,
    /// Guard macros the project only tests: records must default off.
    features_off: Vec<String>,
}

fn fresh(uid: &mut usize, prefix: &str) -> String {
    *uid += 1;
    format!("{prefix}_{uid}")
}

/// Write a randomized multi-file C project under `root`. The shapes cover
/// every preprocessing step: guarded shared headers (optionally nested and
/// repeatedly included), colliding static names across modules, prototypes
/// for later definitions, cross-module externs, mutual recursion, guard
/// macros both defined and merely tested, and padding that scales with
/// `scale`.
fn gen_project(rng: &mut ChaCha8Rng, root: &Path, scale: usize) -> GenExpect {
    fs::create_dir_all(root).unwrap();
    let mut uid = 0usize;
    let n_modules = rng.gen_range(2..=4);
    let with_header = rng.gen_bool(0.8);
    let nested = with_header && rng.gen_bool(0.5);
    let collide_static = rng.gen_bool(0.5);

    let export_fn: Vec<String> = (0..n_modules).map(|_| fresh(&mut uid, "api")).collect();
    let export_var: Vec<String> = (0..n_modules).map(|_| fresh(&mut uid, "state")).collect();
    let typedef_name = fresh(&mut uid, "num");
    let cap_macro = fresh(&mut uid, "CAP");
    let tag = {
        uid += 1;
        uid
    };

    let mut expect = GenExpect {
        features_on: Vec::new(),
        features_off: Vec::new(),
    };
    let feature_on = format!("ENABLE_{tag}");
    let use_on = rng.gen_bool(0.7);
    if use_on {
        expect.features_on.push(feature_on.clone());
    }
    let feature_off = format!("TRACE_{tag}");
    let use_off = rng.gen_bool(0.7);
    if use_off {
        expect.features_off.push(feature_off.clone());
    }

    if with_header {
        if nested {
            let mut base = String::new();
            base.push_str(&format!("#ifndef BASE_H_{tag}\n#define BASE_H_{tag}\n"));
            base.push_str("/* shared base definitions */\n");
            base.push_str(&format!("#define BASE_BIAS_{tag} 3\n"));
            base.push_str("#endif\n");
            fs::write(root.join("base.h"), base).unwrap();
        }
        let mut defs = String::new();
        defs.push_str(&format!("#ifndef DEFS_H_{tag}\n#define DEFS_H_{tag}\n"));
        if nested {
            defs.push_str("#include \"base.h\"\n");
        }
        defs.push_str(&format!("typedef int {typedef_name};\n"));
        defs.push_str(&format!("#define {cap_macro} {}\n", rng.gen_range(8..64)));
        for m in 0..n_modules {
            defs.push_str(&format!("int {}(int);\n", export_fn[m]));
            defs.push_str(&format!("extern int {};\n", export_var[m]));
        }
        defs.push_str("#endif\n");
        fs::write(root.join("defs.h"), defs).unwrap();
    }

    for m in 0..n_modules {
        let mut s = String::new();
        s.push_str(&format!("/* generated module {m} */\n"));
        if rng.gen_bool(0.4) {
            s.push_str("#include <stddef.h>\n");
        }
        if with_header {
            s.push_str("#include \"defs.h\"\n");
            if rng.gen_bool(0.4) {
                s.push_str("#include \"defs.h\"\n");
            }
            if nested && rng.gen_bool(0.5) {
                s.push_str("#include \"base.h\"\n");
            }
        }
        if use_on && m == 0 {
            s.push_str(&format!("#define {feature_on}\n"));
        }
        s.push_str(&format!("int {} = {};\n", export_var[m], rng.gen_range(0..100)));
        if collide_static && m <= 1 {
            s.push_str(&format!(
                "static int tick(void) {{\n    return {};\n}}\n",
                m + 1
            ));
        }
        let helper = fresh(&mut uid, "local");
        s.push_str(&format!(
            "static int {helper}(int v) {{\n    return v + {};\n}}\n",
            rng.gen_range(1..9)
        ));
        let late = fresh(&mut uid, "late");
        s.push_str(&format!("int {late}(int);\n"));
        s.push_str(&format!("int {}(int k) {{\n", export_fn[m]));
        s.push_str(&format!("    int acc = {helper}(k);\n"));
        s.push_str(&format!("    acc = acc + {late}(k);\n"));
        if with_header && rng.gen_bool(0.6) {
            let other = (m + 1) % n_modules;
            s.push_str(&format!(
                "    acc = acc + {}(k) + {};\n",
                export_fn[other], export_var[other]
            ));
        }
        if collide_static && m <= 1 {
            s.push_str("    acc = acc + tick();\n");
        }
        if with_header {
            s.push_str(&format!(
                "    {typedef_name} lim = {cap_macro};\n    acc = acc + lim;\n"
            ));
        }
        s.push_str("    return acc;\n}\n");
        s.push_str(&format!(
            "int {late}(int v) {{\n    return v * {};\n}}\n",
            rng.gen_range(2..5)
        ));
        if rng.gen_bool(0.4) {
            let ping = fresh(&mut uid, "ping");
            let pong = fresh(&mut uid, "pong");
            s.push_str(&format!("int {pong}(int);\n"));
            s.push_str(&format!(
                "int {ping}(int n) {{\n    if (n <= 0) {{ return 0; }}\n    return {pong}(n - 1);\n}}\n"
            ));
            s.push_str(&format!(
                "int {pong}(int n) {{\n    if (n <= 0) {{ return 1; }}\n    return {ping}(n - 1);\n}}\n"
            ));
        }
        if use_on && m == 1 {
            let gated = fresh(&mut uid, "gated");
            s.push_str(&format!(
                "#ifdef {feature_on}\nint {gated}(void) {{\n    return 42;\n}}\n#endif\n"
            ));
        }
        if use_off && m == 0 {
            s.push_str(&format!(
                "#ifdef {feature_off}\nint trace_level_{tag} = 1;\n#endif\n"
            ));
        }
        for _ in 0..rng.gen_range(0..scale * 4) {
            let pad = fresh(&mut uid, "pad");
            s.push_str(&format!(
                "int {pad}(int z) {{\n    return z - {};\n}}\n",
                rng.gen_range(0..50)
            ));
        }
        fs::write(root.join(format!("mod_{m}.c")), s).unwrap();
    }
    expect
}

// =========================================================================
// criterion 1: element-scan fidelity
// =========================================================================

fn criterion_1() -> String {
    struct Expect {
        name: &'static str,
        files: u64,
        lines: u64,
        elements: u64,
        kinds: &'static [(&'static str, u64)],
    }
    // Hand counts, frozen when the fixtures were authored:
    // - bst.c: node_new, bst_insert, bst_contains, bst_remove, bst_free,
    //   main (6 functions) + the Node typedef = 7 elements over 158 lines.
    // - kinds.c: LIMIT (macro variable), SQUARE (macro function), Pair
    //   (typedef), counter (variable), bump + main (functions), knr_add
    //   (old-style definition -> other) = 7 elements over 38 lines.
    // - solo/delta.c: 2 functions over 37 lines.
    // - toy: alpha.c 37 + beta.c 36 + gamma.c 35 = 108 lines, 2 functions
    //   in each file = 6 elements.
    let corpus = [
        Expect {
            name: "bst",
            files: 1,
            lines: 158,
            elements: 7,
            kinds: &[("function", 6), ("type_def", 1)],
        },
        Expect {
            name: "kinds",
            files: 1,
            lines: 38,
            elements: 7,
            kinds: &[
                ("function", 2),
                ("macro_function", 1),
                ("macro_variable", 1),
                ("other", 1),
                ("type_def", 1),
                ("variable", 1),
            ],
        },
        Expect {
            name: "solo",
            files: 1,
            lines: 37,
            elements: 2,
            kinds: &[("function", 2)],
        },
        Expect {
            name: "toy",
            files: 3,
            lines: 108,
            elements: 6,
            kinds: &[("function", 6)],
        },
    ];
    for e in &corpus {
        let summary = analyze_json(&fixture(e.name));
        assert_eq!(
            summary["total_files"].as_u64().unwrap(),
            e.files,
            "{}: file count",
            e.name
        );
        assert_eq!(
            summary["total_lines"].as_u64().unwrap(),
            e.lines,
            "{}: line total",
            e.name
        );
        assert_eq!(
            summary["total_elements"].as_u64().unwrap(),
            e.elements,
            "{}: element total",
            e.name
        );
        let by_kind = summary["by_kind"].as_object().unwrap();
        assert_eq!(by_kind.len(), e.kinds.len(), "{}: kind table size", e.name);
        for (kind, count) in e.kinds {
            assert_eq!(
                by_kind[*kind].as_u64().unwrap(),
                *count,
                "{}: count for kind {kind}",
                e.name
            );
        }
    }
    // The per-file row for the pinned single-file benchmark.
    let bst = analyze_json(&fixture("bst"));
    assert_eq!(bst["files"][0]["path"], "bst.c");
    assert_eq!(bst["files"][0]["lines"].as_u64().unwrap(), 158);
    assert_eq!(bst["files"][0]["elements"].as_u64().unwrap(), 7);

    // Throughput: a generated 5,000-line project must scan in under one
    // second. 50 files x 10 functions x 10 lines = 5,000 lines, 500
    // elements by construction.
    let tmp = tempfile::tempdir().unwrap();
    let big = tmp.path().join("big");
    fs::create_dir_all(&big).unwrap();
    for f in 0..50 {
        let mut text = String::new();
        for g in 0..10 {
            text.push_str(&format!("int file{f:02}_fn{g}(int x) {{\n"));
            for b in 0..7 {
                text.push_str(&format!("    x = x + {b};\n"));
            }
            text.push_str("    return x;\n");
            text.push_str("}\n");
        }
        fs::write(big.join(format!("file{f:02}.c")), text).unwrap();
    }
    let started = Instant::now();
    let summary = analyze_json(&big);
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(summary["total_lines"].as_u64().unwrap(), 5_000);
    assert_eq!(summary["total_elements"].as_u64().unwrap(), 500);
    assert!(
        secs < 1.0,
        "scanning 5,000 lines took {secs:.3}s; the budget is one second"
    );
    format!(
        "corpus totals exact (bst: 158 lines, 7 elements); 5,000 lines scanned in {:.0}ms",
        secs * 1000.0
    )
}

// =========================================================================
// criterion 2: preprocessing invariants
// =========================================================================

/// Replace whole-identifier occurrences per the module's recorded renames.
/// Reimplemented here, independently of the library, so the per-line
/// accounting check does not lean on the code under test.
fn apply_renames(line: &str, renames: &[(String, String)]) -> String {
    if renames.is_empty() {
        return line.to_string();
    }
    let bytes = line.as_bytes();
    let mut out = String::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'_' || b.is_ascii_alphabetic() {
            let start = i;
            while i < bytes.len() && (bytes[i] == b'_' || bytes[i].is_ascii_alphanumeric()) {
                i += 1;
            }
            let word = &line[start..i];
            match renames.iter().find(|(old, _)| old == word) {
                Some((_, new)) => out.push_str(new),
                None => out.push_str(word),
            }
        } else {
            out.push(b as char);
            i += 1;
        }
    }
    out
}

fn criterion_2() -> String {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut modules_checked = 0usize;
    for p in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC2_0000 + p);
        let root = tmp.path().join(format!("p{p}"));
        let expect = gen_project(&mut rng, &root, 1);
        let (project, pre) = load_preprocessed(&root);

        let by_path: BTreeMap<&Path, &CFile> =
            project.files.iter().map(|f| (f.path.as_path(), f)).collect();

        for module in &pre.modules {
            modules_checked += 1;
            let n = module.file.line_count();
            // (a) one provenance record per merged line
            assert_eq!(
                module.origin.len(),
                n,
                "project {p} module {}: origin map length != line count",
                module.name
            );
            let merged_lines: Vec<&str> = module.text().split_inclusive('\n').collect();
            let mut seen: BTreeSet<(&Path, usize)> = BTreeSet::new();
            for (i, origin) in module.origin.iter().enumerate() {
                match origin {
                    LineOrigin::Synthetic => {}
                    LineOrigin::Source { file, line } => {
                        let src = by_path.get(file.as_path()).unwrap_or_else(|| {
                            panic!(
                                "project {p} module {}: origin names unknown file {}",
                                module.name,
                                file.display()
                            )
                        });
                        assert!(
                            *line >= 1 && *line <= src.line_count(),
                            "project {p} module {}: origin line {line} outside {}",
                            module.name,
                            file.display()
                        );
                        // (b) no source line claimed twice within a module
                        assert!(
                            seen.insert((file.as_path(), *line)),
                            "project {p} module {}: source line {}:{line} claimed twice",
                            module.name,
                            file.display()
                        );
                        // (c) the merged line is the source line, modulo the
                        // recorded static renames
                        let original = src.source.lines_text(*line, *line);
                        let expected =
                            apply_renames(original.trim_end_matches('\n'), &module.renames);
                        assert_eq!(
                            merged_lines[i].trim_end_matches('\n'),
                            expected,
                            "project {p} module {}: merged line {} does not match its origin",
                            module.name,
                            i + 1
                        );
                    }
                }
            }
            // (d) include-free: every quoted include had a target on disk,
            // so none may survive the merge
            for (i, l) in merged_lines.iter().enumerate() {
                assert!(
                    !l.trim_start().starts_with("#include \""),
                    "project {p} module {}: line {} still holds a quoted include",
                    module.name,
                    i + 1
                );
            }
            // (e) declaration-free, except declarations kept because their
            // definition lives in another module
            for el in &module.file.elements {
                if !el.is_declaration {
                    continue;
                }
                assert!(
                    module.kept_externals.contains(&el.name),
                    "project {p} module {}: declaration of {} survived without being \
                     recorded as an external",
                    module.name,
                    el.name
                );
                assert!(
                    !module
                        .file
                        .elements
                        .iter()
                        .any(|d| !d.is_declaration && d.name == el.name),
                    "project {p} module {}: {} is both declared and defined here",
                    module.name,
                    el.name
                );
            }
            // (f) ordering: among the movable blocks, a reference into a
            // different strongly-connected group always points backwards
            let atoms = module_atoms(&module.file);
            let names: Vec<Vec<String>> = atoms.iter().map(|a| a.names.clone()).collect();
            let texts: Vec<&str> = atoms
                .iter()
                .map(|a| {
                    let span = module.file.source.line_span(a.start_line, a.end_line);
                    &module.file.source.masked[span]
                })
                .collect();
            let refs = reference_edges(&names, &texts);
            let comps = tarjan(atoms.len(), |v| refs.edges[v].iter().copied());
            let mut group = vec![0usize; atoms.len()];
            for (gi, comp) in comps.iter().enumerate() {
                for &v in comp {
                    group[v] = gi;
                }
            }
            let mut forward = 0usize;
            for (i, edges) in refs.edges.iter().enumerate() {
                for &d in edges {
                    if group[i] != group[d] && atoms[d].start_line > atoms[i].start_line {
                        forward += 1;
                    }
                }
            }
            assert_eq!(
                forward, 0,
                "project {p} module {}: {forward} forward cross-group reference(s)",
                module.name
            );
        }

        // feature records match what the generator emitted
        for name in &expect.features_on {
            let rec = pre
                .features
                .iter()
                .find(|f| &f.name == name)
                .unwrap_or_else(|| panic!("project {p}: no feature record for {name}"));
            assert!(
                rec.originally_defined,
                "project {p}: {name} was defined but its record defaults off"
            );
        }
        for name in &expect.features_off {
            let rec = pre
                .features
                .iter()
                .find(|f| &f.name == name)
                .unwrap_or_else(|| panic!("project {p}: no feature record for {name}"));
            assert!(
                !rec.originally_defined,
                "project {p}: {name} was never defined but its record defaults on"
            );
        }

        // idempotence: preprocessing the preprocessed output changes nothing
        let round2 = tmp.path().join(format!("p{p}-round2"));
        fs::create_dir_all(&round2).unwrap();
        for module in &pre.modules {
            fs::write(round2.join(format!("{}.c", module.name)), module.text()).unwrap();
        }
        let (_, pre2) = load_preprocessed(&round2);
        assert_eq!(
            pre.modules.len(),
            pre2.modules.len(),
            "project {p}: module count changed on the second pass"
        );
        for module in &pre.modules {
            let again = pre2
                .modules
                .iter()
                .find(|m| m.name == module.name)
                .unwrap_or_else(|| panic!("project {p}: module {} vanished", module.name));
            assert_eq!(
                module.text(),
                again.text(),
                "project {p} module {}: second preprocessing pass changed the text",
                module.name
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(
        secs < 10.0,
        "100 projects took {secs:.2}s; the budget is ten seconds"
    );
    format!(
        "100 random projects ({modules_checked} modules): line accounting exact, \
         declarations stripped or kept as externals, includes resolved, 0 forward \
         cross-group references, re-preprocessing byte-identical; {secs:.1}s"
    )
}

// =========================================================================
// criterion 3: segmentation invariants
// =========================================================================

fn criterion_3() -> String {
    let caps = [50usize, 100, 300, 600, 1200];
    let tmp = tempfile::tempdir().unwrap();

    let mut inputs: Vec<(String, Preprocessed)> = Vec::new();
    for name in ["toy", "bst", "kinds", "solo"] {
        let (_, pre) = load_preprocessed(&fixture(name));
        inputs.push((name.to_string(), pre));
    }
    for i in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC3_0000 + i);
        let root = tmp.path().join(format!("p{i}"));
        let scale = rng.gen_range(2..=8);
        gen_project(&mut rng, &root, scale);
        let (_, pre) = load_preprocessed(&root);
        inputs.push((format!("random-{i}"), pre));
    }

    let mut units_checked = 0usize;
    let mut modules_checked = 0usize;
    for (label, pre) in &inputs {
        for &cap in &caps {
            let plans = plan_modules(&pre.modules, cap);
            assert_eq!(
                plans,
                plan_modules(&pre.modules, cap),
                "{label} cap {cap}: planning twice differs"
            );
            assert_eq!(plans.len(), pre.modules.len());
            for (module, plan) in pre.modules.iter().zip(&plans) {
                modules_checked += 1;
                let n = module.file.line_count();
                if n == 0 {
                    assert!(plan.units.is_empty());
                    continue;
                }
                let spans = indivisible_spans(&module.file);
                // full coverage: units tile lines 1..=n contiguously
                let mut prev_end = 0usize;
                for (i, u) in plan.units.iter().enumerate() {
                    assert_eq!(u.index, i + 1, "{label}/{}: unit numbering", plan.name);
                    assert_eq!(
                        u.start_line,
                        prev_end + 1,
                        "{label}/{} cap {cap}: unit {} leaves a gap",
                        plan.name,
                        u.index
                    );
                    assert!(u.end_line >= u.start_line);
                    prev_end = u.end_line;
                    // cap respected, unless the unit is a single block that
                    // cannot be split
                    if u.line_count() > cap {
                        assert!(
                            spans.contains(&(u.start_line, u.end_line)),
                            "{label}/{} cap {cap}: oversized unit {}..{} is not one \
                             indivisible block",
                            plan.name,
                            u.start_line,
                            u.end_line
                        );
                    }
                    units_checked += 1;
                }
                assert_eq!(
                    prev_end, n,
                    "{label}/{} cap {cap}: units do not cover the module",
                    plan.name
                );
                // no indivisible block is split across units
                for &(s, e) in &spans {
                    assert!(
                        plan.units
                            .iter()
                            .any(|u| u.start_line <= s && e <= u.end_line),
                        "{label}/{} cap {cap}: block {s}..{e} split across units",
                        plan.name
                    );
                }
                // mutually recursive definitions end up in one unit; the
                // groups here are recomputed from raw elements, not from
                // the planner's own structures
                let file = &module.file;
                let defs: Vec<_> = file.elements.iter().filter(|e| !e.is_declaration).collect();
                let names: Vec<Vec<String>> =
                    defs.iter().map(|e| vec![e.name.clone()]).collect();
                let texts: Vec<&str> = defs
                    .iter()
                    .map(|e| {
                        let span = file.source.line_span(e.start_line, e.end_line);
                        &file.source.masked[span]
                    })
                    .collect();
                let refs = reference_edges(&names, &texts);
                let comps = tarjan(defs.len(), |v| refs.edges[v].iter().copied());
                for comp in comps.iter().filter(|c| c.len() >= 2) {
                    let lo = comp.iter().map(|&i| defs[i].start_line).min().unwrap();
                    let hi = comp.iter().map(|&i| defs[i].end_line).max().unwrap();
                    assert!(
                        plan.units
                            .iter()
                            .any(|u| u.start_line <= lo && hi <= u.end_line),
                        "{label}/{} cap {cap}: recursive group {lo}..{hi} split",
                        plan.name
                    );
                }
            }
        }
    }

    // determinism across a fresh scan of the same source
    let (_, pre_a) = load_preprocessed(&fixture("toy"));
    let (_, pre_b) = load_preprocessed(&fixture("toy"));
    assert_eq!(plan_modules(&pre_a.modules, 50), plan_modules(&pre_b.modules, 50));

    // exact shrink arithmetic for the probed caps, tolerance zero:
    //   trim an eighth, rounded down:  50->43  100->87  300->262  600->525  1200->1050
    //   halve, rounded half up, never below the floor of 30:
    //                                  50->30  100->50  300->150  600->300  1200->600
    let table = [
        (50usize, 43usize, 30usize),
        (100, 87, 50),
        (300, 262, 150),
        (600, 525, 300),
        (1200, 1050, 600),
    ];
    for (cap, trimmed, halved) in table {
        assert_eq!(
            shrink(cap, DEFAULT_FLOOR, ShrinkTrigger::Overflow),
            ShrinkOutcome::Shrunk(trimmed),
            "overflow shrink of {cap}"
        );
        assert_eq!(
            shrink(cap, DEFAULT_FLOOR, ShrinkTrigger::Stall),
            ShrinkOutcome::Shrunk(halved),
            "stall shrink of {cap}"
        );
    }
    // closed-form sweep and the refusal at the floor
    for cap in 30..=2000usize {
        let trimmed = cap * 7 / 8;
        let expected = if trimmed < 30 {
            ShrinkOutcome::FloorReached
        } else {
            ShrinkOutcome::Shrunk(trimmed)
        };
        assert_eq!(shrink(cap, 30, ShrinkTrigger::Overflow), expected);
        let halved = ((cap + 1) / 2).max(30);
        let expected = if halved >= cap {
            ShrinkOutcome::FloorReached
        } else {
            ShrinkOutcome::Shrunk(halved)
        };
        assert_eq!(shrink(cap, 30, ShrinkTrigger::Stall), expected);
    }
    assert_eq!(
        shrink(30, 30, ShrinkTrigger::Overflow),
        ShrinkOutcome::FloorReached
    );
    assert_eq!(
        shrink(30, 30, ShrinkTrigger::Stall),
        ShrinkOutcome::FloorReached
    );

    format!(
        "5 caps x {modules_checked} module plans: tiled, cap-respecting, \
         recursion-cohesive, deterministic ({units_checked} units); shrink table exact"
    )
}

// =========================================================================
// criterion 4: prompt budget safety
// =========================================================================

fn criterion_4() -> String {
    let templates = TemplateSet::default();
    let rules = RulesProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);

    let mut profiles: Vec<BackendProfile> = [
        "gpt-4o",
        "claude-3.5-sonnet",
        "gemini-1.5-pro",
        "llama-3-70b-instruct",
    ]
    .iter()
    .map(|n| builtin_profile(n).expect("builtin profile"))
    .collect();
    for i in 0..8 {
        let window = rng.gen_range(4_000..=400_000);
        let output = rng.gen_range(512..=(window / 2).min(8_192));
        profiles.push(BackendProfile::sized(&format!("synthetic-{i}"), window, output));
    }

    let mut accepted = 0usize;
    let mut rejected = 0usize;
    for case in 0..1000usize {
        let profile = &profiles[rng.gen_range(0..profiles.len())];
        let window = profile.context_window;
        let reserved = profile.output_limit;
        let memory = rng.gen_range(0..=window / 4);
        let budget = TokenBudget::new(window, reserved).with_memory(memory);

        let lines = rng.gen_range(1..=600usize);
        let mut code = String::new();
        for l in 0..lines {
            let width = rng.gen_range(8..=72usize);
            let mut line = format!("    x{l} = x{l} + y{l};");
            while line.len() < width {
                line.push(' ');
                line.push('z');
            }
            code.push_str(&line);
            code.push('\n');
        }
        let context = if rng.gen_bool(0.5) {
            "// defined in src/other/unit1.rs\npub fn helper() -> i32;\n"
        } else {
            ""
        };
        let unit = UnitId::new("synthetic", case + 1);
        match build_translation_prompt(&templates, &unit, &code, context, &rules, &budget) {
            Ok(env) => {
                accepted += 1;
                assert!(
                    env.est_tokens + reserved + memory <= window,
                    "case {case}: estimate {} + reserved {reserved} + memory {memory} \
                     exceeds the {window}-token window",
                    env.est_tokens
                );
                assert_eq!(env.est_tokens, estimate_tokens(&env.text));
            }
            Err(PromptError::BudgetExceeded { est, budget: b, .. }) => {
                rejected += 1;
                assert_eq!(
                    b,
                    window.saturating_sub(reserved).saturating_sub(memory),
                    "case {case}: rejection reports the wrong allowance"
                );
                assert!(est > b, "case {case}: rejected while within the allowance");
            }
        }
    }
    assert!(accepted > 0, "sampling never produced a fitting prompt");
    assert!(rejected > 0, "sampling never produced an overflowing prompt");

    // The 8,000-token window (2,048 reserved) must refuse dense units of
    // 500 lines and up: 500 lines x 61 bytes is already ~7,625 estimated
    // tokens before any template text, against an allowance of 5,952.
    let small = builtin_profile("llama-3-70b-instruct").unwrap();
    assert_eq!((small.context_window, small.output_limit), (8_000, 2_048));
    let budget = TokenBudget::new(small.context_window, small.output_limit);
    for lines in [500usize, 600, 800, 1200] {
        let mut code = String::new();
        for l in 0..lines {
            code.push_str(&format!("{:<60}\n", format!("    int dense_{l} = dense_{l} + 1;")));
        }
        let unit = UnitId::new("dense", lines);
        match build_translation_prompt(&templates, &unit, &code, "", &rules, &budget) {
            Err(PromptError::BudgetExceeded { .. }) => {}
            Ok(_) => panic!("a dense {lines}-line unit fit the 8,000-token window"),
        }
    }
    // ...while an ordinary 100-line unit still fits there.
    let mut code = String::new();
    for l in 0..100 {
        code.push_str(&format!("    int ok_{l} = {l};\n"));
    }
    build_translation_prompt(
        &templates,
        &UnitId::new("dense", 1),
        &code,
        "",
        &rules,
        &budget,
    )
    .expect("a 100-line unit fits the smallest window");

    format!(
        "1,000 random envelopes: prompt + memory + reserved never exceeds the window \
         ({accepted} fit, {rejected} rejected); the 8k window refuses 500+-line dense units"
    )
}

// =========================================================================
// criterion 5: end-to-end translate / repair / replay
// =========================================================================

/// Scripted conversation for the three-module toy project: beta's first
/// unit arrives with a bad import, gets repaired with a two-file patch
/// (code line plus a manifest append), and everything else is clean.
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
                // Answer split into out-of-order parts to keep multipart
                // reassembly in the exercised path.
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

fn criterion_5() -> String {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("recorded");
    let counters = Rc::new(RefCell::new(BTreeMap::new()));
    let profile = builtin_profile("claude-3.5-sonnet").unwrap();
    let mut backend = ScriptedBackend::new(profile, toy_script(counters.clone()));

    let mut config = RunConfig::new(fixture("toy"), &out1);
    config.cap = Some(30);
    let outcome = run_pipeline(&config, &mut backend).expect("recorded run");

    assert_eq!(outcome.aborted_units, 0);
    assert_eq!(outcome.report.modules.len(), 3, "expected three modules");
    assert_eq!(outcome.report.units_total, 6, "expected six units");
    assert_eq!(outcome.report.units_compiled, 6);
    assert_eq!(outcome.report.line_coverage, 1.0);
    assert_eq!(outcome.report.element_coverage, 1.0);
    assert_eq!(outcome.report.final_build_ok, Some(true));

    // the scripted failure really went through one repair round, and it was
    // classified as a module-resolution error
    {
        let c = counters.borrow();
        assert_eq!(c[&format!("{TRANSLATE_SCHEMA}:beta.1")], 1);
        assert_eq!(c[&format!("{REPAIR_SCHEMA}:beta.1")], 1);
    }
    assert!(
        outcome
            .report
            .error_histogram
            .get("Modules")
            .copied()
            .unwrap_or(0)
            >= 1,
        "the bad import never surfaced as a module-resolution error"
    );
    let patched = run_events(&out1, "patched");
    assert_eq!(patched.len(), 1);
    assert_eq!(
        patched[0]["files"],
        serde_json::json!(["Cargo.toml", "src/beta/unit1.rs"]),
        "the repair was expected to patch the unit file and the manifest"
    );

    // the produced workspace passes a real toolchain check on its own
    let check = check_workspace(&out1.join("rust"), Duration::from_secs(120)).expect("check");
    assert!(check.success, "final workspace fails its build:\n{}", check.raw_log);

    // replaying the recorded transcript twice reproduces the workspace
    // byte for byte, both against the original and against itself
    let mut snapshots = Vec::new();
    snapshots.push(source_snapshot(&out1.join("rust")));
    for round in 2..=3 {
        let out = tmp.path().join(format!("replay{round}"));
        let mut replay =
            ReplayBackend::load(&out1.join("transcript"), None).expect("load transcript");
        let mut config = RunConfig::new(fixture("toy"), &out);
        config.cap = Some(30);
        let outcome = run_pipeline(&config, &mut replay).expect("replay run");
        assert_eq!(outcome.aborted_units, 0);
        assert_eq!(outcome.report.line_coverage, 1.0);
        assert_eq!(outcome.report.element_coverage, 1.0);
        snapshots.push(source_snapshot(&out.join("rust")));
    }
    for (i, snap) in snapshots.iter().enumerate().skip(1) {
        assert_eq!(
            snapshots[0].keys().collect::<Vec<_>>(),
            snap.keys().collect::<Vec<_>>(),
            "run {} produced a different file set",
            i + 1
        );
        for (rel, bytes) in &snapshots[0] {
            assert_eq!(
                bytes,
                &snap[rel],
                "{rel} differs between run 1 and run {}",
                i + 1
            );
        }
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "the end-to-end scenario took {secs:.1}s; budget 60s");
    format!(
        "translate -> fail -> two-file repair -> success on 3 modules / 6 units; \
         coverage 1.000 / 1.000; two replays byte-identical; {secs:.1}s"
    )
}

// =========================================================================
// criterion 6: abort and stall handling
// =========================================================================

fn criterion_6() -> String {
    // (a) a unit whose repairs never compile aborts after the full default
    // allowance, and the rest of its module aborts with it
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("abort");
    let counters = Rc::new(RefCell::new(BTreeMap::new()));
    let counters_in = counters.clone();
    let attempt = Rc::new(RefCell::new(0usize));
    let attempt_in = attempt.clone();
    let profile = builtin_profile("claude-3.5-sonnet").unwrap();
    let mut backend = ScriptedBackend::new(profile.clone(), move |env: &PromptEnvelope| {
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
            (REPAIR_SCHEMA, "delta.1") => {
                // every repair stays broken, under a fresh name each time
                *attempt_in.borrow_mut() += 1;
                let n = *attempt_in.borrow();
                serde_json::json!({
                    "repairs": [{
                        "file": "src/delta/unit1.rs",
                        "start_line": 1,
                        "end_line": 1,
                        "replacement": format!("pub fn delta_one() -> i32 {{ still_missing_{n} }}")
                    }]
                })
                .to_string()
            }
            other => panic!("unexpected prompt: {other:?}"),
        };
        Ok(parts(&payload))
    });
    let mut config = RunConfig::new(fixture("solo"), &out_a);
    config.cap = Some(30);
    assert_eq!(
        config.max_repair_attempts, DEFAULT_MAX_REPAIR_ATTEMPTS,
        "the default repair allowance changed"
    );
    assert_eq!(DEFAULT_MAX_REPAIR_ATTEMPTS, 20);
    let outcome = run_pipeline(&config, &mut backend).expect("abort scenario");
    assert_eq!(outcome.aborted_units, 2);
    {
        let c = counters.borrow();
        assert_eq!(
            c[&format!("{REPAIR_SCHEMA}:delta.1")],
            20,
            "the unit did not get its full 20 repair attempts"
        );
        assert!(
            !c.contains_key(&format!("{TRANSLATE_SCHEMA}:delta.2")),
            "the poisoned second unit was still translated"
        );
    }
    let aborts = run_events(&out_a, "abort");
    assert_eq!(aborts.len(), 2);
    assert_eq!(aborts[0]["unit"], "delta.1");
    assert_eq!(aborts[0]["propagated"], false);
    assert_eq!(aborts[1]["unit"], "delta.2");
    assert_eq!(aborts[1]["propagated"], true);
    let plan: PlanFile =
        serde_json::from_str(&fs::read_to_string(out_a.join("plan.json")).unwrap()).unwrap();
    assert!(plan.statuses.values().all(|s| *s == UnitStatus::Aborted));

    // (b) ten consecutive unit failures trigger exactly one halving of
    // the cap, recorded in the plan's history
    let project = tmp.path().join("many");
    fs::create_dir_all(&project).unwrap();
    for i in 1..=12 {
        fs::write(
            project.join(format!("m{i:02}.c")),
            format!("int m{i:02}_f(void) {{ return {i}; }}\n"),
        )
        .unwrap();
    }
    let out_b = tmp.path().join("stall");
    let mut backend = ScriptedBackend::new(profile, |_env: &PromptEnvelope| {
        Ok(parts("this is not json"))
    });
    let mut config = RunConfig::new(&project, &out_b);
    config.cap = Some(100);
    config.max_format_retries = 1;
    let outcome = run_pipeline(&config, &mut backend).expect("stall scenario");
    assert_eq!(outcome.aborted_units, 12);
    let plan: PlanFile =
        serde_json::from_str(&fs::read_to_string(out_b.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan.cap_lines, 50, "cap should have halved from 100 to 50");
    assert_eq!(plan.history.len(), 2, "expected exactly one shrink event");
    assert_eq!((plan.history[0].cap, plan.history[0].trigger.as_str()), (100, "initial"));
    assert_eq!((plan.history[1].cap, plan.history[1].trigger.as_str()), (50, "stall"));
    let shrinks = run_events(&out_b, "shrink");
    assert_eq!(shrinks.len(), 1);
    assert_eq!(shrinks[0]["trigger"], "stall");

    "20 failed repairs abort the unit and poison its module; the tenth consecutive \
     failure halves the cap 100 -> 50 exactly once"
        .to_string()
}

// =========================================================================
// criterion 7: patch engine
// =========================================================================

fn repl_line_count(replacement: &str) -> usize {
    if replacement.is_empty() {
        return 0;
    }
    replacement
        .strip_suffix('\n')
        .unwrap_or(replacement)
        .split('\n')
        .count()
}

/// Sequential oracle: walk the document top to bottom, splicing each patch
/// in ascending order. Deliberately structured differently from the engine,
/// which applies patches bottom-up.
fn oracle_apply(lines: &[String], patches: &[PatchSpec]) -> String {
    let len = lines.len();
    let by_start: BTreeMap<usize, &PatchSpec> =
        patches.iter().map(|p| (p.start_line, p)).collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 1usize;
    while i <= len {
        if let Some(p) = by_start.get(&i) {
            if !p.replacement.is_empty() {
                let body = p.replacement.strip_suffix('\n').unwrap_or(&p.replacement);
                out.extend(body.split('\n').map(str::to_string));
            }
            i = p.end_line + 1;
        } else {
            out.push(lines[i - 1].clone());
            i += 1;
        }
    }
    if let Some(p) = by_start.get(&(len + 1)) {
        if !p.replacement.is_empty() {
            let body = p.replacement.strip_suffix('\n').unwrap_or(&p.replacement);
            out.extend(body.split('\n').map(str::to_string));
        }
    }
    if out.is_empty() {
        String::new()
    } else {
        out.join("\n") + "\n"
    }
}

fn criterion_7() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    for case in 0..1000usize {
        let len = rng.gen_range(0..=40usize);
        let lines: Vec<String> = (0..len)
            .map(|i| format!("line {i} token{}", rng.gen_range(0..1000)))
            .collect();
        let text = if len == 0 {
            String::new()
        } else {
            lines.join("\n") + "\n"
        };

        // disjoint ranges walked left to right, with an optional append
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        let mut pos = 1usize;
        while pos <= len && ranges.len() < 5 {
            let start = pos + rng.gen_range(0..3);
            if start > len {
                break;
            }
            let span = rng.gen_range(1..=3.min(len - start + 1));
            ranges.push((start, start + span - 1));
            pos = start + span + rng.gen_range(0..2);
        }
        if ranges.is_empty() || rng.gen_bool(0.3) {
            ranges.push((len + 1, len + 1));
        }
        let mut patches: Vec<PatchSpec> = ranges
            .iter()
            .map(|&(s, e)| {
                let n = rng.gen_range(0..=3);
                let replacement = (0..n)
                    .map(|k| format!("new {case} {s} {k}"))
                    .collect::<Vec<_>>()
                    .join("\n");
                PatchSpec {
                    file: "src/file.rs".to_string(),
                    start_line: s,
                    end_line: e,
                    replacement,
                }
            })
            .collect();
        patches.shuffle(&mut rng);

        let out = apply_patches(&text, &patches)
            .unwrap_or_else(|e| panic!("case {case}: valid patch set rejected: {e}"));
        let mut ascending = patches.clone();
        ascending.sort_by_key(|p| p.start_line);
        assert_eq!(
            out,
            oracle_apply(&lines, &ascending),
            "case {case}: engine output differs from the sequential oracle"
        );
        // exact line accounting: new length = old + sum(replacement - span)
        let delta: i64 = ascending
            .iter()
            .map(|p| {
                let removed = if p.start_line == len + 1 {
                    0
                } else {
                    (p.end_line - p.start_line + 1) as i64
                };
                repl_line_count(&p.replacement) as i64 - removed
            })
            .sum();
        assert_eq!(
            out.lines().count() as i64,
            len as i64 + delta,
            "case {case}: line accounting identity violated"
        );
    }

    // malformed sets must be rejected: out of range both ways, inverted,
    // and overlapping
    let mut rejected = 0usize;
    for case in 0..200usize {
        let len = rng.gen_range(3..=20usize);
        let lines: Vec<String> = (0..len).map(|i| format!("line {i}")).collect();
        let text = lines.join("\n") + "\n";
        let mk = |s: usize, e: usize| PatchSpec {
            file: "src/file.rs".to_string(),
            start_line: s,
            end_line: e,
            replacement: "x".to_string(),
        };
        let bad = match case % 4 {
            0 => vec![mk(1, len + 1 + rng.gen_range(0..5))],
            1 => vec![mk(0, 1)],
            2 => {
                let s = rng.gen_range(2..=len);
                vec![mk(s, s - 1)]
            }
            _ => vec![mk(1, 2), mk(2, 3)],
        };
        assert!(
            apply_patches(&text, &bad).is_err(),
            "case {case}: malformed patch set {:?} was accepted",
            bad.iter().map(|p| (p.start_line, p.end_line)).collect::<Vec<_>>()
        );
        rejected += 1;
    }

    format!(
        "1,000 random patch sets match the sequential oracle with exact line \
         accounting; {rejected} malformed sets rejected"
    )
}

// =========================================================================
// criterion 8: error classification
// =========================================================================

fn criterion_8() -> String {
    // one fixture per category; each produces only diagnostics of its
    // intended category
    let expected: [(&str, ErrorCategory); 10] = [
        ("attributes.rs", ErrorCategory::Attributes),
        ("constants.rs", ErrorCategory::Constants),
        ("generics.rs", ErrorCategory::Generics),
        ("lifetimes.rs", ErrorCategory::Lifetime),
        ("modules.rs", ErrorCategory::Modules),
        ("name_resolution.rs", ErrorCategory::NameResolution),
        ("ownership.rs", ErrorCategory::Ownership),
        ("syntax.rs", ErrorCategory::Syntax),
        ("traits.rs", ErrorCategory::Traits),
        ("types.rs", ErrorCategory::Type),
    ];
    // the two flagship code mappings, pinned
    assert_eq!(classify_code(Some("E0432")).0, ErrorCategory::Modules);
    assert_eq!(classify_code(Some("E0425")).0, ErrorCategory::NameResolution);

    let tmp = tempfile::tempdir().unwrap();
    let mut seen: BTreeSet<&'static str> = BTreeSet::new();
    let mut total_diags = 0usize;
    let mut total_histogram = 0usize;
    for (i, (file, category)) in expected.iter().enumerate() {
        let ws = tmp.path().join(format!("ws{i}"));
        fs::create_dir_all(ws.join("src")).unwrap();
        fs::write(
            ws.join("Cargo.toml"),
            format!(
                "[package]\nname = \"broken{i}\"\nversion = \"0.1.0\"\nedition = \"2021\"\n\n[workspace]\n"
            ),
        )
        .unwrap();
        fs::copy(fixture("broken").join(file), ws.join("src/lib.rs")).unwrap();

        let outcome = check_workspace(&ws, Duration::from_secs(120)).expect("cargo runs");
        assert!(!outcome.success, "{file}: fixture unexpectedly compiles");
        assert!(
            !outcome.errors.is_empty(),
            "{file}: no error diagnostics captured"
        );
        for d in &outcome.errors {
            assert_eq!(
                d.category,
                *category,
                "{file}: diagnostic {:?} landed in {} instead of {}",
                d.code,
                d.category.display_name(),
                category.display_name()
            );
        }
        let histogram = categorize(&outcome.errors);
        assert_eq!(histogram.len(), 1, "{file}: more than one category");
        assert_eq!(
            histogram.get(category).copied().unwrap_or(0),
            outcome.errors.len(),
            "{file}: histogram total differs from the diagnostic count"
        );
        total_diags += outcome.errors.len();
        total_histogram += histogram.values().sum::<usize>();
        seen.insert(category.display_name());
    }
    assert_eq!(
        seen.len(),
        ErrorCategory::all().len(),
        "not every category was exercised"
    );
    assert_eq!(total_histogram, total_diags);
    format!(
        "10 fixtures, one per category: every diagnostic in its intended bucket; \
         histogram totals match all {total_diags} diagnostics"
    )
}

// =========================================================================
// criterion 9: coverage arithmetic
// =========================================================================

fn unit(index: usize, start_line: usize, end_line: usize) -> UnitPlan {
    UnitPlan {
        index,
        start_line,
        end_line,
    }
}

fn mapped_record(module: &str, name: &str, unit: usize) -> ElementRecord {
    let mut r = ElementRecord::new(module, name, ElementKind::Function);
    r.unit = Some(unit);
    r.rust_name = Some(name.to_string());
    r.rust_file = Some(format!("src/{module}/unit{unit}.rs"));
    r
}

fn criterion_9() -> String {
    // A: two of four equal 10-line units compiled -> exactly one half
    let plan = ModulePlan {
        name: "m".to_string(),
        units: (1..=4).map(|i| unit(i, (i - 1) * 10 + 1, i * 10)).collect(),
    };
    let mut statuses = BTreeMap::new();
    statuses.insert(UnitId::new("m", 1).to_string(), UnitStatus::Compiled);
    statuses.insert(UnitId::new("m", 2).to_string(), UnitStatus::Compiled);
    statuses.insert(UnitId::new("m", 3).to_string(), UnitStatus::Aborted);
    statuses.insert(UnitId::new("m", 4).to_string(), UnitStatus::Aborted);
    let mut store = MetadataStore::new();
    for i in 1..=4 {
        store.elements.push(mapped_record("m", &format!("f{i}"), i));
    }
    let histogram = BTreeMap::from([(ErrorCategory::Modules, 3usize)]);
    let report = compute_coverage(
        std::slice::from_ref(&plan),
        &statuses,
        &store,
        &histogram,
        Some(false),
    );
    assert_eq!((report.lines_total, report.lines_compiled), (40, 20));
    assert_eq!(report.line_coverage, 0.5, "20 of 40 lines must be exactly one half");
    assert_eq!((report.elements_total, report.elements_mapped), (4, 2));
    assert_eq!(report.element_coverage, 0.5, "2 of 4 elements must be exactly one half");
    assert_eq!(
        (report.units_total, report.units_compiled, report.units_aborted),
        (4, 2, 2)
    );
    assert_eq!(report.error_histogram.get("Modules"), Some(&3));
    assert_eq!(report.final_build_ok, Some(false));
    assert_eq!(report.modules[0].line_coverage, 0.5);
    assert_eq!(report.modules[0].element_coverage, 0.5);

    // B: uneven units -> the exact rational 7/20, compared against the
    // same division, so any drift in the arithmetic fails
    let plan_b = ModulePlan {
        name: "m2".to_string(),
        units: vec![unit(1, 1, 7), unit(2, 8, 20)],
    };
    let mut statuses_b = BTreeMap::new();
    statuses_b.insert(UnitId::new("m2", 1).to_string(), UnitStatus::Compiled);
    let report_b = compute_coverage(
        std::slice::from_ref(&plan_b),
        &statuses_b,
        &MetadataStore::new(),
        &BTreeMap::new(),
        None,
    );
    assert_eq!((report_b.lines_total, report_b.lines_compiled), (20, 7));
    assert_eq!(report_b.line_coverage, 7.0 / 20.0);
    assert_eq!(report_b.modules[0].line_coverage, 7.0 / 20.0);
    // no element records at all -> a full score, not a crash
    assert_eq!(report_b.element_coverage, 1.0);

    // C: removed, unpaired, unplaced, and aborted-unit records all count
    // against element coverage: exactly 1 of 5 counts
    let plan_c = ModulePlan {
        name: "m3".to_string(),
        units: vec![unit(1, 1, 5), unit(2, 6, 10)],
    };
    let mut statuses_c = BTreeMap::new();
    statuses_c.insert(UnitId::new("m3", 1).to_string(), UnitStatus::Compiled);
    statuses_c.insert(UnitId::new("m3", 2).to_string(), UnitStatus::Aborted);
    let mut store_c = MetadataStore::new();
    store_c.elements.push(mapped_record("m3", "kept", 1));
    let mut tombstone = mapped_record("m3", "dropped", 1);
    tombstone.removed = true;
    store_c.elements.push(tombstone);
    let mut unpaired = ElementRecord::new("m3", "unpaired", ElementKind::Function);
    unpaired.unit = Some(1);
    store_c.elements.push(unpaired);
    let mut homeless = mapped_record("m3", "homeless", 1);
    homeless.unit = None;
    store_c.elements.push(homeless);
    store_c.elements.push(mapped_record("m3", "aborted", 2));
    let report_c = compute_coverage(
        std::slice::from_ref(&plan_c),
        &statuses_c,
        &store_c,
        &BTreeMap::new(),
        Some(true),
    );
    assert_eq!((report_c.elements_total, report_c.elements_mapped), (5, 1));
    assert_eq!(report_c.element_coverage, 1.0 / 5.0);
    assert_eq!(report_c.line_coverage, 0.5, "5 of 10 lines");

    // D: an empty plan divides nothing by nothing and reports full scores
    let empty = compute_coverage(&[], &BTreeMap::new(), &MetadataStore::new(), &BTreeMap::new(), None);
    assert_eq!(empty.line_coverage, 1.0);
    assert_eq!(empty.element_coverage, 1.0);
    assert_eq!(empty.final_build_ok, None);

    "synthetic stores reproduce exact ratios: 2 of 4 -> 0.500, 7 of 20 lines, \
     1 of 5 elements with tombstones counted against"
        .to_string()
}

// =========================================================================
// runner
// =========================================================================

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panicked without a message".to_string()
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(usize, &str, fn() -> String); 9] = [
        (1, "element-scan fidelity", criterion_1),
        (2, "preprocessing invariants", criterion_2),
        (3, "segmentation invariants", criterion_3),
        (4, "prompt budget safety", criterion_4),
        (5, "end-to-end replay", criterion_5),
        (6, "abort and stall handling", criterion_6),
        (7, "patch engine", criterion_7),
        (8, "error classification", criterion_8),
        (9, "coverage arithmetic", criterion_9),
    ];
    let mut failures = Vec::new();
    for (n, label, body) in criteria {
        let started = Instant::now();
        let result = std::thread::Builder::new()
            .name(format!("criterion-{n}"))
            .stack_size(8 * 1024 * 1024)
            .spawn(body)
            .expect("spawn criterion thread")
            .join();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({label}): PASS — {detail} [{secs:.1}s]"),
            Err(payload) => {
                let msg = panic_text(payload);
                println!("criterion {n} ({label}): FAIL — {msg} [{secs:.1}s]");
                failures.push(format!("criterion {n} ({label}): {msg}"));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "{} of 9 acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}
