//! Translation-unit planning: slice each preprocessed module into line
//! ranges the backend can digest, and shrink the slice size when it can't.
//!
//! Units pack whole atoms (see [`crate::preprocess::module_atoms`]) up to a
//! line cap, so an element is never cut mid-definition, and atoms that
//! reference each other in a cycle are fused first so one unit always holds
//! a whole mutually recursive group. A span larger than the cap gets a unit
//! of its own — the cap bounds packing, not reality. Together the units of
//! a module tile its text exactly.

use serde::{Deserialize, Serialize};

use crate::c_model::{self, reference_edges, CFile};
use crate::preprocess::{module_atoms, MergedModule};

/// Line cap sizing: half the context window at a guessed 15 tokens per
/// line, clamped by the user-configured maximum when one is given.
pub fn initial_cap(cap_max: Option<usize>, context_window: usize) -> usize {
    let derived = context_window / 30;
    match cap_max {
        Some(m) => m.min(derived),
        None => derived,
    }
    .max(1)
}

/// Smallest cap the resize policy will go to.
pub const DEFAULT_FLOOR: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkTrigger {
    /// A unit's prompt blew the token budget: trim an eighth off.
    Overflow,
    /// Repair attempts keep failing across units: roughly halve.
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkOutcome {
    Shrunk(usize),
    /// The policy refuses to go lower; the caller aborts instead.
    FloorReached,
}

/// Apply one shrink step to `cap`.
pub fn shrink(cap: usize, floor: usize, trigger: ShrinkTrigger) -> ShrinkOutcome {
    match trigger {
        ShrinkTrigger::Overflow => {
            let new = cap * 7 / 8;
            if new < floor {
                ShrinkOutcome::FloorReached
            } else {
                ShrinkOutcome::Shrunk(new)
            }
        }
        ShrinkTrigger::Stall => {
            let candidate = (cap + 1) / 2;
            let new = candidate.max(floor);
            if new >= cap {
                ShrinkOutcome::FloorReached
            } else {
                ShrinkOutcome::Shrunk(new)
            }
        }
    }
}

/// Identity of a translation unit: module name plus 1-based ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub module: String,
    pub ordinal: usize,
}

impl UnitId {
    pub fn new(module: &str, ordinal: usize) -> Self {
        UnitId {
            module: module.to_string(),
            ordinal,
        }
    }
}

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.module, self.ordinal)
    }
}

/// One planned translation unit: 1-based inclusive lines of its module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlan {
    /// 1-based ordinal within the module; names the output file.
    pub index: usize,
    pub start_line: usize,
    pub end_line: usize,
}

impl UnitPlan {
    pub fn line_count(&self) -> usize {
        self.end_line - self.start_line + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub name: String,
    pub units: Vec<UnitPlan>,
}

/// One entry in the cap history. The first is always the initial cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapEvent {
    pub cap: usize,
    pub trigger: String,
}

/// The full segmentation plan, written to `plan.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub cap_lines: usize,
    pub floor: usize,
    pub history: Vec<CapEvent>,
    pub modules: Vec<ModulePlan>,
}

/// Greedy atom packing from `from_line` (1-based) to the end of the module,
/// numbering units starting at `first_index`.
pub fn plan_module_from(
    file: &CFile,
    name: &str,
    cap: usize,
    from_line: usize,
    first_index: usize,
) -> ModulePlan {
    let mut units = Vec::new();
    let mut index = first_index;
    let mut current: Option<(usize, usize)> = None;

    for &(start, end) in indivisible_spans(file)
        .iter()
        .filter(|&&(s, _)| s >= from_line)
    {
        let len = end - start + 1;
        match current {
            Some((s, e)) if (e - s + 1) + len <= cap => {
                current = Some((s, end));
            }
            Some((s, e)) => {
                units.push(UnitPlan { index, start_line: s, end_line: e });
                index += 1;
                current = Some((start, end));
            }
            None => {
                current = Some((start, end));
            }
        }
    }
    if let Some((s, e)) = current {
        units.push(UnitPlan { index, start_line: s, end_line: e });
    }
    ModulePlan { name: name.to_string(), units }
}

/// The spans a unit may never cut: atoms, with mutually referencing groups
/// fused so a whole reference cycle always lands in one unit. Overlapping
/// group spans are unioned, so the result is sorted, disjoint, and tiles
/// the same lines the atoms do.
pub fn indivisible_spans(file: &CFile) -> Vec<(usize, usize)> {
    let atoms = module_atoms(file);
    if atoms.is_empty() {
        return Vec::new();
    }
    let names: Vec<Vec<String>> = atoms.iter().map(|a| a.names.clone()).collect();
    let texts: Vec<&str> = atoms
        .iter()
        .map(|a| {
            let span = file.source.line_span(a.start_line, a.end_line);
            &file.source.masked[span]
        })
        .collect();
    let refs = reference_edges(&names, &texts);
    let sccs = c_model::tarjan(atoms.len(), |v| refs.edges[v].iter().copied());

    let mut spans: Vec<(usize, usize)> = sccs
        .iter()
        .map(|scc| {
            let s = scc.iter().map(|&a| atoms[a].start_line).min().unwrap();
            let e = scc.iter().map(|&a| atoms[a].end_line).max().unwrap();
            (s, e)
        })
        .collect();
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// Plan a whole module from its first line.
pub fn plan_module(file: &CFile, name: &str, cap: usize) -> ModulePlan {
    plan_module_from(file, name, cap, 1, 1)
}

/// Plan every module of a preprocessed project at one cap.
pub fn plan_modules(modules: &[MergedModule], cap: usize) -> Vec<ModulePlan> {
    modules.iter().map(|m| plan_module(&m.file, &m.name, cap)).collect()
}

/// Cap state plus its event history. The stall/abort counters live with the
/// orchestrator; this only owns the number and how it shrinks.
#[derive(Debug, Clone)]
pub struct Resizer {
    cap: usize,
    floor: usize,
    history: Vec<CapEvent>,
}

impl Resizer {
    pub fn new(initial: usize, floor: usize) -> Self {
        Resizer {
            cap: initial,
            floor,
            history: vec![CapEvent { cap: initial, trigger: "initial".to_string() }],
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn floor(&self) -> usize {
        self.floor
    }

    pub fn history(&self) -> &[CapEvent] {
        &self.history
    }

    /// Try to shrink; on success the new cap is recorded and returned.
    pub fn try_shrink(&mut self, trigger: ShrinkTrigger) -> ShrinkOutcome {
        let outcome = shrink(self.cap, self.floor, trigger);
        if let ShrinkOutcome::Shrunk(new) = outcome {
            self.cap = new;
            let label = match trigger {
                ShrinkTrigger::Overflow => "overflow",
                ShrinkTrigger::Stall => "stall",
            };
            self.history.push(CapEvent { cap: new, trigger: label.to_string() });
        }
        outcome
    }
}
