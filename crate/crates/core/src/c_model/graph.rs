//! Graphs over the scanned model: the include graph used for merging and
//! the name-reference graphs used for reordering and module sequencing.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::text;

use super::{CProject, ElemRef, ElementKind};

/// A resolved quoted include: `from` includes `to` at `line`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncludeEdge {
    pub from: usize,
    pub to: usize,
    pub line: usize,
}

/// A quoted include whose target is not in the project or on the search
/// path. Recorded, not fatal: the directive is kept verbatim so the
/// eventual Rust build surfaces the gap instead of this tool guessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingInclude {
    pub from: usize,
    pub target: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IncludeGraph {
    pub edges: Vec<IncludeEdge>,
    /// `(file, header)` pairs for `<...>` includes.
    pub system: Vec<(usize, String)>,
    pub missing: Vec<MissingInclude>,
}

impl IncludeGraph {
    pub fn includes_of(&self, file: usize) -> impl Iterator<Item = &IncludeEdge> {
        self.edges.iter().filter(move |e| e.from == file)
    }

    /// Directed cycles among quoted includes, as file-index lists. Merging
    /// still terminates on cyclic projects (each file is inlined once per
    /// module), but a cycle is worth surfacing to the user.
    pub fn cycles(&self, file_count: usize) -> Vec<Vec<usize>> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); file_count];
        for e in &self.edges {
            adj[e.from].push(e.to);
        }
        tarjan(file_count, |v| adj[v].iter().copied())
            .into_iter()
            .filter(|scc| {
                scc.len() > 1 || adj[scc[0]].contains(&scc[0])
            })
            .collect()
    }
}

/// Resolve quoted includes: the including file's directory first, then the
/// project root, then the configured include directories.
pub fn build_include_graph(project: &CProject, include_dirs: &[PathBuf]) -> IncludeGraph {
    let by_path: HashMap<&Path, usize> = project
        .files
        .iter()
        .enumerate()
        .map(|(i, f)| (f.path.as_path(), i))
        .collect();

    let mut graph = IncludeGraph::default();
    for (fi, file) in project.files.iter().enumerate() {
        let parent = file.path.parent().unwrap_or(Path::new(""));
        for inc in &file.includes {
            if !inc.quoted {
                graph.system.push((fi, inc.target.clone()));
                continue;
            }
            let target = Path::new(&inc.target);
            let candidates = std::iter::once(normalize(&parent.join(target)))
                .chain(std::iter::once(normalize(target)))
                .chain(include_dirs.iter().map(|d| normalize(&d.join(target))));
            let mut found = None;
            for cand in candidates {
                if let Some(&to) = by_path.get(cand.as_path()) {
                    found = Some(to);
                    break;
                }
            }
            match found {
                Some(to) => graph.edges.push(IncludeEdge { from: fi, to, line: inc.line }),
                None => graph.missing.push(MissingInclude {
                    from: fi,
                    target: inc.target.clone(),
                    line: inc.line,
                }),
            }
        }
    }
    graph
}

/// Resolve `.` and `..` segments without touching the filesystem, so lookup
/// keys match the scanned relative paths.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in p.components() {
        match comp {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

/// Call graph over functions and function-like macros.
#[derive(Debug, Clone, Default)]
pub struct CallGraph {
    pub nodes: Vec<ElemRef>,
    /// Adjacency by node index: `edges[i]` lists callee node indices.
    pub edges: Vec<Vec<usize>>,
}

impl CallGraph {
    pub fn node_index(&self, r: ElemRef) -> Option<usize> {
        self.nodes.iter().position(|&n| n == r)
    }

    /// Strongly connected components, each a list of node indices in
    /// source order.
    pub fn sccs(&self) -> Vec<Vec<usize>> {
        let mut sccs = tarjan(self.nodes.len(), |v| self.edges[v].iter().copied());
        for scc in &mut sccs {
            scc.sort();
        }
        sccs
    }
}

/// Build the project call graph: an edge A -> B whenever the text of A
/// mentions B's name as a whole token. Taking the address of a function
/// counts — the translation needs the callee either way.
pub fn build_call_graph(project: &CProject) -> CallGraph {
    let mut nodes = Vec::new();
    for (fi, file) in project.files.iter().enumerate() {
        for (ei, el) in file.elements.iter().enumerate() {
            if el.is_declaration {
                continue;
            }
            if matches!(el.kind, ElementKind::Function | ElementKind::MacroFunction) {
                nodes.push(ElemRef { file: fi, element: ei });
            }
        }
    }

    let mut by_name: HashMap<&str, Vec<usize>> = HashMap::new();
    for (ni, r) in nodes.iter().enumerate() {
        let name = project.files[r.file].elements[r.element].name.as_str();
        by_name.entry(name).or_default().push(ni);
    }

    let mut edges = vec![Vec::new(); nodes.len()];
    for (ni, r) in nodes.iter().enumerate() {
        let file = &project.files[r.file];
        let el = &file.elements[r.element];
        let span = file.source.line_span(el.start_line, el.end_line);
        let masked = &file.source.masked[span];
        let mut seen = HashSet::new();
        for (_, ident) in text::identifiers(masked) {
            if ident == el.name {
                continue;
            }
            if let Some(callees) = by_name.get(ident) {
                for &c in callees {
                    if c != ni && seen.insert(c) {
                        edges[ni].push(c);
                    }
                }
            }
        }
    }
    CallGraph { nodes, edges }
}

/// Name references among an arbitrary set of spans in one file.
///
/// `RefGraph.edges[i]` lists the indices of spans whose *name set* is
/// mentioned inside span `i`'s masked text. Used by the reorderer, where
/// the spans are reorder atoms.
#[derive(Debug, Clone, Default)]
pub struct RefGraph {
    pub edges: Vec<Vec<usize>>,
}

/// `names[i]` is the set of names span `i` defines; `texts[i]` its masked
/// text. The defining occurrence of a span's own names is skipped.
pub fn reference_edges(names: &[Vec<String>], texts: &[&str]) -> RefGraph {
    let mut by_name: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, ns) in names.iter().enumerate() {
        for n in ns {
            by_name.entry(n.as_str()).or_default().push(i);
        }
    }
    let mut edges = vec![Vec::new(); names.len()];
    for (i, text_i) in texts.iter().enumerate() {
        let own: HashSet<&str> = names[i].iter().map(|s| s.as_str()).collect();
        let mut seen = HashSet::new();
        for (_, ident) in text::identifiers(text_i) {
            if own.contains(ident) {
                continue;
            }
            if let Some(defs) = by_name.get(ident) {
                for &d in defs {
                    if d != i && seen.insert(d) {
                        edges[i].push(d);
                    }
                }
            }
        }
    }
    RefGraph { edges }
}

/// Tarjan's strongly-connected-components algorithm, iterative so deep
/// call chains can't overflow the stack. Components come out in reverse
/// topological order; callers mostly care about membership.
pub fn tarjan<I>(n: usize, neighbors: impl Fn(usize) -> I) -> Vec<Vec<usize>>
where
    I: Iterator<Item = usize>,
{
    #[derive(Clone, Copy)]
    struct NodeState {
        index: usize,
        lowlink: usize,
        on_stack: bool,
        visited: bool,
    }
    let mut state = vec![
        NodeState { index: 0, lowlink: 0, on_stack: false, visited: false };
        n
    ];
    let mut next_index = 0usize;
    let mut stack = Vec::new();
    let mut sccs = Vec::new();

    for root in 0..n {
        if state[root].visited {
            continue;
        }
        // (node, neighbor list, cursor) work stack.
        let mut work: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        state[root] =
            NodeState { index: next_index, lowlink: next_index, on_stack: true, visited: true };
        next_index += 1;
        stack.push(root);
        work.push((root, neighbors(root).collect(), 0));

        while !work.is_empty() {
            let top = work.last_mut().unwrap();
            let v = top.0;
            if top.2 < top.1.len() {
                let w = top.1[top.2];
                top.2 += 1;
                if !state[w].visited {
                    state[w] = NodeState {
                        index: next_index,
                        lowlink: next_index,
                        on_stack: true,
                        visited: true,
                    };
                    next_index += 1;
                    stack.push(w);
                    work.push((w, neighbors(w).collect(), 0));
                } else if state[w].on_stack {
                    state[v].lowlink = state[v].lowlink.min(state[w].index);
                }
            } else {
                work.pop();
                if let Some(parent) = work.last() {
                    let p = parent.0;
                    state[p].lowlink = state[p].lowlink.min(state[v].lowlink);
                }
                if state[v].lowlink == state[v].index {
                    let mut comp = Vec::new();
                    while let Some(w) = stack.pop() {
                        state[w].on_stack = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.reverse();
                    sccs.push(comp);
                }
            }
        }
    }
    sccs
}
