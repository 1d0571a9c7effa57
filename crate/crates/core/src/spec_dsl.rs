//! The `.cgpp` topology language.
//!
//! One directive per line; `//` starts a comment. Sections appear in this
//! order, each exactly once:
//!
//! ```text
//! const cores = 4
//! const clusters = 2
//! @emit 192.168.1.176
//! source mandelbrot args [5600, 1000]
//! @cluster clusters
//! workers cores
//! @collect
//! sink mandelbrot
//! ```
//!
//! Either binding may be followed by `hooks <init> <create|collect> <function|finalise>`
//! naming the workload's hook roles; they are checked against the workload.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::topology::parse_ipv4;
use crate::workload::Registry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub host_ip: Ipv4Addr,
    pub clusters: u32,
    pub workers_per_node: u32,
    pub source: SourceBinding,
    pub sink: SinkBinding,
    pub constants: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBinding {
    pub workload: String,
    pub init_args: Vec<i64>,
    /// init / create / function
    pub hooks: Option<[String; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkBinding {
    pub workload: String,
    /// init / collect / finalise
    pub hooks: Option<[String; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Emit,
    Cluster,
    Collect,
}

impl Section {
    fn keyword(self) -> &'static str {
        match self {
            Section::Emit => "@emit",
            Section::Cluster => "@cluster",
            Section::Collect => "@collect",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecErrorKind {
    #[error("missing section {0}")]
    MissingSection(Section),
    #[error("out of order: {0}")]
    BadOrder(String),
    #[error("unknown constant {0:?}")]
    UnknownConstant(String),
    #[error("bad host address {0:?}")]
    BadHostIp(String),
    #[error("missing `{directive}` directive in {section}")]
    MissingDirective { section: Section, directive: &'static str },
    #[error("syntax error: {0}")]
    BadSyntax(String),
    #[error("bad value: {0}")]
    BadValue(String),
}

/// A parse diagnostic pinned to a 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct SpecError {
    pub line: usize,
    pub kind: SpecErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("unknown workload {0:?}")]
    UnknownWorkload(String),
    #[error("workload {workload:?} expects {expected} init arguments, got {found}")]
    ArityMismatch { workload: String, expected: usize, found: usize },
    #[error("workload {workload:?} has no {role} hook named {name:?} (expected {expected:?})")]
    HookMismatch { workload: String, role: &'static str, name: String, expected: String },
}

fn err<T>(line: usize, kind: SpecErrorKind) -> Result<T, SpecError> {
    Err(SpecError { line, kind })
}

struct Line<'a> {
    number: usize,
    words: Vec<&'a str>,
    text: &'a str,
}

fn significant_lines(text: &str) -> Vec<Line<'_>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let body = raw.split_once("//").map_or(raw, |(b, _)| b).trim();
            (!body.is_empty()).then(|| Line {
                number: i + 1,
                words: body.split_whitespace().collect(),
                text: body,
            })
        })
        .collect()
}

fn section_of(word: &str) -> Option<Section> {
    match word {
        "@emit" => Some(Section::Emit),
        "@cluster" => Some(Section::Cluster),
        "@collect" => Some(Section::Collect),
        _ => None,
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_int(s: &str) -> Option<i64> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn resolve(line: usize, token: &str, constants: &BTreeMap<String, i64>) -> Result<i64, SpecError> {
    if let Some(v) = parse_int(token) {
        return Ok(v);
    }
    if !is_identifier(token) {
        return err(line, SpecErrorKind::BadSyntax(format!("expected integer or constant, found {token:?}")));
    }
    match constants.get(token) {
        Some(v) => Ok(*v),
        None => err(line, SpecErrorKind::UnknownConstant(token.to_string())),
    }
}

fn positive(line: usize, what: &str, v: i64) -> Result<u32, SpecError> {
    match u32::try_from(v) {
        Ok(n) if n >= 1 => Ok(n),
        _ => err(line, SpecErrorKind::BadValue(format!("{what} must be a positive integer, got {v}"))),
    }
}

fn single_arg<'a>(l: &Line<'a>, directive: &str) -> Result<&'a str, SpecError> {
    match l.words.as_slice() {
        [_, arg] => Ok(arg),
        _ => err(l.number, SpecErrorKind::BadSyntax(format!("`{directive}` takes exactly one argument"))),
    }
}

fn hooks_of(l: &Line<'_>) -> Result<[String; 3], SpecError> {
    match l.words.as_slice() {
        [_, a, b, c] if [a, b, c].iter().all(|w| is_identifier(w)) => {
            Ok([a.to_string(), b.to_string(), c.to_string()])
        }
        _ => err(l.number, SpecErrorKind::BadSyntax("`hooks` takes three identifiers".into())),
    }
}

/// Parses `[a, b, ...]` after the `args` keyword.
fn parse_arg_list(l: &Line<'_>, after: &str, constants: &BTreeMap<String, i64>) -> Result<Vec<i64>, SpecError> {
    let bad = || SpecError { line: l.number, kind: SpecErrorKind::BadSyntax("expected `args [a, b, ...]`".into()) };
    let Some(inner) = after.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return Err(bad());
    };
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| {
            let t = t.trim();
            if t.is_empty() {
                return Err(bad());
            }
            resolve(l.number, t, constants)
        })
        .collect()
}

fn parse_source(l: &Line<'_>, constants: &BTreeMap<String, i64>) -> Result<SourceBinding, SpecError> {
    let rest = l.text["source".len()..].trim_start();
    let (name, after_name) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    if !is_identifier(name) {
        return err(l.number, SpecErrorKind::BadSyntax("`source` needs a workload name".into()));
    }
    let after_name = after_name.trim();
    let init_args = if after_name.is_empty() {
        Vec::new()
    } else {
        let Some(list) = after_name.strip_prefix("args") else {
            return err(l.number, SpecErrorKind::BadSyntax("expected `args [...]` after workload name".into()));
        };
        parse_arg_list(l, list, constants)?
    };
    Ok(SourceBinding { workload: name.to_string(), init_args, hooks: None })
}

/// Parses a topology specification. The first violated rule is reported with
/// its line number.
pub fn parse_spec(text: &str) -> Result<NetworkSpec, SpecError> {
    let lines = significant_lines(text);
    let end_line = text.lines().count() + 1;

    // Section structure first, so missing and misordered annotations are
    // reported independently of their contents.
    let mut markers: Vec<(Section, usize, usize)> = Vec::new();
    for (idx, l) in lines.iter().enumerate() {
        if let Some(s) = section_of(l.words[0]) {
            markers.push((s, idx, l.number));
        }
    }
    for s in [Section::Emit, Section::Cluster, Section::Collect] {
        if !markers.iter().any(|m| m.0 == s) {
            return err(end_line, SpecErrorKind::MissingSection(s));
        }
    }
    let expected = [Section::Emit, Section::Cluster, Section::Collect];
    for (i, &(s, _, number)) in markers.iter().enumerate() {
        if i >= expected.len() {
            return err(number, SpecErrorKind::BadOrder(format!("duplicate {s}")));
        }
        if s != expected[i] {
            return err(number, SpecErrorKind::BadOrder(format!("{s} where {} was expected", expected[i])));
        }
    }
    let emit_idx = markers[0].1;
    let cluster_idx = markers[1].1;
    let collect_idx = markers[2].1;

    let mut constants = BTreeMap::new();
    for l in &lines[..emit_idx] {
        match l.words.as_slice() {
            ["const", name, "=", value] if is_identifier(name) => {
                let Some(v) = parse_int(value) else {
                    return err(l.number, SpecErrorKind::BadValue(format!("constant {name} must be an integer")));
                };
                if constants.insert(name.to_string(), v).is_some() {
                    return err(l.number, SpecErrorKind::BadSyntax(format!("constant {name} defined twice")));
                }
            }
            ["const", ..] => {
                return err(l.number, SpecErrorKind::BadSyntax("expected `const <name> = <int>`".into()))
            }
            [w, ..] if is_section_directive(w) => {
                return err(l.number, SpecErrorKind::BadOrder(format!("`{w}` before @emit")))
            }
            [w, ..] => return err(l.number, SpecErrorKind::BadSyntax(format!("unknown directive `{w}`"))),
            [] => unreachable!(),
        }
    }

    // @emit
    let emit_line = &lines[emit_idx];
    let ip_token = single_arg(emit_line, "@emit")?;
    let host_ip = match parse_ipv4(ip_token) {
        Some(ip) => ip,
        None if is_identifier(ip_token) && !constants.contains_key(ip_token) => {
            return err(emit_line.number, SpecErrorKind::UnknownConstant(ip_token.to_string()))
        }
        None => return err(emit_line.number, SpecErrorKind::BadHostIp(ip_token.to_string())),
    };
    let mut source: Option<SourceBinding> = None;
    for l in &lines[emit_idx + 1..cluster_idx] {
        match l.words[0] {
            "source" if source.is_none() => source = Some(parse_source(l, &constants)?),
            "hooks" => match source.as_mut() {
                Some(s) if s.hooks.is_none() => s.hooks = Some(hooks_of(l)?),
                _ => return err(l.number, SpecErrorKind::BadOrder("`hooks` must follow a single `source`".into())),
            },
            w => return misplaced(l, w, Section::Emit),
        }
    }
    let Some(source) = source else {
        return err(emit_line.number, SpecErrorKind::MissingDirective { section: Section::Emit, directive: "source" });
    };

    // @cluster
    let cluster_line = &lines[cluster_idx];
    let clusters = positive(
        cluster_line.number,
        "cluster count",
        resolve(cluster_line.number, single_arg(cluster_line, "@cluster")?, &constants)?,
    )?;
    let mut workers = None;
    for l in &lines[cluster_idx + 1..collect_idx] {
        match l.words[0] {
            "workers" if workers.is_none() => {
                let v = resolve(l.number, single_arg(l, "workers")?, &constants)?;
                workers = Some(positive(l.number, "worker count", v)?);
            }
            w => return misplaced(l, w, Section::Cluster),
        }
    }
    let Some(workers_per_node) = workers else {
        return err(cluster_line.number, SpecErrorKind::MissingDirective { section: Section::Cluster, directive: "workers" });
    };

    // @collect
    let collect_line = &lines[collect_idx];
    if collect_line.words.len() != 1 {
        return err(collect_line.number, SpecErrorKind::BadSyntax("`@collect` takes no arguments".into()));
    }
    let mut sink: Option<SinkBinding> = None;
    for l in &lines[collect_idx + 1..] {
        match l.words[0] {
            "sink" if sink.is_none() => {
                let name = single_arg(l, "sink")?;
                if !is_identifier(name) {
                    return err(l.number, SpecErrorKind::BadSyntax("`sink` needs a workload name".into()));
                }
                sink = Some(SinkBinding { workload: name.to_string(), hooks: None });
            }
            "hooks" => match sink.as_mut() {
                Some(s) if s.hooks.is_none() => s.hooks = Some(hooks_of(l)?),
                _ => return err(l.number, SpecErrorKind::BadOrder("`hooks` must follow a single `sink`".into())),
            },
            w => return misplaced(l, w, Section::Collect),
        }
    }
    let Some(sink) = sink else {
        return err(collect_line.number, SpecErrorKind::MissingDirective { section: Section::Collect, directive: "sink" });
    };

    Ok(NetworkSpec { host_ip, clusters, workers_per_node, source, sink, constants })
}

fn is_section_directive(w: &str) -> bool {
    matches!(w, "source" | "workers" | "sink" | "hooks")
}

fn misplaced<T>(l: &Line<'_>, word: &str, section: Section) -> Result<T, SpecError> {
    if is_section_directive(word) || word == "const" {
        err(l.number, SpecErrorKind::BadOrder(format!("`{word}` is not allowed here in {section}")))
    } else {
        err(l.number, SpecErrorKind::BadSyntax(format!("unknown directive `{word}`")))
    }
}

/// Checks every binding against the workload registry.
pub fn validate_spec(spec: NetworkSpec, registry: &Registry) -> Result<NetworkSpec, ValidationError> {
    let source = registry
        .get(&spec.source.workload)
        .ok_or_else(|| ValidationError::UnknownWorkload(spec.source.workload.clone()))?;
    if source.arity() != spec.source.init_args.len() {
        return Err(ValidationError::ArityMismatch {
            workload: spec.source.workload.clone(),
            expected: source.arity(),
            found: spec.source.init_args.len(),
        });
    }
    if let Some(hooks) = &spec.source.hooks {
        check_hooks(&spec.source.workload, hooks, source.source_hook_names(), ["init", "create", "function"])?;
    }
    let sink = registry
        .get(&spec.sink.workload)
        .ok_or_else(|| ValidationError::UnknownWorkload(spec.sink.workload.clone()))?;
    if let Some(hooks) = &spec.sink.hooks {
        check_hooks(&spec.sink.workload, hooks, sink.sink_hook_names(), ["init", "collect", "finalise"])?;
    }
    Ok(spec)
}

fn check_hooks(
    workload: &str,
    given: &[String; 3],
    declared: [&'static str; 3],
    roles: [&'static str; 3],
) -> Result<(), ValidationError> {
    for ((name, expected), role) in given.iter().zip(declared).zip(roles) {
        if name != expected {
            return Err(ValidationError::HookMismatch {
                workload: workload.to_string(),
                role,
                name: name.clone(),
                expected: expected.to_string(),
            });
        }
    }
    Ok(())
}

/// Renders a spec back to source text with all values written literally.
pub fn render_spec(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    for (name, value) in &spec.constants {
        let _ = writeln!(out, "const {name} = {value}");
    }
    let _ = writeln!(out, "@emit {}", spec.host_ip);
    let args: Vec<String> = spec.source.init_args.iter().map(i64::to_string).collect();
    let _ = writeln!(out, "source {} args [{}]", spec.source.workload, args.join(", "));
    if let Some(h) = &spec.source.hooks {
        let _ = writeln!(out, "hooks {} {} {}", h[0], h[1], h[2]);
    }
    let _ = writeln!(out, "@cluster {}", spec.clusters);
    let _ = writeln!(out, "workers {}", spec.workers_per_node);
    out.push_str("@collect\n");
    let _ = writeln!(out, "sink {}", spec.sink.workload);
    if let Some(h) = &spec.sink.hooks {
        let _ = writeln!(out, "hooks {} {} {}", h[0], h[1], h[2]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_NODE_SPEC: &str = "\
const cores = 4              // number of workers on each node
const clusters = 2           // number of clusters
const maxIterations = 1000   // escape value
const width = 5600

@emit 192.168.1.176
source mandelbrot args [width, maxIterations]
hooks initialiseClass createInstance calculate
@cluster clusters
workers cores
@collect
sink mandelbrot
hooks init collector finalise
";

    fn kind(text: &str) -> (usize, SpecErrorKind) {
        let e = parse_spec(text).unwrap_err();
        (e.line, e.kind)
    }

    #[test]
    fn parses_two_node_mandelbrot() {
        let s = parse_spec(TWO_NODE_SPEC).unwrap();
        assert_eq!(s.host_ip, Ipv4Addr::new(192, 168, 1, 176));
        assert_eq!(s.clusters, 2);
        assert_eq!(s.workers_per_node, 4);
        assert_eq!(s.source.workload, "mandelbrot");
        assert_eq!(s.source.init_args, vec![5600, 1000]);
        assert_eq!(s.constants["cores"], 4);
        assert_eq!(s.sink.hooks.as_ref().unwrap()[1], "collector");
    }

    #[test]
    fn minimal_topology() {
        let s = parse_spec("@emit 10.0.0.1\nsource mandelbrot args [4, 10]\n@cluster 1\nworkers 1\n@collect\nsink mandelbrot")
            .unwrap();
        assert_eq!((s.clusters, s.workers_per_node), (1, 1));
        assert!(s.constants.is_empty());
    }

    #[test]
    fn missing_collect() {
        let text = "@emit 10.0.0.1\nsource mandelbrot args [4, 10]\n@cluster 1\nworkers 1\n";
        assert_eq!(kind(text), (5, SpecErrorKind::MissingSection(Section::Collect)));
    }

    #[test]
    fn sections_out_of_order() {
        let text = "@cluster 1\nworkers 1\n@emit 10.0.0.1\nsource m args []\n@collect\nsink m\n";
        assert!(matches!(kind(text), (1, SpecErrorKind::BadOrder(_))));
    }

    #[test]
    fn duplicate_section_is_bad_order() {
        let text = "@emit 10.0.0.1\nsource m args []\n@cluster 1\nworkers 1\n@collect\nsink m\n@collect\n";
        assert!(matches!(kind(text), (7, SpecErrorKind::BadOrder(_))));
    }

    #[test]
    fn unknown_constant() {
        let text = "@emit 10.0.0.1\nsource m args [width]\n@cluster 1\nworkers 1\n@collect\nsink m\n";
        assert_eq!(kind(text), (2, SpecErrorKind::UnknownConstant("width".into())));
        let text = "@emit 10.0.0.1\nsource m args []\n@cluster clusters\nworkers 1\n@collect\nsink m\n";
        assert_eq!(kind(text), (3, SpecErrorKind::UnknownConstant("clusters".into())));
    }

    #[test]
    fn bad_host_ip() {
        let text = "@emit 192.168.1.300\nsource m args []\n@cluster 1\nworkers 1\n@collect\nsink m\n";
        assert_eq!(kind(text), (1, SpecErrorKind::BadHostIp("192.168.1.300".into())));
        let text = "const host = 4\n@emit host\nsource m args []\n@cluster 1\nworkers 1\n@collect\nsink m\n";
        assert_eq!(kind(text), (2, SpecErrorKind::BadHostIp("host".into())));
    }

    #[test]
    fn const_after_emit_is_bad_order() {
        let text = "@emit 10.0.0.1\nconst x = 1\nsource m args []\n@cluster 1\nworkers 1\n@collect\nsink m\n";
        assert!(matches!(kind(text), (2, SpecErrorKind::BadOrder(_))));
    }

    #[test]
    fn missing_directives() {
        let text = "@emit 10.0.0.1\n@cluster 1\nworkers 1\n@collect\nsink m\n";
        assert!(matches!(kind(text), (1, SpecErrorKind::MissingDirective { directive: "source", .. })));
        let text = "@emit 10.0.0.1\nsource m args []\n@cluster 1\n@collect\nsink m\n";
        assert!(matches!(kind(text), (3, SpecErrorKind::MissingDirective { directive: "workers", .. })));
    }

    #[test]
    fn zero_clusters_rejected() {
        let text = "@emit 10.0.0.1\nsource m args []\n@cluster 0\nworkers 1\n@collect\nsink m\n";
        assert!(matches!(kind(text), (3, SpecErrorKind::BadValue(_))));
    }

    #[test]
    fn validates_against_registry() {
        let reg = Registry::with_builtins();
        assert!(validate_spec(parse_spec(TWO_NODE_SPEC).unwrap(), &reg).is_ok());

        let unknown = TWO_NODE_SPEC.replace("source mandelbrot", "source nonexistent");
        assert_eq!(
            validate_spec(parse_spec(&unknown).unwrap(), &reg),
            Err(ValidationError::UnknownWorkload("nonexistent".into()))
        );

        let short = TWO_NODE_SPEC.replace("[width, maxIterations]", "[5600]");
        assert_eq!(
            validate_spec(parse_spec(&short).unwrap(), &reg),
            Err(ValidationError::ArityMismatch { workload: "mandelbrot".into(), expected: 2, found: 1 })
        );

        let renamed = TWO_NODE_SPEC.replace("hooks init collector finalise", "hooks init gather finalise");
        assert!(matches!(
            validate_spec(parse_spec(&renamed).unwrap(), &reg),
            Err(ValidationError::HookMismatch { role: "collect", .. })
        ));
    }

    #[test]
    fn render_reparses_two_node_spec() {
        let s = parse_spec(TWO_NODE_SPEC).unwrap();
        assert_eq!(parse_spec(&render_spec(&s)).unwrap(), s);
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z_][a-zA-Z0-9_]{0,8}".prop_filter("keyword", |s| s != "const")
    }

    proptest! {
        #[test]
        fn render_round_trip(
            ip: u32,
            clusters in 1u32..64,
            workers in 1u32..64,
            workload in ident(),
            sink in ident(),
            args in proptest::collection::vec(any::<i64>(), 0..5),
            constants in proptest::collection::btree_map(ident(), any::<i64>(), 0..5),
        ) {
            let spec = NetworkSpec {
                host_ip: Ipv4Addr::from(ip),
                clusters,
                workers_per_node: workers,
                source: SourceBinding { workload, init_args: args, hooks: None },
                sink: SinkBinding { workload: sink, hooks: None },
                constants,
            };
            prop_assert_eq!(parse_spec(&render_spec(&spec)).unwrap(), spec);
        }

        #[test]
        fn single_line_deletion_yields_one_line_diagnostic(drop in 0usize..8) {
            let text = "@emit 10.0.0.1\nsource m args [1]\n@cluster 2\nworkers 3\n@collect\nsink m\n";
            let lines: Vec<&str> = text.lines().collect();
            let mutated: Vec<&str> = lines.iter().enumerate()
                .filter(|(i, _)| *i != drop).map(|(_, l)| *l).collect();
            let result = parse_spec(&mutated.join("\n"));
            if drop < lines.len() {
                let e = result.unwrap_err();
                prop_assert!(e.line >= 1 && e.line <= lines.len() + 1);
            } else {
                prop_assert!(result.is_ok());
            }
        }
    }
}
