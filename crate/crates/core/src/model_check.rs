//! Explicit-state checker for the farm's process model.
//!
//! The model has an emitter, a server, N clients, N workers, a reducer and a
//! collector, composed in alphabetized parallel over channels `a`..`f` and
//! `finished`:
//!
//! ```text
//! Emit -a-> Server -b.i/c.i-> Client(i) -d.i-> Worker(i) -e.i-> Reducer -f-> Collect
//! ```
//!
//! Objects are `A`..`E` followed by the terminator `UT`. The checker builds
//! the reachable state graph by BFS and decides the six assertions: deadlock
//! freedom, divergence freedom, trace, failures and failures-divergences
//! refinement of `TestSystem = finished!True -> TestSystem` with `a`..`f`
//! hidden, and determinism.
//!
//! Reducer drain: after the first UT (from worker `s`) it reads the remaining
//! workers in index order from `s+1`, wrapping modulo N, forwarding objects
//! and consuming their UTs, and emits a single `f.UT` once back at `s`.
//! The server's terminator phase answers each client once, in request order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

pub const DEFAULT_STATE_LIMIT: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    A,
    B,
    C,
    D,
    E,
    F,
    Finished,
    Tick,
}

impl Channel {
    pub fn is_hidden(self) -> bool {
        !matches!(self, Channel::Finished | Channel::Tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    A,
    B,
    C,
    D,
    E,
    UT,
    S,
    True,
}

const OBJECTS: [Value; 6] = [Value::A, Value::B, Value::C, Value::D, Value::E, Value::UT];

fn create(o: Value) -> Value {
    match o {
        Value::A => Value::B,
        Value::B => Value::C,
        Value::C => Value::D,
        Value::D => Value::E,
        _ => Value::UT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub channel: Channel,
    pub index: Option<u8>,
    pub value: Option<Value>,
}

impl Event {
    fn new(channel: Channel, index: Option<u8>, value: Value) -> Self {
        Self { channel, index, value: Some(value) }
    }

    pub const FINISHED: Event = Event { channel: Channel::Finished, index: None, value: Some(Value::True) };
    pub const TICK: Event = Event { channel: Channel::Tick, index: None, value: None };

    pub fn is_hidden(&self) -> bool {
        self.channel.is_hidden()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let chan = match self.channel {
            Channel::A => "a",
            Channel::B => "b",
            Channel::C => "c",
            Channel::D => "d",
            Channel::E => "e",
            Channel::F => "f",
            Channel::Finished => "finished",
            Channel::Tick => "tick",
        };
        f.write_str(chan)?;
        if let Some(i) = self.index {
            write!(f, ".{i}")?;
        }
        if let Some(v) = self.value {
            write!(f, ".{v:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// The server's terminator phase answers only N−1 clients.
    TerminatorShort,
    /// The collector keeps pushing UT back onto `f`, and the finished reducer
    /// keeps accepting it.
    CollectLoopF,
    /// The collector stops after one `finished`, so termination shows up.
    CollectTerminates,
    /// A worker may silently stop after passing an object on.
    WorkerNondet,
}

impl Mutation {
    pub const ALL: [Mutation; 4] =
        [Mutation::TerminatorShort, Mutation::CollectLoopF, Mutation::CollectTerminates, Mutation::WorkerNondet];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::TerminatorShort => "terminator-short",
            Mutation::CollectLoopF => "collect-loop-f",
            Mutation::CollectTerminates => "collect-terminates",
            Mutation::WorkerNondet => "worker-nondet",
        }
    }
}

impl FromStr for Mutation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| ModelError::BadMutation(s.to_string()))
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown mutation `{0}` (expected one of terminator-short, collect-loop-f, collect-terminates, worker-nondet)")]
    BadMutation(String),
    #[error("the model needs at least one client")]
    NoClients,
    #[error("too many clients ({0}); at most 8 are supported")]
    TooManyClients(usize),
    #[error("state limit of {0} exceeded")]
    StateLimit(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {index} ({event}) is not enabled")]
pub struct ReplayError {
    pub index: usize,
    pub event: Event,
}

/// Control point of one process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Local {
    Emit(Value),
    ServerIdle,
    ServerChoice(Value),
    ServerService(u8, Value),
    /// Terminator phase; bit `i` set once client `i` has had its UT.
    ServerEnd(u8),
    ServerEndReply(u8, u8),
    ClientRequest,
    ClientReceive,
    ClientDeliver(Value),
    WorkerReceive,
    WorkerSend(Value),
    WorkerSendThenStop(Value),
    Reducer,
    Reduce(u8),
    ReduceForward(u8, Value),
    ReduceEnd(u8, u8),
    ReduceEndForward(u8, u8, Value),
    ReduceEmitUt,
    ReduceEcho,
    Collect,
    CollectEnd,
    /// Blocked for ever without terminating.
    Stop,
    /// Terminated successfully.
    Skip,
}

/// One global state: a control point per process, in the order emit, server,
/// clients, workers, reducer, collect.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SystemState {
    pub procs: Box<[Local]>,
    /// The whole system has terminated and performed `tick`.
    pub ticked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Proc {
    Emit,
    Server,
    Client(u8),
    Worker(u8),
    Reducer,
    Collect,
}

/// The composed transition system for a given client count and mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    n: u8,
    mutation: Option<Mutation>,
}

/// Builds the model for `clusters` clients, optionally mutated by name.
pub fn build_system(clusters: usize, mutation: Option<&str>) -> Result<Model, ModelError> {
    Model::new(clusters, mutation.map(str::parse).transpose()?)
}

impl Model {
    pub fn new(clusters: usize, mutation: Option<Mutation>) -> Result<Self, ModelError> {
        match clusters {
            0 => Err(ModelError::NoClients),
            1..=8 => Ok(Self { n: clusters as u8, mutation }),
            n => Err(ModelError::TooManyClients(n)),
        }
    }

    pub fn clusters(&self) -> usize {
        self.n as usize
    }

    pub fn mutation(&self) -> Option<Mutation> {
        self.mutation
    }

    fn mutated(&self, m: Mutation) -> bool {
        self.mutation == Some(m)
    }

    fn slot(&self, p: Proc) -> usize {
        let n = self.n as usize;
        match p {
            Proc::Emit => 0,
            Proc::Server => 1,
            Proc::Client(i) => 2 + i as usize,
            Proc::Worker(i) => 2 + n + i as usize,
            Proc::Reducer => 2 + 2 * n,
            Proc::Collect => 3 + 2 * n,
        }
    }

    fn proc_at(&self, slot: usize) -> Proc {
        let n = self.n as usize;
        match slot {
            0 => Proc::Emit,
            1 => Proc::Server,
            s if s < 2 + n => Proc::Client((s - 2) as u8),
            s if s < 2 + 2 * n => Proc::Worker((s - 2 - n) as u8),
            s if s == 2 + 2 * n => Proc::Reducer,
            _ => Proc::Collect,
        }
    }

    /// The processes that must all take `e`, first one listed first.
    fn owners(&self, e: &Event) -> (Proc, Option<Proc>) {
        let i = e.index.unwrap_or(0);
        match e.channel {
            Channel::A => (Proc::Emit, Some(Proc::Server)),
            Channel::B | Channel::C => (Proc::Server, Some(Proc::Client(i))),
            Channel::D => (Proc::Client(i), Some(Proc::Worker(i))),
            Channel::E => (Proc::Worker(i), Some(Proc::Reducer)),
            Channel::F => (Proc::Reducer, Some(Proc::Collect)),
            Channel::Finished | Channel::Tick => (Proc::Collect, None),
        }
    }

    pub fn initial(&self) -> SystemState {
        let n = self.n as usize;
        let mut procs = vec![Local::Emit(Value::A), Local::ServerIdle];
        procs.extend(std::iter::repeat_n(Local::ClientRequest, n));
        procs.extend(std::iter::repeat_n(Local::WorkerReceive, n));
        procs.push(Local::Reducer);
        procs.push(Local::Collect);
        SystemState { procs: procs.into_boxed_slice(), ticked: false }
    }

    fn served_all(&self, served: u8) -> bool {
        let limit = if self.mutated(Mutation::TerminatorShort) { self.n - 1 } else { self.n };
        served.count_ones() >= u32::from(limit)
    }

    fn server_end(&self, served: u8) -> Local {
        if self.served_all(served) {
            Local::Skip
        } else {
            Local::ServerEnd(served)
        }
    }

    fn reduce_end(&self, s: u8, n: u8) -> Local {
        if s == n {
            Local::ReduceEmitUt
        } else {
            Local::ReduceEnd(s, n)
        }
    }

    /// Events process `p` is willing to take from `local`, with its successor.
    fn moves(&self, p: Proc, local: Local, out: &mut Vec<(Event, Local)>) {
        use Channel as Ch;
        let n = self.n;
        let ev = Event::new;
        match (p, local) {
            (Proc::Emit, Local::Emit(o)) => {
                out.push((ev(Ch::A, None, o), if o == Value::UT { Local::Skip } else { Local::Emit(create(o)) }));
            }
            (Proc::Server, Local::ServerIdle) => {
                for o in OBJECTS {
                    let next = if o == Value::UT { self.server_end(0) } else { Local::ServerChoice(o) };
                    out.push((ev(Ch::A, None, o), next));
                }
            }
            (Proc::Server, Local::ServerChoice(o)) => {
                for x in 0..n {
                    out.push((ev(Ch::B, Some(x), Value::S), Local::ServerService(x, o)));
                }
            }
            (Proc::Server, Local::ServerService(x, o)) => out.push((ev(Ch::C, Some(x), o), Local::ServerIdle)),
            (Proc::Server, Local::ServerEnd(served)) => {
                for y in (0..n).filter(|y| served & (1 << y) == 0) {
                    out.push((ev(Ch::B, Some(y), Value::S), Local::ServerEndReply(served, y)));
                }
            }
            (Proc::Server, Local::ServerEndReply(served, y)) => {
                out.push((ev(Ch::C, Some(y), Value::UT), self.server_end(served | (1 << y))));
            }
            (Proc::Client(i), Local::ClientRequest) => out.push((ev(Ch::B, Some(i), Value::S), Local::ClientReceive)),
            (Proc::Client(i), Local::ClientReceive) => {
                for o in OBJECTS {
                    out.push((ev(Ch::C, Some(i), o), Local::ClientDeliver(o)));
                }
            }
            (Proc::Client(i), Local::ClientDeliver(o)) => {
                out.push((ev(Ch::D, Some(i), o), if o == Value::UT { Local::Skip } else { Local::ClientRequest }));
            }
            (Proc::Worker(i), Local::WorkerReceive) => {
                for o in OBJECTS {
                    out.push((ev(Ch::D, Some(i), o), Local::WorkerSend(o)));
                    if o != Value::UT && self.mutated(Mutation::WorkerNondet) {
                        out.push((ev(Ch::D, Some(i), o), Local::WorkerSendThenStop(o)));
                    }
                }
            }
            (Proc::Worker(i), Local::WorkerSend(o)) => {
                out.push((ev(Ch::E, Some(i), o), if o == Value::UT { Local::Skip } else { Local::WorkerReceive }));
            }
            (Proc::Worker(i), Local::WorkerSendThenStop(o)) => out.push((ev(Ch::E, Some(i), o), Local::Stop)),
            (Proc::Reducer, Local::Reducer) => {
                for x in 0..n {
                    self.reduce_moves(x, out);
                }
            }
            (Proc::Reducer, Local::Reduce(x)) => self.reduce_moves(x, out),
            (Proc::Reducer, Local::ReduceForward(x, o)) => out.push((ev(Ch::F, None, o), Local::Reduce(x))),
            (Proc::Reducer, Local::ReduceEnd(s, m)) => {
                for o in OBJECTS {
                    let next =
                        if o == Value::UT { self.reduce_end(s, (m + 1) % n) } else { Local::ReduceEndForward(s, m, o) };
                    out.push((ev(Ch::E, Some(m), o), next));
                }
            }
            (Proc::Reducer, Local::ReduceEndForward(s, m, o)) => out.push((ev(Ch::F, None, o), Local::ReduceEnd(s, m))),
            (Proc::Reducer, Local::ReduceEmitUt) => {
                let next = if self.mutated(Mutation::CollectLoopF) { Local::ReduceEcho } else { Local::Skip };
                out.push((ev(Ch::F, None, Value::UT), next));
            }
            (Proc::Reducer, Local::ReduceEcho) => {
                for o in OBJECTS {
                    out.push((ev(Ch::F, None, o), Local::ReduceEcho));
                }
            }
            (Proc::Collect, Local::Collect) => {
                for o in OBJECTS {
                    out.push((ev(Ch::F, None, o), if o == Value::UT { Local::CollectEnd } else { Local::Collect }));
                }
            }
            (Proc::Collect, Local::CollectEnd) => {
                let next = if self.mutated(Mutation::CollectTerminates) { Local::Skip } else { Local::CollectEnd };
                out.push((Event::FINISHED, next));
                if self.mutated(Mutation::CollectLoopF) {
                    out.push((ev(Ch::F, None, Value::UT), Local::CollectEnd));
                }
            }
            (_, Local::Stop | Local::Skip) => {}
            (p, l) => unreachable!("{p:?} cannot be in {l:?}"),
        }
    }

    fn reduce_moves(&self, x: u8, out: &mut Vec<(Event, Local)>) {
        for o in OBJECTS {
            let next = if o == Value::UT { self.reduce_end(x, (x + 1) % self.n) } else { Local::ReduceForward(x, o) };
            out.push((Event::new(Channel::E, Some(x), o), next));
        }
    }

    /// Every transition out of `s`.
    pub fn transitions(&self, s: &SystemState) -> Vec<(Event, SystemState)> {
        let mut result = Vec::new();
        if s.ticked {
            return result;
        }
        if s.procs.iter().all(|l| *l == Local::Skip) {
            result.push((Event::TICK, SystemState { procs: s.procs.clone(), ticked: true }));
            return result;
        }
        let moves: Vec<Vec<(Event, Local)>> = (0..s.procs.len())
            .map(|slot| {
                let mut m = Vec::new();
                self.moves(self.proc_at(slot), s.procs[slot], &mut m);
                m
            })
            .collect();
        for (slot, list) in moves.iter().enumerate() {
            for &(e, next) in list {
                let (first, second) = self.owners(&e);
                if self.slot(first) != slot {
                    continue;
                }
                match second {
                    None => {
                        let mut procs = s.procs.clone();
                        procs[slot] = next;
                        result.push((e, SystemState { procs, ticked: false }));
                    }
                    Some(q) => {
                        let qs = self.slot(q);
                        for &(e2, next2) in &moves[qs] {
                            if e2 == e {
                                let mut procs = s.procs.clone();
                                procs[slot] = next;
                                procs[qs] = next2;
                                result.push((e, SystemState { procs, ticked: false }));
                            }
                        }
                    }
                }
            }
        }
        result
    }

    pub fn enabled(&self, s: &SystemState) -> Vec<Event> {
        let mut es: Vec<Event> = self.transitions(s).into_iter().map(|(e, _)| e).collect();
        es.sort();
        es.dedup();
        es
    }

    /// Follows `trace` from the initial state, returning every state set
    /// visited. Nondeterministic branches are followed together.
    pub fn replay(&self, trace: &[Event]) -> Result<Vec<SystemState>, ReplayError> {
        let mut current = vec![self.initial()];
        for (index, &event) in trace.iter().enumerate() {
            let mut next: Vec<SystemState> = Vec::new();
            for s in &current {
                for (e, t) in self.transitions(s) {
                    if e == event && !next.contains(&t) {
                        next.push(t);
                    }
                }
            }
            if next.is_empty() {
                return Err(ReplayError { index, event });
            }
            current = next;
        }
        Ok(current)
    }

    pub fn is_terminated(&self, s: &SystemState) -> bool {
        s.ticked || s.procs.iter().all(|l| *l == Local::Skip)
    }
}

/// The reachable state graph.
pub struct StateSpace {
    model: Model,
    states: Vec<SystemState>,
    edges: Vec<Vec<(Event, u32)>>,
    parent: Vec<Option<(u32, Event)>>,
    pub build_time: Duration,
}

impl StateSpace {
    pub fn explore(model: Model, limit: usize) -> Result<Self, ModelError> {
        let t0 = Instant::now();
        let mut index: HashMap<SystemState, u32> = HashMap::new();
        let mut states = vec![model.initial()];
        let mut parent = vec![None];
        index.insert(states[0].clone(), 0);
        let mut edges: Vec<Vec<(Event, u32)>> = Vec::new();
        let mut queue = VecDeque::from([0u32]);
        while let Some(id) = queue.pop_front() {
            let mut out = Vec::new();
            for (e, t) in model.transitions(&states[id as usize]) {
                let tid = match index.get(&t) {
                    Some(&tid) => tid,
                    None => {
                        if states.len() >= limit {
                            return Err(ModelError::StateLimit(limit));
                        }
                        let tid = states.len() as u32;
                        index.insert(t.clone(), tid);
                        states.push(t);
                        parent.push(Some((id, e)));
                        queue.push_back(tid);
                        tid
                    }
                };
                out.push((e, tid));
            }
            if edges.len() <= id as usize {
                edges.resize_with(id as usize + 1, Vec::new);
            }
            edges[id as usize] = out;
        }
        edges.resize_with(states.len(), Vec::new);
        Ok(Self { model, states, edges, parent, build_time: t0.elapsed() })
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, id: usize) -> &SystemState {
        &self.states[id]
    }

    /// Shortest event path from the initial state.
    pub fn path_to(&self, id: usize) -> Vec<Event> {
        let mut trace = Vec::new();
        let mut cur = id as u32;
        while let Some((p, e)) = self.parent[cur as usize] {
            trace.push(e);
            cur = p;
        }
        trace.reverse();
        trace
    }

    fn result(&self, assertion: Assertion, started: Instant, counterexample: Option<Vec<Event>>, detail: String) -> CheckResult {
        CheckResult {
            assertion,
            passed: counterexample.is_none(),
            states: self.len(),
            elapsed: started.elapsed() + self.build_time,
            counterexample,
            detail,
        }
    }

    fn is_stable(&self, id: usize) -> bool {
        !self.edges[id].iter().any(|(e, _)| e.is_hidden())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assertion {
    TraceRefinement,
    FailuresRefinement,
    FailuresDivergencesRefinement,
    DeadlockFree,
    DivergenceFree,
    Deterministic,
    DeterministicHidden,
}

impl Assertion {
    pub fn name(self) -> &'static str {
        match self {
            Assertion::TraceRefinement => "trace refinement [T=",
            Assertion::FailuresRefinement => "failures refinement [F=",
            Assertion::FailuresDivergencesRefinement => "failures-divergences refinement [FD=",
            Assertion::DeadlockFree => "deadlock free",
            Assertion::DivergenceFree => "divergence free",
            Assertion::Deterministic => "deterministic",
            Assertion::DeterministicHidden => "deterministic (a..f hidden)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub assertion: Assertion,
    pub passed: bool,
    pub states: usize,
    pub elapsed: Duration,
    /// Present exactly when the check failed.
    pub counterexample: Option<Vec<Event>>,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} states={} time={:.3}s",
            self.assertion.name(),
            if self.passed { "pass" } else { "FAIL" },
            self.states,
            self.elapsed.as_secs_f64()
        )?;
        if let Some(trace) = &self.counterexample {
            let t: Vec<String> = trace.iter().map(Event::to_string).collect();
            write!(f, " {}; trace: <{}>", self.detail, t.join(", "))?;
        }
        Ok(())
    }
}

pub fn check_deadlock(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let m = space.model;
    let found = (0..space.len()).find(|&id| space.edges[id].is_empty() && !m.is_terminated(&space.states[id]));
    let detail = found.map(|id| describe_blocked(&m, &space.states[id])).unwrap_or_default();
    space.result(Assertion::DeadlockFree, t0, found.map(|id| space.path_to(id)), detail)
}

fn describe_blocked(m: &Model, s: &SystemState) -> String {
    let waiting: Vec<String> = s
        .procs
        .iter()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Local::Skip))
        .map(|(slot, l)| format!("{:?} at {l:?}", m.proc_at(slot)))
        .collect();
    format!("deadlocked with {}", waiting.join(", "))
}

/// Looks for a cycle of hidden events.
pub fn check_divergence(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    // 0 unvisited, 1 on the DFS stack, 2 done.
    let mut colour = vec![0u8; space.len()];
    let mut found: Option<Vec<Event>> = None;
    'roots: for root in 0..space.len() {
        if colour[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut via: Vec<Event> = Vec::new();
        colour[root] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let edges = &space.edges[node];
            let hidden_edge = edges[*next..].iter().position(|(e, _)| e.is_hidden()).map(|k| *next + k);
            match hidden_edge {
                Some(k) => {
                    *next = k + 1;
                    let (e, t) = edges[k];
                    let t = t as usize;
                    match colour[t] {
                        0 => {
                            colour[t] = 1;
                            stack.push((t, 0));
                            via.push(e);
                        }
                        1 => {
                            let start = stack.iter().position(|(n, _)| *n == t).expect("on stack");
                            let mut trace = space.path_to(t);
                            trace.extend_from_slice(&via[start..]);
                            trace.push(e);
                            found = Some(trace);
                            break 'roots;
                        }
                        _ => {}
                    }
                }
                None => {
                    colour[node] = 2;
                    stack.pop();
                    via.pop();
                }
            }
        }
    }
    let detail = if found.is_some() { "hidden cycle (trace ends where it repeats)".to_string() } else { String::new() };
    space.result(Assertion::DivergenceFree, t0, found, detail)
}

/// With `a`..`f` hidden, the only visible event ever possible is
/// `finished.True`.
pub fn check_trace_refinement(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let found = (0..space.len()).find_map(|id| {
        space.edges[id].iter().find(|(e, _)| !e.is_hidden() && *e != Event::FINISHED).map(|(e, _)| {
            let mut trace = space.path_to(id);
            trace.push(*e);
            trace
        })
    });
    let detail = found.as_ref().map(|t| format!("visible event {} is outside the specification", t.last().unwrap())).unwrap_or_default();
    space.result(Assertion::TraceRefinement, t0, found, detail)
}

fn first_stable_refusal(space: &StateSpace) -> Option<usize> {
    (0..space.len()).find(|&id| space.is_stable(id) && !space.edges[id].iter().any(|(e, _)| *e == Event::FINISHED))
}

/// Every stable state of the hidden system offers `finished.True`.
pub fn check_failures_refinement(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let traces = check_trace_refinement(space);
    if let Some(trace) = traces.counterexample {
        return space.result(Assertion::FailuresRefinement, t0, Some(trace), traces.detail);
    }
    let found = first_stable_refusal(space);
    let detail = found.map(|id| format!("stable state refuses finished.True: {}", describe_blocked(&space.model, &space.states[id]))).unwrap_or_default();
    space.result(Assertion::FailuresRefinement, t0, found.map(|id| space.path_to(id)), detail)
}

pub fn check_fd_refinement(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let div = check_divergence(space);
    if !div.passed {
        return space.result(Assertion::FailuresDivergencesRefinement, t0, div.counterexample, div.detail);
    }
    let f = check_failures_refinement(space);
    space.result(Assertion::FailuresDivergencesRefinement, t0, f.counterexample, f.detail)
}

/// Determinism of the unhidden system, by self-composition: explore pairs
/// of states reachable by the same trace, and fail if one side can do an
/// event the other refuses.
pub fn check_determinism(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut parent: HashMap<(u32, u32), ((u32, u32), Event)> = HashMap::new();
    let mut queue = VecDeque::from([(0u32, 0u32)]);
    seen.insert((0, 0));
    let mut found = None;
    'search: while let Some((p, q)) = queue.pop_front() {
        for &(e, p2) in &space.edges[p as usize] {
            let q_succ: Vec<u32> = space.edges[q as usize].iter().filter(|(e2, _)| *e2 == e).map(|(_, t)| *t).collect();
            if q_succ.is_empty() {
                found = Some(((p, q), e));
                break 'search;
            }
            for q2 in q_succ {
                if seen.insert((p2, q2)) {
                    parent.insert((p2, q2), ((p, q), e));
                    queue.push_back((p2, q2));
                }
            }
        }
    }
    let counterexample = found.map(|(pair, e)| {
        let mut trace = vec![e];
        let mut cur = pair;
        while let Some(&(prev, ev)) = parent.get(&cur) {
            trace.push(ev);
            cur = prev;
        }
        trace.reverse();
        trace
    });
    let detail = counterexample
        .as_ref()
        .map(|t| format!("after the same trace, {} may be both accepted and refused", t.last().unwrap()))
        .unwrap_or_default();
    space.result(Assertion::Deterministic, t0, counterexample, detail)
}

/// Determinism with `a`..`f` hidden: divergence-free, and after any visible
/// trace no reachable state can perform a visible event that some stable
/// state reached by the same trace refuses.
pub fn check_determinism_hidden(space: &StateSpace) -> CheckResult {
    let t0 = Instant::now();
    let div = check_divergence(space);
    if !div.passed {
        return space.result(Assertion::DeterministicHidden, t0, div.counterexample, div.detail);
    }
    let closure = |seeds: Vec<u32>| -> Vec<u32> {
        let mut set: HashSet<u32> = seeds.iter().copied().collect();
        let mut stack = seeds;
        while let Some(s) = stack.pop() {
            for &(e, t) in &space.edges[s as usize] {
                if e.is_hidden() && set.insert(t) {
                    stack.push(t);
                }
            }
        }
        let mut v: Vec<u32> = set.into_iter().collect();
        v.sort_unstable();
        v
    };
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let start = closure(vec![0]);
    let mut queue = VecDeque::from([(start.clone(), Vec::<Event>::new())]);
    seen.insert(start);
    while let Some((set, trace)) = queue.pop_front() {
        let mut visible: Vec<Event> =
            set.iter().flat_map(|&s| space.edges[s as usize].iter().map(|(e, _)| *e)).filter(|e| !e.is_hidden()).collect();
        visible.sort();
        visible.dedup();
        for e in visible {
            let refuser = set.iter().find(|&&s| space.is_stable(s as usize) && !space.edges[s as usize].iter().any(|(x, _)| *x == e));
            if refuser.is_some() {
                let mut t = trace.clone();
                t.push(e);
                let detail = format!("after the same visible trace, {e} may be both accepted and refused");
                return space.result(Assertion::DeterministicHidden, t0, Some(t), detail);
            }
            let next = closure(
                set.iter()
                    .flat_map(|&s| space.edges[s as usize].iter().filter(|(x, _)| *x == e).map(|(_, t)| *t))
                    .collect(),
            );
            if seen.insert(next.clone()) {
                let mut t = trace.clone();
                t.push(e);
                queue.push_back((next, t));
            }
        }
    }
    space.result(Assertion::DeterministicHidden, t0, None, String::new())
}

/// The six assertions, followed by determinism of the hidden system.
pub fn check_all(model: Model, limit: usize) -> Result<Vec<CheckResult>, ModelError> {
    let space = StateSpace::explore(model, limit)?;
    Ok(vec![
        check_trace_refinement(&space),
        check_failures_refinement(&space),
        check_fd_refinement(&space),
        check_deadlock(&space),
        check_divergence(&space),
        check_determinism(&space),
        check_determinism_hidden(&space),
    ])
}
