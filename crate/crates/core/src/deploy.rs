//! The load protocol between the host and its nodes.
//!
//! 1. The host opens its many-to-one load input; each node opens its own
//!    one-to-one load input and then sends REGISTER.
//! 2. Once N nodes have registered, the host sends each one a PLAN manifest.
//! 3. Nodes create their application inputs and answer SYNC(CHANNELS_READY).
//!    After all N, the host connects its outputs and sends SYNC(START); nodes
//!    connect their outputs on START. No application data moves before that.
//! 4. After the farm ends each node sends SYNC(DONE) and a TIMING frame, and
//!    the host combines them with its own times.

use std::fmt;
use std::io;
use std::net::{Ipv4Addr, UdpSocket};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::farm::{run_host_farm, run_node_farm, CounterSnapshot, FarmCounters, FarmError, HostEnds, NodeEnds};
use crate::manifest::{parse_node_plan, render_node_plan, ManifestError};
use crate::netchan::{Arity, ChannelAddress, ChannelEvent, FrameKind, Incoming, InputEnd, NetError, Network, OutputEnd, WriterId};
use crate::topology::{verify_star, HostPlan, NodePlan, TopologyError, LOAD_CHANNEL};
use crate::workload::{FunctionHook, Registry, Summary, WorkloadError};

const PLAN_ERROR_PREFIX: &str = "error:";

#[derive(Debug, Error)]
pub enum DeployError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("node {0} registered twice")]
    DuplicateNode(String),
    #[error("only {registered} of {expected} nodes registered in time")]
    Timeout { registered: u32, expected: u32 },
    #[error("node {0} closed its connection")]
    PeerClosed(u32),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("host rejected this node: {0}")]
    Rejected(String),
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Farm(#[from] FarmError),
}

impl DeployError {
    /// Lower is closer to the root cause; errors that only report a peer
    /// going away rank last.
    pub(crate) fn rank(&self) -> u8 {
        match self {
            Self::Farm(e) => e.rank(),
            Self::Net(NetError::PeerClosed(_) | NetError::AllWritersClosed(_)) | Self::PeerClosed(_) => 3,
            Self::Rejected(_) => 4,
            _ => 1,
        }
    }
}

fn violation(m: impl Into<String>) -> DeployError {
    DeployError::ProtocolViolation(m.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SyncPhase {
    ChannelsReady = 1,
    Start = 2,
    Done = 3,
}

impl SyncPhase {
    pub fn from_payload(p: &[u8]) -> Option<Self> {
        match p {
            [1] => Some(Self::ChannelsReady),
            [2] => Some(Self::Start),
            [3] => Some(Self::Done),
            _ => None,
        }
    }

    pub fn payload(self) -> [u8; 1] {
        [self as u8]
    }
}

/// Enforces CHANNELS_READY → START → DONE on one node.
#[derive(Debug, Default)]
pub struct NodeBarrier {
    reached: Option<SyncPhase>,
}

impl NodeBarrier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&mut self, phase: SyncPhase) -> Result<(), DeployError> {
        let expected = match self.reached {
            None => SyncPhase::ChannelsReady,
            Some(SyncPhase::ChannelsReady) => SyncPhase::Start,
            Some(SyncPhase::Start) => SyncPhase::Done,
            Some(SyncPhase::Done) => return Err(violation(format!("{phase:?} after DONE"))),
        };
        if phase != expected {
            return Err(violation(format!("{phase:?} while expecting {expected:?}")));
        }
        self.reached = Some(phase);
        Ok(())
    }

    pub fn reached(&self) -> Option<SyncPhase> {
        self.reached
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Host,
    Node(u32),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Host => f.write_str("host"),
            Origin::Node(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingRow {
    pub origin: Origin,
    pub load_ms: u64,
    pub run_ms: u64,
}

/// Host row first, then one row per node in index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("origin,load_ms,run_ms\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.origin, r.load_ms, r.run_ms));
        }
        s
    }

    pub fn host(&self) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.origin == Origin::Host)
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

pub fn encode_timing(load_ms: u64, run_ms: u64) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&load_ms.to_be_bytes());
    b[8..].copy_from_slice(&run_ms.to_be_bytes());
    b
}

pub fn decode_timing(p: &[u8]) -> Option<(u64, u64)> {
    let b: &[u8; 16] = p.try_into().ok()?;
    let (l, r) = b.split_at(8);
    Some((u64::from_be_bytes(l.try_into().ok()?), u64::from_be_bytes(r.try_into().ok()?)))
}

/// Whole milliseconds, rounded up so that any measured interval reports > 0.
pub fn millis(d: Duration) -> u64 {
    d.as_micros().div_ceil(1000) as u64
}

/// Ordering record of the load protocol, for checking the barrier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeployEvent {
    InputCreated { owner: Origin, address: ChannelAddress },
    OutputConnecting { owner: Origin, address: ChannelAddress },
    SyncSent { from: Origin, to: Origin, phase: SyncPhase },
    SyncReceived { at: Origin, from: Origin, phase: SyncPhase },
}

#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<DeployEvent>>>);

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, e: DeployEvent) {
        self.0.lock().unwrap().push(e);
    }

    pub fn events(&self) -> Vec<DeployEvent> {
        self.0.lock().unwrap().clone()
    }

    /// Every application output connects only to an input created earlier.
    pub fn check_inputs_before_outputs(&self) -> Result<(), String> {
        let mut created = Vec::new();
        for e in self.events() {
            match e {
                DeployEvent::InputCreated { address, .. } => created.push(address),
                DeployEvent::OutputConnecting { owner, address } if !created.contains(&address) => {
                    return Err(format!("{owner} connected to {address} before it existed"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The host saw every CHANNELS_READY before its first START, and no node
    /// connected an output before receiving START.
    pub fn check_barrier(&self, nodes: u32) -> Result<(), String> {
        let mut ready = 0;
        let mut started = Vec::new();
        for e in self.events() {
            match e {
                DeployEvent::SyncReceived { at: Origin::Host, phase: SyncPhase::ChannelsReady, .. } => ready += 1,
                DeployEvent::SyncSent { from: Origin::Host, phase: SyncPhase::Start, .. } if ready < nodes => {
                    return Err(format!("START sent after only {ready} of {nodes} CHANNELS_READY"))
                }
                DeployEvent::SyncReceived { at, phase: SyncPhase::Start, .. } => started.push(at),
                DeployEvent::OutputConnecting { owner: owner @ Origin::Node(_), address } if !started.contains(&owner) => {
                    return Err(format!("node {owner} connected to {address} before START"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn record(log: Option<&EventLog>, e: DeployEvent) {
    if let Some(l) = log {
        l.record(e);
    }
}

/// A node as the host knows it after REGISTER.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRegistration {
    pub index: u32,
    pub ip: Ipv4Addr,
    pub load_port: u16,
    pub app_port: u16,
    pub writer: WriterId,
}

impl NodeRegistration {
    pub fn load_address(&self) -> ChannelAddress {
        ChannelAddress::new(self.ip, self.load_port, LOAD_CHANNEL)
    }
}

/// What a node announces about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeIdentity {
    pub ip: Ipv4Addr,
    pub load_port: u16,
    pub app_port: u16,
}

/// REGISTER payload: `ip`, `ip:load_port` or `ip:load_port:app_port`.
pub fn register_payload(me: &NodeIdentity) -> String {
    format!("{}:{}:{}", me.ip, me.load_port, me.app_port)
}

/// Parses a REGISTER payload, filling absent ports from `defaults`.
pub fn parse_register_payload(p: &[u8], defaults: (u16, u16)) -> Result<NodeIdentity, DeployError> {
    let text = std::str::from_utf8(p).map_err(|_| violation("REGISTER payload is not UTF-8"))?;
    let bad = || violation(format!("bad REGISTER payload `{text}`"));
    let mut parts = text.split(':');
    let ip = parts.next().and_then(crate::topology::parse_ipv4).ok_or_else(bad)?;
    let mut port = |default: u16| match parts.next() {
        None => Ok(default),
        Some(s) => s.parse::<u16>().ok().filter(|p| *p > 0).ok_or_else(bad),
    };
    let load_port = port(defaults.0)?;
    let app_port = port(defaults.1)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(NodeIdentity { ip, load_port, app_port })
}

/// Collects exactly `expected` registrations in arrival order.
pub fn host_registration(
    load_in: &mut InputEnd,
    expected: u32,
    timeout: Option<Duration>,
    default_ports: (u16, u16),
) -> Result<Vec<NodeRegistration>, DeployError> {
    load_in.expect_writers(expected as usize);
    let deadline = timeout.map(|t| Instant::now() + t);
    let mut regs: Vec<NodeRegistration> = Vec::new();
    while regs.len() < expected as usize {
        let left = deadline.map(|d| d.saturating_duration_since(Instant::now()));
        let event = match load_in.recv_event(left) {
            Err(NetError::Timeout(_)) => return Err(DeployError::Timeout { registered: regs.len() as u32, expected }),
            r => r?,
        };
        match event {
            ChannelEvent::Message(m) if m.kind == FrameKind::Register => {
                let id = parse_register_payload(&m.payload, default_ports)?;
                if regs.iter().any(|r| r.ip == id.ip && r.load_port == id.load_port) {
                    return Err(DeployError::DuplicateNode(format!("{}:{}", id.ip, id.load_port)));
                }
                log::info!("node {} registered from {}:{}", regs.len(), id.ip, id.load_port);
                regs.push(NodeRegistration {
                    index: regs.len() as u32,
                    ip: id.ip,
                    load_port: id.load_port,
                    app_port: id.app_port,
                    writer: m.writer,
                });
            }
            ChannelEvent::Message(m) => return Err(violation(format!("{:?} frame during registration", m.kind))),
            ChannelEvent::WriterClosed(w) => {
                if let Some(r) = regs.iter().find(|r| r.writer == w) {
                    return Err(DeployError::PeerClosed(r.index));
                }
            }
        }
    }
    Ok(regs)
}

/// Opens this node's load input, then registers with the host.
pub fn node_register(
    net: &Network,
    host_load: ChannelAddress,
    me: &NodeIdentity,
    window: Option<Duration>,
) -> Result<(InputEnd, OutputEnd), DeployError> {
    let load_in = net.create_input_end(ChannelAddress::new(me.ip, me.load_port, LOAD_CHANNEL), Arity::OneToOne)?;
    let mut out = match window {
        Some(w) => net.connect_output_end_within(host_load, w)?,
        None => net.connect_output_end(host_load)?,
    };
    out.send(FrameKind::Register, register_payload(me).as_bytes())?;
    Ok((load_in, out))
}

fn node_closed(index: u32) -> impl Fn(NetError) -> DeployError {
    move |e| match e {
        NetError::PeerClosed(_) | NetError::NoListener(_) => DeployError::PeerClosed(index),
        e => e.into(),
    }
}

/// Completes each template with its node's address and sends it as a PLAN.
/// Returns the completed plans and the host's load outputs, by node index.
pub fn distribute_plans(
    net: &Network,
    regs: &[NodeRegistration],
    templates: &[NodePlan],
) -> Result<(Vec<NodePlan>, Vec<OutputEnd>), DeployError> {
    if regs.len() != templates.len() {
        return Err(violation(format!("{} registrations for {} node plans", regs.len(), templates.len())));
    }
    let mut plans = Vec::new();
    let mut outs = Vec::new();
    for (reg, template) in regs.iter().zip(templates) {
        let plan = NodePlan { node_index: reg.index, ..template.assign(reg.ip, reg.app_port) };
        let mut out = net.connect_output_end(reg.load_address()).map_err(node_closed(reg.index))?;
        out.send(FrameKind::Plan, render_node_plan(&plan).as_bytes()).map_err(node_closed(reg.index))?;
        plans.push(plan);
        outs.push(out);
    }
    Ok((plans, outs))
}

/// Answers registrations that arrive after the cluster is full.
pub struct LateRejects {
    net: Network,
    nodes: u32,
    default_ports: (u16, u16),
    pending: Vec<JoinHandle<()>>,
}

impl LateRejects {
    pub fn new(net: Network, nodes: u32, default_ports: (u16, u16)) -> Self {
        Self { net, nodes, default_ports, pending: Vec::new() }
    }

    pub fn reject(&mut self, payload: &[u8]) {
        let Ok(id) = parse_register_payload(payload, self.default_ports) else {
            log::warn!("ignoring malformed late REGISTER");
            return;
        };
        log::warn!("rejecting late registration from {}:{}", id.ip, id.load_port);
        let net = self.net.clone();
        let message = format!("{PLAN_ERROR_PREFIX} cluster already has {} nodes", self.nodes);
        self.pending.push(thread::spawn(move || {
            let address = ChannelAddress::new(id.ip, id.load_port, LOAD_CHANNEL);
            if let Ok(mut out) = net.connect_output_end_within(address, Duration::from_secs(2)) {
                let _ = out.send(FrameKind::Plan, message.as_bytes());
            }
        }));
    }

    pub fn finish(&mut self) {
        for h in self.pending.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for LateRejects {
    fn drop(&mut self) {
        self.finish();
    }
}

/// Next load-network message from a registered node, rejecting late
/// registrations on the way. `Err(index)` reports that node's writer closing.
fn next_from_node(
    load_in: &mut InputEnd,
    regs: &[NodeRegistration],
    late: &mut LateRejects,
) -> Result<Result<(u32, Incoming), u32>, DeployError> {
    loop {
        match load_in.recv_event(None)? {
            ChannelEvent::Message(m) => match regs.iter().find(|r| r.writer == m.writer) {
                Some(r) => return Ok(Ok((r.index, m))),
                None if m.kind == FrameKind::Register => late.reject(&m.payload),
                None => return Err(violation(format!("{:?} frame from an unregistered writer", m.kind))),
            },
            ChannelEvent::WriterClosed(w) => {
                if let Some(r) = regs.iter().find(|r| r.writer == w) {
                    return Ok(Err(r.index));
                }
            }
        }
    }
}

/// Waits for CHANNELS_READY from every node.
pub fn host_await_channels_ready(
    load_in: &mut InputEnd,
    regs: &[NodeRegistration],
    late: &mut LateRejects,
    log: Option<&EventLog>,
) -> Result<(), DeployError> {
    let mut ready = vec![false; regs.len()];
    while ready.iter().any(|r| !r) {
        let (i, m) = next_from_node(load_in, regs, late)?.map_err(DeployError::PeerClosed)?;
        match (m.kind, SyncPhase::from_payload(&m.payload)) {
            (FrameKind::Sync, Some(SyncPhase::ChannelsReady)) if !ready[i as usize] => {
                ready[i as usize] = true;
                record(log, DeployEvent::SyncReceived { at: Origin::Host, from: Origin::Node(i), phase: SyncPhase::ChannelsReady });
            }
            (kind, phase) => return Err(violation(format!("node {i} sent {kind:?} {phase:?} before START"))),
        }
    }
    Ok(())
}

/// Sends START to every node, in index order.
pub fn host_send_start(node_outs: &mut [OutputEnd], log: Option<&EventLog>) -> Result<(), DeployError> {
    for (i, out) in node_outs.iter_mut().enumerate() {
        let i = i as u32;
        record(log, DeployEvent::SyncSent { from: Origin::Host, to: Origin::Node(i), phase: SyncPhase::Start });
        out.send(FrameKind::Sync, &SyncPhase::Start.payload()).map_err(node_closed(i))?;
    }
    Ok(())
}

/// Reads DONE and TIMING from every node and adds the host's own row.
pub fn gather_timings(
    load_in: &mut InputEnd,
    regs: &[NodeRegistration],
    host_load_ms: u64,
    host_run_ms: u64,
    late: &mut LateRejects,
) -> Result<TimingReport, DeployError> {
    let n = regs.len();
    let mut done = vec![false; n];
    let mut times: Vec<Option<(u64, u64)>> = vec![None; n];
    while times.iter().any(Option::is_none) {
        let (i, m) = match next_from_node(load_in, regs, late)? {
            Ok(x) => x,
            Err(i) if times[i as usize].is_none() => return Err(DeployError::PeerClosed(i)),
            Err(_) => continue,
        };
        let k = i as usize;
        match m.kind {
            FrameKind::Sync if SyncPhase::from_payload(&m.payload) == Some(SyncPhase::Done) && !done[k] => done[k] = true,
            FrameKind::Timing if done[k] && times[k].is_none() => {
                times[k] = Some(decode_timing(&m.payload).ok_or_else(|| violation(format!("node {i} sent a bad TIMING payload")))?);
            }
            kind => return Err(violation(format!("unexpected {kind:?} from node {i} while gathering timings"))),
        }
    }
    let mut rows = vec![TimingRow { origin: Origin::Host, load_ms: host_load_ms, run_ms: host_run_ms }];
    rows.extend(times.into_iter().enumerate().map(|(i, t)| {
        let (load_ms, run_ms) = t.expect("all timings present");
        TimingRow { origin: Origin::Node(i as u32), load_ms, run_ms }
    }));
    Ok(TimingReport { rows })
}

/// Wraps each worker's function hook; used to inject delays or faults.
pub type FunctionWrapper = Arc<dyn Fn(u32, u32, Box<dyn FunctionHook>) -> Box<dyn FunctionHook> + Send + Sync>;

#[derive(Clone)]
pub struct HostOptions {
    pub registry: Registry,
    pub image: bool,
    pub registration_timeout: Option<Duration>,
    pub log: Option<EventLog>,
    pub counters: Option<Arc<FarmCounters>>,
}

impl Default for HostOptions {
    fn default() -> Self {
        Self { registry: Registry::with_builtins(), image: false, registration_timeout: None, log: None, counters: None }
    }
}

#[derive(Debug)]
pub struct HostOutcome {
    pub summary: Summary,
    pub report: TimingReport,
    pub counters: CounterSnapshot,
    pub registrations: Vec<NodeRegistration>,
}

/// The host lifecycle: load protocol, application run, timing gather.
pub fn run_host(net: &Network, plan: &HostPlan, opts: &HostOptions) -> Result<HostOutcome, DeployError> {
    let t0 = Instant::now();
    let log = opts.log.as_ref();
    let n = plan.node_count;
    let source_w = opts.registry.get(&plan.source_workload).ok_or_else(|| DeployError::UnknownWorkload(plan.source_workload.clone()))?;
    let sink_w = opts.registry.get(&plan.sink_workload).ok_or_else(|| DeployError::UnknownWorkload(plan.sink_workload.clone()))?;
    let source = source_w.init_source(&plan.source_args)?;
    let sink = sink_w.init_sink(opts.image)?;
    let counters = opts.counters.clone().unwrap_or_default();
    let ports = (plan.load_port(), plan.app_port());

    let mut load_in = net.create_input_end(plan.load_input, Arity::ManyToOne)?;
    record(log, DeployEvent::InputCreated { owner: Origin::Host, address: plan.load_input });
    let regs = host_registration(&mut load_in, n, opts.registration_timeout, ports)?;
    let mut late = LateRejects::new(net.clone(), n, ports);

    let request_in = net.create_input_end(plan.app_request_input, Arity::ManyToOne)?;
    let result_in = net.create_input_end(plan.app_result_input, Arity::ManyToOne)?;
    request_in.expect_writers(n as usize);
    result_in.expect_writers(n as usize);
    for address in [plan.app_request_input, plan.app_result_input] {
        record(log, DeployEvent::InputCreated { owner: Origin::Host, address });
    }

    let (plans, mut node_outs) = distribute_plans(net, &regs, &plan.node_templates())?;
    verify_star(plan, &plans)?;
    host_await_channels_ready(&mut load_in, &regs, &mut late, log)?;
    let mut data_out = Vec::new();
    for p in &plans {
        let address = p.own_data_input.expect("completed plan");
        record(log, DeployEvent::OutputConnecting { owner: Origin::Host, address });
        data_out.push(net.connect_output_end(address).map_err(node_closed(p.node_index))?);
    }
    host_send_start(&mut node_outs, log)?;
    let load_ms = millis(t0.elapsed());

    let t_run = Instant::now();
    let summary = run_host_farm(&plan.source_workload, source, sink, HostEnds { request_in, result_in, data_out }, &counters)?;
    let run_ms = millis(t_run.elapsed());

    let report = gather_timings(&mut load_in, &regs, load_ms, run_ms, &mut late)?;
    late.finish();
    drop(node_outs);
    drop(load_in);
    Ok(HostOutcome { summary, report, counters: counters.snapshot(), registrations: regs })
}

#[derive(Clone)]
pub struct NodeOptions {
    pub host_load: ChannelAddress,
    pub identity: NodeIdentity,
    /// Connect-retry window for reaching the host; the network default if unset.
    pub window: Option<Duration>,
    pub registry: Registry,
    pub log: Option<EventLog>,
    pub counters: Option<Arc<FarmCounters>>,
    pub wrap: Option<FunctionWrapper>,
}

impl NodeOptions {
    pub fn new(host_load: ChannelAddress, identity: NodeIdentity) -> Self {
        Self { host_load, identity, window: None, registry: Registry::with_builtins(), log: None, counters: None, wrap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeOutcome {
    pub node_index: u32,
    pub load_ms: u64,
    pub run_ms: u64,
    pub processed: u64,
}

/// Reads this node's PLAN.
pub fn receive_plan(load_in: &mut InputEnd) -> Result<NodePlan, DeployError> {
    let m = load_in.recv()?;
    if m.kind != FrameKind::Plan {
        return Err(violation(format!("expected PLAN, got {:?}", m.kind)));
    }
    let text = String::from_utf8(m.payload).map_err(|_| violation("PLAN is not UTF-8"))?;
    if let Some(reason) = text.strip_prefix(PLAN_ERROR_PREFIX) {
        return Err(DeployError::Rejected(reason.trim().to_string()));
    }
    Ok(parse_node_plan(&text)?)
}

/// The node lifecycle: register, build channels, run, report timing.
pub fn run_node(net: &Network, opts: &NodeOptions) -> Result<NodeOutcome, DeployError> {
    let t0 = Instant::now();
    let log = opts.log.as_ref();
    let counters = opts.counters.clone().unwrap_or_default();
    let (mut load_in, mut host_out) = node_register(net, opts.host_load, &opts.identity, opts.window)?;
    let plan = receive_plan(&mut load_in)?;
    let me = Origin::Node(plan.node_index);
    let workload = opts.registry.get(&plan.workload_name).ok_or_else(|| DeployError::UnknownWorkload(plan.workload_name.clone()))?;
    let functions = (0..plan.workers)
        .map(|w| {
            let f = workload.init_function(&plan.init_args)?;
            Ok(match &opts.wrap {
                Some(wrap) => wrap(plan.node_index, w, f),
                None => f,
            })
        })
        .collect::<Result<Vec<_>, WorkloadError>>()?;

    let own = plan.own_data_input.ok_or_else(|| violation("PLAN without a data input"))?;
    let data_in = net.create_input_end(own, Arity::OneToOne)?;
    record(log, DeployEvent::InputCreated { owner: me, address: own });

    let mut barrier = NodeBarrier::new();
    barrier.advance(SyncPhase::ChannelsReady)?;
    record(log, DeployEvent::SyncSent { from: me, to: Origin::Host, phase: SyncPhase::ChannelsReady });
    host_out.send(FrameKind::Sync, &SyncPhase::ChannelsReady.payload())?;

    let m = load_in.recv()?;
    let phase = match (m.kind, SyncPhase::from_payload(&m.payload)) {
        (FrameKind::Sync, Some(p)) => p,
        (kind, _) => return Err(violation(format!("expected SYNC(START), got {kind:?}"))),
    };
    barrier.advance(phase)?;
    record(log, DeployEvent::SyncReceived { at: me, from: Origin::Host, phase });
    let load_ms = millis(t0.elapsed());

    let t_run = Instant::now();
    record(log, DeployEvent::OutputConnecting { owner: me, address: plan.host_request_address });
    let request_out = net.connect_output_end(plan.host_request_address)?;
    record(log, DeployEvent::OutputConnecting { owner: me, address: plan.host_result_address });
    let result_out = net.connect_output_end(plan.host_result_address)?;
    let processed = run_node_farm(
        plan.node_index,
        &plan.workload_name,
        functions,
        NodeEnds { request_out, data_in, result_out },
        &counters,
    )?;
    let run_ms = millis(t_run.elapsed());

    barrier.advance(SyncPhase::Done)?;
    record(log, DeployEvent::SyncSent { from: me, to: Origin::Host, phase: SyncPhase::Done });
    host_out.send(FrameKind::Sync, &SyncPhase::Done.payload())?;
    host_out.send(FrameKind::Timing, &encode_timing(load_ms, run_ms))?;
    Ok(NodeOutcome { node_index: plan.node_index, load_ms, run_ms, processed })
}

/// The local address this machine would use to reach `host`.
pub fn discover_local_ip(host: Ipv4Addr) -> io::Result<Ipv4Addr> {
    if host.is_loopback() {
        return Ok(host);
    }
    let s = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
    s.connect((host, 9))?;
    match s.local_addr()?.ip() {
        std::net::IpAddr::V4(ip) => Ok(ip),
        std::net::IpAddr::V6(_) => Err(io::Error::new(io::ErrorKind::AddrNotAvailable, "no IPv4 route to host")),
    }
}
