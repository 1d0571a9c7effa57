//! Single-machine mode: the host and every node as threads of one process,
//! talking over the in-process loopback transport with the full load protocol.

use std::net::Ipv4Addr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::deploy::{
    run_host, run_node, DeployError, EventLog, FunctionWrapper, HostOptions, NodeIdentity, NodeOptions, NodeOutcome,
    TimingReport,
};
use crate::farm::{CounterSnapshot, FarmCounters};
use crate::netchan::{ChannelAddress, FrameKind, Network};
use crate::spec_dsl::NetworkSpec;
use crate::topology::{build_plans, DEFAULT_APP_PORT, DEFAULT_LOAD_PORT, LOAD_CHANNEL};
use crate::workload::{Registry, Summary};

#[derive(Clone)]
pub struct LocalOptions {
    pub image: bool,
    pub load_port: u16,
    pub app_port: u16,
    pub wrap: Option<FunctionWrapper>,
    pub log: Option<EventLog>,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self { image: false, load_port: DEFAULT_LOAD_PORT, app_port: DEFAULT_APP_PORT, wrap: None, log: None }
    }
}

#[derive(Debug)]
pub struct LocalOutcome {
    pub summary: Summary,
    pub report: TimingReport,
    pub counters: CounterSnapshot,
    pub nodes: Vec<NodeOutcome>,
    /// Channel ends, sockets and runtime threads still alive after the run.
    pub open_handles_after: usize,
}

/// Runs `spec` with its host at 127.0.0.1. Node `i` (by start order) uses
/// load port `load_port + 1 + i` and application port `app_port + 1 + i`.
pub fn run_local(spec: &NetworkSpec, registry: &Registry, opts: &LocalOptions) -> Result<LocalOutcome, DeployError> {
    for name in [&spec.source.workload, &spec.sink.workload] {
        if registry.get(name).is_none() {
            return Err(DeployError::UnknownWorkload(name.clone()));
        }
    }
    let spec = NetworkSpec { host_ip: Ipv4Addr::LOCALHOST, ..spec.clone() };
    let (plan, _) = build_plans(&spec, opts.load_port, opts.app_port)?;
    let net = Network::loopback();
    let counters = Arc::new(FarmCounters::new());
    let host_opts = HostOptions {
        registry: registry.clone(),
        image: opts.image,
        registration_timeout: Some(Duration::from_secs(30)),
        log: opts.log.clone(),
        counters: Some(counters.clone()),
    };
    let (host, nodes) = thread::scope(|s| {
        let identities: Vec<_> = (0..plan.node_count)
            .map(|i| {
                let offset = u16::try_from(i + 1).expect("node count fits the port range");
                NodeIdentity { ip: Ipv4Addr::LOCALHOST, load_port: opts.load_port + offset, app_port: opts.app_port + offset }
            })
            .collect();
        let nodes: Vec<_> = identities
            .iter()
            .map(|&identity| {
                let node_opts = NodeOptions {
                    registry: registry.clone(),
                    log: opts.log.clone(),
                    counters: Some(counters.clone()),
                    wrap: opts.wrap.clone(),
                    ..NodeOptions::new(plan.load_input, identity)
                };
                let net = net.clone();
                s.spawn(move || run_node(&net, &node_opts))
            })
            .collect();
        let host = run_host(&net, &plan, &host_opts);
        if host.is_err() {
            release_waiting_nodes(&net, &identities);
        }
        let nodes: Vec<_> = nodes.into_iter().map(|h| h.join().expect("node thread panicked")).collect();
        (host, nodes)
    });
    let failed = host.is_err() || nodes.iter().any(Result::is_err);
    if failed {
        let errors = std::iter::once(host.err()).chain(nodes.into_iter().map(Result::err));
        return Err(errors.flatten().min_by_key(DeployError::rank).expect("at least one error"));
    }
    let host = host.expect("checked");
    let mut outcomes: Vec<NodeOutcome> = nodes.into_iter().map(|n| n.expect("checked")).collect();
    outcomes.sort_by_key(|n| n.node_index);
    Ok(LocalOutcome {
        summary: host.summary,
        report: host.report,
        counters: counters.snapshot(),
        nodes: outcomes,
        open_handles_after: net.open_handles(),
    })
}

/// Nodes still waiting for a PLAN would wait forever once the host is gone.
fn release_waiting_nodes(net: &Network, nodes: &[NodeIdentity]) {
    for n in nodes {
        let address = ChannelAddress::new(n.ip, n.load_port, LOAD_CHANNEL);
        if let Ok(mut out) = net.connect_output_end_within(address, Duration::from_millis(100)) {
            let _ = out.send(FrameKind::Plan, b"error: host stopped");
        }
    }
}
