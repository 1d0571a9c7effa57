//! Channel addressing and per-machine plans.
//!
//! A net channel is named by its input end: `ip:port/channel`. The load
//! network uses channel 1 on the load port of every machine. On the
//! application port the host owns two input ends (requests on channel 1,
//! results on channel 2) and every node owns one data input on channel 1.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::spec_dsl::NetworkSpec;

pub const DEFAULT_LOAD_PORT: u16 = 2000;
pub const DEFAULT_APP_PORT: u16 = 3000;

pub const LOAD_CHANNEL: u16 = 1;
pub const REQUEST_CHANNEL: u16 = 1;
pub const RESULT_CHANNEL: u16 = 2;
pub const DATA_CHANNEL: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("load port and application port are both {0}")]
    PortClash(u16),
    #[error("malformed channel address {0:?} (expected ip:port/channel)")]
    BadAddress(String),
    #[error("plan is not a client-server star: {0}")]
    NotAStar(String),
}

/// The address of a net channel's input end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelAddress {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub channel: u16,
}

impl ChannelAddress {
    pub fn new(ip: Ipv4Addr, port: u16, channel: u16) -> Self {
        Self { ip, port, channel }
    }
}

impl fmt::Display for ChannelAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}/{}", self.ip, self.port, self.channel)
    }
}

impl FromStr for ChannelAddress {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopologyError::BadAddress(s.to_string());
        let (host, rest) = s.split_once(':').ok_or_else(bad)?;
        let (port, channel) = rest.split_once('/').ok_or_else(bad)?;
        let ip = parse_ipv4(host).ok_or_else(bad)?;
        let port = parse_decimal::<u16>(port).ok_or_else(bad)?;
        let channel = parse_decimal::<u16>(channel).ok_or_else(bad)?;
        if port == 0 {
            return Err(bad());
        }
        Ok(Self { ip, port, channel })
    }
}

pub fn format_address(a: &ChannelAddress) -> String {
    a.to_string()
}

pub fn parse_address(s: &str) -> Result<ChannelAddress, TopologyError> {
    s.parse()
}

/// Strict dotted-quad parse: four decimal octets, no signs or whitespace.
pub(crate) fn parse_ipv4(s: &str) -> Option<Ipv4Addr> {
    let mut octets = [0u8; 4];
    let mut parts = s.split('.');
    for slot in octets.iter_mut() {
        *slot = parse_decimal::<u8>(parts.next()?)?;
    }
    if parts.next().is_some() {
        return None;
    }
    Some(Ipv4Addr::from(octets))
}

fn parse_decimal<T: FromStr>(s: &str) -> Option<T> {
    if s.is_empty() || s.len() > 5 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Host-side wiring: the load network input plus the two application inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostPlan {
    pub name: String,
    pub load_input: ChannelAddress,
    pub app_request_input: ChannelAddress,
    pub app_result_input: ChannelAddress,
    pub node_count: u32,
    pub workers_per_node: u32,
    pub source_workload: String,
    pub source_args: Vec<i64>,
    pub sink_workload: String,
}

impl HostPlan {
    pub fn host_ip(&self) -> Ipv4Addr {
        self.load_input.ip
    }

    pub fn load_port(&self) -> u16 {
        self.load_input.port
    }

    pub fn app_port(&self) -> u16 {
        self.app_request_input.port
    }

    /// The node plan templates implied by this host plan.
    pub fn node_templates(&self) -> Vec<NodePlan> {
        (0..self.node_count)
            .map(|i| NodePlan {
                node_index: i,
                host_load_address: self.load_input,
                host_request_address: self.app_request_input,
                host_result_address: self.app_result_input,
                own_data_input: None,
                workers: self.workers_per_node,
                workload_name: self.source_workload.clone(),
                init_args: self.source_args.clone(),
            })
            .collect()
    }
}

/// What one node needs to build its part of the application network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePlan {
    pub node_index: u32,
    pub host_load_address: ChannelAddress,
    pub host_request_address: ChannelAddress,
    pub host_result_address: ChannelAddress,
    /// Unknown until the node registers.
    pub own_data_input: Option<ChannelAddress>,
    pub workers: u32,
    pub workload_name: String,
    pub init_args: Vec<i64>,
}

impl NodePlan {
    /// Completes a template with the registering node's address.
    pub fn assign(&self, node_ip: Ipv4Addr, app_port: u16) -> NodePlan {
        NodePlan {
            own_data_input: Some(ChannelAddress::new(node_ip, app_port, DATA_CHANNEL)),
            ..self.clone()
        }
    }
}

pub fn build_plans(
    spec: &NetworkSpec,
    load_port: u16,
    app_port: u16,
) -> Result<(HostPlan, Vec<NodePlan>), TopologyError> {
    build_named_plans("app", spec, load_port, app_port)
}

pub fn build_named_plans(
    name: &str,
    spec: &NetworkSpec,
    load_port: u16,
    app_port: u16,
) -> Result<(HostPlan, Vec<NodePlan>), TopologyError> {
    if load_port == app_port {
        return Err(TopologyError::PortClash(load_port));
    }
    let ip = spec.host_ip;
    let host = HostPlan {
        name: name.to_string(),
        load_input: ChannelAddress::new(ip, load_port, LOAD_CHANNEL),
        app_request_input: ChannelAddress::new(ip, app_port, REQUEST_CHANNEL),
        app_result_input: ChannelAddress::new(ip, app_port, RESULT_CHANNEL),
        node_count: spec.clusters,
        workers_per_node: spec.workers_per_node,
        source_workload: spec.source.workload.clone(),
        source_args: spec.source.init_args.clone(),
        sink_workload: spec.sink.workload.clone(),
    };
    let nodes = host.node_templates();
    Ok((host, nodes))
}

/// Checks that the request/data relation between the host and completed node
/// plans is a star centred on the host, with no shared input ends and the
/// load and application networks on disjoint ports.
pub fn verify_star(host: &HostPlan, nodes: &[NodePlan]) -> Result<(), TopologyError> {
    let fail = |m: String| Err(TopologyError::NotAStar(m));
    if host.load_port() == host.app_port() {
        return fail("load and application networks share a port".into());
    }
    let mut inputs = vec![host.load_input, host.app_request_input, host.app_result_input];
    let mut seen_index = vec![false; host.node_count as usize];
    for n in nodes {
        let Some(slot) = seen_index.get_mut(n.node_index as usize) else {
            return fail(format!("node index {} out of range", n.node_index));
        };
        if std::mem::replace(slot, true) {
            return fail(format!("node index {} appears twice", n.node_index));
        }
        if n.host_request_address != host.app_request_input
            || n.host_result_address != host.app_result_input
            || n.host_load_address != host.load_input
        {
            return fail(format!("node {} does not point at the host", n.node_index));
        }
        let Some(own) = n.own_data_input else {
            return fail(format!("node {} has no data input", n.node_index));
        };
        if own.port == host.load_port() && own.ip == host.host_ip() {
            return fail(format!("node {} data input is on the load port", n.node_index));
        }
        inputs.push(own);
    }
    if seen_index.iter().any(|s| !s) {
        return fail("missing node plans".into());
    }
    let mut sorted = inputs.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != inputs.len() {
        return fail("two input ends share an address".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_dsl::parse_spec;
    use proptest::prelude::*;

    fn spec(clusters: u32) -> NetworkSpec {
        parse_spec(&format!(
            "const width = 5600\n@emit 192.168.1.176\nsource mandelbrot args [width, 1000]\n\
             @cluster {clusters}\nworkers 4\n@collect\nsink mandelbrot\n"
        ))
        .unwrap()
    }

    #[test]
    fn address_formats_like_jcsp() {
        let a = ChannelAddress::new(Ipv4Addr::new(192, 168, 1, 176), 2000, 1);
        assert_eq!(format_address(&a), "192.168.1.176:2000/1");
    }

    #[test]
    fn parses_address() {
        let a = parse_address("10.0.0.1:3000/2").unwrap();
        assert_eq!(a, ChannelAddress::new(Ipv4Addr::new(10, 0, 0, 1), 3000, 2));
    }

    #[test]
    fn rejects_malformed_addresses() {
        for s in [
            "10.0.0.1:3000",
            "10.0.0.1/3",
            "10.0.0:3000/1",
            "10.0.0.256:3000/1",
            "10.0.0.1:0/1",
            "10.0.0.1:70000/1",
            "10.0.0.1:+30/1",
            " 10.0.0.1:3000/1",
        ] {
            assert!(matches!(parse_address(s), Err(TopologyError::BadAddress(_))), "{s}");
        }
    }

    #[test]
    fn two_cluster_plans() {
        let (host, nodes) = build_plans(&spec(2), 2000, 3000).unwrap();
        assert_eq!(host.load_input.to_string(), "192.168.1.176:2000/1");
        assert_eq!(host.app_request_input.to_string(), "192.168.1.176:3000/1");
        assert_eq!(host.app_result_input.to_string(), "192.168.1.176:3000/2");
        assert_eq!(nodes.iter().map(|n| n.node_index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(nodes.iter().all(|n| n.own_data_input.is_none()));
        assert!(nodes.iter().all(|n| n.host_load_address == host.load_input));
    }

    #[test]
    fn single_cluster_plan() {
        let (_, nodes) = build_plans(&spec(1), 2000, 3000).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].node_index, 0);
    }

    #[test]
    fn port_clash() {
        assert_eq!(build_plans(&spec(2), 2000, 2000), Err(TopologyError::PortClash(2000)));
    }

    #[test]
    fn completed_plans_form_a_star() {
        let (host, nodes) = build_plans(&spec(3), 2000, 3000).unwrap();
        let done: Vec<_> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| n.assign(Ipv4Addr::new(192, 168, 1, 20 + i as u8), 3000))
            .collect();
        verify_star(&host, &done).unwrap();

        let mut clash = done.clone();
        clash[1].own_data_input = clash[0].own_data_input;
        assert!(verify_star(&host, &clash).is_err());
        assert!(verify_star(&host, &done[..2]).is_err());
    }

    proptest! {
        #[test]
        fn address_round_trip(ip: u32, port in 1u16.., channel: u16) {
            let a = ChannelAddress::new(Ipv4Addr::from(ip), port, channel);
            prop_assert_eq!(parse_address(&format_address(&a)).unwrap(), a);
        }
    }
}
