//! `key: value` manifests for host and node plans.
//!
//! The same text is written by `csp-farm build` and carried in PLAN frames.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::topology::{parse_address, ChannelAddress, HostPlan, NodePlan};

const UNASSIGNED: &str = "unassigned";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("manifest line {line}: {message}")]
pub struct ManifestError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ManifestError {
    ManifestError { line, message: message.into() }
}

fn render_args(args: &[i64]) -> String {
    args.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
}

pub fn render_host_plan(p: &HostPlan) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
    put("kind", "host".into());
    put("name", p.name.clone());
    put("load_input", p.load_input.to_string());
    put("app_request_input", p.app_request_input.to_string());
    put("app_result_input", p.app_result_input.to_string());
    put("node_count", p.node_count.to_string());
    put("workers_per_node", p.workers_per_node.to_string());
    put("source_workload", p.source_workload.clone());
    put("source_args", render_args(&p.source_args));
    put("sink_workload", p.sink_workload.clone());
    s
}

pub fn render_node_plan(p: &NodePlan) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
    put("kind", "node".into());
    put("node_index", p.node_index.to_string());
    put("host_load_address", p.host_load_address.to_string());
    put("host_request_address", p.host_request_address.to_string());
    put("host_result_address", p.host_result_address.to_string());
    put("own_data_input", p.own_data_input.map_or_else(|| UNASSIGNED.to_string(), |a| a.to_string()));
    put("workers", p.workers.to_string());
    put("workload", p.workload_name.clone());
    put("init_args", render_args(&p.init_args));
    s
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
    last_line: usize,
}

impl Fields {
    fn parse(text: &str, kind: &str) -> Result<Self, ManifestError> {
        let mut map = BTreeMap::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            last_line = n;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| err(n, "expected `key: value`"))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), (n, v)).is_some() {
                return Err(err(n, format!("duplicate key `{k}`")));
            }
        }
        let f = Self { map, last_line };
        let (line, found) = f.raw("kind")?;
        if found != kind {
            return Err(err(line, format!("expected a {kind} plan, found `{found}`")));
        }
        Ok(f)
    }

    fn raw(&self, key: &str) -> Result<(usize, &str), ManifestError> {
        self.map
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| err(self.last_line + 1, format!("missing key `{key}`")))
    }

    fn string(&self, key: &str) -> Result<String, ManifestError> {
        let (line, v) = self.raw(key)?;
        if v.is_empty() {
            return Err(err(line, format!("`{key}` is empty")));
        }
        Ok(v.to_string())
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T, ManifestError> {
        let (line, v) = self.raw(key)?;
        v.parse().map_err(|_| err(line, format!("`{key}` is not a valid number: `{v}`")))
    }

    fn address(&self, key: &str) -> Result<ChannelAddress, ManifestError> {
        let (line, v) = self.raw(key)?;
        parse_address(v).map_err(|e| err(line, e.to_string()))
    }

    fn args(&self, key: &str) -> Result<Vec<i64>, ManifestError> {
        let (line, v) = self.raw(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|a| a.trim().parse().map_err(|_| err(line, format!("bad integer `{a}` in `{key}`"))))
            .collect()
    }
}

pub fn parse_host_plan(text: &str) -> Result<HostPlan, ManifestError> {
    let f = Fields::parse(text, "host")?;
    Ok(HostPlan {
        name: f.string("name")?,
        load_input: f.address("load_input")?,
        app_request_input: f.address("app_request_input")?,
        app_result_input: f.address("app_result_input")?,
        node_count: f.number("node_count")?,
        workers_per_node: f.number("workers_per_node")?,
        source_workload: f.string("source_workload")?,
        source_args: f.args("source_args")?,
        sink_workload: f.string("sink_workload")?,
    })
}

pub fn parse_node_plan(text: &str) -> Result<NodePlan, ManifestError> {
    let f = Fields::parse(text, "node")?;
    let own_data_input = match f.raw("own_data_input")? {
        (_, UNASSIGNED) => None,
        _ => Some(f.address("own_data_input")?),
    };
    Ok(NodePlan {
        node_index: f.number("node_index")?,
        host_load_address: f.address("host_load_address")?,
        host_request_address: f.address("host_request_address")?,
        host_result_address: f.address("host_result_address")?,
        own_data_input,
        workers: f.number("workers")?,
        workload_name: f.string("workload")?,
        init_args: f.args("init_args")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn host() -> HostPlan {
        let ip = Ipv4Addr::new(192, 168, 1, 176);
        HostPlan {
            name: "mandel".into(),
            load_input: ChannelAddress::new(ip, 2000, 1),
            app_request_input: ChannelAddress::new(ip, 3000, 1),
            app_result_input: ChannelAddress::new(ip, 3000, 2),
            node_count: 2,
            workers_per_node: 4,
            source_workload: "mandelbrot".into(),
            source_args: vec![5600, 1000],
            sink_workload: "mandelbrot".into(),
        }
    }

    #[test]
    fn host_round_trip() {
        let text = render_host_plan(&host());
        assert!(text.contains("load_input: 192.168.1.176:2000/1\n"));
        assert_eq!(parse_host_plan(&text).unwrap(), host());
    }

    #[test]
    fn node_round_trip() {
        let template = host().node_templates().remove(1);
        assert_eq!(parse_node_plan(&render_node_plan(&template)).unwrap(), template);
        let done = template.assign(Ipv4Addr::new(10, 0, 0, 7), 3000);
        let text = render_node_plan(&done);
        assert!(text.contains("own_data_input: 10.0.0.7:3000/1\n"));
        assert_eq!(parse_node_plan(&text).unwrap(), done);
    }

    #[test]
    fn errors_name_lines() {
        let text = render_host_plan(&host()).replace("node_count: 2", "node_count: two");
        assert_eq!(parse_host_plan(&text).unwrap_err().line, 6);
        let missing: String = render_host_plan(&host()).lines().filter(|l| !l.starts_with("name")).map(|l| format!("{l}\n")).collect();
        assert!(parse_host_plan(&missing).unwrap_err().message.contains("name"));
        assert!(parse_node_plan(&render_host_plan(&host())).is_err());
    }
}
