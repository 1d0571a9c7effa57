use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use csp_farm::deploy::{discover_local_ip, run_host, run_node, DeployError, HostOptions, NodeIdentity, NodeOptions};
use csp_farm::farm::FarmError;
use csp_farm::local::{run_local, LocalOptions};
use csp_farm::manifest::{parse_host_plan, render_host_plan, render_node_plan};
use csp_farm::model_check::{check_all, Assertion, Model, Mutation, DEFAULT_STATE_LIMIT};
use csp_farm::netchan::Network;
use csp_farm::spec_dsl::validate_spec;
use csp_farm::topology::{build_named_plans, ChannelAddress, DEFAULT_APP_PORT, DEFAULT_LOAD_PORT, LOAD_CHANNEL};
use csp_farm::workload::{render_pgm, RenderError};
use csp_farm::{parse_spec, NetworkSpec, Registry, Summary, TimingReport};

const EXIT_OTHER: u8 = 1;
const EXIT_SPEC: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_WORKLOAD: u8 = 4;
const EXIT_CHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "csp-farm", version, about = "Build, deploy and check work-farm process networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write `<name>.host.plan` and `<name>.node.plan` for a network spec.
    Build {
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        ports: Ports,
    },
    /// Run the host side of a deployment from its plan.
    Host {
        plan: PathBuf,
        /// Seconds to wait for every node to register.
        #[arg(long)]
        timeout: Option<f64>,
        /// Also write the timing CSV here.
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Run a node: register with the host at `host_ip` and do as it says.
    Node {
        host_ip: Ipv4Addr,
        #[command(flatten)]
        ports: Ports,
        /// The host's load port.
        #[arg(long, default_value_t = DEFAULT_LOAD_PORT)]
        host_load_port: u16,
        /// Address the host should use to reach this node.
        #[arg(long)]
        ip: Option<Ipv4Addr>,
        /// Seconds to keep retrying the host connection.
        #[arg(long)]
        window: Option<f64>,
    },
    /// Run host and nodes in this process over the in-process transport.
    Local {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Repeat the run and report mean and standard deviation of run_ms.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Model-check the farm's process network.
    Check {
        #[arg(long)]
        clusters: usize,
        /// terminator-short, collect-loop-f, collect-terminates or worker-nondet.
        #[arg(long)]
        mutate: Option<String>,
        #[arg(long, default_value_t = DEFAULT_STATE_LIMIT)]
        state_limit: usize,
    },
    /// Run a spec locally in image mode and write the image as PGM.
    Render {
        spec: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Ports {
    #[arg(long, default_value_t = DEFAULT_LOAD_PORT)]
    load_port: u16,
    #[arg(long, default_value_t = DEFAULT_APP_PORT)]
    app_port: u16,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    clusters: Option<u32>,
    #[arg(long)]
    workers: Option<u32>,
    /// First source argument.
    #[arg(long)]
    width: Option<i64>,
    /// Second source argument.
    #[arg(long)]
    escape: Option<i64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self { code, message: message.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn deploy_failure(e: DeployError) -> Failure {
    let code = match &e {
        DeployError::Manifest(_) | DeployError::Topology(_) | DeployError::UnknownWorkload(_) => EXIT_SPEC,
        DeployError::Workload(_)
        | DeployError::Farm(FarmError::SourceFault(_) | FarmError::WorkFault(_) | FarmError::SinkFault(_)) => {
            EXIT_WORKLOAD
        }
        _ => EXIT_PROTOCOL,
    };
    Failure::new(code, e)
}

fn render_failure(e: RenderError) -> Failure {
    match e {
        RenderError::MissingImageData => Failure::new(EXIT_WORKLOAD, e),
        RenderError::Io(_) => Failure::new(EXIT_OTHER, e),
    }
}

fn read(path: &Path, code: u8) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(code, format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path, registry: &Registry) -> Result<NetworkSpec, Failure> {
    let text = read(path, EXIT_SPEC)?;
    let spec = parse_spec(&text).map_err(|e| Failure::new(EXIT_SPEC, format!("{}: {e}", path.display())))?;
    validate_spec(spec, registry).map_err(|e| Failure::new(EXIT_SPEC, format!("{}: {e}", path.display())))
}

fn apply(spec: &mut NetworkSpec, o: &Overrides, registry: &Registry) -> Result<(), Failure> {
    if let Some(c) = o.clusters {
        spec.clusters = c;
    }
    if let Some(w) = o.workers {
        spec.workers_per_node = w;
    }
    for (i, v) in [o.width, o.escape].into_iter().enumerate() {
        if let Some(v) = v {
            match spec.source.init_args.get_mut(i) {
                Some(slot) => *slot = v,
                None => return Err(Failure::new(EXIT_SPEC, format!("source takes no argument {}", i + 1))),
            }
        }
    }
    *spec = validate_spec(spec.clone(), registry).map_err(|e| Failure::new(EXIT_SPEC, e))?;
    Ok(())
}

/// Waits briefly for runtime threads to wind down, then reports what is left.
fn report_handles(net: &Network) {
    let deadline = Instant::now() + Duration::from_secs(2);
    while net.open_handles() > 0 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    eprintln!("open_handles={}", net.open_handles());
}

fn print_run(report: &TimingReport, summary: &Summary) {
    print!("{}", report.to_csv());
    println!("{summary}");
}

fn build(spec_path: &Path, out_dir: &Path, ports: &Ports) -> Outcome {
    let registry = Registry::with_builtins();
    let spec = load_spec(spec_path, &registry)?;
    let name = spec_path.file_stem().and_then(|s| s.to_str()).unwrap_or("app");
    let (host, nodes) =
        build_named_plans(name, &spec, ports.load_port, ports.app_port).map_err(|e| Failure::new(EXIT_SPEC, e))?;
    fs::create_dir_all(out_dir).map_err(|e| Failure::new(EXIT_OTHER, e))?;
    let host_path = out_dir.join(format!("{name}.host.plan"));
    let node_path = out_dir.join(format!("{name}.node.plan"));
    let write = |p: &Path, text: String| fs::write(p, text).map_err(|e| Failure::new(EXIT_OTHER, format!("{}: {e}", p.display())));
    write(&host_path, render_host_plan(&host))?;
    write(&node_path, render_node_plan(&nodes[0]))?;
    println!("{}", host_path.display());
    println!("{}", node_path.display());
    Ok(())
}

fn host(plan_path: &Path, timeout: Option<f64>, timing: Option<&Path>, image: Option<&Path>) -> Outcome {
    let plan = parse_host_plan(&read(plan_path, EXIT_SPEC)?).map_err(|e| Failure::new(EXIT_SPEC, format!("{}: {e}", plan_path.display())))?;
    let net = Network::tcp();
    let opts = HostOptions {
        registry: Registry::with_builtins(),
        image: image.is_some(),
        registration_timeout: timeout.map(Duration::from_secs_f64),
        ..Default::default()
    };
    let result = run_host(&net, &plan, &opts);
    report_handles(&net);
    let outcome = result.map_err(deploy_failure)?;
    print_run(&outcome.report, &outcome.summary);
    if let Some(p) = timing {
        fs::write(p, outcome.report.to_csv()).map_err(|e| Failure::new(EXIT_OTHER, e))?;
    }
    if let Some(p) = image {
        render_pgm(&outcome.summary, p).map_err(render_failure)?;
    }
    Ok(())
}

fn node(host_ip: Ipv4Addr, ports: &Ports, host_load_port: u16, ip: Option<Ipv4Addr>, window: Option<f64>) -> Outcome {
    let ip = match ip {
        Some(ip) => ip,
        None => discover_local_ip(host_ip).map_err(|e| Failure::new(EXIT_PROTOCOL, format!("cannot find a route to {host_ip}: {e}")))?,
    };
    let identity = NodeIdentity { ip, load_port: ports.load_port, app_port: ports.app_port };
    let net = Network::tcp();
    let opts = NodeOptions {
        window: window.map(Duration::from_secs_f64),
        ..NodeOptions::new(ChannelAddress::new(host_ip, host_load_port, LOAD_CHANNEL), identity)
    };
    let result = run_node(&net, &opts);
    report_handles(&net);
    let n = result.map_err(deploy_failure)?;
    println!("node {} load_ms={} run_ms={} processed={}", n.node_index, n.load_ms, n.run_ms, n.processed);
    Ok(())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn local(spec_path: &Path, overrides: &Overrides, runs: u32, image: Option<&Path>) -> Outcome {
    let registry = Registry::with_builtins();
    let mut spec = load_spec(spec_path, &registry)?;
    apply(&mut spec, overrides, &registry)?;
    let opts = LocalOptions { image: image.is_some(), ..Default::default() };
    let mut run_ms = Vec::new();
    let mut last = None;
    for _ in 0..runs.max(1) {
        let out = run_local(&spec, &registry, &opts).map_err(deploy_failure)?;
        eprintln!("open_handles={}", out.open_handles_after);
        run_ms.push(out.report.host().map_or(0, |h| h.run_ms) as f64);
        last = Some(out);
    }
    let out = last.expect("at least one run");
    print_run(&out.report, &out.summary);
    if runs > 1 {
        let (mean, sd) = mean_sd(&run_ms);
        println!("runs={} run_ms mean={mean:.1} sd={sd:.1}", run_ms.len());
    }
    if let Some(p) = image {
        render_pgm(&out.summary, p).map_err(render_failure)?;
    }
    Ok(())
}

fn check(clusters: usize, mutate: Option<&str>, state_limit: usize) -> Outcome {
    let mutation = mutate.map(str::parse::<Mutation>).transpose().map_err(|e| Failure::new(EXIT_SPEC, e))?;
    let model = Model::new(clusters, mutation).map_err(|e| Failure::new(EXIT_SPEC, e))?;
    let results = check_all(model, state_limit).map_err(|e| Failure::new(EXIT_CHECK, e))?;
    let mut failed = false;
    for r in &results {
        if r.assertion == Assertion::DeterministicHidden {
            println!("{r} (informational)");
        } else {
            failed |= !r.passed;
            println!("{r}");
        }
    }
    if failed {
        return Err(Failure::new(EXIT_CHECK, "one or more assertions failed"));
    }
    Ok(())
}

fn render(spec_path: &Path, out: &Path, overrides: &Overrides) -> Outcome {
    let registry = Registry::with_builtins();
    let mut spec = load_spec(spec_path, &registry)?;
    apply(&mut spec, overrides, &registry)?;
    let opts = LocalOptions { image: true, ..Default::default() };
    let run = run_local(&spec, &registry, &opts).map_err(deploy_failure)?;
    render_pgm(&run.summary, out).map_err(render_failure)?;
    println!("{}", run.summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build { spec, out_dir, ports } => build(spec, out_dir, ports),
        Command::Host { plan, timeout, timing, image } => host(plan, *timeout, timing.as_deref(), image.as_deref()),
        Command::Node { host_ip, ports, host_load_port, ip, window } => node(*host_ip, ports, *host_load_port, *ip, *window),
        Command::Local { spec, overrides, runs, image } => local(spec, overrides, *runs, image.as_deref()),
        Command::Check { clusters, mutate, state_limit } => check(*clusters, mutate.as_deref(), *state_limit),
        Command::Render { spec, out, overrides } => render(spec, out, overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
