//! The application process network.
//!
//! Host: `emit → server (onrl) ⇒ nodes ⇒ host fan (afo) → collect`.
//! Node: `client (nrfa) → workers → node fan (afoc)`.
//!
//! `⇒` marks net channels; the arrows inside one machine are unbuffered
//! in-process channels with the same rendezvous behaviour. Every loop is one
//! sequential process. A universal terminator (UT) from emit shuts the
//! network down stage by stage.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;

use crossbeam_channel::{bounded, Receiver, Select, Sender, TrySendError};
use thiserror::Error;

use crate::netchan::{Envelope, FrameKind, InputEnd, NetError, OutputEnd};
use crate::workload::{FunctionHook, SinkHooks, SourceHooks, Status, Summary};

#[derive(Debug, Error)]
pub enum FarmError {
    #[error("source fault: {0}")]
    SourceFault(String),
    #[error("work fault: {0}")]
    WorkFault(String),
    #[error("sink fault: {0}")]
    SinkFault(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{0} stopped early")]
    Disconnected(&'static str),
}

impl FarmError {
    /// Lower is closer to the root cause when several processes fail together.
    pub(crate) fn rank(&self) -> u8 {
        match self {
            Self::SourceFault(_) | Self::WorkFault(_) | Self::SinkFault(_) => 0,
            Self::ProtocolViolation(_) => 1,
            Self::Net(NetError::PeerClosed(_) | NetError::AllWritersClosed(_)) => 3,
            Self::Net(_) => 2,
            Self::Disconnected(_) => 4,
        }
    }
}

/// Picks the most telling error from a set of process results.
pub(crate) fn first_cause<T>(results: Vec<Result<T, FarmError>>) -> Result<Vec<T>, FarmError> {
    let mut ok = Vec::new();
    let mut worst: Option<FarmError> = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                if worst.as_ref().is_none_or(|w| e.rank() < w.rank()) {
                    worst = Some(e);
                }
            }
        }
    }
    worst.map_or(Ok(ok), Err)
}

/// Message and terminator counts per stage.
#[derive(Debug, Default)]
pub struct FarmCounters {
    emitted: AtomicU64,
    emit_ut: AtomicU64,
    server_ut: AtomicU64,
    client_ut: AtomicU64,
    worker_ut: AtomicU64,
    node_fan_ut: AtomicU64,
    host_fan_ut: AtomicU64,
    collect_ut: AtomicU64,
    collected: AtomicU64,
    processed: Mutex<BTreeMap<u32, u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub emitted: u64,
    pub emit_ut: u64,
    pub server_ut: u64,
    pub client_ut: u64,
    pub worker_ut: u64,
    pub node_fan_ut: u64,
    pub host_fan_ut: u64,
    pub collect_ut: u64,
    pub collected: u64,
    /// Instances processed by each node's workers.
    pub processed: BTreeMap<u32, u64>,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::SeqCst);
}

impl FarmCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::SeqCst);
        CounterSnapshot {
            emitted: get(&self.emitted),
            emit_ut: get(&self.emit_ut),
            server_ut: get(&self.server_ut),
            client_ut: get(&self.client_ut),
            worker_ut: get(&self.worker_ut),
            node_fan_ut: get(&self.node_fan_ut),
            host_fan_ut: get(&self.host_fan_ut),
            collect_ut: get(&self.collect_ut),
            collected: get(&self.collected),
            processed: self.processed.lock().unwrap().clone(),
        }
    }

    fn processed_by(&self, node: u32) {
        *self.processed.lock().unwrap().entry(node).or_default() += 1;
    }
}

impl CounterSnapshot {
    /// Checks the terminator table for a quiescent run: emit 1, server N,
    /// clients N·w, workers N·w, node fans N, host fan 1, collect 1, and
    /// every emitted instance collected.
    pub fn check_conservation(&self, nodes: u64, workers: u64) -> Result<(), String> {
        let expect = [
            ("emit", self.emit_ut, 1),
            ("server", self.server_ut, nodes),
            ("clients", self.client_ut, nodes * workers),
            ("workers", self.worker_ut, nodes * workers),
            ("node fans", self.node_fan_ut, nodes),
            ("host fan", self.host_fan_ut, 1),
            ("collect", self.collect_ut, 1),
        ];
        for (stage, got, want) in expect {
            if got != want {
                return Err(format!("{stage} sent {got} terminators, expected {want}"));
            }
        }
        if self.emitted != self.collected {
            return Err(format!("emitted {} but collected {}", self.emitted, self.collected));
        }
        let processed: u64 = self.processed.values().sum();
        if processed != self.emitted {
            return Err(format!("workers processed {processed} of {} instances", self.emitted));
        }
        Ok(())
    }
}

pub fn emit_loop(
    workload: &str,
    source: &mut dyn SourceHooks,
    out: &Sender<Envelope>,
    counters: &FarmCounters,
) -> Result<u64, FarmError> {
    let mut emitted = 0;
    loop {
        match source.create_instance() {
            (Status::NormalContinuation | Status::CompletedOk, Some(body)) => {
                out.send(Envelope::data(workload, body)).map_err(|_| FarmError::Disconnected("server"))?;
                emitted += 1;
                bump(&counters.emitted);
            }
            (Status::NormalTermination, _) => {
                out.send(Envelope::terminator(workload)).map_err(|_| FarmError::Disconnected("server"))?;
                bump(&counters.emit_ut);
                return Ok(emitted);
            }
            (Status::Fault(m), _) => return Err(FarmError::SourceFault(m)),
            (s, None) => return Err(FarmError::SourceFault(format!("{s:?} without an instance"))),
        }
    }
}

fn read_request(request_in: &mut InputEnd, nodes: usize) -> Result<usize, FarmError> {
    let m = request_in.recv()?;
    let index = match (m.kind, <[u8; 4]>::try_from(m.payload.as_slice())) {
        (FrameKind::Data, Ok(b)) => u32::from_be_bytes(b) as usize,
        _ => return Err(FarmError::ProtocolViolation(format!("malformed request ({:?} frame)", m.kind))),
    };
    if index >= nodes {
        return Err(FarmError::ProtocolViolation(format!("request from unknown node {index}")));
    }
    Ok(index)
}

/// onrl: one object at a time to whichever node asks next. On UT, answers
/// one request from each node with UT, in request order.
pub fn server_loop(
    from_emit: &Receiver<Envelope>,
    request_in: &mut InputEnd,
    data_out: &mut [OutputEnd],
    counters: &FarmCounters,
) -> Result<(), FarmError> {
    let nodes = data_out.len();
    loop {
        let env = from_emit.recv().map_err(|_| FarmError::Disconnected("emit"))?;
        if env.is_terminator() {
            let mut served = vec![false; nodes];
            for _ in 0..nodes {
                let i = read_request(request_in, nodes)?;
                if std::mem::replace(&mut served[i], true) {
                    return Err(FarmError::ProtocolViolation(format!("node {i} asked again after its terminator")));
                }
                data_out[i].write(&env)?;
                bump(&counters.server_ut);
            }
            return Ok(());
        }
        let i = read_request(request_in, nodes)?;
        data_out[i].write(&env)?;
    }
}

/// Hands `env` to the lowest-index idle worker, or waits for any to become idle.
fn dispatch(workers: &[Sender<Envelope>], env: Envelope) -> Result<(), FarmError> {
    let mut env = env;
    for tx in workers {
        match tx.try_send(env) {
            Ok(()) => return Ok(()),
            Err(TrySendError::Full(e)) => env = e,
            Err(TrySendError::Disconnected(_)) => return Err(FarmError::Disconnected("worker")),
        }
    }
    let mut sel = Select::new();
    for tx in workers {
        sel.send(tx);
    }
    let op = sel.select();
    let i = op.index();
    op.send(&workers[i], env).map_err(|_| FarmError::Disconnected("worker"))
}

/// nrfa: a one-place buffer between the server and this node's workers.
pub fn client_loop(
    node_index: u32,
    request_out: &mut OutputEnd,
    data_in: &mut InputEnd,
    workers: &[Sender<Envelope>],
    counters: &FarmCounters,
) -> Result<(), FarmError> {
    let request = node_index.to_be_bytes();
    loop {
        request_out.send(FrameKind::Data, &request)?;
        let env = data_in.read()?;
        if env.is_terminator() {
            for tx in workers {
                tx.send(env.clone()).map_err(|_| FarmError::Disconnected("worker"))?;
                bump(&counters.client_ut);
            }
            return Ok(());
        }
        dispatch(workers, env)?;
    }
}

pub fn worker_loop(
    node_index: u32,
    input: &Receiver<Envelope>,
    output: &Sender<Envelope>,
    function: &mut dyn FunctionHook,
    counters: &FarmCounters,
) -> Result<u64, FarmError> {
    let mut processed = 0;
    loop {
        let env = input.recv().map_err(|_| FarmError::Disconnected("client"))?;
        if env.is_terminator() {
            output.send(env).map_err(|_| FarmError::Disconnected("node fan"))?;
            bump(&counters.worker_ut);
            return Ok(processed);
        }
        let workload = env.workload().to_string();
        let body = function.apply(env.into_body()).map_err(|e| FarmError::WorkFault(e.to_string()))?;
        output.send(Envelope::data(workload, body)).map_err(|_| FarmError::Disconnected("node fan"))?;
        processed += 1;
        counters.processed_by(node_index);
    }
}

/// afoc: merges worker results; one UT out after every worker's UT.
pub fn node_fan_loop(
    workload: &str,
    worker_ins: &[Receiver<Envelope>],
    result_out: &mut OutputEnd,
    counters: &FarmCounters,
) -> Result<(), FarmError> {
    let mut live: Vec<usize> = (0..worker_ins.len()).collect();
    while !live.is_empty() {
        let mut sel = Select::new();
        for &i in &live {
            sel.recv(&worker_ins[i]);
        }
        let op = sel.select();
        let k = op.index();
        let env = op.recv(&worker_ins[live[k]]).map_err(|_| FarmError::Disconnected("worker"))?;
        if env.is_terminator() {
            live.remove(k);
        } else {
            result_out.write(&env)?;
        }
    }
    result_out.write(&Envelope::terminator(workload))?;
    bump(&counters.node_fan_ut);
    Ok(())
}

/// afo: merges node results; one UT out after `clusters` node UTs.
pub fn host_fan_loop(
    result_in: &mut InputEnd,
    collect_out: &Sender<Envelope>,
    clusters: usize,
    counters: &FarmCounters,
) -> Result<(), FarmError> {
    let mut uts = 0;
    while uts < clusters {
        let env = result_in.read()?;
        if env.is_terminator() {
            uts += 1;
            if uts == clusters {
                collect_out.send(env).map_err(|_| FarmError::Disconnected("collect"))?;
                bump(&counters.host_fan_ut);
            }
        } else {
            collect_out.send(env).map_err(|_| FarmError::Disconnected("collect"))?;
        }
    }
    Ok(())
}

pub fn collect_loop(
    input: &Receiver<Envelope>,
    sink: &mut dyn SinkHooks,
    counters: &FarmCounters,
) -> Result<Summary, FarmError> {
    loop {
        let env = input.recv().map_err(|_| FarmError::Disconnected("host fan"))?;
        if env.is_terminator() {
            bump(&counters.collect_ut);
            return Ok(sink.finalise());
        }
        if let Status::Fault(m) = sink.collect(env.body()) {
            return Err(FarmError::SinkFault(m));
        }
        bump(&counters.collected);
    }
}

/// The host's application ends, all connected.
pub struct HostEnds {
    pub request_in: InputEnd,
    pub result_in: InputEnd,
    /// Indexed by node.
    pub data_out: Vec<OutputEnd>,
}

/// Runs emit, server, host fan and collect to completion.
pub fn run_host_farm(
    workload: &str,
    mut source: Box<dyn SourceHooks>,
    mut sink: Box<dyn SinkHooks>,
    ends: HostEnds,
    counters: &FarmCounters,
) -> Result<Summary, FarmError> {
    let HostEnds { mut request_in, mut result_in, mut data_out } = ends;
    let clusters = data_out.len();
    let (emit_tx, emit_rx) = bounded::<Envelope>(0);
    let (fan_tx, fan_rx) = bounded::<Envelope>(0);
    thread::scope(|s| {
        let emit = s.spawn(move || emit_loop(workload, &mut *source, &emit_tx, counters).map(|_| ()));
        let server = s.spawn(move || server_loop(&emit_rx, &mut request_in, &mut data_out, counters));
        let fan = s.spawn(move || host_fan_loop(&mut result_in, &fan_tx, clusters, counters));
        let summary = collect_loop(&fan_rx, &mut *sink, counters);
        drop(fan_rx);
        let others = [emit, server, fan].map(|h| h.join().expect("farm process panicked"));
        let mut results: Vec<Result<Option<Summary>, FarmError>> = vec![summary.map(Some)];
        results.extend(others.into_iter().map(|r| r.map(|()| None)));
        first_cause(results).map(|v| v.into_iter().flatten().next().expect("collect result"))
    })
}

/// One node's application ends, all connected.
pub struct NodeEnds {
    pub request_out: OutputEnd,
    pub data_in: InputEnd,
    pub result_out: OutputEnd,
}

/// Runs the client, one worker per function hook, and the node fan.
/// Returns the number of instances this node processed.
pub fn run_node_farm(
    node_index: u32,
    workload: &str,
    functions: Vec<Box<dyn FunctionHook>>,
    ends: NodeEnds,
    counters: &FarmCounters,
) -> Result<u64, FarmError> {
    let NodeEnds { mut request_out, mut data_in, mut result_out } = ends;
    let (to_workers, worker_rx): (Vec<_>, Vec<_>) = functions.iter().map(|_| bounded::<Envelope>(0)).unzip();
    let (worker_tx, from_workers): (Vec<_>, Vec<_>) = functions.iter().map(|_| bounded::<Envelope>(0)).unzip();
    thread::scope(|s| {
        let workers: Vec<_> = functions
            .into_iter()
            .zip(worker_rx)
            .zip(worker_tx)
            .map(|((mut f, rx), tx)| s.spawn(move || worker_loop(node_index, &rx, &tx, &mut *f, counters)))
            .collect();
        let fan = s.spawn(move || node_fan_loop(workload, &from_workers, &mut result_out, counters).map(|()| 0));
        let client = client_loop(node_index, &mut request_out, &mut data_in, &to_workers, counters);
        drop(to_workers);
        drop(request_out);
        drop(data_in);
        let mut results = vec![client.map(|()| 0)];
        results.extend(workers.into_iter().map(|h| h.join().expect("worker panicked")));
        results.push(fan.join().expect("node fan panicked"));
        first_cause(results).map(|v| v.into_iter().sum())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netchan::{Arity, ChannelAddress, Network};
    use crate::workload::mandelbrot::Mandelbrot;
    use crate::workload::Workload;
    use std::net::Ipv4Addr;

    fn addr(port: u16, ch: u16) -> ChannelAddress {
        ChannelAddress::new(Ipv4Addr::LOCALHOST, port, ch)
    }

    #[test]
    fn dispatch_prefers_lowest_idle_worker() {
        let (tx0, rx0) = bounded::<Envelope>(0);
        let (tx1, rx1) = bounded::<Envelope>(0);
        let (tx2, rx2) = bounded::<Envelope>(0);
        let waiting = thread::scope(|s| {
            let h1 = s.spawn(|| rx1.recv().unwrap());
            let h2 = s.spawn(|| rx2.recv().unwrap());
            thread::sleep(std::time::Duration::from_millis(50));
            dispatch(&[tx0.clone(), tx1.clone(), tx2.clone()], Envelope::data("m", vec![1])).unwrap();
            dispatch(&[tx0.clone(), tx1.clone(), tx2.clone()], Envelope::data("m", vec![2])).unwrap();
            (h1.join().unwrap(), h2.join().unwrap())
        });
        drop(rx0);
        assert_eq!(waiting.0.body(), &[1]);
        assert_eq!(waiting.1.body(), &[2]);
    }

    #[test]
    fn empty_source_emits_only_terminator() {
        let (tx, rx) = bounded(1);
        let counters = FarmCounters::new();
        let mut src = Mandelbrot.init_source(&[1, 10]).unwrap();
        assert_eq!(emit_loop("mandelbrot", &mut *src, &tx, &counters).unwrap(), 0);
        assert!(rx.recv().unwrap().is_terminator());
    }

    #[test]
    fn tiny_source_emits_two_lines() {
        let (tx, rx) = bounded(3);
        let counters = FarmCounters::new();
        let mut src = Mandelbrot.init_source(&[4, 10]).unwrap();
        assert_eq!(emit_loop("mandelbrot", &mut *src, &tx, &counters).unwrap(), 2);
        let got: Vec<_> = rx.try_iter().map(|e| e.is_terminator()).collect();
        assert_eq!(got, [false, false, true]);
    }

    #[test]
    fn node_fan_sends_one_terminator_last() {
        let counters = FarmCounters::new();
        let net = Network::loopback();
        let mut input = net.create_input_end(addr(3000, 2), Arity::ManyToOne).unwrap();
        let mut out = net.connect_output_end(addr(3000, 2)).unwrap();
        let (txs, rxs): (Vec<_>, Vec<_>) = (0..4).map(|_| bounded::<Envelope>(0)).unzip();
        thread::scope(|s| {
            s.spawn(|| node_fan_loop("w", &rxs, &mut out, &counters).unwrap());
            for (i, tx) in txs.into_iter().enumerate() {
                s.spawn(move || {
                    tx.send(Envelope::data("w", vec![i as u8])).unwrap();
                    tx.send(Envelope::terminator("w")).unwrap();
                });
            }
            let mut seen: Vec<u8> = (0..4).map(|_| input.read().unwrap().body()[0]).collect();
            seen.sort();
            assert_eq!(seen, [0, 1, 2, 3]);
            assert!(input.read().unwrap().is_terminator());
        });
        assert_eq!(counters.snapshot().node_fan_ut, 1);
    }

    #[test]
    fn error_ranking_prefers_faults() {
        let r: Result<Vec<()>, _> = first_cause(vec![
            Err(FarmError::Disconnected("x")),
            Err(FarmError::WorkFault("boom".into())),
            Ok(()),
        ]);
        assert!(matches!(r, Err(FarmError::WorkFault(_))));
    }
}
