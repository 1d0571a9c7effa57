use std::fs;
use std::net::{Ipv4Addr, TcpListener};
use std::path::PathBuf;
use std::process::{Command, Output};

const SPEC: &str = "\
const clusters = 2
@emit 192.168.1.176
source mandelbrot args [70, 50]
@cluster clusters
workers 2
@collect
sink mandelbrot
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csp-farm")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("csp-farm-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn build_is_deterministic() {
    let dir = scratch("build");
    let spec = dir.join("mandel.spec");
    fs::write(&spec, SPEC).unwrap();
    let build = || {
        let o = bin(&["build", spec.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(dir.join("mandel.host.plan")).unwrap(), fs::read(dir.join("mandel.node.plan")).unwrap())
    };
    let first = build();
    assert_eq!(build(), first);
    let host = String::from_utf8(first.0).unwrap();
    assert!(host.contains("load_input: 192.168.1.176:2000/1"));
    assert!(String::from_utf8(first.1).unwrap().contains("workload: mandelbrot"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn bad_spec_exits_with_spec_code() {
    let dir = scratch("bad");
    let spec = dir.join("bad.spec");
    fs::write(&spec, SPEC.replace("@collect\n", "")).unwrap();
    let o = bin(&["build", spec.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn check_reports_each_assertion() {
    let ok = bin(&["check", "--clusters", "2"]);
    assert!(ok.status.success());
    let out = stdout(&ok);
    assert!(out.lines().filter(|l| l.contains(": pass")).count() >= 6, "{out}");

    let bad = bin(&["check", "--clusters", "2", "--mutate", "terminator-short"]);
    assert_eq!(bad.status.code(), Some(5));
    let line = stdout(&bad).lines().find(|l| l.starts_with("deadlock free")).unwrap().to_string();
    assert!(line.contains("FAIL") && line.contains("trace: <a.A"), "{line}");

    assert_eq!(bin(&["check", "--clusters", "2", "--mutate", "bogus"]).status.code(), Some(2));
}

#[test]
fn local_prints_timing_and_summary() {
    let dir = scratch("local");
    let spec = dir.join("m.spec");
    fs::write(&spec, SPEC).unwrap();
    let pgm = dir.join("m.pgm");
    let o = bin(&["local", spec.to_str().unwrap(), "--runs", "2", "--clusters", "1", "--image", pgm.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "origin,load_ms,run_ms");
    assert!(lines[1].starts_with("host,") && lines[2].starts_with("0,"));
    assert!(lines[3].starts_with("mandelbrot: points=2800 "));
    assert!(lines[4].starts_with("runs=2 run_ms mean="));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5 70 40 255\n"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("open_handles=0"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn node_without_host_gives_up() {
    let free = || TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).unwrap().local_addr().unwrap().port().to_string();
    let (host, me) = (free(), free());
    let o = bin(&["node", "127.0.0.1", "--host-load-port", &host, "--load-port", &me, "--window", "0.5"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no listener"));
}
