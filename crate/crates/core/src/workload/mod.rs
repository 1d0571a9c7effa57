//! The workload contract and the built-in registry.
//!
//! A workload supplies three roles. The source creates instances one at a time
//! on the host, the function transforms an instance on a worker, and the sink
//! collects results and produces a summary. Instances cross the network as
//! opaque byte bodies produced by the workload's own codec.

pub mod mandelbrot;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

/// Hook return codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    CompletedOk,
    NormalContinuation,
    NormalTermination,
    Fault(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("bad init arguments: {0}")]
    BadArgs(String),
    #[error("instance body truncated ({0} bytes)")]
    Truncated(usize),
    #[error("instance body length {found} does not match width {width}")]
    BadWidth { width: u32, found: usize },
    #[error("line {0} collected twice")]
    DuplicateLine(u32),
    #[error("{0}")]
    Fault(String),
}

pub trait SourceHooks: Send {
    /// Returns `NormalContinuation` with an encoded instance, or
    /// `NormalTermination` once the supply is exhausted.
    fn create_instance(&mut self) -> (Status, Option<Vec<u8>>);
}

pub trait FunctionHook: Send {
    fn apply(&mut self, body: Vec<u8>) -> Result<Vec<u8>, WorkloadError>;
}

pub trait SinkHooks: Send {
    fn collect(&mut self, body: &[u8]) -> Status;
    fn finalise(&mut self) -> Summary;
}

pub trait Workload: Send + Sync {
    fn name(&self) -> &str;
    /// Number of integer init arguments the source expects.
    fn arity(&self) -> usize;
    /// Names of the init, create and function hooks.
    fn source_hook_names(&self) -> [&'static str; 3];
    /// Names of the init, collect and finalise hooks.
    fn sink_hook_names(&self) -> [&'static str; 3];
    fn init_source(&self, args: &[i64]) -> Result<Box<dyn SourceHooks>, WorkloadError>;
    fn init_function(&self, args: &[i64]) -> Result<Box<dyn FunctionHook>, WorkloadError>;
    fn init_sink(&self, image: bool) -> Result<Box<dyn SinkHooks>, WorkloadError>;
}

/// Workloads compiled into this build, keyed by name.
#[derive(Clone, Default)]
pub struct Registry {
    workloads: BTreeMap<String, Arc<dyn Workload>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(mandelbrot::Mandelbrot));
        r
    }

    pub fn register(&mut self, w: Arc<dyn Workload>) {
        self.workloads.insert(w.name().to_string(), w);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Workload>> {
        self.workloads.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.workloads.keys().map(String::as_str)
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.workloads.keys()).finish()
    }
}

/// 8-bit greyscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn row(&self, y: u32) -> &[u8] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    /// Binary PGM (P5), maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5 {} {} 255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_pgm())
    }
}

/// What a sink reports at finalise: named counters plus an optional image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Summary {
    pub workload: String,
    pub counters: Vec<(String, u64)>,
    pub image: Option<GrayImage>,
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}: {}", self.workload, parts.join(" "))
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("run produced no image data (enable image mode)")]
    MissingImageData,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes the summary's image as a PGM file.
pub fn render_pgm(summary: &Summary, path: &Path) -> Result<(), RenderError> {
    let image = summary.image.as_ref().ok_or(RenderError::MissingImageData)?;
    image.write_pgm(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_mandelbrot() {
        let r = Registry::with_builtins();
        let m = r.get("mandelbrot").unwrap();
        assert_eq!(m.arity(), 2);
        assert!(r.get("nonexistent").is_none());
    }

    #[test]
    fn pgm_header() {
        let img = GrayImage { width: 1400, height: 800, pixels: vec![0; 1400 * 800] };
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5 1400 800 255\n"));
        assert_eq!(pgm.len(), "P5 1400 800 255\n".len() + 1400 * 800);
    }

    #[test]
    fn render_without_image() {
        let s = Summary::default();
        let path = std::env::temp_dir().join("never-written.pgm");
        assert!(matches!(render_pgm(&s, &path), Err(RenderError::MissingImageData)));
    }
}
