//! Escape-time Mandelbrot over x ∈ [-2.5, 1.0), y ∈ (-1.0, 1.0], one instance
//! per horizontal line.
//!
//! Point coordinates are not shipped: a worker regenerates them from the
//! line's index and width with the same arithmetic the source would use.

use std::collections::BTreeMap;

use super::{FunctionHook, GrayImage, SinkHooks, SourceHooks, Status, Summary, Workload, WorkloadError};

pub const MIN_X: f64 = -2.5;
pub const MIN_Y: f64 = 1.0;
pub const RANGE_X: f64 = 3.5;
pub const RANGE_Y: f64 = 2.0;

pub const WHITE: u8 = 1;
pub const BLACK: u8 = 0;

/// Fixed header bytes of an encoded line, before the colour array.
pub const LINE_HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MandelParams {
    pub width: u32,
    pub max_iterations: u32,
    pub delta: f64,
    pub height: u32,
}

impl MandelParams {
    pub fn new(width: i64, max_iterations: i64) -> Result<Self, WorkloadError> {
        let width = u32::try_from(width)
            .ok()
            .filter(|w| *w >= 1)
            .ok_or_else(|| WorkloadError::BadArgs(format!("width must be >= 1, got {width}")))?;
        let max_iterations = u32::try_from(max_iterations)
            .ok()
            .filter(|m| *m >= 1)
            .ok_or_else(|| WorkloadError::BadArgs(format!("max iterations must be >= 1, got {max_iterations}")))?;
        let delta = line_delta(width);
        // Truncating cast, as an integer cast of the quotient would.
        let height = (RANGE_Y / delta) as u32;
        Ok(Self { width, max_iterations, delta, height })
    }

    pub fn from_args(args: &[i64]) -> Result<Self, WorkloadError> {
        match args {
            [w, m] => Self::new(*w, *m),
            _ => Err(WorkloadError::BadArgs(format!("expected [width, maxIterations], got {} values", args.len()))),
        }
    }

    pub fn points(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

fn line_delta(width: u32) -> f64 {
    RANGE_X / f64::from(width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MandelLine {
    pub line_index: u32,
    pub width: u32,
    pub escape_value: u32,
    pub ly_offset: f64,
    pub total_iterations: u64,
    pub colour: Vec<u8>,
}

impl MandelLine {
    pub fn y(&self) -> f64 {
        MIN_Y - self.ly_offset
    }

    pub fn x(&self, w: u32) -> f64 {
        MIN_X + f64::from(w) * line_delta(self.width)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LINE_HEADER_LEN + self.colour.len());
        out.extend_from_slice(&self.line_index.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.escape_value.to_be_bytes());
        out.extend_from_slice(&self.total_iterations.to_be_bytes());
        out.extend_from_slice(&self.ly_offset.to_be_bytes());
        out.extend_from_slice(&self.colour);
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, WorkloadError> {
        if body.len() < LINE_HEADER_LEN {
            return Err(WorkloadError::Truncated(body.len()));
        }
        let u32_at = |i: usize| u32::from_be_bytes(body[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(body[i..i + 8].try_into().unwrap());
        let width = u32_at(4);
        if body.len() - LINE_HEADER_LEN != width as usize {
            return Err(WorkloadError::BadWidth { width, found: body.len() });
        }
        Ok(Self {
            line_index: u32_at(0),
            width,
            escape_value: u32_at(8),
            total_iterations: u64_at(12),
            ly_offset: f64::from_bits(u64_at(20)),
            colour: body[LINE_HEADER_LEN..].to_vec(),
        })
    }
}

/// Produces lines in order; the cursor is the next line's index.
#[derive(Debug, Clone)]
pub struct LineSource {
    params: MandelParams,
    cursor: u32,
}

impl LineSource {
    pub fn new(params: MandelParams) -> Self {
        Self { params, cursor: 0 }
    }

    pub fn with_cursor(params: MandelParams, cursor: u32) -> Self {
        Self { params, cursor }
    }

    pub fn cursor(&self) -> u32 {
        self.cursor
    }

    pub fn next_line(&mut self) -> (Status, Option<MandelLine>) {
        if self.cursor >= self.params.height {
            return (Status::NormalTermination, None);
        }
        let line = MandelLine {
            line_index: self.cursor,
            width: self.params.width,
            escape_value: self.params.max_iterations,
            ly_offset: f64::from(self.cursor) * self.params.delta,
            total_iterations: 0,
            colour: vec![BLACK; self.params.width as usize],
        };
        self.cursor += 1;
        (Status::NormalContinuation, Some(line))
    }
}

/// Iteration count for one point, capped at `escape_value`.
#[inline]
pub fn escape_iterations(cx: f64, cy: f64, escape_value: u32) -> u32 {
    let (mut xl, mut yl) = (0.0f64, 0.0f64);
    let mut iterations = 0;
    while (xl * xl) + (yl * yl) < 4.0 && iterations < escape_value {
        let xtemp = (xl * xl) - (yl * yl) + cx;
        yl = (2.0 * xl * yl) + cy;
        xl = xtemp;
        iterations += 1;
    }
    iterations
}

/// Fills the colour array and accumulates the line's iteration total.
pub fn calculate(line: &mut MandelLine) -> Status {
    let y = line.y();
    for w in 0..line.width {
        let iterations = escape_iterations(line.x(w), y, line.escape_value);
        line.total_iterations += u64::from(iterations);
        line.colour[w as usize] = if iterations < line.escape_value { WHITE } else { BLACK };
    }
    Status::CompletedOk
}

/// Collect-side state: point counts plus, optionally, the image rows.
#[derive(Debug, Default)]
pub struct Collector {
    pub points: u64,
    pub white: u64,
    pub black: u64,
    pub total_iterations: u64,
    seen: BTreeMap<u32, Option<Vec<u8>>>,
    keep_image: bool,
}

impl Collector {
    pub fn new(keep_image: bool) -> Self {
        Self { keep_image, ..Self::default() }
    }

    pub fn collect_line(&mut self, line: MandelLine) -> Result<(), WorkloadError> {
        if self.seen.contains_key(&line.line_index) {
            return Err(WorkloadError::DuplicateLine(line.line_index));
        }
        for &c in &line.colour {
            self.points += 1;
            if c == WHITE {
                self.white += 1;
            } else {
                self.black += 1;
            }
        }
        self.total_iterations += line.total_iterations;
        let row = self.keep_image.then_some(line.colour);
        self.seen.insert(line.line_index, row);
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.seen.len() as u64
    }

    pub fn line_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.seen.keys().copied()
    }

    pub fn summary(&self) -> Summary {
        Summary {
            workload: "mandelbrot".into(),
            counters: vec![
                ("points".into(), self.points),
                ("white".into(), self.white),
                ("black".into(), self.black),
                ("total_iters".into(), self.total_iterations),
                ("lines".into(), self.lines()),
            ],
            image: self.image(),
        }
    }

    /// Rows in line order; white = 255, black = 0.
    fn image(&self) -> Option<GrayImage> {
        if !self.keep_image {
            return None;
        }
        let mut width = 0;
        let mut pixels = Vec::new();
        for row in self.seen.values().flatten() {
            width = row.len() as u32;
            pixels.extend(row.iter().map(|&c| if c == WHITE { 255 } else { 0 }));
        }
        Some(GrayImage { width, height: self.seen.len() as u32, pixels })
    }
}

/// Single-threaded reference run over every line.
pub fn sequential(width: i64, max_iterations: i64, keep_image: bool) -> Result<Summary, WorkloadError> {
    let params = MandelParams::new(width, max_iterations)?;
    let mut source = LineSource::new(params);
    let mut collector = Collector::new(keep_image);
    while let (Status::NormalContinuation, Some(mut line)) = source.next_line() {
        calculate(&mut line);
        collector.collect_line(line)?;
    }
    Ok(collector.summary())
}

pub struct Mandelbrot;

struct Source(LineSource);

impl SourceHooks for Source {
    fn create_instance(&mut self) -> (Status, Option<Vec<u8>>) {
        let (status, line) = self.0.next_line();
        (status, line.map(|l| l.encode()))
    }
}

struct Function;

impl FunctionHook for Function {
    fn apply(&mut self, body: Vec<u8>) -> Result<Vec<u8>, WorkloadError> {
        let mut line = MandelLine::decode(&body)?;
        match calculate(&mut line) {
            Status::CompletedOk => Ok(line.encode()),
            other => Err(WorkloadError::Fault(format!("calculate returned {other:?}"))),
        }
    }
}

struct Sink(Collector);

impl SinkHooks for Sink {
    fn collect(&mut self, body: &[u8]) -> Status {
        match MandelLine::decode(body).and_then(|l| self.0.collect_line(l)) {
            Ok(()) => Status::CompletedOk,
            Err(e) => Status::Fault(e.to_string()),
        }
    }

    fn finalise(&mut self) -> Summary {
        self.0.summary()
    }
}

impl Workload for Mandelbrot {
    fn name(&self) -> &str {
        "mandelbrot"
    }

    fn arity(&self) -> usize {
        2
    }

    fn source_hook_names(&self) -> [&'static str; 3] {
        ["initialiseClass", "createInstance", "calculate"]
    }

    fn sink_hook_names(&self) -> [&'static str; 3] {
        ["init", "collector", "finalise"]
    }

    fn init_source(&self, args: &[i64]) -> Result<Box<dyn SourceHooks>, WorkloadError> {
        Ok(Box::new(Source(LineSource::new(MandelParams::from_args(args)?))))
    }

    fn init_function(&self, args: &[i64]) -> Result<Box<dyn FunctionHook>, WorkloadError> {
        MandelParams::from_args(args)?;
        Ok(Box::new(Function))
    }

    fn init_sink(&self, image: bool) -> Result<Box<dyn SinkHooks>, WorkloadError> {
        Ok(Box::new(Sink(Collector::new(image))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_params() {
        let p = MandelParams::new(5600, 1000).unwrap();
        assert_eq!(p.delta, 0.000625);
        assert_eq!(p.height, 3200);
        assert_eq!(p.points(), 17_920_000);
    }

    #[test]
    fn tiny_params() {
        // 3.5 / 4 = 0.875; 2.0 / 0.875 = 2.2857 → 2 lines.
        let p = MandelParams::new(4, 10).unwrap();
        assert_eq!(p.delta, 0.875);
        assert_eq!(p.height, 2);
    }

    #[test]
    fn bad_args() {
        assert!(matches!(MandelParams::new(0, 10), Err(WorkloadError::BadArgs(_))));
        assert!(matches!(MandelParams::new(4, 0), Err(WorkloadError::BadArgs(_))));
        assert!(matches!(MandelParams::from_args(&[5600]), Err(WorkloadError::BadArgs(_))));
    }

    #[test]
    fn first_line_coordinates() {
        let mut src = LineSource::new(MandelParams::new(4, 10).unwrap());
        let (status, line) = src.next_line();
        assert_eq!(status, Status::NormalContinuation);
        let line = line.unwrap();
        let xs: Vec<f64> = (0..4).map(|w| line.x(w)).collect();
        assert_eq!(xs, vec![-2.5, -1.625, -0.75, 0.125]);
        assert_eq!(line.y(), 1.0);
        assert_eq!(line.total_iterations, 0);
        assert!(line.colour.iter().all(|&c| c == BLACK));
    }

    #[test]
    fn cursor_terminates_at_height() {
        let params = MandelParams::new(4, 10).unwrap();
        let mut src = LineSource::new(params);
        assert!(src.next_line().1.is_some());
        assert!(src.next_line().1.is_some());
        assert_eq!(src.next_line(), (Status::NormalTermination, None));
        assert_eq!(src.cursor(), params.height);
    }

    #[test]
    fn middle_line_is_on_the_real_axis() {
        let params = MandelParams::new(5600, 1000).unwrap();
        let mut src = LineSource::with_cursor(params, 1600);
        let line = src.next_line().1.unwrap();
        assert_eq!(line.y(), 0.0);
    }

    #[test]
    fn hand_iterated_points() {
        assert_eq!(escape_iterations(0.0, 0.0, 10), 10);
        assert_eq!(escape_iterations(-2.5, 1.0, 10), 1);
        assert_eq!(escape_iterations(1.0, 1.0, 10), 2);
    }

    #[test]
    fn first_tiny_line_colours() {
        // y = 1.0; x = -2.5, -1.625, -0.75, 0.125 with escape 10.
        let mut line = LineSource::new(MandelParams::new(4, 10).unwrap()).next_line().1.unwrap();
        assert_eq!(calculate(&mut line), Status::CompletedOk);
        assert_eq!(line.colour[0], WHITE);
        let expected: u64 = (0..4).map(|w| u64::from(escape_iterations(line.x(w), 1.0, 10))).sum();
        assert_eq!(line.total_iterations, expected);
        assert!(line.colour.iter().all(|&c| c == WHITE || c == BLACK));
    }

    #[test]
    fn codec_lengths() {
        let line = LineSource::new(MandelParams::new(4, 10).unwrap()).next_line().1.unwrap();
        assert_eq!(line.encode().len(), 32);
        assert_eq!(MandelLine::decode(&[0u8; 20]), Err(WorkloadError::Truncated(20)));
        let mut long = line.encode();
        long.push(0);
        assert!(matches!(MandelLine::decode(&long), Err(WorkloadError::BadWidth { width: 4, found: 33 })));
    }

    #[test]
    fn collector_counts() {
        let mut c = Collector::new(false);
        let line = MandelLine {
            line_index: 0,
            width: 4,
            escape_value: 10,
            ly_offset: 0.0,
            total_iterations: 17,
            colour: vec![1, 1, 0, 1],
        };
        c.collect_line(line.clone()).unwrap();
        assert_eq!((c.points, c.white, c.black, c.total_iterations), (4, 3, 1, 17));
        assert_eq!(c.collect_line(line), Err(WorkloadError::DuplicateLine(0)));
    }

    #[test]
    fn empty_collector() {
        let s = Collector::new(false).summary();
        for k in ["points", "white", "black", "total_iters"] {
            assert_eq!(s.get(k), Some(0));
        }
    }

    #[test]
    fn symmetric_about_real_axis() {
        // width 1400: delta 0.0025, 800 lines, y = 0 lands on line 400.
        let params = MandelParams::new(1400, 250).unwrap();
        assert_eq!(params.height, 800);
        let lines: Vec<MandelLine> = {
            let mut src = LineSource::new(params);
            std::iter::from_fn(|| src.next_line().1)
                .map(|mut l| {
                    calculate(&mut l);
                    l
                })
                .collect()
        };
        assert_eq!(lines[400].y(), 0.0);
        for k in 1..400 {
            assert_eq!(lines[400 - k].colour, lines[400 + k].colour, "k = {k}");
        }
    }

    #[test]
    fn summary_bounds() {
        let s = sequential(140, 50, false).unwrap();
        let points = s.get("points").unwrap();
        assert_eq!(points, s.get("white").unwrap() + s.get("black").unwrap());
        let total = s.get("total_iters").unwrap();
        assert!(total >= points && total <= points * 50);
    }

    proptest! {
        #[test]
        fn codec_round_trip(
            line_index: u32,
            escape_value: u32,
            total_iterations: u64,
            ly_bits: u64,
            colour in proptest::collection::vec(0u8..=1, 0..64),
        ) {
            let line = MandelLine {
                line_index,
                width: colour.len() as u32,
                escape_value,
                ly_offset: f64::from_bits(ly_bits),
                total_iterations,
                colour,
            };
            let back = MandelLine::decode(&line.encode()).unwrap();
            prop_assert_eq!(back.encode(), line.encode());
        }
    }
}
