//! Request streams: trace ingestion, long-tail transformation and Poisson
//! synthesis.
//!
//! Trace files are comma-separated with a header row. The canonical header is
//! `arrival_time_s,input_tokens,output_tokens`; the Azure LLM inference trace
//! column names (`TIMESTAMP`, `ContextTokens`, `GeneratedTokens`) are accepted
//! as aliases, and wall-clock timestamps are rebased to the first request.

use std::fmt;
use std::path::Path;

use chrono::NaiveDateTime;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::metrics::nearest_rank_index;

/// Canonical trace header.
pub const TRACE_HEADER: &str = "arrival_time_s,input_tokens,output_tokens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u32);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    Short,
    Long,
}

/// One inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    /// Seconds since the start of the trace.
    pub arrival_time: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub class: RequestClass,
}

impl Request {
    pub fn is_long(&self) -> bool {
        self.class == RequestClass::Long
    }
}

/// Parameters of the long-request rewrite applied to a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceTransformConfig {
    pub long_percentile: f64,
    pub long_min: u64,
    pub long_max: u64,
    /// Derived from the experiment seed, never read from config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TraceTransformConfig {
    fn default() -> Self {
        Self {
            long_percentile: 0.95,
            long_min: 100_000,
            long_max: 500_000,
            seed: 0,
        }
    }
}

impl TraceTransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.long_percentile > 0.0 && self.long_percentile < 1.0) {
            return Err(SimError::Config(format!(
                "long_percentile must be in (0,1), got {}",
                self.long_percentile
            )));
        }
        if self.long_min == 0 || self.long_min >= self.long_max {
            return Err(SimError::Config(format!(
                "need 0 < long_min < long_max, got {}..{}",
                self.long_min, self.long_max
            )));
        }
        Ok(())
    }
}

/// Reads a trace file. All rows come back as [`RequestClass::Short`], sorted
/// by arrival time (stable, so ties keep file order).
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    parse_trace(&text, path)
}

/// Parses trace text; `origin` is only used in error messages.
pub fn parse_trace(text: &str, origin: &Path) -> Result<Vec<Request>> {
    let parse_err = |line: usize, msg: String| SimError::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let Some((hline, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let columns = TraceColumns::from_header(header).map_err(|m| parse_err(hline, m))?;

    let mut out = Vec::new();
    let mut dated = false;
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() < columns.width {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", columns.width, fields.len()),
            ));
        }
        let raw = fields[columns.arrival];
        let arrival = match raw.parse::<f64>() {
            Ok(v) => v,
            Err(_) => {
                let t = NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f")
                    .map_err(|_| parse_err(line, format!("bad arrival time {raw:?}")))?;
                dated = true;
                t.and_utc().timestamp_micros() as f64 / 1e6
            }
        };
        let input: i64 = fields[columns.input]
            .parse()
            .map_err(|_| parse_err(line, format!("bad input token count {:?}", fields[columns.input])))?;
        let output: i64 = fields[columns.output]
            .parse()
            .map_err(|_| parse_err(line, format!("bad output token count {:?}", fields[columns.output])))?;
        if !arrival.is_finite() || arrival < 0.0 {
            return Err(SimError::Validation(format!(
                "line {line}: arrival time must be a non-negative number, got {arrival}"
            )));
        }
        if input <= 0 || output <= 0 {
            return Err(SimError::Validation(format!(
                "line {line}: token counts must be positive (input={input}, output={output})"
            )));
        }
        out.push(Request {
            id: RequestId(out.len() as u32),
            arrival_time: arrival,
            input_len: input as u64,
            output_len: output as u64,
            class: RequestClass::Short,
        });
    }
    if dated {
        // wall-clock timestamps become seconds since the first request
        let t0 = out.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
        for r in &mut out {
            r.arrival_time -= t0;
        }
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

struct TraceColumns {
    arrival: usize,
    input: usize,
    output: usize,
    width: usize,
}

impl TraceColumns {
    fn from_header(header: &str) -> std::result::Result<Self, String> {
        let names: Vec<String> = header
            .split(',')
            .map(|s| s.trim().to_ascii_lowercase())
            .collect();
        let find = |aliases: &[&str]| {
            names
                .iter()
                .position(|n| aliases.contains(&n.as_str()))
                .ok_or_else(|| format!("header is missing a column named one of {aliases:?}"))
        };
        let arrival = find(&["arrival_time_s", "arrival_time", "timestamp"])?;
        let input = find(&["input_tokens", "contexttokens", "input_len"])?;
        let output = find(&["output_tokens", "generatedtokens", "output_len"])?;
        Ok(Self {
            arrival,
            input,
            output,
            width: arrival.max(input).max(output) + 1,
        })
    }
}

/// Writes requests in the canonical trace format.
pub fn write_trace(requests: &[Request]) -> String {
    let mut s = String::with_capacity(32 * requests.len() + TRACE_HEADER.len());
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in requests {
        s.push_str(&format!("{},{},{}\n", r.arrival_time, r.input_len, r.output_len));
    }
    s
}

/// Relabels requests whose input length is strictly above the nearest-rank
/// `long_percentile` value as long, and redraws their input length uniformly
/// from `[long_min, long_max]`. Everything else is left untouched.
pub fn transform_long_tail(requests: &[Request], cfg: &TraceTransformConfig) -> Result<Vec<Request>> {
    cfg.validate()?;
    if requests.is_empty() {
        return Err(SimError::Validation(
            "cannot transform an empty request stream".into(),
        ));
    }
    let threshold = long_threshold(requests, cfg.long_percentile);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(requests
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.input_len > threshold {
                r.class = RequestClass::Long;
                r.input_len = rng.gen_range(cfg.long_min..=cfg.long_max);
            } else {
                r.class = RequestClass::Short;
            }
            r
        })
        .collect())
}

/// Nearest-rank percentile of the input lengths.
pub fn long_threshold(requests: &[Request], percentile: f64) -> u64 {
    let mut lens: Vec<u64> = requests.iter().map(|r| r.input_len).collect();
    lens.sort_unstable();
    match nearest_rank_index(lens.len(), percentile) {
        Some(i) => lens[i],
        None => u64::MAX,
    }
}

/// Multiplies every arrival time by `factor` (time compression when < 1).
pub fn scale_arrivals(requests: &mut [Request], factor: f64) {
    for r in requests {
        r.arrival_time *= factor;
    }
}

/// Piecewise-uniform histogram over token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLengths {
    /// `(lo, hi, weight)`: values are drawn uniformly from `lo..hi`.
    pub buckets: Vec<(u64, u64, f64)>,
}

impl EmpiricalLengths {
    pub fn new(buckets: Vec<(u64, u64, f64)>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(SimError::Validation("empty length distribution".into()));
        }
        for &(lo, hi, w) in &buckets {
            if lo == 0 || hi <= lo || !(w > 0.0) {
                return Err(SimError::Validation(format!(
                    "bad length bucket ({lo}, {hi}, {w})"
                )));
            }
        }
        Ok(Self { buckets })
    }

    /// One bucket per distinct observed value, weighted by frequency.
    pub fn from_samples(samples: &[u64]) -> Result<Self> {
        let mut sorted: Vec<u64> = samples.iter().copied().filter(|&v| v > 0).collect();
        sorted.sort_unstable();
        let mut buckets: Vec<(u64, u64, f64)> = Vec::new();
        for v in sorted {
            match buckets.last_mut() {
                Some(b) if b.0 == v => b.2 += 1.0,
                _ => buckets.push((v, v + 1, 1.0)),
            }
        }
        Self::new(buckets)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let total: f64 = self.buckets.iter().map(|b| b.2).sum();
        let mut x = rng.gen::<f64>() * total;
        for &(lo, hi, w) in &self.buckets {
            if x < w {
                return rng.gen_range(lo..hi);
            }
            x -= w;
        }
        let (lo, hi, _) = *self.buckets.last().expect("non-empty");
        rng.gen_range(lo..hi)
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.buckets.iter().map(|b| b.2).sum();
        self.buckets
            .iter()
            .map(|&(lo, hi, w)| w * (lo + hi - 1) as f64 / 2.0)
            .sum::<f64>()
            / total
    }
}

/// Input and output length distributions for synthesized traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthModel {
    pub input: EmpiricalLengths,
    pub output: EmpiricalLengths,
}

impl LengthModel {
    /// Shape of the Azure LLM inference trace: roughly 80% of inputs under
    /// 2K tokens with a tail to ~9K, and outputs under 800 tokens.
    pub fn azure_like() -> Self {
        Self {
            input: EmpiricalLengths {
                buckets: vec![
                    (16, 256, 0.18),
                    (256, 512, 0.18),
                    (512, 1024, 0.22),
                    (1024, 2048, 0.22),
                    (2048, 4096, 0.12),
                    (4096, 6144, 0.05),
                    (6144, 9216, 0.03),
                ],
            },
            output: EmpiricalLengths {
                buckets: vec![
                    (1, 32, 0.14),
                    (32, 64, 0.16),
                    (64, 128, 0.22),
                    (128, 256, 0.24),
                    (256, 512, 0.17),
                    (512, 800, 0.07),
                ],
            },
        }
    }

    /// Empirical distributions observed in an existing request stream.
    pub fn from_requests(requests: &[Request]) -> Result<Self> {
        let inputs: Vec<u64> = requests.iter().map(|r| r.input_len).collect();
        let outputs: Vec<u64> = requests.iter().map(|r| r.output_len).collect();
        Ok(Self {
            input: EmpiricalLengths::from_samples(&inputs)?,
            output: EmpiricalLengths::from_samples(&outputs)?,
        })
    }
}

/// Poisson arrivals over `[0, duration)` with lengths drawn from `lengths`.
pub fn synthesize_poisson(
    rate: f64,
    duration: f64,
    lengths: &LengthModel,
    seed: u64,
) -> Result<Vec<Request>> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(SimError::Validation(format!("arrival rate must be positive, got {rate}")));
    }
    if !(duration >= 0.0) {
        return Err(SimError::Validation(format!("duration must be non-negative, got {duration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(rate).map_err(|e| SimError::Validation(e.to_string()))?;
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= duration {
            break;
        }
        let input_len = lengths.input.sample(&mut rng);
        let output_len = lengths.output.sample(&mut rng);
        out.push(Request {
            id: RequestId(out.len() as u32),
            arrival_time: t,
            input_len,
            output_len,
            class: RequestClass::Short,
        });
    }
    Ok(out)
}

/// Derives an independent sub-seed for a named random stream.
pub fn sub_seed(seed: u64, stream: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
