//! Cost model and timing harness for growing one convolution layer:
//! enlarging its kernel (type-1), stacking extra layers (type-2), or widening
//! the CMC memory (CMC-t).
//!
//! Parameter counts are weights only (no biases). MACs count every kernel tap
//! per output pixel, padding included.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmc::{CmcLayer, LayerGeometry};
use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::tensor::{Kernel, Tensor4};

/// CMC capacity of the reference row in the CMC family.
pub const CMC_BASE_T: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    Plain,
    /// Kernel enlarged to `n′ × n′`.
    Type1(usize),
    /// `extra` additional chained layers of the base geometry.
    Type2(usize),
    /// CMC layer with capacity t.
    Cmc(usize),
}

impl Strategy {
    /// Rows emitted for a family name, mirroring the usual comparison.
    pub fn family(name: &str) -> Result<Vec<Strategy>> {
        Ok(match name {
            "plain" => vec![Strategy::Plain],
            "type1" => vec![Strategy::Type1(4), Strategy::Type1(6)],
            "type2" => vec![Strategy::Type2(1), Strategy::Type2(3)],
            "cmc" => vec![Strategy::Cmc(5), Strategy::Cmc(10), Strategy::Cmc(20)],
            other => vec![other.parse()?],
        })
    }

    pub fn parse_list(list: &str) -> Result<Vec<Strategy>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            out.extend(Strategy::family(name)?);
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("no strategies given".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Plain => write!(f, "plain"),
            Strategy::Type1(n) => write!(f, "type1:{n}"),
            Strategy::Type2(e) => write!(f, "type2:{e}"),
            Strategy::Cmc(t) => write!(f, "cmc:{t}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `plain`, `type1:N`, `type2:E` or `cmc:T`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown strategy '{s}'"));
        if s == "plain" {
            return Ok(Strategy::Plain);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let v: usize = arg.parse().map_err(|_| bad())?;
        match (kind, v) {
            ("type1", n) if n >= 1 => Ok(Strategy::Type1(n)),
            ("type2", e) => Ok(Strategy::Type2(e)),
            ("cmc", t) if t >= 1 => Ok(Strategy::Cmc(t)),
            _ => Err(bad()),
        }
    }
}

/// Base layer shape: `k_in → k_out`, `n × n` kernel, `h × w` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub k_in: usize,
    pub k_out: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    /// Parses `k_in,k_out,n,H,W`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParameter(format!("shape '{s}' is not k_in,k_out,n,H,W")))?;
        let [k_in, k_out, n, h, w] = parts[..] else {
            return Err(Error::InvalidParameter(format!(
                "shape '{s}' needs 5 values k_in,k_out,n,H,W"
            )));
        };
        if parts.contains(&0) {
            return Err(Error::InvalidParameter(format!("shape '{s}' has a zero dimension")));
        }
        Ok(Self { k_in, k_out, n, h, w })
    }

    /// Analysis size from the comparison table: 64→64, 3×3, 1000×1000.
    pub fn table() -> Self {
        Self {
            k_in: 64,
            k_out: 64,
            n: 3,
            h: 1000,
            w: 1000,
        }
    }

    /// Timing size: same layer on 64×64 features.
    pub fn desk() -> Self {
        Self {
            h: 64,
            w: 64,
            ..Self::table()
        }
    }

    pub fn kernel_params(&self) -> u64 {
        (self.k_in * self.k_out * self.n * self.n) as u64
    }

    pub fn pixels(&self) -> u64 {
        (self.h * self.w) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCostModel {
    pub shape: LayerShape,
    pub strategy: Strategy,
}

/// Closed-form costs of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cost {
    pub trainable_params: u64,
    pub kernel_params: u64,
    /// Multiply-accumulates of the convolutions for one forward pass.
    pub conv_macs: u64,
    /// `t·m` MACs to estimate the CMC kernel, once per weight update.
    pub estimation_macs: u64,
    /// Activations, kernels and memory matrix at 4 bytes per value.
    pub working_set_bytes: u64,
}

pub fn model_cost(m: &LayerCostModel) -> Cost {
    let s = m.shape;
    let base = s.kernel_params();
    let act = |ch: usize| (ch as u64) * s.pixels();
    let io = act(s.k_in) + act(s.k_out);
    let (trainable, kernel, conv, est, extra_values) = match m.strategy {
        Strategy::Plain => (base, base, base * s.pixels(), 0, 0),
        Strategy::Type1(n) => {
            let k = (s.k_in * s.k_out * n * n) as u64;
            (k, k, k * s.pixels(), 0, 0)
        }
        Strategy::Type2(e) => {
            // extra layers are k_out → k_out
            let extra = (s.k_out * s.k_out * s.n * s.n) as u64 * e as u64;
            let k = base + extra;
            (k, k, k * s.pixels(), 0, act(s.k_out) * e as u64)
        }
        Strategy::Cmc(t) => {
            let memory = t as u64 * base;
            // memory matrix plus its mask bits, rounded up to whole values
            (memory, base, base * s.pixels(), memory, memory + memory.div_ceil(32))
        }
    };
    Cost {
        trainable_params: trainable,
        kernel_params: kernel,
        conv_macs: conv,
        estimation_macs: est,
        working_set_bytes: 4 * (io + kernel + extra_values),
    }
}

/// Reference row for a strategy's family: plain for type-1/2, CMC-5 for CMC.
pub fn family_base(s: Strategy) -> Strategy {
    match s {
        Strategy::Cmc(_) => Strategy::Cmc(CMC_BASE_T),
        _ => Strategy::Plain,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub samples: Vec<Duration>,
}

impl Timing {
    pub fn median(&self) -> Duration {
        let mut s = self.samples.clone();
        s.sort();
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2
        }
    }
}

/// Ready-to-run forward pass for one strategy.
struct Workload {
    input: Tensor4<f32>,
    kernels: Vec<(Kernel<f32>, Vec<f32>)>,
}

impl Workload {
    fn build(m: &LayerCostModel, seed: u64) -> Result<Self> {
        let s = m.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random_kernel = |k_out: usize, k_in: usize, n: usize| -> Result<Kernel<f32>> {
            let scale = (2.0 / (k_in * n * n) as f32).sqrt();
            let data = (0..k_out * k_in * n * n)
                .map(|_| rng.random_range(-1.0f32..1.0) * scale)
                .collect();
            Kernel::new_any_size(k_out, k_in, n, data)
        };
        let kernels = match m.strategy {
            Strategy::Plain => vec![random_kernel(s.k_out, s.k_in, s.n)?],
            Strategy::Type1(n) => vec![random_kernel(s.k_out, s.k_in, n)?],
            Strategy::Type2(e) => {
                let mut ks = vec![random_kernel(s.k_out, s.k_in, s.n)?];
                for _ in 0..e {
                    ks.push(random_kernel(s.k_out, s.k_out, s.n)?);
                }
                ks
            }
            Strategy::Cmc(t) => {
                // frozen-task inference: kernel estimated once, outside the timed region
                let mut layer = CmcLayer::<f32>::new(0, LayerGeometry::new(s.k_in, s.k_out, s.n), t)?;
                layer.begin_task(1, 1.0, true, seed)?;
                layer.freeze_task(1)?;
                vec![layer.estimate_kernel(1)?]
            }
        };
        let kernels = kernels
            .into_iter()
            .map(|k| {
                let bias = vec![0.0; k.k_out()];
                (k, bias)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let input_len = s.k_in * s.h * s.w;
        let input = Tensor4::from_vec(
            [1, s.k_in, s.h, s.w],
            (0..input_len).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )?;
        Ok(Self { input, kernels })
    }

    fn run(&self) -> Result<Tensor4<f32>> {
        let mut x = conv2d_forward(&self.input, &self.kernels[0].0, &self.kernels[0].1)?;
        for (k, b) in &self.kernels[1..] {
            x = conv2d_forward(&x, k, b)?;
        }
        Ok(x)
    }
}

/// Median-of-repeats forward time of one model, after one warmup pass.
pub fn bench_forward(m: &LayerCostModel, repeats: usize) -> Result<Timing> {
    Ok(bench_interleaved(std::slice::from_ref(m), repeats)?.remove(0))
}

/// Times several models round-robin so drift in machine load hits all of
/// them alike. Runs on the calling thread only.
pub fn bench_interleaved(models: &[LayerCostModel], repeats: usize) -> Result<Vec<Timing>> {
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }
    let workloads = models
        .iter()
        .enumerate()
        .map(|(i, m)| Workload::build(m, 1 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    for w in &workloads {
        std::hint::black_box(w.run()?);
    }
    let mut timings = vec![
        Timing {
            samples: Vec::with_capacity(repeats)
        };
        models.len()
    ];
    for _ in 0..repeats {
        for (w, t) in workloads.iter().zip(&mut timings) {
            let start = Instant::now();
            std::hint::black_box(w.run()?);
            t.samples.push(start.elapsed());
        }
    }
    Ok(timings)
}

/// One table row. `*_x_plain` ratios use the plain base layer; `*_x_family`
/// use the family's first row (plain for type-1/2, CMC-5 for CMC).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub trainable_params: u64,
    pub trainable_x_plain: f64,
    pub trainable_x_family: f64,
    pub kernel_params: u64,
    pub kernel_x_plain: f64,
    pub conv_gmac: f64,
    pub conv_macs_x_plain: f64,
    pub estimation_macs: u64,
    pub working_set_mb: f64,
    pub median_ms: Option<f64>,
    pub time_x_family: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub analytic_shape: LayerShape,
    pub timed_shape: Option<LayerShape>,
    pub rows: Vec<BenchRow>,
}

/// Analytic columns at `analytic` and, when `timed` is given, measured
/// medians at that (smaller) shape.
pub fn bench_table(
    analytic: LayerShape,
    timed: Option<(LayerShape, usize)>,
    strategies: &[Strategy],
) -> Result<BenchReport> {
    let cost = |shape, strategy| model_cost(&LayerCostModel { shape, strategy });
    let plain = cost(analytic, Strategy::Plain);
    let timings = match timed {
        Some((shape, repeats)) => {
            let mut all: Vec<Strategy> = strategies.to_vec();
            for s in strategies {
                let base = family_base(*s);
                if !all.contains(&base) {
                    all.push(base);
                }
            }
            let models: Vec<LayerCostModel> = all.iter().map(|&strategy| LayerCostModel { shape, strategy }).collect();
            let t = bench_interleaved(&models, repeats)?;
            Some(all.into_iter().zip(t).collect::<Vec<_>>())
        }
        None => None,
    };
    let median_of = |s: Strategy| -> Option<f64> {
        timings.as_ref().map(|ts| {
            let t = ts.iter().find(|(k, _)| *k == s).expect("timed every strategy and base");
            t.1.median().as_secs_f64() * 1e3
        })
    };
    let rows = strategies
        .iter()
        .map(|&s| {
            let c = cost(analytic, s);
            let fam = cost(analytic, family_base(s));
            let median = median_of(s);
            BenchRow {
                strategy: s.to_string(),
                trainable_params: c.trainable_params,
                trainable_x_plain: c.trainable_params as f64 / plain.trainable_params as f64,
                trainable_x_family: c.trainable_params as f64 / fam.trainable_params as f64,
                kernel_params: c.kernel_params,
                kernel_x_plain: c.kernel_params as f64 / plain.kernel_params as f64,
                conv_gmac: c.conv_macs as f64 / 1e9,
                conv_macs_x_plain: c.conv_macs as f64 / plain.conv_macs as f64,
                estimation_macs: c.estimation_macs,
                working_set_mb: c.working_set_bytes as f64 / (1024.0 * 1024.0),
                median_ms: median,
                time_x_family: median.zip(median_of(family_base(s))).map(|(a, b)| a / b),
            }
        })
        .collect();
    Ok(BenchReport {
        analytic_shape: analytic,
        timed_shape: timed.map(|(s, _)| s),
        rows,
    })
}

const HEADER: [&str; 12] = [
    "strategy",
    "trainable_params",
    "trainable_x_plain",
    "trainable_x_family",
    "kernel_params",
    "kernel_x_plain",
    "conv_gmac",
    "conv_macs_x_plain",
    "estimation_macs",
    "working_set_mb",
    "median_ms",
    "time_x_family",
];

fn cells(r: &BenchRow) -> [String; 12] {
    let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"));
    [
        r.strategy.clone(),
        r.trainable_params.to_string(),
        format!("{:.3}", r.trainable_x_plain),
        format!("{:.3}", r.trainable_x_family),
        r.kernel_params.to_string(),
        format!("{:.3}", r.kernel_x_plain),
        format!("{:.3}", r.conv_gmac),
        format!("{:.3}", r.conv_macs_x_plain),
        r.estimation_macs.to_string(),
        format!("{:.1}", r.working_set_mb),
        opt(r.median_ms, 3),
        opt(r.time_x_family, 3),
    ]
}

impl BenchReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record(cells(r))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n|{}\n", HEADER.join(" | "), "---|".repeat(HEADER.len()));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", cells(r).join(" | ")));
        }
        out
    }
}
