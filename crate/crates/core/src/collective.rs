//! Simulated synchronous collectives over in-process workers.
//!
//! `all_reduce` combines equal-shaped payloads from all workers. In `Full64`
//! mode the reduction is the exact left-to-right ordered sum by worker index.
//! In `Half16` mode it simulates a ring all-reduce (reduce-scatter followed by
//! all-gather) in which every transmitted chunk passes through the binary16
//! wire format; accumulation still happens in 64-bit after widening, so only
//! the communication precision is reduced. Reduction order is fixed by ring
//! position, never by arrival time, which makes results bit-reproducible.
//!
//! The module also carries an analytic latency/bandwidth cost model for ring
//! all-reduce and a least-squares fit of its parameters from measured
//! `(workers, seconds)` pairs, used to reproduce scaling-efficiency curves.

use std::fmt;
use std::str::FromStr;

use crate::binary16;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Communication precision of the simulated wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommPrecision {
    /// Exact 64-bit transfers.
    Full64,
    /// Transfers pass through IEEE binary16.
    Half16,
}

impl fmt::Display for CommPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full64 => "full64",
            Self::Half16 => "half16",
        })
    }
}

impl FromStr for CommPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full64" => Ok(Self::Full64),
            "half16" => Ok(Self::Half16),
            other => Err(Error::Config(format!(
                "unknown precision {other:?} (expected full64 or half16)"
            ))),
        }
    }
}

/// Reduction applied across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    /// Sum, divided by the worker count after summation.
    Average,
}

/// Result of an all-reduce: the combined tensor plus a count of elements
/// that saturated to ±65504 on the half-precision wire. Saturation is a
/// warning signal, not an error.
#[derive(Debug, Clone, PartialEq)]
pub struct AllReduceOutput {
    pub tensor: Tensor,
    pub saturated_values: u64,
}

/// Combine equal-shaped payloads from all workers; every worker would
/// observe the returned tensor.
pub fn all_reduce(
    payloads: &[Tensor],
    op: ReduceOp,
    precision: CommPrecision,
) -> Result<AllReduceOutput> {
    let first = payloads.first().ok_or(Error::EmptyAllReduce)?;
    for p in payloads {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
        if let Some(index) = p.first_nonfinite() {
            return Err(Error::NonFinite { context: "all-reduce payload", index });
        }
    }

    let (mut data, saturated_values) = match precision {
        CommPrecision::Full64 => (ordered_sum(payloads), 0),
        CommPrecision::Half16 => ring_sum_half16(payloads)?,
    };

    if let ReduceOp::Average = op {
        let w = payloads.len() as f64;
        for v in &mut data {
            *v /= w;
        }
    }

    Ok(AllReduceOutput {
        tensor: Tensor::new(first.shape().to_vec(), data).expect("shape preserved"),
        saturated_values,
    })
}

/// Exact reduction: left-to-right by worker index, independent of any
/// scheduling.
fn ordered_sum(payloads: &[Tensor]) -> Vec<f64> {
    let mut acc = payloads[0].data().to_vec();
    for p in &payloads[1..] {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    acc
}

/// Element range of ring chunk `c` for `n` elements over `w` workers.
fn chunk_range(c: usize, n: usize, w: usize) -> std::ops::Range<usize> {
    (c * n / w)..((c + 1) * n / w)
}

/// Quantize a slice through the binary16 wire in place, counting saturated
/// elements.
fn through_wire(values: &mut [f64], saturations: &mut u64) -> Result<()> {
    for v in values {
        let (bits, saturated) = binary16::to_binary16_with_saturation(*v)?;
        if saturated {
            *saturations += 1;
        }
        *v = binary16::from_binary16(bits)?;
    }
    Ok(())
}

/// Ring reduce-scatter + all-gather with binary16 transfers.
///
/// During reduce-scatter, step `s` has worker `w` send its running value of
/// chunk `(w - s) mod W` to worker `w + 1`, which widens and adds in 64-bit.
/// After `W - 1` steps worker `(c - 1) mod W` holds the complete chunk `c`.
/// The gather phase transmits completed chunks around the ring; since
/// re-encoding an already-quantized value is exact, every worker ends up
/// with the same wire-form chunk, which is what we return.
fn ring_sum_half16(payloads: &[Tensor]) -> Result<(Vec<f64>, u64)> {
    let w = payloads.len();
    let n = payloads[0].len();
    if w == 1 {
        return Ok((payloads[0].data().to_vec(), 0));
    }

    let mut saturations = 0u64;
    let mut acc: Vec<Vec<f64>> = payloads.iter().map(|p| p.data().to_vec()).collect();

    for step in 0..w - 1 {
        for sender in 0..w {
            let chunk = (sender + w - step) % w;
            let range = chunk_range(chunk, n, w);
            if range.is_empty() {
                continue;
            }
            let mut wire = acc[sender][range.clone()].to_vec();
            through_wire(&mut wire, &mut saturations)?;
            let receiver = (sender + 1) % w;
            for (dst, src) in acc[receiver][range].iter_mut().zip(&wire) {
                *dst += src;
            }
        }
    }

    // Gather: chunk c is complete at worker (c - 1) mod W; its transmitted
    // form is the canonical result.
    let mut result = vec![0.0; n];
    for chunk in 0..w {
        let owner = (chunk + w - 1) % w;
        let range = chunk_range(chunk, n, w);
        if range.is_empty() {
            continue;
        }
        let mut wire = acc[owner][range.clone()].to_vec();
        through_wire(&mut wire, &mut saturations)?;
        result[range].copy_from_slice(&wire);
    }
    Ok((result, saturations))
}

/// Analytic cost model for one ring all-reduce plus fixed per-iteration
/// compute. Parameter values are fit to measurements, not taken from any
/// particular hardware.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Seconds per ring hop.
    pub alpha_latency: f64,
    /// Seconds per byte across one link.
    pub beta_bandwidth: f64,
    /// Seconds of forward+backward compute per iteration, worker-count
    /// independent.
    pub gamma_compute: f64,
}

impl CostModel {
    pub fn new(alpha_latency: f64, beta_bandwidth: f64, gamma_compute: f64) -> Result<Self> {
        for (name, value) in [
            ("alpha_latency", alpha_latency),
            ("beta_bandwidth", beta_bandwidth),
            ("gamma_compute", gamma_compute),
        ] {
            if value.is_nan() || value < 0.0 {
                return Err(Error::InvalidCostModel { name, value });
            }
        }
        Ok(Self { alpha_latency, beta_bandwidth, gamma_compute })
    }
}

impl Default for CostModel {
    /// Placeholder parameters in a plausible range (10 us hops, 5 GB/s
    /// links, 50 ms compute); fit real measurements for real curves.
    fn default() -> Self {
        Self {
            alpha_latency: 1e-5,
            beta_bandwidth: 2e-10,
            gamma_compute: 0.05,
        }
    }
}

/// Modeled ring all-reduce time: `2(W-1)` hops of latency plus
/// `2(W-1)/W` of the payload per link. Zero when `W = 1`.
pub fn ring_time(payload_bytes: u64, workers: usize, model: &CostModel) -> f64 {
    if workers <= 1 {
        return 0.0;
    }
    let hops = 2.0 * (workers as f64 - 1.0);
    hops * model.alpha_latency
        + (hops / workers as f64) * payload_bytes as f64 * model.beta_bandwidth
}

/// Fraction of ideal throughput at `workers`:
/// `gamma / (gamma + ring_time)`. Exactly 1 at a single worker.
pub fn scaling_efficiency(workers: usize, model: &CostModel, payload_bytes: u64) -> Result<f64> {
    if model.gamma_compute <= 0.0 {
        return Err(Error::InvalidCostModel {
            name: "gamma_compute",
            value: model.gamma_compute,
        });
    }
    Ok(model.gamma_compute / (model.gamma_compute + ring_time(payload_bytes, workers, model)))
}

/// Result of fitting the cost model to measured `(workers, seconds)` pairs.
#[derive(Debug, Clone)]
pub struct CostModelFit {
    pub model: CostModel,
    /// `measured - fitted` per input point, in input order.
    pub residuals: Vec<f64>,
}

/// Least-squares fit of `(alpha, beta, gamma)` to per-iteration seconds
/// measured at several worker counts, for a fixed payload size.
///
/// The model is linear in its parameters, so this solves the 3x3 normal
/// equations with column equilibration. Slightly negative solutions from
/// numerical noise are clamped to zero.
pub fn fit_cost_model(measurements: &[(usize, f64)], payload_bytes: u64) -> Result<CostModelFit> {
    let mut distinct: Vec<usize> = measurements.iter().map(|&(w, _)| w).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::UnderdeterminedFit { distinct: distinct.len() });
    }

    let basis = |w: usize| -> [f64; 3] {
        if w <= 1 {
            return [0.0, 0.0, 1.0];
        }
        let hops = 2.0 * (w as f64 - 1.0);
        [hops, hops / w as f64 * payload_bytes as f64, 1.0]
    };

    // column scaling for conditioning
    let mut scale = [0.0f64; 3];
    for &(w, _) in measurements {
        let row = basis(w);
        for j in 0..3 {
            scale[j] = scale[j].max(row[j].abs());
        }
    }
    for s in &mut scale {
        if *s == 0.0 {
            *s = 1.0;
        }
    }

    // normal equations on scaled columns
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(w, seconds) in measurements {
        let row = basis(w);
        let scaled = [row[0] / scale[0], row[1] / scale[1], row[2] / scale[2]];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += scaled[i] * scaled[j];
            }
            atb[i] += scaled[i] * seconds;
        }
    }

    let solved = solve3(ata, atb).ok_or(Error::SingularFit)?;
    let params: Vec<f64> = solved
        .iter()
        .zip(&scale)
        .map(|(x, s)| {
            let v = x / s;
            if v < 0.0 { 0.0 } else { v }
        })
        .collect();

    let model = CostModel::new(params[0], params[1], params[2])?;
    let residuals = measurements
        .iter()
        .map(|&(w, seconds)| {
            seconds - (model.gamma_compute + ring_time(payload_bytes, w, &model))
        })
        .collect();
    Ok(CostModelFit { model, residuals })
}

/// Gaussian elimination with partial pivoting for a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col];
        for row in col + 1..3 {
            let factor = a[row][col] / pivot_row[col];
            for k in col..3 {
                a[row][k] -= factor * pivot_row[k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Chunk framing for transport parity with a future multi-process backend.
pub mod wire {
    use super::{from_le_bytes_u16, CommPrecision};
    use crate::binary16;
    use crate::error::{Error, Result};

    pub const CHUNK_MAGIC: u32 = 0x4152_4443;
    pub const WIRE_VERSION: u16 = 1;
    const HEADER_LEN: usize = 16;

    fn precision_code(p: CommPrecision) -> u16 {
        match p {
            CommPrecision::Full64 => 0,
            CommPrecision::Half16 => 1,
        }
    }

    /// Frame a chunk: little-endian header (magic, version, precision,
    /// element count) followed by raw f64 or binary16 elements.
    pub fn encode_chunk(values: &[f64], precision: CommPrecision) -> Result<Vec<u8>> {
        let elem_size = match precision {
            CommPrecision::Full64 => 8,
            CommPrecision::Half16 => 2,
        };
        let mut out = Vec::with_capacity(HEADER_LEN + values.len() * elem_size);
        out.extend_from_slice(&CHUNK_MAGIC.to_le_bytes());
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&precision_code(precision).to_le_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "wire chunk", index });
            }
            match precision {
                CommPrecision::Full64 => out.extend_from_slice(&v.to_le_bytes()),
                CommPrecision::Half16 => {
                    out.extend_from_slice(&binary16::to_binary16(v)?.to_le_bytes())
                }
            }
        }
        Ok(out)
    }

    /// Parse a framed chunk back into widened f64 values.
    pub fn decode_chunk(bytes: &[u8]) -> Result<(CommPrecision, Vec<f64>)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Wire(format!("truncated header: {} bytes", bytes.len())));
        }
        let magic = u32::from_le_bytes(bytes[0..4].try_into().expect("length checked"));
        if magic != CHUNK_MAGIC {
            return Err(Error::Wire(format!("bad magic {magic:#010x}")));
        }
        let version = from_le_bytes_u16(&bytes[4..6]);
        if version != WIRE_VERSION {
            return Err(Error::Wire(format!("unsupported version {version}")));
        }
        let precision = match from_le_bytes_u16(&bytes[6..8]) {
            0 => CommPrecision::Full64,
            1 => CommPrecision::Half16,
            other => return Err(Error::Wire(format!("unknown precision code {other}"))),
        };
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("length checked")) as usize;
        let elem_size = match precision {
            CommPrecision::Full64 => 8,
            CommPrecision::Half16 => 2,
        };
        let expected = HEADER_LEN + count * elem_size;
        if bytes.len() != expected {
            return Err(Error::Wire(format!(
                "payload length {} does not match element count {count}",
                bytes.len() - HEADER_LEN
            )));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let at = HEADER_LEN + i * elem_size;
            match precision {
                CommPrecision::Full64 => values.push(f64::from_le_bytes(
                    bytes[at..at + 8].try_into().expect("length checked"),
                )),
                CommPrecision::Half16 => {
                    values.push(binary16::from_binary16(from_le_bytes_u16(&bytes[at..at + 2]))?)
                }
            }
        }
        Ok((precision, values))
    }
}

fn from_le_bytes_u16(bytes: &[u8]) -> u16 {
    u16::from_le_bytes(bytes.try_into().expect("length checked"))
}
