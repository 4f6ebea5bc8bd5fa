//! Independent oracles and statistical checks.
//!
//! Nothing here shares code paths with the implementations it checks:
//! compositions are enumerated by brute force, gradients by central
//! differences, and limiting-case trajectories are written out directly.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::denoiser::{loss, DenoiserConfig, DenoiserParams, Example};
use crate::error::{invalid, Error, Result};
use crate::lattice::TimestepComposition;
use crate::par;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    /// `t_1 = ... = t_F`
    Equal,
    /// `t_1 <= ... <= t_F`
    NonDecreasing,
    /// No constraint between frames.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumerationResult {
    /// Lexicographically sorted, duplicate-free.
    pub compositions: Vec<Vec<usize>>,
    pub count: u128,
}

impl EnumerationResult {
    /// Position of every composition in the sorted list.
    pub fn index(&self) -> HashMap<Vec<usize>, usize> {
        self.compositions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect()
    }
}

/// Lists every composition over timesteps `1..=T` satisfying `constraint`.
/// Refuses, rather than truncates, when the list would exceed `cap` items.
pub fn enumerate_compositions(
    frames: usize,
    timesteps: usize,
    constraint: Constraint,
    cap: u128,
) -> Result<EnumerationResult> {
    if frames == 0 || timesteps == 0 {
        return Err(invalid("enumeration needs F, T >= 1"));
    }
    // the independent count bounds the other two
    let bound = (timesteps as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    let requested = match constraint {
        Constraint::Equal => timesteps as u128,
        _ => bound,
    };
    if requested > cap && constraint == Constraint::Independent {
        return Err(Error::EnumerationCap { requested, cap });
    }
    let mut out = Vec::new();
    match constraint {
        Constraint::Equal => {
            for t in 1..=timesteps {
                out.push(vec![t; frames]);
            }
        }
        Constraint::Independent | Constraint::NonDecreasing => {
            // odometer over all T^F tuples, pruning non-monotone prefixes
            let monotone = constraint == Constraint::NonDecreasing;
            let mut cur = vec![1usize; frames];
            loop {
                out.push(cur.clone());
                if out.len() as u128 > cap {
                    return Err(Error::EnumerationCap {
                        requested: out.len() as u128,
                        cap,
                    });
                }
                let mut i = frames;
                loop {
                    if i == 0 {
                        let count = out.len() as u128;
                        return Ok(EnumerationResult {
                            compositions: out,
                            count,
                        });
                    }
                    i -= 1;
                    if cur[i] < timesteps {
                        cur[i] += 1;
                        let fill = if monotone { cur[i] } else { 1 };
                        for c in cur.iter_mut().skip(i + 1) {
                            *c = fill;
                        }
                        break;
                    }
                }
            }
        }
    }
    let count = out.len() as u128;
    Ok(EnumerationResult {
        compositions: out,
        count,
    })
}

/// Upper 0.1% quantiles of the chi-square distribution, dof 1..=200.
const CHI2_CRIT_999: [f64; 200] = [
    10.8276, 13.8155, 16.2662, 18.4668, 20.5150, 22.4577, 24.3219, 26.1245, 27.8772, 29.5883,
    31.2641, 32.9095, 34.5282, 36.1233, 37.6973, 39.2524, 40.7902, 42.3124, 43.8202, 45.3147,
    46.7970, 48.2679, 49.7282, 51.1786, 52.6197, 54.0520, 55.4760, 56.8923, 58.3012, 59.7031,
    61.0983, 62.4872, 63.8701, 65.2472, 66.6188, 67.9852, 69.3465, 70.7029, 72.0547, 73.4020,
    74.7449, 76.0838, 77.4186, 78.7495, 80.0767, 81.4003, 82.7204, 84.0371, 85.3506, 86.6608,
    87.9680, 89.2722, 90.5734, 91.8718, 93.1675, 94.4605, 95.7510, 97.0388, 98.3242, 99.6072,
    100.8879, 102.1662, 103.4424, 104.7163, 105.9881, 107.2579, 108.5256, 109.7913, 111.0551,
    112.3169, 113.5769, 114.8351, 116.0915, 117.3462, 118.5991, 119.8503, 121.1000, 122.3480,
    123.5944, 124.8392, 126.0826, 127.3244, 128.5648, 129.8037, 131.0412, 132.2773, 133.5121,
    134.7455, 135.9776, 137.2084, 138.4379, 139.6661, 140.8931, 142.1189, 143.3435, 144.5670,
    145.7892, 147.0104, 148.2304, 149.4493, 150.6671, 151.8838, 153.0995, 154.3141, 155.5277,
    156.7403, 157.9518, 159.1624, 160.3721, 161.5807, 162.7885, 163.9953, 165.2011, 166.4061,
    167.6102, 168.8133, 170.0156, 171.2171, 172.4177, 173.6174, 174.8164, 176.0145, 177.2118,
    178.4083, 179.6040, 180.7989, 181.9930, 183.1864, 184.3791, 185.5710, 186.7621, 187.9526,
    189.1423, 190.3313, 191.5196, 192.7072, 193.8941, 195.0803, 196.2659, 197.4508, 198.6350,
    199.8186, 201.0015, 202.1838, 203.3655, 204.5465, 205.7270, 206.9068, 208.0860, 209.2646,
    210.4426, 211.6200, 212.7969, 213.9732, 215.1489, 216.3240, 217.4986, 218.6726, 219.8460,
    221.0190, 222.1914, 223.3632, 224.5345, 225.7053, 226.8756, 228.0454, 229.2146, 230.3834,
    231.5516, 232.7194, 233.8866, 235.0534, 236.2197, 237.3855, 238.5508, 239.7157, 240.8801,
    242.0440, 243.2075, 244.3705, 245.5330, 246.6951, 247.8568, 249.0180, 250.1788, 251.3392,
    252.4991, 253.6586, 254.8177, 255.9763, 257.1346, 258.2924, 259.4498, 260.6068, 261.7634,
    262.9197, 264.0755, 265.2309, 266.3859, 267.5405,
];

/// 99.9% critical value for `dof` in `1..=200`.
pub fn chi2_critical_999(dof: usize) -> Option<f64> {
    CHI2_CRIT_999.get(dof.checked_sub(1)?).copied()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub reject_at_999: bool,
}

/// Pearson goodness-of-fit against `expected` probabilities.
pub fn chi_square_uniformity(observed: &[u64], expected: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: expected.len(),
            actual: observed.len(),
        });
    }
    let mass: f64 = expected.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("expected probabilities sum to {mass}")));
    }
    let n: u64 = observed.iter().sum();
    let n = n as f64;
    for (cell, p) in expected.iter().enumerate() {
        if p * n < 5.0 {
            return Err(Error::UnderpopulatedCell {
                cell,
                expected: p * n,
            });
        }
    }
    let statistic = observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let e = p * n;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = observed.len() - 1;
    if dof == 0 {
        return Ok(ChiSquare {
            statistic,
            dof,
            critical: 0.0,
            reject_at_999: false,
        });
    }
    let critical = chi2_critical_999(dof)
        .ok_or_else(|| invalid(format!("no tabulated critical value for dof {dof}")))?;
    Ok(ChiSquare {
        statistic,
        dof,
        critical,
        reject_at_999: statistic > critical,
    })
}

/// Per-cell check that `observed` lies within `k` binomial standard
/// deviations of `n * p`. Returns the worst z-score.
pub fn max_cell_zscore(observed: &[u64], expected: &[f64]) -> f64 {
    let n = observed.iter().sum::<u64>() as f64;
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let sd = (n * p * (1.0 - p)).sqrt();
            if sd == 0.0 {
                if (o as f64 - n * p).abs() < 0.5 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (o as f64 - n * p).abs() / sd
            }
        })
        .fold(0.0, f64::max)
}

/// Histogram of `n` draws over the enumerated compositions, computed across
/// seeded streams.
pub fn composition_histogram<D>(
    enumeration: &EnumerationResult,
    n: usize,
    seed: u64,
    draw: D,
) -> Result<Vec<u64>>
where
    D: Fn(&mut rand_chacha::ChaCha8Rng) -> TimestepComposition + Sync + Send,
{
    let index = enumeration.index();
    let cells = enumeration.compositions.len();
    let (hist, missing) = par::monte_carlo(
        n,
        seed,
        || (vec![0u64; cells], 0u64),
        |acc, rng| match index.get(draw(rng).steps()) {
            Some(&i) => acc.0[i] += 1,
            None => acc.1 += 1,
        },
        |a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0) {
                *x += y;
            }
            a.1 += b.1;
        },
    );
    if missing > 0 {
        return Err(Error::Internal(format!(
            "{missing} draws fell outside the enumerated composition set"
        )));
    }
    Ok(hist)
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Synchronous baseline: one shared timestep for every frame.
pub fn equal_sample<R: Rng + ?Sized>(frames: usize, timesteps: usize, rng: &mut R) -> Vec<usize> {
    vec![rng.random_range(1..=timesteps); frames]
}

/// Diffusion-forcing baseline: independent timestep per frame.
pub fn independent_sample<R: Rng + ?Sized>(frames: usize, timesteps: usize, rng: &mut R) -> Vec<usize> {
    (0..frames).map(|_| rng.random_range(1..=timesteps)).collect()
}

/// All frames step down together from `N` to `0`.
pub fn synchronous_plan(frames: usize, grid_steps: usize) -> Vec<Vec<usize>> {
    (0..grid_steps).rev().map(|g| vec![g; frames]).collect()
}

/// Frames are denoised one after another, each from `N` to `0`, while
/// later frames wait at `N`.
pub fn autoregressive_plan(frames: usize, grid_steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(frames * grid_steps);
    for active in 0..frames {
        for g in (0..grid_steps).rev() {
            let mut c = vec![grid_steps; frames];
            c[..active].iter_mut().for_each(|v| *v = 0);
            c[active] = g;
            out.push(c);
        }
    }
    out
}

/// Central differences of `f` with respect to every scalar of `params`.
pub fn finite_diff_grads<F>(params: &DenoiserParams, f: F, step: f64) -> DenoiserParams
where
    F: Fn(&DenoiserParams) -> f64 + Sync,
{
    let mut grads = params.clone();
    let positions: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.data.len()).map(move |j| (ti, j)))
        .collect();
    // one scratch copy per chunk rather than per scalar
    const CHUNK: usize = 512;
    let chunks = positions.len().div_ceil(CHUNK);
    let values: Vec<f64> = par::map_indices(chunks, |c| {
        let mut probe = params.clone();
        let end = ((c + 1) * CHUNK).min(positions.len());
        positions[c * CHUNK..end]
            .iter()
            .map(|&(ti, j)| {
                let orig = probe.tensors[ti].data[j];
                probe.tensors[ti].data[j] = orig + step;
                let up = f(&probe);
                probe.tensors[ti].data[j] = orig - step;
                let down = f(&probe);
                probe.tensors[ti].data[j] = orig;
                (up - down) / (2.0 * step)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    for (&(ti, j), v) in positions.iter().zip(values) {
        grads.tensors[ti].data[j] = v;
    }
    grads
}

/// Finite-difference gradient of the denoiser loss on `batch`.
pub fn denoiser_finite_diff(
    params: &DenoiserParams,
    config: &DenoiserConfig,
    batch: &[Example],
    sched: &NoiseSchedule,
    step: f64,
) -> DenoiserParams {
    finite_diff_grads(
        params,
        |p| loss(p, config, batch, sched).expect("finite loss"),
        step,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorGradError {
    pub name: String,
    pub relative_error: f64,
}

/// `|a - b| / max(|a|, |b|)` per tensor; tensors whose gradients both have
/// norm below `floor` count as agreeing.
pub fn gradient_relative_errors(
    analytic: &DenoiserParams,
    numeric: &DenoiserParams,
    floor: f64,
) -> Vec<TensorGradError> {
    analytic
        .tensors
        .iter()
        .zip(&numeric.tensors)
        .map(|(a, b)| {
            let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nb);
            TensorGradError {
                name: a.name.clone(),
                relative_error: if scale < floor { 0.0 } else { diff / scale },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportLine {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl Report {
    /// Records a check that passes when `statistic <= threshold`.
    pub fn at_most(&mut self, name: impl Into<String>, statistic: f64, threshold: f64) {
        self.lines.push(ReportLine {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
        });
    }

    /// Records an exact check; the statistic is 0 on success and 1 otherwise.
    pub fn exact(&mut self, name: impl Into<String>, ok: bool) {
        self.lines.push(ReportLine {
            name: name.into(),
            statistic: if ok { 0.0 } else { 1.0 },
            threshold: 0.0,
            pass: ok,
        });
    }

    pub fn extend(&mut self, other: Report) {
        self.lines.extend(other.lines);
    }

    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    /// `name<TAB>statistic<TAB>threshold<TAB>PASS|FAIL` per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for l in &self.lines {
            writeln!(out, "{l}")?;
        }
        let failed = self.lines.iter().filter(|l| !l.pass).count();
        writeln!(out, "# {} checks, {} failed", self.lines.len(), failed)
    }
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{:.6e}\t{}",
            self.name,
            self.statistic,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}
