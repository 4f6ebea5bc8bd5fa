//! Timestep compositions under the non-decreasing constraint.
//!
//! Exact counts of non-decreasing sequences are held in [`CountTables`]:
//! `d_start(i, j)` counts suffixes `<t_i = j, ..., t_F>` and `d_end(i, j)`
//! counts prefixes `<t_1, ..., t_i = j>`, both over timesteps `1..=T`.
//! The FoPP sampler picks a uniform anchor `(f, t_f)` and then extends it
//! backward and forward so that the completed composition is uniform among
//! all compositions passing through that anchor.
//!
//! Counts live in 128-bit integers with checked arithmetic. If any entry
//! overflows, the whole table is rebuilt with arbitrary-width integers.

use std::fmt;
use std::io::{Read, Write};

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-frame timesteps `<t_1, ..., t_F>` with `t_1 <= ... <= t_F <= T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimestepComposition {
    steps: Vec<usize>,
    max_timestep: usize,
}

impl TimestepComposition {
    pub fn new(steps: Vec<usize>, max_timestep: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("composition needs at least one frame"));
        }
        for (i, &t) in steps.iter().enumerate() {
            if t > max_timestep {
                return Err(Error::TimestepOutOfRange {
                    t,
                    lo: 0,
                    hi: max_timestep,
                });
            }
            if i > 0 && steps[i - 1] > t {
                return Err(Error::NotNonDecreasing {
                    frame: i + 1,
                    prev: steps[i - 1],
                    next: t,
                });
            }
        }
        Ok(Self {
            steps,
            max_timestep,
        })
    }

    /// Builds a composition without validation; callers guarantee the invariant.
    pub(crate) fn from_trusted(steps: Vec<usize>, max_timestep: usize) -> Self {
        debug_assert!(steps.windows(2).all(|w| w[0] <= w[1]));
        Self {
            steps,
            max_timestep,
        }
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn frames(&self) -> usize {
        self.steps.len()
    }

    pub fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    /// Timestep of `frame` (1-based).
    pub fn get(&self, frame: usize) -> usize {
        self.steps[frame - 1]
    }

    pub fn into_steps(self) -> Vec<usize> {
        self.steps
    }
}

impl fmt::Display for TimestepComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<")?;
        for (i, t) in self.steps.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ">")
    }
}

/// Integer type used for exact counts.
pub trait CountInt: Clone + Ord + fmt::Debug + Send + Sync {
    fn one() -> Self;
    fn checked_add(&self, other: &Self) -> Option<Self>;
    fn checked_mul(&self, other: &Self) -> Option<Self>;
    fn to_big(&self) -> BigUint;
    fn to_f64(&self) -> f64;
    /// Uniform integer in `[0, bound)`; `bound` must be positive.
    fn uniform_below<R: Rng + ?Sized>(bound: &Self, rng: &mut R) -> Self;
}

impl CountInt for u128 {
    fn one() -> Self {
        1
    }
    fn checked_add(&self, other: &Self) -> Option<Self> {
        u128::checked_add(*self, *other)
    }
    fn checked_mul(&self, other: &Self) -> Option<Self> {
        u128::checked_mul(*self, *other)
    }
    fn to_big(&self) -> BigUint {
        BigUint::from(*self)
    }
    fn to_f64(&self) -> f64 {
        *self as f64
    }
    fn uniform_below<R: Rng + ?Sized>(bound: &Self, rng: &mut R) -> Self {
        rng.random_range(0..*bound)
    }
}

impl CountInt for BigUint {
    fn one() -> Self {
        BigUint::from(1u8)
    }
    fn checked_add(&self, other: &Self) -> Option<Self> {
        Some(self + other)
    }
    fn checked_mul(&self, other: &Self) -> Option<Self> {
        Some(self * other)
    }
    fn to_big(&self) -> BigUint {
        self.clone()
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::INFINITY)
    }
    fn uniform_below<R: Rng + ?Sized>(bound: &Self, rng: &mut R) -> Self {
        // rejection sampling on the smallest covering bit width
        let bits = bound.bits();
        let n_bytes = bits.div_ceil(8) as usize;
        let excess = (n_bytes as u64 * 8 - bits) as u32;
        let mut buf = vec![0u8; n_bytes];
        loop {
            rng.fill(&mut buf[..]);
            // little-endian: trim the top byte
            if let Some(top) = buf.last_mut() {
                *top &= 0xffu8 >> excess;
            }
            let candidate = BigUint::from_bytes_le(&buf);
            if &candidate < bound {
                return candidate;
            }
        }
    }
}

/// Row-major `F x T` tables of exact counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Tables<N> {
    frames: usize,
    timesteps: usize,
    start: Vec<N>,
    end: Vec<N>,
}

impl<N: CountInt> Tables<N> {
    fn build(frames: usize, timesteps: usize) -> Option<Self> {
        let (f, t) = (frames, timesteps);
        let mut start = vec![N::one(); f * t];
        let mut end = vec![N::one(); f * t];
        // d_start(i, j) = sum_{k >= j} d_start(i + 1, k): suffix sums of the next row
        for i in (0..f.saturating_sub(1)).rev() {
            let mut acc = start[(i + 1) * t + t - 1].clone();
            start[i * t + t - 1] = acc.clone();
            for j in (0..t - 1).rev() {
                acc = acc.checked_add(&start[(i + 1) * t + j])?;
                start[i * t + j] = acc.clone();
            }
        }
        // d_end(i, j) = sum_{k <= j} d_end(i - 1, k): prefix sums of the previous row
        for i in 1..f {
            let mut acc = end[(i - 1) * t].clone();
            end[i * t] = acc.clone();
            for j in 1..t {
                acc = acc.checked_add(&end[(i - 1) * t + j])?;
                end[i * t + j] = acc.clone();
            }
        }
        let tables = Self {
            frames,
            timesteps,
            start,
            end,
        };
        // the total and every per-anchor product must be representable too
        tables.total()?;
        for i in 1..=f {
            for j in 1..=t {
                tables.start_at(i, j).checked_mul(tables.end_at(i, j))?;
            }
        }
        Some(tables)
    }

    fn start_at(&self, frame: usize, timestep: usize) -> &N {
        &self.start[(frame - 1) * self.timesteps + timestep - 1]
    }

    fn end_at(&self, frame: usize, timestep: usize) -> &N {
        &self.end[(frame - 1) * self.timesteps + timestep - 1]
    }

    fn total(&self) -> Option<N> {
        let t = self.timesteps;
        let mut acc = self.start[0].clone();
        for j in 1..t {
            acc = acc.checked_add(&self.start[j])?;
        }
        Some(acc)
    }

    /// Timestep for frame `frame < anchor`, given `t_{frame+1} = upper`.
    ///
    /// `d_end(frame + 1, .)` is the running prefix sum of `d_end(frame, .)`,
    /// so a uniform integer below `d_end(frame + 1, upper)` is located by
    /// binary search over that row.
    fn draw_backward<R: Rng + ?Sized>(&self, frame: usize, upper: usize, rng: &mut R) -> usize {
        let t = self.timesteps;
        let prefix = &self.end[frame * t..frame * t + upper];
        let u = N::uniform_below(&prefix[upper - 1], rng);
        // smallest k with prefix[k] > u
        prefix.partition_point(|p| p <= &u) + 1
    }

    /// Timestep for frame `frame > anchor`, given `t_{frame-1} = lower`.
    ///
    /// `d_start(frame - 1, .)` is the running suffix sum of `d_start(frame, .)`.
    fn draw_forward<R: Rng + ?Sized>(&self, frame: usize, lower: usize, rng: &mut R) -> usize {
        let t = self.timesteps;
        let suffix = &self.start[(frame - 2) * t + lower - 1..(frame - 1) * t];
        let u = N::uniform_below(&suffix[0], rng);
        // suffix is decreasing; pick the last k with suffix[k] > u
        lower + suffix.partition_point(|s| s > &u) - 1
    }

    fn sample_anchored<R: Rng + ?Sized>(
        &self,
        frame: usize,
        timestep: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut steps = vec![0usize; self.frames];
        steps[frame - 1] = timestep;
        for i in (1..frame).rev() {
            steps[i - 1] = self.draw_backward(i, steps[i], rng);
        }
        for i in frame + 1..=self.frames {
            steps[i - 1] = self.draw_forward(i, steps[i - 2], rng);
        }
        steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CountStore {
    Narrow(Tables<u128>),
    Wide(Tables<BigUint>),
}

/// Exact composition counts for `F` frames over timesteps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTables {
    store: CountStore,
}

impl CountTables {
    pub fn build(frames: usize, timesteps: usize) -> Result<Self> {
        if frames == 0 || timesteps == 0 {
            return Err(invalid(format!(
                "count tables need F, T >= 1, got F={frames} T={timesteps}"
            )));
        }
        let store = match Tables::<u128>::build(frames, timesteps) {
            Some(t) => CountStore::Narrow(t),
            None => CountStore::Wide(
                Tables::<BigUint>::build(frames, timesteps).expect("big integers never overflow"),
            ),
        };
        Ok(Self { store })
    }

    pub fn store(&self) -> &CountStore {
        &self.store
    }

    /// True when 128-bit arithmetic overflowed and wide integers are in use.
    pub fn overflowed(&self) -> bool {
        matches!(self.store, CountStore::Wide(_))
    }

    pub fn frames(&self) -> usize {
        match &self.store {
            CountStore::Narrow(t) => t.frames,
            CountStore::Wide(t) => t.frames,
        }
    }

    pub fn timesteps(&self) -> usize {
        match &self.store {
            CountStore::Narrow(t) => t.timesteps,
            CountStore::Wide(t) => t.timesteps,
        }
    }

    fn check_index(&self, frame: usize, timestep: usize) {
        assert!(
            (1..=self.frames()).contains(&frame) && (1..=self.timesteps()).contains(&timestep),
            "table index ({frame}, {timestep}) out of range"
        );
    }

    /// Number of non-decreasing suffixes starting with `t_frame = timestep`.
    pub fn d_start(&self, frame: usize, timestep: usize) -> BigUint {
        self.check_index(frame, timestep);
        match &self.store {
            CountStore::Narrow(t) => t.start_at(frame, timestep).to_big(),
            CountStore::Wide(t) => t.start_at(frame, timestep).clone(),
        }
    }

    /// Number of non-decreasing prefixes ending with `t_frame = timestep`.
    pub fn d_end(&self, frame: usize, timestep: usize) -> BigUint {
        self.check_index(frame, timestep);
        match &self.store {
            CountStore::Narrow(t) => t.end_at(frame, timestep).to_big(),
            CountStore::Wide(t) => t.end_at(frame, timestep).clone(),
        }
    }

    /// Number of compositions with `t_frame = timestep`.
    pub fn anchored_count(&self, frame: usize, timestep: usize) -> BigUint {
        self.d_start(frame, timestep) * self.d_end(frame, timestep)
    }

    fn anchored_count_f64(&self, frame: usize, timestep: usize) -> f64 {
        match &self.store {
            CountStore::Narrow(t) => {
                (t.start_at(frame, timestep) * t.end_at(frame, timestep)) as f64
            }
            CountStore::Wide(t) => {
                CountInt::to_f64(&(t.start_at(frame, timestep) * t.end_at(frame, timestep)))
            }
        }
    }

    /// Total number of compositions, summed from the first row of `d_start`.
    pub fn total(&self) -> BigUint {
        match &self.store {
            CountStore::Narrow(t) => t.total().expect("checked at build").to_big(),
            CountStore::Wide(t) => t.total().expect("big integers never overflow"),
        }
    }

    /// FoPP draw: uniform anchor, then uniform completion through the anchor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TimestepComposition {
        let frame = rng.random_range(1..=self.frames());
        let timestep = rng.random_range(1..=self.timesteps());
        self.sample_anchored(frame, timestep, rng)
    }

    /// Uniform composition among those with `t_frame = timestep`.
    pub fn sample_anchored<R: Rng + ?Sized>(
        &self,
        frame: usize,
        timestep: usize,
        rng: &mut R,
    ) -> TimestepComposition {
        self.check_index(frame, timestep);
        let steps = match &self.store {
            CountStore::Narrow(t) => t.sample_anchored(frame, timestep, rng),
            CountStore::Wide(t) => t.sample_anchored(frame, timestep, rng),
        };
        TimestepComposition::from_trusted(steps, self.timesteps())
    }

    /// Log-probability of `c` under the FoPP mixture
    /// `P(c) = 1/(F T) * sum_f 1 / N(f, c_f)`.
    pub fn log_probability(&self, c: &TimestepComposition) -> Result<f64> {
        let (f, t) = (self.frames(), self.timesteps());
        if c.frames() != f {
            return Err(Error::ShapeMismatch {
                expected: f,
                actual: c.frames(),
            });
        }
        if let Some(&bad) = c.steps().iter().find(|&&s| s < 1 || s > t) {
            return Err(Error::TimestepOutOfRange { t: bad, lo: 1, hi: t });
        }
        let mass: f64 = c
            .steps()
            .iter()
            .enumerate()
            .map(|(i, &s)| 1.0 / self.anchored_count_f64(i + 1, s))
            .sum();
        Ok(mass.ln() - ((f * t) as f64).ln())
    }
}

pub const TABLES_MAGIC: &[u8; 12] = b"ARDIFF-COUNT";
pub const TABLES_VERSION: u32 = 1;

impl CountTables {
    /// Binary cache: magic, `u32` version, `u32` F, `u32` T, `u32` bytes per
    /// entry, then `d_start` and `d_end` row-major as little-endian integers.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let (f, t) = (self.frames(), self.timesteps());
        let (start, end): (Vec<BigUint>, Vec<BigUint>) = match &self.store {
            CountStore::Narrow(tb) => (
                tb.start.iter().map(CountInt::to_big).collect(),
                tb.end.iter().map(CountInt::to_big).collect(),
            ),
            CountStore::Wide(tb) => (tb.start.clone(), tb.end.clone()),
        };
        let width = match &self.store {
            CountStore::Narrow(_) => 16,
            CountStore::Wide(_) => start
                .iter()
                .chain(&end)
                .map(|v| v.bits().div_ceil(8) as usize)
                .max()
                .unwrap_or(1)
                .max(17),
        };
        out.write_all(TABLES_MAGIC)?;
        for v in [TABLES_VERSION, f as u32, t as u32, width as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = vec![0u8; width];
        for v in start.iter().chain(&end) {
            buf.iter_mut().for_each(|b| *b = 0);
            let bytes = v.to_bytes_le();
            buf[..bytes.len()].copy_from_slice(&bytes);
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 12];
        input.read_exact(&mut magic)?;
        if &magic != TABLES_MAGIC {
            return Err(Error::Format("bad count-table magic".into()));
        }
        let mut word = || -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = word()?;
        if version != TABLES_VERSION as usize {
            return Err(Error::Format(format!("unsupported count-table version {version}")));
        }
        let (f, t, width) = (word()?, word()?, word()?);
        if f == 0 || t == 0 || width == 0 {
            return Err(Error::Format("empty count table".into()));
        }
        let mut raw = vec![0u8; 2 * f * t * width];
        input.read_exact(&mut raw)?;
        let values: Vec<BigUint> = raw.chunks_exact(width).map(BigUint::from_bytes_le).collect();
        let (start, end) = values.split_at(f * t);
        let store = if width <= 16 {
            let narrow = |v: &[BigUint]| -> Vec<u128> {
                v.iter().map(|x| x.to_u128().expect("width <= 16 bytes")).collect()
            };
            CountStore::Narrow(Tables {
                frames: f,
                timesteps: t,
                start: narrow(start),
                end: narrow(end),
            })
        } else {
            CountStore::Wide(Tables {
                frames: f,
                timesteps: t,
                start: start.to_vec(),
                end: end.to_vec(),
            })
        };
        let tables = Self { store };
        if tables != CountTables::build(f, t)? {
            return Err(Error::Format("count-table contents fail the recurrence".into()));
        }
        Ok(tables)
    }
}

/// Free-function form of [`CountTables::build`].
pub fn build_count_tables(frames: usize, timesteps: usize) -> Result<CountTables> {
    CountTables::build(frames, timesteps)
}

/// `binomial(n, k)` by exact multiplicative evaluation.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u8);
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1) at this point
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Number of non-decreasing `F`-sequences over `1..=T`.
///
/// Evaluated twice, by the count-table recurrence and by the closed form
/// `binomial(T + F - 1, F)`; a disagreement is reported as an error.
pub fn count_compositions(frames: usize, timesteps: usize) -> Result<BigUint> {
    let tables = CountTables::build(frames, timesteps)?;
    let by_tables = tables.total();
    let closed = binomial((timesteps + frames - 1) as u64, frames as u64);
    if by_tables != closed {
        return Err(Error::Internal(format!(
            "count tables give {by_tables}, closed form gives {closed} for F={frames} T={timesteps}"
        )));
    }
    Ok(closed)
}

/// Free-function form of [`CountTables::sample`].
pub fn fopp_sample<R: Rng + ?Sized>(tables: &CountTables, rng: &mut R) -> TimestepComposition {
    tables.sample(rng)
}

/// Free-function form of [`CountTables::log_probability`].
pub fn composition_log_probability(c: &TimestepComposition, tables: &CountTables) -> Result<f64> {
    tables.log_probability(c)
}

/// Baseline sampler: `t_1 ~ U(1, T)`, then `t_i ~ U(t_{i-1}, T)`.
///
/// Heavily over-weights compositions whose first frame is near `T`.
pub fn naive_sequential_sample<R: Rng + ?Sized>(
    frames: usize,
    timesteps: usize,
    rng: &mut R,
) -> TimestepComposition {
    assert!(frames >= 1 && timesteps >= 1);
    let mut steps = Vec::with_capacity(frames);
    let mut lower = 1;
    for _ in 0..frames {
        lower = rng.random_range(lower..=timesteps);
        steps.push(lower);
    }
    TimestepComposition::from_trusted(steps, timesteps)
}
