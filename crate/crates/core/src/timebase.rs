//! Deterministic time representation, the random-stream contract, and
//! Poisson event generation shared by all physics modules.
//!
//! All timestamps are signed 64-bit picosecond ticks from run start. A one
//! second gate is 10^12 ticks, so gates up to ~10^6 s fit without overflow
//! and dead-time comparisons are exact integer comparisons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TICKS_PER_SECOND: f64 = 1e12;

/// Absolute time in integer picoseconds from run start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeStamp(pub i64);

/// A span of time in integer picoseconds. Non-negative wherever it is used
/// as a physical delay, dead time, or window width.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Duration(pub i64);

impl TimeStamp {
    pub const ZERO: TimeStamp = TimeStamp(0);

    pub fn as_ps(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / TICKS_PER_SECOND
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub fn from_ps(ps: i64) -> Duration {
        Duration(ps)
    }

    pub fn from_ns(ns: i64) -> Duration {
        Duration(ns * 1_000)
    }

    pub fn from_us(us: i64) -> Duration {
        Duration(us * 1_000_000)
    }

    /// Rounds to the nearest tick.
    pub fn from_secs_f64(s: f64) -> Duration {
        Duration((s * TICKS_PER_SECOND).round() as i64)
    }

    pub fn as_ps(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / TICKS_PER_SECOND
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl std::ops::Add<Duration> for TimeStamp {
    type Output = TimeStamp;
    fn add(self, rhs: Duration) -> TimeStamp {
        TimeStamp(self.0 + rhs.0)
    }
}

impl std::ops::Sub<Duration> for TimeStamp {
    type Output = TimeStamp;
    fn sub(self, rhs: Duration) -> TimeStamp {
        TimeStamp(self.0 - rhs.0)
    }
}

impl std::ops::Sub<TimeStamp> for TimeStamp {
    type Output = Duration;
    fn sub(self, rhs: TimeStamp) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl std::ops::Add<Duration> for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

impl std::ops::Sub<Duration> for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Handle to one independent, reproducible random stream.
///
/// Identical `(seed, stream_id)` reproduces the identical draw sequence on
/// any platform. Every stochastic element of a scenario owns its own stream
/// (derived with [`RandomStream::substream`]), so adding an element never
/// perturbs the draws of the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> RandomStream {
        RandomStream { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> RandomStream {
        RandomStream { seed, stream_id }
    }

    /// Derives an independent child stream. `tag` values only need to be
    /// distinct among the children of one parent.
    pub fn substream(&self, tag: u64) -> RandomStream {
        RandomStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x51_7c_c1_b7))),
        }
    }

    /// Instantiates the counter-based generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Which input stream a merged event came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSource {
    A,
    B,
}

fn check_sorted(xs: &[TimeStamp], name: &str) -> Result<()> {
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("{name} is not sorted")));
    }
    Ok(())
}

/// Generates a homogeneous Poisson process on `[0, gate)` by exponential
/// inter-arrival accumulation. Timestamps are strictly increasing.
pub fn poisson_stream(
    rate_per_s: f64,
    gate: Duration,
    stream: &RandomStream,
) -> Result<Vec<TimeStamp>> {
    if !rate_per_s.is_finite() || rate_per_s < 0.0 {
        return Err(Error::invalid(format!("negative rate: {rate_per_s}")));
    }
    if gate.is_negative() {
        return Err(Error::invalid(format!("negative gate: {} ps", gate.0)));
    }
    let mut events = Vec::new();
    if rate_per_s == 0.0 || gate.0 == 0 {
        return Ok(events);
    }
    let rate_per_ps = rate_per_s / TICKS_PER_SECOND;
    let mut rng = stream.rng();
    let mut t = 0.0_f64;
    let gate_ps = gate.0 as f64;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate_per_ps;
        if t >= gate_ps {
            break;
        }
        let mut ticks = t.round() as i64;
        // The ps grid can collapse two arrivals onto one tick; keep the
        // stream strictly increasing.
        if let Some(last) = events.last() {
            let last: &TimeStamp = last;
            if ticks <= last.0 {
                ticks = last.0 + 1;
            }
        }
        if ticks >= gate.0 {
            break;
        }
        events.push(TimeStamp(ticks));
    }
    Ok(events)
}

/// Merges two sorted timestamp lists into one sorted list with source
/// labels. Ties break stably: stream `a` before stream `b` at equal ticks.
pub fn merge_streams(
    a: &[TimeStamp],
    b: &[TimeStamp],
) -> Result<Vec<(TimeStamp, StreamSource)>> {
    check_sorted(a, "stream a")?;
    check_sorted(b, "stream b")?;
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push((a[i], StreamSource::A));
            i += 1;
        } else {
            out.push((b[j], StreamSource::B));
            j += 1;
        }
    }
    out.extend(a[i..].iter().map(|&t| (t, StreamSource::A)));
    out.extend(b[j..].iter().map(|&t| (t, StreamSource::B)));
    Ok(out)
}
