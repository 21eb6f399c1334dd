//! Simulated time. Everything inside the engine is integer microseconds;
//! milliseconds only appear at the I/O boundary.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Simulated time in microseconds.
pub type Micros = u64;

pub const MICROS_PER_MS: u64 = 1_000;

/// Converts a millisecond quantity to whole microseconds (nearest).
pub fn ms_to_us(ms: f64) -> Micros {
    (ms * MICROS_PER_MS as f64).round().max(0.0) as Micros
}

/// Duration of a layer whose profiled latency is `ms`; never zero, so every
/// started layer advances simulated time.
pub fn layer_duration_us(ms: f64) -> Micros {
    ms_to_us(ms).max(1)
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / MICROS_PER_MS as f64
}

/// A request deadline. `Infinite` orders after every finite deadline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Deadline {
    At(Micros),
    Infinite,
}

impl Deadline {
    pub fn is_finite(self) -> bool {
        matches!(self, Deadline::At(_))
    }

    pub fn micros(self) -> Option<Micros> {
        match self {
            Deadline::At(t) => Some(t),
            Deadline::Infinite => None,
        }
    }
}

impl fmt::Display for Deadline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Deadline::At(t) => write!(f, "{:.3}ms", us_to_ms(*t)),
            Deadline::Infinite => f.write_str("inf"),
        }
    }
}

/// Frame rate as an exact positive rational (frames per `den` seconds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fps {
    num: u64,
    den: u64,
}

impl Fps {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        if num == 0 || den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Fps { num: num / g, den: den / g })
    }

    pub fn integer(fps: u64) -> Option<Self> {
        Fps::new(fps, 1)
    }

    /// Parses a decimal frame rate, keeping up to three fractional digits exactly.
    pub fn from_f64(fps: f64) -> Option<Self> {
        if !fps.is_finite() || fps <= 0.0 {
            return None;
        }
        let milli = (fps * 1000.0).round();
        if milli < 1.0 || milli > u64::MAX as f64 {
            return None;
        }
        Fps::new(milli as u64, 1000)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Arrival time of the `n`-th frame: floor(n * 1e6 / fps), computed exactly.
    pub fn frame_arrival(self, n: u64) -> Micros {
        let t = n as u128 * 1_000_000u128 * self.den as u128 / self.num as u128;
        t as Micros
    }

    /// Number of frames with arrival strictly before `horizon`.
    pub fn frames_before(self, horizon: Micros) -> u64 {
        // smallest n with n * 1e6 * den >= horizon * num
        let numer = horizon as u128 * self.num as u128;
        let denom = 1_000_000u128 * self.den as u128;
        numer.div_ceil(denom) as u64
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}", self.as_f64())
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_orders_last() {
        assert!(Deadline::At(u64::MAX) < Deadline::Infinite);
        assert!(Deadline::At(3) < Deadline::At(4));
    }

    #[test]
    fn frame_arrivals_do_not_drift() {
        let fps = Fps::integer(120).unwrap();
        assert_eq!(fps.frame_arrival(1), 8_333);
        assert_eq!(fps.frame_arrival(3), 25_000);
        assert_eq!(fps.frame_arrival(120_000), 1_000_000_000);
        assert_eq!(fps.frames_before(100_000), 12);
        assert_eq!(fps.frames_before(0), 0);
    }

    #[test]
    fn fractional_rates_are_exact() {
        let ntsc = Fps::from_f64(59.94).unwrap();
        assert_eq!(ntsc.frame_arrival(5994), 100_000_000);
        assert!(Fps::from_f64(0.0).is_none());
        assert!(Fps::from_f64(-1.0).is_none());
    }

    #[test]
    fn ms_conversion_rounds() {
        assert_eq!(ms_to_us(98.62), 98_620);
        assert_eq!(ms_to_us(0.0004), 0);
        assert_eq!(us_to_ms(1_577_920), 1577.92);
    }
}
