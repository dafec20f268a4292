//! Simulation time. One `SimTime` unit is a nanosecond.
//!
//! Deterministic runs use a virtual clock advanced by the event driver;
//! socket runs derive `SimTime` from a wall-clock epoch.

use std::time::Instant;

/// A point in simulated (or wall) time, in nanoseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * 1e9).round() as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    /// Saturating addition of a duration in nanoseconds.
    pub fn plus(self, nanos: u64) -> Self {
        SimTime(self.0.saturating_add(nanos))
    }

    /// Duration since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

/// Wall-clock source mapping `Instant`s onto the `SimTime` axis.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock {
            epoch: Instant::now(),
        }
    }

    pub fn now(&self) -> SimTime {
        SimTime(self.epoch.elapsed().as_nanos() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let t = SimTime::from_millis(2);
        assert_eq!(t.as_nanos(), 2_000_000);
        assert_eq!(t.plus(500).as_nanos(), 2_000_500);
        assert_eq!(t.plus(500).since(t), 500);
        assert_eq!(t.since(t.plus(500)), 0);
    }

    #[test]
    fn wall_clock_monotone() {
        let clock = WallClock::start();
        let a = clock.now();
        let b = clock.now();
        assert!(b >= a);
    }
}
