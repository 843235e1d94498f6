//! Cooperative per-app deadlines.
//!
//! Analyses cannot be pre-empted, so every stage polls a [`Deadline`] at its
//! boundaries and inside its long-running loops.

use std::time::{Duration, Instant};

/// Returned by [`Deadline::check`] once the budget is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("deadline exceeded")]
pub struct Expired;

#[derive(Debug, Clone, Copy)]
pub struct Deadline {
    at: Option<Instant>,
}

impl Deadline {
    /// A deadline that never expires.
    pub const fn none() -> Self {
        Deadline { at: None }
    }

    pub fn after(budget: Duration) -> Self {
        Deadline {
            at: Instant::now().checked_add(budget),
        }
    }

    pub fn is_expired(&self) -> bool {
        matches!(self.at, Some(at) if Instant::now() >= at)
    }

    pub fn check(&self) -> Result<(), Expired> {
        if self.is_expired() {
            Err(Expired)
        } else {
            Ok(())
        }
    }
}

impl Default for Deadline {
    fn default() -> Self {
        Deadline::none()
    }
}

/// Polls a deadline only every `interval` ticks, keeping `Instant::now`
/// out of tight loops.
pub(crate) struct Ticker<'a> {
    deadline: &'a Deadline,
    interval: u32,
    count: u32,
}

impl<'a> Ticker<'a> {
    pub(crate) fn new(deadline: &'a Deadline, interval: u32) -> Self {
        Ticker {
            deadline,
            interval: interval.max(1),
            count: 0,
        }
    }

    #[inline]
    pub(crate) fn tick(&mut self) -> Result<(), Expired> {
        self.count += 1;
        if self.count >= self.interval {
            self.count = 0;
            self.deadline.check()
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_never_expires() {
        assert!(Deadline::none().check().is_ok());
    }

    #[test]
    fn zero_budget_expires_immediately() {
        let d = Deadline::after(Duration::ZERO);
        assert_eq!(d.check(), Err(Expired));
    }

    #[test]
    fn ticker_polls_on_interval() {
        let d = Deadline::after(Duration::ZERO);
        let mut t = Ticker::new(&d, 3);
        assert!(t.tick().is_ok());
        assert!(t.tick().is_ok());
        assert_eq!(t.tick(), Err(Expired));
    }
}
