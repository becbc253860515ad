//! Time-ordered event queue.

use std::collections::BTreeMap;

use crate::time::SimTime;

/// Ordering class of an event among those due at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventClass {
    /// Message deliveries and queue polls.
    Message = 0,
    /// Robots finishing work.
    Work = 1,
    /// Request generation and churn.
    Control = 2,
    /// Controller deadlines: a reply due at the deadline instant wins.
    Deadline = 3,
    /// Metric sampling sees everything else due at the same instant.
    Sample = 4,
}

/// Events dequeue by `(time, class, insertion order)`; time never goes back.
#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    events: BTreeMap<(SimTime, EventClass, u64), E>,
    seq: u64,
    now: SimTime,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            events: BTreeMap::new(),
            seq: 0,
            now: SimTime::ZERO,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedules `event`; a time in the past is clamped to now.
    pub fn push(&mut self, at: SimTime, class: EventClass, event: E) {
        let at = at.max(self.now);
        self.seq += 1;
        self.events.insert((at, class, self.seq), event);
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.events.keys().next().map(|k| k.0)
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let ((at, _, _), e) = self.events.pop_first()?;
        self.now = at;
        Some((at, e))
    }

    /// Moves the clock forward without an event.
    pub fn advance_to(&mut self, at: SimTime) {
        self.now = self.now.max(at);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_breaks_time_ties() {
        let mut q = EventQueue::new();
        let t = SimTime::from_secs(1);
        q.push(t, EventClass::Sample, "sample");
        q.push(t, EventClass::Deadline, "deadline");
        q.push(t, EventClass::Message, "message");
        q.push(SimTime::ZERO, EventClass::Sample, "early");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["early", "message", "deadline", "sample"]);
    }

    proptest! {
        #[test]
        fn pops_are_monotone_and_fifo(events in prop::collection::vec((0u64..50, 0u8..5), 0..200)) {
            let classes = [EventClass::Message, EventClass::Work, EventClass::Control, EventClass::Deadline, EventClass::Sample];
            let mut q = EventQueue::new();
            for (i, (t, c)) in events.iter().enumerate() {
                q.push(SimTime::from_millis(*t), classes[*c as usize], (classes[*c as usize], i));
            }
            let mut last: Option<(SimTime, EventClass, usize)> = None;
            while let Some((t, (c, i))) = q.pop() {
                prop_assert_eq!(q.now(), t);
                if let Some(prev) = last {
                    prop_assert!(prev < (t, c, i));
                }
                last = Some((t, c, i));
            }
        }
    }
}
