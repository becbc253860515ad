//! System and robot indicators.
//!
//! The collector consumes [`MetricsEvent`]s, which are derived from delivered
//! messages only (request acknowledgements and outcomes sent to the
//! requestor, robot status notices sent to the monitor). A run and a replay
//! of its trace therefore feed the collector the same event sequence.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::bus::{names, AclMessage, Content};
use crate::domain::{CapabilitySet, FailureReason, OutcomeStatus, RequestId, RobotId};
use crate::kb::Lifecycle;
use crate::scalar::{format_fixed, ratio, Scalar};
use crate::time::{secs_string, SimTime, MS_PER_MINUTE};

/// Per-robot time accounting. Each accumulator is kept separately so the
/// identities between them are checked, not assumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RobotClock {
    state: Lifecycle,
    since: SimTime,
    created_at: SimTime,
    totals: ClockTotals,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClockTotals {
    pub controlled_ms: u64,
    pub uncontrolled_ms: u64,
    pub registered_ms: u64,
    pub unregistered_ms: u64,
    pub overall_ms: u64,
}

impl ClockTotals {
    /// Checks `T_c + T_unc = T_r` and `T_r + T_unr = T_ov`.
    pub fn check(&self) -> Result<(), String> {
        if self.controlled_ms + self.uncontrolled_ms != self.registered_ms {
            return Err(format!(
                "controlled {} + uncontrolled {} != registered {}",
                self.controlled_ms, self.uncontrolled_ms, self.registered_ms
            ));
        }
        if self.registered_ms + self.unregistered_ms != self.overall_ms {
            return Err(format!(
                "registered {} + unregistered {} != overall {}",
                self.registered_ms, self.unregistered_ms, self.overall_ms
            ));
        }
        Ok(())
    }
}

impl RobotClock {
    /// A clock for a robot first known at `at`, in the unregistered state.
    pub fn new(at: SimTime) -> Self {
        RobotClock {
            state: Lifecycle::Unregistered,
            since: at,
            created_at: at,
            totals: ClockTotals::default(),
        }
    }

    pub fn state(&self) -> Lifecycle {
        self.state
    }

    pub fn created_at(&self) -> SimTime {
        self.created_at
    }

    fn accrue(totals: &mut ClockTotals, state: Lifecycle, dt: u64) {
        match state {
            Lifecycle::Controlled => {
                totals.controlled_ms += dt;
                totals.registered_ms += dt;
            }
            Lifecycle::Uncontrolled => {
                totals.uncontrolled_ms += dt;
                totals.registered_ms += dt;
            }
            Lifecycle::Unregistered => totals.unregistered_ms += dt,
        }
        totals.overall_ms += dt;
    }

    pub fn transition(&mut self, now: SimTime, next: Lifecycle) {
        let dt = now.since(self.since);
        Self::accrue(&mut self.totals, self.state, dt);
        self.since = self.since.max(now);
        self.state = next;
    }

    /// Accumulators as of `now`, without mutating the clock.
    pub fn totals_at(&self, now: SimTime) -> ClockTotals {
        let mut t = self.totals;
        Self::accrue(&mut t, self.state, now.since(self.since));
        t
    }

    /// Checks both accounting identities and `T_ov = now - created_at`.
    pub fn check(&self, now: SimTime) -> Result<(), String> {
        let t = self.totals_at(now);
        t.check()?;
        let age = now.since(self.created_at);
        if t.overall_ms != age {
            return Err(format!("overall {} != age {}", t.overall_ms, age));
        }
        Ok(())
    }
}

/// Observation fed to the collector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsEvent {
    Arrival {
        request_id: RequestId,
        arrival: SimTime,
    },
    Outcome {
        request_id: RequestId,
        status: OutcomeStatus,
    },
    RobotState {
        robot: RobotId,
        state: Lifecycle,
        capabilities: CapabilitySet,
        tasks_completed: u64,
    },
}

/// Maps a delivered message to the observation it carries, if any.
pub fn derive_event(msg: &AclMessage) -> Option<MetricsEvent> {
    match (msg.receiver.name(), &msg.content) {
        (names::REQUESTOR, Content::RequestAck(rq)) => Some(MetricsEvent::Arrival {
            request_id: rq.id.clone(),
            arrival: rq.arrival,
        }),
        (names::REQUESTOR, Content::Outcome(o)) => Some(MetricsEvent::Outcome {
            request_id: o.request_id.clone(),
            status: o.status,
        }),
        (names::MONITOR, Content::RobotStatus(s)) => Some(MetricsEvent::RobotState {
            robot: s.robot.clone(),
            state: s.state,
            capabilities: s.capabilities.clone(),
            tasks_completed: s.tasks_completed,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("event at {at} precedes the previous event at {last}")]
    OutOfOrder { at: SimTime, last: SimTime },
    #[error("request {0} arrived twice")]
    DuplicateArrival(RequestId),
    #[error("outcome for request {0}, which is not pending")]
    UnknownRequest(RequestId),
    #[error("robot {0} is unknown")]
    UnknownRobot(RobotId),
}

/// One sampled row of the system time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemSeriesRow<S: Scalar> {
    pub time: SimTime,
    pub received: u64,
    pub processed: u64,
    pub unprocessed: u64,
    pub success: u64,
    pub failed: u64,
    /// Age of the oldest pending request.
    pub latency_ms: u64,
    /// `success / failed`; absent when nothing has failed.
    pub efficiency: Option<S>,
}

impl<S: Scalar> SystemSeriesRow<S> {
    pub fn check(&self) -> Result<(), String> {
        if self.processed + self.unprocessed != self.received {
            return Err(format!("processed + unprocessed != received in {self:?}"));
        }
        if self.success + self.failed != self.processed {
            return Err(format!("success + failed != processed in {self:?}"));
        }
        if (self.latency_ms == 0) != (self.unprocessed == 0) {
            return Err(format!("latency and unprocessed disagree in {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotReport<S: Scalar> {
    pub robot_id: RobotId,
    #[serde(flatten)]
    pub times: ClockTotals,
    pub availability: S,
    pub utilization: S,
    /// Absent when the robot has never been idle while registered.
    pub effectiveness: Option<S>,
}

impl<S: Scalar> RobotReport<S> {
    pub fn from_totals(robot_id: RobotId, times: ClockTotals) -> Self {
        RobotReport {
            robot_id,
            availability: ratio(times.registered_ms, times.overall_ms).unwrap_or_else(S::zero),
            utilization: ratio(times.controlled_ms, times.overall_ms).unwrap_or_else(S::zero),
            effectiveness: ratio(times.controlled_ms, times.uncontrolled_ms),
            times,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct RobotView {
    clock: Option<RobotClock>,
    tasks_completed: u64,
}

#[derive(Debug, Clone)]
pub struct MetricsCollector<S: Scalar> {
    last: SimTime,
    received: u64,
    success: u64,
    failed: u64,
    pending: BTreeMap<RequestId, SimTime>,
    pending_by_age: BTreeSet<(SimTime, RequestId)>,
    failures: BTreeMap<FailureReason, u64>,
    completed_latency_ms: Vec<(RequestId, u64)>,
    robots: BTreeMap<RobotId, RobotView>,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> Default for MetricsCollector<S> {
    fn default() -> Self {
        MetricsCollector {
            last: SimTime::ZERO,
            received: 0,
            success: 0,
            failed: 0,
            pending: BTreeMap::new(),
            pending_by_age: BTreeSet::new(),
            failures: BTreeMap::new(),
            completed_latency_ms: Vec::new(),
            robots: BTreeMap::new(),
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<S: Scalar> MetricsCollector<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds a robot known from the start of the run.
    pub fn add_robot(&mut self, robot: RobotId, registered: bool, tasks_completed: u64, at: SimTime) {
        let mut clock = RobotClock::new(at);
        if registered {
            clock.transition(at, Lifecycle::Uncontrolled);
        }
        self.robots.insert(
            robot,
            RobotView {
                clock: Some(clock),
                tasks_completed,
            },
        );
    }

    pub fn on_event(&mut self, at: SimTime, event: MetricsEvent) -> Result<(), MetricsError> {
        if at < self.last {
            return Err(MetricsError::OutOfOrder { at, last: self.last });
        }
        self.last = at;
        match event {
            MetricsEvent::Arrival { request_id, arrival } => {
                if self.pending.contains_key(&request_id) {
                    return Err(MetricsError::DuplicateArrival(request_id));
                }
                self.received += 1;
                self.pending_by_age.insert((arrival, request_id.clone()));
                self.pending.insert(request_id, arrival);
            }
            MetricsEvent::Outcome { request_id, status } => {
                let arrival = self
                    .pending
                    .remove(&request_id)
                    .ok_or_else(|| MetricsError::UnknownRequest(request_id.clone()))?;
                self.pending_by_age.remove(&(arrival, request_id.clone()));
                match status.failure_reason() {
                    None => self.success += 1,
                    Some(r) => {
                        self.failed += 1;
                        *self.failures.entry(r).or_default() += 1;
                    }
                }
                self.completed_latency_ms.push((request_id, at.since(arrival)));
            }
            MetricsEvent::RobotState {
                robot,
                state,
                tasks_completed,
                ..
            } => {
                let view = self.robots.entry(robot).or_default();
                view.clock
                    .get_or_insert_with(|| RobotClock::new(at))
                    .transition(at, state);
                view.tasks_completed = tasks_completed;
            }
        }
        Ok(())
    }

    pub fn system_snapshot(&self, at: SimTime) -> SystemSeriesRow<S> {
        let latency_ms = self
            .pending_by_age
            .first()
            .map_or(0, |(arrival, _)| at.since(*arrival).max(1));
        SystemSeriesRow {
            time: at,
            received: self.received,
            processed: self.success + self.failed,
            unprocessed: self.pending.len() as u64,
            success: self.success,
            failed: self.failed,
            latency_ms,
            efficiency: ratio(self.success, self.failed),
        }
    }

    pub fn robot_report(&self, robot: &RobotId, at: SimTime) -> Result<RobotReport<S>, MetricsError> {
        let clock = self
            .robots
            .get(robot)
            .and_then(|v| v.clock.as_ref())
            .ok_or_else(|| MetricsError::UnknownRobot(robot.clone()))?;
        Ok(RobotReport::from_totals(robot.clone(), clock.totals_at(at)))
    }

    pub fn robot_reports(&self, at: SimTime) -> Vec<RobotReport<S>> {
        self.robots
            .iter()
            .filter_map(|(id, v)| {
                v.clock
                    .as_ref()
                    .map(|c| RobotReport::from_totals(id.clone(), c.totals_at(at)))
            })
            .collect()
    }

    pub fn robot_clock(&self, robot: &RobotId) -> Option<&RobotClock> {
        self.robots.get(robot)?.clock.as_ref()
    }

    pub fn robot_history(&self, robot: &RobotId) -> Option<u64> {
        self.robots.get(robot).map(|v| v.tasks_completed)
    }

    pub fn failures_by_reason(&self) -> &BTreeMap<FailureReason, u64> {
        &self.failures
    }

    /// Arrival-to-outcome time of every finished request, in completion order.
    pub fn completed_latencies(&self) -> &[(RequestId, u64)] {
        &self.completed_latency_ms
    }

    pub fn registered_count(&self) -> usize {
        self.robots
            .values()
            .filter(|v| v.clock.as_ref().is_some_and(|c| c.state().is_registered()))
            .count()
    }
}

pub const SYSTEM_SERIES_HEADER: &str = "t_min,received,processed,unprocessed,success,failed,latency_s,efficiency";
pub const ROBOT_REPORT_HEADER: &str =
    "robot_id,t_c_s,t_unc_s,t_r_s,t_unr_s,t_ov_s,availability,utilization,effectiveness";

const RATIO_DECIMALS: usize = 6;

/// Minutes since start: an integer on whole minutes, else three decimals.
pub fn minutes_string(at: SimTime) -> String {
    let ms = at.as_millis();
    if ms.is_multiple_of(MS_PER_MINUTE) {
        (ms / MS_PER_MINUTE).to_string()
    } else {
        format!("{:.3}", ms as f64 / MS_PER_MINUTE as f64)
    }
}

/// `∞` when only successes exist, empty when nothing was processed.
pub fn efficiency_string<S: Scalar>(row: &SystemSeriesRow<S>) -> String {
    match row.efficiency {
        Some(v) => format_fixed(v, RATIO_DECIMALS),
        None if row.success > 0 => "∞".to_owned(),
        None => String::new(),
    }
}

pub fn system_series_csv<S: Scalar>(rows: &[SystemSeriesRow<S>]) -> String {
    let mut out = String::from(SYSTEM_SERIES_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            minutes_string(r.time),
            r.received,
            r.processed,
            r.unprocessed,
            r.success,
            r.failed,
            secs_string(r.latency_ms),
            efficiency_string(r),
        ));
    }
    out
}

pub fn robot_report_csv<S: Scalar>(reports: &[RobotReport<S>]) -> String {
    let mut out = String::from(ROBOT_REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let t = &r.times;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.robot_id,
            secs_string(t.controlled_ms),
            secs_string(t.uncontrolled_ms),
            secs_string(t.registered_ms),
            secs_string(t.unregistered_ms),
            secs_string(t.overall_ms),
            format_fixed(r.availability, RATIO_DECIMALS),
            format_fixed(r.utilization, RATIO_DECIMALS),
            r.effectiveness
                .map(|e| format_fixed(e, RATIO_DECIMALS))
                .unwrap_or_default(),
        ));
    }
    out
}
