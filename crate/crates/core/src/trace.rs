//! Line-delimited message trace and metric replay.
//!
//! A trace is a header line, one line per delivered message, and an end
//! line. Because metrics only observe delivered messages, replaying a trace
//! rebuilds the run's series and robot reports exactly.

use serde::{Deserialize, Serialize};

use crate::bus::{names, AclMessage, Content};
use crate::domain::{CapabilitySet, RequestOutcome, RobotId};
use crate::metrics::{derive_event, MetricsCollector, MetricsError, RobotReport, SystemSeriesRow};
use crate::scalar::Scalar;
use crate::time::SimTime;

pub const TRACE_VERSION: u32 = 1;

/// A robot as known when the run starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    pub registered: bool,
    pub tasks_completed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub duration_ms: u64,
    pub sample_interval_ms: u64,
    pub roster: Vec<RosterEntry>,
}

impl TraceHeader {
    /// Sampling instants up to and including `end`.
    pub fn sample_times(&self, end: SimTime) -> impl Iterator<Item = SimTime> + use<> {
        let step = self.sample_interval_ms;
        let end = end.as_millis().min(self.duration_ms);
        (1..)
            .map(move |k| k * step)
            .take_while(move |t| step > 0 && *t <= end)
            .map(SimTime::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Message {
        t: SimTime,
        #[serde(flatten)]
        message: AclMessage,
    },
    End {
        t: SimTime,
        messages: u64,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("trace version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("trace is truncated after line {line}")]
    Truncated { line: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Metrics { line: usize, source: MetricsError },
}

/// Accumulates a trace in memory.
#[derive(Debug, Clone, Default)]
pub struct TraceWriter {
    text: String,
    messages: u64,
}

impl TraceWriter {
    pub fn new(header: TraceHeader) -> Self {
        let mut w = TraceWriter::default();
        w.push(&TraceRecord::Header(header));
        w
    }

    fn push(&mut self, record: &TraceRecord) {
        // Records are plain data; serialization cannot fail.
        self.text
            .push_str(&serde_json::to_string(record).expect("trace record serializes"));
        self.text.push('\n');
    }

    pub fn message(&mut self, t: SimTime, message: &AclMessage) {
        self.messages += 1;
        self.push(&TraceRecord::Message {
            t,
            message: message.clone(),
        });
    }

    pub fn end(&mut self, t: SimTime) {
        let messages = self.messages;
        self.push(&TraceRecord::End { t, messages });
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn into_text(self) -> String {
        self.text
    }
}

/// A parsed, complete trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub messages: Vec<(SimTime, AclMessage)>,
    pub end: SimTime,
}

/// Parses a trace; `Ok(None)` for an empty document.
pub fn parse(text: &str) -> Result<Option<Trace>, TraceError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(None);
    };
    // Check the version before the full header shape so old traces get a
    // precise error.
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| TraceError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != u64::from(TRACE_VERSION) {
            return Err(TraceError::Version {
                found: v as u32,
                expected: TRACE_VERSION,
            });
        }
    }
    let header = match serde_json::from_value(raw) {
        Ok(TraceRecord::Header(h)) => h,
        Ok(_) => {
            return Err(TraceError::Malformed {
                line: 1,
                message: "first record is not a header".into(),
            })
        }
        Err(e) => {
            return Err(TraceError::Malformed {
                line: 1,
                message: e.to_string(),
            })
        }
    };
    let mut messages = Vec::new();
    let mut last_line = 1;
    for (idx, line) in lines {
        let number = idx + 1;
        let record: TraceRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            // A cut-off final line is truncation, not corruption.
            Err(e) if e.is_eof() => return Err(TraceError::Truncated { line: last_line }),
            Err(e) => {
                return Err(TraceError::Malformed {
                    line: number,
                    message: e.to_string(),
                })
            }
        };
        match record {
            TraceRecord::Message { t, message } => messages.push((t, message)),
            TraceRecord::End { t, messages: count } => {
                if count != messages.len() as u64 {
                    return Err(TraceError::Malformed {
                        line: number,
                        message: format!("end record counts {count} messages, found {}", messages.len()),
                    });
                }
                return Ok(Some(Trace {
                    header,
                    messages,
                    end: t,
                }));
            }
            TraceRecord::Header(_) => {
                return Err(TraceError::Malformed {
                    line: number,
                    message: "second header".into(),
                })
            }
        }
        last_line = number;
    }
    Err(TraceError::Truncated { line: last_line })
}

/// Metrics re-derived from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay<S: Scalar> {
    pub series: Vec<SystemSeriesRow<S>>,
    pub robots: Vec<RobotReport<S>>,
    pub outcomes: Vec<RequestOutcome>,
}

impl<S: Scalar> Default for Replay<S> {
    fn default() -> Self {
        Replay {
            series: Vec::new(),
            robots: Vec::new(),
            outcomes: Vec::new(),
        }
    }
}

pub fn replay<S: Scalar>(text: &str) -> Result<Replay<S>, TraceError> {
    match parse(text)? {
        None => Ok(Replay::default()),
        Some(trace) => replay_trace(&trace),
    }
}

pub fn replay_trace<S: Scalar>(trace: &Trace) -> Result<Replay<S>, TraceError> {
    let mut collector = MetricsCollector::<S>::new();
    for r in &trace.header.roster {
        collector.add_robot(r.id.clone(), r.registered, r.tasks_completed, SimTime::ZERO);
    }
    let mut out = Replay::default();
    let mut samples = trace.header.sample_times(trace.end).peekable();
    for (i, (t, msg)) in trace.messages.iter().enumerate() {
        while let Some(s) = samples.next_if(|s| s < t) {
            out.series.push(collector.system_snapshot(s));
        }
        if let Some(event) = derive_event(msg) {
            collector
                .on_event(*t, event)
                .map_err(|source| TraceError::Metrics { line: i + 2, source })?;
        }
        if let (names::REQUESTOR, Content::Outcome(o)) = (msg.receiver.name(), &msg.content) {
            out.outcomes.push(o.clone());
        }
    }
    out.series.extend(samples.map(|s| collector.system_snapshot(s)));
    out.robots = collector.robot_reports(trace.end);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{Performative, RobotStatus};
    use crate::domain::{caps, OutcomeStatus, Request, RequestId, RequestKind};
    use crate::kb::Lifecycle;

    fn header() -> TraceHeader {
        TraceHeader {
            version: TRACE_VERSION,
            seed: 7,
            duration_ms: 180_000,
            sample_interval_ms: 60_000,
            roster: vec![RosterEntry {
                id: RobotId::new("R1"),
                capabilities: caps(["C1"]),
                registered: true,
                tasks_completed: 9,
            }],
        }
    }

    fn sample_trace() -> String {
        let rq = Request {
            id: RequestId::new("req-1"),
            kind: RequestKind::new("Rq2"),
            arrival: SimTime::from_secs(60),
        };
        let mut w = TraceWriter::new(header());
        w.message(
            SimTime::from_secs(60),
            &AclMessage::new(
                Performative::Agree,
                names::RQM,
                names::REQUESTOR,
                "req-1",
                Content::RequestAck(rq),
            ),
        );
        w.message(
            SimTime::from_secs(70),
            &AclMessage::new(
                Performative::Inform,
                names::RBM,
                names::MONITOR,
                "status/R1",
                Content::RobotStatus(RobotStatus {
                    robot: RobotId::new("R1"),
                    state: Lifecycle::Controlled,
                    capabilities: caps(["C1"]),
                    tasks_completed: 9,
                    deregistration_pending: false,
                }),
            ),
        );
        w.message(
            SimTime::from_secs(130),
            &AclMessage::new(
                Performative::Inform,
                names::RQM,
                names::REQUESTOR,
                "req-1",
                Content::Outcome(RequestOutcome {
                    request_id: RequestId::new("req-1"),
                    status: OutcomeStatus::Success,
                    completion_time: SimTime::from_secs(130),
                }),
            ),
        );
        w.end(SimTime::from_secs(180));
        w.into_text()
    }

    #[test]
    fn round_trip_and_replay() {
        let text = sample_trace();
        let trace = parse(&text).unwrap().unwrap();
        assert_eq!(trace.messages.len(), 3);
        let r: Replay<f64> = replay(&text).unwrap();
        let rows: Vec<_> = r
            .series
            .iter()
            .map(|s| (s.time.as_millis(), s.received, s.unprocessed, s.success))
            .collect();
        assert_eq!(rows, vec![(60_000, 1, 1, 0), (120_000, 1, 1, 0), (180_000, 1, 0, 1)]);
        assert_eq!(r.series[1].latency_ms, 60_000);
        assert_eq!(r.robots[0].times.controlled_ms, 110_000);
        assert_eq!(r.outcomes.len(), 1);
    }

    #[test]
    fn message_lines_are_flat() {
        let text = sample_trace();
        let line = text.lines().nth(1).unwrap();
        assert!(
            line.starts_with(r#"{"record":"message","t":60000,"performative":"agree""#),
            "{line}"
        );
    }

    #[test]
    fn empty_trace_is_empty_series() {
        let r: Replay<f64> = replay("").unwrap();
        assert!(r.series.is_empty() && r.robots.is_empty());
    }

    #[test]
    fn truncation_detected() {
        let text = sample_trace();
        let lines: Vec<_> = text.lines().collect();
        let without_end = lines[..lines.len() - 1].join("\n");
        assert_eq!(parse(&without_end), Err(TraceError::Truncated { line: 4 }));
        let cut = &text[..text.len() - 40];
        assert!(matches!(parse(cut), Err(TraceError::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_detected() {
        let text = sample_trace().replacen("\"version\":1", "\"version\":9", 1);
        assert_eq!(
            parse(&text),
            Err(TraceError::Version {
                found: 9,
                expected: TRACE_VERSION
            })
        );
    }
}
