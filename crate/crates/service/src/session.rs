//! A live simulation plus the log of every command applied to it.
//!
//! Commands always apply at an instant the simulation has fully settled, so
//! the scenario, its seed and the log reproduce the session exactly.

use mrs_core::bus::AclMessage;
use mrs_core::sim::{Command, ConfigError, RunError, ScenarioConfig, SimError, Simulation, Submitted};
use mrs_core::time::SimTime;
use mrs_core::SimEvent;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub conversation_id: String,
    pub applied_at: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    pub command: Command,
}

/// What applying one command produced.
#[derive(Debug, Clone)]
pub struct Applied {
    pub submitted: Submitted,
    pub reply: Option<AclMessage>,
    pub events: Vec<SimEvent>,
}

pub struct Session {
    sim: Simulation,
    log: Vec<LoggedCommand>,
}

impl Session {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        let mut sim = Simulation::new(config)?;
        sim.capture_events(true);
        Ok(Session { sim, log: Vec::new() })
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn log(&self) -> &[LoggedCommand] {
        &self.log
    }

    /// Runs to `t` (capped at the end of the run) and returns what happened.
    pub fn advance_to(&mut self, t: SimTime) -> Result<Vec<SimEvent>, SimError> {
        self.sim.run_until(t)?;
        Ok(self.sim.drain_events())
    }

    /// Applies `command` at the current instant and settles it.
    pub fn apply(&mut self, command: Command, client: Option<String>) -> Result<Applied, SimError> {
        self.sim.settle()?;
        let submitted = self.sim.submit(command.clone());
        self.log.push(LoggedCommand {
            conversation_id: submitted.conversation_id.clone(),
            applied_at: submitted.applied_at,
            client,
            command,
        });
        self.sim.settle()?;
        Ok(Applied {
            reply: self.sim.reply(&submitted.conversation_id).cloned(),
            submitted,
            events: self.sim.drain_events(),
        })
    }

    /// Rebuilds a session from its scenario and command log, stopping at `until`.
    pub fn replay(config: ScenarioConfig, log: &[LoggedCommand], until: SimTime) -> Result<Session, RunError> {
        let mut session = Session::new(config)?;
        for entry in log {
            session.advance_to(entry.applied_at)?;
            session.apply(entry.command.clone(), entry.client.clone())?;
        }
        session.advance_to(until)?;
        Ok(session)
    }
}
