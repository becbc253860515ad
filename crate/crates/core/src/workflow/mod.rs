//! Minimal token-based process engine with exclusive, inclusive and parallel
//! gateways. The three controllers ship their decision logic as `.process`
//! documents executed by this engine.

mod definition;
mod engine;
mod gateway;

pub use definition::{
    parse_process, Edge, InclusivePairing, Node, NodeKind, ProcessDefinition, ProcessError, Violation,
};
pub use engine::{run, step_instance, ActionHandler, ConditionEnv, ProcessInstance, RunReport, WorkflowFault};
pub use gateway::{merge_fire, split, Direction, GatewayFault, GatewayKind};
