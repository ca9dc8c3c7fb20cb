//! Flexible job shop simulator where every operation-to-machine assignment
//! is decided at runtime by a bid/negotiate/decide protocol among machine
//! agents, with interchangeable heuristic and LLM decision backends.

pub mod instance;
pub mod llm;
pub mod negotiation;
pub mod policy;
pub mod sim;

pub use instance::{parse_instance, validate_instance, Instance, Job, Operation};
pub use negotiation::{
    BidStatus, BiddingDocument, Decision, DecisionRecord, DecisionSource, Invitation,
    Negotiator, QuestionDocument,
};
pub use policy::{BufferRule, MachineRule, PolicyConfig, SplitMix64, WinqVariant};
pub use sim::{run_simulation, GanttEntry, MachineState, Schedule, SimError};

/// Integer simulation time. All instance durations are integral, so the
/// clock never needs fractional ticks.
pub type Time = u64;
pub type MachineId = usize;
pub type JobId = usize;
pub type OpIndex = usize;
