//! The bid/negotiate/decide protocol run at every decision point.
//!
//! One negotiation assigns one operation to one machine: the inviter
//! summarizes the operation, every capable machine bids with its current
//! status, and a decision backend (a heuristic rule applied to the bids, or
//! the two-stage LLM path via a natural-language question document) picks
//! the winner. Heuristic backends skip the question document and the LLM
//! agents entirely; they are rule-based comparators. Every negotiation
//! leaves a full audit record.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::instance::Instance;
use crate::llm::{LlmConfig, LlmError, LlmSession};
use crate::policy::{
    select_machine_random, select_machine_smpt, select_machine_winq, MachineRule, PolicyConfig,
    SplitMix64, WinqVariant,
};
use crate::sim::{MachineState, MachineStatus};
use crate::{JobId, MachineId, OpIndex, Time};

/// Call for bids: the operation to place and the machines able to run it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invitation {
    pub job_id: JobId,
    pub op_index: OpIndex,
    /// Exactly the capable machines, ascending.
    pub candidates: Vec<MachineId>,
    pub duration_on: BTreeMap<MachineId, Time>,
    pub issued_at: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum BidStatus {
    Idle,
    Busy { remaining_time: Time },
}

/// One machine's reply: its live status and what the invited operation
/// would cost on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiddingDocument {
    pub machine_id: MachineId,
    pub status: BidStatus,
    pub queue_length: usize,
    /// Total processing time sitting in the buffer.
    pub queue_work: Time,
    pub duration_for_op: Time,
}

/// Natural-language consolidation of invitation, bids, and objective;
/// the question put to the thinking agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionDocument {
    pub text: String,
    pub invitation: Invitation,
    pub bids: Vec<BiddingDocument>,
    pub objective: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecisionSource {
    Heuristic { rule: MachineRule },
    Llm,
    Fallback { rule: MachineRule },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(rename = "machine")]
    pub machine_id: MachineId,
    pub source: DecisionSource,
}

/// Audit record of one negotiation, appended in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: Time,
    #[serde(rename = "job")]
    pub job_id: JobId,
    #[serde(rename = "op")]
    pub op_index: OpIndex,
    pub invitation: Invitation,
    pub bids: Vec<BiddingDocument>,
    pub decision: Decision,
    /// Thinking-agent analysis; empty for heuristic sources.
    #[serde(rename = "suggestion")]
    pub suggestion_text: String,
}

/// Builds the invitation for one operation. Candidates are exactly the
/// machines in the operation's alternative set, ascending.
pub fn build_invitation(
    job_id: JobId,
    op_index: OpIndex,
    instance: &Instance,
    clock: Time,
) -> Invitation {
    let op = instance
        .operation(job_id, op_index)
        .expect("negotiation for an operation the instance does not contain");
    Invitation {
        job_id,
        op_index,
        candidates: op.alternatives.keys().copied().collect(),
        duration_on: op.alternatives.clone(),
        issued_at: clock,
    }
}

/// Builds one machine's bid against an invitation, reflecting its state at
/// the current clock.
pub fn build_bid(
    machine_id: MachineId,
    invitation: &Invitation,
    machines: &[MachineState],
    clock: Time,
) -> BiddingDocument {
    assert!(
        invitation.candidates.contains(&machine_id),
        "bid requested from machine {machine_id} that was not invited"
    );
    let machine = &machines[machine_id];
    let status = match machine.status {
        MachineStatus::Idle => BidStatus::Idle,
        MachineStatus::Busy { end_time, .. } => BidStatus::Busy {
            remaining_time: end_time - clock,
        },
    };
    BiddingDocument {
        machine_id,
        status,
        queue_length: machine.buffer.len(),
        queue_work: machine.buffer.iter().map(|w| w.duration_here).sum(),
        duration_for_op: invitation.duration_on[&machine_id],
    }
}

/// Renders the question document. A pure function of its payload: equal
/// payloads produce byte-identical text.
pub fn render_question_document(
    invitation: &Invitation,
    bids: &[BiddingDocument],
    objective: &str,
) -> QuestionDocument {
    debug_assert_eq!(bids.len(), invitation.candidates.len());
    let mut text = String::new();
    let _ = writeln!(
        text,
        "A machine must be selected for operation {} of job {} (time {}).",
        invitation.op_index, invitation.job_id, invitation.issued_at
    );
    let _ = writeln!(text, "Objective: {objective}.");
    let _ = writeln!(text, "Candidate machines:");
    for &machine in &invitation.candidates {
        let bid = bids
            .iter()
            .find(|b| b.machine_id == machine)
            .expect("one bid per candidate");
        let (status, remaining) = match bid.status {
            BidStatus::Idle => ("idle", 0),
            BidStatus::Busy { remaining_time } => ("busy", remaining_time),
        };
        let _ = writeln!(
            text,
            "- Machine {}: status={}, remaining_time={}, queue_length={}, queue_work={}, processing_time_for_this_operation={}",
            machine, status, remaining, bid.queue_length, bid.queue_work, bid.duration_for_op
        );
    }
    let _ = writeln!(
        text,
        "Select exactly one machine id from the candidates above."
    );
    QuestionDocument {
        text,
        invitation: invitation.clone(),
        bids: bids.to_vec(),
        objective: objective.to_string(),
    }
}

/// The decision backend threaded through a run: the machine rule plus any
/// state it carries (rng for Random, chat session for LLM).
pub enum MachineSelector {
    Random(SplitMix64),
    Smpt,
    Winq,
    Llm(Box<LlmSession>),
}

pub struct Negotiator {
    selector: MachineSelector,
    winq_variant: WinqVariant,
    objective: String,
}

impl Negotiator {
    pub fn from_config(cfg: &PolicyConfig) -> Result<Self, LlmError> {
        let selector = match cfg.machine_rule {
            MachineRule::Random => MachineSelector::Random(SplitMix64::new(cfg.seed)),
            MachineRule::Smpt => MachineSelector::Smpt,
            MachineRule::Winq => MachineSelector::Winq,
            MachineRule::Llm => {
                let llm_cfg: &LlmConfig = cfg
                    .llm
                    .as_ref()
                    .ok_or(LlmError::MissingLlmConfig)?;
                MachineSelector::Llm(Box::new(LlmSession::new(llm_cfg.clone())?))
            }
        };
        Ok(Self {
            selector,
            winq_variant: cfg.winq_variant,
            objective: "minimize makespan".to_string(),
        })
    }

    /// Runs one full negotiation for (job, op): invitation, one bid per
    /// capable machine, decision. The winner is always a candidate.
    pub fn negotiate(
        &mut self,
        job_id: JobId,
        op_index: OpIndex,
        instance: &Instance,
        machines: &[MachineState],
        clock: Time,
    ) -> Result<DecisionRecord, LlmError> {
        let invitation = build_invitation(job_id, op_index, instance, clock);
        let bids: Vec<BiddingDocument> = invitation
            .candidates
            .iter()
            .map(|&m| build_bid(m, &invitation, machines, clock))
            .collect();

        let (machine_id, source, suggestion_text) = match &mut self.selector {
            MachineSelector::Random(rng) => (
                select_machine_random(&invitation, rng),
                DecisionSource::Heuristic {
                    rule: MachineRule::Random,
                },
                String::new(),
            ),
            MachineSelector::Smpt => (
                select_machine_smpt(&invitation, &bids),
                DecisionSource::Heuristic {
                    rule: MachineRule::Smpt,
                },
                String::new(),
            ),
            MachineSelector::Winq => (
                select_machine_winq(&invitation, &bids, self.winq_variant),
                DecisionSource::Heuristic {
                    rule: MachineRule::Winq,
                },
                String::new(),
            ),
            MachineSelector::Llm(session) => {
                let question = render_question_document(&invitation, &bids, &self.objective);
                let outcome = session.select_machine(&question, self.winq_variant)?;
                (outcome.machine_id, outcome.source, outcome.suggestion_text)
            }
        };

        assert!(
            invitation.candidates.contains(&machine_id),
            "decision backend chose machine {machine_id} outside the candidate set"
        );
        Ok(DecisionRecord {
            time: clock,
            job_id,
            op_index,
            invitation,
            bids,
            decision: Decision { machine_id, source },
            suggestion_text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::parse_instance;
    use crate::policy::BufferRule;
    use crate::sim::BufferedWorkpiece;

    fn idle_machines(n: usize) -> Vec<MachineState> {
        (0..n).map(MachineState::new).collect()
    }

    #[test]
    fn invitation_candidates_ascend() {
        // Alternatives listed out of order in the file: machine 3 first.
        let inst = parse_instance("1 3\n1 2 3 4 1 7", "t").unwrap();
        let inv = build_invitation(0, 0, &inst, 0);
        assert_eq!(inv.candidates, vec![0, 2]);
        assert_eq!(inv.duration_on[&0], 7);
        assert_eq!(inv.duration_on[&2], 4);

        let single = parse_instance("1 3\n1 1 2 9", "t").unwrap();
        let inv = build_invitation(0, 0, &single, 0);
        assert_eq!(inv.candidates, vec![1]);
    }

    #[test]
    fn bid_reflects_machine_state() {
        let inst = parse_instance("1 2\n1 2 1 5 2 5", "t").unwrap();
        let inv = build_invitation(0, 0, &inst, 6);
        let mut machines = idle_machines(2);

        let bid = build_bid(0, &inv, &machines, 6);
        assert_eq!(bid.status, BidStatus::Idle);
        assert_eq!((bid.queue_length, bid.queue_work), (0, 0));
        assert_eq!(bid.duration_for_op, 5);

        machines[1].status = MachineStatus::Busy {
            job_id: 0,
            op_index: 0,
            end_time: 9,
        };
        machines[1].buffer.push(BufferedWorkpiece {
            job_id: 0,
            op_index: 0,
            arrival_time: 2,
            duration_here: 4,
        });
        let bid = build_bid(1, &inv, &machines, 6);
        assert_eq!(bid.status, BidStatus::Busy { remaining_time: 3 });
        assert_eq!((bid.queue_length, bid.queue_work), (1, 4));
    }

    #[test]
    #[should_panic(expected = "not invited")]
    fn bid_for_uninvited_machine_is_an_engine_bug() {
        let inst = parse_instance("1 2\n1 1 1 5", "t").unwrap();
        let inv = build_invitation(0, 0, &inst, 0);
        let machines = idle_machines(2);
        build_bid(1, &inv, &machines, 0);
    }

    #[test]
    fn question_document_is_pure_and_ordered() {
        let inst = parse_instance("1 3\n1 3 1 4 2 6 3 2", "t").unwrap();
        let inv = build_invitation(0, 0, &inst, 5);
        let machines = idle_machines(3);
        let bids: Vec<_> = inv
            .candidates
            .iter()
            .map(|&m| build_bid(m, &inv, &machines, 5))
            .collect();

        let a = render_question_document(&inv, &bids, "minimize makespan");
        let b = render_question_document(&inv, &bids, "minimize makespan");
        assert_eq!(a.text, b.text);

        let lines: Vec<&str> = a
            .text
            .lines()
            .filter(|l| l.starts_with("- Machine"))
            .collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("- Machine 0:"));
        assert!(lines[1].starts_with("- Machine 1:"));
        assert!(lines[2].starts_with("- Machine 2:"));
        assert!(a.text.contains("minimize makespan"));
    }

    #[test]
    fn negotiate_smpt_picks_shortest_and_records() {
        let inst = parse_instance("1 2\n1 2 1 6 2 3", "t").unwrap();
        let cfg = PolicyConfig::new(MachineRule::Smpt, BufferRule::Fifo, 0);
        let mut negotiator = Negotiator::from_config(&cfg).unwrap();
        let machines = idle_machines(2);
        let record = negotiator.negotiate(0, 0, &inst, &machines, 0).unwrap();
        assert_eq!(record.decision.machine_id, 1);
        assert_eq!(
            record.decision.source,
            DecisionSource::Heuristic {
                rule: MachineRule::Smpt
            }
        );
        assert!(record.suggestion_text.is_empty());
        assert_eq!(record.bids.len(), record.invitation.candidates.len());
    }

    #[test]
    fn negotiate_single_candidate_forced_for_any_backend() {
        let inst = parse_instance("1 2\n1 1 2 4", "t").unwrap();
        let machines = idle_machines(2);
        for rule in [MachineRule::Random, MachineRule::Smpt, MachineRule::Winq] {
            let cfg = PolicyConfig::new(rule, BufferRule::Fifo, 123);
            let mut negotiator = Negotiator::from_config(&cfg).unwrap();
            let record = negotiator.negotiate(0, 0, &inst, &machines, 0).unwrap();
            assert_eq!(record.decision.machine_id, 1);
        }
    }

    #[test]
    fn llm_rule_without_config_is_a_config_error() {
        let cfg = PolicyConfig::new(MachineRule::Llm, BufferRule::Fifo, 0);
        assert!(matches!(
            Negotiator::from_config(&cfg),
            Err(LlmError::MissingLlmConfig)
        ));
    }
}
