//! Flexible job shop problem instances in the Brandimarte text format used
//! by the mk01..mk15 benchmark family.
//!
//! Format: line 1 holds `num_jobs num_machines` plus an optional
//! average-flexibility token (accepted and ignored). Then, per job:
//! `num_ops`, followed for each operation by `k` and `k` pairs of
//! `machine duration`. Machine indices are 1-based in files and 0-based
//! everywhere else. Newlines after the header line are not significant.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::{JobId, MachineId, OpIndex, Time};

/// One processing step of a job. The operation may run on any machine in
/// `alternatives`, with a machine-dependent duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub job_id: JobId,
    pub op_index: OpIndex,
    /// machine id -> duration, keyed ascending.
    pub alternatives: BTreeMap<MachineId, Time>,
}

/// An ordered routing of operations. Operation `j + 1` may start only after
/// operation `j` completes; the simulator enforces this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub job_id: JobId,
    pub operations: Vec<Operation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub name: String,
    pub num_machines: usize,
    pub jobs: Vec<Job>,
}

impl Instance {
    pub fn num_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn total_operations(&self) -> usize {
        self.jobs.iter().map(|j| j.operations.len()).sum()
    }

    pub fn operation(&self, job_id: JobId, op_index: OpIndex) -> Option<&Operation> {
        self.jobs.get(job_id)?.operations.get(op_index)
    }

    /// Serializes back to the text format (1-based machine ids). Re-parsing
    /// the output yields a structurally identical instance.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.jobs.len(), self.num_machines));
        for job in &self.jobs {
            let mut line = format!("{}", job.operations.len());
            for op in &job.operations {
                line.push_str(&format!(" {}", op.alternatives.len()));
                for (machine, duration) in &op.alternatives {
                    line.push_str(&format!(" {} {}", machine + 1, duration));
                }
            }
            line.push('\n');
            out.push_str(&line);
        }
        out
    }
}

/// Parse failure with the 1-based position of the offending token in the
/// whitespace-separated token stream (header tokens included).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("header line must contain 2 or 3 tokens, found {found}")]
    BadHeader { found: usize },
    #[error("token {position} ({token:?}): expected an integer")]
    NonInteger { position: usize, token: String },
    #[error("token {position}: input ended while reading {expected}")]
    UnexpectedEnd { position: usize, expected: &'static str },
    #[error(
        "token {position}: job {job} operation {op} declares {declared} alternatives \
         but only {found} complete pairs follow"
    )]
    AlternativeCountMismatch {
        position: usize,
        job: JobId,
        op: OpIndex,
        declared: usize,
        found: usize,
    },
    #[error("token {position}: machine index {value} out of range [1, {num_machines}]")]
    MachineOutOfRange {
        position: usize,
        value: i64,
        num_machines: usize,
    },
    #[error("token {position}: duration {value} must be >= 1")]
    DurationTooSmall { position: usize, value: i64 },
    #[error("token {position} ({token:?}): {field} must be >= 1")]
    NonPositiveCount {
        position: usize,
        token: String,
        field: &'static str,
    },
    #[error("token {position} ({token:?}): trailing unconsumed input")]
    TrailingTokens { position: usize, token: String },
    #[error("token {position}: duplicate machine index {value} in alternative list")]
    DuplicateMachine { position: usize, value: i64 },
}

struct Tokens<'a> {
    toks: Vec<&'a str>,
    next: usize,
}

impl<'a> Tokens<'a> {
    /// 1-based position of the token that would be read next.
    fn position(&self) -> usize {
        self.next + 1
    }

    fn take(&mut self, expected: &'static str) -> Result<(&'a str, usize), ParseError> {
        let pos = self.position();
        match self.toks.get(self.next) {
            Some(tok) => {
                self.next += 1;
                Ok((tok, pos))
            }
            None => Err(ParseError::UnexpectedEnd {
                position: pos,
                expected,
            }),
        }
    }

    fn take_int(&mut self, expected: &'static str) -> Result<(i64, usize), ParseError> {
        let (tok, pos) = self.take(expected)?;
        let value = tok.parse::<i64>().map_err(|_| ParseError::NonInteger {
            position: pos,
            token: tok.to_string(),
        })?;
        Ok((value, pos))
    }

    fn take_count(&mut self, field: &'static str) -> Result<(usize, usize), ParseError> {
        let start = self.position();
        let (value, pos) = self.take_int(field)?;
        if value < 1 {
            let token = self.toks[start - 1].to_string();
            return Err(ParseError::NonPositiveCount {
                position: pos,
                token,
                field,
            });
        }
        Ok((value as usize, pos))
    }
}

/// Parses the raw contents of an instance file. File machine indices are
/// 1-based and converted to 0-based here, the single conversion point.
pub fn parse_instance(text: &str, name: &str) -> Result<Instance, ParseError> {
    let header_line = text.lines().next().unwrap_or("");
    let header_tokens = header_line.split_whitespace().count();
    if header_tokens < 2 || header_tokens > 3 {
        return Err(ParseError::BadHeader {
            found: header_tokens,
        });
    }

    let mut tokens = Tokens {
        toks: text.split_whitespace().collect(),
        next: 0,
    };

    let (num_jobs, _) = tokens.take_count("job count")?;
    let (num_machines, _) = tokens.take_count("machine count")?;
    if header_tokens == 3 {
        // Average-flexibility token, present in some distributions of the
        // benchmark files. May be non-integer; ignored either way.
        tokens.take("average flexibility")?;
    }

    let mut jobs = Vec::new();
    for job_id in 0..num_jobs {
        let (num_ops, _) = tokens.take_count("operation count")?;
        let mut operations = Vec::new();
        for op_index in 0..num_ops {
            let (declared, k_pos) = tokens.take_count("alternative count")?;
            let mut alternatives = BTreeMap::new();
            for pair in 0..declared {
                let short = |_: ParseError| ParseError::AlternativeCountMismatch {
                    position: k_pos,
                    job: job_id,
                    op: op_index,
                    declared,
                    found: pair,
                };
                let (machine, m_pos) = tokens.take_int("machine index").map_err(|e| match e {
                    ParseError::UnexpectedEnd { .. } => short(e),
                    other => other,
                })?;
                let (duration, d_pos) = tokens.take_int("duration").map_err(|e| match e {
                    ParseError::UnexpectedEnd { .. } => short(e),
                    other => other,
                })?;
                if machine < 1 || machine as usize > num_machines {
                    return Err(ParseError::MachineOutOfRange {
                        position: m_pos,
                        value: machine,
                        num_machines,
                    });
                }
                if duration < 1 {
                    return Err(ParseError::DurationTooSmall {
                        position: d_pos,
                        value: duration,
                    });
                }
                let machine_id = machine as usize - 1;
                if alternatives.insert(machine_id, duration as Time).is_some() {
                    return Err(ParseError::DuplicateMachine {
                        position: m_pos,
                        value: machine,
                    });
                }
            }
            operations.push(Operation {
                job_id,
                op_index,
                alternatives,
            });
        }
        jobs.push(Job { job_id, operations });
    }

    if tokens.next < tokens.toks.len() {
        return Err(ParseError::TrailingTokens {
            position: tokens.position(),
            token: tokens.toks[tokens.next].to_string(),
        });
    }

    Ok(Instance {
        name: name.to_string(),
        num_machines,
        jobs,
    })
}

/// One broken instance invariant. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstanceViolation {
    NoMachines,
    NoJobs,
    JobIdMismatch { index: usize, found: JobId },
    NoOperations { job: JobId },
    OpIndexMismatch { job: JobId, index: usize, found: OpIndex },
    OpJobIdMismatch { job: JobId, op: OpIndex, found: JobId },
    NoAlternatives { job: JobId, op: OpIndex },
    MachineOutOfRange { job: JobId, op: OpIndex, machine: MachineId },
    ZeroDuration { job: JobId, op: OpIndex, machine: MachineId },
}

impl fmt::Display for InstanceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use InstanceViolation::*;
        match self {
            NoMachines => write!(f, "instance has no machines"),
            NoJobs => write!(f, "instance has no jobs"),
            JobIdMismatch { index, found } => {
                write!(f, "job at index {index} has job_id {found}")
            }
            NoOperations { job } => write!(f, "job {job} has no operations"),
            OpIndexMismatch { job, index, found } => {
                write!(f, "job {job}: operation at index {index} has op_index {found}")
            }
            OpJobIdMismatch { job, op, found } => {
                write!(f, "job {job} operation {op} carries job_id {found}")
            }
            NoAlternatives { job, op } => {
                write!(f, "job {job} operation {op} has an empty alternative set")
            }
            MachineOutOfRange { job, op, machine } => {
                write!(f, "job {job} operation {op}: machine {machine} out of range")
            }
            ZeroDuration { job, op, machine } => {
                write!(f, "job {job} operation {op}: duration 0 on machine {machine}")
            }
        }
    }
}

/// Re-checks every instance invariant independently of the parser.
/// Empty result means the instance is valid.
pub fn validate_instance(inst: &Instance) -> Vec<InstanceViolation> {
    let mut violations = Vec::new();
    if inst.num_machines == 0 {
        violations.push(InstanceViolation::NoMachines);
    }
    if inst.jobs.is_empty() {
        violations.push(InstanceViolation::NoJobs);
    }
    for (index, job) in inst.jobs.iter().enumerate() {
        if job.job_id != index {
            violations.push(InstanceViolation::JobIdMismatch {
                index,
                found: job.job_id,
            });
        }
        if job.operations.is_empty() {
            violations.push(InstanceViolation::NoOperations { job: index });
        }
        for (op_pos, op) in job.operations.iter().enumerate() {
            if op.op_index != op_pos {
                violations.push(InstanceViolation::OpIndexMismatch {
                    job: index,
                    index: op_pos,
                    found: op.op_index,
                });
            }
            if op.job_id != index {
                violations.push(InstanceViolation::OpJobIdMismatch {
                    job: index,
                    op: op_pos,
                    found: op.job_id,
                });
            }
            if op.alternatives.is_empty() {
                violations.push(InstanceViolation::NoAlternatives {
                    job: index,
                    op: op_pos,
                });
            }
            for (&machine, &duration) in &op.alternatives {
                if machine >= inst.num_machines {
                    violations.push(InstanceViolation::MachineOutOfRange {
                        job: index,
                        op: op_pos,
                        machine,
                    });
                }
                if duration == 0 {
                    violations.push(InstanceViolation::ZeroDuration {
                        job: index,
                        op: op_pos,
                        machine,
                    });
                }
            }
        }
    }
    violations
}
