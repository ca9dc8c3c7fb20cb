//! Dispatching rules: machine selection (Random, SMPT, WINQ) and buffer
//! selection (FIFO, FILO, SPT), plus the seeded PRNG they share.
//!
//! All rules key on machine id or insertion order, never on the order bids
//! happen to arrive in, so presenting bids in any order cannot change a
//! choice. Ties break toward the lowest machine id / earliest insertion.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::negotiation::{BidStatus, BiddingDocument, Invitation};
use crate::sim::BufferedWorkpiece;
use crate::{MachineId, Time};

/// splitmix64: public-domain 64-bit PRNG, trivially re-implementable in any
/// language, which keeps Random runs byte-identical across ports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MachineRule {
    Random,
    Smpt,
    Winq,
    Llm,
}

impl MachineRule {
    pub fn name(self) -> &'static str {
        match self {
            MachineRule::Random => "random",
            MachineRule::Smpt => "smpt",
            MachineRule::Winq => "winq",
            MachineRule::Llm => "llm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferRule {
    Fifo,
    Filo,
    Spt,
}

impl BufferRule {
    pub fn name(self) -> &'static str {
        match self {
            BufferRule::Fifo => "fifo",
            BufferRule::Filo => "filo",
            BufferRule::Spt => "spt",
        }
    }
}

/// What WINQ counts as a machine's workload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinqVariant {
    /// Remaining time of the in-progress operation plus buffered work.
    /// A busy-but-almost-done machine then correctly beats an idle machine
    /// with a long queue.
    #[default]
    ResidualPlusQueue,
    /// Buffered work only. Kept switchable for sensitivity checks.
    QueueOnly,
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub machine_rule: MachineRule,
    pub buffer_rule: BufferRule,
    pub seed: u64,
    /// Seeds per Random cell when benchmarking.
    pub random_samples: u32,
    pub winq_variant: WinqVariant,
    pub llm: Option<crate::llm::LlmConfig>,
}

impl PolicyConfig {
    pub fn new(machine_rule: MachineRule, buffer_rule: BufferRule, seed: u64) -> Self {
        Self {
            machine_rule,
            buffer_rule,
            seed,
            random_samples: 5,
            winq_variant: WinqVariant::default(),
            llm: None,
        }
    }

    pub fn with_llm(mut self, llm: crate::llm::LlmConfig) -> Self {
        self.llm = Some(llm);
        self
    }
}

fn bid_for(bids: &[BiddingDocument], machine: MachineId) -> &BiddingDocument {
    bids.iter()
        .find(|b| b.machine_id == machine)
        .expect("one bid per invited candidate")
}

/// Shortest machine processing time: the candidate on which the invited
/// operation itself runs fastest.
pub fn select_machine_smpt(invitation: &Invitation, bids: &[BiddingDocument]) -> MachineId {
    argmin_by_key(invitation, |m| bid_for(bids, m).duration_for_op)
}

pub fn workload(bid: &BiddingDocument, variant: WinqVariant) -> Time {
    let residual = match bid.status {
        BidStatus::Idle => 0,
        BidStatus::Busy { remaining_time } => remaining_time,
    };
    match variant {
        WinqVariant::ResidualPlusQueue => residual + bid.queue_work,
        WinqVariant::QueueOnly => bid.queue_work,
    }
}

/// Least workload across the candidates.
pub fn select_machine_winq(
    invitation: &Invitation,
    bids: &[BiddingDocument],
    variant: WinqVariant,
) -> MachineId {
    argmin_by_key(invitation, |m| workload(bid_for(bids, m), variant))
}

/// Uniform choice over the candidates; advances the rng exactly once even
/// when the choice is forced.
pub fn select_machine_random(invitation: &Invitation, rng: &mut SplitMix64) -> MachineId {
    let k = invitation.candidates.len();
    assert!(k > 0, "invitation must carry at least one candidate");
    let draw = rng.next_u64();
    invitation.candidates[(draw % k as u64) as usize]
}

fn argmin_by_key<F: Fn(MachineId) -> Time>(invitation: &Invitation, key: F) -> MachineId {
    // Candidates are stored ascending, so a strict `<` comparison breaks
    // ties toward the lowest machine id.
    let mut best = invitation.candidates[0];
    let mut best_key = key(best);
    for &candidate in &invitation.candidates[1..] {
        let k = key(candidate);
        if k < best_key {
            best = candidate;
            best_key = k;
        }
    }
    best
}

/// Picks which buffered workpiece a freed machine processes next.
/// Returns an index into `buffer` (insertion order preserved).
pub fn select_from_buffer(buffer: &[BufferedWorkpiece], rule: BufferRule) -> usize {
    assert!(!buffer.is_empty(), "buffer rule applied to an empty buffer");
    match rule {
        BufferRule::Fifo => 0,
        BufferRule::Filo => buffer.len() - 1,
        BufferRule::Spt => {
            let mut best = 0;
            for (i, item) in buffer.iter().enumerate().skip(1) {
                if item.duration_here < buffer[best].duration_here {
                    best = i;
                }
            }
            best
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn invitation(durations: &[(MachineId, Time)]) -> Invitation {
        let duration_on: BTreeMap<MachineId, Time> = durations.iter().copied().collect();
        Invitation {
            job_id: 0,
            op_index: 0,
            candidates: duration_on.keys().copied().collect(),
            duration_on,
            issued_at: 0,
        }
    }

    fn idle_bid(machine_id: MachineId, duration_for_op: Time) -> BiddingDocument {
        BiddingDocument {
            machine_id,
            status: BidStatus::Idle,
            queue_length: 0,
            queue_work: 0,
            duration_for_op,
        }
    }

    fn busy_bid(
        machine_id: MachineId,
        remaining_time: Time,
        queue_length: usize,
        queue_work: Time,
        duration_for_op: Time,
    ) -> BiddingDocument {
        BiddingDocument {
            machine_id,
            status: BidStatus::Busy { remaining_time },
            queue_length,
            queue_work,
            duration_for_op,
        }
    }

    fn item(duration_here: Time) -> BufferedWorkpiece {
        BufferedWorkpiece {
            job_id: 0,
            op_index: 0,
            arrival_time: 0,
            duration_here,
        }
    }

    #[test]
    fn splitmix64_reference_vectors() {
        // Frozen from an independent reference implementation.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let mut rng = SplitMix64::new(1);
        assert_eq!(rng.next_u64(), 0x910A_2DEC_8902_5CC1);
    }

    #[test]
    fn smpt_argmin_and_tiebreak() {
        let inv = invitation(&[(0, 6), (1, 3)]);
        let bids = vec![idle_bid(0, 6), idle_bid(1, 3)];
        assert_eq!(select_machine_smpt(&inv, &bids), 1);

        let inv = invitation(&[(0, 4), (1, 4)]);
        let bids = vec![idle_bid(0, 4), idle_bid(1, 4)];
        assert_eq!(select_machine_smpt(&inv, &bids), 0);

        let inv = invitation(&[(3, 9)]);
        let bids = vec![idle_bid(3, 9)];
        assert_eq!(select_machine_smpt(&inv, &bids), 3);
    }

    #[test]
    fn winq_prefers_least_workload() {
        let inv = invitation(&[(0, 5), (1, 5)]);
        let bids = vec![idle_bid(0, 5), busy_bid(1, 3, 1, 4, 5)];
        assert_eq!(
            select_machine_winq(&inv, &bids, WinqVariant::ResidualPlusQueue),
            0
        );

        let both_empty = vec![idle_bid(0, 5), idle_bid(1, 5)];
        assert_eq!(
            select_machine_winq(&inv, &both_empty, WinqVariant::ResidualPlusQueue),
            0
        );

        let inv3 = invitation(&[(0, 1), (1, 1), (2, 1)]);
        let bids3 = vec![
            busy_bid(0, 5, 0, 0, 1),
            busy_bid(1, 2, 0, 0, 1),
            busy_bid(2, 9, 0, 0, 1),
        ];
        assert_eq!(
            select_machine_winq(&inv3, &bids3, WinqVariant::ResidualPlusQueue),
            1
        );
    }

    #[test]
    fn winq_variant_changes_busy_weighting() {
        // Queue-only ignores the residual 9, residual-plus-queue does not.
        let inv = invitation(&[(0, 5), (1, 5)]);
        let bids = vec![busy_bid(0, 9, 0, 0, 5), idle_bid(1, 5)];
        assert_eq!(
            select_machine_winq(&inv, &bids, WinqVariant::ResidualPlusQueue),
            1
        );
        assert_eq!(select_machine_winq(&inv, &bids, WinqVariant::QueueOnly), 0);
    }

    #[test]
    fn random_uses_one_draw_modulo_candidates() {
        // splitmix64(0) first output is 0xE220A8397B1DCDAF; mod 3 == 1.
        let inv = invitation(&[(0, 1), (1, 1), (2, 1)]);
        let mut rng = SplitMix64::new(0);
        assert_eq!(select_machine_random(&inv, &mut rng), 1);

        // A forced choice still advances the state exactly once.
        let single = invitation(&[(7, 2)]);
        let mut rng = SplitMix64::new(0);
        assert_eq!(select_machine_random(&single, &mut rng), 7);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn random_same_seed_same_sequence() {
        let inv = invitation(&[(0, 1), (1, 1), (2, 1), (3, 1)]);
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        for _ in 0..50 {
            assert_eq!(
                select_machine_random(&inv, &mut a),
                select_machine_random(&inv, &mut b)
            );
        }
    }

    #[test]
    fn random_uniformity_over_four_candidates() {
        let inv = invitation(&[(0, 1), (1, 1), (2, 1), (3, 1)]);
        let mut rng = SplitMix64::new(42);
        let mut counts = [0u32; 4];
        for _ in 0..10_000 {
            counts[select_machine_random(&inv, &mut rng)] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&freq), "frequency {freq} out of gate");
        }
    }

    #[test]
    fn buffer_rules() {
        let buffer = vec![item(5), item(2)];
        assert_eq!(select_from_buffer(&buffer, BufferRule::Fifo), 0);
        assert_eq!(select_from_buffer(&buffer, BufferRule::Filo), 1);
        assert_eq!(select_from_buffer(&buffer, BufferRule::Spt), 1);

        let tied = vec![item(3), item(3)];
        assert_eq!(select_from_buffer(&tied, BufferRule::Spt), 0);
    }

    proptest! {
        #[test]
        fn smpt_invariant_under_common_offset(
            durations in prop::collection::vec(1u64..50, 1..6),
            offset in 0u64..100
        ) {
            let base: Vec<(MachineId, Time)> =
                durations.iter().copied().enumerate().collect();
            let shifted: Vec<(MachineId, Time)> =
                durations.iter().map(|d| d + offset).enumerate().collect();
            let inv_a = invitation(&base);
            let inv_b = invitation(&shifted);
            let bids_a: Vec<_> = base.iter().map(|&(m, d)| idle_bid(m, d)).collect();
            let bids_b: Vec<_> = shifted.iter().map(|&(m, d)| idle_bid(m, d)).collect();
            prop_assert_eq!(
                select_machine_smpt(&inv_a, &bids_a),
                select_machine_smpt(&inv_b, &bids_b)
            );
        }

        #[test]
        fn winq_invariant_under_positive_scaling(
            loads in prop::collection::vec((0u64..20, 0u64..20), 1..6),
            scale in 1u64..10
        ) {
            let inv = invitation(
                &loads.iter().enumerate().map(|(m, _)| (m, 1)).collect::<Vec<_>>()
            );
            let bids: Vec<_> = loads
                .iter()
                .enumerate()
                .map(|(m, &(rem, qw))| busy_bid(m, rem, 0, qw, 1))
                .collect();
            let scaled: Vec<_> = loads
                .iter()
                .enumerate()
                .map(|(m, &(rem, qw))| busy_bid(m, rem * scale, 0, qw * scale, 1))
                .collect();
            prop_assert_eq!(
                select_machine_winq(&inv, &bids, WinqVariant::ResidualPlusQueue),
                select_machine_winq(&inv, &scaled, WinqVariant::ResidualPlusQueue)
            );
        }

        #[test]
        fn rules_ignore_bid_presentation_order(
            durations in prop::collection::vec((1u64..30, 0u64..30), 2..6),
            rotation in 0usize..6
        ) {
            let base: Vec<(MachineId, Time)> =
                durations.iter().map(|&(d, _)| d).enumerate().collect();
            let inv = invitation(&base);
            let mut bids: Vec<_> = durations
                .iter()
                .enumerate()
                .map(|(m, &(d, qw))| busy_bid(m, qw / 2, 0, qw, d))
                .collect();
            let smpt_sorted = select_machine_smpt(&inv, &bids);
            let winq_sorted =
                select_machine_winq(&inv, &bids, WinqVariant::ResidualPlusQueue);
            bids.rotate_left(rotation % bids.len());
            bids.reverse();
            prop_assert_eq!(select_machine_smpt(&inv, &bids), smpt_sorted);
            prop_assert_eq!(
                select_machine_winq(&inv, &bids, WinqVariant::ResidualPlusQueue),
                winq_sorted
            );
        }

        #[test]
        fn buffer_rule_totality(
            durations in prop::collection::vec(1u64..30, 1..8),
            rule in prop::sample::select(vec![BufferRule::Fifo, BufferRule::Filo, BufferRule::Spt])
        ) {
            let buffer: Vec<_> = durations.into_iter().map(item).collect();
            let index = select_from_buffer(&buffer, rule);
            prop_assert!(index < buffer.len());
        }
    }
}
