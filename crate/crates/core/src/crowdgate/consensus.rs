//! Class resolution by consecutive agreement.
//!
//! The model's predicted class is vote zero. Each approved worker answer is
//! compared with the current class: a match finalizes, a mismatch adopts the
//! worker's class and republishes the subtask.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::labelstore::ClassLabel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub current_class: ClassLabel,
    /// True while the current class still awaits a confirming vote.
    pub agreement_needed: bool,
    pub publish_count: u32,
}

impl ConsensusState {
    pub fn from_prediction(class: ClassLabel) -> Self {
        Self {
            current_class: class,
            agreement_needed: true,
            publish_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConsensusDecision {
    /// The class is settled. `bbox` is `None` for background, whose box is
    /// not meaningful.
    Finalize {
        class_label: ClassLabel,
        bbox: Option<BBox>,
    },
    Republish {
        state: ConsensusState,
        bbox: BBox,
    },
}

pub fn consensus_step(
    state: &ConsensusState,
    answer_class: &ClassLabel,
    answer_box: BBox,
) -> ConsensusDecision {
    if *answer_class == state.current_class {
        ConsensusDecision::Finalize {
            class_label: answer_class.clone(),
            bbox: (!answer_class.is_background()).then_some(answer_box),
        }
    } else {
        ConsensusDecision::Republish {
            state: ConsensusState {
                current_class: answer_class.clone(),
                agreement_needed: true,
                publish_count: state.publish_count + 1,
            },
            bbox: answer_box,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceOutcome {
    /// Finalized on the `after_votes`-th worker vote.
    Finalized {
        class_label: ClassLabel,
        after_votes: usize,
    },
    /// Still disputed; the subtask would be republished under `current`.
    Open {
        current: ClassLabel,
        publish_count: u32,
    },
}

/// Runs `consensus_step` over every worker-vote sequence of length `1..=max_len`
/// drawn from `choices`, starting from `predicted`. A sequence stops at the
/// first finalization, so longer sequences sharing a finalized prefix report
/// the same outcome.
pub fn enumerate_consensus(
    predicted: &ClassLabel,
    choices: &[ClassLabel],
    max_len: usize,
) -> Vec<(Vec<ClassLabel>, SequenceOutcome)> {
    assert!(max_len <= 6, "enumeration is limited to sequences of length 6");
    let dummy = BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box");
    let mut table = Vec::new();
    let mut seq: Vec<usize> = Vec::new();
    for len in 1..=max_len {
        seq.clear();
        seq.resize(len, 0);
        loop {
            let votes: Vec<ClassLabel> = seq.iter().map(|&i| choices[i].clone()).collect();
            let mut state = ConsensusState::from_prediction(predicted.clone());
            let mut outcome = None;
            for (n, v) in votes.iter().enumerate() {
                match consensus_step(&state, v, dummy) {
                    ConsensusDecision::Finalize { class_label, .. } => {
                        outcome = Some(SequenceOutcome::Finalized {
                            class_label,
                            after_votes: n + 1,
                        });
                        break;
                    }
                    ConsensusDecision::Republish { state: next, .. } => state = next,
                }
            }
            let outcome = outcome.unwrap_or(SequenceOutcome::Open {
                current: state.current_class.clone(),
                publish_count: state.publish_count,
            });
            table.push((votes, outcome));
            // odometer increment
            let mut k = len;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                seq[k] += 1;
                if seq[k] < choices.len() {
                    break;
                }
                seq[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX || choices.is_empty() {
                break;
            }
        }
    }
    table
}

/// Direct statement of the rule: with the prediction prepended, the outcome
/// is the first pair of equal adjacent votes, if any.
pub fn reference_outcome(predicted: &ClassLabel, votes: &[ClassLabel]) -> SequenceOutcome {
    let mut chain = Vec::with_capacity(votes.len() + 1);
    chain.push(predicted);
    chain.extend(votes.iter());
    for i in 1..chain.len() {
        if chain[i] == chain[i - 1] {
            return SequenceOutcome::Finalized {
                class_label: chain[i].clone(),
                after_votes: i,
            };
        }
    }
    SequenceOutcome::Open {
        current: (*chain.last().expect("non-empty")).clone(),
        publish_count: chain.len() as u32,
    }
}
