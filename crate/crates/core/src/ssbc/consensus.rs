use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AnnotationRun, LabelSet, SsbcLabel, TurnKey, MAX_LABELS};

pub const CONSENSUS_RUNS: usize = 3;
pub const QUORUM: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub conv_id: String,
    pub turn: usize,
    pub labels: LabelSet,
    pub votes: BTreeMap<SsbcLabel, u32>,
}

impl ConsensusRecord {
    pub fn key(&self) -> TurnKey {
        TurnKey::new(self.conv_id.clone(), self.turn)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("consensus needs exactly {CONSENSUS_RUNS} runs, got {0}")]
    RunCount(usize),
    #[error("annotation runs cover different turns (run {run} differs at {key:?})")]
    Coverage { run: usize, key: Option<TurnKey> },
}

/// Labels voted by at least two of three runs. When more than three labels
/// reach quorum, the three with the most votes are kept, ties going to the
/// label listed first in the codebook table.
pub fn consensus_labels(sets: [&LabelSet; 3]) -> (LabelSet, BTreeMap<SsbcLabel, u32>) {
    let mut votes: BTreeMap<SsbcLabel, u32> = BTreeMap::new();
    for set in sets {
        for label in set.iter() {
            *votes.entry(label).or_default() += 1;
        }
    }
    let mut quorum: Vec<(SsbcLabel, u32)> = votes
        .iter()
        .filter(|(_, &n)| n >= QUORUM)
        .map(|(&l, &n)| (l, n))
        .collect();
    quorum.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    quorum.truncate(MAX_LABELS);
    let labels = LabelSet::from_labels(quorum.into_iter().map(|(l, _)| l)).expect("at most three");
    (labels, votes)
}

pub fn consensus(runs: &[AnnotationRun]) -> Result<Vec<ConsensusRecord>, ConsensusError> {
    if runs.len() != CONSENSUS_RUNS {
        return Err(ConsensusError::RunCount(runs.len()));
    }
    for (i, run) in runs.iter().enumerate().skip(1) {
        if run.records.len() != runs[0].records.len()
            || run.records.keys().ne(runs[0].records.keys())
        {
            let key = run
                .records
                .keys()
                .zip(runs[0].records.keys())
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone());
            return Err(ConsensusError::Coverage { run: i, key });
        }
    }
    Ok(runs[0]
        .records
        .keys()
        .map(|key| {
            let sets = [
                &runs[0].records[key].labels,
                &runs[1].records[key].labels,
                &runs[2].records[key].labels,
            ];
            let (labels, votes) = consensus_labels(sets);
            ConsensusRecord {
                conv_id: key.conv_id.clone(),
                turn: key.turn,
                labels,
                votes,
            }
        })
        .collect())
}
