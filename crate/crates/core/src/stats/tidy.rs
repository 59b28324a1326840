use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::dialogue::Conversation;
use crate::probe::DistressLevel;
use crate::ssbc::{ConsensusRecord, LabelSet, SsbcLabel, TurnKey};
use crate::store::write_atomic;

/// One analysis row per completed turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TidyTurnRecord {
    pub conv_id: String,
    pub turn_index: usize,
    pub community: String,
    pub distress_level: DistressLevel,
    pub labels: LabelSet,
}

impl TidyTurnRecord {
    pub fn has(&self, tag: SsbcLabel) -> bool {
        self.labels.contains(tag)
    }
}

/// Grouping variable of a contingency analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Distress,
    Community,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Distress => "distress",
            Condition::Community => "community",
        }
    }

    pub fn level(self, r: &TidyTurnRecord) -> String {
        match self {
            Condition::Distress => r.distress_level.as_str().to_string(),
            Condition::Community => r.community.clone(),
        }
    }

    /// Distinct levels in display order (severity order for distress).
    pub fn levels(self, records: &[TidyTurnRecord]) -> Vec<String> {
        match self {
            Condition::Distress => {
                let mut v: Vec<DistressLevel> = records.iter().map(|r| r.distress_level).collect();
                v.sort();
                v.dedup();
                v.into_iter().map(|l| l.as_str().to_string()).collect()
            }
            Condition::Community => {
                let mut v: Vec<String> = records.iter().map(|r| r.community.clone()).collect();
                v.sort();
                v.dedup();
                v
            }
        }
    }
}

/// Join complete conversations with consensus labels and distress estimates.
pub fn build_tidy(
    conversations: &[Conversation],
    consensus: &[ConsensusRecord],
    distress: &BTreeMap<TurnKey, DistressLevel>,
    community_of: &BTreeMap<String, String>,
) -> Result<Vec<TidyTurnRecord>, StatsError> {
    let labels: BTreeMap<TurnKey, &LabelSet> = consensus.iter().map(|c| (c.key(), &c.labels)).collect();
    let mut rows = Vec::new();
    for conv in conversations.iter().filter(|c| c.is_complete()) {
        let community = community_of
            .get(&conv.post_id)
            .ok_or_else(|| StatsError::MissingInput(format!("community for post `{}`", conv.post_id)))?;
        for turn in &conv.turns {
            let key = TurnKey::new(conv.conv_id.clone(), turn.index);
            let set = labels
                .get(&key)
                .ok_or_else(|| StatsError::MissingInput(format!("consensus for {key:?}")))?;
            let level = distress
                .get(&key)
                .ok_or_else(|| StatsError::MissingInput(format!("distress estimate for {key:?}")))?;
            rows.push(TidyTurnRecord {
                conv_id: conv.conv_id.clone(),
                turn_index: turn.index,
                community: community.clone(),
                distress_level: *level,
                labels: (*set).clone(),
            });
        }
    }
    rows.sort_by(|a, b| (&a.conv_id, a.turn_index).cmp(&(&b.conv_id, b.turn_index)));
    Ok(rows)
}

/// Delimited export: ids, community, numeric distress, then one 0/1 column
/// per tag in codebook order.
pub fn tidy_to_csv(records: &[TidyTurnRecord]) -> Result<Vec<u8>, StatsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["conv_id", "turn_index", "community", "distress_level"];
    header.extend(SsbcLabel::ALL.iter().map(|l| l.name()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.conv_id.clone(),
            r.turn_index.to_string(),
            r.community.clone(),
            r.distress_level.index().to_string(),
        ];
        row.extend(SsbcLabel::ALL.iter().map(|&l| u8::from(r.has(l)).to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| StatsError::Csv(e.to_string()))
}

pub fn write_tidy_csv(path: &Path, records: &[TidyTurnRecord]) -> Result<(), StatsError> {
    Ok(write_atomic(path, &tidy_to_csv(records)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_indicator_per_tag() {
        let rec = TidyTurnRecord {
            conv_id: "c,1".into(),
            turn_index: 2,
            community: "r/Daddit".into(),
            distress_level: DistressLevel::Mild,
            labels: LabelSet::from_labels([SsbcLabel::Advice, SsbcLabel::Teaching]).unwrap(),
        };
        let text = String::from_utf8(tidy_to_csv(&[rec]).unwrap()).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), 4 + 12);
        let row = lines.next().unwrap();
        assert!(row.starts_with("\"c,1\",2,r/Daddit,1,"));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let fields = rdr.records().next().unwrap().unwrap();
        let ones: Vec<&str> = header[4..]
            .iter()
            .zip(fields.iter().skip(4))
            .filter(|(_, v)| *v == "1")
            .map(|(h, _)| *h)
            .collect();
        assert_eq!(ones, vec!["advice", "teaching"]);
    }
}
