use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AnnotationRun, LabelSet, SsbcLabel, TurnKey};

/// Labels with fewer positives than this for either rater get no kappa.
pub const MIN_KAPPA_POSITIVES: usize = 5;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AgreementError {
    #[error("rater vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no items to compare")]
    Empty,
    #[error("agreement needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("runs cover different turns")]
    Coverage,
    #[error("no turns shared between the label sources")]
    NoOverlap,
}

/// Incidence-pooled F1: `2 Σ|A∩B| / Σ(|A|+|B|)`; 1.0 when both sides are empty
/// everywhere.
pub fn pair_f1<'a>(pairs: impl IntoIterator<Item = (&'a LabelSet, &'a LabelSet)>) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (a, b) in pairs {
        inter += a.intersection_len(b);
        total += a.len() + b.len();
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// `Σ|A∩B| / Σ|A∪B|`; 1.0 when every pair is empty.
pub fn pair_jaccard<'a>(pairs: impl IntoIterator<Item = (&'a LabelSet, &'a LabelSet)>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pairs {
        inter += a.intersection_len(b);
        union += a.union_len(b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Keyed `"<t_a>-<t_b>"` by run temperatures, in run order.
    pub pairwise_f1: BTreeMap<String, f64>,
    pub pairwise_jaccard: BTreeMap<String, f64>,
    /// Fraction of turns where every run produced the same set.
    pub exact_threeway_match_rate: f64,
    pub mean_pairwise_f1: f64,
    pub mean_pairwise_jaccard: f64,
    pub n_turns: usize,
}

fn pair_name(a: &AnnotationRun, b: &AnnotationRun) -> String {
    format!("{:.1}-{:.1}", a.temperature, b.temperature)
}

pub fn agreement_metrics(runs: &[AnnotationRun]) -> Result<StabilityReport, AgreementError> {
    if runs.len() < 2 {
        return Err(AgreementError::TooFewRuns(runs.len()));
    }
    if runs
        .iter()
        .any(|r| r.records.len() != runs[0].records.len() || r.records.keys().ne(runs[0].records.keys()))
    {
        return Err(AgreementError::Coverage);
    }
    let mut pairwise_f1 = BTreeMap::new();
    let mut pairwise_jaccard = BTreeMap::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let pairs = || {
                runs[i]
                    .records
                    .iter()
                    .map(|(k, r)| (&r.labels, &runs[j].records[k].labels))
            };
            let name = pair_name(&runs[i], &runs[j]);
            pairwise_f1.insert(name.clone(), pair_f1(pairs()));
            pairwise_jaccard.insert(name, pair_jaccard(pairs()));
        }
    }
    let n_turns = runs[0].records.len();
    let exact = runs[0]
        .records
        .iter()
        .filter(|(k, r)| runs[1..].iter().all(|o| o.records[*k].labels == r.labels))
        .count();
    let mean = |m: &BTreeMap<String, f64>| m.values().sum::<f64>() / m.len() as f64;
    Ok(StabilityReport {
        mean_pairwise_f1: mean(&pairwise_f1),
        mean_pairwise_jaccard: mean(&pairwise_jaccard),
        pairwise_f1,
        pairwise_jaccard,
        exact_threeway_match_rate: if n_turns == 0 {
            1.0
        } else {
            exact as f64 / n_turns as f64
        },
        n_turns,
    })
}

/// Cohen's kappa for binary presence. `Ok(None)` when chance agreement is 1
/// (both raters constant and identical), where kappa is undefined.
pub fn cohen_kappa(a: &[bool], b: &[bool]) -> Result<Option<f64>, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let pa = a.iter().filter(|&&x| x).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x).count() as f64 / n;
    let po = agree / n;
    let pe = pa * pb + (1.0 - pa) * (1.0 - pb);
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(None);
    }
    Ok(Some((po - pe) / (1.0 - pe)))
}

/// MASI agreement: Jaccard scaled by 1 (equal), 2/3 (strict subset),
/// 1/3 (overlap without containment) or 0 (disjoint). Two empty sets score 1.
pub fn masi_distance(a: &LabelSet, b: &LabelSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection_len(b);
    let jaccard = inter as f64 / a.union_len(b) as f64;
    let monotonicity = if a == b {
        1.0
    } else if a.is_subset(b) || b.is_subset(a) {
        2.0 / 3.0
    } else if inter > 0 {
        1.0 / 3.0
    } else {
        0.0
    };
    jaccard * monotonicity
}

/// Per-turn label set in the shared annotation schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTurn {
    pub conv_id: String,
    pub turn: usize,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelKappa {
    pub label: SsbcLabel,
    pub model_positives: usize,
    pub human_positives: usize,
    /// `None` when excluded for sparse positives or undefined.
    pub kappa: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAgreementReport {
    pub n_items: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub mean_masi: f64,
    pub per_label: Vec<LabelKappa>,
    pub mean_kappa: Option<f64>,
}

/// Compare model consensus against one human rater over their shared turns.
pub fn human_agreement(
    model: &BTreeMap<TurnKey, LabelSet>,
    human: &BTreeMap<TurnKey, LabelSet>,
) -> Result<HumanAgreementReport, AgreementError> {
    let shared: Vec<(&LabelSet, &LabelSet)> = model
        .iter()
        .filter_map(|(k, m)| human.get(k).map(|h| (m, h)))
        .collect();
    if shared.is_empty() {
        return Err(AgreementError::NoOverlap);
    }
    let mut per_label = Vec::new();
    let mut f1s = Vec::new();
    for label in SsbcLabel::ALL {
        let m: Vec<bool> = shared.iter().map(|(m, _)| m.contains(label)).collect();
        let h: Vec<bool> = shared.iter().map(|(_, h)| h.contains(label)).collect();
        let mp = m.iter().filter(|&&x| x).count();
        let hp = h.iter().filter(|&&x| x).count();
        let both = m.iter().zip(&h).filter(|(a, b)| **a && **b).count();
        if mp + hp > 0 {
            f1s.push(2.0 * both as f64 / (mp + hp) as f64);
        }
        let excluded = mp < MIN_KAPPA_POSITIVES || hp < MIN_KAPPA_POSITIVES;
        let kappa = if excluded { None } else { cohen_kappa(&m, &h)? };
        per_label.push(LabelKappa {
            label,
            model_positives: mp,
            human_positives: hp,
            kappa,
            excluded,
        });
    }
    let kappas: Vec<f64> = per_label.iter().filter_map(|l| l.kappa).collect();
    Ok(HumanAgreementReport {
        n_items: shared.len(),
        micro_f1: pair_f1(shared.iter().copied()),
        macro_f1: if f1s.is_empty() {
            1.0
        } else {
            f1s.iter().sum::<f64>() / f1s.len() as f64
        },
        mean_masi: shared.iter().map(|(a, b)| masi_distance(a, b)).sum::<f64>() / shared.len() as f64,
        mean_kappa: if kappas.is_empty() {
            None
        } else {
            Some(kappas.iter().sum::<f64>() / kappas.len() as f64)
        },
        per_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SsbcLabel::*;

    fn s(v: &[SsbcLabel]) -> LabelSet {
        LabelSet::from_labels(v.iter().copied()).unwrap()
    }

    fn run(t: f64, sets: &[LabelSet]) -> AnnotationRun {
        AnnotationRun::from_labels(
            t,
            sets.iter()
                .enumerate()
                .map(|(i, l)| (TurnKey::new("c", i), l.clone())),
        )
    }

    #[test]
    fn identical_runs_agree_fully() {
        let sets = [s(&[Advice]), s(&[]), s(&[Empathy, Teaching])];
        let r = agreement_metrics(&[run(0.0, &sets), run(0.3, &sets), run(0.7, &sets)]).unwrap();
        assert!(r.pairwise_f1.values().all(|&v| v == 1.0));
        assert!(r.pairwise_jaccard.values().all(|&v| v == 1.0));
        assert_eq!(r.exact_threeway_match_rate, 1.0);
        assert_eq!(r.pairwise_f1.len(), 3);
        assert!(r.pairwise_f1.contains_key("0.0-0.3"));
    }

    #[test]
    fn one_turn_formula() {
        let a = s(&[Advice, Validation]);
        let b = s(&[Advice]);
        assert!((pair_f1([(&a, &b)]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((pair_jaccard([(&a, &b)]) - 0.5).abs() < 1e-15);
        assert_eq!(pair_f1([(&a, &b)]), pair_f1([(&b, &a)]));
    }

    #[test]
    fn empty_turns_are_neutral_and_exact() {
        let a = s(&[Advice, Validation]);
        let b = s(&[Advice]);
        let e = s(&[]);
        assert_eq!(pair_f1([(&a, &b), (&e, &e)]), pair_f1([(&a, &b)]));
        let r = agreement_metrics(&[run(0.0, &[a, e.clone()]), run(0.3, &[b, e])]).unwrap();
        assert_eq!(r.exact_threeway_match_rate, 0.5);
    }

    #[test]
    fn kappa_examples() {
        // 40 both-yes, 40 both-no, 10 + 10 disagreements
        let mut a = vec![true; 40];
        let mut b = vec![true; 40];
        a.extend(vec![false; 40]);
        b.extend(vec![false; 40]);
        a.extend(vec![true; 10]);
        b.extend(vec![false; 10]);
        a.extend(vec![false; 10]);
        b.extend(vec![true; 10]);
        assert!((cohen_kappa(&a, &b).unwrap().unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(cohen_kappa(&a, &a).unwrap(), Some(1.0));
        assert_eq!(cohen_kappa(&[true, true], &[true, true]).unwrap(), None);
        // one rater constant: p_e = p_b, kappa = 0 regardless of agreement
        assert_eq!(cohen_kappa(&[true; 4], &[true, false, true, false]).unwrap(), Some(0.0));
        assert!(cohen_kappa(&[true], &[]).is_err());
    }

    #[test]
    fn masi_examples() {
        let ab = s(&[Advice, Teaching]);
        assert_eq!(masi_distance(&ab, &ab), 1.0);
        assert!((masi_distance(&s(&[Advice]), &ab) - 1.0 / 3.0).abs() < 1e-15);
        assert!((masi_distance(&ab, &s(&[Teaching, Validation])) - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(masi_distance(&s(&[Advice]), &s(&[Teaching])), 0.0);
        assert_eq!(masi_distance(&s(&[]), &s(&[])), 1.0);
        assert_eq!(masi_distance(&s(&[]), &ab), 0.0);
    }

    #[test]
    fn human_comparison_excludes_sparse_labels() {
        let mut model = BTreeMap::new();
        let mut human = BTreeMap::new();
        for i in 0..20 {
            let k = TurnKey::new("c", i);
            let m = if i < 10 { s(&[Advice]) } else { s(&[Compliment]) };
            let h = if i < 8 { s(&[Advice]) } else { s(&[]) };
            model.insert(k.clone(), m);
            human.insert(k, h);
        }
        let r = human_agreement(&model, &human).unwrap();
        assert_eq!(r.n_items, 20);
        let advice = r.per_label.iter().find(|l| l.label == Advice).unwrap();
        assert!(!advice.excluded);
        assert!(advice.kappa.unwrap() > 0.7);
        let compliment = r.per_label.iter().find(|l| l.label == Compliment).unwrap();
        assert!(compliment.excluded);
        assert_eq!(compliment.kappa, None);
        assert!(human_agreement(&model, &BTreeMap::new()).is_err());
    }
}
