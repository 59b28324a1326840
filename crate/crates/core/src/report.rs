//! Report rendering from stored analysis outputs. Every table is emitted as
//! CSV (full-precision numbers) and markdown (rounded for reading); both are
//! pure functions of their inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ssbc::{LabelSet, SsbcLabel};
use crate::stats::{ContingencyAnalysis, RegressionAnalysis};

pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no annotated turns")]
    Empty,
    #[error("annotator configurations differ ({a} vs {b}); cross-model rates would not be comparable")]
    AnnotatorMismatch { a: String, b: String },
    #[error("no single-turn annotation for `{0}`")]
    MissingSingleTurn(String),
    #[error("conversation `{0}` has no annotated turns")]
    UnknownConversation(String),
    #[error("community report needs at least two communities")]
    TooFewCommunities,
    #[error("csv: {0}")]
    Csv(String),
}

/// A table in both output formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub name: &'static str,
    pub csv: String,
    pub markdown: String,
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| ReportError::Csv(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Csv(e.to_string()))
}

fn md_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn p_fmt(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

// ---- prevalence ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRate {
    pub tag: SsbcLabel,
    pub count: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceReport {
    pub n_turns: usize,
    /// Sorted by rate, highest first; ties in codebook order.
    pub rates: Vec<TagRate>,
}

impl PrevalenceReport {
    pub fn rate(&self, tag: SsbcLabel) -> Option<f64> {
        self.rates.iter().find(|r| r.tag == tag).map(|r| r.rate)
    }
}

/// Turn-level tag rates with normal-approximation 95% intervals clipped to [0, 1].
pub fn prevalence_report(labels: &[LabelSet]) -> Result<PrevalenceReport, ReportError> {
    if labels.is_empty() {
        return Err(ReportError::Empty);
    }
    let n = labels.len();
    let mut rates: Vec<TagRate> = SsbcLabel::ALL
        .iter()
        .map(|&tag| {
            let count = labels.iter().filter(|s| s.contains(tag)).count();
            let rate = count as f64 / n as f64;
            let half = Z_95 * (rate * (1.0 - rate) / n as f64).sqrt();
            TagRate {
                tag,
                count,
                rate,
                ci_low: (rate - half).max(0.0),
                ci_high: (rate + half).min(1.0),
            }
        })
        .collect();
    rates.sort_by(|a, b| b.rate.total_cmp(&a.rate).then(a.tag.cmp(&b.tag)));
    Ok(PrevalenceReport { n_turns: n, rates })
}

pub fn render_prevalence(r: &PrevalenceReport) -> Result<Rendered, ReportError> {
    let header = ["tag", "category", "count", "n_turns", "rate", "ci_low", "ci_high"];
    let rows: Vec<Vec<String>> = r
        .rates
        .iter()
        .map(|t| {
            vec![
                t.tag.name().to_string(),
                t.tag.category().short().to_string(),
                t.count.to_string(),
                r.n_turns.to_string(),
                t.rate.to_string(),
                t.ci_low.to_string(),
                t.ci_high.to_string(),
            ]
        })
        .collect();
    let mut md = format!("# Support-tag prevalence\n\nTurns annotated: {}\n\n", r.n_turns);
    let md_rows: Vec<Vec<String>> = r
        .rates
        .iter()
        .map(|t| {
            vec![
                t.tag.display_name().to_string(),
                t.tag.category().short().to_string(),
                pct(t.rate),
                format!("[{}, {}]", pct(t.ci_low), pct(t.ci_high)),
            ]
        })
        .collect();
    md_table(&mut md, &["Tag", "Category", "Rate %", "95% CI %"], &md_rows);
    Ok(Rendered {
        name: "prevalence",
        csv: csv_string(&header, &rows)?,
        markdown: md,
    })
}

// ---- distress association ----

/// Significant rows only, strongest association first.
pub fn render_distress(a: &ContingencyAnalysis, title: &str) -> Result<Rendered, ReportError> {
    let mut sig: Vec<_> = a.results.iter().filter(|r| r.significant).collect();
    sig.sort_by(|x, y| y.chi2.total_cmp(&x.chi2).then(x.tag.cmp(&y.tag)));
    let levels: Vec<String> = sig.first().map(|r| r.table.levels.clone()).unwrap_or_default();
    let mut header: Vec<String> = ["tag", "chi2", "df", "p", "p_fdr", "cramers_v", "delta_pp", "min_expected"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(levels.iter().map(|l| format!("rate_{l}")));
    let rows: Vec<Vec<String>> = sig
        .iter()
        .map(|r| {
            let mut row = vec![
                r.tag.name().to_string(),
                r.chi2.to_string(),
                r.df.to_string(),
                r.p.to_string(),
                r.p_fdr.to_string(),
                r.cramers_v.to_string(),
                r.delta_pp.to_string(),
                r.min_expected.to_string(),
            ];
            row.extend(levels.iter().map(|l| r.per_level_rates.get(l).map_or(String::new(), f64::to_string)));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut md = format!("# {title}\n\nFDR q = {}\n\n", a.q);
    if sig.is_empty() {
        md.push_str("No tag is significant after FDR correction.\n");
    } else {
        let md_rows: Vec<Vec<String>> = sig
            .iter()
            .map(|r| {
                vec![
                    r.tag.display_name().to_string(),
                    format!("{:.1}", r.chi2),
                    p_fmt(r.p_fdr),
                    format!("{:.3}", r.cramers_v),
                    format!("{:.1}", r.delta_pp),
                ]
            })
            .collect();
        md_table(&mut md, &["Tag", "χ²", "p_FDR", "V", "Δpp"], &md_rows);
    }
    if sig.iter().any(|r| r.low_expected_warning) {
        md.push_str("\nSome tables have an expected count below 5.\n");
    }
    if !a.failures.is_empty() {
        md.push_str("\nUntested tags: ");
        md.push_str(&a.failures.iter().map(|f| f.tag.name()).collect::<Vec<_>>().join(", "));
        md.push('\n');
    }
    Ok(Rendered {
        name: "distress",
        csv: csv_string(&header_refs, &rows)?,
        markdown: md,
    })
}

// ---- community spread ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunitySpread {
    pub tag: SsbcLabel,
    pub highest: Vec<String>,
    pub highest_rate: f64,
    pub lowest: Vec<String>,
    pub lowest_rate: f64,
    pub delta_pp: f64,
    /// More than one community shares the highest or lowest rate.
    pub tie: bool,
}

pub fn community_spread(a: &ContingencyAnalysis) -> Result<Vec<CommunitySpread>, ReportError> {
    let mut out = Vec::new();
    for r in a.results.iter().filter(|r| r.significant) {
        if r.per_level_rates.len() < 2 {
            return Err(ReportError::TooFewCommunities);
        }
        let max = r.per_level_rates.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = r.per_level_rates.values().cloned().fold(f64::INFINITY, f64::min);
        let at = |v: f64| -> Vec<String> {
            r.per_level_rates.iter().filter(|(_, &x)| x == v).map(|(k, _)| k.clone()).collect()
        };
        let (highest, lowest) = (at(max), at(min));
        out.push(CommunitySpread {
            tag: r.tag,
            tie: highest.len() > 1 || lowest.len() > 1,
            highest,
            highest_rate: max,
            lowest,
            lowest_rate: min,
            delta_pp: r.delta_pp,
        });
    }
    out.sort_by(|x, y| y.delta_pp.total_cmp(&x.delta_pp).then(x.tag.cmp(&y.tag)));
    Ok(out)
}

pub fn render_community(
    spread: &[CommunitySpread],
    adjusted: Option<&RegressionAnalysis>,
) -> Result<(Rendered, Option<Rendered>), ReportError> {
    let header = ["tag", "highest", "highest_rate", "lowest", "lowest_rate", "delta_pp", "tie"];
    let rows: Vec<Vec<String>> = spread
        .iter()
        .map(|s| {
            vec![
                s.tag.name().to_string(),
                s.highest.join(";"),
                s.highest_rate.to_string(),
                s.lowest.join(";"),
                s.lowest_rate.to_string(),
                s.delta_pp.to_string(),
                s.tie.to_string(),
            ]
        })
        .collect();
    let mut md = String::from("# Community differences in tag prevalence\n\n");
    if spread.is_empty() {
        md.push_str("No tag differs significantly across communities.\n");
    } else {
        let md_rows: Vec<Vec<String>> = spread
            .iter()
            .map(|s| {
                vec![
                    s.tag.display_name().to_string(),
                    format!("{} ({})", s.highest.join(", "), pct(s.highest_rate)),
                    format!("{} ({})", s.lowest.join(", "), pct(s.lowest_rate)),
                    format!("{:.1}", s.delta_pp),
                    if s.tie { "tie".to_string() } else { String::new() },
                ]
            })
            .collect();
        md_table(&mut md, &["Tag", "Highest %", "Lowest %", "Δpp", ""], &md_rows);
    }
    let main = Rendered {
        name: "community",
        csv: csv_string(&header, &rows)?,
        markdown: md,
    };
    let Some(reg) = adjusted else {
        return Ok((main, None));
    };
    let header = ["tag", "method", "term", "coefficient", "std_error", "odds_ratio", "p", "p_fdr", "converged"];
    let mut rows = Vec::new();
    let mut md_rows = Vec::new();
    for r in &reg.results {
        for term in r.terms.iter().filter(|t| t.starts_with("community[")) {
            rows.push(vec![
                r.tag.name().to_string(),
                r.method.as_str().to_string(),
                term.clone(),
                r.coefficients[term].to_string(),
                r.std_errors[term].to_string(),
                r.odds_ratios[term].to_string(),
                r.p_values[term].to_string(),
                r.p_fdr[term].to_string(),
                r.converged.to_string(),
            ]);
            md_rows.push(vec![
                r.tag.display_name().to_string(),
                term.clone(),
                format!("{:.2}", r.odds_ratios[term]),
                p_fmt(r.p_fdr[term]),
            ]);
        }
    }
    let mut md = String::from("# Adjusted odds ratios by community\n\nControls: distress, turn position.\n\n");
    md_table(&mut md, &["Tag", "Term", "OR", "p_FDR"], &md_rows);
    if !reg.failures.is_empty() {
        md.push_str("\nNot estimated:\n\n");
        for f in &reg.failures {
            md.push_str(&format!("- {}: {}\n", f.tag.name(), f.error));
        }
    }
    Ok((
        main,
        Some(Rendered {
            name: "community_odds_ratios",
            csv: csv_string(&header, &rows)?,
            markdown: md,
        }),
    ))
}

// ---- cross-model ----

/// What a finished run contributes to a cross-model comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub agent_model: String,
    pub annotator_hash: String,
    pub prevalence: PrevalenceReport,
    pub distress: Option<ContingencyAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelRow {
    pub tag: SsbcLabel,
    pub rate_a: f64,
    pub rate_b: f64,
    /// `rate_b - rate_a` in percentage points.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelReport {
    pub run_a: String,
    pub run_b: String,
    pub rows: Vec<CrossModelRow>,
}

pub fn cross_model_report(a: &RunSummary, b: &RunSummary) -> Result<CrossModelReport, ReportError> {
    if a.annotator_hash != b.annotator_hash {
        return Err(ReportError::AnnotatorMismatch {
            a: a.annotator_hash.clone(),
            b: b.annotator_hash.clone(),
        });
    }
    let rows = SsbcLabel::ALL
        .iter()
        .map(|&tag| {
            let ra = a.prevalence.rate(tag).unwrap_or(0.0);
            let rb = b.prevalence.rate(tag).unwrap_or(0.0);
            CrossModelRow {
                tag,
                rate_a: ra,
                rate_b: rb,
                delta_pp: (rb - ra) * 100.0,
            }
        })
        .collect();
    Ok(CrossModelReport {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        rows,
    })
}

pub fn render_cross_model(r: &CrossModelReport, a: &RunSummary, b: &RunSummary) -> Result<Rendered, ReportError> {
    let header = ["tag", "rate_a", "rate_b", "delta_pp"];
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|x| vec![x.tag.name().to_string(), x.rate_a.to_string(), x.rate_b.to_string(), x.delta_pp.to_string()])
        .collect();
    let mut md = format!(
        "# Cross-model comparison\n\nA: {} ({})\nB: {} ({})\n\n",
        r.run_a, a.agent_model, r.run_b, b.agent_model
    );
    let md_rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|x| {
            vec![
                x.tag.display_name().to_string(),
                pct(x.rate_a),
                pct(x.rate_b),
                format!("{:+.1}", x.delta_pp),
            ]
        })
        .collect();
    md_table(&mut md, &["Tag", "A %", "B %", "Δpp"], &md_rows);
    md.push_str("\n## Distress association by run\n\n");
    let assoc = |s: &RunSummary| -> BTreeMap<SsbcLabel, (f64, f64, bool)> {
        s.distress
            .as_ref()
            .map(|d| d.results.iter().map(|x| (x.tag, (x.chi2, x.cramers_v, x.significant))).collect())
            .unwrap_or_default()
    };
    let (da, db) = (assoc(a), assoc(b));
    let cell = |m: &BTreeMap<SsbcLabel, (f64, f64, bool)>, t: SsbcLabel| -> String {
        match m.get(&t) {
            Some((c, v, s)) => format!("{c:.1} / {v:.3}{}", if *s { "*" } else { "" }),
            None => "-".to_string(),
        }
    };
    let side: Vec<Vec<String>> = SsbcLabel::ALL
        .iter()
        .map(|&t| vec![t.display_name().to_string(), cell(&da, t), cell(&db, t)])
        .collect();
    md_table(&mut md, &["Tag", "A χ² / V", "B χ² / V"], &side);
    md.push_str("\n`*` significant after FDR correction.\n");
    Ok(Rendered {
        name: "cross_model",
        csv: csv_string(&header, &rows)?,
        markdown: md,
    })
}

// ---- single-turn vs multi-turn vignette ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VignetteComparison {
    pub conv_id: String,
    pub trajectory: Vec<(usize, LabelSet)>,
    pub single_turn: LabelSet,
    /// First turn index of the late segment.
    pub late_from: usize,
    pub late_only: BTreeSet<SsbcLabel>,
    pub single_only: BTreeSet<SsbcLabel>,
}

/// Compare the late half of a trajectory (turns from `floor(n / 2)`) with
/// the single-turn reply to the same post.
pub fn vignette_comparison(
    conv_id: &str,
    trajectory: &[(usize, LabelSet)],
    single_turn: Option<&LabelSet>,
) -> Result<VignetteComparison, ReportError> {
    if trajectory.is_empty() {
        return Err(ReportError::UnknownConversation(conv_id.to_string()));
    }
    let single = single_turn.ok_or_else(|| ReportError::MissingSingleTurn(conv_id.to_string()))?;
    let mut trajectory = trajectory.to_vec();
    trajectory.sort_by_key(|(i, _)| *i);
    let late_from = trajectory.len() / 2;
    let late: BTreeSet<SsbcLabel> = trajectory[late_from..].iter().flat_map(|(_, s)| s.iter()).collect();
    let single_set: BTreeSet<SsbcLabel> = single.iter().collect();
    Ok(VignetteComparison {
        conv_id: conv_id.to_string(),
        late_from: trajectory[late_from].0,
        late_only: late.difference(&single_set).copied().collect(),
        single_only: single_set.difference(&late).copied().collect(),
        single_turn: single.clone(),
        trajectory,
    })
}

fn names(set: impl IntoIterator<Item = SsbcLabel>) -> String {
    set.into_iter().map(|l| l.name()).collect::<Vec<_>>().join(";")
}

pub fn render_vignette(v: &VignetteComparison) -> Result<Rendered, ReportError> {
    let header = ["conv_id", "turn", "labels"];
    let mut rows: Vec<Vec<String>> = v
        .trajectory
        .iter()
        .map(|(i, s)| vec![v.conv_id.clone(), i.to_string(), names(s.iter())])
        .collect();
    rows.push(vec![v.conv_id.clone(), "single".to_string(), names(v.single_turn.iter())]);
    let mut md = format!("# Trajectory vs single-turn: {}\n\n", v.conv_id);
    let md_rows: Vec<Vec<String>> = v
        .trajectory
        .iter()
        .map(|(i, s)| vec![(i + 1).to_string(), s.to_string()])
        .chain(std::iter::once(vec!["single-turn".to_string(), v.single_turn.to_string()]))
        .collect();
    md_table(&mut md, &["Turn", "Labels"], &md_rows);
    let _ = write!(
        md,
        "\nLate turns (from turn {}) only: {}\nSingle-turn only: {}\n",
        v.late_from + 1,
        if v.late_only.is_empty() { "none".to_string() } else { names(v.late_only.iter().copied()) },
        if v.single_only.is_empty() { "none".to_string() } else { names(v.single_only.iter().copied()) },
    );
    Ok(Rendered {
        name: "vignette",
        csv: csv_string(&header, &rows)?,
        markdown: md,
    })
}
