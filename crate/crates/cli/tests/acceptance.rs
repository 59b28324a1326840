//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//!
//! The process exits 0 unless `ACCEPTANCE_STRICT=1` is set, in which case any
//! FAIL makes it exit 1.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde_json::{json, Value};
use ssbc_audit_core::corpus::Post;
use ssbc_audit_core::gateway::{Gateway, GatewayConfig, HttpReply, Transport, TransportFailure};
use ssbc_audit_core::mock::MockServer;
use ssbc_audit_core::pipeline::{EndpointConfig, Pipeline, PipelineConfig};
use ssbc_audit_core::probe::{
    classification_metrics, ensemble_predict, grouped_folds, train_probe, DistressLevel, EnsembleProbe,
    ProbeHyperparams, SoftmaxProblem,
};
use ssbc_audit_core::report::RunSummary;
use ssbc_audit_core::shard::{
    extract_shards, normalize_whitespace, validate_shards, ArtifactPatterns, RejectReason, ShardOutcome,
    MIN_SHARD_WORDS,
};
use ssbc_audit_core::ssbc::{
    agreement_metrics, cohen_kappa, consensus_labels, masi_distance, AnnotationRun, LabelSet, SsbcLabel, TurnKey,
};
use ssbc_audit_core::stats::{
    bh_fdr, chi_square, clustered_se, cramers_v, delta_pp, fit_logistic, fit_random_intercept_logit, sigmoid,
    RandomInterceptOptions,
};
use ssbc_audit_core::store::{ArtifactKind, RunStore};
use statrs::distribution::{ChiSquared, ContinuousCDF};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String, ok: bool) -> Outcome {
    let elapsed = started.elapsed();
    let detail = format!("{detail}; runtime {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    verdict(ok && elapsed <= limit, detail)
}

// ---- statistics oracles ----

fn oracle_chi2(t: &[Vec<f64>]) -> (f64, f64, f64) {
    // n * (sum O^2 / (R_i C_j) - 1)
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let n: f64 = rows.iter().sum();
    let mut s = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, o) in r.iter().enumerate() {
            s += o * o / (rows[i] * cols[j]);
        }
    }
    let df = ((t.len() - 1) * (t[0].len() - 1)) as f64;
    (n * (s - 1.0), df, n)
}

fn oracle_bh(p: &[f64], q: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p.len() as f64;
    let rank = |v: f64| p.iter().filter(|&&x| x <= v).count() as f64;
    let adjusted = p
        .iter()
        .map(|&pi| {
            p.iter()
                .filter(|&&pj| pj >= pi)
                .map(|&pj| (m * pj / rank(pj)).min(1.0))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let cutoff = p
        .iter()
        .filter(|&&pj| pj <= rank(pj) * q / m)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let reject = p.iter().map(|&pi| pi <= cutoff).collect();
    (adjusted, reject)
}

fn stats_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut d_chi, mut d_p, mut d_v, mut d_bh, mut d_pp) = (0f64, 0f64, 0f64, 0f64, 0f64);
    let mut reject_mismatch = 0;
    let mut tables = 0;
    while tables < 50 {
        let (r, c) = (rng.random_range(2..=4), rng.random_range(2..=5));
        let t: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| f64::from(rng.random_range(0..30u32))).collect())
            .collect();
        let Ok(got) = chi_square(&t) else {
            continue;
        };
        tables += 1;
        let (chi2, df, n) = oracle_chi2(&t);
        d_chi = d_chi.max((got.chi2 - chi2).abs());
        d_p = d_p.max((got.p - ChiSquared::new(df).unwrap().sf(chi2)).abs());
        let v = cramers_v(got.chi2, n, r, c).unwrap();
        let v_oracle = (chi2 / (n * (r.min(c) - 1) as f64)).sqrt();
        d_v = d_v.max((v - v_oracle).abs());
    }
    for _ in 0..50 {
        let m = rng.random_range(1..=30);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random();
                if rng.random_bool(0.3) {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            })
            .collect();
        let got = bh_fdr(&p, 0.05).unwrap();
        let (adj, rej) = oracle_bh(&p, 0.05);
        for (a, b) in got.adjusted.iter().zip(&adj) {
            d_bh = d_bh.max((a - b).abs());
        }
        reject_mismatch += got.reject.iter().zip(&rej).filter(|(a, b)| a != b).count();
    }
    for _ in 0..50 {
        let k = rng.random_range(2..=8);
        let rates: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let mut brute = 0f64;
        for a in &rates {
            for b in &rates {
                brute = brute.max((a - b) * 100.0);
            }
        }
        d_pp = d_pp.max((delta_pp(&rates).unwrap() - brute).abs());
    }
    let ok = d_chi <= 1e-9 && d_v <= 1e-9 && d_bh <= 1e-9 && d_pp <= 1e-9 && d_p <= 1e-6 && reject_mismatch == 0;
    within(
        Duration::from_secs(5),
        started,
        format!(
            "max |Δ| chi2 {d_chi:.1e}, tail p {d_p:.1e}, V {d_v:.1e}, BH {d_bh:.1e}, Δpp {d_pp:.1e}; BH reject mismatches {reject_mismatch}"
        ),
        ok,
    )
}

// ---- logistic recovery ----

fn z(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn bernoulli(rng: &mut ChaCha8Rng, eta: f64) -> f64 {
    if rng.random::<f64>() < sigmoid(eta) {
        1.0
    } else {
        0.0
    }
}

fn clustered_data(rng: &mut ChaCha8Rng, g: usize, per: usize, beta: &[f64; 3], sigma_u: f64) -> (DMatrix<f64>, Vec<f64>, Vec<String>) {
    let n = g * per;
    let mut x = DMatrix::zeros(n, 3);
    let mut y = vec![0.0; n];
    let mut clusters = Vec::with_capacity(n);
    let u_dist = Normal::new(0.0, sigma_u.max(1e-12)).unwrap();
    for c in 0..g {
        let u = if sigma_u > 0.0 { u_dist.sample(rng) } else { 0.0 };
        let shift = z(rng);
        for k in 0..per {
            let i = c * per + k;
            let x1 = 0.5 * shift + z(rng);
            let x2 = if rng.random_bool(0.4) { 1.0 } else { 0.0 };
            x[(i, 0)] = 1.0;
            x[(i, 1)] = x1;
            x[(i, 2)] = x2;
            y[i] = bernoulli(rng, beta[0] + beta[1] * x1 + beta[2] * x2 + u);
            clusters.push(format!("c{c}"));
        }
    }
    (x, y, clusters)
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn logistic_recovery() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let beta = [-0.5, 0.8, -1.2];
    let (x, y, _) = clustered_data(&mut rng, 5000, 1, &beta, 0.0);
    let fit = fit_logistic(&x, &y).unwrap();
    let coef_err = fit.coefficients.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let (g, per) = (250, 20);
    let (x, y, clusters) = clustered_data(&mut rng, g, per, &beta, 0.8);
    let fit = fit_logistic(&x, &y).unwrap();
    let se = clustered_se(&fit, &x, &y, &clusters).unwrap();
    let mut draws: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut boot_rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let mut bx = DMatrix::zeros(g * per, 3);
        let mut by = vec![0.0; g * per];
        for slot in 0..g {
            let c = boot_rng.random_range(0..g);
            for k in 0..per {
                let (dst, src) = (slot * per + k, c * per + k);
                for j in 0..3 {
                    bx[(dst, j)] = x[(src, j)];
                }
                by[dst] = y[src];
            }
        }
        let b = fit_logistic(&bx, &by).unwrap();
        for (d, c) in draws.iter_mut().zip(b.coefficients.iter()) {
            d.push(*c);
        }
    }
    let se_rel = (0..3)
        .map(|j| (se[j] - sd(&draws[j])).abs() / sd(&draws[j]))
        .fold(0.0, f64::max);

    let beta_ri = [-0.3, 0.7, -0.5];
    let (x, y, clusters) = clustered_data(&mut rng, 500, 8, &beta_ri, 1.0);
    let ri = fit_random_intercept_logit(&x, &y, &clusters, &RandomInterceptOptions::default()).unwrap();
    let fe_err = ri.coefficients.iter().zip(&beta_ri).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sigma_err = (ri.sigma_u - 1.0).abs();

    let ok = coef_err <= 0.1 && se_rel <= 0.15 && ri.fallback.is_none() && sigma_err <= 0.25 && fe_err <= 0.15;
    within(
        Duration::from_secs(120),
        started,
        format!(
            "coef max err {coef_err:.3}; clustered SE vs bootstrap max rel {:.1}%; σ_u {:.3} (err {sigma_err:.3}), fixed-effect max err {fe_err:.3}, converged {}",
            se_rel * 100.0,
            ri.sigma_u,
            ri.fallback.is_none()
        ),
        ok,
    )
}

// ---- probe suite ----

fn gaussian_classes(rng: &mut ChaCha8Rng, per_class: usize, d: usize) -> (Vec<Vec<f32>>, Vec<DistressLevel>) {
    let a = 5.0 / 2f64.sqrt();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for class in 0..3 {
        for _ in 0..per_class {
            let v: Vec<f32> = (0..d)
                .map(|j| {
                    (z(rng) + if j == class { a } else { 0.0 }) as f32
                })
                .collect();
            xs.push(v);
            ys.push(DistressLevel::from_index(class).unwrap());
        }
    }
    (xs, ys)
}

fn probe_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let hyper = ProbeHyperparams::default();
    let d = 64;

    let (train_x, train_y) = gaussian_classes(&mut rng, 200, d);
    let (test_x, test_y) = gaussian_classes(&mut rng, 200, d);
    let rows: Vec<&[f32]> = train_x.iter().map(Vec::as_slice).collect();
    let model = train_probe(0, &rows, &train_y, &hyper).unwrap();
    let pred: Vec<DistressLevel> = test_x.iter().map(|v| model.predict(v).unwrap()).collect();
    let f1 = classification_metrics(&test_y, &pred).macro_f1;

    let members = (1..=3)
        .map(|layer| {
            let (x, y) = gaussian_classes(&mut rng, 60, d);
            let rows: Vec<&[f32]> = x.iter().map(Vec::as_slice).collect();
            train_probe(layer, &rows, &y, &hyper).unwrap()
        })
        .collect();
    let ensemble = EnsembleProbe { members };
    let mut sum_dev = 0f64;
    let mut in_range = true;
    for _ in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let inputs: BTreeMap<u16, Vec<f32>> = (1..=3)
            .map(|l| {
                let v = (0..d).map(|_| (z(&mut rng) * scale) as f32).collect::<Vec<f32>>();
                (l, v)
            })
            .collect();
        let est = ensemble_predict(&ensemble, &inputs).unwrap();
        sum_dev = sum_dev.max((est.probabilities.iter().sum::<f64>() - 1.0).abs());
        in_range &= est.probabilities.iter().all(|p| (0.0..=1.0).contains(p));
    }

    let dim = 6;
    let x: Vec<f64> = (0..10 * dim).map(|_| z(&mut rng)).collect();
    let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let problem = SoftmaxProblem::new(x, y, dim, 0.5);
    let theta: Vec<f64> = (0..problem.n_params()).map(|_| 0.5 * z(&mut rng)).collect();
    let (_, grad) = problem.loss_grad(&theta);
    let h = 1e-5;
    let mut num = 0f64;
    let mut den = 0f64;
    for j in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += h;
        minus[j] -= h;
        let fd = (problem.loss_grad(&plus).0 - problem.loss_grad(&minus).0) / (2.0 * h);
        num = num.max((grad[j] - fd).abs());
        den = den.max(grad[j].abs());
    }
    let grad_rel = num / den;

    let mut leak = 0usize;
    let mut empty = 0usize;
    let mut assignments = 0usize;
    let groups: Vec<String> = (0..60)
        .flat_map(|g| {
            let size = 1 + (g * 7) % 6;
            std::iter::repeat_n(format!("g{g}"), size)
        })
        .collect();
    for k in 2..=10 {
        for seed in 0..25 {
            let folds = grouped_folds(&groups, k, seed).unwrap();
            assignments += 1;
            for i in 0..groups.len() {
                for j in i + 1..groups.len() {
                    if groups[i] == groups[j] && folds[i] != folds[j] {
                        leak += 1;
                    }
                }
            }
            for f in 0..k {
                let test: BTreeSet<&String> = groups.iter().zip(&folds).filter(|(_, &x)| x == f).map(|(g, _)| g).collect();
                let train: BTreeSet<&String> = groups.iter().zip(&folds).filter(|(_, &x)| x != f).map(|(g, _)| g).collect();
                if test.is_empty() {
                    empty += 1;
                }
                leak += test.intersection(&train).count();
            }
        }
    }

    let ok = f1 >= 0.95 && sum_dev <= 1e-9 && in_range && grad_rel <= 1e-4 && leak == 0 && empty == 0;
    within(
        Duration::from_secs(60),
        started,
        format!(
            "held-out macro-F1 {f1:.4}; ensemble max |Σp-1| {sum_dev:.1e} over 1000 inputs; gradient max rel err {grad_rel:.1e}; {assignments} fold assignments, {leak} leaking groups, {empty} empty folds"
        ),
        ok,
    )
}

// ---- consensus ----

fn label_subsets(alphabet: &[SsbcLabel]) -> Vec<LabelSet> {
    (0u32..1 << alphabet.len())
        .filter_map(|mask| {
            LabelSet::from_labels(alphabet.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &l)| l)).ok()
        })
        .collect()
}

fn consensus_suite() -> Outcome {
    let started = Instant::now();
    let alphabet = [SsbcLabel::Sympathy, SsbcLabel::Empathy, SsbcLabel::Advice, SsbcLabel::Teaching];
    let subsets = label_subsets(&alphabet);
    let (mut a_bad, mut b_bad, mut c_bad, mut d_bad) = (0, 0, 0, 0);
    let mut first_d: Option<String> = None;
    let mut triples = 0;
    let mut extensions = 0;
    for s0 in &subsets {
        for s1 in &subsets {
            for s2 in &subsets {
                triples += 1;
                let sets = [s0, s1, s2];
                let (out, _) = consensus_labels(sets);
                for l in alphabet {
                    let votes = sets.iter().filter(|s| s.contains(l)).count();
                    if votes == 3 && !out.contains(l) {
                        a_bad += 1;
                    }
                    if votes <= 1 && out.contains(l) {
                        b_bad += 1;
                    }
                }
                if out.len() > 3 {
                    c_bad += 1;
                }
                for run in 0..3 {
                    for l in alphabet {
                        let mut grown = sets[run].clone();
                        if grown.contains(l) || grown.insert(l).is_err() {
                            continue;
                        }
                        extensions += 1;
                        let mut next = sets;
                        next[run] = &grown;
                        let (after, _) = consensus_labels(next);
                        if !out.is_subset(&after) {
                            d_bad += 1;
                            first_d.get_or_insert_with(|| {
                                format!(
                                    "{:?} + {} in run {run} turns {:?} into {:?}",
                                    sets.map(|s| s.iter().map(SsbcLabel::name).collect::<Vec<_>>()),
                                    l.name(),
                                    out.iter().map(SsbcLabel::name).collect::<Vec<_>>(),
                                    after.iter().map(SsbcLabel::name).collect::<Vec<_>>()
                                )
                            });
                        }
                    }
                }
            }
        }
    }
    let mut detail = format!(
        "{triples} triples over {} admissible subsets (at most 3 labels each), {extensions} one-label extensions; violations (a) {a_bad}, (b) {b_bad}, (c) {c_bad}, (d) {d_bad}",
        subsets.len()
    );
    if let Some(ex) = first_d {
        detail.push_str(&format!("; monotonicity counterexample: {ex}"));
    }
    within(Duration::from_secs(1), started, detail, a_bad + b_bad + c_bad + d_bad == 0)
}

// ---- shard validation ----

const SENTENCES: &[&str] = &[
    "My landlord raised the rent by three hundred dollars this month.",
    "I have been sleeping badly since the new job started in March.",
    "My sister stopped answering my calls after the argument at dinner.",
    "I tried talking to my manager but she brushed it off quickly.",
    "The doctor said the test results would take another two weeks.",
    "I feel guilty every time I say no to extra shifts at work.",
    "We moved across the country and the kids are struggling at school.",
    "I keep replaying the conversation in my head late at night.",
    "My partner thinks I am overreacting about the wedding budget.",
    "I started running in the mornings to clear my head before work.",
    "Our dog got sick last week and the vet bills are piling up.",
    "I failed my driving test for the second time on Tuesday.",
    "I do not know how to tell my parents that I dropped out.",
    "The team lead keeps assigning me the tasks nobody else wants.",
    "I finally booked an appointment with a therapist for next Monday.",
    "My best friend is moving away and I already feel lonely.",
];
const SEPARATORS: &[&str] = &[" ", "  ", "\n", "\n\n", " \t "];

#[derive(Clone, Copy, PartialEq, Debug)]
enum Kind {
    Verbatim,
    Paraphrase,
    Short,
    Artifact,
    Repeat,
}

fn paraphrase(text: &str) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    let i = words.len() / 2;
    words[i] = if words[i] == "really" { "truly" } else { "really" };
    words.join(" ")
}

fn shard_fixture(rng: &mut ChaCha8Rng, id: usize) -> (Post, Vec<(String, Kind)>) {
    let mut picked: Vec<&str> = SENTENCES.to_vec();
    picked.shuffle(rng);
    let n = rng.random_range(4..=6);
    let mut parts: Vec<String> = picked[..n].iter().map(|s| s.to_string()).collect();
    let artifact = id.is_multiple_of(3);
    if artifact {
        parts.insert(2, "Has anyone else been through something like this?".to_string());
    }
    let mut body = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            body.push_str(SEPARATORS[rng.random_range(0..SEPARATORS.len())]);
        }
        body.push_str(p);
    }
    if id % 4 == 1 {
        body.push_str("\n\nEdit: thank you all for the kind replies.");
    }
    let mut candidates: Vec<(String, Kind)> = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        if parts[i].starts_with("Has anyone") {
            candidates.push((parts[i].clone(), Kind::Artifact));
            i += 1;
            continue;
        }
        let take = if i + 1 < parts.len() && !parts[i + 1].starts_with("Has anyone") && rng.random_bool(0.4) { 2 } else { 1 };
        let seg = parts[i..i + take].join(if rng.random_bool(0.5) { " " } else { "\n" });
        if rng.random_bool(0.25) {
            candidates.push((paraphrase(&seg), Kind::Paraphrase));
        }
        candidates.push((seg, Kind::Verbatim));
        i += take;
    }
    let first_words: Vec<&str> = parts[0].split_whitespace().take(2).collect();
    candidates.insert(1, (first_words.join(" "), Kind::Short));
    candidates.push((parts[0].clone(), Kind::Repeat));
    candidates.push((paraphrase(&parts[parts.len() - 1]), Kind::Paraphrase));
    let post = Post {
        post_id: format!("s{id:02}"),
        community: "r/fixture".into(),
        title: String::new(),
        body,
        human_distress: None,
    };
    (post, candidates)
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn find_tokens(hay: &[&str], needle: &[&str], from: usize) -> Option<usize> {
    (from..=hay.len().saturating_sub(needle.len())).find(|&i| hay[i..i + needle.len()] == *needle)
}

struct Scripted {
    replies: Mutex<VecDeque<String>>,
}

impl Transport for Scripted {
    fn post_json(&self, _: &str, _: Option<&str>, _: &str, _: Duration) -> Result<HttpReply, TransportFailure> {
        let content = self.replies.lock().unwrap().pop_front().expect("scripted reply available");
        let body = json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]});
        Ok(HttpReply {
            status: 200,
            body: body.to_string(),
        })
    }
}

fn shard_validation() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let patterns = ArtifactPatterns::default();
    let mut accepted = 0;
    let mut problems: Vec<String> = Vec::new();
    let mut by_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut fixtures = Vec::new();
    for id in 0..20 {
        let (post, candidates) = shard_fixture(&mut rng, id);
        let body_norm = normalize_whitespace(&post.body);
        let body_tokens = tokens(&body_norm);
        let texts: Vec<String> = candidates.iter().map(|(t, _)| t.clone()).collect();
        let report = validate_shards(&post, &texts, &patterns);

        let mut cursor = 0;
        for shard in &report.accepted {
            accepted += 1;
            let st = tokens(&shard.text);
            match find_tokens(&body_tokens, &st, cursor) {
                Some(at) => cursor = at + st.len(),
                None => problems.push(format!("{}: `{}` not found in order", post.post_id, shard.text)),
            }
            if st.len() < MIN_SHARD_WORDS {
                problems.push(format!("{}: `{}` too short", post.post_id, shard.text));
            }
            if body_norm.get(shard.match_start..shard.match_end) != Some(shard.text.as_str()) {
                problems.push(format!("{}: offsets do not point at `{}`", post.post_id, shard.text));
            }
        }
        let accepted_texts: Vec<&str> = report.accepted.iter().map(|s| s.text.as_str()).collect();
        let mut expected_accepted: Vec<String> = Vec::new();
        for (text, kind) in &candidates {
            let norm = normalize_whitespace(text);
            let is_accepted = accepted_texts.contains(&norm.as_str());
            let should = *kind == Kind::Verbatim;
            if *kind == Kind::Paraphrase && body_norm.contains(&norm) {
                problems.push(format!("{}: generated paraphrase `{norm}` is verbatim", post.post_id));
            }
            let entry = by_kind.entry(format!("{kind:?}").to_lowercase()).or_default();
            entry.0 += 1;
            if should {
                expected_accepted.push(norm.clone());
            }
            if is_accepted != should && !(*kind == Kind::Repeat && is_accepted) {
                problems.push(format!("{}: {kind:?} candidate `{norm}` accepted={is_accepted}", post.post_id));
            } else if !should {
                entry.1 += 1;
            }
        }
        if accepted_texts != expected_accepted.iter().map(String::as_str).collect::<Vec<_>>() {
            problems.push(format!("{}: accepted set differs from the verbatim candidates", post.post_id));
        }
        for r in &report.rejected {
            let kind = candidates.iter().rev().find(|(t, _)| *t == r.candidate).map(|(_, k)| *k);
            let expected = match kind {
                Some(Kind::Paraphrase) => RejectReason::NotSubstring,
                Some(Kind::Short) => RejectReason::TooShort,
                Some(Kind::Artifact) => RejectReason::ArtifactSuspect,
                Some(Kind::Repeat) => RejectReason::OutOfOrder,
                _ => {
                    problems.push(format!("{}: unexpected rejection of `{}`", post.post_id, r.candidate));
                    continue;
                }
            };
            if r.reason != expected {
                problems.push(format!("{}: `{}` rejected as {:?}, expected {expected:?}", post.post_id, r.candidate, r.reason));
            }
        }
        fixtures.push((post, candidates));
    }

    let verbatim = |c: &[(String, Kind)]| -> Vec<String> {
        c.iter().filter(|(_, k)| *k == Kind::Verbatim).map(|(t, _)| t.clone()).collect()
    };
    let with_paraphrase = |c: &[(String, Kind)]| -> Vec<String> { c.iter().map(|(t, _)| t.clone()).collect() };
    let teacher = EndpointConfig {
        model: "scripted".into(),
        ..EndpointConfig::default()
    };
    let (post_a, cand_a) = &fixtures[0];
    let (post_b, cand_b) = &fixtures[1];
    let script = [
        serde_json::to_string(&with_paraphrase(cand_a)).unwrap(),
        serde_json::to_string(&verbatim(cand_a)).unwrap(),
        serde_json::to_string(&with_paraphrase(cand_b)).unwrap(),
        serde_json::to_string(&with_paraphrase(cand_b)).unwrap(),
        serde_json::to_string(&with_paraphrase(cand_b)).unwrap(),
    ];
    let transport = Arc::new(Scripted {
        replies: Mutex::new(script.into_iter().collect()),
    });
    let gateway = Gateway::new(transport, None, GatewayConfig::default());
    let a = extract_shards(post_a, &gateway, &teacher, &patterns, 3).unwrap();
    let b = extract_shards(post_b, &gateway, &teacher, &patterns, 3).unwrap();
    let retry_ok = matches!(a, ShardOutcome::Accepted { attempts: 2, .. }) && matches!(b, ShardOutcome::Excluded { attempts: 3, .. });
    if !retry_ok {
        problems.push(format!("retry path: {a:?} / {b:?}"));
    }

    let kinds = by_kind
        .iter()
        .filter(|(k, _)| k.as_str() != "verbatim")
        .map(|(k, (n, rej))| format!("{k} {rej}/{n} rejected"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut detail = format!("20 posts, {accepted} accepted shards verified; {kinds}; scripted retry then exclusion {}", if retry_ok { "ok" } else { "wrong" });
    if let Some(p) = problems.first() {
        detail.push_str(&format!("; {} problems, first: {p}", problems.len()));
    }
    within(Duration::from_secs(10), started, detail, problems.is_empty())
}

// ---- golden end-to-end ----

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run_cli(host: &str, runs_dir: &Path, extra: &[&str]) -> Result<Vec<Value>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssbc-audit"))
        .arg("all")
        .arg("--config")
        .arg(fixtures_dir().join("e2e.toml"))
        .args(["--log", "warn"])
        .args(extra)
        .env("SSBC_MOCK_HOST", host)
        .env("SSBC_RUNS_DIR", runs_dir)
        .env_remove("RUST_LOG")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("exit {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn reports(runs_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let dir = runs_dir.join("golden").join("reports");
    std::fs::read_dir(&dir)
        .map(|entries| {
            entries
                .filter_map(Result::ok)
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
                .collect()
        })
        .unwrap_or_default()
}

fn golden_e2e() -> Outcome {
    let started = Instant::now();
    let mock = MockServer::start().unwrap();
    let host = format!("http://127.0.0.1:{}", mock.port());
    let tmp = tempfile::tempdir().unwrap();
    let (first_dir, second_dir) = (tmp.path().join("a"), tmp.path().join("b"));
    let check = || -> Result<String, String> {
        let first = run_cli(&host, &first_dir, &[])?;
        let golden = reports(&first_dir);
        if golden.is_empty() || first.len() != 9 {
            return Err(format!("first run produced {} stages and {} report files", first.len(), golden.len()));
        }
        let fresh_calls: u64 = first.iter().map(|s| s["network_calls"].as_u64().unwrap_or(0)).sum();

        let again = run_cli(&host, &first_dir, &[])?;
        let skipped = again.iter().filter(|s| s["status"] == "skipped").count();
        if reports(&first_dir) != golden {
            return Err("second `all` changed the reports".into());
        }

        let before = mock.requests();
        let replay = run_cli(&host, &first_dir, &["--force", "--offline"])?;
        let replay_calls: u64 = replay.iter().map(|s| s["network_calls"].as_u64().unwrap_or(0)).sum();
        let served = mock.requests() - before;
        if reports(&first_dir) != golden {
            return Err("forced cached replay changed the reports".into());
        }
        if replay_calls != 0 || served != 0 {
            return Err(format!("cached replay made {replay_calls} calls ({served} reached the server)"));
        }

        run_cli(&host, &second_dir, &[])?;
        if reports(&second_dir) != golden {
            return Err("an independent fresh run produced different reports".into());
        }
        Ok(format!(
            "{} report files byte-identical across 4 invocations; fresh run {fresh_calls} calls, rerun skipped {skipped}/9 stages, forced cached replay 0 calls",
            golden.len()
        ))
    };
    match check() {
        Ok(detail) => within(Duration::from_secs(30), started, detail, true),
        Err(e) => Fail(e),
    }
}

// ---- agreement metrics ----

fn set(labels: &[SsbcLabel]) -> LabelSet {
    LabelSet::from_labels(labels.iter().copied()).unwrap()
}

fn run(temperature: f64, sets: &[LabelSet]) -> AnnotationRun {
    AnnotationRun::from_labels(
        temperature,
        sets.iter().enumerate().map(|(i, s)| (TurnKey::new("c", i), s.clone())),
    )
}

fn agreement_suite() -> Outcome {
    use SsbcLabel::*;
    let started = Instant::now();
    let mut problems: Vec<String> = Vec::new();
    let pool = SsbcLabel::ALL;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let sets: Vec<LabelSet> = (0..40)
        .map(|_| {
            let n = rng.random_range(0..=3);
            LabelSet::from_labels((0..n).map(|_| pool[rng.random_range(0..pool.len())])).unwrap()
        })
        .collect();
    let same = agreement_metrics(&[run(0.0, &sets), run(0.3, &sets), run(0.7, &sets)]).unwrap();
    let ones = same.pairwise_f1.values().chain(same.pairwise_jaccard.values()).all(|&v| v == 1.0)
        && same.exact_threeway_match_rate == 1.0;
    if !ones {
        problems.push(format!("identical runs: {same:?}"));
    }

    let (a, b, c, d, e) = (Advice, Teaching, Empathy, Presence, Referral);
    let r0 = [set(&[a, b]), set(&[c]), set(&[]), set(&[a, d]), set(&[e])];
    let r1 = [set(&[a]), set(&[c, d]), set(&[b]), set(&[a, d]), set(&[e])];
    let r2 = [set(&[a, b, c]), set(&[c]), set(&[]), set(&[d]), set(&[e])];
    let m = agreement_metrics(&[run(0.0, &r0), run(0.3, &r1), run(0.7, &r2)]).unwrap();
    let hand: [(&str, f64, f64); 3] = [("0.0-0.3", 10.0 / 13.0, 5.0 / 8.0), ("0.0-0.7", 10.0 / 12.0, 5.0 / 7.0), ("0.3-0.7", 8.0 / 13.0, 4.0 / 9.0)];
    let mut f1_err = 0f64;
    for (key, f1, jac) in hand {
        f1_err = f1_err.max((m.pairwise_f1[key] - f1).abs()).max((m.pairwise_jaccard[key] - jac).abs());
    }
    f1_err = f1_err
        .max((m.mean_pairwise_f1 - (10.0 / 13.0 + 10.0 / 12.0 + 8.0 / 13.0) / 3.0).abs())
        .max((m.exact_threeway_match_rate - 0.2).abs());
    if f1_err > 1e-12 {
        problems.push(format!("engineered triple off by {f1_err:.1e}: {m:?}"));
    }

    let alphabet = [Sympathy, Advice, Teaching, Presence];
    let subsets = label_subsets(&alphabet);
    let mut masi_err = 0f64;
    for x in &subsets {
        for y in &subsets {
            let (sx, sy): (BTreeSet<_>, BTreeSet<_>) = (x.iter().collect(), y.iter().collect());
            let inter = sx.intersection(&sy).count() as f64;
            let union = sx.union(&sy).count() as f64;
            let expected = if union == 0.0 {
                1.0
            } else {
                let weight = if sx == sy {
                    1.0
                } else if sx.is_subset(&sy) || sy.is_subset(&sx) {
                    2.0 / 3.0
                } else if inter > 0.0 {
                    1.0 / 3.0
                } else {
                    0.0
                };
                inter / union * weight
            };
            masi_err = masi_err.max((masi_distance(x, y) - expected).abs());
        }
    }
    let mut kappa_err = 0f64;
    let mut kappa_cases = 0;
    for n in 1..=5usize {
        for ma in 0u32..1 << n {
            for mb in 0u32..1 << n {
                let va: Vec<bool> = (0..n).map(|i| ma >> i & 1 == 1).collect();
                let vb: Vec<bool> = (0..n).map(|i| mb >> i & 1 == 1).collect();
                let count = |x: bool, y: bool| va.iter().zip(&vb).filter(|&(&p, &q)| p == x && q == y).count() as f64;
                let (tt, tf, ft, ff) = (count(true, true), count(true, false), count(false, true), count(false, false));
                let nn = n as f64;
                let po = (tt + ff) / nn;
                let pe = ((tt + tf) * (tt + ft) + (ft + ff) * (tf + ff)) / (nn * nn);
                let expected = if pe == 1.0 { None } else { Some((po - pe) / (1.0 - pe)) };
                kappa_cases += 1;
                match (cohen_kappa(&va, &vb).unwrap(), expected) {
                    (Some(k), Some(x)) => kappa_err = kappa_err.max((k - x).abs()),
                    (None, None) => {}
                    (got, want) => problems.push(format!("kappa {va:?} {vb:?}: {got:?} vs {want:?}")),
                }
            }
        }
    }
    if masi_err > 1e-12 || kappa_err > 1e-12 {
        problems.push(format!("MASI err {masi_err:.1e}, kappa err {kappa_err:.1e}"));
    }
    let mut detail = format!(
        "identical runs all 1.0: {ones}; engineered triple max err {f1_err:.1e}; MASI {} pairs max err {masi_err:.1e}; κ {kappa_cases} cases max err {kappa_err:.1e}",
        subsets.len() * subsets.len()
    );
    if let Some(p) = problems.first() {
        detail.push_str(&format!("; first problem: {p}"));
    }
    within(Duration::from_secs(5), started, detail, problems.is_empty())
}

// ---- live direction check ----

fn live_direction() -> Outcome {
    let Ok(path) = std::env::var("SSBC_LIVE_CONFIG") else {
        return Skip("set SSBC_LIVE_CONFIG to a config with a live agent and hidden-state extractor".into());
    };
    let check = || -> Result<Outcome, String> {
        let cfg = PipelineConfig::load(Path::new(&path)).map_err(|e| e.to_string())?;
        let run_id = cfg.run_id.clone();
        let pipeline = Pipeline::new(cfg);
        for stage in ["ingest", "shard", "simulate", "annotate", "consensus", "probe-train", "probe-infer", "analyze"] {
            pipeline.run_stage(stage, false).map_err(|e| e.to_string())?;
        }
        let store: &RunStore = pipeline.store();
        let conversations: Vec<Value> = store
            .load_records(&run_id, ArtifactKind::Conversations, "conversations")
            .map_err(|e| e.to_string())?;
        let summary: Vec<RunSummary> = store.load_records(&run_id, ArtifactKind::Stats, "summary").map_err(|e| e.to_string())?;
        let distress = summary
            .first()
            .and_then(|s| s.distress.as_ref())
            .ok_or("no distress analysis in the run summary")?;
        let teaching = distress
            .results
            .iter()
            .find(|r| r.tag == SsbcLabel::Teaching)
            .ok_or("teaching was not tested")?;
        let rate = |level: &str| teaching.per_level_rates.get(level).copied();
        let (Some(none), Some(high)) = (rate("none"), rate("moderate+")) else {
            return Err("a distress level is missing from the teaching table".into());
        };
        let enough = conversations.len() >= 50;
        Ok(verdict(
            enough && high < none,
            format!(
                "{} conversations; teaching {:.1}% at none vs {:.1}% at moderate+",
                conversations.len(),
                none * 100.0,
                high * 100.0
            ),
        ))
    };
    check().unwrap_or_else(Fail)
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("statistics-oracles", stats_oracles),
        ("logistic-recovery", logistic_recovery),
        ("probe-suite", probe_suite),
        ("consensus-suite", consensus_suite),
        ("shard-validation", shard_validation),
        ("golden-end-to-end", golden_e2e),
        ("agreement-metrics", agreement_suite),
        ("live-direction-check", live_direction),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail}");
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
