//! Dynamic memory partitioning with hybrid priorities.
//!
//! Agent types are scored by a static graph term (depth times out-degree)
//! plus a dynamic term accumulated over their waiting requests. The top
//! fraction becomes the critical set, and a periodic two-phase update sizes
//! a reserved block pool for them: phase one adapts the total reserve ratio
//! to recent device usage, phase two splits it per type by averaged memory
//! and priority shares.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent_graph::ValidatedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionParams {
    /// Usage ratio at or above which the reserve pool grows.
    pub gpu_usage_high: f64,
    /// Usage ratio at or below which the reserve pool shrinks.
    pub gpu_usage_low: f64,
    /// Step applied to the total reserve ratio per update.
    pub adjustment_step: f64,
    /// Upper clamp on the total reserve ratio.
    pub reserve_ratio_max: f64,
    /// Fraction of agent types treated as critical.
    pub critical_ratio: f64,
    /// Weight on the static graph score.
    pub w_static: f64,
    /// Engine steps between partition updates.
    pub update_period_steps: u64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            gpu_usage_high: 0.85,
            gpu_usage_low: 0.50,
            adjustment_step: 0.05,
            reserve_ratio_max: 0.40,
            critical_ratio: 0.25,
            w_static: 1.0,
            update_period_steps: 50,
        }
    }
}

/// Combined priority of one agent type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridScore {
    pub agent_type: String,
    pub static_score: f64,
    pub dynamic_score: f64,
}

impl HybridScore {
    pub fn combined(&self) -> f64 {
        self.static_score + self.dynamic_score
    }
}

/// A waiting request as seen by the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct WaitingInfo {
    pub agent_type: String,
    pub arrival_ms: f64,
    pub tokens_requested: f64,
}

/// Urgency of one waiting request, never negative.
///
/// `time_wait * ln(max(tokens / max(time_wait, 1 ms), 1))`: grows with both
/// waiting time and the size of the pending work, and stays zero for
/// requests that just arrived or want almost nothing.
pub fn dynamic_priority(time_wait_ms: f64, tokens_requested: f64) -> f64 {
    let wait = time_wait_ms.max(0.0);
    let rate = tokens_requested / wait.max(1.0);
    wait * rate.max(1.0).ln()
}

/// Scores every agent type in the graph: static term plus the sum of
/// dynamic priorities over the type's waiting requests. Sorted by type name.
pub fn score_agent_types(
    graph: &ValidatedGraph,
    waiting: &[WaitingInfo],
    w_static: f64,
    now_ms: f64,
) -> Vec<HybridScore> {
    let mut table: BTreeMap<String, HybridScore> = graph
        .static_scores(w_static)
        .into_iter()
        .map(|(agent_type, static_score)| {
            (agent_type.clone(), HybridScore { agent_type, static_score, dynamic_score: 0.0 })
        })
        .collect();
    for info in waiting {
        let entry = table.entry(info.agent_type.clone()).or_insert(HybridScore {
            agent_type: info.agent_type.clone(),
            static_score: 0.0,
            dynamic_score: 0.0,
        });
        entry.dynamic_score += dynamic_priority(now_ms - info.arrival_ms, info.tokens_requested);
    }
    table.into_values().collect()
}

/// Picks the critical set: the top `floor(ratio * n)` types (at least one)
/// by combined score, ties broken by type name.
pub fn select_critical(scores: &[HybridScore], critical_ratio: f64) -> BTreeSet<String> {
    if scores.is_empty() {
        return BTreeSet::new();
    }
    let count = ((critical_ratio * scores.len() as f64).floor() as usize)
        .clamp(1, scores.len());
    let mut ranked: Vec<&HybridScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.combined()
            .total_cmp(&a.combined())
            .then_with(|| a.agent_type.cmp(&b.agent_type))
    });
    ranked.into_iter().take(count).map(|s| s.agent_type.clone()).collect()
}

/// The reservation targets produced by one partition update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub total_reserve_ratio: f64,
    /// Critical types in descending combined-score order (grant priority).
    pub critical: Vec<String>,
    pub reserve_num: BTreeMap<String, u64>,
}

impl PartitionPlan {
    pub fn empty() -> Self {
        PartitionPlan { total_reserve_ratio: 0.0, critical: Vec::new(), reserve_num: BTreeMap::new() }
    }
}

/// Two-phase memory reservation update.
///
/// Phase one nudges the total reserve ratio by `adjustment_step` when usage
/// crosses the high or low watermark and clamps it to `[0,
/// reserve_ratio_max]`. Phase two gives each critical type
/// `floor(((usage_share + priority_share) / 2) * R_total)` blocks,
/// renormalizing proportionally when the combined shares exceed one.
pub fn update_memory_reservations(
    prior: &PartitionPlan,
    params: &PartitionParams,
    total_blocks: u64,
    usage_blocks: u64,
    per_type_usage: &BTreeMap<String, u64>,
    scores: &[HybridScore],
    critical: &BTreeSet<String>,
) -> PartitionPlan {
    let usage_ratio =
        if total_blocks == 0 { 0.0 } else { usage_blocks as f64 / total_blocks as f64 };
    let mut ratio = prior.total_reserve_ratio;
    if usage_ratio >= params.gpu_usage_high {
        ratio += params.adjustment_step;
    } else if usage_ratio <= params.gpu_usage_low {
        ratio -= params.adjustment_step;
    }
    ratio = ratio.clamp(0.0, params.reserve_ratio_max);
    let r_total = total_blocks as f64 * ratio;

    let combined: BTreeMap<&str, f64> =
        scores.iter().map(|s| (s.agent_type.as_str(), s.combined())).collect();
    let s_total: f64 = critical.iter().map(|t| combined.get(t.as_str()).copied().unwrap_or(0.0)).sum();

    let mut finals: Vec<(String, f64)> = Vec::with_capacity(critical.len());
    for t in critical {
        let mem_ratio = if total_blocks == 0 {
            0.0
        } else {
            per_type_usage.get(t).copied().unwrap_or(0) as f64 / total_blocks as f64
        };
        let priority_ratio = if s_total > 0.0 {
            combined.get(t.as_str()).copied().unwrap_or(0.0) / s_total
        } else {
            0.0
        };
        finals.push((t.clone(), (mem_ratio + priority_ratio) / 2.0));
    }
    let sum: f64 = finals.iter().map(|(_, f)| f).sum();
    if sum > 1.0 {
        for (_, f) in &mut finals {
            *f /= sum;
        }
    }
    let reserve_num: BTreeMap<String, u64> =
        finals.iter().map(|(t, f)| (t.clone(), (f * r_total).floor() as u64)).collect();

    let mut critical_ranked: Vec<String> = critical.iter().cloned().collect();
    critical_ranked.sort_by(|a, b| {
        let sa = combined.get(a.as_str()).copied().unwrap_or(0.0);
        let sb = combined.get(b.as_str()).copied().unwrap_or(0.0);
        sb.total_cmp(&sa).then_with(|| a.cmp(b))
    });

    PartitionPlan { total_reserve_ratio: ratio, critical: critical_ranked, reserve_num }
}

/// True when an eviction inverted priorities: the victim's type outranked
/// the type that caused the eviction.
pub fn detect_critical_inversion(evicted_combined: f64, cause_combined: f64) -> bool {
    evicted_combined > cause_combined
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent_graph::{AppGraph, GraphNode, NodeKind};

    fn agent(id: &str, agent_type: &str) -> GraphNode {
        GraphNode {
            id: id.to_string(),
            kind: NodeKind::Agent,
            agent_type: agent_type.to_string(),
            stages: Vec::new(),
            predict_time_ms: None,
            tool_class: None,
            latency_dist: None,
            prompt_tokens_dist: None,
            output_tokens_dist: None,
            model_hint: None,
        }
    }

    fn chain_graph() -> ValidatedGraph {
        AppGraph {
            name: "t".into(),
            nodes: vec![agent("a", "alpha"), agent("b", "beta"), agent("c", "gamma")],
            edges: vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        }
        .validated()
        .unwrap()
    }

    #[test]
    fn dynamic_priority_matches_closed_form() {
        // 2 ms wait, 2e^2 tokens: 2 * ln(e^2) = 4.
        let tokens = 2.0 * std::f64::consts::E.powi(2);
        assert!((dynamic_priority(2.0, tokens) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_priority_is_never_negative() {
        assert_eq!(dynamic_priority(0.0, 100.0), 0.0);
        assert_eq!(dynamic_priority(1000.0, 0.5), 0.0, "tiny demand clamps to ln(1)");
        assert_eq!(dynamic_priority(-5.0, 100.0), 0.0);
        use rand::Rng;
        let mut rng = crate::rng::SeedFactory::new(8).stream("dyn_prop", &[]);
        for _ in 0..2000 {
            let v = dynamic_priority(rng.gen_range(0.0..1e6), rng.gen_range(0.0..1e6));
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn sub_millisecond_wait_clamps_denominator() {
        // wait 0.5 ms, 10 tokens: 0.5 * ln(10 / 1.0).
        let got = dynamic_priority(0.5, 10.0);
        assert!((got - 0.5 * 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_queue_scores_are_static_only() {
        let g = chain_graph();
        let scores = score_agent_types(&g, &[], 1.0, 0.0);
        let alpha = scores.iter().find(|s| s.agent_type == "alpha").unwrap();
        assert_eq!(alpha.static_score, 1.0, "depth 1 * out 1");
        assert_eq!(alpha.dynamic_score, 0.0);
        let gamma = scores.iter().find(|s| s.agent_type == "gamma").unwrap();
        assert_eq!(gamma.combined(), 0.0, "sink");
    }

    #[test]
    fn waiting_requests_accumulate_dynamic_score() {
        let g = chain_graph();
        let one = vec![WaitingInfo {
            agent_type: "beta".into(),
            arrival_ms: 0.0,
            tokens_requested: 5000.0,
        }];
        let two = vec![one[0].clone(), one[0].clone()];
        let s1 = score_agent_types(&g, &one, 1.0, 400.0);
        let s2 = score_agent_types(&g, &two, 1.0, 400.0);
        let d1 = s1.iter().find(|s| s.agent_type == "beta").unwrap().dynamic_score;
        let d2 = s2.iter().find(|s| s.agent_type == "beta").unwrap().dynamic_score;
        assert!(d1 > 0.0);
        assert!((d2 - 2.0 * d1).abs() < 1e-9, "dynamic score sums over requests");
    }

    fn score(agent_type: &str, combined: f64) -> HybridScore {
        HybridScore { agent_type: agent_type.into(), static_score: combined, dynamic_score: 0.0 }
    }

    #[test]
    fn select_critical_takes_top_fraction() {
        let scores =
            vec![score("a", 5.0), score("b", 3.0), score("c", 2.0), score("d", 1.0)];
        assert_eq!(
            select_critical(&scores, 0.25),
            BTreeSet::from(["a".to_string()])
        );
        let all = select_critical(&scores, 1.0);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn select_critical_breaks_ties_by_name() {
        let scores = vec![score("a", 5.0), score("b", 5.0), score("c", 1.0)];
        assert_eq!(select_critical(&scores, 0.34), BTreeSet::from(["a".to_string()]));
    }

    #[test]
    fn select_critical_empty_input_is_empty() {
        assert!(select_critical(&[], 0.5).is_empty());
    }

    fn params() -> PartitionParams {
        PartitionParams::default()
    }

    #[test]
    fn phase_one_grows_reserve_under_pressure() {
        let prior = PartitionPlan { total_reserve_ratio: 0.10, ..PartitionPlan::empty() };
        let plan = update_memory_reservations(
            &prior,
            &params(),
            1000,
            900,
            &BTreeMap::new(),
            &[],
            &BTreeSet::new(),
        );
        assert!((plan.total_reserve_ratio - 0.15).abs() < 1e-12);
    }

    #[test]
    fn phase_one_shrinks_reserve_when_idle() {
        let prior = PartitionPlan { total_reserve_ratio: 0.10, ..PartitionPlan::empty() };
        let plan = update_memory_reservations(
            &prior,
            &params(),
            1000,
            400,
            &BTreeMap::new(),
            &[],
            &BTreeSet::new(),
        );
        assert!((plan.total_reserve_ratio - 0.05).abs() < 1e-12);
    }

    #[test]
    fn phase_one_clamps_to_bounds() {
        let high = PartitionPlan { total_reserve_ratio: 0.39, ..PartitionPlan::empty() };
        let plan = update_memory_reservations(
            &high,
            &params(),
            1000,
            990,
            &BTreeMap::new(),
            &[],
            &BTreeSet::new(),
        );
        assert_eq!(plan.total_reserve_ratio, 0.40);
        let low = PartitionPlan { total_reserve_ratio: 0.03, ..PartitionPlan::empty() };
        let plan = update_memory_reservations(
            &low,
            &params(),
            1000,
            100,
            &BTreeMap::new(),
            &[],
            &BTreeSet::new(),
        );
        assert_eq!(plan.total_reserve_ratio, 0.0);
    }

    #[test]
    fn phase_two_splits_by_memory_and_priority_shares() {
        // R_total = 150 after the high-watermark bump from 0.10.
        let prior = PartitionPlan { total_reserve_ratio: 0.10, ..PartitionPlan::empty() };
        let usage = BTreeMap::from([("x".to_string(), 100), ("y".to_string(), 100)]);
        let scores = vec![score("x", 3.0), score("y", 1.0)];
        let critical = BTreeSet::from(["x".to_string(), "y".to_string()]);
        let plan = update_memory_reservations(
            &prior, &params(), 1000, 900, &usage, &scores, &critical,
        );
        // x: (0.1 + 0.75)/2 = 0.425 -> 63; y: (0.1 + 0.25)/2 = 0.175 -> 26.
        assert_eq!(plan.reserve_num["x"], 63);
        assert_eq!(plan.reserve_num["y"], 26);
        assert_eq!(plan.critical, vec!["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn phase_two_renormalizes_excess_shares() {
        let prior = PartitionPlan { total_reserve_ratio: 0.35, ..PartitionPlan::empty() };
        let usage = BTreeMap::from([
            ("x".to_string(), 900),
            ("y".to_string(), 800),
            ("z".to_string(), 700),
        ]);
        let scores = vec![score("x", 5.0), score("y", 4.0), score("z", 3.0)];
        let critical: BTreeSet<String> =
            ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let plan = update_memory_reservations(
            &prior, &params(), 1000, 990, &usage, &scores, &critical,
        );
        let r_total = 1000.0 * plan.total_reserve_ratio;
        let sum: u64 = plan.reserve_num.values().sum();
        assert!(sum as f64 <= r_total, "renormalized sum {sum} exceeds budget {r_total}");
    }

    #[test]
    fn reserve_sum_within_budget_for_random_inputs() {
        use rand::Rng;
        let mut rng = crate::rng::SeedFactory::new(13).stream("ss_prop", &[]);
        for _ in 0..2000 {
            let total = rng.gen_range(1..10_000u64);
            let usage = rng.gen_range(0..=total);
            let n_types = rng.gen_range(1..6usize);
            let mut per_usage = BTreeMap::new();
            let mut scores = Vec::new();
            let mut critical = BTreeSet::new();
            for i in 0..n_types {
                let name = format!("t{i}");
                per_usage.insert(name.clone(), rng.gen_range(0..=total));
                scores.push(score(&name, rng.gen_range(0.0..50.0)));
                critical.insert(name);
            }
            let prior = PartitionPlan {
                total_reserve_ratio: rng.gen_range(0.0..0.40),
                ..PartitionPlan::empty()
            };
            let plan = update_memory_reservations(
                &prior, &params(), total, usage, &per_usage, &scores, &critical,
            );
            assert!(plan.total_reserve_ratio >= 0.0 && plan.total_reserve_ratio <= 0.40);
            let budget = total as f64 * plan.total_reserve_ratio;
            let sum: u64 = plan.reserve_num.values().sum();
            // Floors keep each grant under its share; with at most one unit
            // of slack per type when shares were not renormalized.
            assert!(
                sum as f64 <= budget + critical.len() as f64,
                "sum {sum} budget {budget}"
            );
        }
    }

    #[test]
    fn hysteresis_band_leaves_ratio_unchanged() {
        let prior = PartitionPlan { total_reserve_ratio: 0.20, ..PartitionPlan::empty() };
        let plan = update_memory_reservations(
            &prior,
            &params(),
            1000,
            700,
            &BTreeMap::new(),
            &[],
            &BTreeSet::new(),
        );
        assert_eq!(plan.total_reserve_ratio, 0.20);
    }

    #[test]
    fn inversion_requires_strictly_higher_victim_score() {
        assert!(detect_critical_inversion(7.0, 3.0));
        assert!(!detect_critical_inversion(3.0, 3.0));
        assert!(!detect_critical_inversion(2.0, 3.0));
    }
}
