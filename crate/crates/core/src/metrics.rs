//! Trace aggregation: latency, utilization, and safety statistics.
//!
//! Everything here works off the serialized trace alone, so saved JSONL
//! files can be re-analyzed without re-running the simulation. Counter
//! fields re-derived here always match the engine's own [`RunCounters`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::SimEngine;
use crate::scenario::{Policy, Scenario};
use crate::trace::{TraceEvent, TraceKind};
use crate::workload::{Workload, WorkloadError};

/// Factor over the type mean beyond which a request latency is abnormal.
pub const ABNORMAL_FACTOR: f64 = 1.5;

/// Latency summary for one agent type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeLatency {
    pub count: u64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Aggregated statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Completed application instances.
    pub app_count: u64,
    /// Completed requests (graph nodes).
    pub request_count: u64,
    /// Mean end-to-end latency per application instance.
    pub avg_e2e_ms: f64,
    /// 95th percentile (nearest rank) of instance end-to-end latency.
    pub p95_e2e_ms: f64,
    /// Mean end-to-end latency per request.
    pub avg_request_ms: f64,
    pub per_type: BTreeMap<String, TypeLatency>,
    /// Time-weighted mean fraction of device blocks holding request data
    /// (running, stalled, or in transfer).
    pub mean_occupied_frac: f64,
    /// Time-weighted mean fraction doing active compute (prefill/decode).
    pub mean_effective_frac: f64,
    /// Time-weighted mean fraction held by stalled requests.
    pub mean_stalled_frac: f64,
    pub peak_occupied_frac: f64,
    /// Requests whose latency exceeded [`ABNORMAL_FACTOR`] times their
    /// type's mean.
    pub abnormal_requests: u64,
    pub abnormal_frac: f64,
    pub preemptions: u64,
    pub critical_inversions: u64,
    pub offloads: u64,
    pub upload_stalls: u64,
    pub host_acquisitions: u64,
    /// Decoded tokens of completed requests per second of simulated time.
    pub throughput_tokens_per_s: f64,
    pub truncated: bool,
}

/// Nearest-rank percentile of an ascending-sorted slice (`p` in `[0, 1]`).
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One utilization sample, as fractions of the device pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilPoint {
    pub t_ms: f64,
    /// Blocks holding request data: active + stalled + transfer claims +
    /// pending offloads.
    pub occupied_frac: f64,
    pub active_frac: f64,
    pub stalled_frac: f64,
}

/// Extracts the utilization timeline from a trace.
pub fn util_timeline(trace: &[TraceEvent]) -> Vec<UtilPoint> {
    trace
        .iter()
        .filter(|e| e.kind == TraceKind::UtilSample)
        .map(|e| {
            let total = e.extra_f64("total").unwrap_or(0.0).max(1.0);
            let active = e.extra_f64("active").unwrap_or(0.0);
            let stalled = e.extra_f64("stalled").unwrap_or(0.0);
            let claims = e.extra_f64("claims").unwrap_or(0.0);
            let pending = e.extra_f64("pending").unwrap_or(0.0);
            UtilPoint {
                t_ms: e.t_ms,
                occupied_frac: (active + stalled + claims + pending) / total,
                active_frac: active / total,
                stalled_frac: stalled / total,
            }
        })
        .collect()
}

/// Time-weighted mean of a piecewise-constant signal sampled at `points`;
/// each sample holds until the next one.
fn time_weighted_mean(points: &[(f64, f64)]) -> f64 {
    match points.len() {
        0 => 0.0,
        1 => points[0].1,
        _ => {
            let mut num = 0.0;
            let mut den = 0.0;
            for w in points.windows(2) {
                let dt = (w[1].0 - w[0].0).max(0.0);
                num += w[0].1 * dt;
                den += dt;
            }
            if den > 0.0 {
                num / den
            } else {
                mean(&points.iter().map(|p| p.1).collect::<Vec<_>>())
            }
        }
    }
}

/// Computes the full statistics of one trace.
pub fn aggregate(trace: &[TraceEvent]) -> MetricsReport {
    let mut app_e2e: Vec<f64> = Vec::new();
    let mut request_e2e: Vec<f64> = Vec::new();
    let mut by_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut tokens_done = 0.0;
    let mut preemptions = 0;
    let mut critical_inversions = 0;
    let mut offloads = 0;
    let mut upload_stalls = 0;
    let mut host_acquisitions = 0.0;
    let mut truncated = false;

    for e in trace {
        match e.kind {
            TraceKind::AppDone => {
                app_e2e.push(e.extra_f64("e2e_ms").unwrap_or(0.0));
            }
            TraceKind::RequestDone => {
                let ms = e.extra_f64("e2e_ms").unwrap_or(0.0);
                request_e2e.push(ms);
                tokens_done += e.extra_f64("tokens").unwrap_or(0.0);
                if let Some(ty) = &e.agent_type {
                    by_type.entry(ty.clone()).or_default().push(ms);
                }
            }
            TraceKind::Evicted => {
                // Policy-driven frees (the evict baseline) are not
                // preemptions; only pressure and self evictions are.
                if e.extra_str("cause") != Some("policy") {
                    preemptions += 1;
                }
            }
            TraceKind::CriticalInversion => critical_inversions += 1,
            TraceKind::OffloadStarted => {
                offloads += 1;
                host_acquisitions += e.extra_f64("host_acquired").unwrap_or(0.0);
            }
            TraceKind::UploadStall => upload_stalls += 1,
            TraceKind::Truncated => truncated = true,
            _ => {}
        }
    }

    let timeline = util_timeline(trace);
    let weigh = |f: fn(&UtilPoint) -> f64| {
        time_weighted_mean(&timeline.iter().map(|p| (p.t_ms, f(p))).collect::<Vec<_>>())
    };
    let mean_occupied_frac = weigh(|p| p.occupied_frac);
    let mean_effective_frac = weigh(|p| p.active_frac);
    let mean_stalled_frac = weigh(|p| p.stalled_frac);
    let peak_occupied_frac =
        timeline.iter().map(|p| p.occupied_frac).fold(0.0, f64::max);

    let per_type: BTreeMap<String, TypeLatency> = by_type
        .iter()
        .map(|(ty, vals)| {
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            (
                ty.clone(),
                TypeLatency {
                    count: vals.len() as u64,
                    mean_ms: mean(vals),
                    p95_ms: percentile_nearest_rank(&sorted, 0.95),
                },
            )
        })
        .collect();
    let abnormal_requests: u64 = by_type
        .iter()
        .map(|(ty, vals)| {
            let cut = ABNORMAL_FACTOR * per_type[ty].mean_ms;
            vals.iter().filter(|&&v| v > cut).count() as u64
        })
        .sum();

    let mut app_sorted = app_e2e.clone();
    app_sorted.sort_by(f64::total_cmp);
    let end_ms = trace.last().map(|e| e.t_ms).unwrap_or(0.0);

    MetricsReport {
        app_count: app_e2e.len() as u64,
        request_count: request_e2e.len() as u64,
        avg_e2e_ms: mean(&app_e2e),
        p95_e2e_ms: percentile_nearest_rank(&app_sorted, 0.95),
        avg_request_ms: mean(&request_e2e),
        per_type,
        mean_occupied_frac,
        mean_effective_frac,
        mean_stalled_frac,
        peak_occupied_frac,
        abnormal_requests,
        abnormal_frac: if request_e2e.is_empty() {
            0.0
        } else {
            abnormal_requests as f64 / request_e2e.len() as f64
        },
        preemptions,
        critical_inversions,
        offloads,
        upload_stalls,
        host_acquisitions: host_acquisitions as u64,
        throughput_tokens_per_s: if end_ms > 0.0 { tokens_done / end_ms * 1000.0 } else { 0.0 },
        truncated,
    }
}

/// One (policy, qps, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub qps: f64,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs the full (policy x qps x seed) grid in parallel and aggregates each
/// run. Row order is the deterministic nested iteration order regardless of
/// which worker finished first.
pub fn sweep(
    base: &Scenario,
    policies: &[Policy],
    qps_list: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, WorkloadError> {
    let mut jobs: Vec<(Policy, f64, u64)> = Vec::new();
    for &policy in policies {
        for &qps in qps_list {
            for &seed in seeds {
                jobs.push((policy, qps, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(policy, qps, seed)| {
            let mut sc = base.clone();
            sc.qps = qps;
            sc.seed = seed;
            let workload = Workload::new(sc)?;
            let mut engine = SimEngine::new(workload, policy);
            let out = engine.run();
            Ok(SweepRow { policy, qps, seed, report: aggregate(&out.trace) })
        })
        .collect()
}

/// Seed-averaged latency of one policy at one arrival rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub qps: f64,
    pub policy: Policy,
    pub runs: u64,
    pub mean_avg_e2e_ms: f64,
    pub mean_p95_e2e_ms: f64,
    pub mean_effective_frac: f64,
    /// Mean latency divided by the baseline's at the same qps (1.0 for the
    /// baseline itself; < 1 is faster).
    pub latency_ratio_vs_baseline: f64,
    /// Percent change of mean latency against the baseline policy at the
    /// same qps (negative is faster). Zero for the baseline itself.
    pub delta_pct_vs_baseline: f64,
    /// Effective-utilization difference against the baseline (positive is
    /// busier silicon).
    pub util_delta_vs_baseline: f64,
    pub any_truncated: bool,
}

/// Averages sweep rows over seeds and relates every policy to `baseline`
/// at each arrival rate. Rows are ordered by (qps, baseline first, then
/// policy name).
pub fn compare(rows: &[SweepRow], baseline: Policy) -> Vec<CompareRow> {
    let mut grouped: BTreeMap<(u64, &str), Vec<&SweepRow>> = BTreeMap::new();
    for row in rows {
        grouped.entry((row.qps.to_bits(), row.policy.name())).or_default().push(row);
    }
    let mut qps_values: Vec<f64> = rows.iter().map(|r| r.qps).collect();
    qps_values.sort_by(f64::total_cmp);
    qps_values.dedup();

    let mut out = Vec::new();
    for qps in qps_values {
        let mut cells: Vec<CompareRow> = grouped
            .iter()
            .filter(|((bits, _), _)| *bits == qps.to_bits())
            .map(|((_, _), rows)| {
                let policy = rows[0].policy;
                CompareRow {
                    qps,
                    policy,
                    runs: rows.len() as u64,
                    mean_avg_e2e_ms: mean(
                        &rows.iter().map(|r| r.report.avg_e2e_ms).collect::<Vec<_>>(),
                    ),
                    mean_p95_e2e_ms: mean(
                        &rows.iter().map(|r| r.report.p95_e2e_ms).collect::<Vec<_>>(),
                    ),
                    mean_effective_frac: mean(
                        &rows.iter().map(|r| r.report.mean_effective_frac).collect::<Vec<_>>(),
                    ),
                    latency_ratio_vs_baseline: 1.0,
                    delta_pct_vs_baseline: 0.0,
                    util_delta_vs_baseline: 0.0,
                    any_truncated: rows.iter().any(|r| r.report.truncated),
                }
            })
            .collect();
        cells.sort_by(|a, b| {
            (b.policy == baseline)
                .cmp(&(a.policy == baseline))
                .then_with(|| a.policy.name().cmp(b.policy.name()))
        });
        let base = cells.iter().find(|c| c.policy == baseline).cloned();
        if let Some(base) = base {
            for c in &mut cells {
                if c.policy == baseline {
                    continue;
                }
                if base.mean_avg_e2e_ms > 0.0 {
                    c.latency_ratio_vs_baseline = c.mean_avg_e2e_ms / base.mean_avg_e2e_ms;
                    c.delta_pct_vs_baseline = (c.latency_ratio_vs_baseline - 1.0) * 100.0;
                }
                c.util_delta_vs_baseline = c.mean_effective_frac - base.mean_effective_frac;
            }
        }
        out.extend(cells);
    }
    out
}

pub const COMPARE_CSV_HEADER: &str = "qps,policy,runs,mean_avg_e2e_ms,mean_p95_e2e_ms,\
mean_effective_frac,latency_ratio_vs_baseline,delta_pct_vs_baseline,util_delta_vs_baseline,\
any_truncated";

/// One CSV line matching [`COMPARE_CSV_HEADER`].
pub fn compare_csv_row(c: &CompareRow) -> String {
    format!(
        "{},{},{},{:.3},{:.3},{:.4},{:.4},{:.2},{:.4},{}",
        c.qps,
        c.policy.name(),
        c.runs,
        c.mean_avg_e2e_ms,
        c.mean_p95_e2e_ms,
        c.mean_effective_frac,
        c.latency_ratio_vs_baseline,
        c.delta_pct_vs_baseline,
        c.util_delta_vs_baseline,
        c.any_truncated,
    )
}

pub const REPORT_CSV_HEADER: &str = "policy,qps,seed,apps,requests,avg_e2e_ms,p95_e2e_ms,\
avg_request_ms,mean_occupied_frac,mean_effective_frac,mean_stalled_frac,peak_occupied_frac,\
abnormal_requests,preemptions,critical_inversions,offloads,upload_stalls,host_acquisitions,\
throughput_tokens_per_s,truncated";

/// One CSV line matching [`REPORT_CSV_HEADER`].
pub fn report_csv_row(policy: Policy, qps: f64, seed: u64, r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{:.3},{:.3},{:.3},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{},{},{:.3},{}",
        policy.name(),
        qps,
        seed,
        r.app_count,
        r.request_count,
        r.avg_e2e_ms,
        r.p95_e2e_ms,
        r.avg_request_ms,
        r.mean_occupied_frac,
        r.mean_effective_frac,
        r.mean_stalled_frac,
        r.peak_occupied_frac,
        r.abnormal_requests,
        r.preemptions,
        r.critical_inversions,
        r.offloads,
        r.upload_stalls,
        r.host_acquisitions,
        r.throughput_tokens_per_s,
        r.truncated,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceEvent;

    #[test]
    fn percentile_uses_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile_nearest_rank(&v, 0.95), 95.0);
        assert_eq!(percentile_nearest_rank(&v, 1.0), 100.0);
        assert_eq!(percentile_nearest_rank(&v, 0.0), 1.0);
        let small = [10.0, 20.0, 30.0];
        assert_eq!(percentile_nearest_rank(&small, 0.95), 30.0);
        assert_eq!(percentile_nearest_rank(&[], 0.5), 0.0);
    }

    fn done(t: f64, ty: &str, ms: f64, tokens: u64) -> TraceEvent {
        TraceEvent::new(t, TraceKind::RequestDone)
            .agent(ty)
            .with("e2e_ms", ms)
            .with("tokens", tokens)
    }

    #[test]
    fn aggregate_computes_latency_and_throughput() {
        let trace = vec![
            done(100.0, "a", 50.0, 10),
            done(300.0, "a", 150.0, 20),
            TraceEvent::new(500.0, TraceKind::AppDone).inst(0).with("e2e_ms", 500.0),
        ];
        let r = aggregate(&trace);
        assert_eq!(r.app_count, 1);
        assert_eq!(r.request_count, 2);
        assert_eq!(r.avg_e2e_ms, 500.0);
        assert_eq!(r.avg_request_ms, 100.0);
        assert_eq!(r.per_type["a"].count, 2);
        assert_eq!(r.per_type["a"].p95_ms, 150.0);
        // 30 tokens over 0.5 s.
        assert!((r.throughput_tokens_per_s - 60.0).abs() < 1e-9);
        assert!(!r.truncated);
    }

    #[test]
    fn abnormal_counts_against_type_mean() {
        // Type mean 100; cutoff 150; one request at 400 crosses it.
        let trace = vec![
            done(1.0, "a", 25.0, 1),
            done(2.0, "a", 25.0, 1),
            done(3.0, "a", 400.0, 1),
            done(4.0, "a", 25.0, 1),
            done(5.0, "a", 25.0, 1),
            // Different type with its own mean; none abnormal.
            done(6.0, "b", 1000.0, 1),
            done(7.0, "b", 1000.0, 1),
        ];
        let r = aggregate(&trace);
        assert_eq!(r.abnormal_requests, 1);
        assert!((r.abnormal_frac - 1.0 / 7.0).abs() < 1e-12);
    }

    fn util(t: f64, active: u64, stalled: u64) -> TraceEvent {
        TraceEvent::new(t, TraceKind::UtilSample)
            .with("total", 100u64)
            .with("free", 100 - active - stalled)
            .with("active", active)
            .with("stalled", stalled)
            .with("claims", 0u64)
            .with("pending", 0u64)
    }

    #[test]
    fn utilization_is_time_weighted() {
        // 10 ms at 80% active, then 30 ms at 40%: mean = (800+1200)/40 = 50%.
        let trace = vec![util(0.0, 80, 0), util(10.0, 40, 0), util(40.0, 40, 0)];
        let r = aggregate(&trace);
        assert!((r.mean_effective_frac - 0.50).abs() < 1e-12);
        assert!((r.peak_occupied_frac - 0.80).abs() < 1e-12);
    }

    #[test]
    fn counters_rederive_from_trace() {
        let trace = vec![
            TraceEvent::new(1.0, TraceKind::Evicted).req(1).with("cause", "pressure"),
            TraceEvent::new(2.0, TraceKind::Evicted).req(2).with("cause", "policy"),
            TraceEvent::new(3.0, TraceKind::Evicted).req(3).with("cause", "self"),
            TraceEvent::new(4.0, TraceKind::CriticalInversion).req(1),
            TraceEvent::new(5.0, TraceKind::OffloadStarted)
                .req(4)
                .with("host_acquired", 32u64)
                .with("host_reused", 0u64),
            TraceEvent::new(6.0, TraceKind::UploadStall).req(4).with("missing", 3u64),
            TraceEvent::new(7.0, TraceKind::Truncated).with("live", 1u64),
        ];
        let r = aggregate(&trace);
        assert_eq!(r.preemptions, 2, "policy evictions are not preemptions");
        assert_eq!(r.critical_inversions, 1);
        assert_eq!(r.offloads, 1);
        assert_eq!(r.upload_stalls, 1);
        assert_eq!(r.host_acquisitions, 32);
        assert!(r.truncated);
    }

    #[test]
    fn compare_relates_policies_to_baseline() {
        let report = |ms: f64| MetricsReport {
            avg_e2e_ms: ms,
            ..aggregate(&[])
        };
        let rows = vec![
            SweepRow { policy: Policy::Retain, qps: 0.5, seed: 1, report: report(1000.0) },
            SweepRow { policy: Policy::Retain, qps: 0.5, seed: 2, report: report(1200.0) },
            SweepRow { policy: Policy::Tokencake, qps: 0.5, seed: 1, report: report(800.0) },
            SweepRow { policy: Policy::Tokencake, qps: 0.5, seed: 2, report: report(900.0) },
        ];
        let cmp = compare(&rows, Policy::Retain);
        assert_eq!(cmp.len(), 2);
        assert_eq!(cmp[0].policy, Policy::Retain, "baseline first");
        assert_eq!(cmp[0].mean_avg_e2e_ms, 1100.0);
        assert_eq!(cmp[0].latency_ratio_vs_baseline, 1.0);
        assert_eq!(cmp[1].policy, Policy::Tokencake);
        assert_eq!(cmp[1].mean_avg_e2e_ms, 850.0);
        assert!((cmp[1].latency_ratio_vs_baseline - 850.0 / 1100.0).abs() < 1e-12);
        // (850 - 1100) / 1100 = -22.7%.
        assert!((cmp[1].delta_pct_vs_baseline + 22.7272727).abs() < 1e-4);
    }

    #[test]
    fn identical_reports_compare_at_ratio_one() {
        let report = aggregate(&[
            done(10.0, "a", 100.0, 5),
            TraceEvent::new(110.0, TraceKind::AppDone).inst(0).with("e2e_ms", 110.0),
        ]);
        assert!(report.avg_e2e_ms > 0.0);
        let rows: Vec<SweepRow> = [Policy::Retain, Policy::Tokencake, Policy::Evict]
            .iter()
            .map(|&policy| SweepRow { policy, qps: 1.0, seed: 1, report: report.clone() })
            .collect();
        for c in compare(&rows, Policy::Retain) {
            assert_eq!(c.latency_ratio_vs_baseline, 1.0);
            assert_eq!(c.delta_pct_vs_baseline, 0.0);
            assert_eq!(c.util_delta_vs_baseline, 0.0);
        }
        let row = compare_csv_row(&compare(&rows, Policy::Retain)[0]);
        assert_eq!(row.split(',').count(), COMPARE_CSV_HEADER.split(',').count());
    }

    #[test]
    fn csv_row_matches_header_column_count() {
        let r = aggregate(&[]);
        let row = report_csv_row(Policy::Tokencake, 0.25, 7, &r);
        assert_eq!(
            row.split(',').count(),
            REPORT_CSV_HEADER.split(',').count(),
        );
    }
}
