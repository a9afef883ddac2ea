//! Evaluation metrics computed from per-request records and GPU accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::GpuAccounting;
use crate::workload::{RequestClass, RequestId};

/// Percentile ranks reported for queueing delay.
pub const REPORTED_PERCENTILES: [u32; 5] = [1, 25, 50, 75, 99];

/// Index of the nearest-rank `p`-quantile (the `ceil(p*n)`-th smallest value)
/// in a sorted slice of length `n`.
pub fn nearest_rank_index(n: usize, p: f64) -> Option<usize> {
    if n == 0 {
        return None;
    }
    // Tolerate representation error in p*n (0.95 * 100 must rank 95).
    let rank = (p * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Some(rank.min(n) - 1)
}

/// Nearest-rank percentile; `None` for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    nearest_rank_index(v.len(), p).map(|i| v[i])
}

/// Fraction of GPU time spent idle: sum of idle over sum of idle plus busy.
pub fn gpu_idle_rate(accounting: &[GpuAccounting]) -> f64 {
    let idle: f64 = accounting.iter().map(|g| g.idle_time).sum();
    let total: f64 = accounting.iter().map(|g| g.exec_time + g.idle_time).sum();
    if total > 0.0 {
        idle / total
    } else {
        // nothing ran at all
        1.0
    }
}

/// Everything the engine knows about one request once the run is over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub class: RequestClass,
    pub arrival_time: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub prefill_start_time: Option<f64>,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
    pub starved: bool,
    pub preemption_count: u32,
    pub suspension_time_total: f64,
    /// Scheduling decision plus context-switch or plan-selection time.
    pub sched_overhead: f64,
    /// Prefill compute time actually charged across all execution segments.
    pub charged_prefill_compute: f64,
    /// Prefill compute time of an uninterrupted run under the same plan.
    pub expected_prefill_compute: f64,
}

impl RequestRecord {
    pub fn jct(&self) -> Option<f64> {
        self.finish_time.map(|f| f - self.arrival_time)
    }
}

/// Time from arrival to first service; `None` for never-served requests.
pub fn queueing_delay(record: &RequestRecord) -> Option<f64> {
    if record.starved {
        return None;
    }
    record.prefill_start_time.map(|s| s - record.arrival_time)
}

/// Completed requests of `class` per second between the class's first
/// arrival and its last completion.
pub fn throughput_rps(records: &[RequestRecord], class: RequestClass) -> f64 {
    let of_class = || records.iter().filter(move |r| r.class == class);
    let completed: Vec<f64> = of_class().filter_map(|r| r.finish_time).collect();
    if completed.is_empty() {
        return 0.0;
    }
    let first = of_class()
        .map(|r| r.arrival_time)
        .fold(f64::INFINITY, f64::min);
    let last = completed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = last - first;
    if span > 0.0 {
        completed.len() as f64 / span
    } else {
        0.0
    }
}

/// p99 of scheduling overhead over JCT for completed requests of `class`,
/// or of every class when `class` is `None`.
pub fn sched_overhead_ratio(records: &[RequestRecord], class: Option<RequestClass>) -> Option<f64> {
    let ratios: Vec<f64> = records
        .iter()
        .filter(|r| class.map_or(true, |c| r.class == c))
        .filter_map(|r| {
            let jct = r.jct()?;
            (jct > 0.0).then(|| (r.sched_overhead / jct).min(1.0))
        })
        .collect();
    percentile(&ratios, 0.99)
}

/// Per-class slice of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub arrived: usize,
    pub completed: usize,
    pub starved: usize,
    /// Keyed by percentile rank (1, 25, 50, 75, 99).
    pub queueing_delay: BTreeMap<u32, Option<f64>>,
    /// Same percentiles divided by [`MetricsReport::normalization_divisor`].
    pub normalized_delay: BTreeMap<u32, Option<f64>>,
    pub throughput_rps: f64,
    pub avg_jct: Option<f64>,
    pub sched_overhead_ratio_p99: Option<f64>,
}

impl ClassMetrics {
    fn from_records(records: &[RequestRecord], class: RequestClass) -> Self {
        let of_class: Vec<&RequestRecord> = records.iter().filter(|r| r.class == class).collect();
        let delays: Vec<f64> = of_class.iter().filter_map(|r| queueing_delay(r)).collect();
        let jcts: Vec<f64> = of_class.iter().filter_map(|r| r.jct()).collect();
        let queueing_delay = REPORTED_PERCENTILES
            .iter()
            .map(|&p| (p, percentile(&delays, p as f64 / 100.0)))
            .collect();
        Self {
            arrived: of_class.len(),
            completed: jcts.len(),
            starved: of_class.iter().filter(|r| r.starved).count(),
            queueing_delay,
            normalized_delay: BTreeMap::new(),
            throughput_rps: throughput_rps(records, class),
            avg_jct: (!jcts.is_empty()).then(|| jcts.iter().sum::<f64>() / jcts.len() as f64),
            sched_overhead_ratio_p99: sched_overhead_ratio(records, Some(class)),
        }
    }

    pub fn p99_delay(&self) -> Option<f64> {
        self.queueing_delay.get(&99).copied().flatten()
    }
}

/// Summary of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub short: ClassMetrics,
    pub long: ClassMetrics,
    pub gpu_idle_rate: f64,
    pub starvation_rate_long: f64,
    pub total_preemptions: u64,
    /// p99 scheduling overhead over JCT across all completed requests.
    pub sched_overhead_ratio_p99: Option<f64>,
    /// Simulated time at which the last request finished.
    pub makespan: f64,
    pub normalization_divisor: Option<f64>,
}

impl MetricsReport {
    pub fn compute(policy: &str, records: &[RequestRecord], accounting: &[GpuAccounting]) -> Self {
        let long = ClassMetrics::from_records(records, RequestClass::Long);
        let starvation_rate_long = if long.arrived > 0 {
            long.starved as f64 / long.arrived as f64
        } else {
            0.0
        };
        let mut report = Self {
            policy: policy.to_string(),
            short: ClassMetrics::from_records(records, RequestClass::Short),
            long,
            gpu_idle_rate: gpu_idle_rate(accounting),
            starvation_rate_long,
            total_preemptions: records
                .iter()
                .filter(|r| r.class == RequestClass::Long)
                .map(|r| r.preemption_count as u64)
                .sum(),
            sched_overhead_ratio_p99: sched_overhead_ratio(records, None),
            makespan: records
                .iter()
                .filter_map(|r| r.finish_time)
                .fold(0.0, f64::max),
            normalization_divisor: None,
        };
        report.normalize(None);
        report
    }

    pub fn avg_jct_long(&self) -> Option<f64> {
        self.long.avg_jct
    }

    /// Divides delay percentiles by `divisor` (the report's own short p99 when
    /// `None`).
    pub fn normalize(&mut self, divisor: Option<f64>) {
        let divisor = divisor.or(self.short.p99_delay()).filter(|d| *d > 0.0);
        self.normalization_divisor = divisor;
        for class in [&mut self.short, &mut self.long] {
            class.normalized_delay = class
                .queueing_delay
                .iter()
                .map(|(&p, v)| (p, v.zip(divisor).map(|(v, d)| v / d)))
                .collect();
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One delimited table per metric across `reports`: `(file name, csv)`.
pub fn figure_tables(reports: &[MetricsReport]) -> Vec<(String, String)> {
    let classes = |r: &MetricsReport| [("short", r.short.clone()), ("long", r.long.clone())];
    let mut q = String::from("policy,class,percentile,delay_s,normalized\n");
    let mut tp = String::from("policy,class,throughput_rps\n");
    let mut jct = String::from("policy,avg_long_jct_s\n");
    let mut pre = String::from("policy,total_preemptions\n");
    let mut idle = String::from("policy,gpu_idle_rate\n");
    let mut starve = String::from("policy,starvation_rate_long\n");
    let mut over = String::from("policy,class,p99_overhead_ratio\n");
    for r in reports {
        let p = &r.policy;
        for (name, c) in classes(r) {
            for (rank, v) in &c.queueing_delay {
                q.push_str(&format!("{p},{name},{rank},{},{}\n", cell(*v), cell(c.normalized_delay[rank])));
            }
            tp.push_str(&format!("{p},{name},{}\n", c.throughput_rps));
            over.push_str(&format!("{p},{name},{}\n", cell(c.sched_overhead_ratio_p99)));
        }
        over.push_str(&format!("{p},all,{}\n", cell(r.sched_overhead_ratio_p99)));
        jct.push_str(&format!("{p},{}\n", cell(r.long.avg_jct)));
        pre.push_str(&format!("{p},{}\n", r.total_preemptions));
        idle.push_str(&format!("{p},{}\n", r.gpu_idle_rate));
        starve.push_str(&format!("{p},{}\n", r.starvation_rate_long));
    }
    [("q_delay", q), ("throughput", tp), ("jct", jct), ("preemptions", pre), ("idle_rate", idle), ("starvation", starve), ("overhead", over)]
        .into_iter()
        .map(|(n, t)| (format!("{n}.csv"), t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(class: RequestClass, arrival: f64, start: Option<f64>, finish: Option<f64>) -> RequestRecord {
        RequestRecord {
            id: RequestId(0),
            class,
            arrival_time: arrival,
            input_len: 10,
            output_len: 1,
            prefill_start_time: start,
            first_token_time: start,
            finish_time: finish,
            starved: start.is_none(),
            preemption_count: 0,
            suspension_time_total: 0.0,
            sched_overhead: 0.0,
            charged_prefill_compute: 0.0,
            expected_prefill_compute: 0.0,
        }
    }

    #[test]
    fn idle_rate_examples() {
        let g = |e, i| GpuAccounting { gpu_id: 0, exec_time: e, idle_time: i };
        assert_eq!(gpu_idle_rate(&[g(3.0, 0.0), g(2.0, 0.0)]), 0.0);
        assert_eq!(gpu_idle_rate(&[g(3.0, 1.0), g(4.0, 0.0)]), 0.125);
        assert_eq!(gpu_idle_rate(&[g(0.0, 5.0), g(0.0, 5.0)]), 1.0);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5), Some(2.0));
        assert_eq!(percentile(&[7.0], 0.01), Some(7.0));
        assert_eq!(percentile(&[7.0], 0.99), Some(7.0));
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&hundred, 0.99), Some(99.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn queueing_delay_rules() {
        assert_eq!(queueing_delay(&record(RequestClass::Short, 2.0, Some(2.0), Some(3.0))), Some(0.0));
        assert_eq!(queueing_delay(&record(RequestClass::Short, 2.0, Some(5.0), Some(6.0))), Some(3.0));
        assert_eq!(queueing_delay(&record(RequestClass::Long, 2.0, None, None)), None);
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput_rps(&[], RequestClass::Short), 0.0);
        let recs: Vec<RequestRecord> = (0..100)
            .map(|i| record(RequestClass::Short, 0.0, Some(0.0), Some(if i == 99 { 50.0 } else { 1.0 })))
            .collect();
        assert_eq!(throughput_rps(&recs, RequestClass::Short), 2.0);
    }

    #[test]
    fn overhead_ratio_examples() {
        let mut r = record(RequestClass::Short, 0.0, Some(0.0), Some(1.0));
        assert_eq!(sched_overhead_ratio(&[r.clone()], Some(RequestClass::Short)), Some(0.0));
        r.sched_overhead = 0.001;
        let v = sched_overhead_ratio(&[r], None).unwrap();
        assert!((v - 0.001).abs() < 1e-15);
    }

    #[test]
    fn starved_and_completed_partition_long_arrivals() {
        let recs = vec![
            record(RequestClass::Long, 0.0, None, None),
            record(RequestClass::Long, 1.0, Some(2.0), Some(9.0)),
            record(RequestClass::Long, 1.0, Some(3.0), Some(9.0)),
            record(RequestClass::Short, 1.0, Some(1.5), Some(2.0)),
        ];
        let rep = MetricsReport::compute("x", &recs, &[]);
        assert_eq!(rep.long.arrived, 3);
        assert!((rep.starvation_rate_long + rep.long.completed as f64 / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(rep.short.normalized_delay[&99], Some(1.0));
        assert_eq!(rep, MetricsReport::compute("x", &recs, &[]));
    }
}
