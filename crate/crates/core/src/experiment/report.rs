use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::attn::MergeReport;
use crate::sim::{BucketCalibration, Outcome, RequestRecord, RunMetrics, SweepResult};

/// Six significant digits, `%g` style: fixed notation for exponents in
/// `[-5, 6)`, scientific otherwise, trailing zeros dropped.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Finished => "finished",
        Outcome::Unschedulable => "unschedulable",
        Outcome::Evicted => "evicted",
        Outcome::Unfinished => "unfinished",
    }
}

pub const REQUESTS_HEADER: [&str; 9] = [
    "id",
    "arrival_ms",
    "admit_ms",
    "finish_ms",
    "tpot_ms",
    "cp_degree",
    "seq_len",
    "output_len",
    "outcome",
];

pub fn write_requests_csv<W: Write>(records: &[RequestRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUESTS_HEADER)?;
    for r in records {
        w.write_record([
            r.id.0.to_string(),
            sig6(r.arrival_ms),
            opt(r.admit_ms),
            opt(r.finish_ms),
            opt(r.tpot_ms()),
            r.cp_degree.to_string(),
            r.seq_len.to_string(),
            r.output_len.to_string(),
            outcome_label(r.outcome).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rates_csv<W: Write>(sweep: &SweepResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rate",
        "attainment",
        "tpot_p50_ms",
        "tpot_p99_ms",
        "requests",
        "sustained",
    ])?;
    for p in &sweep.points {
        w.write_record([
            sig6(p.rate),
            sig6(p.attainment),
            sig6(p.tpot_p50_ms),
            sig6(p.tpot_p99_ms),
            p.requests.to_string(),
            p.sustained().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_csv<W: Write>(cal: &BucketCalibration, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seq_len", "degree", "layer_latency_us"])?;
    for p in &cal.points {
        w.write_record([p.seq_len.to_string(), p.degree.to_string(), sig6(p.layer_latency_us)])?;
    }
    w.flush()?;
    Ok(())
}

/// The only line that differs between identical runs.
pub fn header_line(mode: &str) -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("# dcpsim {mode} generated_unix={secs}")
}

/// `key = value` lines, one per metric, in fixed order.
pub fn run_summary(policy: &str, m: &RunMetrics) -> String {
    let mut lines = vec![
        kv("policy", policy),
        kv("requests", m.requests.len()),
        kv("finished", m.count(Outcome::Finished)),
        kv("unschedulable", m.count(Outcome::Unschedulable)),
        kv("evicted", m.count(Outcome::Evicted)),
        kv("unfinished", m.count(Outcome::Unfinished)),
        kv("iterations", m.iterations),
        kv("tokens_decoded", m.tokens_decoded),
        kv("tpot_mean_ms", sig6(m.tpot_ms.mean)),
        kv("tpot_p50_ms", sig6(m.tpot_ms.p50)),
        kv("tpot_p99_ms", sig6(m.tpot_ms.p99)),
        kv("slo_ms", sig6(m.slo_ms)),
        kv("attainment", sig6(m.attainment)),
        kv("attention_imbalance_pct", sig6(m.attention.imbalance_pct)),
        kv(
            "attention_reduction_potential_pct",
            sig6(m.attention.reduction_potential_pct),
        ),
        kv("moe_comm_imbalance_pct", sig6(m.moe_comm.imbalance_pct)),
        kv(
            "moe_comm_reduction_potential_pct",
            sig6(m.moe_comm.reduction_potential_pct),
        ),
        kv("kv_imbalance_pct", sig6(m.kv_load.imbalance_pct)),
        kv("batch_imbalance_pct", sig6(m.batch.imbalance_pct)),
        kv("hol_events", m.hol_events),
    ];
    for (degree, n) in &m.cp_histogram {
        lines.push(kv(&format!("cp_degree_{degree}"), n));
    }
    for (phase, us) in &m.slowest_breakdown {
        lines.push(kv(&format!("slowest_{}_us", phase.label()), sig6(*us)));
    }
    lines.join("\n") + "\n"
}

pub fn sweep_summary(policy: &str, sweep: &SweepResult) -> String {
    let max = sweep.max_rate.map(sig6).unwrap_or_else(|| "none".into());
    format!(
        "{}\n{}\n{}\n",
        kv("policy", policy),
        kv("max_sustainable_rate", max),
        kv("points", sweep.points.len())
    )
}

pub fn calibration_summary(cal: &BucketCalibration) -> String {
    let mut lines = Vec::new();
    for e in cal.table.entries() {
        let key = e
            .max_len
            .map_or_else(|| "bucket_rest".to_string(), |m| format!("bucket_le_{m}"));
        lines.push(kv(&key, e.degree));
    }
    lines.join("\n") + "\n"
}

pub fn merge_summary(r: &MergeReport) -> String {
    format!(
        "{}\n{}\n",
        kv("cases", r.cases),
        kv("max_rel_err", format!("{:e}", r.max_rel_err))
    )
}

fn kv(key: &str, value: impl std::fmt::Display) -> String {
    format!("{key} = {value}")
}
