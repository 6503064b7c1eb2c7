//! Report rendering: violation JSON lines, campaign report directory
//! (JSON + CSV), and the human summary.
//!
//! Artifact files are deterministic functions of the campaign result; wall
//! clock timings appear only in the stdout summary.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use ipa_core::campaign::{
    overhead_ratios, CampaignResult, CampaignTimings, Outcome3,
};
use ipa_core::epa::DetectReport;

pub fn violation_report(report: &DetectReport) -> String {
    let mut out = String::new();
    for v in &report.violations {
        out.push_str(&serde_json::to_string(v).expect("violation serializes"));
        out.push('\n');
    }
    let summary = serde_json::json!({
        "summary": {
            "samples_scanned": report.samples_scanned,
            "samples_without_invariants": report.samples_without_invariants,
            "violations": report.violations.len(),
            "distinct_invariants_violated": report.distinct_invariants_violated,
        }
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", x),
        None => "-".to_string(),
    }
}

fn outcome_name(o: Outcome3) -> &'static str {
    match o {
        Outcome3::Benign => "benign",
        Outcome3::CrashHang => "crash_hang",
        Outcome3::Sdc => "sdc",
    }
}

/// Write campaign.json, coverage.csv, class_coverage.csv, records.jsonl and
/// invariant metadata into a report directory.
pub fn write_campaign_dir(dir: &Path, result: &CampaignResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    fs::write(dir.join("campaign.json"), json)?;

    let mut coverage = String::from(
        "fault_type,attempts,activated,benign,crash_hang,sdc,coverage,ci_low,ci_high\n",
    );
    for row in &result.rows {
        coverage.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            row.fault_type.name(),
            row.attempts,
            row.activated,
            row.benign,
            row.crash_hang,
            row.sdc,
            row.coverage,
            row.ci_low,
            row.ci_high
        ));
    }
    for (ft, reason) in &result.skipped {
        coverage.push_str(&format!("{},skipped: {},,,,,,,\n", ft.name(), reason));
    }
    fs::write(dir.join("coverage.csv"), coverage)?;

    let mut classes = String::from("fault_type,outcome,A,B,C,D,E,F,G,H\n");
    for row in &result.rows {
        for (oc, cells) in &row.class_coverage_by_outcome {
            let cols: Vec<String> = "ABCDEFGH"
                .chars()
                .map(|c| fmt_opt(cells.get(&c).unwrap_or(&None)))
                .collect();
            classes.push_str(&format!(
                "{},{},{}\n",
                row.fault_type.name(),
                outcome_name(*oc),
                cols.join(",")
            ));
        }
    }
    fs::write(dir.join("class_coverage.csv"), classes)?;

    let mut records = String::new();
    for row in &result.rows {
        for r in &row.records {
            records.push_str(&serde_json::to_string(r)?);
            records.push('\n');
        }
    }
    fs::write(dir.join("records.jsonl"), records)?;
    Ok(())
}

pub fn print_campaign_summary(result: &CampaignResult, timings: &CampaignTimings) {
    println!(
        "program {} | {} invariants (fingerprint {}) | density {:.2}%",
        result.program,
        result.invariant_count,
        result.invariant_fingerprint,
        result.invariant_density
    );
    for row in &result.rows {
        println!(
            "{:<24} activated {:>4}  benign {:>4}  crash/hang {:>4}  sdc {:>4}  coverage {:.3} [{:.3}, {:.3}]",
            row.fault_type.name(),
            row.activated,
            row.benign,
            row.crash_hang,
            row.sdc,
            row.coverage,
            row.ci_low,
            row.ci_high
        );
    }
    for (ft, reason) in &result.skipped {
        println!("{:<24} skipped: {}", ft.name(), reason);
    }
    println!(
        "timings [s]: I1 {:.4}  I2 {:.4}  I3 {:.4}  E1 {:.4}  E3 {:.4}",
        timings.i1, timings.i2, timings.i3, timings.e1, timings.e3
    );
    match overhead_ratios(timings.i1, timings.i2, timings.i3, timings.e1, timings.e3) {
        Ok((s, d)) => println!("overhead ratios: S {:.3}  D {:.3}", s, d),
        Err(_) => println!("overhead ratios: unavailable"),
    }
}
