//! Ablation tables from bench outputs: acceptance length per arm, paired
//! bootstrap comparisons, and per-position acceptance rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use msd_core::metrics::{paired_bootstrap, ExampleCounts};
use msd_core::rng::derive_seed;

use crate::artifacts::{self, header};
use crate::{streams, ReportArgs};

pub const BASELINE: &str = "baseline-concat/vision-only";
pub const DECOUPLED: &str = "decoupled/vision-only";
pub const MSD: &str = "decoupled/two-stage-gradual";
pub const VISION1_VISION2: &str = "decoupled/vision1-vision2";
pub const DIRECT: &str = "decoupled/two-stage-direct";
pub const TEXT_ONLY: &str = "decoupled/text-only";

/// (table, name, a, b): each comparison asks whether τ(a) > τ(b).
const COMPARISONS: [(&str, &str, &str, &str); 6] = [
    ("components", "input decoupling", DECOUPLED, BASELINE),
    ("components", "two-stage training", MSD, DECOUPLED),
    ("strategies", "gradual vs vision1-vision1", MSD, DECOUPLED),
    ("strategies", "gradual vs vision1-vision2", MSD, VISION1_VISION2),
    ("strategies", "gradual vs direct", MSD, DIRECT),
    ("strategies", "gradual vs text-only", MSD, TEXT_ONLY),
];

#[derive(Clone, Debug, Serialize)]
struct Row {
    arm: String,
    decode: String,
    temperature: f64,
    examples: usize,
    tau: f64,
    tau_accepted: f64,
    n_alpha: Option<Vec<Option<f64>>>,
    #[serde(skip)]
    counts: Vec<ExampleCounts>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    table: String,
    name: String,
    decode: String,
    a: String,
    b: String,
    diff: f64,
    half_width: f64,
    lower: f64,
    upper: f64,
    /// `better`: diff exceeds the half-width; `worse`: diff below minus the
    /// half-width; otherwise `inconclusive`.
    verdict: &'static str,
}

fn rows_of(doc: &Value) -> Result<Vec<Row>> {
    let arm = doc["arm"].as_str().context("metrics.json lacks an arm label")?.to_string();
    let runs = doc["runs"].as_array().context("metrics.json lacks runs")?;
    runs.iter()
        .map(|run| {
            let examples = run["examples"].as_array().context("run lacks examples")?;
            let counts = examples
                .iter()
                .map(|e| {
                    Ok(ExampleCounts {
                        tokens: e["tokens"].as_u64().context("example tokens")? as usize,
                        cycles: e["cycles"].as_u64().context("example cycles")? as usize,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let metrics = &run["metrics"];
            Ok(Row {
                arm: arm.clone(),
                decode: run["decode"]["mode"]["kind"].as_str().context("decode mode")?.to_string(),
                temperature: run["decode"]["temperature"].as_f64().context("temperature")?,
                examples: counts.len(),
                tau: metrics["tau"].as_f64().context("tau")?,
                tau_accepted: metrics["tau_accepted"].as_f64().context("tau_accepted")?,
                n_alpha: serde_json::from_value(metrics["n_alpha"].clone())?,
                counts,
            })
        })
        .collect()
}

fn fmt_alpha(a: Option<f64>) -> String {
    a.map_or("-".into(), |v| format!("{v:.3}"))
}

pub fn report(seed: u64, args: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for dir in &args.runs {
        let doc: Value = artifacts::read_json(&dir.join("metrics.json"))?;
        rows.extend(rows_of(&doc)?);
    }
    let mut by_key: BTreeMap<(String, String), Row> = BTreeMap::new();
    for row in &rows {
        if by_key.insert((row.decode.clone(), row.arm.clone()), row.clone()).is_some() {
            bail!("arm {} appears twice for {} decoding", row.arm, row.decode);
        }
    }
    let decodes: Vec<String> = {
        let mut d: Vec<String> = rows.iter().map(|r| r.decode.clone()).collect();
        d.sort();
        d.dedup();
        d
    };

    let bootstrap_seed = derive_seed(seed, streams::BOOTSTRAP);
    let mut comparisons = Vec::new();
    for decode in &decodes {
        for (table, name, a, b) in COMPARISONS {
            let (Some(ra), Some(rb)) = (by_key.get(&(decode.clone(), a.into())), by_key.get(&(decode.clone(), b.into()))) else {
                continue;
            };
            let d = paired_bootstrap(&ra.counts, &rb.counts, args.resamples, bootstrap_seed)
                .with_context(|| format!("comparing {a} with {b}"))?;
            let verdict = if d.diff > d.half_width {
                "better"
            } else if d.diff < -d.half_width {
                "worse"
            } else {
                "inconclusive"
            };
            comparisons.push(Comparison {
                table: table.into(),
                name: name.into(),
                decode: decode.clone(),
                a: a.into(),
                b: b.into(),
                diff: d.diff,
                half_width: d.half_width,
                lower: d.lower,
                upper: d.upper,
                verdict,
            });
        }
    }

    let alpha1 = |arm: &str| {
        by_key
            .get(&("chain".to_string(), arm.to_string()))
            .and_then(|r| r.n_alpha.as_ref()?.first().copied().flatten())
    };
    let in_unit = rows
        .iter()
        .filter_map(|r| r.n_alpha.as_ref())
        .flatten()
        .flatten()
        .all(|a| (0.0..=1.0).contains(a));
    let acceptance_rates = json!({
        "n_alpha_in_unit_interval": in_unit,
        "msd_alpha_1": alpha1(MSD),
        "baseline_alpha_1": alpha1(BASELINE),
        "msd_exceeds_baseline": match (alpha1(MSD), alpha1(BASELINE)) {
            (Some(m), Some(b)) => Some(m > b),
            _ => None,
        },
    });

    let mut md = String::new();
    writeln!(md, "| arm | decode | T | examples | tau | tau (accepted only) | 1-a | 2-a | 3-a | 4-a |")?;
    writeln!(md, "|---|---|---|---|---|---|---|---|---|---|")?;
    for r in by_key.values() {
        let a = |n: usize| fmt_alpha(r.n_alpha.as_ref().and_then(|v| v.get(n).copied().flatten()));
        writeln!(
            md,
            "| {} | {} | {} | {} | {:.3} | {:.3} | {} | {} | {} | {} |",
            r.arm, r.decode, r.temperature, r.examples, r.tau, r.tau_accepted, a(0), a(1), a(2), a(3)
        )?;
    }
    writeln!(md)?;
    writeln!(md, "| table | comparison | decode | diff | 95% half-width | verdict |")?;
    writeln!(md, "|---|---|---|---|---|---|")?;
    for c in &comparisons {
        writeln!(
            md,
            "| {} | {} | {} | {:+.3} | {:.3} | {} |",
            c.table, c.name, c.decode, c.diff, c.half_width, c.verdict
        )?;
    }

    let config = json!({
        "runs": args.runs,
        "resamples": args.resamples,
    });
    let mut doc = header("report", seed, &config)?;
    doc["rows"] = serde_json::to_value(by_key.values().collect::<Vec<_>>())?;
    doc["comparisons"] = serde_json::to_value(&comparisons)?;
    doc["acceptance_rates"] = acceptance_rates;
    artifacts::write_json(&args.out.join("report.json"), &doc)?;

    let mut csv = artifacts::create(&args.out.join("report.csv"))?;
    artifacts::csv_preamble(&mut csv, &header("report", seed, &config)?)?;
    writeln!(csv, "{}", crate::commands::METRICS_CSV_HEADER)?;
    for r in by_key.values() {
        let a = |n: usize| {
            r.n_alpha
                .as_ref()
                .and_then(|v| v.get(n).copied().flatten())
                .map_or(String::new(), |v| v.to_string())
        };
        let tokens: usize = r.counts.iter().map(|c| c.tokens).sum();
        let cycles: usize = r.counts.iter().map(|c| c.cycles).sum();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.arm, r.decode, r.temperature, r.examples, r.tau, r.tau_accepted, a(0), a(1), a(2), a(3), cycles, tokens
        )?;
    }
    csv.flush()?;
    artifacts::write_file(&args.out.join("report.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}
