//! `guyu evaluate`: metric report over aligned hypothesis/reference files
//! (plain text, or a candidate-dump JSONL for the hypothesis side).

use std::path::Path;

use guyu_core::metrics::{evaluate_corpus, MetricReport};
use guyu_core::{Error, Result};

use crate::common::MetricUnit;
use crate::config::FileConfig;
use crate::EvaluateArgs;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

/// Rank-0 texts per sample, in sample order.
fn read_dump(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (lineno, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Corpus {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let rank = v.get("rank").and_then(|r| r.as_u64()).unwrap_or(0);
        if rank == 0 {
            let text = v
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::Corpus {
                    line: lineno + 1,
                    msg: "missing text".into(),
                })?;
            out.push(text.to_string());
        }
    }
    Ok(out)
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let hyps_raw = if args.hyp.extension().is_some_and(|e| e == "jsonl") {
        read_dump(&args.hyp)?
    } else {
        read_lines(&args.hyp)?
    };
    let refs_raw = read_lines(&args.reference)?;
    let unit =
        MetricUnit::parse(&file.resolve("metric-unit", &args.metric_unit, "word".to_string())?)?;

    let hyps: Vec<Vec<String>> = hyps_raw.iter().map(|t| unit.tokens(t)).collect();
    let refs: Vec<Vec<String>> = refs_raw.iter().map(|t| unit.tokens(t)).collect();
    let report = evaluate_corpus(&hyps, &refs)?;

    println!("{}", serde_json::to_string(&report)?);
    print_table(&report);
    if let Some(out) = file.resolve_path("out", &args.out) {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

/// Percent display for BLEU and Distinct columns, raw tokens for Length.
fn print_table(r: &MetricReport) {
    let pct = |v: f64| v * 100.0;
    println!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "BLEU",
        "B-1",
        "B-2",
        "B-3",
        "B-4",
        "MaDist-1",
        "MaDist-2",
        "MiDist-1",
        "MiDist-2",
        "Length"
    );
    println!(
        "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8.2}",
        pct(r.bleu),
        pct(r.b1),
        pct(r.b2),
        pct(r.b3),
        pct(r.b4),
        pct(r.madist1),
        pct(r.madist2),
        pct(r.midist1),
        pct(r.midist2),
        r.length
    );
}
