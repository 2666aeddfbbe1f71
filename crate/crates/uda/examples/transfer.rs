//! Runs the transfer study variants named on the command line (default:
//! all) and prints their held-out event accuracy.
//!
//! cargo run --release -p evbridge-uda --example transfer -- full w/o-flow

use evbridge_uda::{make_data, run, PipelineConfig, Variant};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let all = [
        Variant::SourceOnly,
        Variant::Full,
        Variant::NoAugm,
        Variant::NoFlow,
        Variant::NoSplit,
    ];
    let mut base = PipelineConfig::default();
    let mut chosen = Vec::new();
    for arg in std::env::args().skip(1) {
        if let Some(n) = arg.strip_prefix("iterations=") {
            base.iterations = n.parse()?;
        } else if let Some(n) = arg.strip_prefix("seed=") {
            base.seed = n.parse()?;
        } else {
            chosen.push(
                all.into_iter()
                    .find(|v| v.name() == arg)
                    .ok_or(format!("unknown variant {arg}"))?,
            );
        }
    }
    if chosen.is_empty() {
        chosen = all.to_vec();
    }
    let t0 = Instant::now();
    let (data, test) = make_data(&base)?;
    println!("data: {:.1}s", t0.elapsed().as_secs_f64());
    for v in chosen {
        let t = Instant::now();
        let out = run(&v.apply(&base), &data, &test, None)?;
        let last = out
            .trained
            .reports
            .last()
            .map(|r| serde_json::to_string(r).unwrap())
            .unwrap_or_default();
        println!(
            "{:<12} events {:.3}  images {:.3}  {:.1}s\n  last {last}",
            v.name(),
            out.metrics.accuracy,
            out.metrics.image_accuracy,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
