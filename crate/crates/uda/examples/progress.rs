//! Trains one variant and prints held-out event accuracy every `every`
//! generator steps.
//!
//! cargo run --release -p evbridge-uda --example progress -- full 1200 100 [seed] [json]
//!
//! The optional JSON object overrides config fields.

use evbridge_uda::eval::evaluate;
use evbridge_uda::{make_data, PipelineConfig, Trainer, Variant};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let all = [
        Variant::SourceOnly,
        Variant::Full,
        Variant::NoAugm,
        Variant::NoFlow,
        Variant::NoSplit,
    ];
    let name = args.first().map(String::as_str).unwrap_or("full");
    let variant = all
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or(format!("unknown variant {name}"))?;
    let total: u64 = args.get(1).map_or(Ok(1000), |s| s.parse())?;
    let every: u64 = args.get(2).map_or(Ok(100), |s| s.parse())?;
    let mut cfg = variant.apply(&PipelineConfig::default());
    if let Some(seed) = args.get(3) {
        cfg.seed = seed.parse()?;
    }
    if let Some(extra) = args.get(4) {
        let mut v = serde_json::to_value(&cfg)?;
        let extra: serde_json::Value = serde_json::from_str(extra)?;
        for (k, x) in extra.as_object().ok_or("overrides must be an object")? {
            v[k] = x.clone();
        }
        cfg = PipelineConfig::from_json(&v.to_string())?;
    }
    cfg.iterations = total;
    let (data, test) = make_data(&cfg)?;
    let mut t = Trainer::new(&cfg, &data)?;
    let t0 = Instant::now();
    let mut done = 0;
    while done < total {
        done = (done + every).min(total);
        t.run_until(done, None)?;
        println!(
            "{done:>6}  acc {:.3}  {:.0}s",
            evaluate(&cfg, &t.gen, &test)?,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
