//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! `ACCEPTANCE_ONLY=1,3,8` restricts the run to the listed criteria.

use evbridge_autodiff::{primitive_suite, Graph, ParamStore, Tensor};
use evbridge_core::events::Event;
use evbridge_core::field::DEFAULT_LOG_EPS;
use evbridge_core::flow::{
    charbonnier_smoothness, neighbor_pair_count, CHARBONNIER_ALPHA, CHARBONNIER_EPS,
};
use evbridge_core::io::{
    read_events_csv, read_pfm, read_pgm, write_events_csv, write_pfm, write_pgm,
};
use evbridge_core::losses::{
    compose_losses, gradient_coverage_loss, schedule_next, LossParts, ScheduleState, Step,
};
use evbridge_core::scenes::{compare_model_with_oracle, OracleScene, SceneKind};
use evbridge_core::{
    augment_flow, count_events, log_intensity_change, log_transform, spatial_gradient,
    ContrastThreshold, EventHistogram, EventStream, ScalarField, VectorField,
};
use evbridge_uda::check::pipeline_grad_check;
use evbridge_uda::nets::Bind;
use evbridge_uda::pipeline::{augment_flow_graph, generator_step, smoothness_graph};
use evbridge_uda::{make_data, run, PipelineConfig, Trainer, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn oracle_equivalence() -> Outcome {
    let c = ContrastThreshold::default();
    let mut kink_max = 0;
    for kind in [SceneKind::Ramp, SceneKind::Step, SceneKind::Bar] {
        for u in GRID {
            for v in GRID {
                let r =
                    compare_model_with_oracle(&OracleScene::new(kind), (u, v), c, DEFAULT_LOG_EPS)
                        .map_err(e2s)?;
                ensure(r.smooth_discrepancy == 0, || {
                    format!(
                        "{kind} ({u},{v}): {} counts off away from discontinuities",
                        r.smooth_discrepancy
                    )
                })?;
                if kind == SceneKind::Ramp {
                    ensure(r.kink_pixels == 0, || "ramp has no discontinuities".into())?;
                }
                ensure(r.kink_discrepancy <= 1, || {
                    format!(
                        "{kind} ({u},{v}): {} counts off at a discontinuity",
                        r.kink_discrepancy
                    )
                })?;
                kink_max = kink_max.max(r.kink_discrepancy);
            }
        }
    }
    Ok(format!(
        "75 scene/motion pairs; ramp exact, edges off by at most {kink_max}"
    ))
}

fn events_for(
    img: &ScalarField,
    flow: &VectorField,
) -> Result<evbridge_core::SignedEventCount, String> {
    let grad = spatial_gradient(&log_transform(img, DEFAULT_LOG_EPS).map_err(e2s)?).map_err(e2s)?;
    Ok(count_events(
        &log_intensity_change(&grad, flow, 1.0).map_err(e2s)?,
        ContrastThreshold::default(),
    ))
}

fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..w * h).map(|_| rng.random_range(lo..hi)).collect()
}

fn generative_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, h) = (24, 20);
    let img = ScalarField::new(w, h, random_field(&mut rng, w, h, 0.05, 1.0)).map_err(e2s)?;
    let flow = VectorField::new(
        w,
        h,
        random_field(&mut rng, w, h, -3.0, 3.0),
        random_field(&mut rng, w, h, -3.0, 3.0),
    )
    .map_err(e2s)?;

    let flat = ScalarField::constant(w, h, 0.4);
    ensure(events_for(&flat, &flow)?.is_zero(), || {
        "constant image produced events".into()
    })?;
    ensure(
        events_for(&img, &VectorField::zeros(w, h))?.is_zero(),
        || "zero flow produced events".into(),
    )?;

    let grad =
        spatial_gradient(&log_transform(&img, DEFAULT_LOG_EPS).map_err(e2s)?).map_err(e2s)?;
    let perp = VectorField::new(
        w,
        h,
        grad.v().iter().map(|g| -g).collect(),
        grad.u().to_vec(),
    )
    .map_err(e2s)?;
    ensure(events_for(&img, &perp)?.is_zero(), || {
        "flow orthogonal to the gradient produced events".into()
    })?;

    let fwd = events_for(&img, &flow)?;
    let back = events_for(&img, &flow.scale(-1.0).map_err(e2s)?)?;
    ensure(!fwd.is_zero(), || "test flow produced no events".into())?;
    ensure(back == fwd.negated(), || {
        "negated flow did not flip every count".into()
    })?;
    let (hf, hb) = (
        EventHistogram::from_signed_count(&fwd),
        EventHistogram::from_signed_count(&back),
    );
    ensure(hf.pos() == hb.neg() && hf.neg() == hb.pos(), || {
        "polarity channels did not swap".into()
    })?;
    Ok(format!(
        "{} events flip polarity under negation",
        hf.total()
    ))
}

/// Ordered in-bounds 8-neighbour pairs counted by edge type: every
/// horizontal, vertical and diagonal adjacency appears twice.
fn pairs_closed_form(w: usize, h: usize) -> usize {
    2 * ((w - 1) * h + w * (h - 1) + 2 * (w - 1) * (h - 1))
}

fn loss_kernels() -> Outcome {
    for (w, h) in [(1, 1), (2, 1), (5, 3), (32, 32), (17, 40)] {
        let expect = CHARBONNIER_EPS * pairs_closed_form(w, h) as f64;
        ensure(neighbor_pair_count(w, h) == pairs_closed_form(w, h), || {
            format!("pair count {w}x{h}")
        })?;
        for value in [(0.0, 0.0), (3.5, -1.25)] {
            let f = VectorField::constant(w, h, value.0, value.1);
            let got = charbonnier_smoothness(&f, CHARBONNIER_ALPHA, CHARBONNIER_EPS);
            let rel = if expect == 0.0 {
                got.abs()
            } else {
                (got - expect).abs() / expect
            };
            ensure(rel <= 1e-12, || {
                format!("charbonnier {w}x{h}: {got} vs {expect}")
            })?;
        }
    }
    let g = Graph::new();
    let t = Tensor::new(&[2, 2, 6, 4], vec![0.75; 96]).map_err(e2s)?;
    let per_pair = g.item(smoothness_graph(&g, g.constant(t)).map_err(e2s)?);
    ensure(
        (per_pair - CHARBONNIER_EPS).abs() <= 1e-12 * CHARBONNIER_EPS,
        || format!("graph smoothness per pair {per_pair}"),
    )?;

    // coverage: only pixels with gradient above 0.7 count, each by
    // (0.7 - n) * g when the event density n is below 0.7
    let n = ScalarField::new(4, 1, vec![0.0, 0.2, 0.9, 0.5]).map_err(e2s)?;
    let gm = ScalarField::new(4, 1, vec![1.0, 0.75, 1.0, 0.7]).map_err(e2s)?;
    let got = gradient_coverage_loss(&n, &gm).map_err(e2s)?;
    let expect = 0.7 * 1.0 + (0.7 - 0.2) * 0.75;
    ensure(got == expect, || {
        format!("coverage case 1: {got} vs {expect}")
    })?;
    let covered = ScalarField::constant(4, 1, 0.7);
    ensure(
        gradient_coverage_loss(&covered, &gm).map_err(e2s)? == 0.0,
        || "coverage case 2".into(),
    )?;
    let flat = ScalarField::constant(4, 1, 0.69);
    ensure(
        gradient_coverage_loss(&ScalarField::zeros(4, 1), &flat).map_err(e2s)? == 0.0,
        || "coverage case 3".into(),
    )?;

    // dyadic parts make every summation order exact
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mut d = || rng.random_range(-64i32..64) as f64 / 8.0;
        let p = LossParts {
            lat_disc: d(),
            lat_gen: d(),
            recons_disc: d(),
            recons_gen: d(),
            cycle: d(),
            augm: d(),
            grad_coverage: d(),
            task: d(),
            smooth: d(),
        };
        let r = compose_losses(p).map_err(e2s)?;
        let gen =
            p.lat_gen + p.recons_gen + p.cycle + 2.0 * p.augm + p.grad_coverage + p.task + p.smooth;
        ensure(r.composite_gen == gen, || {
            format!("composite_gen {} vs {gen}", r.composite_gen)
        })?;
        ensure(r.composite_disc == p.lat_disc + p.recons_disc, || {
            "composite_disc".into()
        })?;
    }
    Ok("charbonnier on 5 grids, coverage hand cases, 200 composites exact".into())
}

fn autodiff() -> Outcome {
    let prims = primitive_suite(2024, 20, 1e-5).map_err(e2s)?;
    let worst = prims
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no primitives")?;
    ensure(worst.max_rel_error < 1e-3, || {
        format!("{} off by {:.3e}", worst.name, worst.max_rel_error)
    })?;
    let p = pipeline_grad_check(&PipelineConfig::default(), 20, 2024).map_err(e2s)?;
    for (name, r) in [
        ("generator", &p.generator),
        ("discriminator", &p.discriminator),
    ] {
        ensure(r.max_rel_error < 1e-3, || {
            format!("{name} off by {:.3e} at {:?}", r.max_rel_error, r.worst)
        })?;
    }
    Ok(format!(
        "{} primitives worst {:.1e} ({}); pipeline at 20 points: generator {:.1e}, discriminator {:.1e}, {} kink coordinates skipped",
        prims.len(),
        worst.max_rel_error,
        worst.name,
        p.generator.max_rel_error,
        p.discriminator.max_rel_error,
        p.generator.coords_skipped + p.discriminator.coords_skipped
    ))
}

fn checkpoint_bytes(cfg: &PipelineConfig) -> Result<Vec<u8>, String> {
    let (data, _) = make_data(cfg).map_err(e2s)?;
    let mut t = Trainer::new(cfg, &data).map_err(e2s)?;
    t.run(None).map_err(e2s)?;
    let mut buf = Vec::new();
    t.checkpoint()
        .map_err(e2s)?
        .write_checkpoint(&mut buf)
        .map_err(e2s)?;
    Ok(buf)
}

fn schedule_and_determinism() -> Outcome {
    let mut s = ScheduleState::default();
    for offset in [0, 1, 2, 3, 7, 50] {
        let mut s2 = s;
        for _ in 0..offset {
            schedule_next(&mut s2);
        }
        let (d0, g0) = (s2.disc_steps_taken, s2.gen_steps_taken);
        let steps: Vec<Step> = (0..300).map(|_| schedule_next(&mut s2)).collect();
        ensure(
            s2.disc_steps_taken - d0 == 200 && s2.gen_steps_taken - g0 == 100,
            || {
                format!(
                    "offset {offset}: {} D, {} G",
                    s2.disc_steps_taken - d0,
                    s2.gen_steps_taken - g0
                )
            },
        )?;
        ensure(s2.invariant_holds(), || "counter invariant broken".into())?;
        // the cycle position is fixed by the offset
        let first_gen = steps.iter().position(|s| *s == Step::Gen).unwrap();
        ensure(
            steps
                .iter()
                .enumerate()
                .all(|(i, s)| (*s == Step::Gen) == ((i + 3 - first_gen) % 3 == 0)),
            || format!("offset {offset}: pattern is not D,D,G"),
        )?;
    }
    let steps: Vec<Step> = (0..3).map(|_| schedule_next(&mut s)).collect();
    ensure(steps == [Step::Disc, Step::Disc, Step::Gen], || {
        "fresh schedule does not start D,D,G".into()
    })?;

    let cfg = PipelineConfig {
        train_scenes: 32,
        test_scenes: 8,
        batch_size: 4,
        iterations: 5,
        ..PipelineConfig::default()
    };
    let a = checkpoint_bytes(&cfg)?;
    let b = checkpoint_bytes(&cfg)?;
    ensure(a == b, || {
        "identical seeds gave different checkpoints".into()
    })?;
    let c = checkpoint_bytes(&PipelineConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    })?;
    ensure(a != c, || {
        "a different seed gave the same checkpoint".into()
    })?;
    Ok(format!(
        "300-step windows at 6 offsets; two 5-iteration runs identical ({} bytes)",
        a.len()
    ))
}

fn transfer() -> Outcome {
    let base = PipelineConfig::default();
    let (data, test) = make_data(&base).map_err(e2s)?;
    let mut acc = Vec::new();
    for v in [
        Variant::SourceOnly,
        Variant::Full,
        Variant::NoAugm,
        Variant::NoFlow,
    ] {
        let t0 = Instant::now();
        let out = run(&v.apply(&base), &data, &test, None).map_err(e2s)?;
        eprintln!(
            "  {:<12} accuracy {:.3}  ({:.0} s)",
            v.name(),
            out.metrics.accuracy,
            t0.elapsed().as_secs_f64()
        );
        acc.push(out.metrics.accuracy);
    }
    let (baseline, full, no_augm, no_flow) = (acc[0], acc[1], acc[2], acc[3]);
    let summary = format!(
        "baseline {baseline:.3}, full {full:.3}, w/o-augm {no_augm:.3}, w/o-flow {no_flow:.3}"
    );
    ensure(full >= 0.80, || format!("full below 0.80: {summary}"))?;
    ensure(full >= baseline + 0.20, || {
        format!("full less than baseline + 0.20: {summary}")
    })?;
    ensure(full >= no_augm && no_augm >= no_flow, || {
        format!("ordering full >= w/o-augm >= w/o-flow broken: {summary}")
    })?;
    Ok(summary)
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let comp = |r: &mut ChaCha8Rng| random_field(r, w, h, -5.0, 5.0);
        let flow = VectorField::new(w, h, comp(&mut rng), comp(&mut rng)).map_err(e2s)?;
        let dirs = VectorField::new(w, h, comp(&mut rng), comp(&mut rng)).map_err(e2s)?;
        let a = augment_flow(&flow, &dirs).map_err(e2s)?;
        for (m0, m1) in flow.magnitude().data().iter().zip(a.magnitude().data()) {
            worst = worst.max((m0 - m1).abs());
        }
        let unit: Vec<f64> = {
            let (u, v) = (dirs.u(), dirs.v());
            let m: Vec<f64> = u.iter().zip(v).map(|(a, b)| a.hypot(*b)).collect();
            u.iter()
                .zip(&m)
                .map(|(a, m)| a / m)
                .chain(v.iter().zip(&m).map(|(a, m)| a / m))
                .collect()
        };
        let g = Graph::new();
        let ft = Tensor::new(
            &[1, 2, h, w],
            flow.u().iter().chain(flow.v()).copied().collect(),
        )
        .map_err(e2s)?;
        let at = g.tensor(
            augment_flow_graph(
                &g,
                g.constant(ft),
                &Tensor::new(&[1, 2, h, w], unit).map_err(e2s)?,
            )
            .map_err(e2s)?,
        );
        for i in 0..w * h {
            let m = at.data()[i].hypot(at.data()[w * h + i]);
            worst = worst.max((m - flow.magnitude().data()[i]).abs());
        }
    }
    ensure(worst <= 1e-12, || {
        format!("magnitude changed by {worst:.3e}")
    })?;

    let cfg = PipelineConfig {
        image_size: 16,
        train_scenes: 16,
        test_scenes: 8,
        batch_size: 4,
        ..PipelineConfig::default()
    };
    let (data, _) = make_data(&cfg).map_err(e2s)?;
    let mut t = Trainer::new(&cfg, &data).map_err(e2s)?;
    let inputs = t.sample_inputs().map_err(e2s)?;
    let g = Graph::new();
    let terms = generator_step(
        &g,
        &cfg,
        Bind::trainable(&t.gen),
        Bind::frozen(&t.disc),
        &inputs,
    )
    .map_err(e2s)?;
    let augm = terms
        .augm
        .ok_or("augmentation branch inactive with split enabled")?;
    let z_ref = terms.z_ref.ok_or("no fixed content recorded")?;
    ensure(!g.requires_grad(z_ref), || {
        "fixed content is on the tape".into()
    })?;
    let grads = g.backward(augm).map_err(e2s)?;
    let leak = grads
        .get(z_ref)
        .map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    ensure(leak == 0.0, || {
        format!("gradient {leak} reached the fixed content")
    })?;
    let mut store = t.gen.clone();
    store.zero_grads();
    store.accumulate(&g, &grads).map_err(e2s)?;
    let motion = store
        .grad("e_attr.fc.w")
        .is_some_and(|d| d.iter().any(|v| *v != 0.0));
    ensure(motion, || {
        "augmentation loss does not reach the motion features".into()
    })?;
    Ok(format!(
        "50 random fields within {worst:.1e}; zero gradient into the fixed content"
    ))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let img = ScalarField::new(w, h, random_field(&mut rng, w, h, 0.0, 1.0)).map_err(e2s)?;
        let mut a = Vec::new();
        write_pgm(&mut a, &img).map_err(e2s)?;
        let mut b = Vec::new();
        write_pgm(&mut b, &read_pgm(a.as_slice()).map_err(e2s)?).map_err(e2s)?;
        ensure(a == b, || format!("PGM {w}x{h} differs"))?;

        let f = ScalarField::new(w, h, random_field(&mut rng, w, h, -1e3, 1e3)).map_err(e2s)?;
        let mut a = Vec::new();
        write_pfm(&mut a, &f).map_err(e2s)?;
        let mut b = Vec::new();
        write_pfm(&mut b, &read_pfm(a.as_slice()).map_err(e2s)?).map_err(e2s)?;
        ensure(a == b, || format!("PFM {w}x{h} differs"))?;

        let mut t = 0.0;
        let events: Vec<Event> = (0..rng.random_range(0..200))
            .map(|_| {
                t += rng.random_range(0.0..1e-3);
                Event {
                    t,
                    x: rng.random_range(0..w as u32),
                    y: rng.random_range(0..h as u32),
                    p: if rng.random_bool(0.5) { 1 } else { -1 },
                }
            })
            .collect();
        let s = EventStream::new(w, h, events).map_err(e2s)?;
        let mut a = Vec::new();
        write_events_csv(&mut a, &s).map_err(e2s)?;
        let back = read_events_csv(a.as_slice(), w, h).map_err(e2s)?;
        // timestamps are written with nanosecond resolution
        let same = back.events().len() == s.events().len()
            && back
                .events()
                .iter()
                .zip(s.events())
                .all(|(a, b)| (a.x, a.y, a.p) == (b.x, b.y, b.p) && (a.t - b.t).abs() <= 5e-10);
        ensure(same, || "CSV events changed".into())?;
        let mut b = Vec::new();
        write_events_csv(&mut b, &back).map_err(e2s)?;
        ensure(a == b, || "CSV differs".into())?;

        let mut store = ParamStore::new();
        for k in 0..rng.random_range(1..5) {
            let shape: Vec<usize> = (0..rng.random_range(0..4))
                .map(|_| rng.random_range(1..5))
                .collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random::<f64>() * 1e6 - 5e5).collect();
            store
                .insert(&format!("p{k}.w"), Tensor::new(&shape, data).map_err(e2s)?)
                .map_err(e2s)?;
        }
        let mut a = Vec::new();
        store.write_checkpoint(&mut a).map_err(e2s)?;
        let mut b = Vec::new();
        ParamStore::read_checkpoint(a.as_slice())
            .map_err(e2s)?
            .write_checkpoint(&mut b)
            .map_err(e2s)?;
        ensure(a == b, || "checkpoint differs".into())?;
    }
    let cfg = PipelineConfig {
        seed: rng.random(),
        contrast: rng.random_range(0.05..0.5),
        ..PipelineConfig::default()
    };
    let json = cfg.to_json();
    ensure(
        PipelineConfig::from_json(&json).map_err(e2s)?.to_json() == json,
        || "config JSON differs".into(),
    )?;
    Ok("50 random instances each of PGM, PFM, CSV and checkpoint, plus config JSON".into())
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 8] = [
        (
            1,
            "oracle equivalence",
            Duration::from_secs(5),
            oracle_equivalence,
        ),
        (
            2,
            "generative-model identities",
            Duration::from_secs(1),
            generative_identities,
        ),
        (
            3,
            "loss-kernel exactness",
            Duration::from_secs(60),
            loss_kernels,
        ),
        (4, "autodiff correctness", Duration::from_secs(60), autodiff),
        (
            5,
            "schedule and determinism",
            Duration::from_secs(300),
            schedule_and_determinism,
        ),
        (6, "toy transfer", Duration::from_secs(15 * 60), transfer),
        (
            7,
            "augmentation invariants",
            Duration::from_secs(60),
            augmentation,
        ),
        (
            8,
            "format round trips",
            Duration::from_secs(60),
            round_trips,
        ),
    ];
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let mut outcome = f();
        let dt = t0.elapsed();
        if outcome.is_ok() && dt > budget {
            outcome = Err(format!(
                "took {:.1} s, budget {:.0} s",
                dt.as_secs_f64(),
                budget.as_secs_f64()
            ));
        }
        match outcome {
            Ok(detail) => println!(
                "PASS criterion {n}: {name} [{:.2} s] {detail}",
                dt.as_secs_f64()
            ),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n}: {name} [{:.2} s] {e}", dt.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
