use evbridge_autodiff::{Graph, ParamStore};
use evbridge_core::losses::LossReport;
use evbridge_uda::data::ToyScene;
use evbridge_uda::nets::{init_generator, Bind};
use evbridge_uda::pipeline::generator_step;
use evbridge_uda::{
    evaluate, make_data, make_dataset, make_event_test_set, Error, PipelineConfig, Trainer, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn small() -> PipelineConfig {
    PipelineConfig {
        image_size: 16,
        train_scenes: 16,
        test_scenes: 8,
        batch_size: 4,
        iterations: 2,
        ..PipelineConfig::default()
    }
}

#[test]
fn one_step_logs_one_report_with_every_term() {
    let cfg = PipelineConfig {
        iterations: 1,
        ..small()
    };
    let (data, _) = make_data(&cfg).unwrap();
    let mut log = Vec::new();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.run(Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let parts = v.as_object().expect("report object");
    for name in [
        "lat_disc",
        "lat_gen",
        "recons_disc",
        "recons_gen",
        "cycle",
        "augm",
        "grad_coverage",
        "task",
        "smooth",
    ] {
        assert!(parts[name].as_f64().unwrap().is_finite(), "{name}");
    }
    let r: LossReport = serde_json::from_str(lines[0]).unwrap();
    r.check_weighting().unwrap();
    assert_eq!(
        (t.schedule.disc_steps_taken, t.schedule.gen_steps_taken),
        (2, 1)
    );
}

#[test]
fn training_never_sees_paired_scenes() {
    let cfg = small();
    let (data, test) = make_data(&cfg).unwrap();
    let imgs: HashSet<u64> = data.image_scene_ids.iter().copied().collect();
    let evts: HashSet<u64> = data.event_scene_ids.iter().copied().collect();
    let tests: HashSet<u64> = test.scene_ids.iter().copied().collect();
    assert!(imgs.is_disjoint(&evts));
    assert!(imgs.is_disjoint(&tests));
    assert!(evts.is_disjoint(&tests));
}

#[test]
fn datasets_are_deterministic_and_balanced() {
    let cfg = small();
    let a = make_dataset(&cfg, 16).unwrap();
    let b = make_dataset(&cfg, 16).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.events, b.events);
    for k in 0..cfg.num_classes {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 4);
    }
    let t = make_event_test_set(&cfg, 8).unwrap();
    assert_eq!(t.labels.len(), 8);
    let s = ToyScene::generate(&cfg, 3);
    assert_eq!(s, ToyScene::generate(&cfg, 3));
    assert_eq!(s.label, 3 % cfg.num_classes);
}

fn checkpoint_bytes(cfg: &PipelineConfig) -> Vec<u8> {
    let (data, _) = make_data(cfg).unwrap();
    let mut t = Trainer::new(cfg, &data).unwrap();
    t.run(None).unwrap();
    let mut buf = Vec::new();
    t.checkpoint().unwrap().write_checkpoint(&mut buf).unwrap();
    buf
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let cfg = small();
    let a = checkpoint_bytes(&cfg);
    assert_eq!(a, checkpoint_bytes(&cfg));
    let other = PipelineConfig {
        seed: cfg.seed + 1,
        ..cfg
    };
    assert_ne!(a, checkpoint_bytes(&other));
}

#[test]
fn augmentation_loss_sends_no_gradient_into_the_fixed_content() {
    let cfg = small();
    let (data, _) = make_data(&cfg).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let inputs = t.sample_inputs().unwrap();
    let g = Graph::new();
    let terms = generator_step(
        &g,
        &cfg,
        Bind::trainable(&t.gen),
        Bind::frozen(&t.disc),
        &inputs,
    )
    .unwrap();
    let grads = g
        .backward(terms.augm.expect("augmentation active"))
        .unwrap();
    let z_ref = terms.z_ref.unwrap();
    assert!(!g.requires_grad(z_ref));
    assert!(grads
        .get(z_ref)
        .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    // the branch still trains the motion path
    let z_img = terms.translation.unwrap().z_img;
    assert!(grads.get(z_img).is_some());
}

#[test]
fn disabled_branches_drop_their_terms() {
    let cfg = small();
    let (data, _) = make_data(&cfg).unwrap();
    for variant in [Variant::NoAugm, Variant::NoFlow, Variant::NoSplit] {
        let c = variant.apply(&cfg);
        let mut t = Trainer::new(&c, &data).unwrap();
        let inputs = t.sample_inputs().unwrap();
        let g = Graph::new();
        let terms = generator_step(
            &g,
            &c,
            Bind::trainable(&t.gen),
            Bind::frozen(&t.disc),
            &inputs,
        )
        .unwrap();
        assert!(terms.augm.is_none(), "{}", variant.name());
        assert_eq!(terms.smooth.is_some(), c.flow_module_enabled);
    }
    let c = Variant::SourceOnly.apply(&cfg);
    let mut t = Trainer::new(&c, &data).unwrap();
    t.run(None).unwrap();
    let r = &t.reports[0];
    assert_eq!(r.parts.lat_gen, 0.0);
    assert_eq!(r.parts.cycle, 0.0);
    assert!(r.parts.task > 0.0);
}

#[test]
fn untrained_head_is_near_chance() {
    let cfg = PipelineConfig {
        test_scenes: 200,
        ..small()
    };
    let test = make_event_test_set(&cfg, cfg.test_scenes).unwrap();
    let mut mean = 0.0;
    for seed in 0..10 {
        let gen: ParamStore = init_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        mean += evaluate(&cfg, &gen, &test).unwrap() / 10.0;
    }
    assert!((mean - 0.25).abs() <= 0.1, "mean accuracy {mean}");
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let (data, _) = make_data(&small()).unwrap();
    let bad = PipelineConfig {
        batch_size: 0,
        ..small()
    };
    assert!(matches!(Trainer::new(&bad, &data), Err(Error::Config(_))));
}
