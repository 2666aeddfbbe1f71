//! Linearized event model against the two-frame simulator.

use evbridge_core::field::DEFAULT_LOG_EPS;
use evbridge_core::scenes::{compare_model_with_oracle, OracleScene, SceneKind};
use evbridge_core::{
    initial_event_guess, spatial_gradient, two_frame_oracle, ContrastThreshold, ScalarField,
    VectorField,
};

const GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[test]
fn ramp_matches_exactly_for_every_motion() {
    for c in [0.1, 0.2, 0.35] {
        let c = ContrastThreshold::new(c).unwrap();
        for u in GRID {
            for v in GRID {
                let cmp = compare_model_with_oracle(
                    &OracleScene::new(SceneKind::Ramp),
                    (u, v),
                    c,
                    DEFAULT_LOG_EPS,
                )
                .unwrap();
                assert_eq!(cmp.smooth_discrepancy, 0, "C={c:?} motion=({u},{v})");
                assert_eq!(cmp.kink_pixels, 0);
            }
        }
    }
}

#[test]
fn edges_disagree_by_at_most_one_count() {
    let c = ContrastThreshold::default();
    for kind in [SceneKind::Step, SceneKind::Bar] {
        let mut kink_seen = false;
        for u in GRID {
            for v in GRID {
                let cmp =
                    compare_model_with_oracle(&OracleScene::new(kind), (u, v), c, DEFAULT_LOG_EPS)
                        .unwrap();
                assert!(
                    cmp.passes(),
                    "{kind} ({u},{v}): smooth {} kink {}",
                    cmp.smooth_discrepancy,
                    cmp.kink_discrepancy
                );
                kink_seen |= cmp.kink_pixels > 0;
                if (u, v) == (1.0, 0.0) {
                    assert!(!cmp.oracle.is_zero(), "{kind} ({u},{v}) produced no events");
                }
            }
        }
        assert!(kink_seen);
    }
}

#[test]
fn pseudo_flow_guess_is_confined_to_the_edge() {
    // vertical step edge moving right by one pixel
    let eps = DEFAULT_LOG_EPS;
    let c = ContrastThreshold::default();
    let scene = OracleScene::new(SceneKind::Step);
    let img0 = scene.render((0.0, 0.0), eps);
    let img1 = scene.render((1.0, 0.0), eps);
    let oracle = two_frame_oracle(&img0, &img1, c, eps, 1.0)
        .unwrap()
        .signed_counts();

    // pseudo-flow absorbs -dt / C
    let pflow = VectorField::constant(16, 16, -1.0 / c.pos(), 0.0);
    let guess = initial_event_guess(&img0, &pflow, eps).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let i = y * 16 + x;
            let fired = guess.pos()[i] + guess.neg()[i] > 0.0;
            let oracle_fired = oracle.get(x, y) != 0;
            if oracle_fired {
                assert!(fired, "oracle fired at ({x},{y}) but guess is empty");
            }
            if fired {
                assert!(
                    (5..=11).contains(&x),
                    "guess leaks outside the edge band at ({x},{y})"
                );
            }
        }
    }
    // both see the image brighten as the rising edge moves right... or darken
    let net: f64 = guess.net().sum();
    let oracle_net: i64 = oracle.counts().iter().sum();
    assert_eq!(net.signum() as i64, oracle_net.signum());
}

#[test]
fn constant_image_and_still_scene_are_silent() {
    let eps = DEFAULT_LOG_EPS;
    let c = ContrastThreshold::default();
    let flat = ScalarField::constant(12, 12, 0.3);
    let grad = spatial_gradient(&evbridge_core::log_transform(&flat, eps).unwrap()).unwrap();
    assert!(grad.magnitude().max() == 0.0);
    assert!(two_frame_oracle(&flat, &flat, c, eps, 1.0)
        .unwrap()
        .is_empty());
}
