//! The im2col/GEMM convolution against a direct six-loop evaluation.

use evbridge_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let [b, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let pad = (k / 2) as isize;
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], out).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let b = rng.random_range(1..=2);
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let x = random(&mut rng, &[b, ci, h, w]);
        let kern = random(&mut rng, &[co, ci, k, k]);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(kern.clone());
        let got = g.tensor(g.conv2d(xv, wv, stride).unwrap());
        let want = naive_conv(&x, &kern, stride);
        assert_eq!(got.shape(), want.shape(), "trial {trial}");
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12, "trial {trial}: {a} vs {e}");
        }
    }
}

#[test]
fn identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 1, 5, 6]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let g = Graph::new();
    let y = g
        .conv2d(
            g.constant(x.clone()),
            g.constant(Tensor::new(&[1, 1, 3, 3], k).unwrap()),
            1,
        )
        .unwrap();
    assert_eq!(g.tensor(y), x);
}

#[test]
fn mismatched_channels_fail_at_record_time() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, w, 1).is_err());
    let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, even, 1).is_err());
}
