//! Plain-loop convolution used as the reference for the GEMM path.

use lfhn_core::layers::{conv1x1_forward, conv_forward, ConvParams};
use lfhn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// One image, `h x w x cin` against a `k x k x cin x cout` kernel.
fn naive(x: &[f64], (h, w, cin): (usize, usize, usize), kernel: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let kd = kernel.data();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = b[co];
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x[(iy as usize * w + ix as usize) * cin + ci] * kd[((dy * k + dx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    out
}

fn normwise(a: &[f64], reference: &[f64]) -> f64 {
    let diff = a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = reference.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 { diff } else { diff / scale }
}

/// Worst normwise relative error of `conv_forward` against the loop version
/// over `cases` random geometries up to 16x16x8.
pub fn general_conv_cases(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let k: usize = rng.random_range(1..=5);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..k.min(3));
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        if h + 2 * pad < k || w + 2 * pad < k || !(h + 2 * pad - k).is_multiple_of(stride) || !(w + 2 * pad - k).is_multiple_of(stride) {
            continue;
        }
        let (cin, cout) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random(&[1, h, w, cin], &mut rng);
        let kernel = random(&[k, k, cin, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        let want = naive(x.data(), (h, w, cin), &kernel, b.data(), stride, pad);
        let got = conv_forward(&x, &ConvParams::new(kernel, b, stride, pad).unwrap()).unwrap();
        worst = worst.max(normwise(got.data(), &want));
        done += 1;
    }
    worst
}

/// Worst normwise relative error of the 1x1 fast path against the general
/// path.
pub fn pointwise_cases(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (cin, cout) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random(&[rng.random_range(1..=2), h, w, cin], &mut rng);
        let p = ConvParams::new(random(&[1, 1, cin, cout], &mut rng), random(&[cout], &mut rng), 1, 0).unwrap();
        let fast = conv1x1_forward(&x, &p).unwrap();
        let general = conv_forward(&x, &p).unwrap();
        worst = worst.max(normwise(fast.data(), general.data()));
    }
    worst
}
