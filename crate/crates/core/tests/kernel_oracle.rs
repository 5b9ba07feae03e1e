//! Naive loop implementations of the convolution kernels, used as oracles
//! for the im2col + GEMM implementations.

use dclstm::kernels::{conv2d, conv3d, deformable_conv2d, Conv2DParams, Conv2dGeometry, Conv3dGeometry, OffsetField};
use dclstm::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(t: &Tensor<f64>, idx: &[usize]) -> f64 {
    t.get(idx).unwrap()
}

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Zero outside the image.
fn pixel(x: &Tensor<f64>, y: i64, xx: i64, c: usize) -> f64 {
    let d = x.dims();
    if y < 0 || xx < 0 || y >= d[0] as i64 || xx >= d[1] as i64 {
        0.0
    } else {
        at(x, &[y as usize, xx as usize, c])
    }
}

fn bilinear(x: &Tensor<f64>, py: f64, px: f64, c: usize) -> f64 {
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    (1.0 - fy) * (1.0 - fx) * pixel(x, y0, x0, c)
        + (1.0 - fy) * fx * pixel(x, y0, x0 + 1, c)
        + fy * (1.0 - fx) * pixel(x, y0 + 1, x0, c)
        + fy * fx * pixel(x, y0 + 1, x0 + 1, c)
}

fn naive_deformable(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    off: &Tensor<f64>,
    g: Conv2dGeometry,
) -> Tensor<f64> {
    let [h, wd, cin] = *x.dims() else { unreachable!() };
    let [kh, kw, _, cout] = *w.dims() else { unreachable!() };
    let (ho, wo) = (out_extent(h, kh, g.stride.0, g.padding.0), out_extent(wd, kw, g.stride.1, g.padding.1));
    let mut out = Vec::with_capacity(ho * wo * cout);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = at(b, &[co]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = 2 * (ky * kw + kx);
                        let py = (oy * g.stride.0 + ky) as f64 - g.padding.0 as f64 + at(off, &[oy, ox, tap]);
                        let px = (ox * g.stride.1 + kx) as f64 - g.padding.1 as f64 + at(off, &[oy, ox, tap + 1]);
                        for ci in 0..cin {
                            acc += at(w, &[ky, kx, ci, co]) * bilinear(x, py, px, ci);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_vec(&[ho, wo, cout], out).unwrap()
}

fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: Conv3dGeometry) -> Tensor<f64> {
    let [t, h, wd, cin] = *x.dims() else { unreachable!() };
    let [kt, kh, kw, _, cout] = *w.dims() else { unreachable!() };
    let to = out_extent(t, kt, g.stride.0, g.padding.0);
    let ho = out_extent(h, kh, g.stride.1, g.padding.1);
    let wo = out_extent(wd, kw, g.stride.2, g.padding.2);
    let mut out = Vec::with_capacity(to * ho * wo * cout);
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = at(b, &[co]);
                    for dt in 0..kt {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let it = (ot * g.stride.0 + dt) as i64 - g.padding.0 as i64;
                                let iy = (oy * g.stride.1 + ky) as i64 - g.padding.1 as i64;
                                let ix = (ox * g.stride.2 + kx) as i64 - g.padding.2 as i64;
                                if it < 0 || iy < 0 || ix < 0 || it >= t as i64 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += at(w, &[dt, ky, kx, ci, co])
                                        * at(x, &[it as usize, iy as usize, ix as usize, ci]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(&[to, ho, wo, cout], out).unwrap()
}

fn tensor(dims: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = dims.iter().product();
    proptest::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(&dims, v).unwrap())
}

/// Extent, kernel, stride and padding along one axis with an integral
/// output extent.
fn axis() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=7, prop::sample::select(vec![1usize, 3, 5]), 1usize..=2, any::<bool>()).prop_filter_map(
        "non-integral extent",
        |(n, k, s, same)| {
            let p = if same || k > n { k / 2 } else { 0 };
            (n + 2 * p >= k && (n + 2 * p - k) % s == 0).then_some((n, k, s, p))
        },
    )
}

fn conv2d_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>, Conv2dGeometry)> {
    (axis(), axis(), 1usize..=3, 1usize..=3).prop_flat_map(|((h, kh, sy, py), (w, kw, sx, px), cin, cout)| {
        let g = Conv2dGeometry { stride: (sy, sx), padding: (py, px) };
        (
            tensor(vec![h, w, cin], -1.0, 1.0),
            tensor(vec![kh, kw, cin, cout], -1.0, 1.0),
            tensor(vec![cout], -1.0, 1.0),
            Just(g),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_loops((x, w, b, g) in conv2d_case()) {
        let [kh, kw, ..] = *w.dims() else { unreachable!() };
        let (ho, wo) = (out_extent(x.dims()[0], kh, g.stride.0, g.padding.0), out_extent(x.dims()[1], kw, g.stride.1, g.padding.1));
        let offsets = Tensor::zeros(&[ho, wo, 2 * kh * kw]).unwrap();
        let expected = naive_deformable(&x, &w, &b, &offsets, g);
        let got = conv2d(&x, &w, Some(&b), g).unwrap();
        prop_assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn deformable_matches_loops((x, w, b, g) in conv2d_case(), seed in any::<u64>()) {
        let [kh, kw, ..] = *w.dims() else { unreachable!() };
        let (ho, wo) = (out_extent(x.dims()[0], kh, g.stride.0, g.padding.0), out_extent(x.dims()[1], kw, g.stride.1, g.padding.1));
        // Offsets up to ±3 px reach well outside small images.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = Tensor::from_fn(&[ho, wo, 2 * kh * kw], |_| rng.gen_range(-3.0..3.0)).unwrap();
        let expected = naive_deformable(&x, &w, &b, &offsets, g);
        let params = Conv2DParams::new(w, Some(b), g).unwrap();
        let field = OffsetField::new(offsets, kh, kw).unwrap();
        let got = deformable_conv2d(&x, &params, &field).unwrap();
        prop_assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn conv3d_matches_loops(
        (t, kt, st, pt) in axis(),
        (x2, w2, b, g2) in conv2d_case(),
        seed in any::<u64>(),
    ) {
        let [h, wd, cin] = *x2.dims() else { unreachable!() };
        let [kh, kw, _, cout] = *w2.dims() else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.gen_range(-1.0..1.0);
        let x = Tensor::from_fn(&[t, h, wd, cin], |_| next()).unwrap();
        let w = Tensor::from_fn(&[kt, kh, kw, cin, cout], |_| next()).unwrap();
        let g = Conv3dGeometry {
            stride: (st, g2.stride.0, g2.stride.1),
            padding: (pt, g2.padding.0, g2.padding.1),
        };
        let expected = naive_conv3d(&x, &w, &b, g);
        let got = conv3d(&x, &w, Some(&b), g).unwrap();
        prop_assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    }
}
