//! Convolution equivalence checks shared by the layer tests and the
//! acceptance run. Each returns the worst absolute error it saw.

use msafeb_core::layers::conv::{ConvSpec, Padding};
use msafeb_core::{Tape, Tensor};

use super::{conv_oracle, max_abs_diff, rng};

pub fn run_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, spec, wv, bv).unwrap();
    tape.value(y).clone()
}

pub fn random_conv(spec: &ConvSpec, n: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor, Option<Tensor>) {
    let mut r = rng(seed);
    let x = Tensor::randn(&[n, spec.in_channels, h, w], 1.0, &mut r);
    // Unit-variance outputs, as with a properly initialized layer.
    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
    let wt = Tensor::randn(&spec.weight_dims(), 1.0 / (fan_in as f32).sqrt(), &mut r);
    let b = spec.bias.then(|| Tensor::randn(&[spec.out_channels], 0.5, &mut r));
    (x, wt, b)
}

fn diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max)
}

/// Kernels {1,3,5} × dilations {1,2,4} × groups {1,2,8} × both paddings ×
/// strides {1,2} against the nested-loop oracle.
pub fn oracle_grid() -> f64 {
    let mut case = 0;
    let mut worst = 0.0f64;
    for k in [1usize, 3, 5] {
        for d in [1usize, 2, 4] {
            for g in [1usize, 2, 8] {
                for padding in [Padding::SameZero, Padding::Valid] {
                    for stride in [1usize, 2] {
                        let spec = ConvSpec::new(8, 16, k)
                            .dilation(d)
                            .groups(g)
                            .stride(stride)
                            .padding(padding)
                            .bias(case % 2 == 0);
                        let side = (k - 1) * d + 3;
                        let (x, w, b) = random_conv(&spec, 2, side, side + 1, case);
                        let y = run_conv(&x, &w, b.as_ref(), &spec);
                        let (dims, want) = conv_oracle(&x, &w, b.as_ref(), &spec);
                        assert_eq!(y.dims(), dims.as_slice(), "k{k} d{d} g{g} {padding:?} s{stride}");
                        worst = worst.max(max_abs_diff(y.data(), &want));
                        case += 1;
                    }
                }
            }
        }
    }
    worst
}

pub fn grouped_vs_block_diagonal() -> f64 {
    let mut worst = 0.0f64;
    for (cin, cout, g, k) in [(8, 16, 8, 3), (4, 6, 2, 5), (6, 6, 3, 1)] {
        let spec = ConvSpec::new(cin, cout, k).groups(g).bias(false);
        let (x, w, _) = random_conv(&spec, 2, 6, 6, 7);
        let (cin_g, cout_g) = (cin / g, cout / g);
        let mut full = vec![0.0f32; cout * cin * k * k];
        for co in 0..cout {
            let grp = co / cout_g;
            for cl in 0..cin_g {
                for t in 0..k * k {
                    full[(co * cin + grp * cin_g + cl) * k * k + t] = w.data()[(co * cin_g + cl) * k * k + t];
                }
            }
        }
        let dense = ConvSpec::new(cin, cout, k).bias(false);
        let full = Tensor::new(&dense.weight_dims(), full).unwrap();
        worst = worst.max(diff(&run_conv(&x, &w, None, &spec), &run_conv(&x, &full, None, &dense)));
    }
    worst
}

pub fn dilated_vs_inflated() -> f64 {
    let mut worst = 0.0f64;
    for (k, d) in [(3usize, 2usize), (3, 4), (5, 2), (3, 3)] {
        let spec = ConvSpec::new(3, 4, k).dilation(d).bias(false);
        let (x, w, _) = random_conv(&spec, 1, 9, 8, 8);
        let kk = (k - 1) * d + 1;
        let mut inflated = vec![0.0f32; 4 * 3 * kk * kk];
        for oc in 0..4 {
            for ic in 0..3 {
                for kh in 0..k {
                    for kw in 0..k {
                        inflated[((oc * 3 + ic) * kk + kh * d) * kk + kw * d] = w.data()[((oc * 3 + ic) * k + kh) * k + kw];
                    }
                }
            }
        }
        let plain = ConvSpec::new(3, 4, kk).bias(false);
        let inflated = Tensor::new(&plain.weight_dims(), inflated).unwrap();
        worst = worst.max(diff(&run_conv(&x, &w, None, &spec), &run_conv(&x, &inflated, None, &plain)));
    }
    worst
}
