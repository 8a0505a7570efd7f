//! Tape gradients against central finite differences, and kernels against
//! naive loop definitions.

use crnp::tensor::{Rng, Tape, Tensor, Var};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

/// Builds a scalar from leaves `xs`. Non-scalar outputs are contracted with
/// a fixed random weight so every output element gets a distinct adjoint.
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn contract(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = Rng::new(seed ^ 0xabcdef);
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.scalar(out).unwrap()
}

/// Norm-wise relative error between tape and finite-difference gradients.
fn grad_check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(&plus, build) - eval(&minus, build)) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    worst
}

fn check_op(name: &str, shapes: &[&[usize]], build: &Build) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let err = grad_check(inputs, build);
        assert!(err < REL_TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn elementwise_gradients() {
    check_op("add", &[&[2, 3], &[2, 3]], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        contract(t, y, 1)
    });
    check_op("sub", &[&[2, 3], &[2, 3]], &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        contract(t, y, 2)
    });
    check_op("mul", &[&[4], &[4]], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        contract(t, y, 3)
    });
    check_op("div", &[&[4], &[4]], &|t, v| {
        // keep the denominator away from zero
        let d = t.square(v[1]);
        let d = t.add_scalar(d, 1.0);
        let y = t.div(v[0], d).unwrap();
        contract(t, y, 4)
    });
    check_op("scale+add_scalar", &[&[5]], &|t, v| {
        let y = t.scale(v[0], -1.7);
        let y = t.add_scalar(y, 0.3);
        contract(t, y, 5)
    });
    check_op("square", &[&[6]], &|t, v| {
        let y = t.square(v[0]);
        contract(t, y, 6)
    });
    check_op("leaky_relu", &[&[3, 4]], &|t, v| {
        let y = t.leaky_relu(v[0], 0.25);
        contract(t, y, 7)
    });
    check_op("add_bias", &[&[2, 3, 4], &[3]], &|t, v| {
        let y = t.add_bias(v[0], v[1], 1).unwrap();
        contract(t, y, 8)
    });
}

#[test]
fn linear_algebra_gradients() {
    check_op("matmul", &[&[3, 4], &[4, 2]], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        contract(t, y, 9)
    });
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 2]], &|t, v| {
        let y = t.bmm(v[0], v[1]).unwrap();
        contract(t, y, 10)
    });
    check_op("transpose", &[&[2, 3, 4]], &|t, v| {
        let y = t.transpose(v[0]).unwrap();
        contract(t, y, 11)
    });
}

#[test]
fn reduction_and_layout_gradients() {
    check_op("softmax axis 1", &[&[3, 4]], &|t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        contract(t, y, 12)
    });
    check_op("softmax axis 0", &[&[3, 4]], &|t, v| {
        let y = t.softmax(v[0], 0).unwrap();
        contract(t, y, 13)
    });
    check_op("cross entropy", &[&[5, 3]], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0]).unwrap()
    });
    check_op("sum", &[&[2, 2]], &|t, v| t.sum(v[0]));
    check_op("mean", &[&[2, 3]], &|t, v| {
        let y = t.square(v[0]);
        t.mean(y)
    });
    check_op("sum_axis", &[&[2, 3, 4]], &|t, v| {
        let y = t.sum_axis(v[0], 1).unwrap();
        contract(t, y, 14)
    });
    check_op("reshape", &[&[2, 6]], &|t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        contract(t, y, 15)
    });
    check_op("permute", &[&[2, 3, 4]], &|t, v| {
        let y = t.permute(v[0], &[2, 0, 1]).unwrap();
        contract(t, y, 16)
    });
    check_op("concat", &[&[2, 3], &[2, 1]], &|t, v| {
        let y = t.concat(&[v[0], v[1]], 1).unwrap();
        contract(t, y, 17)
    });
    check_op("slice", &[&[2, 5, 2]], &|t, v| {
        let y = t.slice(v[0], 1, 1, 3).unwrap();
        contract(t, y, 18)
    });
}

#[test]
fn convolution_gradients() {
    check_op("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1, 1).unwrap();
        contract(t, y, 19)
    });
    check_op("conv2d strided", &[&[1, 2, 6, 6], &[2, 2, 3, 3]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1, 1).unwrap();
        contract(t, y, 20)
    });
    check_op("conv2d depthwise", &[&[1, 3, 5, 5], &[3, 1, 3, 3]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1, 3).unwrap();
        contract(t, y, 21)
    });
    check_op("upsample", &[&[1, 2, 2, 3]], &|t, v| {
        let y = t.upsample_nearest(v[0], 2).unwrap();
        contract(t, y, 22)
    });
}

#[test]
fn two_layer_network_gradient() {
    check_op("mlp", &[&[4, 3], &[3, 5], &[5], &[5, 2], &[2]], &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_bias(h, v[2], 1).unwrap();
        let h = t.leaky_relu(h, 0.25);
        let o = t.matmul(h, v[3]).unwrap();
        let o = t.add_bias(o, v[4], 1).unwrap();
        t.softmax_cross_entropy(o, &[0, 1, 1, 0]).unwrap()
    });
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    // repeated calls accumulate
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    tape.zero_grad();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(crnp::Error::Usage(_))));
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![4.0, -4.0, 0.0]).with_requires_grad(true));
    let y = tape.leaky_relu(x, 0.25);
    assert_eq!(tape.data(y), &[4.0, -1.0, 0.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.25, 0.25]);
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.data()[i * k + kk] * b.data()[kk * c + j];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_examples_and_oracle() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);

    let mut rng = Rng::new(5);
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let any = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
    let y = tape.matmul(z, any).unwrap();
    assert_eq!(tape.data(y), &[0.0; 4]);

    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let expect = naive_matmul(&a, &b);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let y = tape.matmul(va, vb).unwrap();
        let got: Vec<u64> = tape.data(y).iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = expect.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want, "seed {seed}");
    }

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

/// Sextuple-loop convolution, padding taps skipped.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for icg in 0..cpg {
                        let ic = (oc / opg) * cpg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cpg + icg) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_examples_and_oracle() {
    let mut rng = Rng::new(3);
    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(vx, k, 1, 0, 1).unwrap();
    assert_eq!(tape.data(y), x.data());

    let z = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let k = tape.constant(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng));
    let y = tape.conv2d(z, k, 1, 1, 1).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));

    let cases: &[(&[usize], &[usize], usize, usize, usize)] = &[
        (&[1, 3, 5, 5], &[3, 1, 3, 3], 1, 0, 3),
        (&[1, 3, 5, 5], &[3, 1, 3, 3], 1, 1, 3),
        (&[2, 2, 6, 7], &[4, 2, 3, 3], 2, 1, 1),
        (&[1, 4, 5, 5], &[2, 2, 3, 3], 1, 1, 2),
        (&[1, 1, 8, 8], &[2, 1, 5, 5], 3, 2, 1),
    ];
    for seed in 0..20 {
        for &(xs, ws, stride, pad, groups) in cases {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(xs, 1.0, &mut rng);
            let w = Tensor::randn(ws, 1.0, &mut rng);
            let want = naive_conv(&x, &w, stride, pad, groups);
            let mut tape = Tape::new();
            let (vx, vw) = (tape.constant(x), tape.constant(w));
            let y = tape.conv2d(vx, vw, stride, pad, groups).unwrap();
            let got: Vec<u64> = tape.data(y).iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want, "seed {seed} case {xs:?} {ws:?}");
        }
    }

    let x = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
    let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    assert!(tape.conv2d(x, k, 1, 1, 1).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.softmax(x, 0).unwrap();
    let z = 1f64.exp() + 2f64.exp();
    assert!((tape.data(y)[0] - 1f64.exp() / z).abs() < 1e-15);
    assert!((tape.data(y)[1] - 2f64.exp() / z).abs() < 1e-15);
}

#[test]
fn softmax_rows_lie_in_simplex() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[7, 5], 30.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        for r in 0..7 {
            let row = &tape.data(y)[r * 5..(r + 1) * 5];
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::new(99);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng).with_requires_grad(true));
        let k = tape.leaf(Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng).with_requires_grad(true));
        let y = tape.conv2d(x, k, 1, 1, 2).unwrap();
        let y = tape.leaky_relu(y, 0.25);
        let y = tape.reshape(y, &[2, 36]).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let l = tape.sum_axis(s, 0).unwrap();
        let l = tape.square(l);
        let l = tape.sum(l);
        tape.backward(l).unwrap();
        let mut bits: Vec<u64> = tape.data(l).iter().map(|v| v.to_bits()).collect();
        bits.extend(tape.grad(k).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}
