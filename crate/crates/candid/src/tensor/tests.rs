use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// f32 forward evaluation carries ~1e-7 relative rounding noise, which the
// central difference divides by 2h; h = 1e-3 keeps that noise two orders
// below the 1e-3 tolerance while truncation error stays ~1e-6.
const FD_H: f32 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel_err(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences against the analytic gradient: `build` must
/// construct the same scalar graph from the same leaves every call.
fn gradcheck(leaves: &[Tensor], build: impl Fn(&[Tensor]) -> Tensor, tol: f32) {
    let loss = build(leaves);
    loss.backward().unwrap();
    for leaf in leaves {
        let analytic = leaf.grad().expect("leaf gradient");
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let mut pert = base.clone();
            pert[i] = base[i] + FD_H;
            leaf.set_data(&pert).unwrap();
            let up = build(leaves).item().unwrap() as f64;
            pert[i] = base[i] - FD_H;
            leaf.set_data(&pert).unwrap();
            let down = build(leaves).item().unwrap() as f64;
            leaf.set_data(&base).unwrap();
            let numeric = ((up - down) / (2.0 * FD_H as f64)) as f32;
            assert!(
                rel_err(analytic[i], numeric) < tol,
                "coordinate {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}

// -- backward mechanics -----------------------------------------------------

#[test]
fn sum_gradient_is_ones() {
    let x = Tensor::new(&[2, 3], rand_vec(6, &mut rng(1)), true).unwrap();
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn no_grad_leaf_stays_gradless() {
    let x = Tensor::new(&[4], rand_vec(4, &mut rng(2)), false).unwrap();
    let y = Tensor::new(&[4], rand_vec(4, &mut rng(3)), true).unwrap();
    x.add(&y).unwrap().sum().unwrap().backward().unwrap();
    assert!(x.grad().is_none());
    assert!(y.grad().is_some());
}

#[test]
fn backward_twice_accumulates_deterministically() {
    let x = Tensor::new(&[3], rand_vec(3, &mut rng(4)), true).unwrap();
    let loss = x.mul(&x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    let once = x.grad().unwrap();
    loss.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(x.backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn leaf_rejects_non_finite() {
    assert!(Tensor::new(&[2], vec![1.0, f32::NAN], false).is_err());
    assert!(Tensor::new(&[2], vec![f32::INFINITY, 0.0], false).is_err());
}

#[test]
fn zero_grad_resets_accumulation() {
    let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
    x.sum().unwrap().backward().unwrap();
    x.zero_grad();
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
}

// -- elementwise / shape ops against finite differences ----------------------

#[test]
fn gradcheck_add_mul_scale() {
    let mut r = rng(5);
    let a = Tensor::new(&[2, 3], rand_vec(6, &mut r), true).unwrap();
    let b = Tensor::new(&[2, 3], rand_vec(6, &mut r), true).unwrap();
    gradcheck(&[a, b], |l| l[0].add(&l[1]).unwrap().mul(&l[1]).unwrap().scale(0.7).unwrap().sum().unwrap(), 1e-3);
}

#[test]
fn gradcheck_relu() {
    // keep values away from the kink where FD is invalid
    let data: Vec<f32> = rand_vec(8, &mut rng(6)).iter().map(|v| v + 0.3 * v.signum()).collect();
    let x = Tensor::new(&[8], data, true).unwrap();
    gradcheck(&[x], |l| l[0].relu().unwrap().sum().unwrap(), 1e-3);
}

#[test]
fn gradcheck_reshape_permute_slice_concat() {
    let mut r = rng(7);
    let a = Tensor::new(&[2, 3, 4], rand_vec(24, &mut r), true).unwrap();
    let b = Tensor::new(&[1, 3, 4], rand_vec(12, &mut r), true).unwrap();
    gradcheck(
        &[a, b],
        |l| {
            let cat = Tensor::concat(&[l[0].clone(), l[1].clone()]).unwrap(); // [3,3,4]
            let p = cat.permute(&[2, 0, 1]).unwrap(); // [4,3,3]
            let s = p.slice_last(1, 2).unwrap(); // [4,3,2]
            let w = Tensor::new(&[4, 3, 2], (0..24).map(|i| (i as f32 * 0.37).sin()).collect(), false).unwrap();
            s.reshape(&[24]).unwrap().mul(&w.reshape(&[24]).unwrap()).unwrap().sum().unwrap()
        },
        1e-3,
    );
}

#[test]
fn gradcheck_softmax_and_sum_axis0() {
    let x = Tensor::new(&[3, 4], rand_vec(12, &mut rng(8)), true).unwrap();
    let w = Tensor::new(&[4], vec![0.3, -0.9, 0.5, 1.1], false).unwrap();
    gradcheck(
        &[x],
        |l| l[0].softmax(0).unwrap().sum_axis0().unwrap().mul(&w).unwrap().sum().unwrap(),
        1e-3,
    );
}

#[test]
fn gradcheck_l1_loss() {
    let mut r = rng(9);
    let pred = Tensor::new(&[2, 5], rand_vec(10, &mut r), true).unwrap();
    let target = Tensor::new(&[2, 5], rand_vec(10, &mut r), false).unwrap();
    gradcheck(&[pred], |l| l[0].l1_loss(&target).unwrap(), 1e-3);
}

// -- softmax analytic cases ---------------------------------------------------

#[test]
fn softmax_equal_logits_is_uniform() {
    let x = Tensor::new(&[9], vec![0.7; 9], false).unwrap();
    for v in x.softmax(0).unwrap().to_vec() {
        assert!((v - 1.0 / 9.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_analytic_two_logits() {
    let x = Tensor::new(&[2], vec![0.0, 2.0f32.ln()], false).unwrap();
    let y = x.softmax(0).unwrap().to_vec();
    assert!((y[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!((y[1] - 2.0 / 3.0).abs() < 1e-6);
}

#[test]
fn softmax_large_logits_do_not_overflow() {
    let x = Tensor::new(&[3], vec![50.0, 0.0, 0.0], false).unwrap();
    let y = x.softmax(0).unwrap().to_vec();
    assert!(y[0] > 1.0 - 1e-6 && y[1] < 1e-6 && y[2] < 1e-6);

    let x = Tensor::new(&[4], vec![100.0, -100.0, 99.0, 0.0], false).unwrap();
    let s: f32 = x.softmax(0).unwrap().to_vec().iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_invalid_axis_is_error() {
    let x = Tensor::new(&[2, 2], vec![0.0; 4], false).unwrap();
    assert!(matches!(x.softmax(2), Err(TensorError::InvalidAxis { .. })));
}

// -- l1 loss analytic cases ---------------------------------------------------

#[test]
fn l1_loss_zero_at_equality() {
    let x = Tensor::new(&[3], vec![0.1, 0.2, 0.3], false).unwrap();
    assert_eq!(x.l1_loss(&x).unwrap().item().unwrap(), 0.0);
}

#[test]
fn l1_loss_mean_reduction() {
    let pred = Tensor::new(&[4], vec![1.0; 4], true).unwrap();
    let target = Tensor::new(&[4], vec![0.5; 4], false).unwrap();
    let loss = pred.l1_loss(&target).unwrap();
    assert!((loss.item().unwrap() - 0.5).abs() < 1e-7);
    loss.backward().unwrap();
    // gradient sign(pred-target)/count
    assert_eq!(pred.grad().unwrap(), vec![0.25; 4]);
}

#[test]
fn l1_loss_dim_mismatch() {
    let a = Tensor::new(&[2], vec![0.0; 2], false).unwrap();
    let b = Tensor::new(&[3], vec![0.0; 3], false).unwrap();
    assert!(a.l1_loss(&b).is_err());
}

// -- convolution ----------------------------------------------------------------

/// Direct six-nested-loop cross-correlation oracle, f64 accumulation.
fn conv_oracle(input: &[f32], (cin, h, w): (usize, usize, usize), weights: &[f32], bias: &[f32], cout: usize, k: usize, same: bool) -> Vec<f32> {
    let pad = if same { (k - 1) / 2 } else { 0 };
    let (oh, ow) = if same { (h, w) } else { (h - k + 1, w - k + 1) };
    let mut out = vec![0.0f32; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co] as f64;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as i64 + ky as i64 - pad as i64;
                            let ix = ox as i64 + kx as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue; // zero padding
                            }
                            let iv = input[(ci * h + iy as usize) * w + ix as usize] as f64;
                            let wv = weights[((co * cin + ci) * k + ky) * k + kx] as f64;
                            acc += iv * wv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    out
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut r = rng(10);
    let x = Tensor::new(&[2, 5, 6], rand_vec(60, &mut r), false).unwrap();
    let mut w = vec![0.0f32; 2 * 2 * 9];
    // per-output-channel delta on the matching input channel
    w[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
    w[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
    let weights = Tensor::new(&[2, 2, 3, 3], w, false).unwrap();
    let bias = Tensor::new(&[2], vec![0.0; 2], false).unwrap();
    let y = x.conv2d(&weights, &bias, Padding::Same).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv2d_box_kernel_on_constant() {
    let c = 0.6f32;
    let x = Tensor::new(&[1, 5, 5], vec![c; 25], false).unwrap();
    let weights = Tensor::new(&[1, 1, 3, 3], vec![1.0 / 9.0; 9], false).unwrap();
    let bias = Tensor::new(&[1], vec![0.0], false).unwrap();
    let y = x.conv2d(&weights, &bias, Padding::Same).unwrap().to_vec();
    // interior exactly c; corners cover 4/9, edges 6/9 (zero padding)
    assert!((y[2 * 5 + 2] - c).abs() < 1e-6);
    assert!((y[0] - c * 4.0 / 9.0).abs() < 1e-6);
    assert!((y[1] - c * 6.0 / 9.0).abs() < 1e-6);
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    // draws in [-0.5, 0.5] keep outputs near unit scale, where 1e-6 absolute
    // is several f32 ulps of headroom
    let half = |n: usize, r: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| r.random_range(-0.5..0.5)).collect() };
    let mut r = rng(11);
    for case in 0..40 {
        let k = if case % 2 == 0 { 3 } else { 5 };
        let h = r.random_range(k..=8);
        let w = r.random_range(k..=8);
        let cin = r.random_range(1..=3);
        let cout = r.random_range(1..=3);
        let same = case % 3 != 0;
        let x = half(cin * h * w, &mut r);
        let wt = half(cout * cin * k * k, &mut r);
        let b = half(cout, &mut r);
        let y = Tensor::new(&[cin, h, w], x.clone(), false)
            .unwrap()
            .conv2d(
                &Tensor::new(&[cout, cin, k, k], wt.clone(), false).unwrap(),
                &Tensor::new(&[cout], b.clone(), false).unwrap(),
                if same { Padding::Same } else { Padding::Valid },
            )
            .unwrap()
            .to_vec();
        let oracle = conv_oracle(&x, (cin, h, w), &wt, &b, cout, k, same);
        for (a, o) in y.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-6, "case {case}: {a} vs {o}");
        }
    }
}

#[test]
fn conv2d_rejects_even_kernel() {
    let x = Tensor::new(&[1, 4, 4], vec![0.0; 16], false).unwrap();
    let w = Tensor::new(&[1, 1, 2, 2], vec![0.0; 4], false).unwrap();
    let b = Tensor::new(&[1], vec![0.0], false).unwrap();
    assert!(matches!(x.conv2d(&w, &b, Padding::Same), Err(TensorError::EvenKernel(2))));
}

#[test]
fn gradcheck_conv2d_all_arguments() {
    let mut r = rng(12);
    let x = Tensor::new(&[2, 4, 4], rand_vec(32, &mut r), true).unwrap();
    let w = Tensor::new(&[2, 2, 3, 3], rand_vec(36, &mut r), true).unwrap();
    let b = Tensor::new(&[2], rand_vec(2, &mut r), true).unwrap();
    let t = Tensor::new(&[2, 4, 4], rand_vec(32, &mut r), false).unwrap();
    gradcheck(
        &[x, w, b],
        |l| l[0].conv2d(&l[1], &l[2], Padding::Same).unwrap().l1_loss(&t).unwrap(),
        1e-3,
    );
}

// -- adam ------------------------------------------------------------------------

#[test]
fn adam_zero_grad_keeps_params() {
    let p = Tensor::new(&[3], vec![0.5, -0.5, 1.0], true).unwrap();
    p.scale(0.0).unwrap().sum().unwrap().backward().unwrap();
    let mut state = AdamState::new(&[p.clone()]);
    adam_step(&[p.clone()], &mut state).unwrap();
    assert_eq!(p.to_vec(), vec![0.5, -0.5, 1.0]);
    assert_eq!(state.step_count, 1);
}

#[test]
fn adam_first_step_is_signed_lr() {
    let p = Tensor::new(&[2], vec![1.0, -2.0], true).unwrap();
    let g = Tensor::new(&[2], vec![0.3, -0.7], false).unwrap();
    p.mul(&g).unwrap().sum().unwrap().backward().unwrap();
    let mut state = AdamState::with_hyperparams(&[p.clone()], 1e-2, 0.9, 0.999, 1e-8);
    adam_step(&[p.clone()], &mut state).unwrap();
    let got = p.to_vec();
    // bias-corrected first step: -lr * g / (|g| + eps') ~ -lr * sign(g)
    assert!((got[0] - (1.0 - 1e-2)).abs() < 1e-5);
    assert!((got[1] - (-2.0 + 1e-2)).abs() < 1e-5);
}

#[test]
fn adam_missing_grad_is_error() {
    let p = Tensor::new(&[1], vec![0.0], true).unwrap();
    let mut state = AdamState::new(&[p.clone()]);
    assert!(adam_step(&[p], &mut state).is_err());
}

#[test]
fn adam_five_step_trace_matches_scalar_oracle() {
    let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
    let grads = [0.4f32, -0.2, 0.9, 0.05, -0.6];
    let p = Tensor::new(&[1], vec![0.25], true).unwrap();
    let mut state = AdamState::with_hyperparams(&[p.clone()], lr as f32, b1 as f32, b2 as f32, eps as f32);

    // scalar reference with the same precision policy: f32 moment storage,
    // f64 update arithmetic
    let mut theta = 0.25f32;
    let (mut m, mut v) = (0.0f32, 0.0f32);
    for (t, &g) in grads.iter().enumerate() {
        p.zero_grad();
        let gt = Tensor::new(&[1], vec![g], false).unwrap();
        p.mul(&gt).unwrap().sum().unwrap().backward().unwrap();
        adam_step(&[p.clone()], &mut state).unwrap();

        m = (b1 * m as f64 + (1.0 - b1) * g as f64) as f32;
        v = (b2 * v as f64 + (1.0 - b2) * (g as f64) * (g as f64)) as f32;
        let t1 = (t + 1) as i32;
        let mhat = m as f64 / (1.0 - b1.powi(t1));
        let vhat = v as f64 / (1.0 - b2.powi(t1));
        theta = (theta as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        assert!(
            (p.to_vec()[0] as f64 - theta as f64).abs() < 1e-9,
            "step {t1}: {} vs oracle {theta}",
            p.to_vec()[0]
        );
    }
    assert_eq!(state.step_count, 5);
}

// -- property tests ----------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_always_normalized(logits in proptest::collection::vec(-100.0f32..100.0, 1..32)) {
        let n = logits.len();
        let y = Tensor::new(&[n], logits, false).unwrap().softmax(0).unwrap().to_vec();
        let s: f32 = y.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(y.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn relu_output_nonnegative(data in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
        let n = data.len();
        let y = Tensor::new(&[n], data, false).unwrap().relu().unwrap().to_vec();
        prop_assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn reshape_preserves_data(data in proptest::collection::vec(-1.0f32..1.0, 12)) {
        let x = Tensor::new(&[3, 4], data.clone(), false).unwrap();
        prop_assert_eq!(x.reshape(&[2, 6]).unwrap().to_vec(), data);
    }
}
