use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut g = Graph::new();
    g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let c = g.input(Tensor::scalar(3.0)).unwrap();
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn relu_pattern_lists_input_signs_in_tape_order() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    let z = g.scale(y, -1.0).unwrap();
    let w = g.add_const(z, vec![1.0; 3]).unwrap();
    g.relu(w).unwrap();
    assert_eq!(g.relu_pattern(), vec![false, false, true, true, true, false]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let ww = g.mul(w, w).unwrap();
    let loss = g.sum(ww).unwrap();
    assert_eq!(g.backward(loss).unwrap().get("w").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn nan_is_reported_with_op_name() {
    let mut g = Graph::new();
    let w = g.param("w", Tensor::from_vec(vec![1e200])).unwrap();
    let err = g.mul(w, w).unwrap_err();
    assert!(matches!(err, Error::Numerical { op: "mul" }));
}

#[test]
fn matmul_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = named(vec![
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4, 2]),
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[5]),
    ]);
    let err = check_gradients(&ps, 1e-4, |g, id| {
        let ab = g.matmul(id[0], id[1], false)?; // 3x2
        let ac = g.matmul(id[0], id[2], true)?; // 3x5
        let acb = g.add_bias(ac, id[3])?;
        let r = g.relu(acb)?;
        let s1 = g.square(ab)?;
        let a = g.sum(s1)?;
        let b = g.sum(r)?;
        let t = g.add(a, b)?;
        g.scale(t, 0.5)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batched_and_reshaping_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ps = named(vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 5, 4])]);
    let err = check_gradients(&ps, 1e-4, |g, id| {
        let a = g.bmm(id[0], id[1], true)?; // 2x3x5
        let flat = g.reshape(a, &[2, 15])?;
        let sm = g.softmax(flat, None)?;
        let back = g.reshape(sm, &[2, 3, 5])?;
        let beta = g.sum_last(back)?; // 2x3
        let beta = g.reshape(beta, &[2, 1, 3])?;
        let pooled = g.bmm(beta, id[0], false)?; // 2x1x4
        let sl = g.slice_last(pooled, 1, 2)?;
        let cat = g.concat_last(&[sl, pooled])?;
        let sq = g.square(cat)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn embedding_and_masking_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = named(vec![rand_tensor(&mut rng, &[6, 3]), rand_tensor(&mut rng, &[2, 3])]);
    let ids = [1usize, 4, 0, 2, 2, 5];
    let mask = [true, true, false, true, false, false];
    let cmask = [true, false, true, true, true, false];
    let err = check_gradients(&ps, 1e-4, |g, id| {
        let e = g.gather(id[0], &ids)?;
        let e = g.reshape(e, &[2, 3, 3])?;
        let m = g.masked_mean(e, &mask)?; // 2x3
        let y = g.mul(m, id[1])?;
        let sm = g.softmax(y, Some(&cmask))?;
        let l = g.log1m_clamped(sm)?;
        let l = g.mul_const(l, cmask.iter().map(|&b| b as u8 as f64).collect())?;
        let ls = g.log_softmax(y)?;
        let nll = g.nll(ls, &[2, 0])?;
        let v = g.add_const(sm, vec![-0.25; 6])?;
        let v = g.square(v)?;
        let s1 = g.sum(l)?;
        let s2 = g.sum(v)?;
        let t = g.sub(nll, s1)?;
        g.add(t, s2)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn graph_softmax_masks_exactly() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![2.0, 9.0, 1.0]).unwrap()).unwrap();
    let y = g.softmax(x, Some(&[true, false, true])).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[1], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    assert!(matches!(g.softmax(x, Some(&[false; 3])), Err(Error::Domain(_))));
}

#[test]
fn log1m_clamp_keeps_values_finite() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::from_vec(vec![1.0, 0.5])).unwrap();
    let y = g.log1m_clamped(x).unwrap();
    assert!((g.value(y).data()[0] - (1e-7f64).ln()).abs() < 1e-6);
    let s = g.sum(y).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get("x").unwrap().data()[0], 0.0);
    assert!((gr.get("x").unwrap().data()[1] + 2.0).abs() < 1e-12);
}

fn one_grad(v: f64) -> Grads {
    let mut g = Graph::new();
    let p = g.param("p", Tensor::scalar(0.0)).unwrap();
    let s = g.scale(p, v).unwrap();
    g.backward(s).unwrap()
}

#[test]
fn optimizer_zero_gradient_is_a_no_op() {
    let mut params = vec![Tensor::scalar(1.5)];
    let mut st = OptimState::new(OptimConfig::default(), &params);
    st.step(&mut params, &one_grad(0.0)).unwrap();
    assert_eq!(params[0].item(), 1.5);
}

#[test]
fn optimizer_first_step_moves_against_gradient() {
    for cfg in [OptimConfig { lr: 0.1, ..OptimConfig::default() }, OptimConfig::adamax_preset()] {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(cfg, &params);
        st.step(&mut params, &one_grad(1.0)).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps) ≈ lr.
        let expected = 1.0 - cfg.lr * 1.0 / (1.0 + cfg.eps);
        assert!((params[0].item() - expected).abs() < 1e-12, "{:?}", cfg.kind);
        assert_eq!(st.step, 1);
    }
}

#[test]
fn optimizer_rejects_shape_mismatch() {
    let mut params = vec![Tensor::from_vec(vec![0.0, 0.0])];
    let mut st = OptimState::new(OptimConfig::default(), &params);
    assert!(matches!(st.step(&mut params, &one_grad(1.0)), Err(Error::Contract(_))));
}

mod props {
    use super::super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_on_masked_simplex(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            t in 0.01f64..1e3,
            seed in any::<u64>(),
        ) {
            let n = logits.len();
            let mut mask: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            mask[(seed as usize) % n] = true;
            let p = softmax(&logits, t, Some(&mask)).unwrap();
            let s: f64 = p.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for (v, &m) in p.iter().zip(&mask) {
                prop_assert!(*v >= 0.0);
                if !m { prop_assert_eq!(*v, 0.0); }
            }
        }

        #[test]
        fn random_mlp_gradients_match_finite_differences(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let x = r(&[3, 4]);
            let ps = vec![("w".to_string(), r(&[5, 4])), ("b".to_string(), r(&[5]))];
            let err = super::check_gradients(&ps, 1e-4, |g, id| {
                let xi = g.input(x.clone())?;
                let h = g.matmul(xi, id[0], true)?;
                let h = g.add_bias(h, id[1])?;
                let ls = g.log_softmax(h)?;
                g.nll(ls, &[0, 3, 1])
            }).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
