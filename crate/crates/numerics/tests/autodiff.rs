use ditlab_numerics::{grad_check, GradCheckConfig, Graph, NumericsError, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), &mut rng)
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t))
        .collect()
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output entry matters to the loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> ditlab_numerics::Result<Var> {
    let r = g.constant(randn64(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![2, 5], 3.25));
    let y = g.layer_norm(x, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_over_one_key_returns_its_value() {
    let mut g = Graph::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = g.constant(Tensor::randn(vec![2, 3, 8], &mut rng));
    let k = g.constant(Tensor::randn(vec![2, 1, 8], &mut rng));
    let v = g.constant(Tensor::randn(vec![2, 1, 8], &mut rng));
    let o = g.attention(q, k, v, 2, None).unwrap();
    let (vd, od) = (g.value(v).data().to_vec(), g.value(o).data());
    for b in 0..2 {
        for t in 0..3 {
            for c in 0..8 {
                assert!((od[(b * 3 + t) * 8 + c] - vd[b * 8 + c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn fully_masked_query_rows_are_zero() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(randn64(&[1, 2, 4], 1));
    let k = g.constant(randn64(&[1, 3, 4], 2));
    let v = g.constant(randn64(&[1, 3, 4], 3));
    let o = g.attention(q, k, v, 1, Some(vec![false; 3])).unwrap();
    assert!(g.value(o).data().iter().all(|&x| x == 0.0));
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 9.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn gradient_of_squared_norm_of_identity_map() {
    let mut g = Graph::<f32>::new();
    let w = g.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = g.param(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let y = g.matmul(x, w).unwrap();
    let sq = g.mul(y, y).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn second_backward_requires_reset() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(vec![2]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(NumericsError::BackwardAlreadyRun)));
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn linear_layer_passes_grad_check_at_1e_5() {
    let params = named(vec![randn64(&[5, 3], 1), randn64(&[3, 4], 2), randn64(&[4], 3)]);
    let report = grad_check(
        &params,
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 9)
        },
        &GradCheckConfig {
            tolerance: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn three_layer_block_matches_finite_differences() {
    // linear -> layernorm(affine) -> gelu -> linear -> silu -> linear, then MSE
    let params = named(vec![
        randn64(&[6, 8], 10),
        randn64(&[8], 11),
        randn64(&[8], 12),
        randn64(&[8], 13),
        randn64(&[8, 8], 14),
        randn64(&[8, 3], 15),
        randn64(&[3], 16),
        randn64(&[4, 6], 17),
    ]);
    let target = randn64(&[4, 3], 18);
    let report = grad_check(
        &params,
        |g, v| {
            let h = g.linear(v[7], v[0], Some(v[1]))?;
            let h = g.layer_norm(h, Some(v[2]), Some(v[3]))?;
            let h = g.gelu(h);
            let h = g.linear(h, v[4], None)?;
            let h = g.silu(h);
            let y = g.linear(h, v[5], Some(v[6]))?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.params);
}

#[test]
fn masked_multi_head_attention_passes_grad_check() {
    let params = named(vec![
        randn64(&[2, 3, 8], 20),
        randn64(&[2, 4, 8], 21),
        randn64(&[2, 4, 8], 22),
    ]);
    let mask = vec![true, true, false, true, true, false, false, true];
    let report = grad_check(
        &params,
        |g, v| {
            let o = g.attention(v[0], v[1], v[2], 2, Some(mask.clone()))?;
            project(g, o, 23)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn layout_ops_pass_grad_check() {
    let params = named(vec![randn64(&[2, 3, 4], 30), randn64(&[2, 2, 4], 31), randn64(&[3, 4], 32)]);
    let report = grad_check(
        &params,
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?; // [2,5,4]
            let p = g.permute(c, &[2, 0, 1])?; // [4,2,5]
            let n = g.narrow(p, 2, 1, 3)?; // [4,2,3]
            let r = g.reshape(n, vec![8, 3])?;
            let e = g.expand(v[2], 0, 2)?; // [2,3,4]
            let e = g.reshape(e, vec![6, 4])?;
            let sm = g.softmax(e)?;
            let t = g.tanh(sm);
            let t = g.narrow(t, 0, 2, 3)?; // [3,4]
            let m = g.matmul(r, t)?; // [8,4]
            let sc = g.scale(m, 0.7);
            let sh = g.add_scalar(sc, 0.3);
            let gathered = g.gather_rows(v[2], &[2, 0, 2])?;
            let l1 = project(g, sh, 33)?;
            let l2 = project(g, gathered, 34)?;
            let l = g.add(l1, l2)?;
            let m2 = g.mean(l);
            Ok(m2)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn corrupted_backward_rule_fails_grad_check() {
    let params = named(vec![randn64(&[3, 3], 40)]);
    let report = grad_check(
        &params,
        |g, v| {
            // d/dx sin(x) deliberately reported as sin(x)
            let y = g.map(v[0], f64::sin, f64::sin);
            project(g, y, 41)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures().count(), 1);
}

#[test]
fn mac_counter_tracks_projection_and_attention() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![2, 5, 8]));
    let w = g.constant(Tensor::zeros(vec![8, 12]));
    let _ = g.linear(x, w, None).unwrap();
    assert_eq!(g.macs().projection, 2 * 5 * 8 * 12);
    let k = g.constant(Tensor::zeros(vec![2, 7, 8]));
    let _ = g.attention(x, k, k, 4, None).unwrap();
    assert_eq!(g.macs().attention, 2 * 2 * 5 * 7 * 8);
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = g.param(Tensor::randn(vec![3, 6, 16], &mut rng));
        let w = g.param(Tensor::randn(vec![16, 48], &mut rng));
        let qkv = g.linear(x, w, None).unwrap();
        let parts = g.split(qkv, 2, &[16, 16, 16]).unwrap();
        let o = g.attention(parts[0], parts[1], parts[2], 4, None).unwrap();
        let o = g.layer_norm(o, None, None).unwrap();
        let l = g.mean(o);
        let sq = g.mul(o, o).unwrap();
        let l2 = g.mean(sq);
        let l = g.add(l, l2).unwrap();
        g.backward(l).unwrap();
        (g.value(o).clone(), g.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let data = vals[..rows * cols].to_vec();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in 0u64..1000, n in 4usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(vec![3, n], &mut rng).map(|v| v * 5.0 + 2.0));
        let y = g.layer_norm(x, None, None).unwrap();
        for row in g.value(y).data().chunks(n) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn concat_then_split_is_identity(a in 1usize..5, b in 1usize..5, inner in 1usize..4, axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64((a * 31 + b * 7 + inner) as u64);
        let mut g = Graph::<f32>::new();
        let (sa, sb) = if axis == 0 { (vec![a, inner], vec![b, inner]) } else { (vec![inner, a], vec![inner, b]) };
        let x = g.constant(Tensor::randn(sa, &mut rng));
        let y = g.constant(Tensor::randn(sb, &mut rng));
        let c = g.concat(&[x, y], axis).unwrap();
        let parts = g.split(c, axis, &[a, b]).unwrap();
        prop_assert_eq!(g.value(parts[0]), g.value(x));
        prop_assert_eq!(g.value(parts[1]), g.value(y));
    }

    #[test]
    fn permute_round_trips(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(vec![2, 3, 4, 5], &mut rng));
        let p = g.permute(x, &[2, 0, 3, 1]).unwrap();
        let back = g.permute(p, &[1, 3, 0, 2]).unwrap();
        prop_assert_eq!(g.value(back), g.value(x));
    }
}
