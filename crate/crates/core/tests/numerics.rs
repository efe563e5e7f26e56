mod common;

use common::{max_grad_error, randn};
use proptest::prelude::*;
use vamp_core::linalg::pca_project_2d;
use vamp_core::nn::{attention_block, BlockParams};
use vamp_core::rng::stream;
use vamp_core::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut tape = Tape::new();
    let i = tape.leaf(&Tensor::eye(2));
    let ii = tape.matmul(i, i).unwrap();
    assert_eq!(tape.tensor(ii), Tensor::eye(2));
    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        Error::Dimension { lhs, rhs, .. } => assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3])),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let err = max_grad_error(&[randn(&[5, 7], 1.0, 1), randn(&[7, 3], 1.0, 2)], |tp, v| tp.matmul(v[0], v[1]), 3);
    assert!(err <= 1e-6, "matmul rel err {err}");
}

#[test]
fn layer_norm_hand_cases() {
    let mut tape = Tape::new();
    let g = tape.leaf(&Tensor::filled(&[4], 1.0));
    let b = tape.leaf(&Tensor::zeros(&[4]));
    let x = tape.leaf(&Tensor::filled(&[1, 4], 3.25));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).iter().all(|v| *v == 0.0));

    let g = tape.leaf(&Tensor::filled(&[2], 1.0));
    let b = tape.leaf(&Tensor::zeros(&[2]));
    let x = tape.leaf(&t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let expect = 1.0 / (1.0 + 1e-5_f64).sqrt();
    assert!((tape.value(y)[0] - expect).abs() < 1e-15 && (tape.value(y)[1] + expect).abs() < 1e-15);
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-5);

    let bad = tape.leaf(&Tensor::zeros(&[3]));
    assert!(matches!(tape.layer_norm(x, bad, b), Err(Error::Dimension { .. })));
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let inputs = [randn(&[3, 8], 1.0, 4), randn(&[8], 1.0, 5), randn(&[8], 1.0, 6)];
    let err = max_grad_error(&inputs, |tp, v| tp.layer_norm(v[0], v[1], v[2]), 7);
    assert!(err <= 1e-5, "layer_norm rel err {err}");
}

fn gelu_of(x: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::scalar(x));
    let y = tape.gelu(v).unwrap();
    tape.scalar_value(y)
}

#[test]
fn gelu_values() {
    assert_eq!(gelu_of(0.0), 0.0);
    assert!((gelu_of(12.0) - 12.0).abs() < 1e-12);
    assert!(gelu_of(-12.0).abs() < 1e-12);
    // 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³))) at x = 1, evaluated with 40 significant digits.
    let reference = 0.841_191_990_608_276_7;
    assert!((gelu_of(1.0) - reference).abs() <= 2e-16, "{}", gelu_of(1.0));
}

#[test]
fn elementwise_and_reduction_gradients() {
    let a = randn(&[3, 4], 1.0, 10);
    let b = randn(&[3, 4], 1.0, 11);
    let bias = randn(&[4], 1.0, 12);
    let checks: Vec<(&str, f64)> = vec![
        ("add", max_grad_error(&[a.clone(), b.clone()], |tp, v| tp.add(v[0], v[1]), 1)),
        ("sub", max_grad_error(&[a.clone(), b.clone()], |tp, v| tp.sub(v[0], v[1]), 1)),
        ("mul", max_grad_error(&[a.clone(), b.clone()], |tp, v| tp.mul(v[0], v[1]), 1)),
        ("add_row_bias", max_grad_error(&[a.clone(), bias.clone()], |tp, v| tp.add_row_bias(v[0], v[1]), 1)),
        ("scale", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.scale(v[0], -2.5), 1)),
        ("gelu", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.gelu(v[0]), 1)),
        ("softmax_rows", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.softmax_rows(v[0]), 1)),
        ("l2_normalize_rows", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.l2_normalize_rows(v[0]), 1)),
        ("sum_rows", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.sum_rows(v[0]), 1)),
        ("sum", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.sum(v[0]), 1)),
        ("mean", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.mean(v[0]), 1)),
        ("reshape", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.reshape(v[0], &[6, 2]), 1)),
        (
            "gather_rows",
            max_grad_error(
                &[a.clone(), b.clone()],
                |tp, v| tp.gather_rows(&[v[0], v[1]], vec![(1, 2), (0, 0), (1, 2), (0, 1)]),
                1,
            ),
        ),
        ("cross_entropy", max_grad_error(std::slice::from_ref(&a), |tp, v| tp.cross_entropy(v[0], &[3, 0, 1]), 1)),
        (
            "clamp",
            // Bounds far from every sample so the kinks are never straddled.
            max_grad_error(std::slice::from_ref(&a), |tp, v| tp.clamp(v[0], -10.0, 0.987_654), 1),
        ),
    ];
    for (name, err) in checks {
        assert!(err <= 1e-6, "{name} rel err {err}");
    }
}

#[test]
fn variational_op_gradients() {
    let mu = randn(&[2, 3], 1.0, 20);
    let lv = randn(&[2, 3], 0.5, 21);
    let mp = randn(&[2, 3], 1.0, 22);
    let lp = randn(&[2, 3], 0.5, 23);
    let eps = randn(&[2, 3], 1.0, 24).into_data();
    let err = max_grad_error(&[mu.clone(), lv.clone()], |tp, v| tp.reparam(v[0], v[1], eps.clone()), 25);
    assert!(err <= 1e-6, "reparam rel err {err}");
    let err = max_grad_error(&[mu, lv, mp, lp], |tp, v| tp.kl_diag(v[0], v[1], v[2], v[3]), 26);
    assert!(err <= 1e-6, "kl_diag rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 3], &[0.4, 0.4, 0.4]));
    let p = tape.softmax_rows(x).unwrap();
    assert!(tape.value(p).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-16));
    let x = tape.leaf(&t(&[1, 2], &[1.0, 0.0]));
    let p = tape.softmax_rows(x).unwrap();
    let (a, b) = (0.731_058_578_630_004_9, 0.268_941_421_369_995_1);
    assert!((tape.value(p)[0] - a).abs() < 1e-16 && (tape.value(p)[1] - b).abs() < 1e-16);
    let empty = tape.leaf(&Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax_rows(empty), Err(Error::Dimension { .. })));
}

fn block(width: usize, seed: u64) -> BlockParams {
    BlockParams::init(width, 4, &mut stream(&[seed]))
}

#[test]
fn singleton_attention_weights_are_one() {
    let mut tape = Tape::new();
    let p = block(8, 30).register(&mut tape, false);
    let x = tape.leaf(&randn(&[1, 8], 1.0, 31));
    let (_, attn) = attention_block(&mut tape, x, &p, 2, 1).unwrap();
    assert_eq!(tape.attention_probs(attn).unwrap(), &[1.0, 1.0]);
}

#[test]
fn identical_tokens_get_identical_outputs_and_permutations_commute() {
    let p = block(8, 32);
    let base = randn(&[4, 8], 1.0, 33);
    let mut rows: Vec<Vec<f64>> = (0..4).map(|i| base.row(i).to_vec()).collect();
    rows[2] = rows[1].clone();
    let run = |rows: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let v = p.register(&mut tape, false);
        let x = tape.leaf(&Tensor::from_rows(rows).unwrap());
        let (y, _) = attention_block(&mut tape, x, &v, 2, 4).unwrap();
        tape.tensor(y)
    };
    let y = run(&rows);
    assert_eq!(y.row(1), y.row(2));

    let perm = [3, 0, 2, 1];
    let base_rows: Vec<Vec<f64>> = (0..4).map(|i| base.row(i).to_vec()).collect();
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| base_rows[i].clone()).collect();
    let (y0, y1) = (run(&base_rows), run(&permuted));
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in y1.row(k).iter().zip(y0.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_block_rejects_indivisible_heads() {
    let mut tape = Tape::new();
    let p = block(8, 34).register(&mut tape, false);
    let x = tape.leaf(&randn(&[2, 8], 1.0, 35));
    assert!(matches!(attention_block(&mut tape, x, &p, 3, 2), Err(Error::Config(_))));
}

#[test]
fn attention_block_gradients_match_finite_differences() {
    let params = block(16, 36);
    let named = vamp_core::nn::collect_named(&params, "");
    let mut inputs = vec![randn(&[4, 16], 1.0, 37)];
    inputs.extend(named.iter().map(|(_, t)| t.clone()));
    let err = max_grad_error(&inputs, |tp, v| Ok(attention_block(tp, v[0], &block_vars_from(v), 4, 4)?.0), 38);
    assert!(err <= 1e-4, "attention block rel err {err}");
}

/// Rebuilds block handles that point at the probe's own leaves (so gradients reach them).
fn block_vars_from(v: &[vamp_core::Var]) -> vamp_core::nn::BlockVars {
    let lin = |w: vamp_core::Var, b: vamp_core::Var| vamp_core::nn::LinearVars { weight: w, bias: b };
    vamp_core::nn::BlockVars {
        ln1_gamma: v[1],
        ln1_beta: v[2],
        query: lin(v[3], v[4]),
        key: lin(v[5], v[6]),
        value: lin(v[7], v[8]),
        out: lin(v[9], v[10]),
        ln2_gamma: v[11],
        ln2_beta: v[12],
        mlp: vamp_core::nn::MlpVars { fc1: lin(v[13], v[14]), fc2: lin(v[15], v[16]) },
    }
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.param(&randn(&[2, 3], 1.0, 40));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    assert_eq!(tape.backward(s).unwrap_err(), Error::BackwardTwice);
    tape.reset_grads();
    tape.backward(s).unwrap();

    let mut tape = Tape::new();
    let xv = randn(&[1, 5], 1.0, 41);
    let x = tape.param(&xv);
    let xt = tape.param(&randn(&[5, 1], 1.0, 41));
    let dot = tape.matmul(x, xt).unwrap();
    tape.backward(dot).unwrap();
    let gx = tape.grad(x).unwrap();
    for (g, v) in gx.iter().zip(xv.data()) {
        assert_eq!(*g, *v);
    }

    let mut tape = Tape::new();
    let x = tape.param(&xv);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().iter().zip(xv.data()) {
        assert_eq!(*g, 2.0 * v);
    }
    let mut tape = Tape::new();
    let x = tape.param(&xv);
    assert_eq!(tape.backward(x).unwrap_err(), Error::NonScalarLoss(vec![1, 5]));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut tape = Tape::new();
    let a = tape.param(&randn(&[3], 1.0, 42));
    let unused = tape.param(&randn(&[2], 1.0, 43));
    let s = tape.sum(a).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let xv = randn(&[3, 4], 1.0, 44);
    let grads = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.param(&xv);
        let g = tape.gelu(x).unwrap();
        let l1 = tape.sum(g).unwrap();
        let n = tape.l2_normalize_rows(x).unwrap();
        let sm = tape.softmax_rows(n).unwrap();
        let l2 = tape.cross_entropy(sm, &[0, 1, 2]).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        tape.backward(loss).unwrap();
        tape.grad(x).unwrap().to_vec()
    };
    let (a, b, both) = (grads(0), grads(1), grads(2));
    for i in 0..a.len() {
        assert!((a[i] + b[i] - both[i]).abs() <= 1e-12);
    }
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_results_are_caught() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(1e300));
    let y = tape.mul(x, x);
    assert_eq!(y.unwrap_err(), Error::NonFinite("mul"));
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations: (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                let tt = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let tt = if theta == 0.0 { 1.0 } else { tt };
                let c = 1.0 / (tt * tt + 1.0).sqrt();
                let s = tt * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[test]
fn pca_matches_jacobi_eigendecomposition() {
    let data = randn(&[10, 6], 1.0, 50);
    let p = pca_project_2d(&data).unwrap();
    let (n, d) = (10, 6);
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data.row(i)[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (data.row(i)[a] - mean[a]) * (data.row(i)[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    let [l1, l2] = p.explained_variance;
    assert!(l1 >= l2 && l2 >= 0.0);
    for (k, &idx) in order[..2].iter().enumerate() {
        assert!((p.explained_variance[k] - vals[idx]).abs() <= 1e-8 * vals[idx].max(1.0));
        let dot: f64 = (0..d).map(|j| p.components[k][j] * vecs[j * d + idx]).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-6, "component {k} alignment {dot}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let x = randn(&[rows, cols], 3.0, seed);
        let shifted = Tensor::new(&[rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&shifted);
        let pa = tape.softmax_rows(a).unwrap();
        let pb = tape.softmax_rows(b).unwrap();
        let (va, vb) = (tape.value(pa).to_vec(), tape.value(pb).to_vec());
        for r in 0..rows {
            let s: f64 = va[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for (p, q) in va.iter().zip(&vb) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_and_layer_norm_gradcheck_on_random_shapes(
        m in 1usize..5,
        k in 1usize..6,
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let err = max_grad_error(&[randn(&[m, k], 1.0, seed), randn(&[k, n], 1.0, seed ^ 1)], |tp, v| tp.matmul(v[0], v[1]), seed);
        prop_assert!(err <= 1e-4, "matmul {err}");
        let c = k + 1;
        let err = max_grad_error(
            &[randn(&[m, c], 1.0, seed ^ 2), randn(&[c], 1.0, seed ^ 3), randn(&[c], 1.0, seed ^ 4)],
            |tp, v| tp.layer_norm(v[0], v[1], v[2]),
            seed,
        );
        prop_assert!(err <= 1e-4, "layer_norm {err}");
    }
}
