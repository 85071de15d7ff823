//! Finite-difference verification of every primitive's backward rule, plus
//! record-level properties.

use eas_core::autodiff::{grad_check, NamedParamSet, NodeId, OpSpec, Real, Tape, TapeError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: Real, hi: Real) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn check<F>(params: &NamedParamSet, tol: Real, build: F)
where
    F: Fn(&NamedParamSet, &mut Tape) -> Result<NodeId, TapeError>,
{
    let f = |p: &NamedParamSet| {
        let mut tape = Tape::new();
        let out = build(p, &mut tape)?;
        Ok((tape, out))
    };
    let err = grad_check(f, params, 1e-5).unwrap();
    assert!(err <= tol, "gradient error {} exceeds {}", err, tol);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(m, k, n) in &[(1usize, 4usize, 3usize), (7, 5, 2), (32, 9, 32)] {
        let mut params = NamedParamSet::new();
        params.insert("a", rand_tensor(&mut rng, vec![m, k], -1.0, 1.0), true).unwrap();
        params.insert("b", rand_tensor(&mut rng, vec![k, n], -1.0, 1.0), true).unwrap();
        check(&params, 1e-4, |p, tape| {
            let ids = tape.register_params(p)?;
            let c = tape.matmul(ids["a"], ids["b"])?;
            tape.sum(c)
        });
    }
}

#[test]
fn matmul_transposed_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = NamedParamSet::new();
    // a: [5, 8] used transposed, b: [5, 6]: a^T b = [8, 6]
    params.insert("a", rand_tensor(&mut rng, vec![5, 8], -1.0, 1.0), true).unwrap();
    params.insert("b", rand_tensor(&mut rng, vec![5, 6], -1.0, 1.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let c = tape.forward(
            OpSpec::MatMul { transpose_a: true, transpose_b: false },
            &[ids["a"], ids["b"]],
        )?;
        tape.sum(c)
    });
    // c: [4, 8], d: [6, 8] used transposed: c d^T = [4, 6]
    let mut params = NamedParamSet::new();
    params.insert("c", rand_tensor(&mut rng, vec![4, 8], -1.0, 1.0), true).unwrap();
    params.insert("d", rand_tensor(&mut rng, vec![6, 8], -1.0, 1.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let c = tape.matmul_nt(ids["c"], ids["d"])?;
        tape.sum(c)
    });
}

#[test]
fn add_broadcast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // Same-shape addition.
    let mut params = NamedParamSet::new();
    params.insert("a", rand_tensor(&mut rng, vec![6, 5], -1.0, 1.0), true).unwrap();
    params.insert("b", rand_tensor(&mut rng, vec![6, 5], -1.0, 1.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let c = tape.add(ids["a"], ids["b"])?;
        let t = tape.tanh(c)?;
        tape.sum(t)
    });
    // Trailing-dimension bias.
    let mut params = NamedParamSet::new();
    params.insert("a", rand_tensor(&mut rng, vec![6, 5], -1.0, 1.0), true).unwrap();
    params.insert("bias", rand_tensor(&mut rng, vec![5], -1.0, 1.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let c = tape.add(ids["a"], ids["bias"])?;
        let t = tape.tanh(c)?;
        tape.sum(t)
    });
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // relu: keep inputs away from the kink at zero, mixing both signs.
    let mut params = NamedParamSet::new();
    let vals: Vec<Real> = (0..63)
        .map(|i| {
            let v = rng.gen_range(0.1..1.0);
            if i % 2 == 0 {
                -v
            } else {
                v
            }
        })
        .collect();
    params.insert("x", Tensor::matrix(9, 7, vals).unwrap(), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let r = tape.relu(ids["x"])?;
        tape.sum(r)
    });
    // tanh then scale.
    let mut params = NamedParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![4, 11], -2.0, 2.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let t = tape.tanh(ids["x"])?;
        let s = tape.scale(t, -1.7)?;
        tape.sum(s)
    });
    // log on positive inputs.
    let mut params = NamedParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![8], 0.2, 3.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let l = tape.log(ids["x"])?;
        tape.sum(l)
    });
    // exp.
    let mut params = NamedParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![3, 10], -1.5, 1.5), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let e = tape.exp(ids["x"])?;
        tape.sum(e)
    });
    // mean of a matrix, folded to a scalar through sum.
    let mut params = NamedParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![12, 5], -1.0, 1.0), true).unwrap();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let m = tape.mean(ids["x"])?;
        let e = tape.exp(m)?;
        tape.sum(e)
    });
}

#[test]
fn gather_rows_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut params = NamedParamSet::new();
    params.insert("x", rand_tensor(&mut rng, vec![6, 4], -1.0, 1.0), true).unwrap();
    // Duplicate indices exercise accumulation in the scatter.
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let g = tape.gather_rows(ids["x"], &[3, 0, 3, 5])?;
        let t = tape.tanh(g)?;
        tape.sum(t)
    });
}

#[test]
fn masked_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let rows = 5;
    let cols = 9;
    let mut mask = vec![0.0; rows * cols];
    for r in 0..rows {
        let feasible = rng.gen_range(1..=cols);
        let mut chosen: Vec<usize> = (0..cols).collect();
        for _ in 0..cols - feasible {
            let i = rng.gen_range(0..chosen.len());
            chosen.remove(i);
        }
        for c in chosen {
            mask[r * cols + c] = 1.0;
        }
    }
    let mask = Tensor::matrix(rows, cols, mask).unwrap();
    let weights = rand_tensor(&mut rng, vec![cols, 1], -1.0, 1.0);
    let mut params = NamedParamSet::new();
    params.insert("logits", rand_tensor(&mut rng, vec![rows, cols], -3.0, 3.0), true).unwrap();
    let mask2 = mask.clone();
    check(&params, 1e-4, |p, tape| {
        let ids = tape.register_params(p)?;
        let m = tape.leaf(mask2.clone());
        let probs = tape.masked_softmax(ids["logits"], m)?;
        let w = tape.leaf(weights.clone());
        let proj = tape.matmul(probs, w)?;
        tape.sum(proj)
    });
}

#[test]
fn three_layer_composition_matches_finite_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = NamedParamSet::new();
    params.insert("w1", rand_tensor(&mut rng, vec![6, 8], -0.5, 0.5), true).unwrap();
    params.insert("b1", rand_tensor(&mut rng, vec![8], -0.5, 0.5), true).unwrap();
    params.insert("w2", rand_tensor(&mut rng, vec![8, 8], -0.5, 0.5), true).unwrap();
    params.insert("b2", rand_tensor(&mut rng, vec![8], -0.5, 0.5), true).unwrap();
    params.insert("w3", rand_tensor(&mut rng, vec![8, 1], -0.5, 0.5), true).unwrap();
    let x = rand_tensor(&mut rng, vec![3, 6], -1.0, 1.0);
    let f = |p: &NamedParamSet| {
        let mut tape = Tape::new();
        let ids = tape.register_params(p)?;
        let xin = tape.leaf(x.clone());
        let h1 = tape.matmul(xin, ids["w1"])?;
        let h1 = tape.add(h1, ids["b1"])?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.matmul(h1, ids["w2"])?;
        let h2 = tape.add(h2, ids["b2"])?;
        let h2 = tape.tanh(h2)?;
        let out = tape.matmul(h2, ids["w3"])?;
        let out = tape.sum(out)?;
        Ok((tape, out))
    };
    let err = grad_check(f, &params, 1e-5).unwrap();
    assert!(err <= 1e-6, "composition gradient error {}", err);
}

#[test]
fn restricting_targets_leaves_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut both = NamedParamSet::new();
    both.insert("w1", rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0), true).unwrap();
    both.insert("w2", rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0), true).unwrap();

    let build = |p: &NamedParamSet| {
        let mut tape = Tape::new();
        let ids = tape.register_params(p).unwrap();
        let x = tape.leaf(Tensor::matrix(2, 4, vec![0.3; 8]).unwrap());
        let h = tape.matmul(x, ids["w1"]).unwrap();
        let h = tape.tanh(h).unwrap();
        let y = tape.matmul(h, ids["w2"]).unwrap();
        let out = tape.sum(y).unwrap();
        (tape, out)
    };

    let (tape, out) = build(&both);
    let full = tape.backprop(out, &Tensor::scalar(1.0), &both).unwrap();
    assert_eq!(full.len(), 2);

    let mut only_w1 = NamedParamSet::new();
    only_w1.insert("w1", both.get("w1").unwrap().clone(), true).unwrap();
    let restricted = tape.backprop(out, &Tensor::scalar(1.0), &only_w1).unwrap();
    assert_eq!(restricted.len(), 1);
    assert_eq!(restricted["w1"], full["w1"]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = tape.leaf(rand_tensor(&mut rng, vec![16, 16], -1.0, 1.0));
        let b = tape.leaf(rand_tensor(&mut rng, vec![16, 16], -1.0, 1.0));
        let c = tape.matmul(a, b).unwrap();
        let t = tape.tanh(c).unwrap();
        let s = tape.sum(t).unwrap();
        tape.value(s).data()[0]
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn masked_softmax_invariants(
        logits in proptest::collection::vec(-50.0f64..50.0, 12),
        maskbits in proptest::collection::vec(any::<bool>(), 12),
        forced in 0usize..12,
    ) {
        let logits: Vec<Real> = logits.iter().map(|&v| v as Real).collect();
        let mut mask: Vec<Real> = maskbits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        mask[forced] = 1.0; // at least one feasible slot per row
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(3, 4, logits.clone()).unwrap());
        let m = tape.leaf(Tensor::matrix(3, 4, mask.clone()).unwrap());
        if mask.chunks(4).any(|row| row.iter().all(|&v| v == 0.0)) {
            prop_assert!(tape.masked_softmax(l, m).is_err());
        } else {
            let probs = tape.masked_softmax(l, m).unwrap();
            let p = tape.value(probs);
            for (i, (&pi, &mi)) in p.data().iter().zip(&mask).enumerate() {
                prop_assert!(pi >= 0.0, "negative probability at {}", i);
                if mi == 0.0 {
                    prop_assert_eq!(pi, 0.0);
                }
            }
            for row in p.data().chunks(4) {
                let total: Real = row.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-9, "row sum {}", total);
            }
        }
    }
}
