//! Finite-difference verification of every differentiable op on randomized
//! shapes and values (h = 1e−5, relative error ≤ 1e−4 at 64-bit).

use uglad_core::gradcheck::{check_grads, DEFAULT_FLOOR, DEFAULT_H};
use uglad_core::rng::rng_from_seed;
use uglad_core::tape::{Tape, Var};
use uglad_core::tensor::{ParamSet, Tensor};
use uglad_core::Result;

const TOL: f64 = 1e-4;
const CONFIGS: u64 = 10;

fn rand_dims(seed: u64) -> (usize, usize, usize) {
    use rand::Rng;
    let mut rng = rng_from_seed(seed.wrapping_mul(0x9e37) ^ 0x5bd1);
    (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6))
}

/// Run one gradient check over randomized parameters built by `setup`.
fn check(
    seed: u64,
    setup: impl FnOnce(&mut ParamSet, &mut rand_chacha::ChaCha8Rng),
    build: impl FnMut(&mut Tape, &ParamSet) -> Result<Var>,
) {
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    setup(&mut params, &mut rng);
    let res = check_grads(&mut params, build, None, DEFAULT_H, DEFAULT_FLOOR).unwrap();
    assert!(
        res.max_rel_err <= TOL,
        "seed {seed}: rel err {} at {}[{}]",
        res.max_rel_err,
        res.worst_param,
        res.worst_index
    );
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..CONFIGS {
        let (n, _, _) = rand_dims(seed);
        check(
            seed,
            |ps, rng| {
                ps.insert("a", Tensor::randn(&[n], 1.0, rng)).unwrap();
                ps.insert("b", Tensor::randn(&[n], 1.0, rng)).unwrap();
                ps.insert("s", Tensor::randn(&[], 1.0, rng)).unwrap();
            },
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let s = tape.param(ps, "s")?;
                let sum = tape.add(a, b)?;
                let diff = tape.sub(sum, b)?;
                let prod = tape.mul(diff, a)?;
                let scaled = tape.mul(prod, s)?;
                let shifted = tape.add(scaled, s)?;
                let smub = tape.sub(s, shifted)?;
                tape.sum(smub)
            },
        );
    }
}

#[test]
fn elementwise_unary_ops() {
    for seed in 0..CONFIGS {
        let (n, _, _) = rand_dims(seed + 100);
        check(
            seed,
            |ps, rng| {
                // Keep relu inputs away from the kink at 0.
                let mut t = Tensor::randn(&[n], 1.0, rng);
                t.data_mut().iter_mut().for_each(|v| {
                    if v.abs() < 0.05 {
                        *v += 0.1_f64.copysign(*v);
                    }
                });
                ps.insert("x", t).unwrap();
            },
            |tape, ps| {
                let x = tape.param(ps, "x")?;
                let a = tape.neg(x)?;
                let b = tape.square(a)?;
                let c = tape.affine_const(b, 0.7, -0.2)?;
                let d = tape.sigmoid(c)?;
                let e = tape.tanh(d)?;
                let f = tape.softplus(e)?;
                let g = tape.silu(f)?;
                let h = tape.relu(x)?;
                let both = tape.add(g, h)?;
                tape.mean(both)
            },
        );
    }
}

#[test]
fn softplus_derivative_is_sigmoid() {
    use rand::Rng;
    let mut rng = rng_from_seed(42);
    for _ in 0..10 {
        let x: f64 = rng.random_range(-5.0..5.0);
        let mut params = ParamSet::new();
        params.insert("x", Tensor::vector(vec![x])).unwrap();
        params.zero_grads();
        let mut tape = Tape::new();
        let xv = tape.param(&params, "x").unwrap();
        let y = tape.softplus(xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let sig = 1.0 / (1.0 + (-x).exp());
        assert!((params.grad("x").unwrap()[0] - sig).abs() < 1e-12);
    }
}

#[test]
fn reductions_and_dot() {
    for seed in 0..CONFIGS {
        let (n, _, _) = rand_dims(seed + 200);
        check(
            seed,
            |ps, rng| {
                ps.insert("a", Tensor::randn(&[n], 1.0, rng)).unwrap();
                ps.insert("b", Tensor::randn(&[n], 1.0, rng)).unwrap();
            },
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let d = tape.dot(a, b)?;
                let s = tape.sum(a)?;
                let m = tape.mean(b)?;
                let sm = tape.add(s, m)?;
                let e = tape.mse(a, b)?;
                let t = tape.add(sm, e)?;
                tape.add(t, d)
            },
        );
    }
}

#[test]
fn vector_structure_ops() {
    for seed in 0..CONFIGS {
        let (n, m, _) = rand_dims(seed + 300);
        check(
            seed,
            |ps, rng| {
                ps.insert("a", Tensor::randn(&[n], 1.0, rng)).unwrap();
                ps.insert("b", Tensor::randn(&[m], 1.0, rng)).unwrap();
            },
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let cat = tape.concat(a, b)?;
                let sl = tape.slice_vec(cat, 0, (n + m).min(n.max(1)))?;
                let el = tape.select_elem(cat, n + m - 1)?;
                let sq = tape.square(sl)?;
                let s = tape.sum(sq)?;
                tape.add(s, el)
            },
        );
    }
}

#[test]
fn matrix_ops() {
    for seed in 0..CONFIGS {
        let (m, k, n) = rand_dims(seed + 400);
        check(
            seed,
            |ps, rng| {
                ps.insert("a", Tensor::randn(&[m, k], 1.0, rng)).unwrap();
                ps.insert("b", Tensor::randn(&[k, n], 1.0, rng)).unwrap();
                ps.insert("x", Tensor::randn(&[k], 1.0, rng)).unwrap();
                ps.insert("v", Tensor::randn(&[k], 1.0, rng)).unwrap();
            },
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let x = tape.param(ps, "x")?;
                let v = tape.param(ps, "v")?;
                let ab = tape.matmul(a, b)?;
                let at = tape.transpose(a)?;
                let atv = tape.matmul(at, ab)?; // (k×m)·(m×n)
                let y = tape.matvec(a, x)?;
                let row = tape.select_row(atv, k - 1)?;
                let mr = tape.mean_rows(atv)?;
                let sub = tape.subset_rows_mean(atv, &[0, k - 1])?;
                let shifted = tape.add_row_broadcast(a, v)?;
                let s1 = tape.sum(shifted)?;
                let s2 = tape.sum(row)?;
                let s3 = tape.sum(mr)?;
                let s4 = tape.sum(sub)?;
                let s5 = tape.sum(y)?;
                let t1 = tape.add(s1, s2)?;
                let t2 = tape.add(s3, s4)?;
                let t3 = tape.add(t1, t2)?;
                tape.add(t3, s5)
            },
        );
    }
}

#[test]
fn matmul_grad_matches_column_sum_identity() {
    // d/dA sum(A·B) = row-broadcast of B's column sums; FD agrees to 1e−6.
    for seed in 0..CONFIGS {
        let (m, k, n) = rand_dims(seed + 500);
        let mut rng = rng_from_seed(seed + 500);
        let mut params = ParamSet::new();
        params.insert("a", Tensor::randn(&[m, k], 1.0, &mut rng)).unwrap();
        params.insert("b", Tensor::randn(&[k, n], 1.0, &mut rng)).unwrap();

        params.zero_grads();
        let mut tape = Tape::new();
        let a = tape.param(&params, "a").unwrap();
        let b = tape.param(&params, "b").unwrap();
        let ab = tape.matmul(a, b).unwrap();
        let loss = tape.sum(ab).unwrap();
        tape.backward(loss, &mut params).unwrap();

        let bt = params.get("b").unwrap();
        let mut col_sums = vec![0.0; k];
        for p in 0..k {
            col_sums[p] = (0..n).map(|j| bt.at2(p, j)).sum();
        }
        let ga = params.grad("a").unwrap();
        for i in 0..m {
            for p in 0..k {
                assert!((ga[i * k + p] - col_sums[p]).abs() < 1e-12);
            }
        }

        let res = check_grads(
            &mut params,
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let ab = tape.matmul(a, b)?;
                tape.sum(ab)
            },
            Some(&["a"]),
            DEFAULT_H,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(res.max_rel_err <= 1e-6, "rel err {}", res.max_rel_err);
    }
}

#[test]
fn column_slicing_ops() {
    for seed in 0..CONFIGS {
        let (m, n1, n2) = rand_dims(seed + 600);
        check(
            seed,
            |ps, rng| {
                ps.insert("a", Tensor::randn(&[m, n1], 1.0, rng)).unwrap();
                ps.insert("b", Tensor::randn(&[m, n2], 1.0, rng)).unwrap();
            },
            |tape, ps| {
                let a = tape.param(ps, "a")?;
                let b = tape.param(ps, "b")?;
                let cat = tape.hconcat(a, b)?;
                let left = tape.slice_cols(cat, 0, n1)?;
                let right = tape.slice_cols(cat, n1, n2)?;
                let ls = tape.square(left)?;
                let s1 = tape.sum(ls)?;
                let s2 = tape.sum(right)?;
                tape.add(s1, s2)
            },
        );
    }
}

#[test]
fn softmax_ops() {
    for seed in 0..CONFIGS {
        let (m, n0, _) = rand_dims(seed + 700);
        let n = n0 + 1; // at least 2 entries so one can stay unmasked
        let mask: Vec<bool> = (0..n).map(|j| j % 2 == 1).collect();
        let target = 0;
        check(
            seed,
            |ps, rng| {
                ps.insert("rows", Tensor::randn(&[m, n], 2.0, rng)).unwrap();
                ps.insert("logits", Tensor::randn(&[n], 2.0, rng)).unwrap();
            },
            move |tape, ps| {
                let rows = tape.param(ps, "rows")?;
                let logits = tape.param(ps, "logits")?;
                let sm = tape.softmax_rows(rows)?;
                let sq = tape.square(sm)?;
                let s1 = tape.sum(sq)?;
                let p = tape.masked_softmax(logits, &mask)?;
                let picked = tape.select_elem(p, target)?;
                let lp = tape.masked_logprob(logits, &mask, target)?;
                let t = tape.add(s1, picked)?;
                tape.add(t, lp)
            },
        );
    }
}
