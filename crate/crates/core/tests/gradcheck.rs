//! Central finite-difference checks for every differentiable operation.
//! Each op is checked over 10 seeded random inputs at h = 1e-5 in double
//! precision; the analytic/numeric max relative error must stay <= 1e-4.

use optok_core::rng;
use optok_core::tensor::gradcheck::{check, DEFAULT_H};
use optok_core::tensor::{Array, Tape, Var};
use optok_core::Result;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn assert_op<F>(name: &str, build: F, make_inputs: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Array>)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut r = rng::seeded(1000 + seed);
        let inputs = make_inputs(&mut r);
        let err = check(&build, &inputs, DEFAULT_H).unwrap();
        assert!(err <= TOL, "{name}: seed {seed} max rel err {err:.3e} > {TOL:.0e}");
    }
}

#[test]
fn matmul_grad_matches_finite_differences() {
    assert_op(
        "matmul",
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            Ok(t.sum(m))
        },
        |r| vec![Array::randn(&[3, 4], 0.0, 1.0, r), Array::randn(&[4, 2], 0.0, 1.0, r)],
    );
}

#[test]
fn matmul_grad_of_sum_is_column_sums_of_rhs() {
    // d/da sum(a @ b) = broadcast of b's column sums.
    let mut r = rng::seeded(5);
    let a = Array::randn(&[3, 4], 0.0, 1.0, &mut r);
    let b = Array::randn(&[4, 2], 0.0, 1.0, &mut r);
    let mut t = Tape::new();
    let va = t.var(a);
    let vb = t.constant(b.clone());
    let m = t.matmul(va, vb).unwrap();
    let loss = t.sum(m);
    t.backward(loss).unwrap();
    let ga = t.grad(va).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let col_sum: f64 = (0..2).map(|j| b.data[p * 2 + j]).sum();
            assert!((ga[i * 4 + p] - col_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_and_shape_op_grads() {
    assert_op(
        "add+mul+scale",
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[0])?;
            let s = t.scale(m, -1.7);
            Ok(t.sum(s))
        },
        |r| vec![Array::randn(&[4, 3], 0.0, 1.0, r), Array::randn(&[4, 3], 0.0, 1.0, r)],
    );
    assert_op(
        "transpose+reshape+slice+concat",
        |t, v| {
            let tr = t.transpose(v[0])?;
            let rs = t.reshape(tr, &[2, 6])?;
            let top = t.slice_rows(rs, 0, 1)?;
            let bot = t.slice_rows(rs, 1, 1)?;
            let cat = t.concat_rows(&[bot, top])?;
            let left = t.slice_cols(cat, 0, 2)?;
            let right = t.slice_cols(cat, 2, 4)?;
            let both = t.concat_cols(&[right, left])?;
            let sq = t.mul(both, both)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[4, 3], 0.0, 1.0, r)],
    );
}

#[test]
fn gelu_softmax_grads() {
    assert_op(
        "gelu",
        |t, v| {
            let g = t.gelu(v[0]);
            let sq = t.mul(g, g)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[3, 5], 0.0, 2.0, r)],
    );
    assert_op(
        "softmax",
        |t, v| {
            let s = t.softmax(v[0], 1)?;
            let w = t.mul(s, v[1])?;
            Ok(t.sum(w))
        },
        |r| vec![Array::randn(&[3, 5], 0.0, 1.0, r), Array::randn(&[3, 5], 0.0, 1.0, r)],
    );
}

#[test]
fn norm_grads() {
    assert_op(
        "layer_norm",
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = t.mul(y, v[3])?;
            Ok(t.sum(w))
        },
        |r| {
            vec![
                Array::randn(&[4, 6], 0.5, 1.5, r),
                Array::randn(&[6], 1.0, 0.2, r),
                Array::randn(&[6], 0.0, 0.2, r),
                Array::randn(&[4, 6], 0.0, 1.0, r),
            ]
        },
    );
    assert_op(
        "group_norm",
        |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            let w = t.mul(y, v[3])?;
            Ok(t.sum(w))
        },
        |r| {
            vec![
                Array::randn(&[4, 3, 3], -0.5, 2.0, r),
                Array::randn(&[4], 1.0, 0.2, r),
                Array::randn(&[4], 0.0, 0.2, r),
                Array::randn(&[4, 3, 3], 0.0, 1.0, r),
            ]
        },
    );
}

#[test]
fn conv_grads() {
    assert_op(
        "conv2d_depthwise",
        |t, v| {
            let y = t.conv2d_depthwise(v[0], v[1], 2, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[2, 6, 6], 0.0, 1.0, r), Array::randn(&[2, 3, 3], 0.0, 0.5, r)],
    );
    assert_op(
        "conv2d_pointwise",
        |t, v| {
            let y = t.conv2d_pointwise(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[3, 4, 4], 0.0, 1.0, r), Array::randn(&[2, 3], 0.0, 0.5, r)],
    );
    assert_op(
        "conv2d_standard",
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[2, 5, 5], 0.0, 1.0, r), Array::randn(&[3, 2, 3, 3], 0.0, 0.5, r)],
    );
}

#[test]
fn pool_embedding_cross_entropy_grads() {
    assert_op(
        "adaptive_avg_pool2d",
        |t, v| {
            let y = t.adaptive_avg_pool2d(v[0], 3, 2)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[2, 7, 5], 0.0, 1.0, r)],
    );
    assert_op(
        "embedding_lookup",
        |t, v| {
            let y = t.embedding_lookup(v[0], &[0, 2, 2, 1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        |r| vec![Array::randn(&[3, 4], 0.0, 1.0, r)],
    );
    assert_op(
        "cross_entropy_from_logits",
        |t, v| t.cross_entropy_from_logits(v[0], &[1, -1, 0, 4], -1),
        |r| vec![Array::randn(&[4, 5], 0.0, 2.0, r)],
    );
}
