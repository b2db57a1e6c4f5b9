mod common;

use common::{op_case, CASES_PER_OP, FD_TOL, OPS};

fn check_op(op: &str) {
    for seed in 0..CASES_PER_OP {
        let err = op_case(op, seed);
        assert!(err < FD_TOL, "{op} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    for op in ["add", "sub", "mul", "scale", "exp", "log", "relu"] {
        check_op(op);
    }
}

#[test]
fn reductions_and_reshapes() {
    for op in ["sum", "mean", "reshape", "flatten"] {
        check_op(op);
    }
}

#[test]
fn layers() {
    for op in ["linear", "conv2d", "maxpool2d", "softmax", "nll_loss"] {
        check_op(op);
    }
}

#[test]
fn table_ops() {
    for op in ["gather_rows", "pair_cross_entropy", "knn_interp"] {
        check_op(op);
    }
}

#[test]
fn composite_full_loss() {
    check_op("L_full");
}

#[test]
fn every_op_is_covered() {
    assert_eq!(OPS.len(), 20);
    for op in OPS {
        assert!(op_case(op, 1000).is_finite());
    }
}

#[test]
fn half_squared_norm_gradient_is_the_input() {
    use np_robust::autodiff::Tape;
    use np_robust::tensor::Tensor;
    let v = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &v);
}

#[test]
fn two_layer_mlp_matches_differences() {
    use np_robust::autodiff::{Tape, Var};
    use rand::SeedableRng;
    for seed in 0..common::CASES_PER_OP {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels = [0usize, 2, 1, 2];
        let ins = [
            common::uniform(&[4, 5], -1.0, 1.0, &mut r),
            common::uniform(&[6, 5], -1.0, 1.0, &mut r),
            common::uniform(&[6], -1.0, 1.0, &mut r),
            common::uniform(&[3, 6], -1.0, 1.0, &mut r),
            common::uniform(&[3], -1.0, 1.0, &mut r),
        ];
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.linear(v[0], v[1], v[2])?;
            let h = t.exp(h);
            let o = t.linear(h, v[3], v[4])?;
            let p = t.softmax(o)?;
            t.nll_loss(p, &labels)
        };
        let err = common::grad_check(&ins, &f, usize::MAX, &mut r);
        assert!(err < FD_TOL, "seed {seed}: {err:e}");
    }
}
