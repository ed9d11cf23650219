use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn matmul_hand_fixture() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(&Tensor::from_rows(vec![vec![1.0], vec![1.0]]));
    let c = a.matmul(b);
    assert_eq!(c.value().data, vec![3.0, 7.0]);
}

#[test]
fn softmax_fixtures() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 4], vec![0.0; 4]));
    assert_eq!(x.softmax_rows().value().data, vec![0.25; 4]);

    let y = tape.constant(&Tensor::new(vec![1, 2], vec![2.0, 1.0]));
    let s = y.softmax_rows().value();
    // direct evaluation of e^x / sum e^x
    close(s.data[0], 0.73106, 1e-5);
    close(s.data[1], 0.26894, 1e-5);
}

#[test]
fn softmax_neg_inf_is_exact_zero() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 3], vec![1.0, f64::NEG_INFINITY, 2.0]));
    let s = x.softmax_rows().value();
    assert_eq!(s.data[1], 0.0);
    close(s.data.iter().sum::<f64>(), 1.0, 1e-12);
}

#[test]
fn backward_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
    let loss = x.mul(x).sum_all();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).data, vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_unused_leaf_gets_zero_grad() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let y = tape.leaf(&Tensor::scalar(5.0));
    let loss = x.square().sum_all();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(y).data, vec![0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    let y = x.square();
    assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
}

#[test]
fn backward_rejects_foreign_tape() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let x = t1.leaf(&Tensor::scalar(1.0));
    let loss = x.square();
    assert!(matches!(t2.backward(loss), Err(TensorError::DetachedGraph)));
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(vec![1, 5], 1.0, &mut rng);
    let target = 2usize;
    let err = gradcheck(
        |_tape, x| {
            let p = x.softmax_rows();
            let logp = p.log();
            logp.slice_cols(target, 1).neg().sum_all()
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn gradcheck_sum_of_squares_tight() {
    let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]);
    let err = gradcheck(|_, x| x.square().sum_all(), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "rel err {err}");
}

#[test]
fn gradcheck_all_ops() {
    // Every differentiable op against central differences on random input.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let checks: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>)> = vec![
        ("add", Box::new(|t: &Tape, x: Var| {
            let c = t.constant(&Tensor::new(vec![3, 4], (0..12).map(|i| i as f64).collect()));
            x.add(c).square().sum_all()
        })),
        ("sub_mul", Box::new(|_, x: Var| x.sub(x.scale(0.5)).mul(x).sum_all())),
        ("div", Box::new(|_, x: Var| x.div(x.square().add_scalar(1.0)).sum_all())),
        ("neg_exp", Box::new(|_, x: Var| x.neg().exp().sum_all())),
        ("log", Box::new(|_, x: Var| x.square().add_scalar(0.5).log().sum_all())),
        ("gelu", Box::new(|_, x: Var| x.gelu().sum_all())),
        ("sigmoid", Box::new(|_, x: Var| x.sigmoid().square().sum_all())),
        ("matmul", Box::new(|_, x: Var| x.matmul(x.transpose()).sum_all())),
        ("softmax", Box::new(|_, x: Var| {
            x.softmax_rows().square().sum_all()
        })),
        ("layer_norm", Box::new(|t: &Tape, x: Var| {
            let gain = t.leaf(&Tensor::new(vec![1, 4], vec![1.0, 2.0, 0.5, 1.5]));
            let bias = t.leaf(&Tensor::new(vec![1, 4], vec![0.1, -0.1, 0.0, 0.2]));
            x.layer_norm(gain, bias, 1e-5).square().sum_all()
        })),
        ("mean_axis0", Box::new(|_, x: Var| x.mean_axis0().square().sum_all())),
        ("sum_axis1", Box::new(|_, x: Var| x.sum_axis1().square().sum_all())),
        ("slices", Box::new(|t: &Tape, x: Var| {
            let a = x.slice_rows(0, 2);
            let b = x.slice_cols(1, 2);
            concat_rows(t, &[a.slice_cols(0, 2), b.slice_rows(1, 2)]).square().sum_all()
        })),
        ("concat_cols", Box::new(|t: &Tape, x: Var| {
            concat_cols(t, &[x, x.square()]).mean_all()
        })),
        ("gather_scatter", Box::new(|_, x: Var| {
            x.row_gather(&[2, 0, 0]).row_scatter_add(&[1, 1, 3], 5).square().sum_all()
        })),
        ("bias_mulcol", Box::new(|t: &Tape, x: Var| {
            let b = t.leaf(&Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.1, 0.0]));
            let w = t.leaf(&Tensor::new(vec![3, 1], vec![0.5, 2.0, -1.0]));
            x.add_bias_row(b).mul_col(w).square().sum_all()
        })),
        ("grouped", Box::new(|_, x: Var| {
            // 3 groups of 1 query over 1 key is degenerate; use the matrix as
            // 1 group of 3 queries over 3 keys.
            let s = x.grouped_dot(x.scale(0.7), 3, 3).softmax_rows();
            s.grouped_mix(x, 3, 3).square().sum_all()
        })),
        ("masked_softmax", Box::new(|_, x: Var| {
            let mask = vec![
                false, true, false, false, false, false, true, false, false, false, false, true,
            ];
            x.masked_fill(&mask, f64::NEG_INFINITY).softmax_rows().square().sum_all()
        })),
        ("broadcast", Box::new(|_, x: Var| {
            let m = x.mean_all();
            x.sub(m.broadcast_to(3, 4)).square().sum_all()
        })),
        ("row_combine", Box::new(|_, x: Var| {
            let combos = vec![
                RowCombo { idx: [0, 1, 2, 0], w: [0.25, 0.25, 0.5, 0.0] },
                RowCombo { idx: [1, 1, 0, 2], w: [0.1, 0.2, 0.3, 0.4] },
            ];
            x.weighted_row_combine(&combos).square().sum_all()
        })),
    ];
    for (name, f) in checks {
        let err = gradcheck(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let x = Tensor::new(vec![1, 4], vec![1.0, -1.5, 2.0, -0.3]);
    let err = gradcheck(|_, x| x.relu().square().sum_all(), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "rel err {err}");
}

#[test]
fn gradcheck_im2col_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::randn(vec![16, 2], 1.0, &mut rng); // 4x4, 2 channels
    let w = Tensor::randn(vec![18, 3], 0.5, &mut rng);
    let err = gradcheck(
        |t, x| {
            let wv = t.constant(&w);
            x.im2col_3x3(4, 4).matmul(wv).relu().square().sum_all()
        },
        &img,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_linearity() {
    // grads of a*L1 + b*L2 equal a*grad(L1) + b*grad(L2)
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
    let grad_of = |f: &dyn for<'t> Fn(Var<'t>) -> Var<'t>| {
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = f(xv);
        tape.backward(loss).unwrap();
        tape.grad(xv).data
    };
    fn l1<'t>(x: Var<'t>) -> Var<'t> {
        x.square().sum_all()
    }
    fn l2<'t>(x: Var<'t>) -> Var<'t> {
        x.exp().mean_all()
    }
    let (a, b) = (2.5, -0.75);
    let g1 = grad_of(&l1);
    let g2 = grad_of(&l2);
    let gc = grad_of(&|x: Var| l1(x).scale(a).add(l2(x).scale(b)));
    for i in 0..gc.len() {
        close(gc[i], a * g1[i] + b * g2[i], 1e-10);
    }
}

#[test]
fn forward_and_backward_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = xv.matmul(xv).softmax_rows().square().sum_all();
        tape.backward(loss).unwrap();
        (loss.item(), tape.grad(xv).data)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
#[should_panic(expected = "shape mismatch")]
fn add_shape_mismatch_panics() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    let b = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, 2.0]));
    let _ = a.add(b);
}

#[test]
fn param_store_grads_accumulate() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    {
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = wv.square().sum_all();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store);
    }
    assert_eq!(store.grad(w), &[2.0, 4.0]);
    // a second pass accumulates
    {
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = wv.sum_all();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store);
    }
    assert_eq!(store.grad(w), &[3.0, 5.0]);
    store.zero_grads();
    assert_eq!(store.grad(w), &[0.0, 0.0]);
}

#[test]
fn gradcheck_params_over_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(vec![3, 2], 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(vec![1, 2], 1.0, &mut rng));
    let x = Tensor::randn(vec![4, 3], 1.0, &mut rng);
    let err = gradcheck_params(
        &mut store,
        |tape, s| {
            let xv = tape.constant(&x);
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            xv.matmul(wv).add_bias_row(bv).gelu().square().mean_all()
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}
