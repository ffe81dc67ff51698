use magma_tensor::gradcheck::{max_rel_error, numeric_grad};
use magma_tensor::{concat, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares the tape gradient of a scalar function of one input against
/// central differences.
fn audit<F>(x: &Tensor, tol: f64, f: F)
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(v);
    let analytic = tape.backward(out).unwrap().get_or_zeros(v);
    let numeric = numeric_grad(x, H, |p| {
        let t = Tape::new();
        f(t.leaf(p.clone(), false)).item()
    });
    let err = max_rel_error(&analytic, &numeric, 1e-6);
    assert!(err < tol, "relative error {err:e}\nanalytic {analytic:?}\nnumeric  {numeric:?}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let bc = b.clone();
        audit(&a, 1e-6, move |v| {
            let b = v.tape().constant(bc.clone());
            v.matmul(&b).unwrap().sum().unwrap()
        });
        let ac = a.clone();
        audit(&b, 1e-6, move |v| {
            let a = v.tape().constant(ac.clone());
            a.matmul(&v).unwrap().sum().unwrap()
        });
    }
}

#[test]
fn composite_gaussian_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = random(&mut rng, &[6]);
        audit(&x, 1e-6, |v| v.square().unwrap().scale(-0.5).unwrap().exp().unwrap().sum().unwrap());
    }
}

#[test]
fn mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = random(&mut rng, &[3, 5]);
        audit(&x, 1e-8, |v| v.mean().unwrap());
        audit(&x, 1e-8, |v| {
            let m = v.mean_axes(&[0]).unwrap();
            m.mul(&m).unwrap().sum().unwrap()
        });
    }
}

#[test]
fn elementwise_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x = random(&mut rng, &[2, 3]);
        let pos = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        audit(&pos, 1e-6, |v| v.log().unwrap().sum().unwrap());
        audit(&pos, 1e-6, |v| v.sqrt().unwrap().sum().unwrap());
        audit(&pos, 1e-6, |v| {
            let one = v.tape().scalar(1.0);
            one.div(&v).unwrap().sum().unwrap()
        });
        audit(&x, 1e-6, |v| v.gelu().unwrap().sum().unwrap());
        audit(&x, 1e-6, |v| {
            let w = v.sub(&v.scale(0.3).unwrap()).unwrap().add_scalar(2.0).unwrap();
            w.mul(&v).unwrap().neg().unwrap().sum().unwrap()
        });
    }
}

#[test]
fn softmax_layer_norm_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = random(&mut rng, &[2, 3, 4]);
        let weights = random(&mut rng, &[2, 3, 4]);
        let wc = weights.clone();
        audit(&x, 1e-4, move |v| {
            let w = v.tape().constant(wc.clone());
            v.softmax().unwrap().mul(&w).unwrap().sum().unwrap()
        });
        let wc = weights.clone();
        audit(&x, 1e-4, move |v| {
            let w = v.tape().constant(wc.clone());
            v.log_softmax().unwrap().mul(&w).unwrap().sum().unwrap()
        });
        let gain = random(&mut rng, &[4]);
        let bias = random(&mut rng, &[4]);
        let (gc, bc, wc) = (gain.clone(), bias.clone(), weights.clone());
        audit(&x, 1e-4, move |v| {
            let t = v.tape();
            let y = v
                .layer_norm(&t.constant(gc.clone()), &t.constant(bc.clone()), 1e-6)
                .unwrap();
            y.mul(&t.constant(wc.clone())).unwrap().sum().unwrap()
        });
        let (xc, wc) = (x.clone(), weights.clone());
        audit(&gain, 1e-4, move |g| {
            let t = g.tape();
            let b = t.constant(Tensor::zeros(&[4]));
            let y = t.constant(xc.clone()).layer_norm(&g, &b, 1e-6).unwrap();
            y.mul(&t.constant(wc.clone())).unwrap().sum().unwrap()
        });
        let w = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5]);
        let (wc, bc) = (w.clone(), b.clone());
        audit(&x, 1e-4, move |v| {
            let t = v.tape();
            let y = v.linear(&t.constant(wc.clone()), Some(&t.constant(bc.clone()))).unwrap();
            y.square().unwrap().sum().unwrap()
        });
    }
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let x = random(&mut rng, &[2, 3, 4]);
        let probe = random(&mut rng, &[4, 2, 3]);
        let pc = probe.clone();
        audit(&x, 1e-6, move |v| {
            let p = v.tape().constant(pc.clone());
            v.permute(&[2, 0, 1]).unwrap().mul(&p).unwrap().sum().unwrap()
        });
        audit(&x, 1e-6, |v| {
            let a = v.narrow(1, 1, 2).unwrap();
            let b = v.narrow(1, 0, 1).unwrap();
            let c = concat(&[a, b, a], 1).unwrap();
            let g = c.gather_rows(&[vec![3, 0, 0], vec![1, 2, 3]]).unwrap();
            g.square().unwrap().sum().unwrap()
        });
        let tok = random(&mut rng, &[4]);
        audit(&tok, 1e-6, |v| {
            v.broadcast_to(&[2, 3, 4]).unwrap().gelu().unwrap().sum().unwrap()
        });
        let xc = x.clone();
        audit(&random(&mut rng, &[3, 4]), 1e-6, move |v| {
            let base = v.tape().constant(xc.clone());
            base.add_broadcast(&v).unwrap().square().unwrap().sum().unwrap()
        });
    }
}

#[test]
fn bmm_and_matrix_helpers_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[2, 4, 2]);
        let bc = b.clone();
        audit(&a, 1e-6, move |v| {
            let b = v.tape().constant(bc.clone());
            v.bmm(&b).unwrap().square().unwrap().sum().unwrap()
        });
        let ac = a.clone();
        audit(&b, 1e-6, move |v| {
            let a = v.tape().constant(ac.clone());
            a.bmm(&v).unwrap().square().unwrap().sum().unwrap()
        });
        let m = random(&mut rng, &[4, 3]);
        let s = random(&mut rng, &[4]);
        let mc = m.clone();
        audit(&s, 1e-6, move |v| {
            let t = v.tape();
            let m = t.constant(mc.clone());
            let r = m.row_scale(&v).unwrap();
            let d = v.diag_embed().unwrap();
            d.matmul(&r).unwrap().square().unwrap().sum().unwrap()
        });
        let sc = random(&mut rng, &[3]);
        audit(&m, 1e-6, move |v| {
            let t = v.tape();
            let c = v.col_scale(&t.constant(sc.clone())).unwrap();
            let sq = c.matmul(&c.transpose().unwrap()).unwrap();
            sq.trace().unwrap()
        });
        audit(&m, 1e-6, |v| {
            let d = v.pairwise_sq_dists().unwrap();
            d.scale(-0.7).unwrap().exp().unwrap().sum().unwrap()
        });
    }
}

#[test]
fn max_gradient_away_from_kinks() {
    // Entries are well separated, so every point is far from a tie.
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.9, -0.4, 1.5, 0.2, -0.8]).unwrap();
    audit(&x, 1e-6, |v| v.max_axes(&[1]).unwrap().square().unwrap().sum().unwrap());
}

#[test]
fn repeated_backward_accumulates() {
    let mut param = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
    for _ in 0..2 {
        let tape = Tape::new();
        let p = tape.param(&param);
        let g = tape.backward(p.square().unwrap().sum().unwrap()).unwrap();
        param.accumulate_grad(g.get(p).unwrap()).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[4.0, -8.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[5, 6]);
        let w = random(&mut rng, &[6, 3]);
        let tape = Tape::new();
        let av = tape.constant(a);
        let wv = tape.leaf(w, true);
        let y = av.matmul(&wv).unwrap().softmax().unwrap().log().unwrap().mean().unwrap();
        tape.backward(y).unwrap().get(wv).unwrap().to_vec()
    };
    let (g1, g2) = (run(), run());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let a = random(&mut rng, &[8, 8]);
        let b = random(&mut rng, &[8, 8]);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                let got = c.at(&[i, j]);
                assert!((got - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = x.softmax().unwrap().value();
        for row in s.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("enc.block{i}.w"), random(&mut rng, s)))
            .collect();
        let mut bytes = Vec::new();
        magma_tensor::checkpoint::write_checkpoint(&mut bytes, &entries).unwrap();
        let back = magma_tensor::checkpoint::read_checkpoint(&bytes[..]).unwrap();
        prop_assert_eq!(back, entries);
    }
}
