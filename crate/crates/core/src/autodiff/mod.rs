//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! Everything trainable in the workspace (denoiser, field MLPs, embeddings,
//! the retriever) differentiates through this module. The tape is rebuilt
//! per forward pass; see [`tape::Tape`].

pub mod fdcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, Optimizer, ParamSet, Sgd};
pub use tape::{BinOp, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::fdcheck::{central_diff_grad, rel_error_norm};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf_from(tape: &Tape, data: &[f32]) -> Var {
        tape.leaf(&Tensor::from_vec(&[data.len()], data.to_vec()))
    }

    #[test]
    fn square_gradient_at_three() {
        let tape = Tape::new();
        let x = leaf_from(&tape, &[3.0]);
        let y = x.mul(&x).sum();
        tape.backward(&y);
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = leaf_from(&tape, &[2.0]);
        let y = leaf_from(&tape, &[5.0]);
        let z = x.stop_gradient().mul(&y).sum();
        tape.backward(&z);
        assert!(x.grad().is_none(), "stop_gradient must block the x path");
        assert_eq!(y.grad().unwrap().data(), &[2.0]);
    }

    /// Builds a scalar-valued graph from one primitive and checks its
    /// analytic gradient against central differences. The scalarization
    /// subtracts the baseline output as a constant, which cancels the large
    /// additive term that would otherwise dominate f32 rounding in the
    /// difference quotient (the gradient is unchanged by a constant shift).
    fn fd_check_unary(name: &str, f: impl Fn(&Var) -> Var, xs: &[f32], tol: f32) {
        let base = {
            let tape = Tape::new();
            let x = tape.constant_from(&[xs.len()], xs.to_vec());
            f(&x).value()
        };
        let scalarize = |v: &[f32]| -> (Tape, Var, Var) {
            let tape = Tape::new();
            let x = leaf_from(&tape, v);
            let y = f(&x).reshape(&[base.numel()]).sub(&tape.constant(&base)).sum();
            (tape, x, y)
        };
        let grad_analytic = {
            let (tape, x, y) = scalarize(xs);
            tape.backward(&y);
            x.grad().unwrap().into_data()
        };
        let grad_fd = central_diff_grad(xs, 1e-3, |v| scalarize(v).2.scalar_value());
        let err = rel_error_norm(&grad_analytic, &grad_fd);
        assert!(err < tol, "{name}: rel error {err} >= {tol}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f32> = Tensor::randn(&[24], 0.8, &mut rng).into_data();
        // keep away from the relu/abs kinks so the FD stencil stays valid
        let xs_off_kink: Vec<f32> =
            xs.iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
        let xs_pos: Vec<f32> = xs.iter().map(|&v| v.abs() + 0.2).collect();

        fd_check_unary("exp", |x| x.exp(), &xs, 1e-3);
        fd_check_unary("ln", |x| x.ln(), &xs_pos, 1e-3);
        fd_check_unary("sqrt", |x| x.sqrt(), &xs_pos, 1e-3);
        fd_check_unary("sin", |x| x.sin(), &xs, 1e-3);
        fd_check_unary("cos", |x| x.cos(), &xs, 1e-3);
        fd_check_unary("relu", |x| x.relu(), &xs_off_kink, 1e-3);
        fd_check_unary("abs", |x| x.abs(), &xs_off_kink, 1e-3);
        fd_check_unary("sigmoid", |x| x.sigmoid(), &xs, 1e-3);
        fd_check_unary("softplus", |x| x.softplus(), &xs, 1e-3);
        fd_check_unary("squareplus", |x| x.squareplus(1.0), &xs, 1e-3);
        fd_check_unary("squareplus_prime", |x| x.squareplus_prime(1.0), &xs, 1e-3);
        fd_check_unary("norm1", |x| x.norm(1), &xs_off_kink, 1e-3);
        fd_check_unary("norm2", |x| x.norm(2), &xs, 1e-3);
        fd_check_unary("cumsum", |x| x.cumsum_exclusive(0).mul(x), &xs, 1e-3);
        fd_check_unary("slice", |x| x.slice(0, 3, 9).mul(&x.slice(0, 0, 9)), &xs, 1e-3);
    }

    #[test]
    fn binary_and_matmul_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = Tensor::randn(&[12], 0.7, &mut rng).into_data();
        // gradient w.r.t. the left operand of a broadcasted product + matmul mix
        let run = |av: &[f32]| -> (f32, Vec<f32>) {
            let tape = Tape::new();
            let a = leaf_from(&tape, av);
            let b = tape.constant_from(&[4], vec![0.5, -1.5, 2.0, 0.25]);
            let m = tape.constant_from(&[4, 3], (0..12).map(|i| (i as f32 * 0.13).sin()).collect());
            let prod = a.reshape(&[3, 4]).mul(&b); // broadcast [3,4]*[4]
            let out = prod.matmul(&m); // [3,3]
            let loss = out.mul(&out).mean();
            tape.backward(&loss);
            (loss.scalar_value(), a.grad().map(|t| t.into_data()).unwrap_or_default())
        };
        let (_, analytic) = run(&a0);
        let fd = central_diff_grad(&a0, 1e-3, |v| run(v).0);
        assert!(rel_error_norm(&analytic, &fd) < 1e-3);
    }

    #[test]
    fn three_layer_mlp_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let w1 = params.add("w1", Tensor::randn(&[5, 8], 0.5, &mut rng));
        let b1 = params.add("b1", Tensor::zeros(&[8]));
        let w2 = params.add("w2", Tensor::randn(&[8, 8], 0.5, &mut rng));
        let b2 = params.add("b2", Tensor::zeros(&[8]));
        let w3 = params.add("w3", Tensor::randn(&[8, 2], 0.5, &mut rng));
        let b3 = params.add("b3", Tensor::zeros(&[2]));
        let input = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let target = Tensor::randn(&[4, 2], 1.0, &mut rng);

        let forward = |params: &ParamSet| -> (Tape, Var) {
            let tape = Tape::new();
            let x = tape.constant(&input);
            let h1 = x.matmul(&tape.param(params, w1)).add(&tape.param(params, b1)).softplus();
            let h2 = h1.matmul(&tape.param(params, w2)).add(&tape.param(params, b2)).softplus();
            let y = h2.matmul(&tape.param(params, w3)).add(&tape.param(params, b3));
            let d = y.sub(&tape.constant(&target));
            let loss = d.mul(&d).mean();
            (tape, loss)
        };

        let (tape, loss) = forward(&params);
        tape.backward(&loss);
        let mut probe = params.clone();
        tape.accumulate_params(&mut probe);

        for idx in 0..probe.len() {
            let name = probe.name(idx).to_string();
            let analytic = probe.value(idx).grad().unwrap().to_vec();
            let x0 = probe.value(idx).data().to_vec();
            let fd = central_diff_grad(&x0, 1e-3, |v| {
                let mut p = params.clone();
                p.value_mut(idx).data_mut().copy_from_slice(v);
                let (_, loss) = forward(&p);
                loss.scalar_value()
            });
            let err = rel_error_norm(&analytic, &fd);
            assert!(err < 1e-3, "{name}: rel error {err}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant_from(&[2, 3], vec![0.0; 6]);
        let b = tape.constant_from(&[4], vec![0.0; 4]);
        let err = tape.binary_checked(BinOp::Add, &a, &b).unwrap_err();
        assert_eq!(err.category(), "dimension");
        let err = tape.matmul_checked(&a, &b).unwrap_err();
        assert_eq!(err.category(), "dimension");
    }

    #[test]
    fn gradient_accumulation_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::randn(&[16], 1.0, &mut rng));
        let batches: Vec<Tensor> =
            (0..6).map(|_| Tensor::randn(&[16], 1.0, &mut rng)).collect();

        let contribution = |params: &ParamSet, t: &Tensor| {
            let tape = Tape::new();
            let wv = tape.param(params, w);
            let loss = wv.mul(&tape.constant(t)).sum();
            tape.backward(&loss);
            let mut p = params.clone();
            tape.accumulate_params(&mut p);
            p
        };

        let mut fwd = params.clone();
        for t in &batches {
            fwd = contribution(&fwd, t);
        }
        let mut rev = params.clone();
        for t in batches.iter().rev() {
            rev = contribution(&rev, t);
        }
        let gf = fwd.value(w).grad().unwrap();
        let gr = rev.value(w).grad().unwrap();
        for (a, b) in gf.iter().zip(gr) {
            assert!((a - b).abs() <= 1e-6, "accumulation order changed the gradient");
        }
    }

    #[test]
    fn adam_descends_a_convex_bowl() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(&[1], vec![1.0]));
        let mut opt = Optimizer::adam(1e-2);
        let tape = Tape::new();
        let v = tape.param(&params, x);
        let loss = v.mul(&v).sum();
        tape.backward(&loss);
        tape.accumulate_params(&mut params);
        opt.step(&mut params).unwrap();
        assert!(params.value(x).data()[0].abs() < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(&[3], vec![0.5, -0.25, 2.0]));
        let before = params.value(x).data().to_vec();
        let mut opt = Optimizer::adam(1e-2);
        opt.step(&mut params).unwrap();
        assert_eq!(params.value(x).data(), before.as_slice());
        let mut sgd = Optimizer::sgd(1e-2);
        sgd.step(&mut params).unwrap();
        assert_eq!(params.value(x).data(), before.as_slice());
    }

    #[test]
    fn adam_reaches_quadratic_minimum_in_200_steps() {
        // f(x) = (x0 - 0.3)^2 + 2 (x1 + 0.7)^2
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(&[2], vec![1.0, 1.0]));
        let mut opt = Optimizer::adam(5e-2);
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            let tape = Tape::new();
            let v = tape.param(&params, x);
            let c = tape.constant_from(&[2], vec![0.3, -0.7]);
            let d = v.sub(&c);
            let w = tape.constant_from(&[2], vec![1.0, 2.0]);
            let loss = d.mul(&d).mul(&w).sum();
            tape.backward(&loss);
            tape.accumulate_params(&mut params);
            opt.step(&mut params).unwrap();
            last = loss.scalar_value();
        }
        assert!(last < 1e-4, "final loss {last}");
    }

    #[test]
    fn nonpositive_lr_is_a_config_error() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::zeros(&[1]));
        let mut opt = Optimizer::adam(0.0);
        assert_eq!(opt.step(&mut params).unwrap_err().category(), "config");
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut params = ParamSet::new();
            let w = params.add("w", Tensor::randn(&[6, 4], 0.4, &mut rng));
            let mut opt = Optimizer::adam(1e-2);
            for _ in 0..25 {
                let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
                let tape = Tape::new();
                let y = tape.constant(&x).matmul(&tape.param(&params, w));
                let loss = y.mul(&y).mean();
                tape.backward(&loss);
                tape.accumulate_params(&mut params);
                opt.step(&mut params).unwrap();
            }
            params.value(w).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn transpose_concat_and_maxaxis_backward() {
        let tape = Tape::new();
        let a = leaf_from(&tape, &[1.0, 2.0, 3.0, 4.0]);
        let m = a.reshape(&[2, 2]);
        let t = m.transpose();
        let cat = m.concat(&t, 1); // [2,4]
        let mx = cat.max_axis(1); // [2]
        let loss = mx.sum();
        tape.backward(&loss);
        // row 0 of cat = [1,2,1,3] -> max 3 at transposed (1,0) = a[2]
        // row 1 of cat = [3,4,2,4] -> max 4 at first occurrence = a[3]
        assert_eq!(a.grad().unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
