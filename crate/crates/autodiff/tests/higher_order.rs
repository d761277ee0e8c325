use ecgqa_autodiff::gradcheck::{self, Draw};
use ecgqa_autodiff::{Error, Tape, Tensor};

#[test]
fn half_squared_norm_gradient_is_theta() {
    let tape = Tape::new();
    let theta = tape.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let loss = theta.mul(&theta).unwrap().sum().unwrap().scale(0.5).unwrap();
    let g = tape.grad(&loss, &[theta], false).unwrap();
    assert_eq!(g[0].value().data(), &[1.0, -2.0]);
}

#[test]
fn second_derivative_of_cube() {
    let tape = Tape::new();
    let theta = tape.leaf(Tensor::scalar(2.0));
    let loss = theta.powf(3.0).unwrap();
    let g = tape.grad(&loss, std::slice::from_ref(&theta), true).unwrap().remove(0);
    assert_eq!(g.item().unwrap(), 12.0);
    assert_eq!(g.level(), 1);
    let h = tape.grad(&g, &[theta], false).unwrap().remove(0);
    assert_eq!(h.item().unwrap(), 12.0);
}

#[test]
fn meta_gradient_through_one_sgd_step_matches_finite_differences() {
    // inner: g(t) = 0.5 t^T A t, outer: f(u) = 0.5 |u - c|^2, u = t - alpha A t
    let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let c = Tensor::new(&[2, 1], vec![0.3, -0.7]).unwrap();
    let theta = Tensor::new(&[2, 1], vec![0.9, -0.4]).unwrap();
    let alpha = 0.1;

    let tape = Tape::new();
    let t = tape.leaf(theta.clone());
    let av = tape.constant(a.clone());
    let inner = t.transpose().unwrap().matmul(&av.matmul(&t).unwrap()).unwrap().sum().unwrap().scale(0.5).unwrap();
    let g = tape.grad(&inner, std::slice::from_ref(&t), true).unwrap().remove(0);
    let u = t.sub(&g.scale(alpha).unwrap()).unwrap();
    let diff = u.add_const(&c.map(|v| -v)).unwrap();
    let outer = diff.mul(&diff).unwrap().sum().unwrap().scale(0.5).unwrap();
    let meta = tape.grad(&outer, &[t], false).unwrap().remove(0);

    let composed = |th: &Tensor| -> ecgqa_autodiff::Result<f64> {
        let x = th.data();
        let at = [a.at(0, 0) * x[0] + a.at(0, 1) * x[1], a.at(1, 0) * x[0] + a.at(1, 1) * x[1]];
        Ok((0..2).map(|i| 0.5 * (x[i] - alpha * at[i] - c.data()[i]).powi(2)).sum())
    };
    let numeric = gradcheck::numeric_grad(composed, &theta, 1e-5).unwrap();
    assert!(gradcheck::relative_error(&meta.value(), &numeric) < 1e-5);
}

#[test]
fn second_order_probe_over_random_instances() {
    for seed in 0..100 {
        let err = gradcheck::second_order_probe(seed).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn first_order_treatment_differs_from_second_order() {
    let tape = Tape::new();
    let t = tape.leaf(Tensor::new(&[3], vec![0.2, -0.5, 1.1]).unwrap());
    let inner = t.powf(3.0).unwrap().sum().unwrap();
    let g2 = tape.grad(&inner, std::slice::from_ref(&t), true).unwrap().remove(0);
    let g1 = tape.grad(&inner, std::slice::from_ref(&t), false).unwrap().remove(0);
    let outer = |g: &ecgqa_autodiff::Var| {
        let u = t.sub(&g.scale(0.1).unwrap()).unwrap();
        u.mul(&u).unwrap().sum().unwrap()
    };
    let so = tape.grad(&outer(&g2), std::slice::from_ref(&t), false).unwrap().remove(0);
    let fo = tape.grad(&outer(&g1), std::slice::from_ref(&t), false).unwrap().remove(0);
    assert!(so.value().max_abs_diff(&fo.value()) > 1e-3);
}

#[test]
fn third_recorded_level_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.5));
    let y = x.powf(4.0).unwrap();
    let g1 = tape.grad(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
    let g2 = tape.grad(&g1, std::slice::from_ref(&x), true).unwrap().remove(0);
    assert_eq!(g2.level(), 2);
    assert!(matches!(
        tape.grad(&g2, std::slice::from_ref(&x), true),
        Err(Error::NestingTooDeep { max: 2 })
    ));
    // Differentiating level 2 without recording is still allowed: 24 x.
    let g3 = tape.grad(&g2, &[x], false).unwrap().remove(0);
    assert!((g3.item().unwrap() - 36.0).abs() < 1e-12);
}

#[test]
fn grad_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.grad(&x, std::slice::from_ref(&x), false), Err(Error::NotScalar(_))));
    let other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0));
    let loss = x.sum().unwrap();
    assert!(matches!(tape.grad(&loss, &[y], false), Err(Error::ForeignVar)));
}

#[test]
fn unreachable_target_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let unused = tape.leaf(Tensor::zeros(&[3]));
    let loss = x.mul(&x).unwrap();
    let g = tape.grad(&loss, &[x, unused], false).unwrap();
    assert_eq!(g[1].value().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut d = Draw::new(42);
        let cases = gradcheck::primitive_cases(9);
        let mut out = Vec::new();
        for case in cases {
            let tape = Tape::new();
            let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = (case.f)(&vars).unwrap();
            out.push(y.item().unwrap().to_bits());
            for g in tape.grad(&y, &vars, false).unwrap() {
                out.extend(g.value().data().iter().map(|v| v.to_bits()));
            }
        }
        out.push(d.uniform().to_bits());
        out
    };
    assert_eq!(run(), run());
}
