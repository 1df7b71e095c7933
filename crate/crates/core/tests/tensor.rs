mod common;

use common::{gradient_check, random_tensor};
use prl::rng::Rng;
use prl::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var};
use proptest::prelude::*;

type Unary = fn(&mut Graph, Var) -> Result<Var, TensorError>;

const UNARY: [Unary; 5] = [Graph::sigmoid, Graph::tanh, Graph::softmax, Graph::log_softmax, Graph::relu];

fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(random_tensor(&mut Rng::new(11), &shape, -1.0, 1.0))?;
    let p = g.mul(out, c)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, spread in 0.1f64..80.0) {
        let x = random_tensor(&mut Rng::new(seed), &[rows, cols], -spread, spread);
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn three_op_chain_matches_finite_differences(
        seed in any::<u64>(),
        m in 1usize..4,
        k in 1usize..4,
        n in 2usize..5,
        op in 0usize..UNARY.len(),
    ) {
        let mut rng = Rng::new(seed);
        let inputs = [random_tensor(&mut rng, &[m, k], -2.0, 2.0), random_tensor(&mut rng, &[k, n], -2.0, 2.0), random_tensor(&mut rng, &[n], -2.0, 2.0)];
        let err = gradient_check(&inputs, |g, v| {
            let a = g.matmul(v[0], v[1])?;
            let a = g.add(a, v[2])?;
            let a = UNARY[op](g, a)?;
            weighted_sum(g, a)
        })
        .unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn every_reachable_leaf_gets_a_gradient(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.param(random_tensor(&mut rng, &[n], -2.0, 2.0)).unwrap();
        let b = g.param(random_tensor(&mut rng, &[n], -2.0, 2.0)).unwrap();
        let unused = g.param(random_tensor(&mut rng, &[n], -2.0, 2.0)).unwrap();
        let c = g.mul(a, b).unwrap();
        let t = g.tanh(c).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(grads.get(a).unwrap().shape(), &[n]);
        prop_assert_eq!(grads.get(b).unwrap().shape(), &[n]);
        prop_assert!(grads.get(unused).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn dropout_rate_and_rescaling_over_many_samples() {
    let n = 100_000;
    for p in [0.1, 0.25, 0.5] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n], 1.0)).unwrap();
        let mut rng = Rng::new(42);
        let y = g.dropout(x, p, true, &mut rng).unwrap();
        let out = g.value(y).data();
        let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - p).abs() <= 0.02, "p={p}: zero fraction {zeros}");
        let keep = 1.0 / (1.0 - p);
        assert!(out.iter().all(|&v| v == 0.0 || v == keep));

        let mut rng = Rng::new(42);
        let e = g.dropout(x, p, false, &mut rng).unwrap();
        assert_eq!(g.value(e).data(), g.value(x).data());
    }
}

#[test]
fn adam_two_constant_gradient_steps_match_unrolled_recurrence() {
    let cfg = AdamConfig::default();
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::from_vec(vec![0.3, -1.2]));
    let mut adam = Adam::new(cfg, &store);
    let grad = Tensor::from_vec(vec![0.5, -2.0]);
    for _ in 0..2 {
        adam.step(&mut store, &[Some(&grad)]).unwrap();
    }
    let expected: Vec<f64> = [0.3, -1.2]
        .iter()
        .zip(grad.data())
        .map(|(&w0, &gr)| {
            let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
            for t in 1..=2 {
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * gr;
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * gr * gr;
                let m_hat = m / (1.0 - cfg.beta1.powi(t));
                let v_hat = v / (1.0 - cfg.beta2.powi(t));
                w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
            w
        })
        .collect();
    for (a, b) in store.get(id).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert_eq!(adam.step_count(), 2);
}

#[test]
fn forward_values_stay_finite_on_finite_inputs() {
    let mut rng = Rng::new(8);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut rng, &[4, 6], -700.0, 700.0)).unwrap();
    for op in UNARY {
        let y = op(&mut g, x).unwrap();
        assert!(g.value(y).is_finite());
    }
}
