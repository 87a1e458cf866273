#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttsn_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return g.reshape(out, &[1]);
    }
    let w = g.constant(random_tensor(&shape, seed ^ 0x5eed));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

pub fn relative_error(a: &Tensor, n: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(n.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.l2_norm().max(n.l2_norm()).max(1e-6)
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).item()
}

/// Worst relative error between analytic and central-difference gradients
/// over all `inputs`. `build` must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(input.shape());
        for i in 0..input.numel() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let plus = evaluate(&probe, &build);
            probe[k].data_mut()[i] = x - FD_STEP;
            let minus = evaluate(&probe, &build);
            probe[k].data_mut()[i] = x;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}
