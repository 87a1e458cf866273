//! Finite-difference oracles for unit tests. Only forward evaluation is used here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Central differences of a scalar function.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / a.l2_norm().max(b.l2_norm()).max(1e-6)
}

pub fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
    let err = relative_error(analytic, numeric);
    assert!(err <= tol, "relative error {err:e} > {tol:e}\nanalytic {analytic:?}\nnumeric  {numeric:?}");
}

/// Checks every input gradient of `build` (which must return a scalar) against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = numeric_grad(input, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if i == j { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars).unwrap();
            g.value(out).item()
        });
        worst = worst.max(relative_error(g.grad(vars[i]).unwrap(), &numeric));
    }
    worst
}
