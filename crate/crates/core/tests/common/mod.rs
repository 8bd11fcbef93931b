#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radformer_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Serialises the tests that train models so they do not fight over the
/// single core.
pub static HEAVY: std::sync::Mutex<()> = std::sync::Mutex::new(());

pub fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

use radformer_tensor::gradcheck::{project_to_scalar, relative_error};
use radformer_tensor::{ParamStore, Tape, Var};

/// Worst relative error between reverse-mode and central-difference
/// gradients of `Σ weights ⊙ f(x)` over `x` and every parameter in `store`.
pub fn store_gradcheck<F>(store: &ParamStore<f64>, x: &Tensor<f64>, weights: &Tensor<f64>, f: F) -> f64
where
    F: for<'s> Fn(&mut Tape<'s, f64>, Var) -> Var,
{
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut tape = Tape::with_store(store);
        let xv = tape.leaf(x.clone(), false);
        let y = f(&mut tape, xv);
        let l = project_to_scalar(&mut tape, y, weights).unwrap();
        tape.value(l).item()
    };
    let (gx, gp) = {
        let mut tape = Tape::with_store(store);
        let xv = tape.leaf(x.clone(), true);
        let y = f(&mut tape, xv);
        let l = project_to_scalar(&mut tape, y, weights).unwrap();
        let g = tape.backward(l).unwrap();
        let gx = g.get(xv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        (gx, g.into_params())
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut xs = x.clone();
    for i in 0..x.numel() {
        let v = xs.data()[i];
        xs.data_mut()[i] = v + h;
        let up = eval(store, &xs);
        xs.data_mut()[i] = v - h;
        let down = eval(store, &xs);
        xs.data_mut()[i] = v;
        worst = worst.max(relative_error(gx[i], (up - down) / (2.0 * h), 1e-3));
    }
    let mut work = store.clone();
    for p in 0..store.params().len() {
        let id = work.param_id(&store.params()[p].name.clone()).unwrap();
        let analytic = gp.get(&id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; store.params()[p].tensor.numel()]);
        for i in 0..analytic.len() {
            let v = work.params()[p].tensor.data()[i];
            work.params_mut()[p].tensor.data_mut()[i] = v + h;
            let up = eval(&work, x);
            work.params_mut()[p].tensor.data_mut()[i] = v - h;
            let down = eval(&work, x);
            work.params_mut()[p].tensor.data_mut()[i] = v;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h), 1e-3));
        }
    }
    worst
}
