#![allow(dead_code)]

use qmix_core::blocks::Builder;
use qmix_core::{BufferStore, Graph, Mode, ParamStore};
use qmix_tensor::gradcheck::relative_error;
use qmix_tensor::{Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Registry {
    pub params: ParamStore<f64>,
    pub buffers: BufferStore<f64>,
    pub rng: ChaCha8Rng,
}

impl Registry {
    pub fn new(seed: u64) -> Self {
        Registry { params: ParamStore::new(), buffers: BufferStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn builder(&mut self) -> Builder<'_, f64> {
        Builder { params: &mut self.params, buffers: &mut self.buffers, rng: &mut self.rng }
    }
}

pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_f32(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// Loss `Σ r ⊙ f(x)` with fixed random `r`, so every output element matters.
fn weighted_loss<F>(g: &mut Graph<'_, f64>, x: &Tensor<f64>, f: &F) -> (Var, Var)
where
    F: Fn(&mut Graph<'_, f64>, Var) -> qmix_core::Result<Var>,
{
    let xv = g.tape.variable(x.clone());
    let y = f(g, xv).expect("forward");
    let r = random(g.tape.shape(y), 0xfeed);
    let m = g.tape.mul_const(y, r).expect("weights");
    (xv, g.tape.sum(m))
}

/// Largest relative error between tape gradients and central differences
/// over every parameter element and every input element, in training mode.
pub fn composite_fd_error<F>(reg: &Registry, x: &Tensor<f64>, h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Var) -> qmix_core::Result<Var>,
{
    let eval = |params: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::new(params, &reg.buffers, Mode::Train);
        let (_, loss) = weighted_loss(&mut g, x, &f);
        g.tape.value(loss).item()
    };

    let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Train);
    let (xv, loss) = weighted_loss(&mut g, x, &f);
    g.tape.backward(loss).expect("backward");
    let x_grad = g.tape.grad(xv).expect("input grad").clone();
    let effects = g.finish();
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; reg.params.len()];
    for (id, grad) in effects.grads {
        let idx = reg.params.iter().position(|(pid, _)| pid == id).unwrap();
        analytic[idx] = Some(grad);
    }

    let mut worst = 0.0f64;
    let mut params = reg.params.clone();
    let ids: Vec<_> = reg.params.iter().map(|(id, _)| id).collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let n = params.value(id).numel();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&params, x);
            params.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&params, x);
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[slot].as_ref().map_or(0.0, |t| t.data()[i]);
            if std::env::var("FD_DEBUG").is_ok() && relative_error(a, numeric) > 1e-5 {
                eprintln!("{} [{i}]: analytic {a:e} numeric {numeric:e}", params.get(id).name);
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    let mut xw = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        xw.data_mut()[i] = orig + h;
        let plus = eval(&params, &xw);
        xw.data_mut()[i] = orig - h;
        let minus = eval(&params, &xw);
        xw.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if std::env::var("FD_DEBUG").is_ok() && relative_error(x_grad.data()[i], numeric) > 1e-5 {
            eprintln!("input [{i}]: analytic {:e} numeric {numeric:e}", x_grad.data()[i]);
        }
        worst = worst.max(relative_error(x_grad.data()[i], numeric));
    }
    worst
}

/// Overwrite every parameter with zeros.
pub fn zero_params(params: &mut ParamStore<f64>) {
    for p in params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
