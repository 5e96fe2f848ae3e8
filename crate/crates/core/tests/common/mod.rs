#![allow(dead_code)]

//! Test-only oracles shared by the integration suites.

use hingenet::tensorcore::{Graph, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-2, 2].
pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compare analytic gradients against central differences.
///
/// `build` records a forward pass over graph inputs created from `inputs`
/// (in order, via `Graph::input`) and returns the scalar loss. Every
/// element of every input is perturbed by `FD_STEP`.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> FdReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        failures: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            report.checked += 1;
            let ok = if a.abs() < FD_ABS_FLOOR && numeric.abs() < FD_ABS_FLOOR {
                (a - numeric).abs() < FD_ABS_FLOOR
            } else {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.max_rel = report.max_rel.max(rel);
                rel < FD_REL_TOL
            };
            if !ok {
                report.failures += 1;
            }
        }
    }
    report
}

/// Weighted-sum probe `sum(x * c)` with a fixed random `c`, so that every
/// output element contributes a distinct weight.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x);
    let c = random_tensor(shape, &mut rng(seed));
    g.dot(x, c).unwrap()
}

/// Scalar loss used by the model-level checks: probes on both heads.
pub fn head_loss(g: &mut Graph, out: hingenet::model::HeadOutput) -> Var {
    let a = probe(g, out.beat, 11);
    let b = probe(g, out.downbeat, 12);
    g.add(a, b).unwrap()
}

/// Central differences on every trainable parameter of `model`.
pub fn fd_check_params(
    model: &mut dyn hingenet::model::BeatModel,
    input: &hingenet::model::ModelInput<'_>,
) -> FdReport {
    let loss_of = |m: &dyn hingenet::model::BeatModel| -> f64 {
        let mut g = Graph::new();
        let out = m.forward(&mut g, input).unwrap();
        let l = head_loss(&mut g, out);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, input).unwrap();
    let l = head_loss(&mut g, out);
    let grads = g.backward(l).unwrap().for_store(model.params());

    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        failures: 0,
    };
    let targets: Vec<(usize, String)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(k, p)| (k, p.name.clone()))
        .collect();
    for (k, name) in targets {
        let id = model.params().find(&name).unwrap();
        let n = model.params().get(id).tensor.len();
        let analytic = grads[k]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(model.params().get(id).tensor.shape()));
        for i in 0..n {
            let orig = model.params().get(id).tensor.data()[i];
            model.params_mut().get_mut(id).tensor.data_mut()[i] = orig + FD_STEP;
            let up = loss_of(model);
            model.params_mut().get_mut(id).tensor.data_mut()[i] = orig - FD_STEP;
            let down = loss_of(model);
            model.params_mut().get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            report.checked += 1;
            let ok = if a.abs() < FD_ABS_FLOOR && numeric.abs() < FD_ABS_FLOOR {
                (a - numeric).abs() < FD_ABS_FLOOR
            } else {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.max_rel = report.max_rel.max(rel);
                rel < FD_REL_TOL
            };
            if !ok {
                report.failures += 1;
            }
        }
    }
    report
}

/// Overwrite every trainable parameter with U(-scale, scale) values.
pub fn randomise_trainable(store: &mut hingenet::tensorcore::ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.find(&name).unwrap();
        for v in store.get_mut(id).tensor.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}
