//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries probed per tensor; larger tensors are subsampled.
    pub max_entries_per_tensor: usize,
    /// Floor of the relative-error denominator.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_entries_per_tensor: 12,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, over every input matrix and every trainable parameter.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    inputs: &[Matrix],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let h = opts.step;
    let record = |label: String, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = relative_error(a, n, opts.abs_floor);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = format!("{label}: analytic {a:.6e}, numeric {n:.6e}");
        }
    };

    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let len = work[i].len();
        let zero = Matrix::zeros(work[i].rows(), work[i].cols());
        let analytic = grads.wrt(*v).unwrap_or(&zero).clone();
        for k in sample(&mut rng, len, len.min(opts.max_entries_per_tensor)) {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let fp = eval(store, &work)?;
            work[i].data_mut()[k] = orig - h;
            let fm = eval(store, &work)?;
            work[i].data_mut()[k] = orig;
            record(
                format!("input {i}[{k}]"),
                analytic.data()[k],
                (fp - fm) / (2.0 * h),
                &mut report,
            );
        }
    }

    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let len = store.value(id).len();
        let (r, c) = store.value(id).shape();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(r, c));
        for k in sample(&mut rng, len, len.min(opts.max_entries_per_tensor)) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let fp = eval(store, inputs)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let fm = eval(store, inputs)?;
            store.value_mut(id).data_mut()[k] = orig;
            let label = format!("{}[{k}]", store.name(id));
            record(
                label,
                analytic.data()[k],
                (fp - fm) / (2.0 * h),
                &mut report,
            );
        }
    }
    Ok(report)
}

/// Random fixed weights for turning a matrix output into a scalar.
pub fn random_projection(rows: usize, cols: usize, seed: u64) -> Matrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

/// `sum(x .* w)` on the tape.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(x);
    let w = g.input(random_projection(r, c, seed));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}
