use rand::Rng;

use super::graph::{Graph, Segments, StatUpdate, Var};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), in_dim, out_dim, bound, rng)?;
        let b = if bias {
            Some(store.add_uniform(&format!("{name}.b"), 1, out_dim, bound, rng)?)
        } else {
            None
        };
        Ok(Linear {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Layer with explicit initial weight `w` and constant bias.
    pub fn with_values(store: &mut ParamStore, name: &str, w: Matrix, bias: f64) -> Result<Self> {
        let (in_dim, out_dim) = w.shape();
        let w = store.add(&format!("{name}.w"), w)?;
        let b = store.add(&format!("{name}.b"), Matrix::filled(1, out_dim, bias))?;
        Ok(Linear {
            name: name.to_string(),
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Linear::with_values(store, name, Matrix::zeros(in_dim, out_dim), 0.0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::mismatch(
                format!("layer `{}`", self.name),
                format!("input width {cols}, expected {}", self.in_dim),
            ));
        }
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Pre-activation residual block `x + fc1(relu(fc0(relu(x))))`, with a
/// bias-free linear shortcut when the widths differ.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub fc0: Linear,
    pub fc1: Linear,
    pub shortcut: Option<Linear>,
}

impl ResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = in_dim.min(out_dim);
        let shortcut = if in_dim != out_dim {
            Some(Linear::new(
                store,
                &format!("{name}.shortcut"),
                in_dim,
                out_dim,
                false,
                rng,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            fc0: Linear::new(store, &format!("{name}.fc0"), in_dim, hidden, true, rng)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), hidden, out_dim, true, rng)?,
            shortcut,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.relu(x);
        let h = self.fc0.forward(g, store, a)?;
        let h = g.relu(h);
        let dx = self.fc1.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, dx)
    }
}

/// Batch normalization whose scale and shift are predicted from a code.
///
/// The code matrix has one row per segment of the feature rows; each segment
/// is modulated by its own row. Train mode normalizes by batch statistics
/// over all rows and records a running-statistics update on the graph.
#[derive(Debug, Clone)]
pub struct CbnLayer {
    pub name: String,
    pub gamma: Linear,
    pub beta: Linear,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub width: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl CbnLayer {
    pub fn new(store: &mut ParamStore, name: &str, code_dim: usize, width: usize) -> Result<Self> {
        // gamma starts at 1 and beta at 0 for every code
        let gamma = Linear::with_values(
            store,
            &format!("{name}.gamma"),
            Matrix::zeros(code_dim, width),
            1.0,
        )?;
        let beta = Linear::zeros(store, &format!("{name}.beta"), code_dim, width)?;
        Ok(CbnLayer {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: store
                .add_frozen(&format!("{name}.running_mean"), Matrix::zeros(1, width))?,
            running_var: store.add_frozen(
                &format!("{name}.running_var"),
                Matrix::filled(1, width, 1.0),
            )?,
            width,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        code: Var,
        segments: &Segments,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c) = g.shape(x);
        if c != self.width {
            return Err(Error::mismatch(
                format!("layer `{}`", self.name),
                format!("feature width {c}, expected {}", self.width),
            ));
        }
        if segments.total() != n || segments.count() != g.shape(code).0 {
            return Err(Error::mismatch(
                format!("layer `{}`", self.name),
                format!(
                    "{n} rows and {} codes vs {} segments over {} rows",
                    g.shape(code).0,
                    segments.count(),
                    segments.total()
                ),
            ));
        }
        let normalized = match mode {
            Mode::Train => {
                let (xn, mean, var) = g.batch_norm(x, self.eps)?;
                let unbiased = n as f64 / (n - 1) as f64;
                g.push_stat_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var_unbiased: var.iter().map(|v| v * unbiased).collect(),
                    momentum: self.momentum,
                });
                xn
            }
            Mode::Eval => {
                let rm = store.value(self.running_mean).row(0);
                let rv = store.value(self.running_var).row(0);
                let scale: Vec<f64> = rv.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let shift: Vec<f64> = rm.iter().zip(&scale).map(|(m, s)| -m * s).collect();
                g.col_affine(x, &scale, &shift)?
            }
        };
        let gamma = self.gamma.forward(g, store, code)?;
        let beta = self.beta.forward(g, store, code)?;
        if segments.count() == 1 {
            let y = g.mul_row(normalized, gamma)?;
            g.add_row(y, beta)
        } else {
            let gamma = g.segment_broadcast(gamma, segments)?;
            let beta = g.segment_broadcast(beta, segments)?;
            let y = g.mul(normalized, gamma)?;
            g.add(y, beta)
        }
    }
}

/// Applies `new = (1 - momentum) * old + momentum * batch` to running statistics.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (old, b) in store
            .value_mut(u.mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *old = (1.0 - m) * *old + m * b;
        }
        for (old, b) in store
            .value_mut(u.var)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var_unbiased)
        {
            *old = (1.0 - m) * *old + m * b;
        }
    }
}

/// Pre-activation residual block with conditional batch normalization before
/// each activation.
#[derive(Debug, Clone)]
pub struct CbnResBlock {
    pub bn0: CbnLayer,
    pub fc0: Linear,
    pub bn1: CbnLayer,
    pub fc1: Linear,
}

impl CbnResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        code_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CbnResBlock {
            bn0: CbnLayer::new(store, &format!("{name}.bn0"), code_dim, width)?,
            fc0: Linear::new(store, &format!("{name}.fc0"), width, width, true, rng)?,
            bn1: CbnLayer::new(store, &format!("{name}.bn1"), code_dim, width)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        code: Var,
        segments: &Segments,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.bn0.forward(g, store, x, code, segments, mode)?;
        let h = g.relu(h);
        let h = self.fc0.forward(g, store, h)?;
        let h = self.bn1.forward(g, store, h, code, segments, mode)?;
        let h = g.relu(h);
        let dx = self.fc1.forward(g, store, h)?;
        g.add(x, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_constant_linear() {
        let mut store = ParamStore::new();
        let id = Linear::with_values(&mut store, "id", Matrix::identity(3), 0.0).unwrap();
        let c = Linear::with_values(&mut store, "c", Matrix::zeros(3, 2), 0.7).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = id.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let z = c.forward(&mut g, &store, xv).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn width_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "encoder.lift", 3, 4, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 5));
        let err = l.forward(&mut g, &store, x).unwrap_err().to_string();
        assert!(err.contains("encoder.lift"), "{err}");
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ResBlock::new(&mut store, "rb", 6, 6, &mut rng).unwrap();
        for id in [block.fc1.w, block.fc1.b.unwrap()] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = Matrix::from_vec(4, 6, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn cbn_running_mean_after_one_step() {
        let mut store = ParamStore::new();
        let bn = CbnLayer::new(&mut store, "bn", 2, 3).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let code = g.input(Matrix::zeros(1, 2));
        bn.forward(&mut g, &store, xv, code, &Segments::single(2), Mode::Train)
            .unwrap();
        apply_stat_updates(&mut store, &g.take_stat_updates());
        let rm = store.value(bn.running_mean).data();
        for (got, m) in rm.iter().zip([2.0, 3.0, 4.0]) {
            assert!((got - 0.1 * m).abs() < 1e-15);
        }
        // unbiased batch variance is 2 for every column
        let rv = store.value(bn.running_var).data();
        assert!(rv.iter().all(|v| (v - (0.9 + 0.1 * 2.0)).abs() < 1e-15));
    }

    #[test]
    fn cbn_identity_on_standardized_batch() {
        let mut store = ParamStore::new();
        let bn = CbnLayer::new(&mut store, "bn", 1, 2).unwrap();
        let x = Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let code = g.input(Matrix::scalar(0.3));
        let y = bn
            .forward(&mut g, &store, xv, code, &Segments::single(2), Mode::Train)
            .unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn cbn_rejects_single_row_in_train_mode() {
        let mut store = ParamStore::new();
        let bn = CbnLayer::new(&mut store, "bn", 1, 2).unwrap();
        let mut g = Graph::new();
        let xv = g.input(Matrix::zeros(1, 2));
        let code = g.input(Matrix::scalar(0.0));
        let err = bn.forward(&mut g, &store, xv, code, &Segments::single(1), Mode::Train);
        assert_eq!(err.unwrap_err().to_string(), "batch too small for CBN");
        assert!(bn
            .forward(&mut g, &store, xv, code, &Segments::single(1), Mode::Eval)
            .is_ok());
    }
}
