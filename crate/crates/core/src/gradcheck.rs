//! Central finite-difference checking of tape gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Temperatures};
use crate::nn::{CdModel, ModelConfig, Mode};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Central differences of `eval` around `point`, one coordinate at a time.
pub fn numeric_gradient<T: Scalar>(
    mut eval: impl FnMut(&[T]) -> Result<T>,
    point: &[T],
    eps: T,
) -> Result<Vec<T>> {
    let mut x = point.to_vec();
    let two = T::of(2.0);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = eval(&x)?;
        x[i] = orig - eps;
        let fm = eval(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        out.push((fp - fm) / (two * eps));
    }
    Ok(out)
}

/// max over coordinates of |a − n| / max(1, |a|), with its index.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (&a, &n))| {
            let (a, n) = (a.as_f64(), n.as_f64());
            ((a - n).abs() / a.abs().max(1.0), i)
        })
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences and returns the max relative error.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point);
        let y = f(&tape, x)?;
        if !y.item()?.is_finite() {
            return Err(Error::Numeric("non-finite evaluation at the base point".into()));
        }
        tape.backward(y)?.wrt(x)?
    };
    let numeric = numeric_gradient(
        |coords| {
            let tape = Tape::new();
            let p = Tensor::new(point.shape().to_vec(), coords.to_vec())?;
            let x = tape.constant(&p);
            f(&tape, x)?.item()
        },
        point.data(),
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric).0)
}

/// Sizes and knobs of a whole-model gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheckOptions {
    /// Batch size N.
    pub batch: usize,
    /// Feature heads K.
    pub heads: usize,
    /// Input dimension d.
    pub input_dim: usize,
    pub eps: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Backward rule to corrupt, for testing the checker itself.
    pub fault: Option<OpKind>,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            batch: 4,
            heads: 4,
            input_dim: 6,
            eps: 1e-5,
            alpha: 1.0,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_error: f64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckReport {
    /// Worst entry first.
    pub per_param: Vec<ParamError>,
    pub coordinates: usize,
}

impl ModelCheckReport {
    pub fn worst(&self) -> &ParamError {
        &self.per_param[0]
    }

    pub fn passed(&self) -> bool {
        self.worst().max_error < MODEL_TOLERANCE
    }
}

fn model_loss(model: &CdModel<f64>, x1: &Tensor<f64>, x2: &Tensor<f64>, alpha: f64) -> Result<f64> {
    let mut m = model.clone();
    let tape = Tape::new();
    let vars = m.bind(&tape);
    let o1 = m.forward(&vars, tape.constant(x1), Mode::Train)?;
    let o2 = m.forward(&vars, tape.constant(x2), Mode::Train)?;
    let (loss, _) = total_loss(o1.z, o2.z, o1.y, o2.y, Temperatures::default(), alpha)?;
    loss.item()
}

/// Checks the gradient of the full objective with respect to every model
/// parameter against central differences, on a random tiny model and a
/// random pair of views.
pub fn check_model(opts: &ModelCheckOptions) -> Result<ModelCheckReport> {
    let mut cfg = ModelConfig::for_vectors(opts.input_dim, opts.heads, 5, 3);
    cfg.encoder.hidden_dims = vec![7];
    // Four ReLU units can all be off for one sample, leaving an all-zero
    // projection that cosine similarity rejects.
    cfg.projector.hidden_dim = 8;
    cfg.predictor.hidden_dim = 8;
    let mut model = CdModel::new(cfg, opts.seed)?;
    let mut rng = rng_for(opts.seed, 1);
    let mut draw = || -> Result<Tensor<f64>> {
        let v = (0..opts.batch * opts.input_dim).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![opts.batch, opts.input_dim], v)
    };
    let (x1, x2) = (draw()?, draw()?);

    let analytic = {
        let mut m = model.clone();
        let tape = Tape::new();
        tape.inject_fault(opts.fault);
        let vars = m.bind(&tape);
        let o1 = m.forward(&vars, tape.constant(&x1), Mode::Train)?;
        let o2 = m.forward(&vars, tape.constant(&x2), Mode::Train)?;
        let (loss, _) = total_loss(o1.z, o2.z, o1.y, o2.y, Temperatures::default(), opts.alpha)?;
        let grads = tape.backward(loss)?;
        m.store_grads(&vars, &grads)?;
        m.params().iter().map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default()).collect::<Vec<_>>()
    };

    let mut per_param = Vec::new();
    let mut coordinates = 0;
    for k in 0..model.params().len() {
        let point = model.params()[k].tensor.data().to_vec();
        let numeric = numeric_gradient(
            |coords| {
                model.params_mut()[k].tensor.data_mut().copy_from_slice(coords);
                model_loss(&model, &x1, &x2, opts.alpha)
            },
            &point,
            opts.eps,
        )?;
        model.params_mut()[k].tensor.data_mut().copy_from_slice(&point);
        let a = if analytic[k].is_empty() { vec![0.0; point.len()] } else { analytic[k].clone() };
        let (max_error, index) = max_relative_error(&a, &numeric);
        coordinates += point.len();
        per_param.push(ParamError {
            name: model.params()[k].name.clone(),
            max_error,
            index,
        });
    }
    per_param.sort_by(|a, b| b.max_error.total_cmp(&a.max_error));
    Ok(ModelCheckReport { per_param, coordinates })
}
