//! Encoder, instance projector and feature predictor.
//!
//! All learnable tensors live in one flat, named parameter list owned by
//! [`CdModel`]; layers refer to them by index. Binding the model to a tape
//! places every parameter on it once, so both augmented views of a batch
//! share the same leaves and their gradients accumulate.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{batch_norm_eval, batch_norm_train, Gradients, ImageGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Flattened input length (C·H·W for images).
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Dimensionality of the backbone representation.
    pub output_dim: usize,
    pub use_conv: bool,
    /// Required when `use_conv` is set.
    pub image: Option<ImageGeom>,
    /// Output channels of the two convolution layers.
    pub conv_channels: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Number of feature heads K.
    pub num_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub predictor: PredictorConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// MLP stack for vector data with the batch-size convention for the
    /// projector/predictor hidden width and the number of feature heads.
    pub fn for_vectors(input_dim: usize, batch_size: usize, backbone_dim: usize, latent_dim: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                input_dim,
                hidden_dims: vec![backbone_dim],
                output_dim: backbone_dim,
                use_conv: false,
                image: None,
                conv_channels: [8, 16],
            },
            projector: ProjectorConfig {
                in_dim: backbone_dim,
                hidden_dim: batch_size,
                out_dim: latent_dim,
            },
            predictor: PredictorConfig {
                in_dim: latent_dim,
                hidden_dim: batch_size,
                num_features: batch_size,
            },
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let dims = [
            ("encoder.input_dim", e.input_dim),
            ("encoder.output_dim", e.output_dim),
            ("projector.hidden_dim", self.projector.hidden_dim),
            ("projector.out_dim", self.projector.out_dim),
            ("predictor.hidden_dim", self.predictor.hidden_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if e.hidden_dims.contains(&0) {
            return Err(Error::Parameter("encoder.hidden_dims must be at least 1".into()));
        }
        if self.predictor.num_features < 2 {
            return Err(Error::Parameter(format!(
                "predictor.num_features must be at least 2, got {}",
                self.predictor.num_features
            )));
        }
        if self.projector.in_dim != e.output_dim {
            return Err(Error::Parameter(format!(
                "projector.in_dim {} != encoder.output_dim {}",
                self.projector.in_dim, e.output_dim
            )));
        }
        if self.predictor.in_dim != self.projector.out_dim {
            return Err(Error::Parameter(format!(
                "predictor.in_dim {} != projector.out_dim {}",
                self.predictor.in_dim, self.projector.out_dim
            )));
        }
        if e.use_conv {
            let g = e
                .image
                .ok_or_else(|| Error::Parameter("use_conv requires an image shape".into()))?;
            if g.len() != e.input_dim {
                return Err(Error::Parameter(format!(
                    "image shape {}x{}x{} does not match input_dim {}",
                    g.channels, g.height, g.width, e.input_dim
                )));
            }
            if g.height % 4 != 0 || g.width % 4 != 0 {
                return Err(Error::Parameter(
                    "conv stem needs image height and width divisible by 4".into(),
                ));
            }
            if e.conv_channels.contains(&0) {
                return Err(Error::Parameter("conv channels must be at least 1".into()));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Parameter("invalid batch-norm momentum/eps".into()));
        }
        Ok(())
    }
}

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running buffers.
    Train,
    /// Normalize with frozen running buffers.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
    geom: ImageGeom,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<ConvIdx>,
    hidden: Vec<(LinearIdx, BnIdx)>,
    out: LinearIdx,
}

/// linear → BN → ReLU → linear
#[derive(Clone, Debug)]
struct TwoLayer {
    fc1: LinearIdx,
    bn: BnIdx,
    fc2: LinearIdx,
}

/// Full model: encoder f, projector g, feature predictor h.
#[derive(Clone, Debug)]
pub struct CdModel<T> {
    config: ModelConfig,
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    encoder: Encoder,
    projector: TwoLayer,
    predictor: TwoLayer,
}

/// Parameters of a [`CdModel`] placed on one tape.
pub struct ModelVars<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> ModelVars<'t, T> {
    /// Leaves in [`CdModel::params`] order.
    pub fn leaves(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Per-view outputs of the full stack.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutputs<'t, T> {
    pub h: Var<'t, T>,
    pub z: Var<'t, T>,
    pub y: Var<'t, T>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Scalar> Builder<T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        self.push_param(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn push_param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(Named {
            name,
            tensor: t.with_requires_grad(true),
        });
        self.params.len() - 1
    }

    fn push_buffer(&mut self, name: String, t: Tensor<T>) -> usize {
        self.buffers.push(Named { name, tensor: t });
        self.buffers.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        let w = self.uniform(format!("{prefix}.weight"), vec![fan_in, fan_out], fan_in);
        let b = self.push_param(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
        LinearIdx { w, b }
    }

    fn conv(&mut self, prefix: &str, geom: ImageGeom, out_channels: usize) -> ConvIdx {
        let fan_in = geom.channels * CONV_KERNEL * CONV_KERNEL;
        let w = self.uniform(format!("{prefix}.weight"), vec![out_channels, fan_in], fan_in);
        let b = self.push_param(format!("{prefix}.bias"), Tensor::zeros([out_channels]));
        ConvIdx { w, b, geom }
    }

    fn bn(&mut self, prefix: &str, f: usize) -> BnIdx {
        BnIdx {
            gamma: self.push_param(format!("{prefix}.gamma"), Tensor::full([f], T::one())),
            beta: self.push_param(format!("{prefix}.beta"), Tensor::zeros([f])),
            mean: self.push_buffer(format!("{prefix}.running_mean"), Tensor::zeros([f])),
            var: self.push_buffer(format!("{prefix}.running_var"), Tensor::full([f], T::one())),
        }
    }

    fn two_layer(&mut self, prefix: &str, i: usize, h: usize, o: usize) -> TwoLayer {
        TwoLayer {
            fc1: self.linear(&format!("{prefix}.fc1"), i, h),
            bn: self.bn(&format!("{prefix}.bn"), h),
            fc2: self.linear(&format!("{prefix}.fc2"), h, o),
        }
    }
}

impl<T: Scalar> CdModel<T> {
    /// Deterministic initialization: linear and conv weights uniform in
    /// ±sqrt(1/fan_in), biases zero, BN γ=1 β=0, running stats (0, 1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let e = &config.encoder;
        let mut convs = Vec::new();
        let mut width = e.input_dim;
        if e.use_conv {
            let mut geom = e.image.expect("validated");
            for (i, &c) in e.conv_channels.iter().enumerate() {
                convs.push(b.conv(&format!("encoder.conv{i}"), geom, c));
                geom = ImageGeom {
                    channels: c,
                    height: geom.height / 2,
                    width: geom.width / 2,
                };
            }
            width = geom.len();
        }
        let mut hidden = Vec::new();
        for (i, &h) in e.hidden_dims.iter().enumerate() {
            let lin = b.linear(&format!("encoder.fc{i}"), width, h);
            let bn = b.bn(&format!("encoder.bn{i}"), h);
            hidden.push((lin, bn));
            width = h;
        }
        let out = b.linear("encoder.out", width, e.output_dim);
        let p = &config.projector;
        let projector = b.two_layer("projector", p.in_dim, p.hidden_dim, p.out_dim);
        let q = &config.predictor;
        let predictor = b.two_layer("predictor", q.in_dim, q.hidden_dim, q.num_features);
        Ok(Self {
            config,
            params: b.params,
            buffers: b.buffers,
            encoder: Encoder { convs, hidden, out },
            projector,
            predictor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ModelVars<'t, T> {
        ModelVars {
            vars: self.params.iter().map(|p| tape.param(&p.tensor)).collect(),
        }
    }

    /// Writes the gradient of every bound leaf into its parameter.
    pub fn store_grads(&mut self, vars: &ModelVars<'_, T>, grads: &Gradients<T>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&vars.vars) {
            grads.write_into(v, &mut p.tensor)?;
        }
        Ok(())
    }

    fn linear<'t>(&self, vars: &ModelVars<'t, T>, l: LinearIdx, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(vars.vars[l.w])?.add_bias(vars.vars[l.b])
    }

    fn batch_norm<'t>(
        &mut self,
        vars: &ModelVars<'t, T>,
        bn: BnIdx,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let eps = T::of(self.config.bn_eps);
        let (gamma, beta) = (vars.vars[bn.gamma], vars.vars[bn.beta]);
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(x, gamma, beta, eps)?;
                let n = x.shape()[0];
                let m = T::of(self.config.bn_momentum);
                let unbias = T::of_usize(n) / T::of_usize(n - 1);
                let rm = self.buffers[bn.mean].tensor.data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                let rv = self.buffers[bn.var].tensor.data_mut();
                for (r, &b) in rv.iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                x,
                gamma,
                beta,
                self.buffers[bn.mean].tensor.data(),
                self.buffers[bn.var].tensor.data(),
                eps,
            ),
        }
    }

    fn check_input(&self, x: &Var<'_, T>, op: &'static str, width: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[1] != width {
            return Err(Error::Dimension {
                op,
                lhs: s,
                rhs: vec![width],
            });
        }
        Ok(())
    }

    fn two_layer<'t>(
        &mut self,
        vars: &ModelVars<'t, T>,
        net: TwoLayer,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let a = self.linear(vars, net.fc1, x)?;
        let a = self.batch_norm(vars, net.bn, a, mode)?.relu();
        self.linear(vars, net.fc2, a)
    }

    /// Backbone f: `[N, input_dim]` → `[N, output_dim]`.
    pub fn encode<'t>(&mut self, vars: &ModelVars<'t, T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        self.check_input(&x, "encoder_forward", self.config.encoder.input_dim)?;
        let mut a = x;
        for conv in self.encoder.convs.clone() {
            a = a
                .conv2d(vars.vars[conv.w], vars.vars[conv.b], conv.geom, CONV_KERNEL)?
                .relu();
            let out_c = vars.vars[conv.b].shape()[0];
            a = a.avg_pool2(ImageGeom {
                channels: out_c,
                ..conv.geom
            })?;
        }
        for (lin, bn) in self.encoder.hidden.clone() {
            a = self.linear(vars, lin, a)?;
            a = self.batch_norm(vars, bn, a, mode)?.relu();
        }
        self.linear(vars, self.encoder.out, a)
    }

    /// Instance projector g: `[N, d_h]` → `[N, d]`.
    pub fn project<'t>(&mut self, vars: &ModelVars<'t, T>, h: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        self.check_input(&h, "projector_forward", self.config.projector.in_dim)?;
        self.two_layer(vars, self.projector.clone(), h, mode)
    }

    /// Feature predictor: `[N, d]` → `[N, K]` with entries in (0, 1).
    pub fn predict<'t>(&mut self, vars: &ModelVars<'t, T>, z: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        self.check_input(&z, "predictor_forward", self.config.predictor.in_dim)?;
        Ok(self.two_layer(vars, self.predictor.clone(), z, mode)?.sigmoid())
    }

    pub fn forward<'t>(&mut self, vars: &ModelVars<'t, T>, x: Var<'t, T>, mode: Mode) -> Result<ViewOutputs<'t, T>> {
        let h = self.encode(vars, x, mode)?;
        let z = self.project(vars, h, mode)?;
        let y = self.predict(vars, z, mode)?;
        Ok(ViewOutputs { h, z, y })
    }

    /// Eval-mode embedding of raw rows at the backbone, projector and
    /// predictor, processed in chunks. Never touches running buffers.
    pub fn embed(&self, rows: &Tensor<T>, chunk: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, width) = (rows.rows(), rows.cols());
        let mut outs: [Vec<T>; 3] = Default::default();
        let mut dims = [0usize; 3];
        let mut model = self.clone();
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let part = Tensor::new(vec![end - start, width], rows.data()[start * width..end * width].to_vec())?;
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let x = tape.constant(&part);
            let o = model.forward(&vars, x, Mode::Eval)?;
            for (k, v) in [o.h, o.z, o.y].into_iter().enumerate() {
                dims[k] = v.shape()[1];
                outs[k].extend(v.data());
            }
        }
        let [h, z, y] = outs;
        Ok((
            Tensor::new(vec![n, dims[0]], h)?,
            Tensor::new(vec![n, dims[1]], z)?,
            Tensor::new(vec![n, dims[2]], y)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::for_vectors(5, 4, 6, 3);
        c.encoder.hidden_dims = vec![7];
        c
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0);
        Tensor::new(vec![n, d], (0..n * d).map(|_| u.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = CdModel::<f64>::new(small_config(), 42).unwrap();
        let b = CdModel::<f64>::new(small_config(), 42).unwrap();
        let c = CdModel::<f64>::new(small_config(), 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for p in a.params() {
            if p.name.ends_with(".weight") {
                let fan_in = p.tensor.shape()[0] as f64;
                let bound = (1.0 / fan_in).sqrt();
                assert!(p.tensor.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
            } else if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            } else if p.name.ends_with(".gamma") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.predictor.num_features = 1;
        assert!(matches!(CdModel::<f64>::new(c, 0), Err(Error::Parameter(_))));
        let mut c = small_config();
        c.projector.in_dim = 99;
        assert!(CdModel::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn output_shapes() {
        let mut c = ModelConfig::for_vectors(10, 8, 32, 16);
        c.encoder.hidden_dims = vec![20];
        let mut m = CdModel::<f64>::new(c, 1).unwrap();
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let x = tape.constant(&batch(8, 10, 3));
        let o = m.forward(&vars, x, Mode::Train).unwrap();
        assert_eq!(o.h.shape(), vec![8, 32]);
        assert_eq!(o.z.shape(), vec![8, 16]);
        assert_eq!(o.y.shape(), vec![8, 8]);
        let bad = tape.constant(&batch(8, 9, 3));
        assert!(matches!(m.encode(&vars, bad, Mode::Train), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_final_layer_leaves_only_bias() {
        let mut m = CdModel::<f64>::new(small_config(), 5).unwrap();
        for p in m.params_mut() {
            if p.name == "encoder.out.weight" {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if p.name == "encoder.out.bias" {
                p.tensor.data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
            }
        }
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let x = tape.constant(&Tensor::zeros([4, 5]));
        let h = m.encode(&vars, x, Mode::Train).unwrap().value();
        for i in 0..4 {
            assert_eq!(h.row(i), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let mut m = CdModel::<f64>::new(small_config(), 5).unwrap();
        let mut x = batch(4, 5, 9);
        let row0 = x.row(0).to_vec();
        x.data_mut()[10..15].copy_from_slice(&row0);
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let o = m.forward(&vars, tape.constant(&x), Mode::Train).unwrap();
        for v in [o.h, o.z, o.y] {
            let t = v.value();
            assert_eq!(t.row(0), t.row(2));
        }
    }

    #[test]
    fn predictor_range_and_half_at_zero() {
        let mut m = CdModel::<f64>::new(small_config(), 2).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("predictor.fc2") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let z = tape.constant(&batch(4, 3, 1));
        assert!(m.predict(&vars, z, Mode::Train).unwrap().data().iter().all(|&v| v == 0.5));

        let mut m = CdModel::<f64>::new(small_config(), 2).unwrap();
        for trial in 0..1000 {
            let tape = Tape::new();
            let vars = m.bind(&tape);
            let z = tape.constant(&batch(4, 3, trial).map(|v| v * 20.0));
            let y = m.predict(&vars, z, Mode::Train).unwrap().data();
            assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut m = CdModel::<f64>::new(small_config(), 2).unwrap();
        // Move running stats away from their initial values first.
        for s in 0..3 {
            let tape = Tape::new();
            let vars = m.bind(&tape);
            m.forward(&vars, tape.constant(&batch(4, 5, s)), Mode::Train).unwrap();
        }
        let before = m.buffers().to_vec();
        let x = batch(4, 5, 11);
        let run = |m: &mut CdModel<f64>| {
            let tape = Tape::new();
            let vars = m.bind(&tape);
            m.forward(&vars, tape.constant(&x), Mode::Eval).unwrap().y.data()
        };
        let a = run(&mut m);
        let b = run(&mut m);
        assert_eq!(a, b);
        assert_eq!(before, m.buffers());
    }

    #[test]
    fn bn_running_stats_follow_momentum() {
        let mut m = CdModel::<f64>::new(small_config(), 2).unwrap();
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let x = batch(4, 5, 0);
        m.encode(&vars, tape.constant(&x), Mode::Train).unwrap();
        let rv = &m.buffers()[1];
        assert_eq!(rv.name, "encoder.bn0.running_var");
        assert!(rv.tensor.data().iter().all(|&v| v >= 0.0));
        assert!(rv.tensor.data().iter().any(|&v| v != 1.0));
    }

    #[test]
    fn projector_gradient_matches_differences() {
        let m = CdModel::<f64>::new(small_config(), 3).unwrap();
        let h = batch(4, 6, 4);
        let w = batch(4, 3, 5);
        let eval = |m: &CdModel<f64>, hv: &Tensor<f64>| -> Result<f64> {
            let mut m = m.clone();
            let tape = Tape::new();
            let vars = m.bind(&tape);
            let z = m.project(&vars, tape.constant(hv), Mode::Train)?;
            z.mul(tape.constant(&w))?.sum(None)?.item()
        };
        let tape = Tape::new();
        let mut mm = m.clone();
        let vars = mm.bind(&tape);
        let hv = tape.param(&h);
        let z = mm.project(&vars, hv, Mode::Train).unwrap();
        let loss = z.mul(tape.constant(&w)).unwrap().sum(None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(hv).unwrap();
        let numeric = numeric_gradient(
            |c| eval(&m, &Tensor::new(vec![4, 6], c.to_vec()).unwrap()),
            h.data(),
            1e-5,
        )
        .unwrap();
        let (err, _) = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_stem_shapes_and_gradients() {
        let geom = ImageGeom {
            channels: 2,
            height: 4,
            width: 4,
        };
        let mut c = ModelConfig::for_vectors(32, 4, 5, 3);
        c.encoder.use_conv = true;
        c.encoder.image = Some(geom);
        c.encoder.conv_channels = [3, 2];
        c.encoder.hidden_dims = vec![];
        let m = CdModel::<f64>::new(c, 8).unwrap();
        let x = batch(3, 32, 2);
        let w = batch(3, 5, 7);
        fn loss_of<'t>(
            m: &CdModel<f64>,
            xv: &Tensor<f64>,
            w: &Tensor<f64>,
            tape: &'t Tape<f64>,
            as_param: bool,
        ) -> (Var<'t, f64>, Var<'t, f64>) {
            let mut m = m.clone();
            let vars = m.bind(tape);
            let xv = if as_param { tape.param(xv) } else { tape.constant(xv) };
            let h = m.encode(&vars, xv, Mode::Eval).unwrap();
            (h.mul(tape.constant(w)).unwrap().sum(None).unwrap(), xv)
        }
        let tape = Tape::new();
        let (loss, xv) = loss_of(&m, &x, &w, &tape, true);
        let analytic = tape.backward(loss).unwrap().wrt(xv).unwrap();
        let numeric = numeric_gradient(
            |c| {
                let tape = Tape::new();
                let t = Tensor::new(vec![3, 32], c.to_vec()).unwrap();
                loss_of(&m, &t, &w, &tape, false).0.item()
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric).0 < 1e-6);
    }
}
