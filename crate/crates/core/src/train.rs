//! Optimization loop: two-view forward, combined loss, backward, optional
//! global-norm clipping, Adam with per-step cosine decay.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::augment::make_views;
use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::data::{SampleShape, Samples};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, LossTerms, Temperatures};
use crate::nn::{CdModel, Mode, Named};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_inst: f64,
    pub tau_feat: f64,
    pub alpha: f64,
    pub grad_clip_norm: f64,
    pub use_scheduler: bool,
    pub use_clipping: bool,
    pub use_feature_head: bool,
    pub use_entropy_loss: bool,
    pub dual_view: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            lr: 3e-4,
            tau_inst: 0.5,
            tau_feat: 1.0,
            alpha: 1.0,
            grad_clip_norm: 1.0,
            use_scheduler: true,
            use_clipping: true,
            use_feature_head: true,
            use_entropy_loss: true,
            dual_view: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2"));
        }
        if !(self.tau_inst > 0.0) {
            return Err(Error::config("train.tau_inst", "must be > 0"));
        }
        if !(self.tau_feat > 0.0) {
            return Err(Error::config("train.tau_feat", "must be > 0"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("train.grad_clip_norm", "must be > 0"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("train.alpha", "must be finite"));
        }
        Ok(())
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            feature: self.use_feature_head,
            entropy: self.use_entropy_loss,
        }
    }
}

/// `0.5 · base · (1 + cos(π · step / total))`, no restarts, floor 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Learning rates of an entire run, one per optimizer step, from `base_lr`
/// down to exactly 0 at the last step.
pub fn lr_schedule(total_steps: usize, base_lr: f64) -> Vec<f64> {
    let last = total_steps.saturating_sub(1);
    (0..total_steps)
        .map(|s| cosine_lr(s, last, base_lr).expect("step within range"))
        .collect()
}

fn grad_of<'a, T>(p: &'a Named<T>) -> Result<&'a [T]>
where
    T: Scalar,
{
    p.tensor
        .grad()
        .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient; run backward first", p.name)))
}

/// Rescales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns the factor applied.
pub fn clip_gradients<T: Scalar>(params: &mut [Named<T>], max_norm: T) -> Result<T> {
    let mut sq = T::zero();
    for p in params.iter() {
        let g = grad_of(p)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
        }
        sq = sq + g.iter().map(|&v| v * v).sum::<T>();
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(T::one());
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.tensor.grad_mut() {
            g.iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    Ok(factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Named<T>]) -> Self {
        Self::with_hyper(params, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_hyper(params: &[Named<T>], beta1: T, beta2: T, eps: T) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            beta1,
            beta2,
            eps,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update (no weight decay).
pub fn adam_step<T: Scalar>(params: &mut [Named<T>], state: &mut AdamState<T>, lr: T) -> Result<()> {
    if !(lr >= T::zero()) {
        return Err(Error::Parameter(format!("learning rate {lr} must be >= 0")));
    }
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    for p in params.iter() {
        grad_of(p)?;
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let data = p.tensor.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Mean loss terms of one epoch and the learning rate of its last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown<f64>,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,l_inst,l_feat,l_entropy,l_total,lr";

pub fn loss_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, l.l_inst, l.l_feat, l.l_entropy, l.l_total, r.lr
        );
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_csv(records)).map_err(|e| Error::io(path, e))
}

/// Owns the model and optimizer between epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    shape: SampleShape,
    model: CdModel<f64>,
    adam: AdamState<f64>,
    rng: RngState,
    epoch: usize,
    step: usize,
}

impl Trainer {
    /// Fresh model initialized from the init seed stream.
    pub fn new(config: &RunConfig, shape: SampleShape) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let model = CdModel::new(config.model_config(shape)?, config.seeds.init())?;
        let adam = AdamState::new(model.params());
        let rng = RngState {
            init: config.seeds.init(),
            augment: config.seeds.augment(),
            shuffle: config.seeds.shuffle(),
        };
        Ok(Self {
            config,
            shape,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        if ckpt.adam.m.len() != model.params().len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            config: ckpt.config,
            shape: ckpt.sample_shape,
            model,
            adam: ckpt.adam,
            rng: ckpt.rng,
            epoch: ckpt.epoch as usize,
            step: ckpt.step as usize,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let strip = |v: &[Named<f64>]| -> Vec<Named<f64>> {
            v.iter()
                .map(|p| Named {
                    name: p.name.clone(),
                    tensor: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                        .expect("consistent shape"),
                })
                .collect()
        };
        Checkpoint {
            config: self.config.clone(),
            sample_shape: self.shape,
            params: strip(self.model.params()),
            buffers: strip(self.model.buffers()),
            adam: self.adam.clone(),
            rng: self.rng,
            epoch: self.epoch as u64,
            step: self.step as u64,
        }
    }

    pub fn model(&self) -> &CdModel<f64> {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    fn check_data(&self, data: &Samples) -> Result<()> {
        if data.shape() != self.shape {
            return Err(Error::Contract(format!(
                "dataset samples {:?} do not match model input {:?}",
                data.shape(),
                self.shape
            )));
        }
        Ok(())
    }

    /// Runs one epoch over `data`.
    pub fn train_epoch(&mut self, data: &Samples) -> Result<EpochRecord> {
        self.check_data(data)?;
        let tc = self.config.train.clone();
        let epoch_seed = |base: u64| derive_seed(base, self.epoch as u64);
        let batches = data.batches(tc.batch_size, epoch_seed(self.rng.shuffle))?;
        let total_steps = tc.epochs * batches.len();
        let schedule_last = total_steps.saturating_sub(1);
        let mut policy = self.config.augment.clone();
        policy.single_view = !tc.dual_view;
        let temps = Temperatures {
            tau_inst: tc.tau_inst,
            tau_feat: tc.tau_feat,
        };
        let mut sums = [0.0f64; 4];
        let mut lr = tc.lr;
        let aug_epoch = epoch_seed(self.rng.augment);
        for (b, idx) in batches.iter().enumerate() {
            let raw = data.gather(idx);
            let views = make_views(&raw, self.shape, &policy, &mut rng_for(aug_epoch, b as u64))?;
            let width = self.shape.len();
            let x1 = Tensor::new(vec![views.n, width], views.view1)?;
            let x2 = Tensor::new(vec![views.n, width], views.view2)?;

            let tape = Tape::new();
            let vars = self.model.bind(&tape);
            let (v1, v2) = (tape.constant(&x1), tape.constant(&x2));
            let (loss, br) = if tc.use_feature_head {
                let o1 = self.model.forward(&vars, v1, Mode::Train)?;
                let o2 = self.model.forward(&vars, v2, Mode::Train)?;
                combined_loss(o1.z, o2.z, Some((o1.y, o2.y)), temps, tc.alpha, tc.loss_terms())?
            } else {
                let h1 = self.model.encode(&vars, v1, Mode::Train)?;
                let z1 = self.model.project(&vars, h1, Mode::Train)?;
                let h2 = self.model.encode(&vars, v2, Mode::Train)?;
                let z2 = self.model.project(&vars, h2, Mode::Train)?;
                combined_loss(z1, z2, None, temps, tc.alpha, tc.loss_terms())?
            };
            if !br.l_total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {}",
                    self.epoch + 1,
                    b
                )));
            }
            let grads = tape.backward(loss)?;
            self.model.store_grads(&vars, &grads)?;
            if tc.use_clipping {
                clip_gradients(self.model.params_mut(), tc.grad_clip_norm)?;
            }
            lr = if tc.use_scheduler {
                cosine_lr(self.step.min(schedule_last), schedule_last, tc.lr)?
            } else {
                tc.lr
            };
            adam_step(self.model.params_mut(), &mut self.adam, lr)?;
            self.model.zero_grad();
            self.step += 1;
            for (s, v) in sums.iter_mut().zip([br.l_inst, br.l_feat, br.l_entropy, br.l_total]) {
                *s += v;
            }
        }
        self.epoch += 1;
        let nb = batches.len() as f64;
        let applied_alpha = if tc.use_feature_head && tc.use_entropy_loss {
            tc.alpha
        } else {
            0.0
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            losses: LossBreakdown {
                l_inst: sums[0] / nb,
                l_feat: sums[1] / nb,
                l_entropy: sums[2] / nb,
                alpha: applied_alpha,
                l_total: sums[3] / nb,
            },
            lr,
        })
    }

    /// Trains until the configured epoch count or `max_epochs` more epochs,
    /// whichever comes first.
    pub fn run(&mut self, data: &Samples, max_epochs: Option<usize>) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        let mut left = max_epochs.unwrap_or(usize::MAX);
        while !self.is_finished() && left > 0 {
            out.push(self.train_epoch(data)?);
            left -= 1;
        }
        Ok(out)
    }
}

/// Trains a fresh model for the configured number of epochs.
pub fn train_loop(config: &RunConfig, data: &Samples) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(config, data.shape())?;
    let log = trainer.run(data, None)?;
    Ok((trainer.checkpoint(), log))
}
