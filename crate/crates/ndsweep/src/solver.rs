//! SGD with momentum and weight decay, the fixed-interval unit-sweeping
//! schedule, post-step freezing of swept filters, and checkpoint emission
//! at every sweep increment.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{LayerParams, Network, ParamGrad};
use crate::tensor::Tensor;

fn default_batch_size() -> usize {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub base_lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_iters: usize,
    /// Iterations between sweep-index increments.
    pub sweep_interval: usize,
    pub rng_seed: u64,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sweep_interval == 0 {
            return Err(Error::Config("sweep_interval must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log: `(iter, loss, sweep_index, lr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f32,
    pub sweep_index: usize,
    pub lr: f32,
}

/// Mutable training state. The `freeze` count always equals the nd
/// sweep index; frozen leading filters of the attached conv layer are
/// immutable (weights, bias, and momentum buffer).
pub struct TrainState {
    pub iter: usize,
    pub net: Network,
    pub velocity: Vec<ParamGrad>,
    pub rng: ChaCha8Rng,
    pub rng_seed: [u8; 32],
}

fn zero_velocity(params: &[LayerParams]) -> Vec<ParamGrad> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::Conv(c) => ParamGrad::Pair {
                weights: Tensor::zeros(c.weights.shape()).unwrap(),
                bias: Tensor::zeros(c.bias.shape()).unwrap(),
            },
            LayerParams::Fc(f) => ParamGrad::Pair {
                weights: Tensor::zeros(f.weights.shape()).unwrap(),
                bias: Tensor::zeros(f.bias.shape()).unwrap(),
            },
            LayerParams::None => ParamGrad::None,
        })
        .collect()
}

impl TrainState {
    /// Fresh state: parameters drawn from a seeded init stream, training
    /// draws from a separate seeded stream.
    pub fn new(net: Network, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let rng_seed = rng.get_seed();
        let velocity = zero_velocity(&net.params);
        TrainState {
            iter: 0,
            net,
            velocity,
            rng,
            rng_seed,
        }
    }

    pub fn freeze_count(&self) -> usize {
        self.net.nd.as_ref().map(|a| a.state.s).unwrap_or(0)
    }
}

/// The slice of parameters pinned by sweeping: the first `count` output
/// filters of conv layer `layer`.
#[derive(Clone, Copy, Debug)]
pub struct FreezeSpec {
    pub layer: usize,
    pub count: usize,
}

/// One SGD update: `v <- momentum*v - lr*(g + weight_decay*w)`,
/// `w <- w + v`, then frozen filter slices (weights, bias, velocity) are
/// restored to their pre-step values.
pub fn sgd_step(
    params: &mut [LayerParams],
    velocity: &mut [ParamGrad],
    grads: &[ParamGrad],
    config: &SolverConfig,
    freeze: Option<FreezeSpec>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::InvalidShape(
            "params, velocity, and grads must align".into(),
        ));
    }

    // Snapshot frozen slices before the update.
    let frozen = match freeze {
        Some(FreezeSpec { layer, count }) if count > 0 => {
            let LayerParams::Conv(cp) = &params[layer] else {
                return Err(Error::ProtocolViolation(format!(
                    "freeze target layer {layer} is not a conv layer"
                )));
            };
            let row = cp.weights.len() / cp.n_out();
            let ParamGrad::Pair { weights: vw, bias: vb } = &velocity[layer] else {
                return Err(Error::ProtocolViolation(
                    "freeze target has no velocity buffer".into(),
                ));
            };
            Some((
                layer,
                count * row,
                cp.weights.data()[..count * row].to_vec(),
                cp.bias.data()[..count].to_vec(),
                vw.data()[..count * row].to_vec(),
                vb.data()[..count].to_vec(),
            ))
        }
        _ => None,
    };

    let lr = config.base_lr;
    let mu = config.momentum;
    let wd = config.weight_decay;
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let (ParamGrad::Pair { weights: vw, bias: vb }, ParamGrad::Pair { weights: gw, bias: gb }) =
            (v, g)
        else {
            continue;
        };
        let mut tensors = p.tensors_mut();
        if tensors.len() != 2 {
            return Err(Error::InvalidShape("gradient for parameterless layer".into()));
        }
        for (t, (vt, gt)) in tensors
            .iter_mut()
            .zip([(&mut *vw, gw), (&mut *vb, gb)])
        {
            if t.shape() != gt.shape() {
                return Err(Error::InvalidShape(format!(
                    "gradient shape {:?} does not mirror parameter {:?}",
                    gt.shape(),
                    t.shape()
                )));
            }
            for ((w, v), &g) in t
                .data_mut()
                .iter_mut()
                .zip(vt.data_mut())
                .zip(gt.data())
            {
                *v = mu * *v - lr * (g + wd * *w);
                *w += *v;
            }
        }
    }

    // Freeze wins over the update.
    if let Some((layer, wlen, w0, b0, vw0, vb0)) = frozen {
        let LayerParams::Conv(cp) = &mut params[layer] else {
            unreachable!()
        };
        cp.weights.data_mut()[..wlen].copy_from_slice(&w0);
        cp.bias.data_mut()[..b0.len()].copy_from_slice(&b0);
        let ParamGrad::Pair { weights: vw, bias: vb } = &mut velocity[layer] else {
            unreachable!()
        };
        vw.data_mut()[..wlen].copy_from_slice(&vw0);
        vb.data_mut()[..vb0.len()].copy_from_slice(&vb0);
    }
    Ok(())
}

/// Outcome of a sweep-schedule tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepEvent {
    /// New sweep index; the `s`-th filter has just been fixed.
    pub sweep_index: usize,
}

/// Increment the sweep index when the iteration counter crosses a
/// multiple of the interval and units remain; otherwise a no-op.
pub fn sweep_tick(state: &mut TrainState, config: &SolverConfig) -> Option<SweepEvent> {
    let att = state.net.nd.as_mut()?;
    if state.iter == 0 || !state.iter.is_multiple_of(config.sweep_interval) {
        return None;
    }
    if att.state.s >= att.state.n {
        return None;
    }
    att.state.s += 1;
    Some(SweepEvent {
        sweep_index: att.state.s,
    })
}

/// Deterministic epoch-wise shuffle without replacement. The permutation
/// of epoch `e` depends only on `(seed, e)`, so batch selection is a pure
/// function of the iteration counter.
pub struct ShuffleSchedule {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<u32>,
}

impl ShuffleSchedule {
    pub fn new(seed: u64, n: usize) -> Self {
        ShuffleSchedule {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn perm_for(&mut self, epoch: usize) -> &[u32] {
        if self.epoch != Some(epoch) {
            let mut perm: Vec<u32> = (0..self.n as u32).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
            // Fisher-Yates
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            self.perm = perm;
            self.epoch = Some(epoch);
        }
        &self.perm
    }

    /// Sample indices of minibatch `iter` (0-based), wrapping across
    /// epoch boundaries.
    pub fn minibatch(&mut self, iter: usize, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        for off in 0..batch_size {
            let p = iter * batch_size + off;
            let epoch = p / self.n;
            let idx = p % self.n;
            out.push(self.perm_for(epoch)[idx] as usize);
        }
        out
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// `(sweep_index, path)` per sweep event, in order.
    pub sweep_checkpoints: Vec<(usize, PathBuf)>,
    pub final_checkpoint: Option<PathBuf>,
}

fn gather_batch(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let sample_len: usize = dataset.images.shape()[1..].iter().product();
    let mut shape = dataset.images.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * sample_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&dataset.images.data()[i * sample_len..(i + 1) * sample_len]);
        labels.push(dataset.labels[i]);
    }
    Ok((Tensor::from_vec(&shape, data)?, labels))
}

fn checkpoint_from_state(state: &TrainState) -> Checkpoint {
    Checkpoint {
        spec: state.net.spec.clone(),
        nd: state.net.nd.clone(),
        iter: state.iter as u64,
        params: state.net.params.clone(),
        velocity: state.velocity.clone(),
        rng_seed: state.rng_seed,
        rng_word_pos: state.rng.get_word_pos(),
    }
}

/// Run SGD from `state.iter` to `config.max_iters`. Every sweep event
/// (and the end of training) emits a checkpoint into `out_dir` when one
/// is given; the log is also written there as `train_log.csv`.
pub fn train_loop(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &SolverConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.images.shape()[0] == 0 || dataset.labels.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if let Some(att) = &state.net.nd {
        if config.sweep_interval.saturating_mul(att.state.n) > config.max_iters {
            eprintln!(
                "warning: sweep_interval {} * n {} exceeds max_iters {}; later units will never be swept",
                config.sweep_interval, att.state.n, config.max_iters
            );
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut schedule = ShuffleSchedule::new(config.rng_seed, dataset.images.shape()[0]);
    let mut log = Vec::new();
    let mut sweep_checkpoints = Vec::new();

    while state.iter < config.max_iters {
        let indices = schedule.minibatch(state.iter, config.batch_size);
        let (images, labels) = gather_batch(dataset, &indices)?;
        let (loss, grads) = state.net.loss_and_grads(&images, &labels, &mut state.rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter: state.iter,
                loss: loss as f64,
            });
        }
        let freeze = state.net.nd.as_ref().map(|a| FreezeSpec {
            layer: a.layer,
            count: a.state.s,
        });
        sgd_step(
            &mut state.net.params,
            &mut state.velocity,
            &grads,
            config,
            freeze,
        )?;
        state.iter += 1;
        log.push(LogRow {
            iter: state.iter,
            loss,
            sweep_index: state.freeze_count(),
            lr: config.base_lr,
        });
        if let Some(event) = sweep_tick(state, config) {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("sweep_{:04}.ckpt", event.sweep_index));
                save_checkpoint(&checkpoint_from_state(state), &path)?;
                sweep_checkpoints.push((event.sweep_index, path));
            } else {
                sweep_checkpoints.push((event.sweep_index, PathBuf::new()));
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&checkpoint_from_state(state), &path)?;
        final_checkpoint = Some(path);

        let log_path = dir.join("train_log.csv");
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "iter,loss,sweep_index,lr").map_err(|e| Error::io(&log_path, e))?;
        for row in &log {
            writeln!(f, "{},{},{},{}", row.iter, row.loss, row.sweep_index, row.lr)
                .map_err(|e| Error::io(&log_path, e))?;
        }
    }

    Ok(TrainOutcome {
        log,
        sweep_checkpoints,
        final_checkpoint,
    })
}

/// Rebuild a `TrainState` from a checkpoint, restoring the exact RNG
/// position so a resumed run is bit-identical to an uninterrupted one.
pub fn state_from_checkpoint(ckpt: Checkpoint) -> Result<TrainState> {
    let net = Network::new(ckpt.spec, ckpt.params, ckpt.nd)?;
    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_word_pos(ckpt.rng_word_pos);
    Ok(TrainState {
        iter: ckpt.iter as usize,
        net,
        velocity: ckpt.velocity,
        rng,
        rng_seed: ckpt.rng_seed,
    })
}
