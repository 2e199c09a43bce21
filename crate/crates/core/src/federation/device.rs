use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Interleave, SearchConfig};
use crate::autodiff::{cosine_lr, OptimizerState, ParamKind, ParamSet, Tape};
use crate::data::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::rng::{substream, Rng};
use crate::supernet::{GateMode, RescaleRule, SuperNet};

/// One simulated device: its data, hardware tag, local supernet replica and
/// optimizer buffers.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub device_id: usize,
    pub partition: DevicePartition,
    pub hardware_tag: Option<String>,
    pub net: SuperNet,
    pub weight_opt: OptimizerState,
    pub arch_opt: OptimizerState,
    /// Selects the device's random stream; devices sharing a stream id draw
    /// identical batches and gates.
    pub stream_id: u64,
}

impl DeviceState {
    pub fn new(
        partition: DevicePartition,
        hardware_tag: Option<String>,
        net: SuperNet,
        cfg: &SearchConfig,
    ) -> Result<Self> {
        if partition.train.is_empty() {
            return Err(Error::EmptyDevice(partition.device_id));
        }
        let device_id = partition.device_id;
        Ok(DeviceState {
            device_id,
            partition,
            hardware_tag,
            net,
            weight_opt: OptimizerState::sgd(cfg.sgd()),
            arch_opt: OptimizerState::adam(cfg.arch),
            stream_id: device_id as u64,
        })
    }

    /// `N_k`: the number of training samples.
    pub fn num_samples(&self) -> usize {
        self.partition.train.len()
    }

    pub fn reset_optimizers(&mut self) {
        self.weight_opt.reset();
        self.arch_opt.reset();
    }
}

/// Loss statistics of one local update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub device_id: usize,
    pub num_samples: usize,
    /// Mean cross-entropy over the weight steps.
    pub train_loss: f64,
    /// Mean cross-entropy over the architecture steps.
    pub val_loss: f64,
    pub weight_steps: usize,
    pub arch_steps: usize,
}

#[derive(Default)]
pub(crate) struct EpochLoss {
    pub train_sum: f64,
    pub train_steps: usize,
    pub val_sum: f64,
    pub val_steps: usize,
}

impl EpochLoss {
    fn absorb(&mut self, o: EpochLoss) {
        self.train_sum += o.train_sum;
        self.train_steps += o.train_steps;
        self.val_sum += o.val_sum;
        self.val_steps += o.val_steps;
    }
}

pub(crate) fn batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    // A trailing single-sample batch gives degenerate batch statistics.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
    }
    out
}

/// One SGD step on the weights along a single sampled path.
pub(crate) fn weight_step(
    net: &mut SuperNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    idx: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (logits, _) = net.forward_train(&mut tape, xv, rng, GateMode::WeightStep)?;
    let loss = tape.cross_entropy(logits, &y)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "training loss".into() });
    }
    let grads = tape.backward(loss)?.into_params();
    let ids: Vec<String> =
        grads.keys().filter(|id| net.params.by_id(id).is_some_and(|p| p.kind == ParamKind::Weight)).cloned().collect();
    opt.step(&mut net.params, &ids, &grads)?;
    Ok(value)
}

/// One two-path architecture step: gate gradients of the sampled pairs plus
/// the latency term, Adam on the pair, rescale.
pub(crate) fn arch_step(
    net: &mut SuperNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    idx: &[usize],
    rng: &mut Rng,
    latencies: &[Vec<f64>],
    lambda2: f64,
    rule: RescaleRule,
) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (logits, trace) = net.forward_train(&mut tape, xv, rng, GateMode::ArchStep)?;
    let loss = tape.cross_entropy(logits, &y)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "validation loss".into() });
    }
    let grads = tape.backward(loss)?;
    for s in &trace.samples {
        let pair = s.pair.expect("arch step samples a pair");
        let f = &latencies[s.layer_index];
        let g = |k: usize| grads.leaf(s.gates[k]).map_or(0.0, |v| v[0]);
        let dl_db = [g(0) + lambda2 * f[pair.i], g(1) + lambda2 * f[pair.j]];
        net.pair_arch_step(s, dl_db, opt, rule)?;
    }
    Ok(value)
}

/// One local epoch over `train` (weight steps) and `val` (architecture
/// steps), interleaved per `cfg.interleave`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_epoch(
    net: &mut SuperNet,
    weight_opt: &mut OptimizerState,
    arch_opt: &mut OptimizerState,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    latencies: &[Vec<f64>],
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<EpochLoss> {
    let mut out = EpochLoss::default();
    let train_batches = batches(train, cfg.batch_size, rng);
    let val_batches = if cfg.search_arch { batches(val, cfg.batch_size, rng) } else { Vec::new() };
    let mut arch = |net: &mut SuperNet, b: &[usize], rng: &mut Rng, out: &mut EpochLoss| -> Result<()> {
        out.val_sum += arch_step(net, arch_opt, data, b, rng, latencies, cfg.lambda2, cfg.rescale)?;
        out.val_steps += 1;
        Ok(())
    };
    match cfg.interleave {
        Interleave::PerEpoch => {
            for b in &train_batches {
                out.train_sum += weight_step(net, weight_opt, data, b, rng)?;
                out.train_steps += 1;
            }
            for b in &val_batches {
                arch(net, b, rng, &mut out)?;
            }
        }
        Interleave::PerBatch => {
            let steps = train_batches.len().max(val_batches.len());
            for s in 0..steps {
                if let Some(b) = train_batches.get(s) {
                    out.train_sum += weight_step(net, weight_opt, data, b, rng)?;
                    out.train_steps += 1;
                }
                if let Some(b) = val_batches.get(s) {
                    arch(net, b, rng, &mut out)?;
                }
            }
        }
    }
    Ok(out)
}

/// Random stream of one device epoch, keyed by the epoch's global index so a
/// device resumes the same sequence regardless of how rounds are split.
pub(crate) fn epoch_rng(seed: u64, stream_id: u64, global_epoch: usize) -> Rng {
    substream(seed, "device", &[stream_id, global_epoch as u64])
}

/// Loads the global parameters, runs `E` local epochs, returns loss stats.
/// The learning rate follows a cosine schedule over all `T · E` epochs.
pub fn device_update(
    global: &ParamSet,
    device: &mut DeviceState,
    data: &Dataset,
    table: &LatencyTable,
    cfg: &SearchConfig,
    round: usize,
) -> Result<DeviceStats> {
    if cfg.local_epochs == 0 {
        return Err(Error::Invalid("local_epochs must be at least 1".into()));
    }
    if device.partition.train.is_empty() {
        return Err(Error::EmptyDevice(device.device_id));
    }
    if cfg.search_arch && device.partition.val.is_empty() {
        return Err(Error::Invalid(format!("device {} has no validation data", device.device_id)));
    }
    device.net.params.copy_from(global)?;
    let latencies = device.net.layer_latencies(table)?;
    let horizon = cfg.rounds * cfg.local_epochs;
    let mut total = EpochLoss::default();
    for e in 0..cfg.local_epochs {
        let global_epoch = round * cfg.local_epochs + e;
        device.weight_opt.set_lr(cosine_lr(global_epoch.min(horizon), horizon.max(1), cfg.weight_lr)?);
        let mut rng = epoch_rng(cfg.seed, device.stream_id, global_epoch);
        let DeviceState { net, weight_opt, arch_opt, partition, .. } = device;
        let loss =
            local_epoch(net, weight_opt, arch_opt, data, &partition.train, &partition.val, &latencies, cfg, &mut rng)?;
        total.absorb(loss);
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(DeviceStats {
        device_id: device.device_id,
        num_samples: device.num_samples(),
        train_loss: mean(total.train_sum, total.train_steps),
        val_loss: mean(total.val_sum, total.val_steps),
        weight_steps: total.train_steps,
        arch_steps: total.val_steps,
    })
}

/// Centralized search on one device's data for `epochs` epochs with the same
/// schedule, steps and random streams as the federated loop. With no
/// aggregation in between this is the plain single-machine procedure.
pub fn proxyless_search(
    net: &mut SuperNet,
    partition: &DevicePartition,
    stream_id: u64,
    data: &Dataset,
    table: &LatencyTable,
    cfg: &SearchConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    let mut weight_opt = OptimizerState::sgd(cfg.sgd());
    let mut arch_opt = OptimizerState::adam(cfg.arch);
    let latencies = net.layer_latencies(table)?;
    let horizon = cfg.rounds * cfg.local_epochs;
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        weight_opt.set_lr(cosine_lr(epoch.min(horizon), horizon.max(1), cfg.weight_lr)?);
        let mut rng = epoch_rng(cfg.seed, stream_id, epoch);
        let l = local_epoch(
            net,
            &mut weight_opt,
            &mut arch_opt,
            data,
            &partition.train,
            &partition.val,
            &latencies,
            cfg,
            &mut rng,
        )?;
        losses.push(l.train_sum / l.train_steps.max(1) as f64);
    }
    Ok(losses)
}
