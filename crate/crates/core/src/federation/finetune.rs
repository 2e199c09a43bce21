use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, sample_online, Update};
use super::config::OnlinePolicy;
use super::device::batches;
use crate::autodiff::{cosine_lr, OptimizerState, ParamKind, SgdConfig, Tape};
use crate::data::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::supernet::{BnMode, DerivedArchitecture, NormalNet};

/// Plain federated averaging of a fixed architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub online: OnlinePolicy,
    pub workers: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            rounds: 50,
            local_epochs: 2,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            online: OnlinePolicy::All,
            workers: 1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub train_loss: f64,
    pub normalizer: usize,
}

/// Samples a device trains on once the architecture is fixed: its training
/// and validation sets together.
pub fn finetune_indices(p: &DevicePartition) -> Vec<usize> {
    let mut v: Vec<usize> = p.train.iter().chain(&p.val).copied().collect();
    v.sort_unstable();
    v
}

pub(crate) fn normal_weight_step(
    net: &mut NormalNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    idx: &[usize],
) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = net.forward(&mut tape, xv, BnMode::Train { update_stats: true })?;
    let loss = tape.cross_entropy(logits, &y)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "fine-tuning loss".into() });
    }
    let grads = tape.backward(loss)?.into_params();
    let ids: Vec<String> =
        grads.keys().filter(|id| net.params.by_id(id).is_some_and(|p| p.kind == ParamKind::Weight)).cloned().collect();
    opt.step(&mut net.params, &ids, &grads)?;
    Ok(value)
}

fn train_epoch(
    net: &mut NormalNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
    rng: &mut Rng,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for b in batches(indices, batch, rng) {
        sum += normal_weight_step(net, opt, data, &b)?;
        n += 1;
    }
    Ok((sum, n))
}

struct Replica {
    id: usize,
    indices: Vec<usize>,
    net: NormalNet,
    opt: OptimizerState,
}

/// Trains `arch` from freshly initialized weights with FedAvg over the given
/// devices. Architecture parameters play no part.
pub fn finetune_fedavg(
    arch: &DerivedArchitecture,
    data: &Dataset,
    partitions: &[DevicePartition],
    cfg: &FinetuneConfig,
) -> Result<(NormalNet, Vec<FinetuneReport>)> {
    if partitions.is_empty() || cfg.local_epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Invalid("fine-tuning needs devices, local epochs and a batch size".into()));
    }
    let mut global = NormalNet::new(arch, cfg.seed)?;
    let mut replicas = partitions
        .iter()
        .map(|p| {
            let indices = finetune_indices(p);
            if indices.is_empty() {
                return Err(Error::EmptyDevice(p.device_id));
            }
            Ok(Replica { id: p.device_id, indices, net: global.clone(), opt: OptimizerState::sgd(cfg.sgd()) })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let ids: Vec<usize> = replicas.iter().map(|r| r.id).collect();
    let horizon = (cfg.rounds * cfg.local_epochs).max(1);
    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let online = sample_online(&ids, cfg.online, &mut substream(cfg.seed, "finetune-online", &[t as u64]))?;
        let params = &global.params;
        let results: Vec<(usize, Result<(f64, usize)>)> = pool.install(|| {
            replicas
                .par_iter_mut()
                .filter(|r| online.binary_search(&r.id).is_ok())
                .map(|r| {
                    let mut run = || -> Result<(f64, usize)> {
                        r.net.params.copy_from(params)?;
                        let (mut sum, mut n) = (0.0, 0);
                        for e in 0..cfg.local_epochs {
                            let epoch = t * cfg.local_epochs + e;
                            r.opt.set_lr(cosine_lr(epoch, horizon, cfg.lr)?);
                            let mut rng = substream(cfg.seed, "finetune", &[r.id as u64, epoch as u64]);
                            let (s, k) =
                                train_epoch(&mut r.net, &mut r.opt, data, &r.indices, cfg.batch_size, &mut rng)?;
                            sum += s;
                            n += k;
                        }
                        Ok((sum / n.max(1) as f64, r.indices.len()))
                    };
                    (r.id, run())
                })
                .collect()
        });
        let mut ok = Vec::new();
        for (id, res) in results {
            match res {
                Ok(v) => ok.push((id, v)),
                Err(Error::NonFinite { context }) => {
                    log::warn!("fine-tune round {}: device {id} dropped ({context})", t + 1)
                }
                Err(e) => return Err(e),
            }
        }
        if ok.is_empty() {
            return Err(Error::RoundAborted { round: t + 1 });
        }
        let updates: Vec<Update> = ok
            .iter()
            .map(|(id, (_, n))| {
                let r = replicas.iter().find(|r| r.id == *id).expect("known device");
                Update { device_id: *id, params: &r.net.params, num_samples: *n }
            })
            .collect();
        let (merged, normalizer) = aggregate(&updates)?;
        global.params.copy_from(&merged)?;
        let loss = ok.iter().map(|(_, (l, n))| l * *n as f64).sum::<f64>() / normalizer as f64;
        reports.push(FinetuneReport {
            round: t + 1,
            participants: ok.iter().map(|(id, _)| *id).collect(),
            train_loss: loss,
            normalizer,
        });
    }
    Ok((global, reports))
}

/// Fraction of `indices` classified correctly with running batch-norm
/// statistics.
pub fn accuracy(net: &mut NormalNet, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Invalid("cannot measure accuracy on an empty set".into()));
    }
    let mut correct = 0;
    for chunk in indices.chunks(256) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = net.forward(&mut tape, xv, BnMode::Eval)?;
        let out = tape.value(logits);
        let classes = out.shape()[1];
        for (row, &label) in out.data().chunks(classes).zip(&y) {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The global net on the union of device test sets.
    FederatedAveraged,
    /// Each device fine-tunes locally, tests on its own data; unweighted mean.
    MeanLocal,
}

/// Local adaptation used by [`EvalMode::MeanLocal`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalTuning {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LocalTuning {
    fn default() -> Self {
        LocalTuning { epochs: 5, lr: 0.01, momentum: 0.9, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub accuracy: f64,
    /// `(device id, accuracy)` for mean-local evaluation.
    pub per_device: Vec<(usize, f64)>,
}

pub fn evaluate(
    net: &NormalNet,
    data: &Dataset,
    partitions: &[DevicePartition],
    mode: EvalMode,
    local: &LocalTuning,
) -> Result<Evaluation> {
    if partitions.iter().any(|p| p.test.is_empty()) || partitions.is_empty() {
        return Err(Error::Invalid("every evaluated device needs a test set".into()));
    }
    match mode {
        EvalMode::FederatedAveraged => {
            let mut union: Vec<usize> = partitions.iter().flat_map(|p| p.test.iter().copied()).collect();
            union.sort_unstable();
            let acc = accuracy(&mut net.clone(), data, &union)?;
            Ok(Evaluation { mode, accuracy: acc, per_device: Vec::new() })
        }
        EvalMode::MeanLocal => {
            let mut per_device = Vec::with_capacity(partitions.len());
            for p in partitions {
                let mut local_net = net.clone();
                let sgd = SgdConfig { lr: local.lr, momentum: local.momentum, weight_decay: 0.0 };
                let mut opt = OptimizerState::sgd(sgd);
                let indices = finetune_indices(p);
                for e in 0..local.epochs {
                    let mut rng = substream(local.seed, "local-tune", &[p.device_id as u64, e as u64]);
                    train_epoch(&mut local_net, &mut opt, data, &indices, local.batch_size, &mut rng)?;
                }
                per_device.push((p.device_id, accuracy(&mut local_net, data, &p.test)?));
            }
            let acc = per_device.iter().map(|(_, a)| a).sum::<f64>() / per_device.len() as f64;
            Ok(Evaluation { mode, accuracy: acc, per_device })
        }
    }
}
