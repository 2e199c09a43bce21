//! Acceptance suite. Every criterion prints one line starting with
//! `[acceptance] C<n> PASS` or `[acceptance] C<n> FAIL` and then asserts.
//!
//! Criteria run one at a time (they share a lock) so that each measured
//! runtime is its own. Federated searches of the standard toy setup at
//! `λ2 = 0` are cached and reused by criteria 7 to 10.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use fdnas_cli::commands::{build_world, Metrics};
use fdnas_cli::config::{ExperimentConfig, Overrides};
use fdnas_core::autodiff::{AdamConfig, OptimizerState, ParamKind, Tape, Tensor};
use fdnas_core::data::{gen_synthetic, partition, split_train_val_test, PartitionSpec, SyntheticSpec};
use fdnas_core::federation::{
    aggregate, evaluate, finetune_fedavg, finetune_indices, proxyless_search, run_cfdnas, run_cfdnas_observed,
    sample_online, Checkpoint, ClusterInputs, ClusterOutcome, ClusterPlan, EvalMode, FederatedSearch, FinetuneConfig,
    Interleave, OnlinePolicy, SearchConfig, Update,
};
use fdnas_core::latency::derived_macs;
use fdnas_core::rng::substream;
use fdnas_core::supernet::{
    arch_gradient, compute_probs, derive_normal_net, gate_index, rescale_alphas, sample_active_pair, sample_gate,
    BnMode, CandidateKind, GateMode, GateSample, LayerSpec, RescaleRule,
};
use fdnas_core::{Dataset, DerivedArchitecture, DevicePartition, LatencyTable, ParamSet, SearchSpace, SuperNet};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeds of every multi-seed criterion.
const SEEDS: u64 = 10;
/// `λ` of the latency sweep `{0, λ, 10λ}`; also the cluster latency weight.
const LAMBDA: f64 = 0.02;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line (bypassing the test harness's output capture)
/// and fails the test unless the criterion held within its time limit.
fn verdict(id: u32, name: &str, held: bool, detail: &str, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    let pass = held && elapsed <= limit;
    let line = format!(
        "[acceptance] C{id} {}: {name} | {detail} | {:.1}s of {}s\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient oracle

fn random_tiny_space(rng: &mut ChaCha8Rng) -> SearchSpace {
    let pool = SearchSpace::default_candidates();
    loop {
        let layers = (0..rng.random_range(1..=2))
            .map(|_| LayerSpec { out_channels: rng.random_range(1..=3), stride: rng.random_range(1..=2) })
            .collect();
        let n = rng.random_range(2..=3);
        let candidates: Vec<CandidateKind> = pool.choose_multiple(rng, n).copied().collect();
        let space = SearchSpace {
            input_channels: 1,
            image_size: 4,
            num_classes: 3,
            stem_channels: 2,
            stem_stride: 1,
            layers,
            candidates,
        };
        if space.validate().is_ok() {
            return space;
        }
    }
}

struct MixedGrads {
    dl_db: Vec<Vec<f64>>,
    params: BTreeMap<String, Vec<f64>>,
}

/// Cross-entropy of the relaxed (all-candidates) forward pass.
fn mixed_loss(net: &mut SuperNet, x: &Tensor, y: &[usize], with_grad: bool) -> (f64, Option<MixedGrads>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (logits, gates) = net.forward_mixed(&mut tape, xv).unwrap();
    let loss = tape.cross_entropy(logits, y).unwrap();
    let value = tape.value(loss).item();
    if !with_grad {
        return (value, None);
    }
    let g = tape.backward(loss).unwrap();
    let dl_db = gates.iter().map(|layer| layer.iter().map(|b| g.leaf(*b).unwrap()[0]).collect()).collect();
    (value, Some(MixedGrads { dl_db, params: g.into_params() }))
}

/// Central difference of `f` at zero.
fn central(eps: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

#[test]
fn c01_gradient_oracle() {
    let _lock = serial();
    let start = Instant::now();
    // Losses are of order one, so cancellation leaves central differences
    // with about 1e-16 / eps = 1e-11 of absolute noise. Gradients below the
    // floor are compared in absolute terms, which still resolves them to 1e-5
    // of the floor. Larger steps are not an option: they cross relu6 kinks.
    let (eps, floor) = (1e-5, 1e-5);
    let (mut worst_alpha, mut worst_weight) = (0.0f64, 0.0f64);
    let nets = 60;
    for trial in 0..nets {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let space = random_tiny_space(&mut rng);
        let mut net = SuperNet::new(space, trial).unwrap();
        for l in 0..net.num_layers() {
            let a: Vec<f64> = (0..net.alpha(l).len()).map(|_| rng.random_range(-1.5..1.5)).collect();
            net.set_alpha(l, &a).unwrap();
        }
        let b = 3;
        let x = Tensor::new(vec![b, 1, 4, 4], (0..b * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let (_, grads) = mixed_loss(&mut net, &x, &y, true);
        let grads = grads.unwrap();

        for l in 0..net.num_layers() {
            let p = net.probs(l).unwrap();
            let analytic = arch_gradient(&grads.dl_db[l], &p).unwrap();
            let alpha = net.alpha(l).to_vec();
            for n in 0..alpha.len() {
                let numeric = central(eps, |h| {
                    let mut shifted = alpha.clone();
                    shifted[n] += h;
                    net.set_alpha(l, &shifted).unwrap();
                    mixed_loss(&mut net, &x, &y, false).0
                });
                net.set_alpha(l, &alpha).unwrap();
                worst_alpha = worst_alpha.max(rel_err(analytic[n], numeric, floor));
            }
        }

        // A random sample of weight entries.
        let entries: Vec<(String, usize)> = net
            .params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .flat_map(|p| (0..p.tensor.data().len()).map(move |i| (p.id.clone(), i)))
            .collect();
        for (id, i) in entries.choose_multiple(&mut rng, 12) {
            let analytic = grads.params.get(id).map_or(0.0, |g| g[*i]);
            let orig = net.params.by_id(id).unwrap().tensor.data()[*i];
            let numeric = central(eps, |h| {
                net.params.by_id_mut(id).unwrap().tensor.data_mut()[*i] = orig + h;
                mixed_loss(&mut net, &x, &y, false).0
            });
            net.params.by_id_mut(id).unwrap().tensor.data_mut()[*i] = orig;
            worst_weight = worst_weight.max(rel_err(analytic, numeric, floor));
        }
    }
    let held = worst_alpha <= 1e-5 && worst_weight <= 1e-4;
    let detail = format!("{nets} nets; worst relative error (floor {floor:.0e}) alpha {worst_alpha:.2e} (tol 1e-5), weights {worst_weight:.2e} (tol 1e-4)");
    verdict(1, "gradient oracle", held, &detail, start, minutes(1));
}

// ---------------------------------------------------------------------------
// Criterion 2: simplex and sampling

#[test]
fn c02_simplex_and_sampling() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut worst_sum = 0.0f64;
    let mut negative = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=10);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = compute_probs(&alpha).unwrap();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        negative += p.iter().filter(|v| **v < 0.0).count();
    }

    let draws = 100_000;
    let mut worst_freq = 0.0f64;
    for case in 0..3 {
        let n = rng.random_range(3..=6);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = compute_probs(&alpha).unwrap();
        let mut counts = vec![0usize; n];
        let mut grng = substream(case, "gate-frequency", &[]);
        for _ in 0..draws {
            counts[gate_index(&sample_gate(&p, &mut grng).unwrap())] += 1;
        }
        for (c, pn) in counts.iter().zip(&p) {
            worst_freq = worst_freq.max((*c as f64 / draws as f64 - pn).abs());
        }
    }

    // Count executed candidates from the parameters that received gradients;
    // with only parametric candidates every execution leaves a trace.
    let space = SearchSpace {
        candidates: vec![
            CandidateKind::Mbconv { expansion: 3, kernel: 3 },
            CandidateKind::Mbconv { expansion: 3, kernel: 5 },
            CandidateKind::Mbconv { expansion: 6, kernel: 3 },
        ],
        ..SearchSpace::toy(10)
    };
    let mut net = SuperNet::new(space, 2).unwrap();
    let mut frng = substream(2, "forward", &[]);
    let mut bad_counts = 0;
    let passes = 20;
    for step in 0..passes {
        let mode = if step % 2 == 0 { GateMode::WeightStep } else { GateMode::ArchStep };
        let expect = if mode == GateMode::WeightStep { 1 } else { 2 };
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| frng.random_range(-1.0..1.0)).collect()).unwrap();
        let xv = tape.constant(x);
        let (logits, trace) = net.forward_train(&mut tape, xv, &mut frng, mode).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap().into_params();
        for l in 0..net.num_layers() {
            let touched: BTreeSet<usize> = (0..net.layers()[l].len())
                .filter(|n| grads.keys().any(|id| id.starts_with(&format!("layer{l}.cand{n}."))))
                .collect();
            let traced: BTreeSet<usize> = trace.samples[l].active.iter().copied().collect();
            if touched.len() != expect || touched != traced || trace.executions[l] != expect {
                bad_counts += 1;
            }
        }
    }

    let held = worst_sum <= 1e-12 && negative == 0 && worst_freq <= 0.01 && bad_counts == 0;
    let detail = format!(
        "simplex error {worst_sum:.1e} over 1e4 alphas; gate frequency error {worst_freq:.4} at 1e5 draws; \
         {bad_counts} layers with wrong active counts over {passes} passes"
    );
    verdict(2, "simplex and sampling", held, &detail, start, minutes(1));
}

// ---------------------------------------------------------------------------
// Criterion 3: rescaling contract

/// Largest relative change of `p_a / p_b` over unsampled pairs `(a, b)`.
fn ratio_drift(before: &[f64], after: &[f64], pair: (usize, usize)) -> f64 {
    let others: Vec<usize> = (0..before.len()).filter(|k| *k != pair.0 && *k != pair.1).collect();
    let mut worst = 0.0f64;
    for &a in &others {
        for &b in &others {
            let (r0, r1) = (before[a] / before[b], after[a] / after[b]);
            worst = worst.max((r1 - r0).abs() / r0);
        }
    }
    worst
}

#[test]
fn c03_rescaling_contract() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mass, mut worst_ratio, mut clamped) = (0.0f64, 0.0f64, 0);

    // Direct steps on random architecture parameters.
    for _ in 0..10_000 {
        let n = rng.random_range(2..=8);
        let mut alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let pair = (i.min(j), i.max(j));
        let before = compute_probs(&alpha).unwrap();
        let mass = before[pair.0] + before[pair.1];
        alpha[pair.0] += rng.random_range(-1.0..1.0);
        alpha[pair.1] += rng.random_range(-1.0..1.0);
        clamped += usize::from(rescale_alphas(&mut alpha, pair, mass).unwrap().clamped);
        let after = compute_probs(&alpha).unwrap();
        worst_mass = worst_mass.max((after[pair.0] + after[pair.1] - mass).abs());
        worst_ratio = worst_ratio.max(ratio_drift(&before, &after, pair));
    }

    // The same contract through the supernet's two-path Adam update.
    let mut net = SuperNet::new(SearchSpace::toy(10), 3).unwrap();
    let mut adam =
        OptimizerState::adam(AdamConfig { lr: 0.05, beta1: 0.0, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
    let mut srng = substream(3, "pairs", &[]);
    for _ in 0..10_000 {
        let l = rng.random_range(0..net.num_layers());
        let before = net.probs(l).unwrap();
        let pair = sample_active_pair(&before, &mut srng).unwrap();
        let n = before.len();
        let mut mask = vec![false; n];
        mask[pair.i] = true;
        mask[pair.j] = true;
        let sample = GateSample {
            layer_index: l,
            active: vec![pair.i, pair.j],
            mask,
            pair: Some(pair),
            gates: Vec::new(),
            step: net.layers()[l].arch_steps(),
        };
        let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        clamped += usize::from(net.pair_arch_step(&sample, g, &mut adam, RescaleRule::PairMass).unwrap().clamped);
        let after = net.probs(l).unwrap();
        worst_mass = worst_mass.max((after[pair.i] + after[pair.j] - before[pair.i] - before[pair.j]).abs());
        worst_ratio = worst_ratio.max(ratio_drift(&before, &after, (pair.i, pair.j)));
    }

    let held = worst_mass <= 1e-9 && worst_ratio <= 1e-9 && clamped == 0;
    let detail = format!(
        "2x1e4 steps; pair mass error {worst_mass:.1e}, unsampled ratio drift {worst_ratio:.1e} (tol 1e-9); {clamped} clamped"
    );
    verdict(3, "rescaling contract", held, &detail, start, minutes(1));
}

// ---------------------------------------------------------------------------
// Criterion 4: aggregation algebra

fn scalar_set(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.register("w", ParamKind::Weight, Tensor::from_vec(vec![v]));
    p
}

fn random_set(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.register("w", ParamKind::Weight, Tensor::from_vec((0..5).map(|_| rng.random_range(-3.0..3.0)).collect()));
    p.register("alpha", ParamKind::Arch, Tensor::from_vec((0..3).map(|_| rng.random_range(-3.0..3.0)).collect()));
    p.register("bn.mean", ParamKind::Buffer, Tensor::from_vec((0..2).map(|_| rng.random_range(-3.0..3.0)).collect()));
    p
}

#[test]
fn c04_aggregation_algebra() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();

    let one = random_set(&mut rng);
    let (single, n) = aggregate(&[Update { device_id: 0, params: &one, num_samples: 7 }]).unwrap();
    if single != one || n != 7 {
        failures.push("single update is not returned unchanged");
    }

    let (a, b) = (scalar_set(0.0), scalar_set(4.0));
    let (mean, _) = aggregate(&[
        Update { device_id: 0, params: &a, num_samples: 1 },
        Update { device_id: 1, params: &b, num_samples: 3 },
    ])
    .unwrap();
    if mean.by_id("w").unwrap().tensor.data() != [3.0] {
        failures.push("(0, 4) with sizes (1, 3) does not give 3.0");
    }

    let same: Vec<ParamSet> = vec![one.clone(); 4];
    let updates: Vec<Update> =
        same.iter().enumerate().map(|(k, p)| Update { device_id: k, params: p, num_samples: k + 1 }).collect();
    if aggregate(&updates).unwrap().0 != one {
        failures.push("identical updates do not aggregate to themselves");
    }

    let sets: Vec<ParamSet> = (0..6).map(|_| random_set(&mut rng)).collect();
    let mut updates: Vec<Update> = sets
        .iter()
        .enumerate()
        .map(|(k, p)| Update { device_id: k, params: p, num_samples: rng.random_range(1..50) })
        .collect();
    let reference = aggregate(&updates).unwrap();
    for _ in 0..50 {
        use rand::seq::SliceRandom;
        updates.shuffle(&mut rng);
        if aggregate(&updates).unwrap() != reference {
            failures.push("aggregation depends on input order");
            break;
        }
    }

    // Straggler sampling: participant weights always sum to one and the
    // normalizer counts participants only.
    let sizes: Vec<usize> = (0..10).map(|_| rng.random_range(5..40)).collect();
    let ids: Vec<usize> = (0..10).collect();
    let mut worst = 0.0f64;
    for (round, policy) in (0..3000).map(|r| {
        (r, if r % 2 == 0 { OnlinePolicy::Fixed { m: 1 + r % 10 } } else { OnlinePolicy::Fraction { fraction: 0.35 } })
    }) {
        let online = sample_online(&ids, policy, &mut substream(4, "online", &[round as u64])).unwrap();
        let total: usize = online.iter().map(|k| sizes[*k]).sum();
        let w_sum: f64 = online.iter().map(|k| sizes[*k] as f64 / total as f64).sum();
        worst = worst.max((w_sum - 1.0).abs());
        let ups: Vec<Update> =
            online.iter().map(|&k| Update { device_id: k, params: &sets[k % 6], num_samples: sizes[k] }).collect();
        if aggregate(&ups).unwrap().1 != total {
            failures.push("normalizer differs from the participants' total");
            break;
        }
    }
    if worst > 1e-12 {
        failures.push("participant weights do not sum to one");
    }

    // And inside a real search round with stragglers.
    let s = small_setup(4, 6);
    let cfg = SearchConfig {
        rounds: 3,
        local_epochs: 1,
        batch_size: 8,
        online: OnlinePolicy::Fixed { m: 2 },
        seed: 4,
        ..Default::default()
    };
    let init = SuperNet::new(s.space.clone(), 4).unwrap();
    let mut fed = FederatedSearch::new(cfg, &s.data, &s.table, init, &s.parts, &vec![None; s.parts.len()]).unwrap();
    fed.run_until(3, |r| {
        if r.participants.len() != 2 || r.normalizer != r.sizes.iter().sum::<usize>() {
            failures.push("search round normalizer includes non-participants");
        }
        Ok(())
    })
    .unwrap();

    let detail = if failures.is_empty() {
        format!("unit cases, 50 permutations, 3000 sampled rounds (weight-sum error {worst:.1e})")
    } else {
        failures.join("; ")
    };
    verdict(4, "aggregation algebra", failures.is_empty(), &detail, start, Duration::from_secs(30));
}

// ---------------------------------------------------------------------------
// Criterion 5: sequential equivalence

struct Small {
    space: SearchSpace,
    data: Dataset,
    parts: Vec<DevicePartition>,
    table: LatencyTable,
}

fn small_setup(seed: u64, devices: usize) -> Small {
    let spec = SyntheticSpec { num_classes: 10, per_class: 8, channels: 1, size: 8, difficulty: 0.5 };
    let data = gen_synthetic(&spec, seed).unwrap();
    let parts = partition(&data, &PartitionSpec::Iid, devices, seed)
        .unwrap()
        .iter()
        .map(|p| split_train_val_test(p, 0.2, 0.2, seed, true).unwrap())
        .collect();
    let space = SearchSpace::toy(10);
    let table = LatencyTable::synthesize(&fdnas_core::HardwareProfile::cpu(), &space).unwrap();
    Small { space, data, parts, table }
}

#[test]
fn c05_sequential_equivalence() {
    let _lock = serial();
    let start = Instant::now();
    let s = small_setup(5, 1);
    let (t, e, k) = (3, 2, 3);
    let mut cases = Vec::new();
    for interleave in [Interleave::PerEpoch, Interleave::PerBatch] {
        let cfg = SearchConfig {
            rounds: t,
            local_epochs: e,
            batch_size: 8,
            lambda2: 0.05,
            interleave,
            seed: 5,
            ..Default::default()
        };
        let base = s.parts[0].clone();
        let clones: Vec<DevicePartition> = (0..k).map(|id| DevicePartition { device_id: id, ..base.clone() }).collect();
        let init = SuperNet::new(s.space.clone(), 5).unwrap();
        let mut fed =
            FederatedSearch::new(cfg.clone(), &s.data, &s.table, init.clone(), &clones, &vec![None; k]).unwrap();
        for d in &mut fed.devices {
            d.stream_id = 0;
        }
        fed.run_until(t, |_| Ok(())).unwrap();
        let mut central = init;
        proxyless_search(&mut central, &base, 0, &s.data, &s.table, &cfg, t * e).unwrap();
        cases.push((interleave, fed.server.net.params == central.params));
    }
    let held = cases.iter().all(|(_, ok)| *ok);
    let detail = format!("K={k}, T={t}, E={e}; bit-identical per interleave: {cases:?}");
    verdict(5, "sequential equivalence", held, &detail, start, minutes(5));
}

// ---------------------------------------------------------------------------
// Criterion 6: determinism and resume through the command line

const PIPELINE: &str = r#"
seed = 11
[dataset]
per_class = 20
[search]
rounds = 4
local_epochs = 2
lambda2 = 0.02
[cluster]
rounds = 2
[finetune]
rounds = 4
"#;

/// Every artifact whose bytes must not depend on reruns or threads:
/// everything except wall-time logs and the config echoes.
fn metric_files(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if name != "timing.jsonl" && !name.ends_with(".config.json") {
                files.insert(p.strip_prefix(out).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn fdnas(config: &Path, out: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_fdnas"))
        .args(&args[..1])
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .output()
        .unwrap();
    assert!(o.status.success(), "fdnas {args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(config: &Path, out: &Path, workers: &str, split_at: Option<&str>) {
    fdnas(config, out, &["gen", "--workers", workers]);
    match split_at {
        None => fdnas(config, out, &["search", "--workers", workers]),
        Some(r) => {
            fdnas(config, out, &["search", "--workers", workers, "--stop-after", r]);
            let ckpt = out.join("search").join("checkpoint.ckpt");
            fdnas(config, out, &["search", "--workers", workers, "--resume", ckpt.to_str().unwrap()]);
        }
    }
    for cmd in ["cluster-search", "derive", "finetune", "eval"] {
        fdnas(config, out, &[cmd, "--workers", workers]);
    }
}

#[test]
fn c06_determinism_and_resume() {
    let _lock = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, PIPELINE).unwrap();
    let runs = [("first", "1", None), ("rerun", "1", None), ("threads", "3", None), ("resumed", "1", Some("2"))];
    for (name, workers, split) in runs {
        pipeline(&config, &dir.path().join(name), workers, split);
    }
    let reference = metric_files(&dir.path().join("first"));
    let mut mismatched = Vec::new();
    for (name, _, _) in &runs[1..] {
        let other = metric_files(&dir.path().join(name));
        if other.keys().ne(reference.keys()) {
            mismatched.push(format!("{name}: different file set"));
        }
        for (file, bytes) in &reference {
            if other.get(file) != Some(bytes) {
                mismatched.push(format!("{name}: {file}"));
            }
        }
    }
    let held = mismatched.is_empty() && reference.contains_key("eval/metrics.json");
    let detail = if held {
        format!("{} artifacts byte-identical across rerun, 3 workers and a split-at-2 resume", reference.len())
    } else {
        format!("differences: {mismatched:?}")
    };
    verdict(6, "determinism and resume", held, &detail, start, minutes(10));
}

// ---------------------------------------------------------------------------
// Shared toy-scale setup for criteria 7 to 10

struct World {
    cfg: ExperimentConfig,
    data: Dataset,
    parts: Vec<DevicePartition>,
    tables: BTreeMap<String, LatencyTable>,
    hardware: Vec<Option<String>>,
}

/// The standard toy configuration (the runner's defaults) for `seed`,
/// optionally edited, built exactly as `fdnas gen` would.
fn world(seed: u64, edit: impl FnOnce(&mut ExperimentConfig)) -> World {
    let mut cfg = ExperimentConfig::default();
    edit(&mut cfg);
    let cfg = cfg.resolve(&Overrides { seed: Some(seed), ..Default::default() }).unwrap();
    let (data, manifest, tables) = build_world(&cfg).unwrap();
    let hardware = cfg.hardware_tags().iter().cloned().map(Some).collect();
    World { cfg, data, parts: manifest.devices, tables, hardware }
}

struct Searched {
    checkpoint: Checkpoint,
    arch: DerivedArchitecture,
}

fn search(w: &World, lambda2: f64) -> Searched {
    let cfg = SearchConfig { lambda2, ..w.cfg.search.clone() };
    let init = SuperNet::new(w.cfg.space.clone(), cfg.seed).unwrap();
    let table = &w.tables[&w.cfg.hardware.search_table];
    let mut s = FederatedSearch::new(cfg.clone(), &w.data, table, init, &w.parts, &w.hardware).unwrap();
    s.run_until(cfg.rounds, |_| Ok(())).unwrap();
    let checkpoint = s.checkpoint();
    let arch = derive_normal_net(&s.server.net, &checkpoint.id()).unwrap();
    Searched { checkpoint, arch }
}

/// Label-shard searches at `λ2 = 0`, one per seed.
fn baseline() -> &'static [(World, Searched)] {
    static CACHE: OnceLock<Vec<(World, Searched)>> = OnceLock::new();
    CACHE.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let w = world(seed, |_| {});
                let s = search(&w, 0.0);
                (w, s)
            })
            .collect()
    })
}

fn choices(arch: &DerivedArchitecture) -> String {
    arch.layers.iter().map(|l| l.candidate.replace("mbconv_", "")).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// Criterion 7: latency pressure

#[test]
fn c07_latency_pressure_monotonicity() {
    let _lock = serial();
    let start = Instant::now();
    let (mut monotone, mut smaller) = (0, 0);
    let mut rows = Vec::new();
    for (w, zero) in baseline() {
        let table = &w.tables[&w.cfg.hardware.search_table];
        let mid = search(w, LAMBDA);
        let high = search(w, 10.0 * LAMBDA);
        let lat: Vec<f64> =
            [&zero.arch, &mid.arch, &high.arch].iter().map(|a| table.derived_latency(a).unwrap()).collect();
        let flops = (derived_macs(&zero.arch).unwrap(), derived_macs(&high.arch).unwrap());
        monotone += usize::from(lat[0] >= lat[1] && lat[1] >= lat[2]);
        smaller += usize::from(flops.1 <= flops.0);
        rows.push(format!("{:.2}/{:.2}/{:.2}ms", lat[0], lat[1], lat[2]));
    }
    let held = monotone >= 8 && smaller >= 8;
    let detail = format!(
        "lambda2 in {{0, {LAMBDA}, {}}}: non-increasing latency {monotone}/10, 10x FLOPs <= zero {smaller}/10 (need 8); {}",
        10.0 * LAMBDA,
        rows.join(" ")
    );
    verdict(7, "latency-pressure monotonicity", held, &detail, start, minutes(30));
}

// ---------------------------------------------------------------------------
// Criterion 8: cluster adaptation economy

fn fresh_checkpoint(w: &World) -> Checkpoint {
    let net = SuperNet::new(w.cfg.space.clone(), w.cfg.seed).unwrap();
    Checkpoint { round: 0, space_hash: w.cfg.space.hash(), params: net.params, extra: BTreeMap::new() }
}

fn hardware_plan(w: &World) -> ClusterPlan {
    let tags: Vec<(usize, Option<String>)> =
        w.parts.iter().map(|p| p.device_id).zip(w.hardware.iter().cloned()).collect();
    ClusterPlan::from_tags(&tags, |tag| Ok((LAMBDA, w.tables[tag].clone()))).unwrap()
}

fn adapt(w: &World, start: &Checkpoint, rounds: usize) -> Vec<ClusterOutcome> {
    let inputs = ClusterInputs { space: &w.cfg.space, data: &w.data, partitions: &w.parts, hardware_tags: &w.hardware };
    run_cfdnas(start, &hardware_plan(w), rounds, &w.cfg.search, &inputs, w.cfg.cluster.reset_optimizers).unwrap()
}

/// Fine-tunes each cluster's architecture on the cluster's devices and
/// returns the unweighted mean of all devices' local accuracies.
fn clustered_local_accuracy(w: &World, outcomes: &[ClusterOutcome], rounds: usize) -> f64 {
    let mut accs = Vec::new();
    for o in outcomes {
        let parts: Vec<DevicePartition> =
            w.parts.iter().filter(|p| o.devices.contains(&p.device_id)).cloned().collect();
        let ft = FinetuneConfig { rounds, ..w.cfg.finetune.clone() };
        let (net, _) = finetune_fedavg(&o.architecture, &w.data, &parts, &ft).unwrap();
        let e = evaluate(&net, &w.data, &parts, EvalMode::MeanLocal, &w.cfg.eval).unwrap();
        accs.extend(e.per_device.iter().map(|(_, a)| *a));
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Regularized loss level of a supernet on a cluster: cross-entropy on all
/// of the cluster's training and validation data, averaged over paths drawn
/// from the architecture distribution, plus `λ2` times the expected latency.
/// Every call draws the same random stream, so two supernets are compared
/// with common random numbers. This replaces the per-round training report,
/// which averages over a handful of validation batches of still-training
/// local models and fluctuates by about 0.2 from round to round.
fn loss_level(net: &SuperNet, w: &World, devices: &[usize], table: &LatencyTable) -> f64 {
    const PATHS: usize = 48;
    let mut net = net.clone();
    let idx: Vec<usize> =
        w.parts.iter().filter(|p| devices.contains(&p.device_id)).flat_map(finetune_indices).collect();
    let (x, y) = w.data.batch(&idx);
    let probs: Vec<Vec<f64>> = (0..net.num_layers()).map(|l| net.probs(l).unwrap()).collect();
    let mut rng = substream(w.cfg.seed, "loss-level", &[]);
    let mut ce = 0.0;
    for _ in 0..PATHS {
        let choices: Vec<usize> = probs.iter().map(|p| gate_index(&sample_gate(p, &mut rng).unwrap())).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = net.forward_path(&mut tape, xv, &choices, BnMode::Train { update_stats: false }).unwrap();
        let loss = tape.cross_entropy(logits, &y).unwrap();
        ce += tape.value(loss).item();
    }
    ce / PATHS as f64 + LAMBDA * net.expected_latency(table).unwrap()
}

/// Cluster adaptation that records every cluster's loss level after the
/// rounds selected by `measure`.
fn adapt_with_levels(
    w: &World,
    start: &Checkpoint,
    rounds: usize,
    measure: impl Fn(usize) -> bool,
) -> BTreeMap<String, Vec<(usize, f64)>> {
    let plan = hardware_plan(w);
    let inputs = ClusterInputs { space: &w.cfg.space, data: &w.data, partitions: &w.parts, hardware_tags: &w.hardware };
    let mut levels: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    run_cfdnas_observed(
        start,
        &plan,
        rounds,
        &w.cfg.search,
        &inputs,
        w.cfg.cluster.reset_optimizers,
        |tag, report, net| {
            if measure(report.round) {
                let cluster = plan.clusters.iter().find(|c| c.tag == tag).unwrap();
                let level = loss_level(net, w, &cluster.devices, &cluster.table);
                levels.entry(tag.to_string()).or_default().push((report.round, level));
            }
            Ok(())
        },
    )
    .unwrap();
    levels
}

#[test]
fn c08_cluster_adaptation_economy() {
    let _lock = serial();
    let start = Instant::now();
    let budget = baseline()[0].0.cfg.search.rounds;
    let quarter = budget / 4;
    let short = budget / 5;
    let (mut fast, mut better) = (0, 0);
    let mut rows = Vec::new();
    for (w, fdnas) in baseline() {
        let scratch = fresh_checkpoint(w);
        // Part 1: an adaptation run with a quarter of the budget, and a
        // learning-rate schedule of that length, against the loss level the
        // naive run ends with.
        let naive = adapt_with_levels(w, &scratch, budget, |r| r == budget);
        let warm = adapt_with_levels(w, &fdnas.checkpoint, quarter, |_| true);
        let mut reached = Vec::new();
        for (tag, levels) in &naive {
            let target = levels[0].1;
            reached.push(warm[tag].iter().find(|(_, l)| *l <= target).map(|(r, _)| *r));
        }
        let seed_fast = reached.iter().all(|r| r.is_some_and(|r| r <= quarter));
        fast += usize::from(seed_fast);

        // Part 2: equal short budget, then fine-tune and compare accuracy.
        let naive_short = adapt(w, &scratch, short);
        let warm_short = adapt(w, &fdnas.checkpoint, short);
        let acc_naive = clustered_local_accuracy(w, &naive_short, 20);
        let acc_warm = clustered_local_accuracy(w, &warm_short, 20);
        better += usize::from(acc_warm >= acc_naive);
        let reached: Vec<String> = reached.iter().map(|r| r.map_or("-".into(), |r| r.to_string())).collect();
        rows.push(format!("[{}] {:.3}/{:.3}", reached.join(","), acc_warm, acc_naive));
    }
    let held = fast >= 8 && better >= 7;
    let detail = format!(
        "reached the naive {budget}-round loss level within {quarter} rounds {fast}/10 (need 8); at {short} rounds adapted >= naive \
         mean-local accuracy {better}/10 (need 7); per seed [rounds per cluster] adapted/naive acc: {}",
        rows.join(" ")
    );
    verdict(8, "cluster adaptation economy", held, &detail, start, minutes(45));
}

// ---------------------------------------------------------------------------
// Criterion 9: non-IID accuracy gap

fn accuracy_modes(w: &World, arch: &DerivedArchitecture, rounds: usize) -> (f64, f64) {
    let ft = FinetuneConfig { rounds, ..w.cfg.finetune.clone() };
    let (net, _) = finetune_fedavg(arch, &w.data, &w.parts, &ft).unwrap();
    let fa = evaluate(&net, &w.data, &w.parts, EvalMode::FederatedAveraged, &w.cfg.eval).unwrap();
    let ml = evaluate(&net, &w.data, &w.parts, EvalMode::MeanLocal, &w.cfg.eval).unwrap();
    (fa.accuracy, ml.accuracy)
}

#[test]
fn c09_non_iid_accuracy_gap() {
    let _lock = serial();
    let start = Instant::now();
    let rounds = 50;
    let (mut local_wins, mut iid_close) = (0, 0);
    let mut rows = Vec::new();
    for (seed, (w, s)) in baseline().iter().enumerate() {
        let (fa, ml) = accuracy_modes(w, &s.arch, rounds);
        local_wins += usize::from(ml >= fa);
        let iid = world(seed as u64, |c| c.partition.scheme = PartitionSpec::Iid);
        let iid_search = search(&iid, 0.0);
        let (ifa, iml) = accuracy_modes(&iid, &iid_search.arch, rounds);
        let gap = (iml - ifa).abs();
        iid_close += usize::from(gap < 0.05);
        rows.push(format!("{:+.3}/{:+.3}", ml - fa, iml - ifa));
    }
    let held = local_wins >= 8 && iid_close >= 8;
    let detail = format!(
        "label shards: mean-local >= fedavg {local_wins}/10 (need 8); iid |gap| < 0.05 {iid_close}/10 (need 8); \
         per seed shard/iid gap: {}",
        rows.join(" ")
    );
    verdict(9, "non-IID accuracy gap", held, &detail, start, minutes(30));
}

// ---------------------------------------------------------------------------
// Criterion 10: end-to-end smoke

#[test]
fn c10_end_to_end_smoke() {
    let _lock = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "seed = 0\n[dataset]\ndifficulty = 0.2\n[search]\nrounds = 30\n[finetune]\nrounds = 50\n")
        .unwrap();
    let out = dir.path().join("run");
    for cmd in ["gen", "search", "derive", "finetune", "eval"] {
        fdnas(&config, &out, &[cmd]);
    }
    let metrics: Metrics =
        serde_json::from_slice(&std::fs::read(out.join("eval").join("metrics.json")).unwrap()).unwrap();
    let arch = DerivedArchitecture::from_json(&std::fs::read_to_string(out.join("arch.json")).unwrap()).unwrap();
    let collapsed = baseline().iter().filter(|(_, s)| s.arch.is_degenerate()).count();
    let held = metrics.acc_fedavg >= 0.85 && !arch.is_degenerate() && collapsed == 0;
    let detail = format!(
        "fedavg accuracy {:.3} (need 0.85), architecture [{}]; degenerate architectures in the 10 baseline searches: {collapsed}",
        metrics.acc_fedavg,
        choices(&arch)
    );
    verdict(10, "end-to-end smoke", held, &detail, start, minutes(30));
}
