//! The subcommands. Each resolves the config, echoes it into the output
//! directory, does its work and returns a short JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fdnas_core::data::{gen_synthetic, load_raw_images, partition, split_train_val_test, PartitionManifest};
use fdnas_core::federation::{
    evaluate, finetune_fedavg, run_cfdnas, Checkpoint, ClusterInputs, ClusterKey, ClusterPlan, EvalMode,
    FederatedSearch, RoundReport,
};
use fdnas_core::latency::derived_macs;
use fdnas_core::supernet::derive_normal_net;
use fdnas_core::{Dataset, DerivedArchitecture, LatencyTable, NormalNet, SuperNet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{
    create_dir, dataset_path, partition_path, read_json, read_lines, table_path, write_atomic, write_config_echo,
    write_json, Artifacts, JsonLines,
};
use crate::cli::{Command, Common};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::Failure;

/// Everything `eval` measures about a fine-tuned net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub architecture: Vec<String>,
    pub arch_hash: String,
    pub acc_fedavg: f64,
    pub acc_local_mean: f64,
    /// `(device id, accuracy)` after local adaptation.
    pub local_accuracy: Vec<(usize, f64)>,
    pub params: usize,
    /// Multiply-adds of one forward pass; reported as FLOPs.
    pub macs: u64,
    pub params_m: f64,
    pub flops_m: f64,
    /// Expected latency of the net under each hardware profile's table.
    pub expected_latency_ms: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct Timing {
    round: usize,
    wall_time_s: f64,
}

/// One cluster of a cluster search as recorded in `cluster/plan.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedCluster {
    pub tag: String,
    pub devices: Vec<usize>,
    pub lambda2: f64,
    pub table: String,
}

pub fn run(command: &Command) -> anyhow::Result<Value> {
    let common = command.common();
    if common.resume.is_some() && !matches!(command, Command::Search { .. }) {
        return Err(
            Failure::new("usage", format!("--resume is only supported by `search`, not `{}`", command.name())).into()
        );
    }
    let mut cfg = ExperimentConfig::load_or_default(common.config.as_deref())?.resolve(&common.overrides())?;
    match command {
        Command::Gen { .. } => gen(&cfg),
        Command::Search { common, rounds, stop_after } => {
            if let Some(r) = rounds {
                cfg.search.rounds = *r;
            }
            search(&cfg, common, *stop_after)
        }
        Command::ClusterSearch { checkpoint, rounds, key, .. } => {
            if let Some(r) = rounds {
                cfg.cluster.rounds = *r;
            }
            if let Some(k) = key {
                cfg.cluster.key = (*k).into();
            }
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            cluster_search(cfg, &ckpt)
        }
        Command::Derive { checkpoint, output, .. } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            let output = output.clone().unwrap_or_else(|| cfg.out_dir().join("arch.json"));
            derive(&cfg, &ckpt, &output)
        }
        Command::Finetune { arch, rounds, devices, output, .. } => {
            if let Some(r) = rounds {
                cfg.finetune.rounds = *r;
            }
            let arch = arch.clone().unwrap_or_else(|| cfg.out_dir().join("arch.json"));
            let output = output.clone().unwrap_or_else(|| cfg.out_dir().join("finetune"));
            finetune(&cfg, &arch, devices.as_deref(), &output)
        }
        Command::Eval { model, devices, output, .. } => {
            let model = model.clone().unwrap_or_else(|| cfg.out_dir().join("finetune"));
            let output = output.clone().unwrap_or_else(|| cfg.out_dir().join("eval").join("metrics.json"));
            eval(&cfg, &model, devices.as_deref(), &output)
        }
        Command::Report { runs, .. } => report(&cfg, runs),
    }
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("search").join("checkpoint.ckpt")
}

/// In-memory form of what `gen` writes: dataset, partition manifest and one
/// latency table per hardware profile.
pub fn build_world(
    cfg: &ExperimentConfig,
) -> anyhow::Result<(Dataset, PartitionManifest, BTreeMap<String, LatencyTable>)> {
    let d = &cfg.dataset;
    let data = match d.source {
        DatasetSource::Synthetic => gen_synthetic(&d.synthetic_spec(), cfg.seed)?,
        DatasetSource::Raw => {
            let data =
                load_raw_images(d.images.as_deref().expect("validated"), d.labels.as_deref().expect("validated"))?;
            let [c, h, _] = data.sample_shape();
            if c != cfg.space.input_channels || h != cfg.space.image_size || data.num_classes() != cfg.space.num_classes
            {
                return Err(Failure::new("config", "raw dataset geometry does not fit the search space").into());
            }
            data
        }
    };
    let p = &cfg.partition;
    let devices = partition(&data, &p.scheme, p.num_devices, cfg.seed)?
        .iter()
        .map(|d| split_train_val_test(d, p.val_fraction, p.test_fraction, cfg.seed, true))
        .collect::<fdnas_core::Result<Vec<_>>>()?;
    let manifest = PartitionManifest {
        seed: cfg.seed,
        spec: p.scheme.clone(),
        val_fraction: p.val_fraction,
        test_fraction: p.test_fraction,
        devices,
    };
    let mut tables = BTreeMap::new();
    for profile in &cfg.hardware.profiles {
        let table = match cfg.hardware.tables.get(&profile.tag) {
            Some(path) => LatencyTable::load(path, &cfg.space)?,
            None => LatencyTable::synthesize(profile, &cfg.space)?,
        };
        tables.insert(profile.tag.clone(), table);
    }
    Ok((data, manifest, tables))
}

fn gen(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let out = cfg.out_dir();
    create_dir(out)?;
    write_config_echo(cfg, "gen")?;
    let (data, manifest, tables) = build_world(cfg)?;
    create_dir(&out.join("data"))?;
    data.save_cache(&dataset_path(out))?;
    manifest.save(&partition_path(out))?;
    create_dir(&out.join("latency"))?;
    for (tag, table) in &tables {
        let path = table_path(out, tag);
        table.save(&path)?;
        LatencyTable::load(&path, &cfg.space).context("generated latency table does not load back")?;
    }
    Ok(json!({
        "command": "gen",
        "samples": data.len(),
        "devices": manifest.devices.len(),
        "tables": cfg.hardware.tags(),
    }))
}

fn hardware_tags(cfg: &ExperimentConfig, art: &Artifacts) -> Vec<Option<String>> {
    let tags = cfg.hardware_tags();
    art.manifest.devices.iter().map(|p| tags.get(p.device_id).cloned()).collect()
}

fn timing(r: &RoundReport) -> Timing {
    Timing { round: r.round, wall_time_s: r.wall_time_s }
}

fn search(cfg: &ExperimentConfig, common: &Common, stop_after: Option<usize>) -> anyhow::Result<Value> {
    let art = Artifacts::load(cfg)?;
    write_config_echo(cfg, "search")?;
    let table = art.table(&cfg.hardware.search_table)?;
    let init = SuperNet::new(cfg.space.clone(), cfg.search.seed)?;
    let tags = hardware_tags(cfg, &art);
    let mut search = FederatedSearch::new(cfg.search.clone(), &art.data, table, init, &art.manifest.devices, &tags)?;

    let dir = cfg.out_dir().join("search");
    let (rounds_path, timing_path, ckpt_path) =
        (dir.join("rounds.jsonl"), dir.join("timing.jsonl"), dir.join("checkpoint.ckpt"));
    let (mut kept_rounds, mut kept_timing) = (Vec::new(), Vec::new());
    if let Some(path) = &common.resume {
        let ckpt = Checkpoint::load(path)?;
        search.restore(&ckpt)?;
        // Earlier lines describe rounds the checkpoint already contains.
        kept_rounds = read_lines(&rounds_path)?;
        kept_timing = read_lines(&timing_path)?;
        if kept_rounds.len() < ckpt.round {
            log::warn!("{} holds {} of the {} completed rounds", rounds_path.display(), kept_rounds.len(), ckpt.round);
        }
        kept_rounds.truncate(ckpt.round);
        kept_timing.truncate(ckpt.round);
    }
    let mut rounds_out = JsonLines::create(&rounds_path, &kept_rounds)?;
    let mut timing_out = JsonLines::create(&timing_path, &kept_timing)?;
    write_atomic(&ckpt_path, &search.checkpoint().to_bytes())?;

    let stop = stop_after.unwrap_or(cfg.search.rounds).min(cfg.search.rounds);
    while search.server.round < stop {
        let r = search.run_round()?;
        log::info!(
            "round {}: val loss {:.4}, expected latency {:.3} ms",
            r.round,
            r.weighted_val_loss(),
            r.expected_latency_ms
        );
        rounds_out.push(&r.without_timing())?;
        timing_out.push(&timing(&r))?;
        write_atomic(&ckpt_path, &search.checkpoint().to_bytes())?;
    }
    Ok(json!({
        "command": "search",
        "rounds_completed": search.server.round,
        "checkpoint": ckpt_path,
    }))
}

fn load_supernet(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<(Checkpoint, SuperNet)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_space(&cfg.space.hash())?;
    let mut net = SuperNet::new(cfg.space.clone(), cfg.seed)?;
    net.params.copy_from(&ckpt.params)?;
    Ok((ckpt, net))
}

fn cluster_search(mut cfg: ExperimentConfig, ckpt_path: &Path) -> anyhow::Result<Value> {
    let art = Artifacts::load(&cfg)?;
    let (start, _) = load_supernet(&cfg, ckpt_path)?;
    let hw = hardware_tags(&cfg, &art);
    let tags: Vec<(usize, Option<String>)> = match cfg.cluster.key {
        ClusterKey::Data => art.manifest.devices.iter().map(|p| (p.device_id, p.tag.clone())).collect(),
        ClusterKey::Hardware => art.manifest.devices.iter().zip(&hw).map(|(p, t)| (p.device_id, t.clone())).collect(),
    };
    let groups = fdnas_core::federation::cluster_by_tag(&tags)?;
    cfg.materialize_clusters(groups.keys());
    write_config_echo(&cfg, "cluster-search")?;

    let plan = ClusterPlan::from_tags(&tags, |tag| {
        Ok((cfg.cluster_lambda2(tag), art.tables[&cfg.cluster_table(tag)].clone()))
    })?;
    let inputs =
        ClusterInputs { space: &cfg.space, data: &art.data, partitions: &art.manifest.devices, hardware_tags: &hw };
    let outcomes = run_cfdnas(&start, &plan, cfg.cluster.rounds, &cfg.search, &inputs, cfg.cluster.reset_optimizers)?;

    let root = cfg.out_dir().join("cluster");
    let mut planned = Vec::new();
    for o in &outcomes {
        let dir = root.join(&o.tag);
        create_dir(&dir)?;
        write_atomic(&dir.join("checkpoint.ckpt"), &o.checkpoint.to_bytes())?;
        let mut rounds = JsonLines::create(&dir.join("rounds.jsonl"), &[])?;
        let mut times = JsonLines::create(&dir.join("timing.jsonl"), &[])?;
        for r in &o.history {
            rounds.push(&r.without_timing())?;
            times.push(&timing(r))?;
        }
        write_atomic(&dir.join("arch.json"), o.architecture.to_json()?.as_bytes())?;
        planned.push(PlannedCluster {
            tag: o.tag.clone(),
            devices: o.devices.clone(),
            lambda2: cfg.cluster_lambda2(&o.tag),
            table: cfg.cluster_table(&o.tag),
        });
    }
    write_json(&root.join("plan.json"), &planned)?;
    Ok(json!({ "command": "cluster-search", "clusters": planned }))
}

fn derive(cfg: &ExperimentConfig, ckpt_path: &Path, output: &Path) -> anyhow::Result<Value> {
    create_dir(cfg.out_dir())?;
    write_config_echo(cfg, "derive")?;
    let (ckpt, net) = load_supernet(cfg, ckpt_path)?;
    let arch = derive_normal_net(&net, &ckpt.id())?;
    write_atomic(output, arch.to_json()?.as_bytes())?;
    Ok(json!({
        "command": "derive",
        "architecture": arch.layers.iter().map(|l| l.candidate.clone()).collect::<Vec<_>>(),
        "flags": arch.flags,
        "output": output,
    }))
}

fn load_arch(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<DerivedArchitecture> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let arch = DerivedArchitecture::from_json(&text)?;
    arch.check_space(&cfg.space)?;
    Ok(arch)
}

fn finetune(
    cfg: &ExperimentConfig,
    arch_path: &Path,
    devices: Option<&[usize]>,
    output: &Path,
) -> anyhow::Result<Value> {
    let art = Artifacts::load(cfg)?;
    write_config_echo(cfg, "finetune")?;
    let arch = load_arch(cfg, arch_path)?;
    let parts = art.devices(devices)?;
    let (net, reports) = finetune_fedavg(&arch, &art.data, &parts, &cfg.finetune)?;
    create_dir(output)?;
    let ckpt = Checkpoint { round: reports.len(), space_hash: arch.hash(), params: net.params, extra: BTreeMap::new() };
    write_atomic(&output.join("model.ckpt"), &ckpt.to_bytes())?;
    write_atomic(&output.join("arch.json"), arch.to_json()?.as_bytes())?;
    let mut lines = JsonLines::create(&output.join("rounds.jsonl"), &[])?;
    for r in &reports {
        lines.push(r)?;
    }
    Ok(json!({
        "command": "finetune",
        "rounds": reports.len(),
        "final_train_loss": reports.last().map(|r| r.train_loss),
        "model": output.join("model.ckpt"),
    }))
}

/// Loads the net written by `finetune` into `dir`.
pub fn load_model(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<NormalNet> {
    let arch = load_arch(cfg, &dir.join("arch.json"))?;
    let ckpt = Checkpoint::load(&dir.join("model.ckpt"))?;
    ckpt.check_space(&arch.hash())?;
    let mut net = NormalNet::new(&arch, 0)?;
    net.params.copy_from(&ckpt.params)?;
    Ok(net)
}

fn eval(cfg: &ExperimentConfig, model: &Path, devices: Option<&[usize]>, output: &Path) -> anyhow::Result<Value> {
    let art = Artifacts::load(cfg)?;
    write_config_echo(cfg, "eval")?;
    let net = load_model(cfg, model)?;
    let parts = art.devices(devices)?;
    let fa = evaluate(&net, &art.data, &parts, EvalMode::FederatedAveraged, &cfg.eval)?;
    let ml = evaluate(&net, &art.data, &parts, EvalMode::MeanLocal, &cfg.eval)?;
    let macs = derived_macs(&net.arch)?;
    let params = net.num_params();
    let expected_latency_ms = art
        .tables
        .iter()
        .map(|(tag, t)| Ok((tag.clone(), t.derived_latency(&net.arch)?)))
        .collect::<fdnas_core::Result<BTreeMap<_, _>>>()?;
    let metrics = Metrics {
        seed: cfg.seed,
        architecture: net.arch.layers.iter().map(|l| l.candidate.clone()).collect(),
        arch_hash: net.arch.hash(),
        acc_fedavg: fa.accuracy,
        acc_local_mean: ml.accuracy,
        local_accuracy: ml.per_device,
        params,
        macs,
        params_m: params as f64 / 1e6,
        flops_m: macs as f64 / 1e6,
        expected_latency_ms,
    };
    write_json(output, &metrics)?;
    Ok(json!({
        "command": "eval",
        "acc_fedavg": metrics.acc_fedavg,
        "acc_local_mean": metrics.acc_local_mean,
        "output": output,
    }))
}

fn report(cfg: &ExperimentConfig, runs: &[PathBuf]) -> anyhow::Result<Value> {
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let metrics: Metrics = read_json(&run.join("eval").join("metrics.json"))?;
        let mut wall = 0.0;
        for line in read_lines(&run.join("search").join("timing.jsonl"))? {
            wall += serde_json::from_str::<Timing>(&line)?.wall_time_s;
        }
        let id = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((id, metrics, wall));
    }
    let profiles: std::collections::BTreeSet<String> =
        rows.iter().flat_map(|(_, m, _)| m.expected_latency_ms.keys().cloned()).collect();

    create_dir(cfg.out_dir())?;
    write_config_echo(cfg, "report")?;
    let path = cfg.out_dir().join("report.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = ["run_id", "seed", "acc_fedavg", "acc_local_mean", "params_M", "flops_M"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(profiles.iter().map(|p| format!("exp_latency_ms_{p}")));
    header.push("search_wall_s".into());
    w.write_record(&header)?;
    for (id, m, wall) in &rows {
        let mut rec = vec![
            id.clone(),
            m.seed.to_string(),
            m.acc_fedavg.to_string(),
            m.acc_local_mean.to_string(),
            m.params_m.to_string(),
            m.flops_m.to_string(),
        ];
        rec.extend(profiles.iter().map(|p| m.expected_latency_ms.get(p).map_or(String::new(), |v| v.to_string())));
        rec.push(wall.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(json!({ "command": "report", "rows": rows.len(), "output": path }))
}
