use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdnas_cli::commands::Metrics;
use fdnas_cli::config::{ExperimentConfig, Overrides};
use fdnas_core::data::PartitionManifest;
use fdnas_core::federation::Checkpoint;
use fdnas_core::{LatencyTable, SuperNet};
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[dataset]
per_class = 12
[search]
rounds = 3
local_epochs = 1
batch_size = 8
[finetune]
rounds = 2
local_epochs = 1
[cluster]
rounds = 1
"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        fs::write(&path, config).unwrap();
        Env { dir, config: path }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fdnas"));
        cmd.args(&args[..1]).arg("--config").arg(&self.config).arg("--out").arg(self.out(out)).args(&args[1..]);
        cmd.output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> serde_json::Value {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice(&o.stdout).expect("summary JSON on stdout")
    }

    fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig::load(&self.config).unwrap().resolve(&Overrides::default()).unwrap()
    }
}

/// The machine-readable error of a failed invocation.
fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).expect("error JSON on stderr");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_is_repeatable_and_complete() {
    let env = Env::new(SMALL);
    env.ok("a", &["gen"]);
    let first = snapshot(&env.out("a"));
    env.ok("a", &["gen"]);
    assert_eq!(first, snapshot(&env.out("a")));

    let cfg = env.resolved();
    let manifest = PartitionManifest::load(&env.out("a").join("data/partition.json")).unwrap();
    assert_eq!(manifest.devices.len(), cfg.partition.num_devices);
    for tag in ["gpu", "cpu", "phone"] {
        LatencyTable::load(&env.out("a").join(format!("latency/{tag}.csv")), &cfg.space).unwrap();
    }
    // The echo has every default filled in.
    let echo: ExperimentConfig =
        serde_json::from_slice(&fs::read(env.out("a").join("gen.config.json")).unwrap()).unwrap();
    assert_eq!(echo.partition.hardware_tags.as_ref().map(Vec::len), Some(10));
    assert_eq!(echo.out_dir.as_deref(), Some(env.out("a").as_path()));
}

#[test]
fn zero_rounds_leave_the_initial_supernet() {
    let env = Env::new(SMALL);
    env.ok("a", &["gen"]);
    env.ok("a", &["search", "--rounds", "0"]);
    let cfg = env.resolved();
    let ckpt = Checkpoint::load(&env.out("a").join("search/checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt.round, 0);
    assert_eq!(ckpt.params, SuperNet::new(cfg.space.clone(), cfg.seed).unwrap().params);
    assert_eq!(fs::read_to_string(env.out("a").join("search/rounds.jsonl")).unwrap(), "");
}

#[test]
fn split_search_matches_uninterrupted_search() {
    let env = Env::new(SMALL);
    for out in ["whole", "split"] {
        env.ok(out, &["gen"]);
    }
    env.ok("whole", &["search"]);
    let v = env.ok("split", &["search", "--stop-after", "1"]);
    assert_eq!(v["rounds_completed"], 1);
    let ckpt = env.out("split").join("search/checkpoint.ckpt");
    env.ok("split", &["search", "--resume", ckpt.to_str().unwrap()]);
    for file in ["search/rounds.jsonl", "search/checkpoint.ckpt"] {
        assert_eq!(
            fs::read(env.out("whole").join(file)).unwrap(),
            fs::read(env.out("split").join(file)).unwrap(),
            "{file}"
        );
    }
    let lines = fs::read_to_string(env.out("whole").join("search/rounds.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert_eq!(fs::read_to_string(env.out("whole").join("search/timing.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn derivation_is_repeatable_and_cluster_search_without_rounds_matches_it() {
    let env = Env::new(SMALL);
    env.ok("a", &["gen"]);
    env.ok("a", &["search", "--rounds", "2"]);
    let arch = env.out("a").join("arch.json");
    env.ok("a", &["derive"]);
    let first = fs::read(&arch).unwrap();
    env.ok("a", &["derive"]);
    assert_eq!(first, fs::read(&arch).unwrap());

    let v = env.ok("a", &["cluster-search", "--rounds", "0"]);
    assert_eq!(v["clusters"].as_array().unwrap().len(), 3);
    for tag in ["gpu", "cpu", "phone"] {
        assert_eq!(fs::read(env.out("a").join(format!("cluster/{tag}/arch.json"))).unwrap(), first, "{tag}");
    }
    let v = env.ok("a", &["cluster-search", "--rounds", "0", "--key", "data"]);
    let tags: Vec<&str> = v["clusters"].as_array().unwrap().iter().map(|c| c["tag"].as_str().unwrap()).collect();
    assert_eq!(tags, ["0", "1", "2"]);
}

#[test]
fn bad_inputs_fail_with_json_errors() {
    let env = Env::new(SMALL);
    assert_eq!(error_kind(&env.run("a", &["search"])), "missing_artifact");
    env.ok("a", &["gen"]);
    env.ok("a", &["search", "--rounds", "1"]);
    assert_eq!(error_kind(&env.run("a", &["cluster-search", "--key", "colour"])), "usage");
    assert_eq!(error_kind(&env.run("a", &["gen", "--resume", "x.ckpt"])), "usage");

    // A different search space must not accept these artifacts.
    let other = Env::new(&format!("{SMALL}\n[space]\nstem_channels = 6\n"));
    let out = env.out("a");
    let run_other = |args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fdnas"));
        cmd.args(&args[..1]).arg("--config").arg(&other.config).arg("--out").arg(&out).args(&args[1..]);
        cmd.output().unwrap()
    };
    env.ok("a", &["derive"]);
    let ckpt = out.join("search/checkpoint.ckpt");
    assert_eq!(error_kind(&run_other(&["derive"])), "space_mismatch");
    assert_eq!(error_kind(&run_other(&["finetune"])), "space_mismatch");
    assert_eq!(error_kind(&run_other(&["search", "--resume", ckpt.to_str().unwrap()])), "space_mismatch");

    let bad_config = env.out("bad.toml");
    fs::write(&bad_config, "[search]\nrounds = \"many\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fdnas")).args(["gen", "--config"]).arg(&bad_config).output().unwrap();
    assert_eq!(error_kind(&o), "config");
}

#[test]
fn pipeline_metrics_and_report() {
    let env = Env::new(SMALL);
    for (out, seed) in [("run1", "1"), ("run2", "2")] {
        for cmd in ["gen", "search", "derive", "finetune", "eval"] {
            env.ok(out, &[cmd, "--seed", seed]);
        }
    }
    let metrics: Metrics =
        serde_json::from_slice(&fs::read(env.out("run1").join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.seed, 1);
    assert_eq!(metrics.local_accuracy.len(), 10);
    assert_eq!(metrics.expected_latency_ms.keys().collect::<Vec<_>>(), ["cpu", "gpu", "phone"]);
    assert!(metrics.params > 0 && metrics.macs > 0);

    let r1 = env.out("run1");
    let r2 = env.out("run2");
    env.ok("summary", &["report", r1.to_str().unwrap(), r2.to_str().unwrap()]);
    let mut reader = csv::Reader::from_path(env.out("summary").join("report.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header[..6], ["run_id", "seed", "acc_fedavg", "acc_local_mean", "params_M", "flops_M"]);
    assert_eq!(header.last().unwrap(), "search_wall_s");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((&rows[0][0], &rows[0][1]), ("run1", "1"));
    assert_eq!((&rows[1][0], &rows[1][1]), ("run2", "2"));
}

#[test]
fn constant_model_scores_the_majority_share() {
    let env = Env::new(SMALL);
    env.ok("a", &["gen"]);
    env.ok("a", &["search", "--rounds", "1"]);
    env.ok("a", &["derive"]);
    env.ok("a", &["finetune", "--rounds", "1"]);
    // Zero the classifier so every logit is equal and class 0 always wins.
    let model = env.out("a").join("finetune/model.ckpt");
    let mut ckpt = Checkpoint::load(&model).unwrap();
    for p in ckpt.params.iter_mut().filter(|p| p.id.starts_with("head.")) {
        p.tensor.data_mut().fill(0.0);
    }
    ckpt.save(&model).unwrap();
    let v = env.ok("a", &["eval"]);
    let manifest = PartitionManifest::load(&env.out("a").join("data/partition.json")).unwrap();
    let data = fdnas_core::Dataset::load_cache(&env.out("a").join("data/dataset.bin")).unwrap();
    let test: Vec<usize> = manifest.devices.iter().flat_map(|d| d.test.clone()).collect();
    let zeros = test.iter().filter(|&&i| data.labels()[i] == 0).count();
    assert_eq!(v["acc_fedavg"].as_f64().unwrap(), zeros as f64 / test.len() as f64);
}
