use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use mctnet::checkpoint::Checkpoint;
use mctnet::cli::{cmd_eval, cmd_gen, cmd_predict, cmd_train, run, Cli, EvalReport, TRAIN_LOG};
use mctnet::config::{RunConfig, RESOLVED_NAME};
use mctnet::data::dataset::load_split;
use mctnet::data::raster::{image_raster, read_raster, Raster};
use mctnet::data::synth::Split;
use mctnet::data::SizeClass;
use mctnet::metrics::{metrics, ConfusionCounts, RegionRecall};
use mctnet::training::Evaluation;
use mctnet::Error;

const TINY: &str = r#"
seed = 1

[network]
stage_channels = [4, 8, 8, 16]
heads = [2, 2, 4]
mlp_ratio = 2
fuse_min_hidden = 4

[optim]
total_epochs = 3
batch_size = 4

[synth]
image_size = 32
changes = [1, 3]
size_mix = [2.0, 1.0, 0.0]

[synth.splits]
train = 4
val = 2
test = 3

[paths]
dataset = "data"
checkpoint = "run/best.ckpt"
log_dir = "run"
"#;

fn setup() -> (tempfile::TempDir, PathBuf, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, TINY).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    (dir, path, cfg)
}

#[test]
fn relative_paths_anchor_at_the_config() {
    let (dir, _, cfg) = setup();
    assert_eq!(cfg.paths.dataset, dir.path().join("data"));
    assert_eq!(cfg.paths.checkpoint, dir.path().join("run/best.ckpt"));
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let (dir, _, cfg) = setup();
    cmd_gen(&cfg).unwrap();
    let ck = dir.path().join("oracle.ckpt");
    Checkpoint::oracle(cfg.digest()).save(&ck).unwrap();
    for split in Split::ALL {
        let e = cmd_eval(&cfg, &ck, split).unwrap().evaluation;
        assert_eq!((e.metrics.f1, e.metrics.precision, e.metrics.recall, e.metrics.oa), (1.0, 1.0, 1.0, 1.0));
        assert!(e.by_size.values().all(|r| r.recall() == 1.0));
    }
}

#[test]
fn machine_report_golden() {
    let mut by_size = BTreeMap::new();
    by_size.insert(SizeClass::Small, RegionRecall { regions: 4, detected: 1 });
    by_size.insert(SizeClass::Large, RegionRecall { regions: 2, detected: 2 });
    let counts = ConfusionCounts { tp: 9, fp: 1, fn_: 9, tn: 81 };
    let report = EvalReport {
        split: Split::Test,
        samples: 3,
        evaluation: Evaluation {
            counts,
            metrics: metrics(&counts),
            by_size,
        },
    };
    let golden = "report_version=1\n\
                  split=test\n\
                  samples=3\n\
                  tp=9 fp=1 fn=9 tn=81\n\
                  precision=0.9 recall=0.5 f1=0.6428571428571429 oa=0.9\n\
                  region class=small regions=4 detected=1 recall=0.25\n\
                  region class=large regions=2 detected=2 recall=1\n";
    assert_eq!(report.machine(), golden);
    let table = report.table();
    assert!(table.contains("  f1          0.6429"));
    assert!(table.contains("  small          4         1  0.2500"));
}

#[test]
fn training_then_eval_reproduces_the_best_f1() {
    let (_dir, _, cfg) = setup();
    cmd_gen(&cfg).unwrap();
    let report = cmd_train(&cfg, None).unwrap();
    let e = cmd_eval(&cfg, &cfg.paths.checkpoint, Split::Val).unwrap();
    assert_eq!(e.evaluation.metrics.f1, report.best_f1);

    let log = std::fs::read_to_string(cfg.paths.log_dir.join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), cfg.optim.total_epochs + 1);
    assert!(lines[0].starts_with("epoch=0 lr=0.001 train_loss="));
    assert_eq!(lines.last().unwrap(), &format!("best_epoch={} best_val_f1={}", report.best_epoch, report.best_f1));
    let logged: f64 = lines[report.best_epoch]
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("val_f1="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(logged, report.best_f1);

    let resolved = RunConfig::parse(&std::fs::read_to_string(cfg.paths.log_dir.join(RESOLVED_NAME)).unwrap()).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn checkpoint_for_another_network_is_refused() {
    let (dir, _, cfg) = setup();
    cmd_gen(&cfg).unwrap();
    let ck = dir.path().join("oracle.ckpt");
    Checkpoint::oracle(cfg.digest()).save(&ck).unwrap();
    let mut other = cfg.clone();
    other.network.mlp_ratio = 4;
    assert!(matches!(cmd_eval(&other, &ck, Split::Test), Err(Error::Checkpoint(_))));
}

fn write_pair(dir: &Path, cfg: &RunConfig) -> (PathBuf, PathBuf, PathBuf, Vec<u8>) {
    let s = load_split(&cfg.paths.dataset, Split::Test).unwrap().remove(0);
    let (t1, t2, truth) = (dir.join("a.ppm"), dir.join("b.ppm"), dir.join("truth.pgm"));
    image_raster(&s.image_t1, s.width, s.height).write(&t1).unwrap();
    image_raster(&s.image_t2, s.width, s.height).write(&t2).unwrap();
    Raster::gray(s.width, s.height, s.mask.iter().map(|&m| m as u16 * 255).collect(), 255).write(&truth).unwrap();
    (t1, t2, truth, s.mask)
}

#[test]
fn predict_writes_change_maps() {
    let (dir, _, cfg) = setup();
    cmd_gen(&cfg).unwrap();
    let (t1, t2, truth, mask) = write_pair(dir.path(), &cfg);
    let ck = dir.path().join("oracle.ckpt");
    Checkpoint::oracle(cfg.digest()).save(&ck).unwrap();
    let out = dir.path().join("pred");
    let written = cmd_predict(&cfg, &ck, &t1, &t2, Some(&truth), &out).unwrap();
    assert_eq!(written.len(), 2);
    let gray = read_raster(&written[0]).unwrap();
    assert_eq!(gray.samples, mask.iter().map(|&m| m as u16 * 255).collect::<Vec<_>>());
    let colour = read_raster(&written[1]).unwrap();
    assert!(colour.samples.chunks(3).all(|p| p == [255, 255, 255] || p == [0, 0, 0]));
    assert!(cmd_predict(&cfg, &ck, &t1, &t2, None, &out).is_err());

    let (_, store) = mctnet::network::Mctnet::build(cfg.network.clone(), cfg.seed).unwrap();
    let weights = dir.path().join("init.ckpt");
    Checkpoint::from_store(&store, cfg.digest()).save(&weights).unwrap();
    let written = cmd_predict(&cfg, &weights, &t1, &t2, None, &out).unwrap();
    let gray = read_raster(&written[0]).unwrap();
    assert_eq!((gray.width, gray.height, gray.channels), (32, 32, 1));
}

#[test]
fn commands_parse_and_run_in_process() {
    let (dir, path, cfg) = setup();
    let config = path.to_str().unwrap();
    let mut out = Vec::new();
    assert!(run(Cli::parse_from(["mctnet", "gen", "--config", config]), &mut out).unwrap());
    assert!(String::from_utf8_lossy(&out).starts_with("wrote 9 samples"));
    let ck = dir.path().join("oracle.ckpt");
    Checkpoint::oracle(cfg.digest()).save(&ck).unwrap();
    let mut out = Vec::new();
    let args = ["mctnet", "eval", "--config", config, "--split", "val", "--checkpoint", ck.to_str().unwrap()];
    assert!(run(Cli::parse_from(args), &mut out).unwrap());
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("split=val\nsamples=2\n"));
    assert!(text.contains(" f1=1 "));
    assert!(Cli::try_parse_from(["mctnet", "train"]).is_err());
    assert!(Cli::try_parse_from(["mctnet", "frobnicate", "--config", config]).is_err());
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_mctnet")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn verify_exit_codes() {
    let (dir, path, _) = setup();
    let config = path.to_str().unwrap();
    let (code, text) = binary(&["verify", "--config", config, "--cases", "5", "--coords", "5"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.lines().last().unwrap().ends_with(" 0 failed"));

    let (code, text) = binary(&["verify", "--config", config, "--cases", "5", "--coords", "5", "--inject-fault", "conv-backward-sign-flip"]);
    assert_eq!(code, 1, "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("conv")), "{text}");

    let missing = dir.path().join("missing.toml");
    let (code, _) = binary(&["verify", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn commands_are_idempotent() {
    let (_dir, _, cfg) = setup();
    cmd_gen(&cfg).unwrap();
    let data = snapshot(&cfg.paths.dataset);
    assert!(!data.is_empty());
    cmd_gen(&cfg).unwrap();
    assert_eq!(snapshot(&cfg.paths.dataset), data);

    cmd_train(&cfg, None).unwrap();
    let run = snapshot(&cfg.paths.log_dir);
    cmd_train(&cfg, None).unwrap();
    assert_eq!(snapshot(&cfg.paths.log_dir), run);
}
