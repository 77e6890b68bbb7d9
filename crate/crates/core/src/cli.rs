//! The `gen | train | eval | predict | verify` commands.
//!
//! Each command is a plain function over a [`RunConfig`] so it can be driven
//! from tests and examples as well as from the binary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::data::dataset::{load_split, read_image, write_dataset, Entry};
use crate::data::raster::{read_raster, write_change_map};
use crate::data::synth::{generate, Split};
use crate::data::{ChangeSample, SizeClass};
use crate::network::Mctnet;
use crate::tensor::fault::{self, Fault};
use crate::training::{predict_masks, score, train, Evaluation, TrainOptions, TrainReport};
use crate::verify::{run_suite, Check, VerifyOptions};
use crate::{io_error, Error, Result};

pub const TRAIN_LOG: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "mctnet", version, about = "Bi-temporal change detection: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides optim.total_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset described by [synth].
    Gen(Common),
    /// Train and keep the checkpoint with the best validation F1.
    Train(Common),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to paths.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write change maps for one image pair.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// Ground-truth mask; enables the colour-coded error map.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the oracle and gradient-check suite.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.optim.total_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command, writing human-readable output to `out`. Returns
/// `false` when the command ran but its checks failed.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    let w = |out: &mut dyn Write, text: &str| out.write_all(text.as_bytes()).map_err(io_error("<stdout>"));
    match cli.command {
        Command::Gen(common) => {
            let cfg = common.load()?;
            let entries = cmd_gen(&cfg)?;
            w(out, &format!("wrote {} samples to {}\n", entries.len(), cfg.paths.dataset.display()))?;
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let report = cmd_train(&cfg, Some(out))?;
            w(
                out,
                &format!(
                    "best_epoch={} best_val_f1={}\ncheckpoint {}\n",
                    report.best_epoch,
                    report.best_f1,
                    cfg.paths.checkpoint.display()
                ),
            )?;
        }
        Command::Eval { common, split, checkpoint } => {
            let cfg = common.load()?;
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let report = cmd_eval(&cfg, &ck, Split::parse(&split)?)?;
            w(out, &report.table())?;
            w(out, "\n")?;
            w(out, &report.machine())?;
        }
        Command::Predict {
            common,
            t1,
            t2,
            truth,
            out: dir,
            checkpoint,
        } => {
            let cfg = common.load()?;
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            for p in cmd_predict(&cfg, &ck, &t1, &t2, truth.as_deref(), &dir)? {
                w(out, &format!("wrote {}\n", p.display()))?;
            }
        }
        Command::Verify {
            common,
            cases,
            coords,
            inject_fault,
        } => {
            let cfg = common.load()?;
            let opts = VerifyOptions {
                seed: cfg.seed,
                cases,
                coords_per_family: coords,
                ..VerifyOptions::default()
            };
            let checks = cmd_verify(&cfg, &opts, inject_fault)?;
            for c in &checks {
                w(out, &format!("{}\n", c.line()))?;
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            w(out, &format!("{} checks, {failed} failed\n", checks.len()))?;
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<Entry>> {
    let samples = generate(&cfg.synth, cfg.seed)?;
    let entries = write_dataset(&cfg.paths.dataset, &samples, &cfg.synth.splits)?;
    cfg.write_resolved(&cfg.paths.dataset)?;
    Ok(entries)
}

struct Tee<'a> {
    file: fs::File,
    echo: Option<&'a mut dyn Write>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        if let Some(e) = self.echo.as_mut() {
            e.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

/// Trains on the dataset's train split, validates on its val split, and
/// writes the best checkpoint, the epoch log and the resolved config.
pub fn cmd_train(cfg: &RunConfig, echo: Option<&mut dyn Write>) -> Result<TrainReport> {
    let train_set = load_split(&cfg.paths.dataset, Split::Train)?;
    let val_set = load_split(&cfg.paths.dataset, Split::Val)?;
    let (net, mut store) = Mctnet::build(cfg.network.clone(), cfg.seed)?;
    fs::create_dir_all(&cfg.paths.log_dir).map_err(io_error(&cfg.paths.log_dir))?;
    cfg.write_resolved(&cfg.paths.log_dir)?;
    let log_path = cfg.paths.log_dir.join(TRAIN_LOG);
    let mut log = Tee {
        file: fs::File::create(&log_path).map_err(io_error(&log_path))?,
        echo,
    };
    let report = train(
        &net,
        &mut store,
        &train_set,
        &val_set,
        &cfg.optim_config(),
        TrainOptions {
            target_f1: cfg.train.target_f1,
            log: Some(&mut log),
        },
    )?;
    writeln!(log.file, "best_epoch={} best_val_f1={}", report.best_epoch, report.best_f1).map_err(io_error(&log_path))?;
    if let Some(parent) = cfg.paths.checkpoint.parent() {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    Checkpoint::from_store(&report.best, cfg.digest()).save(&cfg.paths.checkpoint)?;
    Ok(report)
}

/// A checkpoint after its digest has been checked against the config.
pub enum Predictor {
    Network(Mctnet, crate::tensor::ParamStore),
    Oracle,
}

impl Predictor {
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.check_digest(&cfg.digest())?;
        Ok(match ck.kind {
            CheckpointKind::Oracle => Predictor::Oracle,
            CheckpointKind::Weights => {
                let (net, mut store) = Mctnet::build(cfg.network.clone(), cfg.seed)?;
                ck.restore(&mut store)?;
                Predictor::Network(net, store)
            }
        })
    }

    pub fn predict(&self, samples: &[ChangeSample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
        match self {
            Predictor::Network(net, store) => predict_masks(net, store, samples, batch_size),
            Predictor::Oracle => Ok(samples.iter().map(|s| s.mask.clone()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub evaluation: Evaluation,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let e = &self.evaluation;
        let m = &e.metrics;
        let mut s = format!(
            "split {} ({} samples, {} pixels)\n\n  metric      value\n",
            self.split.name(),
            self.samples,
            e.counts.total()
        );
        for (k, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1), ("oa", m.oa)] {
            writeln!(s, "  {k:<10}  {v:.4}").unwrap();
        }
        s.push_str("\n  size     regions  detected  recall\n");
        for c in SizeClass::ALL {
            if let Some(r) = e.by_size.get(&c) {
                writeln!(s, "  {:<7}  {:>7}  {:>8}  {:.4}", c.name(), r.regions, r.detected, r.recall()).unwrap();
            }
        }
        s
    }

    /// `key=value` lines; floats use the shortest round-tripping form.
    pub fn machine(&self) -> String {
        let e = &self.evaluation;
        let (c, m) = (&e.counts, &e.metrics);
        let mut s = String::new();
        writeln!(s, "report_version=1").unwrap();
        writeln!(s, "split={}", self.split.name()).unwrap();
        writeln!(s, "samples={}", self.samples).unwrap();
        writeln!(s, "tp={} fp={} fn={} tn={}", c.tp, c.fp, c.fn_, c.tn).unwrap();
        writeln!(s, "precision={} recall={} f1={} oa={}", m.precision, m.recall, m.f1, m.oa).unwrap();
        for class in SizeClass::ALL {
            if let Some(r) = e.by_size.get(&class) {
                writeln!(
                    s,
                    "region class={} regions={} detected={} recall={}",
                    class.name(),
                    r.regions,
                    r.detected,
                    r.recall()
                )
                .unwrap();
            }
        }
        s
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let predictor = Predictor::load(cfg, checkpoint)?;
    let samples = load_split(&cfg.paths.dataset, split)?;
    let preds = predictor.predict(&samples, cfg.optim.batch_size)?;
    Ok(EvalReport {
        split,
        samples: samples.len(),
        evaluation: score(&preds, &samples)?,
    })
}

/// Writes `change.pgm` and, given ground truth, the colour-coded
/// `change_color.ppm` into `out_dir`.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    t1: &Path,
    t2: &Path,
    truth: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let predictor = Predictor::load(cfg, checkpoint)?;
    let (h, w, image_t1) = read_image(t1)?;
    let (h2, w2, image_t2) = read_image(t2)?;
    if (h, w) != (h2, w2) {
        return Err(Error::Config(format!("pair sizes differ: {h}x{w} vs {h2}x{w2}")));
    }
    let truth_mask = truth
        .map(|p| -> Result<Vec<u8>> {
            let r = read_raster(p)?;
            if r.channels != 1 || (r.width, r.height) != (w, h) {
                return Err(Error::Config(format!("{}: mask must be a {w}x{h} graymap", p.display())));
            }
            Ok(r.samples.iter().map(|&v| (v != 0) as u8).collect())
        })
        .transpose()?;
    if matches!(predictor, Predictor::Oracle) && truth_mask.is_none() {
        return Err(Error::Config("an oracle checkpoint needs --truth".into()));
    }
    let sample = ChangeSample {
        height: h,
        width: w,
        image_t1,
        image_t2,
        mask: truth_mask.clone().unwrap_or_else(|| vec![0; h * w]),
        region_map: vec![0; h * w],
        regions: Vec::new(),
    };
    let pred = predictor.predict(std::slice::from_ref(&sample), 1)?.remove(0);
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let mut written = vec![out_dir.join("change.pgm")];
    write_change_map(&pred, None, w, h, &written[0])?;
    if let Some(t) = &truth_mask {
        written.push(out_dir.join("change_color.ppm"));
        write_change_map(&pred, Some(t), w, h, &written[1])?;
    }
    Ok(written)
}

/// Runs the suite on the configured network, optionally with a fault
/// injected into the current thread for the duration of the run.
pub fn cmd_verify(cfg: &RunConfig, opts: &VerifyOptions, inject: Option<Fault>) -> Result<Vec<Check>> {
    if let Some(f) = inject {
        fault::inject(f);
    }
    let result = run_suite(&cfg.network, opts);
    fault::clear();
    Ok(result?)
}
