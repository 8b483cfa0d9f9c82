//! Command-line front end.
//!
//! Subcommands: `compile` (plan artifacts), `simulate` (timing artifacts),
//! `train` (reference-engine training with checkpoints), `verify` (tiled
//! engine cross-checked against the reference on live data), `report`
//! (human-readable performance summary).
//!
//! The final stdout line of every invocation is machine-parseable:
//! `tracc-status: command=<name> ok=<true|false> [key=value ...]`.
//! Errors print to stderr and map to exit codes: configuration 2,
//! infeasible plan 3, verification failure 4, i/o or artifact trouble 5.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compiler::{compile, write_plan, Plan};
use crate::fxp::{Rounder, Rounding};
use crate::golden::checkpoint::{read_checkpoint, write_checkpoint};
use crate::golden::train::{evaluate_accuracy, TrainState};
use crate::model::{
    apply_overrides, builtin_network, load_dataset, parse_config, serialize_config, Config,
    DatasetConfig, FormatConfig, HardwareConfig, Split,
};
use crate::simarch::{simulate, write_report, SimReport, TiledMachine, GOPS_BASIS};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tracc",
    version,
    about = "Compiler and dual-fidelity simulator for a 16-bit fixed-point CNN training accelerator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by every subcommand. A run is described by a TOML config
/// file or a builtin network name; `--set` rewrites config keys before
/// parsing and the remaining flags override the parsed result.
#[derive(Args, Debug)]
struct Common {
    /// TOML run description (see README for the schema).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Builtin network (cifar10_1x, cifar10_2x, cifar10_4x) with its matching
    /// hardware, when no config file is given.
    #[arg(long, value_name = "NAME")]
    network: Option<String>,
    /// Override a config key before parsing, e.g. `--set training.batch_size=20`
    /// or `--set hardware.pof=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Weight-initialization seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch-size override.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dataset override: `cifar10:PATH` or `synthetic:SEED:COUNT`.
    #[arg(long, value_name = "SPEC")]
    dataset: Option<String>,
    /// Serialize compute and DRAM transfers instead of overlapping them.
    #[arg(long)]
    no_double_buffering: bool,
    /// Disable packing several kernel gradients into one array pass.
    #[arg(long)]
    no_load_balancing: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan a network onto the hardware; writes plan.toml and schedule.csv.
    Compile {
        #[command(flatten)]
        common: Common,
        /// Output directory for the plan artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Price a compiled plan; writes report.toml, latency.csv, dram.csv and
    /// buffers.csv next to the plan artifacts.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train with the bit-exact reference engine; writes epochs.csv and a
    /// checkpoint per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Run live batches through both engines and require bit identity.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Batches to cross-check.
        #[arg(long, default_value_t = 2)]
        batches: usize,
        /// Where to drop the reproduction config if the engines disagree.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print a human-readable performance summary to stdout.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Compile { .. } => "compile",
            Cmd::Simulate { .. } => "simulate",
            Cmd::Train { .. } => "train",
            Cmd::Verify { .. } => "verify",
            Cmd::Report { .. } => "report",
        }
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let name = cli.cmd.name();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            print_status(
                name,
                false,
                &[
                    ("exit", e.exit_code().to_string()),
                    ("error", format!("{:?}", e.to_string())),
                ],
            );
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Compile { common, out } => cmd_compile(&common, &out),
        Cmd::Simulate { common, out } => cmd_simulate(&common, &out),
        Cmd::Train { common, out, resume } => cmd_train(&common, &out, resume.as_deref()),
        Cmd::Verify { common, batches, out } => cmd_verify(&common, batches, &out),
        Cmd::Report { common } => cmd_report(&common),
    }
}

fn print_status(cmd: &str, ok: bool, kv: &[(&str, String)]) {
    let mut line = format!("tracc-status: command={cmd} ok={ok}");
    for (k, v) in kv {
        let _ = write!(line, " {k}={v}");
    }
    println!("{line}");
}

/// Resolves the run description from flags: config file or builtin, `--set`
/// text overrides, then typed flag overrides.
fn build_config(c: &Common) -> Result<Config> {
    let text = match (&c.config, &c.network) {
        // An unreadable config file is a mistake on the command line, not an
        // artifact I/O failure, so it exits with the config code.
        (Some(path), _) => std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?,
        (None, Some(name)) => serialize_config(&Config {
            seed: 42,
            net: builtin_network(name)?,
            hw: HardwareConfig::builtin(name)?,
            formats: FormatConfig::default(),
            dataset: DatasetConfig::default(),
        }),
        (None, None) => {
            return Err(Error::Config(
                "pass --config FILE or --network NAME (cifar10_1x/2x/4x)".into(),
            ))
        }
    };
    let text = apply_overrides(&text, &c.sets)?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.net.epochs = e;
    }
    if let Some(b) = c.batch_size {
        cfg.net.batch_size = b;
    }
    if let Some(spec) = &c.dataset {
        cfg.dataset = DatasetConfig::parse_shorthand(spec)?;
    }
    if c.no_double_buffering {
        cfg.hw.double_buffering = false;
    }
    if c.no_load_balancing {
        cfg.hw.load_balancing = false;
    }
    crate::model::validate_network(&cfg.net)?;
    Ok(cfg)
}

fn plan_for(cfg: &Config) -> Result<Plan> {
    compile(&cfg.net, &cfg.hw)
}

/// The loaders only know the on-disk geometry, so the shape contract with
/// the network is enforced here, before any engine touches the data.
fn check_dataset(cfg: &Config, data: &crate::model::Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{what} dataset ({}) is empty", data.source)));
    }
    let [x, y, c, _] = data.images[0].dims();
    let (ix, iy, ic) = cfg.net.input;
    if (x, y, c) != (ix, iy, ic) {
        return Err(Error::Config(format!(
            "{what} dataset ({}) has {x}x{y}x{c} images but network {:?} expects {ix}x{iy}x{ic}",
            data.source, cfg.net.name
        )));
    }
    if let Some(&m) = data.labels.iter().max() {
        if m as usize >= cfg.net.num_classes {
            return Err(Error::Config(format!(
                "{what} dataset ({}) has label {m} but network {:?} has {} classes",
                data.source, cfg.net.name, cfg.net.num_classes
            )));
        }
    }
    Ok(())
}

fn cmd_compile(common: &Common, out: &Path) -> Result<()> {
    let cfg = build_config(common)?;
    let plan = plan_for(&cfg)?;
    write_plan(&plan, out)?;
    println!(
        "planned {} onto {}x{}x{} = {} MACs: {} entries, tiles (ox {}, oy {}, of {}, if {}), buffers {} of {} bits",
        cfg.net.name,
        cfg.hw.pox,
        cfg.hw.poy,
        cfg.hw.pof,
        plan.mac_units,
        plan.entries.len(),
        plan.tiles.ox,
        plan.tiles.oy,
        plan.tiles.of,
        plan.tiles.r#if,
        plan.buffers.total_bits(),
        plan.buffers.budget_bits,
    );
    print_status(
        "compile",
        true,
        &[
            ("out", out.display().to_string()),
            ("entries", plan.entries.len().to_string()),
            ("buffer_bits", plan.buffers.total_bits().to_string()),
        ],
    );
    Ok(())
}

fn cmd_simulate(common: &Common, out: &Path) -> Result<()> {
    let cfg = build_config(common)?;
    let plan = plan_for(&cfg)?;
    let report = simulate(&plan);
    write_plan(&plan, out)?;
    write_report(&report, out)?;
    println!(
        "one batch of {}: {} cycles = {:.3} ms, {:.1} GOPS, utilization {:.1}%",
        cfg.net.batch_size,
        report.iteration_cycles,
        report.iteration_seconds() * 1e3,
        report.gops(),
        report.utilization() * 100.0,
    );
    print_status(
        "simulate",
        true,
        &[
            ("out", out.display().to_string()),
            ("iteration_cycles", report.iteration_cycles.to_string()),
            ("gops", format!("{:.3}", report.gops())),
        ],
    );
    Ok(())
}

fn cmd_train(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = build_config(common)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut state = TrainState::new(&cfg)?;
    if let Some(ck) = resume {
        read_checkpoint(ck, &mut state, cfg.hw.pof)?;
        println!("resumed from {} at epoch {}", ck.display(), state.epochs_done);
    }
    let train = load_dataset(&cfg.dataset, Split::Train, cfg.formats.activations)?;
    let test = load_dataset(&cfg.dataset, Split::Test, cfg.formats.activations)?;
    check_dataset(&cfg, &train, "train")?;
    check_dataset(&cfg, &test, "test")?;
    println!("train data: {} ({} images)", train.source, train.len());
    println!("test data: {} ({} images)", test.source, test.len());

    let csv_path = out.join("epochs.csv");
    let mut rows = if resume.is_some() && csv_path.exists() {
        std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?
    } else {
        String::from("epoch,batches,train_images,mean_loss,test_correct,test_total,accuracy,saturations\r\n")
    };

    let mut last_loss = f64::NAN;
    let mut last_acc = (0usize, test.len().max(1));
    let done_before = state.epochs_done as usize;
    for _ in done_before..cfg.net.epochs {
        let stats = state.run_epoch(&train);
        let (correct, total) = evaluate_accuracy(&state, &test);
        println!(
            "epoch {}: mean loss {:.4}, test accuracy {}/{} = {:.1}%, saturations {}",
            state.epochs_done,
            stats.mean_loss,
            correct,
            total,
            100.0 * correct as f64 / total.max(1) as f64,
            state.saturations(),
        );
        let _ = write!(
            rows,
            "{},{},{},{:.6},{},{},{:.6},{}\r\n",
            state.epochs_done,
            stats.batches,
            stats.images,
            stats.mean_loss,
            correct,
            total,
            correct as f64 / total.max(1) as f64,
            state.saturations(),
        );
        std::fs::write(&csv_path, &rows).map_err(|e| Error::io(&csv_path, e))?;
        let ck = out.join(format!("epoch_{:03}.ckpt", state.epochs_done));
        write_checkpoint(&ck, &state, cfg.hw.pof)?;
        write_checkpoint(&out.join("last.ckpt"), &state, cfg.hw.pof)?;
        last_loss = stats.mean_loss;
        last_acc = (correct, total);
    }
    if (state.epochs_done as usize) == done_before {
        // Nothing left to do (e.g. resumed an already-finished run); still
        // leave a checkpoint so downstream steps have an artifact.
        write_checkpoint(&out.join("last.ckpt"), &state, cfg.hw.pof)?;
        let (correct, total) = evaluate_accuracy(&state, &test);
        last_acc = (correct, total);
    }
    print_status(
        "train",
        true,
        &[
            ("epochs", state.epochs_done.to_string()),
            ("mean_loss", format!("{:.6}", last_loss)),
            (
                "accuracy",
                format!("{:.6}", last_acc.0 as f64 / last_acc.1.max(1) as f64),
            ),
            ("checkpoint", out.join("last.ckpt").display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_verify(common: &Common, batches: usize, out: &Path) -> Result<()> {
    let cfg = build_config(common)?;
    if matches!(cfg.formats.rounding, Rounding::Stochastic { .. }) {
        return Err(Error::Config(
            "verify requires deterministic rounding: the tiled engine consumes \
             the stochastic stream in a different order"
                .into(),
        ));
    }
    if batches == 0 {
        return Err(Error::Config("verify needs at least one batch".into()));
    }
    let mut gold = TrainState::new(&cfg)?;
    let mut tiled = TiledMachine::new(&cfg)?;
    let data = load_dataset(&cfg.dataset, Split::Train, cfg.formats.activations)?;
    check_dataset(&cfg, &data, "train")?;
    let bs = cfg.net.batch_size;
    let need = batches * bs;
    if data.len() < need {
        return Err(Error::Config(format!(
            "verify needs {need} images ({batches} batches of {bs}), dataset has {}",
            data.len()
        )));
    }
    println!("cross-checking {} batches of {} on {}", batches, bs, data.source);
    for b in 0..batches {
        let imgs: Vec<&crate::golden::FxpTensor> =
            data.images[b * bs..(b + 1) * bs].iter().collect();
        let labels = &data.labels[b * bs..(b + 1) * bs];
        gold.train_batch(&imgs, labels);
        tiled.train_batch(&imgs, labels);
        for i in 0..cfg.net.layers.len() {
            if gold.weights[i] != tiled.state.weights[i]
                || gold.momentum[i] != tiled.state.momentum[i]
            {
                return verify_failed(&cfg, out, format!("layer {i} state after batch {b}"));
            }
        }
        if gold.saturations() != tiled.state.saturations() {
            return verify_failed(&cfg, out, format!("saturation count after batch {b}"));
        }
        println!("batch {b}: weights, momentum and saturation counts identical");
    }
    let mut r1 = Rounder::new(cfg.formats.rounding);
    let mut r2 = Rounder::new(cfg.formats.rounding);
    if gold.scores_with(&data.images[0], &mut r1) != tiled.scores(&data.images[0], &mut r2) {
        return verify_failed(&cfg, out, "evaluation scores".into());
    }
    print_status(
        "verify",
        true,
        &[("batches", batches.to_string()), ("engines", "bit-identical".into())],
    );
    Ok(())
}

fn verify_failed(cfg: &Config, out: &Path, what: String) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let repro = out.join("verify_repro.toml");
    std::fs::write(&repro, serialize_config(cfg)).map_err(|e| Error::io(&repro, e))?;
    eprintln!("wrote failing configuration to {}", repro.display());
    Err(Error::Verification(format!(
        "tiled engine diverged from the reference: {what} (repro config: {})",
        repro.display()
    )))
}

fn human_bytes(b: u64) -> String {
    if b >= 1 << 20 {
        format!("{:.1} MiB", b as f64 / (1 << 20) as f64)
    } else if b >= 1 << 10 {
        format!("{:.1} KiB", b as f64 / (1 << 10) as f64)
    } else {
        format!("{b} B")
    }
}

fn cmd_report(common: &Common) -> Result<()> {
    let cfg = build_config(common)?;
    let plan = plan_for(&cfg)?;
    let report: SimReport = simulate(&plan);
    println!(
        "{}: {} layers, batch {}, array {}x{}x{} = {} MACs @ {:.0} MHz",
        cfg.net.name,
        cfg.net.layers.len(),
        cfg.net.batch_size,
        cfg.hw.pox,
        cfg.hw.poy,
        cfg.hw.pof,
        report.mac_units,
        cfg.hw.clock_hz / 1e6,
    );
    println!(
        "throughput: {:.1} GOPS ({}), {:.1} images/s, array utilization {:.1}%",
        report.gops(),
        GOPS_BASIS,
        report.images_per_second(),
        report.utilization() * 100.0,
    );
    println!(
        "one batch: {} cycles = {:.3} ms",
        report.iteration_cycles,
        report.iteration_seconds() * 1e3
    );
    println!("stage shares of batch latency:");
    for (name, share) in report.stage_shares() {
        println!("  {name:<3} {:>5.1}%", share * 100.0);
    }
    println!("phase detail (latency / logic / dram cycles):");
    for p in &report.phases {
        println!(
            "  {:<12} {:>12} {:>12} {:>12}",
            p.phase.to_string(),
            p.latency_cycles,
            p.logic_cycles,
            p.dram_cycles
        );
    }
    let read: u64 = report.traffic.iter().map(|t| t.read_bytes).sum();
    let write: u64 = report.traffic.iter().map(|t| t.write_bytes).sum();
    println!(
        "dram per batch: read {}, write {}",
        human_bytes(read),
        human_bytes(write)
    );
    println!(
        "buffers: {} of {} bits ({})",
        report.buffers.total_bits(),
        report.buffers.budget_bits,
        if report.buffers.fits() { "fits" } else { "over budget" },
    );
    print_status(
        "report",
        true,
        &[
            ("gops", format!("{:.3}", report.gops())),
            ("iteration_cycles", report.iteration_cycles.to_string()),
        ],
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_flag_builds_a_complete_config() {
        let c = Common {
            config: None,
            network: Some("cifar10_1x".into()),
            sets: vec!["training.batch_size=8".into()],
            seed: Some(7),
            epochs: Some(2),
            batch_size: None,
            dataset: Some("synthetic:5:64".into()),
            no_double_buffering: true,
            no_load_balancing: false,
        };
        let cfg = build_config(&c).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.net.batch_size, 8); // --set applied
        assert_eq!(cfg.net.epochs, 2);
        assert!(!cfg.hw.double_buffering);
        assert!(cfg.hw.load_balancing);
    }

    #[test]
    fn missing_source_is_a_config_error() {
        let c = Common {
            config: None,
            network: None,
            sets: vec![],
            seed: None,
            epochs: None,
            batch_size: None,
            dataset: None,
            no_double_buffering: false,
            no_load_balancing: false,
        };
        let err = build_config(&c).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn typed_overrides_beat_the_config_text() {
        let c = Common {
            config: None,
            network: Some("cifar10_1x".into()),
            sets: vec![],
            seed: None,
            epochs: None,
            batch_size: Some(12),
            dataset: None,
            no_double_buffering: false,
            no_load_balancing: false,
        };
        assert_eq!(build_config(&c).unwrap().net.batch_size, 12);
    }
}
