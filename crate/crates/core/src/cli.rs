//! `tvla` command-line interface.
//!
//! Subcommands: `collect`, `pretrain-tactile`, `probe`, `train`, `finetune`,
//! `eval`, `ablate`, `report`. Global flags `--seed`, `--config <file>` and
//! `--out <dir>`; config files are flat `key=value` (see
//! [`RunConfig::describe_keys`]). Usage errors exit 2, runtime failures 1.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::dataset::{read_episodes, write_episodes};
use crate::error::{Error, Result};
use crate::harness::ablate::{camera_suite, depth_suite, write_sweep_csv};
use crate::harness::evaluate::{evaluate, Driver};
use crate::harness::probe::{probe_eval, random_encoder, write_probe_csv};
use crate::harness::report::report;
use crate::harness::train::{finetune, pretrain_tactile, train_from_scratch};
use crate::harness::{ensure_probe_datasets, Precision, RunConfig};
use crate::policy::{Policy, Variant};
use crate::scalar::Scalar;
use crate::sim::render::CameraMode;
use crate::sim::TaskSpec;
use crate::tactile::TactileEncoder;
use crate::vit::ViTConfig;

#[derive(Parser)]
#[command(
    name = "tvla",
    about = "Tactile-conditioned vision-language-action policy testbed",
    after_help = format!("Config file keys (key=value, one per line):\n{}", RunConfig::describe_keys()),
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert demonstrations into an episode file.
    Collect {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Generate probe datasets and pretrain the frozen tactile encoder.
    PretrainTactile {},
    /// Probe-classification table for one or more encoder checkpoints.
    Probe {
        /// Encoder checkpoints to evaluate (label=path or bare path).
        #[arg(long, num_args = 1..)]
        encoder: Vec<String>,
        /// Add a frozen random-init encoder column.
        #[arg(long, default_value_t = true)]
        random_baseline: bool,
    },
    /// Behavior-clone a policy from demonstrations.
    Train {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        /// Pretrained tactile encoder checkpoint (tactile variants).
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// LoRA post-training: attach a tactile variant to a vision-only base.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Seeded rollout evaluation with metrics CSVs.
    Eval {
        /// Policy checkpoint (omit with --expert).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a policy.
        #[arg(long, default_value_t = false)]
        expert: bool,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        camera: Option<String>,
        /// Row label in the CSVs (defaults to the variant / "expert").
        #[arg(long)]
        label: Option<String>,
    },
    /// Ablation sweeps over FiLM depth or camera degradation.
    Ablate {
        /// "depth" or "camera".
        #[arg(long)]
        suite: String,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// In-distribution task (depth suite trains here).
        #[arg(long)]
        task: Option<String>,
        /// Out-of-distribution task for the depth suite.
        #[arg(long, default_value = "pentagon3")]
        ood_task: String,
    },
    /// Consolidate evaluation directories into tables and plot data.
    Report {
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

/// Entry point used by the binary and by tests. Returns the process exit
/// code: 0 success, 1 runtime failure, 2 usage/config error.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit codes: 0 for --help/--version, 2 for usage.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    let mut run_cfg = RunConfig::default();
    if let Some(path) = &cli.global.config {
        if let Err(e) = run_cfg.apply_file(path) {
            eprintln!("error: {e}");
            return 2;
        }
    }
    if let Some(seed) = cli.global.seed {
        run_cfg.seed = seed;
    }

    let result = match run_cfg.precision {
        Precision::F64 => dispatch::<f64>(&cli, run_cfg),
        Precision::F32 => dispatch::<f32>(&cli, run_cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch<S: Scalar>(cli: &Cli, mut run: RunConfig) -> Result<()> {
    let out = &cli.global.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Collect { task, demos, noise_scale } => {
            if let Some(t) = task {
                run.task = t.clone();
            }
            if let Some(d) = demos {
                run.demos = *d;
            }
            if let Some(n) = noise_scale {
                run.noise_scale = *n;
            }
            let task = TaskSpec::by_name(&run.task)?;
            let (meta, episodes) =
                crate::dataset::collect_demos(&task, run.demos, run.noise_scale, run.seed)?;
            let path = out.join(format!("demos_{}.tved", task.name));
            write_episodes(&path, &meta, &episodes)?;
            let mean_len: f64 =
                episodes.iter().map(|e| e.steps.len() as f64).sum::<f64>() / episodes.len() as f64;
            println!(
                "collected {} episodes ({} mean steps) -> {}",
                episodes.len(),
                mean_len.round(),
                path.display()
            );
            Ok(())
        }
        Command::PretrainTactile {} => {
            let datasets = ensure_probe_datasets(&run, &out.join("probes"))?;
            let sets: Vec<_> =
                datasets.iter().map(|(t, ex, _)| (*t, ex.clone())).collect();
            let cfg = tactile_config(&run);
            let ckpt = out.join("tactile_encoder.tvla");
            let result = pretrain_tactile::<S>(
                &sets,
                cfg,
                run.pretrain_steps,
                run.batch_size.max(8),
                run.lr,
                run.seed,
                &ckpt,
            )?;
            println!(
                "pretrained tactile encoder (final loss {:.4}) -> {}",
                result.final_loss,
                ckpt.display()
            );
            Ok(())
        }
        Command::Probe { encoder, random_baseline } => {
            let datasets = ensure_probe_datasets(&run, &out.join("probes"))?;
            let sets: Vec<_> =
                datasets.iter().map(|(t, ex, _)| (*t, ex.clone())).collect();
            let mut columns = Vec::new();
            for spec in encoder {
                let (label, path) = match spec.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => ("pretrained".to_string(), PathBuf::from(spec)),
                };
                let (cfg, store) = checkpoint::load_encoder::<S>(&path)?;
                let enc = rebuild_encoder::<S>(cfg, &store)?;
                let accs = probe_eval(&enc.0, &enc.1, &sets, run.head_steps, run.seed)?;
                columns.push((label, accs));
            }
            if *random_baseline {
                let (enc, store) = random_encoder::<S>(tactile_config(&run), run.seed)?;
                let accs = probe_eval(&enc, &store, &sets, run.head_steps, run.seed)?;
                columns.push(("random-frozen".to_string(), accs));
            }
            if columns.is_empty() {
                return Err(Error::Config("probe needs at least one encoder column".into()));
            }
            let path = out.join("probe_accuracy.csv");
            write_probe_csv(&path, &columns)?;
            for (label, accs) in &columns {
                for (task, acc) in accs {
                    println!("{label} {}: {acc:.2}%", task.tag());
                }
            }
            println!("table -> {}", path.display());
            Ok(())
        }
        Command::Train { demos, variant, encoder } => {
            if let Some(v) = variant {
                run.variant = Variant::parse(v)?;
            }
            let (meta, episodes) = read_episodes(demos)?;
            let result =
                train_from_scratch::<S>(&run, &meta, &episodes, encoder.as_deref(), out)?;
            println!(
                "trained {} for {} steps (final loss {:.4}) -> {}",
                run.variant.tag(),
                run.steps,
                result.final_loss,
                result.checkpoint.display()
            );
            Ok(())
        }
        Command::Finetune { base, demos, variant, encoder } => {
            let variant = Variant::parse(variant)?;
            let (meta, episodes) = read_episodes(demos)?;
            let result = finetune::<S>(
                base,
                &meta,
                &episodes,
                variant,
                &run,
                encoder.as_deref(),
                out,
            )?;
            println!(
                "finetuned {} (final loss {:.4}) -> {}",
                variant.tag(),
                result.final_loss,
                result.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, expert, task, episodes, camera, label } => {
            if let Some(t) = task {
                run.task = t.clone();
            }
            if let Some(n) = episodes {
                run.episodes = *n;
            }
            if let Some(c) = camera {
                run.camera = CameraMode::parse(c)?;
            }
            let task = TaskSpec::by_name(&run.task)?;
            let metrics = if *expert {
                let driver: Driver<'_, S> = Driver::Expert { noise_scale: run.noise_scale };
                let label = label.clone().unwrap_or_else(|| "expert".into());
                evaluate(
                    &driver,
                    &task,
                    run.episodes,
                    run.camera,
                    run.base_seed,
                    run.max_episode_steps,
                    Some(out),
                    &label,
                )?
                .metrics
            } else {
                let path = ckpt
                    .as_ref()
                    .ok_or_else(|| Error::Config("eval needs --checkpoint or --expert".into()))?;
                let policy: Policy<S> = checkpoint::load_policy(path)?;
                let label =
                    label.clone().unwrap_or_else(|| policy.config.variant.tag().to_string());
                let driver = Driver::Policy(&policy);
                evaluate(
                    &driver,
                    &task,
                    run.episodes,
                    run.camera,
                    run.base_seed,
                    run.max_episode_steps,
                    Some(out),
                    &label,
                )?
                .metrics
            };
            println!(
                "{} on {} ({}): success {:.1}% direct {:.1}% force {:.2}±{:.2} N time {:.1}±{:.1} s -> {}",
                if *expert { "expert" } else { "policy" },
                task.name,
                run.camera.tag(),
                metrics.success_rate,
                metrics.direct_rate,
                metrics.avg_max_force,
                metrics.std_max_force,
                metrics.avg_time,
                metrics.std_time,
                out.display()
            );
            Ok(())
        }
        Command::Ablate { suite, encoder, task, ood_task } => {
            if let Some(t) = task {
                run.task = t.clone();
            }
            let rows = match suite.as_str() {
                "depth" => depth_suite::<S>(&run, &run.task, ood_task, encoder.as_deref(), out)?,
                "camera" => camera_suite::<S>(&run, &run.task, encoder.as_deref(), out)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablate suite '{other}' (use depth or camera)"
                    )))
                }
            };
            let path = out.join(format!("ablate_{suite}.csv"));
            write_sweep_csv(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
            Ok(())
        }
        Command::Report { runs } => {
            let dirs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
            report(&dirs, out)?;
            println!(
                "report -> {} (tables.txt, force_recovered.csv, times.csv)",
                out.display()
            );
            Ok(())
        }
    }
}

fn tactile_config(run: &RunConfig) -> ViTConfig {
    let mut cfg = ViTConfig::tactile_default();
    cfg.embed_dim = run.tactile_embed;
    cfg.blocks = run.tactile_blocks;
    cfg.heads = run.tactile_heads;
    cfg
}

fn rebuild_encoder<S: Scalar>(
    cfg: ViTConfig,
    loaded: &crate::params::ParamStore<S>,
) -> Result<(TactileEncoder, crate::params::ParamStore<S>)> {
    // Rebuild the module tree over a fresh store, then overwrite values.
    let mut store: crate::params::ParamStore<S> = crate::params::ParamStore::new(loaded.seed());
    let encoder = TactileEncoder::build(&mut store, "tac", cfg)?;
    for (_, e) in loaded.iter() {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::Config(format!("unexpected encoder tensor {}", e.name)))?;
        store.entry_mut(id).value = e.value.clone();
        store.entry_mut(id).frozen = e.frozen;
    }
    Ok((encoder, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("tvla").chain(args.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(&argv(&["frobnicate"])), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(&argv(&["--help"])), 0);
    }

    #[test]
    fn unknown_config_key_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "flux_capacitance=1.21\n").unwrap();
        let out = dir.path().join("out");
        let code = run(&argv(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "collect",
            "--task",
            "circle3",
            "--demos",
            "1",
        ]));
        assert_eq!(code, 2);
    }

    #[test]
    fn eval_requires_checkpoint_or_expert() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(&argv(&["--out", out.to_str().unwrap(), "eval", "--task", "circle3"]));
        assert_eq!(code, 2);
    }

    #[test]
    fn expert_eval_writes_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(&argv(&[
            "--out",
            out.to_str().unwrap(),
            "eval",
            "--expert",
            "--task",
            "circle3",
            "--episodes",
            "3",
        ]));
        assert_eq!(code, 0);
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("episodes.csv").exists());
        assert!(out.join("traces.csv").exists());
    }

    #[test]
    fn collect_writes_demo_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(&argv(&[
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "collect",
            "--task",
            "circle3",
            "--demos",
            "2",
        ]));
        assert_eq!(code, 0);
        assert!(out.join("demos_circle3.tved").exists());
    }
}
