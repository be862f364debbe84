//! Ablation sweeps: FiLM depth and camera degradation.
//!
//! Both suites reuse artifacts already present in the working directory
//! (demos, base checkpoint, finetuned variants) and train whatever is
//! missing. Every consolidated CSV row carries the evaluation seed range.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::dataset::{collect_demos, read_episodes, write_episodes, DemoMeta, EpisodeRecord};
use crate::error::Result;
use crate::film::DepthVariant;
use crate::policy::{Policy, Variant};
use crate::scalar::Scalar;
use crate::sim::render::CameraMode;
use crate::sim::TaskSpec;

use super::config::RunConfig;
use super::evaluate::{evaluate, Driver, RolloutMetrics};
use super::train::{finetune, train_from_scratch};

pub struct SweepRow {
    pub suite: String,
    pub method: String,
    pub task: String,
    pub camera: String,
    pub metrics: RolloutMetrics,
    pub seeds: String,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "suite,method,task,camera,n_episodes,success_rate,direct_rate,avg_max_force,std_max_force,avg_time,std_time,seeds"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.4},{:.4},{:.6},{:.6},{:.4},{:.4},{}",
            r.suite,
            r.method,
            r.task,
            r.camera,
            r.metrics.n_episodes,
            r.metrics.success_rate,
            r.metrics.direct_rate,
            r.metrics.avg_max_force,
            r.metrics.std_max_force,
            r.metrics.avg_time,
            r.metrics.std_time,
            r.seeds
        )?;
    }
    Ok(())
}

/// Demos for a task, reusing `<dir>/demos_<task>.tved` when present.
pub fn ensure_demos(
    run: &RunConfig,
    task: &TaskSpec,
    dir: &Path,
) -> Result<(PathBuf, DemoMeta, Vec<EpisodeRecord>)> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("demos_{}.tved", task.name));
    if path.exists() {
        let (meta, eps) = read_episodes(&path)?;
        return Ok((path, meta, eps));
    }
    let (meta, eps) = collect_demos(task, run.demos, run.noise_scale, run.seed)?;
    write_episodes(&path, &meta, &eps)?;
    Ok((path, meta, eps))
}

/// Vision-only base checkpoint for the given demos, training it if missing.
pub fn ensure_base<S: Scalar>(
    run: &RunConfig,
    meta: &DemoMeta,
    episodes: &[EpisodeRecord],
    encoder: Option<&Path>,
    dir: &Path,
) -> Result<PathBuf> {
    let out = dir.join("base");
    let ckpt = out.join("policy.tvla");
    if ckpt.exists() {
        return Ok(ckpt);
    }
    let mut base_run = run.clone();
    base_run.variant = Variant::VisionOnly;
    Ok(train_from_scratch::<S>(&base_run, meta, episodes, encoder, &out)?.checkpoint)
}

fn ensure_finetuned<S: Scalar>(
    run: &RunConfig,
    base: &Path,
    meta: &DemoMeta,
    episodes: &[EpisodeRecord],
    variant: Variant,
    depth: DepthVariant,
    encoder: Option<&Path>,
    dir: &Path,
) -> Result<PathBuf> {
    let name = format!("{}_{}", variant.tag(), depth.tag());
    let out = dir.join(&name);
    let ckpt = out.join("policy.tvla");
    if ckpt.exists() {
        return Ok(ckpt);
    }
    let mut ft_run = run.clone();
    ft_run.variant = variant;
    ft_run.depth_variant = depth;
    Ok(finetune::<S>(base, meta, episodes, variant, &ft_run, encoder, &out)?.checkpoint)
}

fn eval_checkpoint<S: Scalar>(
    ckpt: &Path,
    task: &TaskSpec,
    run: &RunConfig,
    camera: CameraMode,
    label: &str,
) -> Result<RolloutMetrics> {
    let policy: Policy<S> = checkpoint::load_policy(ckpt)?;
    let driver = Driver::Policy(&policy);
    let eval = evaluate(
        &driver,
        task,
        run.episodes,
        camera,
        run.base_seed,
        run.max_episode_steps,
        None,
        label,
    )?;
    Ok(eval.metrics)
}

fn seed_range(run: &RunConfig) -> String {
    format!("{}..{}", run.base_seed, run.base_seed + run.episodes as u64 - 1)
}

/// FiLM-depth sweep: All/Early/Middle/Late trained on the in-distribution
/// task, each evaluated in-distribution and out-of-distribution.
/// 4 variants x 2 tasks rows.
pub fn depth_suite<S: Scalar>(
    run: &RunConfig,
    id_task: &str,
    ood_task: &str,
    encoder: Option<&Path>,
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    let id = TaskSpec::by_name(id_task)?;
    let ood = TaskSpec::by_name(ood_task)?;
    let (_, meta, episodes) = ensure_demos(run, &id, dir)?;
    let base = ensure_base::<S>(run, &meta, &episodes, encoder, dir)?;

    let mut rows = Vec::new();
    for depth in [DepthVariant::All, DepthVariant::Early, DepthVariant::Middle, DepthVariant::Late]
    {
        let ckpt = ensure_finetuned::<S>(
            run,
            &base,
            &meta,
            &episodes,
            Variant::TactileFilm,
            depth,
            encoder,
            dir,
        )?;
        let method = format!("film-{}", depth.tag());
        for task in [&id, &ood] {
            let metrics =
                eval_checkpoint::<S>(&ckpt, task, run, CameraMode::Clean, &method)?;
            rows.push(SweepRow {
                suite: "depth".into(),
                method: method.clone(),
                task: task.name.clone(),
                camera: "clean".into(),
                metrics,
                seeds: seed_range(run),
            });
        }
    }
    Ok(rows)
}

/// Camera-degradation sweep: the three methods under Dim80 and Freeze50.
/// 3 methods x 2 conditions rows.
pub fn camera_suite<S: Scalar>(
    run: &RunConfig,
    task_name: &str,
    encoder: Option<&Path>,
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    let task = TaskSpec::by_name(task_name)?;
    let (_, meta, episodes) = ensure_demos(run, &task, dir)?;
    let base = ensure_base::<S>(run, &meta, &episodes, encoder, dir)?;
    let film = ensure_finetuned::<S>(
        run,
        &base,
        &meta,
        &episodes,
        Variant::TactileFilm,
        run.depth_variant,
        encoder,
        dir,
    )?;
    let concat = ensure_finetuned::<S>(
        run,
        &base,
        &meta,
        &episodes,
        Variant::TactileConcat,
        run.depth_variant,
        encoder,
        dir,
    )?;

    let mut rows = Vec::new();
    for (label, ckpt) in [
        ("vision-only", &base),
        ("tactile-concat", &concat),
        ("tactile-film", &film),
    ] {
        for camera in [CameraMode::Dim80, CameraMode::Freeze50] {
            let metrics = eval_checkpoint::<S>(ckpt, &task, run, camera, label)?;
            rows.push(SweepRow {
                suite: "camera".into(),
                method: label.into(),
                task: task.name.clone(),
                camera: camera.tag().into(),
                metrics,
                seeds: seed_range(run),
            });
        }
    }
    Ok(rows)
}
