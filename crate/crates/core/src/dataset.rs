//! Demonstration collection, episode persistence, normalization statistics
//! and probe-dataset generation.
//!
//! Episode files: `TVED` magic, a mandatory version byte, a text-map header,
//! then length-prefixed per-episode binary blocks. Little-endian throughout;
//! images stored 8-bit (records are quantized at collection time so file
//! round-trips are lossless), scalars as 64-bit floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::actions::NormStats;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::uniform_in;
use crate::rng::derive_rng;
use crate::sim::render::{render_rgb, render_tactile, tactile_reference, TACTILE_SIZE};
use crate::sim::{Contact, Env, Outcome, SimState, StepInfo, TaskSpec};

pub const DEMO_MAGIC: &[u8; 4] = b"TVED";
pub const PROBE_MAGIC: &[u8; 4] = b"TVPD";
pub const FORMAT_VERSION: u8 = 1;
pub const MAX_EPISODE_STEPS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub rgb: Image,
    pub tactile: Image,
    pub proprio: [f64; 3],
    pub action: [f64; 3],
    pub contact_force: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoMeta {
    pub task: String,
    pub instruction: String,
    pub rgb_shape: (usize, usize, usize),
    pub tactile_shape: (usize, usize, usize),
    pub action_dims: usize,
    pub proprio_dims: usize,
    pub fps: f64,
}

impl DemoMeta {
    pub fn for_task(task: &TaskSpec) -> Self {
        DemoMeta {
            task: task.name.clone(),
            instruction: task.instruction().to_string(),
            rgb_shape: (48, 48, 3),
            tactile_shape: (TACTILE_SIZE, TACTILE_SIZE, 3),
            action_dims: 3,
            proprio_dims: 3,
            fps: 10.0,
        }
    }
}

/// Quantize an image the way the file stores it, so in-memory records equal
/// their persisted form exactly.
fn quantized(img: &Image) -> Image {
    Image::from_u8(img.height, img.width, img.channels, &img.to_u8()).expect("shape preserved")
}

/// Run the scripted expert until `n_demos` successes are recorded; failed
/// attempts are discarded. Attempt `i` uses environment seed `seed + i` and
/// a noise stream derived from it, which is what the evaluation harness
/// replays in expert mode.
pub fn collect_demos(
    task: &TaskSpec,
    n_demos: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<(DemoMeta, Vec<EpisodeRecord>)> {
    let mut episodes = Vec::with_capacity(n_demos);
    let mut attempts = 0u64;
    let mut successes = 0u64;
    while episodes.len() < n_demos {
        let ep_seed = seed + attempts;
        attempts += 1;
        let record = record_expert_episode(task, ep_seed, noise_scale)?;
        if record.outcome.is_success() {
            successes += 1;
            episodes.push(record);
        }
        if attempts >= 20 && successes * 2 < attempts {
            return Err(Error::Config(format!(
                "expert success rate {successes}/{attempts} below 50%: task too hard for the expert"
            )));
        }
    }
    Ok((DemoMeta::for_task(task), episodes))
}

/// One expert episode with full observation recording.
pub fn record_expert_episode(
    task: &TaskSpec,
    ep_seed: u64,
    noise_scale: f64,
) -> Result<EpisodeRecord> {
    let mut env = Env::reset(task.clone(), ep_seed)?;
    let mut noise_rng = derive_rng(ep_seed, "expert-noise");
    let mut steps = Vec::new();
    let mut info = StepInfo::free();
    let mut trace = Vec::new();
    for _ in 0..MAX_EPISODE_STEPS {
        if env.state.done {
            break;
        }
        let rgb = quantized(&render_rgb(&env.task, &env.state));
        let tactile = quantized(&render_tactile(&env.state, &info));
        let proprio = [env.state.x, env.state.z, env.state.theta];
        let action =
            crate::sim::expert::scripted_expert(&env.state, &env.task, noise_scale, &mut noise_rng);
        info = env.step(action)?;
        trace.push(crate::sim::TraceStep { state: env.state, info, action });
        steps.push(StepRecord {
            rgb,
            tactile,
            proprio,
            action,
            contact_force: info.contact_force,
        });
    }
    let metrics = crate::sim::episode_outcome(task, &trace, MAX_EPISODE_STEPS);
    Ok(EpisodeRecord { seed: ep_seed, outcome: metrics.outcome, steps })
}

// ── Norm stats ──────────────────────────────────────────────────────────

/// Nearest-rank percentile of already-sorted values: the smallest element
/// with at least `p` percent of the pool at or below it.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Per-dimension 1st/99th percentile over all recorded actions.
/// `widen_degenerate` replaces a collapsed dimension (lo == hi) by a
/// +-1e-6 band instead of erroring.
pub fn compute_norm_stats(episodes: &[EpisodeRecord], widen_degenerate: bool) -> Result<NormStats> {
    if episodes.iter().all(|e| e.steps.is_empty()) {
        return Err(Error::Precondition("no actions recorded".into()));
    }
    let dims = 3;
    let mut lo = Vec::with_capacity(dims);
    let mut hi = Vec::with_capacity(dims);
    for d in 0..dims {
        let mut pool: Vec<f64> = episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(move |s| s.action[d]))
            .collect();
        pool.sort_by(|a, b| a.partial_cmp(b).expect("finite actions"));
        let mut l = nearest_rank(&pool, 1.0);
        let mut h = nearest_rank(&pool, 99.0);
        if l >= h {
            if widen_degenerate {
                l -= 1e-6;
                h += 1e-6;
            } else {
                return Err(Error::Config(format!(
                    "degenerate action dimension {d}: lo {l} >= hi {h}"
                )));
            }
        }
        lo.push(l);
        hi.push(h);
    }
    NormStats::new(lo, hi)
}

// ── Episode file IO ─────────────────────────────────────────────────────

fn header_map(meta: &DemoMeta, episodes: usize) -> String {
    format!(
        "task={}\ninstruction={}\nepisodes={}\nrgb_h={}\nrgb_w={}\nrgb_c={}\ntact_h={}\ntact_w={}\ntact_c={}\naction_dims={}\nproprio_dims={}\nfps={}\n",
        meta.task,
        meta.instruction,
        episodes,
        meta.rgb_shape.0,
        meta.rgb_shape.1,
        meta.rgb_shape.2,
        meta.tactile_shape.0,
        meta.tactile_shape.1,
        meta.tactile_shape.2,
        meta.action_dims,
        meta.proprio_dims,
        meta.fps
    )
}

fn parse_header(text: &str) -> Result<(DemoMeta, usize)> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format { offset: 0, detail: format!("bad header line '{line}'") })?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::Format { offset: 0, detail: format!("missing header key {k}") })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format { offset: 0, detail: format!("bad numeric header {k}") })
    };
    let meta = DemoMeta {
        task: get("task")?,
        instruction: get("instruction")?,
        rgb_shape: (num("rgb_h")?, num("rgb_w")?, num("rgb_c")?),
        tactile_shape: (num("tact_h")?, num("tact_w")?, num("tact_c")?),
        action_dims: num("action_dims")?,
        proprio_dims: num("proprio_dims")?,
        fps: get("fps")?
            .parse()
            .map_err(|_| Error::Format { offset: 0, detail: "bad fps".into() })?,
    };
    Ok((meta, num("episodes")?))
}

pub fn write_episodes(path: &Path, meta: &DemoMeta, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEMO_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let header = header_map(meta, episodes.len());
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;

    for ep in episodes {
        let mut block: Vec<u8> = Vec::new();
        block.extend_from_slice(&ep.seed.to_le_bytes());
        block.push(u8::from(ep.outcome.is_success()));
        block.push(u8::from(ep.outcome.is_direct()));
        block.extend_from_slice(&(ep.steps.len() as u32).to_le_bytes());
        for s in &ep.steps {
            block.extend_from_slice(&s.rgb.to_u8());
        }
        for s in &ep.steps {
            block.extend_from_slice(&s.tactile.to_u8());
        }
        for s in &ep.steps {
            for v in s.proprio {
                block.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &ep.steps {
            for v in s.action {
                block.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &ep.steps {
            block.extend_from_slice(&s.contact_force.to_le_bytes());
        }
        w.write_all(&(block.len() as u64).to_le_bytes())?;
        w.write_all(&block)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<(DemoMeta, Vec<EpisodeRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_or_fmt(&mut r, &mut magic, &mut offset, "magic", usize::MAX)?;
    if &magic != DEMO_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic (not an episode file)".into() });
    }
    let mut version = [0u8; 1];
    read_or_fmt(&mut r, &mut version, &mut offset, "version", usize::MAX)?;
    if version[0] != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("format version {}, expected {FORMAT_VERSION}", version[0]),
        });
    }
    let mut len4 = [0u8; 4];
    read_or_fmt(&mut r, &mut len4, &mut offset, "header length", usize::MAX)?;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header = vec![0u8; header_len];
    read_or_fmt(&mut r, &mut header, &mut offset, "header", usize::MAX)?;
    let text = String::from_utf8(header)
        .map_err(|_| Error::Format { offset, detail: "header is not utf-8".into() })?;
    let (meta, n_episodes) = parse_header(&text)?;

    let (rh, rw, rc) = meta.rgb_shape;
    let (th, tw, tc) = meta.tactile_shape;
    let mut episodes = Vec::with_capacity(n_episodes);
    for ep_idx in 0..n_episodes {
        let mut len8 = [0u8; 8];
        read_or_fmt(&mut r, &mut len8, &mut offset, "episode length prefix", ep_idx)?;
        let block_len = u64::from_le_bytes(len8) as usize;
        let mut block = vec![0u8; block_len];
        read_or_fmt(&mut r, &mut block, &mut offset, "episode block", ep_idx)?;

        let mut pos = 0usize;
        let take = |block: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
            if *pos + n > block.len() {
                return Err(Error::Format {
                    offset,
                    detail: format!("episode {ep_idx}: block too short"),
                });
            }
            let out = block[*pos..*pos + n].to_vec();
            *pos += n;
            Ok(out)
        };
        let seed = u64::from_le_bytes(take(&block, &mut pos, 8)?.try_into().unwrap());
        let success = take(&block, &mut pos, 1)?[0] != 0;
        let direct = take(&block, &mut pos, 1)?[0] != 0;
        let n_steps = u32::from_le_bytes(take(&block, &mut pos, 4)?.try_into().unwrap()) as usize;

        let rgb_bytes = take(&block, &mut pos, n_steps * rh * rw * rc)?;
        let tact_bytes = take(&block, &mut pos, n_steps * th * tw * tc)?;
        let proprio_bytes = take(&block, &mut pos, n_steps * meta.proprio_dims * 8)?;
        let action_bytes = take(&block, &mut pos, n_steps * meta.action_dims * 8)?;
        let force_bytes = take(&block, &mut pos, n_steps * 8)?;
        if pos != block.len() {
            return Err(Error::Format {
                offset,
                detail: format!("episode {ep_idx}: {} trailing bytes", block.len() - pos),
            });
        }

        let f64_at = |bytes: &[u8], i: usize| -> f64 {
            f64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap())
        };
        let mut steps = Vec::with_capacity(n_steps);
        for s in 0..n_steps {
            let rgb = Image::from_u8(rh, rw, rc, &rgb_bytes[s * rh * rw * rc..(s + 1) * rh * rw * rc])?;
            let tactile =
                Image::from_u8(th, tw, tc, &tact_bytes[s * th * tw * tc..(s + 1) * th * tw * tc])?;
            let proprio = [
                f64_at(&proprio_bytes, s * 3),
                f64_at(&proprio_bytes, s * 3 + 1),
                f64_at(&proprio_bytes, s * 3 + 2),
            ];
            let action = [
                f64_at(&action_bytes, s * 3),
                f64_at(&action_bytes, s * 3 + 1),
                f64_at(&action_bytes, s * 3 + 2),
            ];
            steps.push(StepRecord {
                rgb,
                tactile,
                proprio,
                action,
                contact_force: f64_at(&force_bytes, s),
            });
        }
        let outcome = if success { Outcome::Success { direct } } else { Outcome::Failure };
        episodes.push(EpisodeRecord { seed, outcome, steps });
    }
    Ok((meta, episodes))
}

fn read_or_fmt<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
    episode: usize,
) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            let detail = if episode == usize::MAX {
                format!("truncated while reading {what}")
            } else {
                format!("truncated while reading {what} of episode {episode}")
            };
            Err(Error::Format { offset: *offset, detail })
        }
        Err(e) => Err(e.into()),
    }
}

// ── Probe datasets ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProbeTask {
    RotationHigh,
    RotationLow,
    Contact,
}

impl ProbeTask {
    pub fn all() -> [ProbeTask; 3] {
        [ProbeTask::RotationHigh, ProbeTask::RotationLow, ProbeTask::Contact]
    }

    pub fn tag(self) -> &'static str {
        match self {
            ProbeTask::RotationHigh => "rotation-high",
            ProbeTask::RotationLow => "rotation-low",
            ProbeTask::Contact => "contact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rotation-high" => Ok(ProbeTask::RotationHigh),
            "rotation-low" => Ok(ProbeTask::RotationLow),
            "contact" => Ok(ProbeTask::Contact),
            other => Err(Error::Config(format!("unknown probe task '{other}'"))),
        }
    }
}

/// A preprocessed tactile frame pair (stacked channels, background removed)
/// with a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub frames: Image,
    pub label: u8,
}

fn contact_state(theta: f64, slide: f64) -> SimState {
    SimState {
        x: 0.0,
        z: 0.0,
        theta,
        vx: slide,
        vz: 0.0,
        vtheta: 0.0,
        contact: Contact::RimLeft,
        time_steps: 0,
        done: false,
        camera_jitter: 0.0,
    }
}

fn render_contact(theta: f64, slide: f64, side: Contact, force: f64, depth: f64) -> Image {
    let state = contact_state(theta, slide);
    let info = StepInfo { contact_force: force, contact: side, inserted_depth: depth };
    render_tactile(&state, &info)
}

fn stack_pair(older: &Image, current: &Image) -> Image {
    let reference = tactile_reference();
    let o = older.sub_clamped(&reference).expect("same shape");
    let c = current.sub_clamped(&reference).expect("same shape");
    quantized(&o.concat_channels(&c).expect("same spatial dims"))
}

/// Deterministic balanced probe set (exactly n/2 per label, alternating).
///
/// Contact: reference pair vs a contact at force U(2, 15) N. Rotation: a
/// contact pair whose current frame is rotated relative to the initial one;
/// the high variant separates U(0.10, 0.15) rad from <= 0.01, the low
/// variant U(0.03, 0.06) rad (harder margin). Rotation forces span
/// U(1, 12) N so low-amplitude blobs are in-distribution for the encoder.
pub fn make_probe_dataset(task: ProbeTask, n: usize, seed: u64) -> Vec<ProbeExample> {
    let mut rng: ChaCha8Rng = derive_rng(seed, &format!("probe:{}", task.tag()));
    let reference = tactile_reference();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 1;
        let example = match task {
            ProbeTask::Contact => {
                if positive {
                    let side =
                        if uniform_in(&mut rng, 0.0, 1.0) < 0.5 { Contact::RimLeft } else { Contact::RimRight };
                    let force = uniform_in(&mut rng, 2.0, 15.0);
                    let theta = uniform_in(&mut rng, -0.02, 0.02);
                    let slide = uniform_in(&mut rng, 0.0, 0.8);
                    let depth = uniform_in(&mut rng, 0.0, 2.0);
                    let current = render_contact(theta, slide, side, force, depth);
                    stack_pair(&reference, &current)
                } else {
                    stack_pair(&reference, &reference)
                }
            }
            ProbeTask::RotationHigh | ProbeTask::RotationLow => {
                let side =
                    if uniform_in(&mut rng, 0.0, 1.0) < 0.5 { Contact::RimLeft } else { Contact::RimRight };
                let force = uniform_in(&mut rng, 1.0, 12.0);
                let slide = uniform_in(&mut rng, 0.0, 0.5);
                let depth = uniform_in(&mut rng, 0.0, 2.0);
                let theta = if positive {
                    let (lo, hi) = match task {
                        ProbeTask::RotationHigh => (0.10, 0.15),
                        _ => (0.03, 0.06),
                    };
                    let mag = uniform_in(&mut rng, lo, hi);
                    if uniform_in(&mut rng, 0.0, 1.0) < 0.5 {
                        mag
                    } else {
                        -mag
                    }
                } else {
                    uniform_in(&mut rng, -0.01, 0.01)
                };
                let older = render_contact(0.0, slide, side, force, depth);
                let current = render_contact(theta, slide, side, force, depth);
                stack_pair(&older, &current)
            }
        };
        out.push(ProbeExample { frames: example, label: u8::from(positive) });
    }
    out
}

pub fn write_probe_dataset(path: &Path, task: ProbeTask, examples: &[ProbeExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROBE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let (h, wd, c) = match examples.first() {
        Some(e) => (e.frames.height, e.frames.width, e.frames.channels),
        None => (TACTILE_SIZE, TACTILE_SIZE, 6),
    };
    let header = format!("probe_task={}\nexamples={}\nh={h}\nw={wd}\nc={c}\n", task.tag(), examples.len());
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for e in examples {
        w.write_all(&[e.label])?;
        w.write_all(&e.frames.to_u8())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_probe_dataset(path: &Path) -> Result<(ProbeTask, Vec<ProbeExample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_or_fmt(&mut r, &mut magic, &mut offset, "magic", usize::MAX)?;
    if &magic != PROBE_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic (not a probe file)".into() });
    }
    let mut version = [0u8; 1];
    read_or_fmt(&mut r, &mut version, &mut offset, "version", usize::MAX)?;
    if version[0] != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("format version {}, expected {FORMAT_VERSION}", version[0]),
        });
    }
    let mut len4 = [0u8; 4];
    read_or_fmt(&mut r, &mut len4, &mut offset, "header length", usize::MAX)?;
    let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
    read_or_fmt(&mut r, &mut header, &mut offset, "header", usize::MAX)?;
    let text = String::from_utf8(header)
        .map_err(|_| Error::Format { offset, detail: "header is not utf-8".into() })?;
    let mut task = None;
    let mut n = 0usize;
    let (mut h, mut wd, mut c) = (0usize, 0usize, 0usize);
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "probe_task" => task = Some(ProbeTask::parse(v)?),
                "examples" => n = v.parse().unwrap_or(0),
                "h" => h = v.parse().unwrap_or(0),
                "w" => wd = v.parse().unwrap_or(0),
                "c" => c = v.parse().unwrap_or(0),
                _ => {
                    return Err(Error::Format {
                        offset,
                        detail: format!("unknown probe header key {k}"),
                    })
                }
            }
        }
    }
    let task =
        task.ok_or_else(|| Error::Format { offset, detail: "missing probe_task".into() })?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut label = [0u8; 1];
        read_or_fmt(&mut r, &mut label, &mut offset, "label", i)?;
        let mut bytes = vec![0u8; h * wd * c];
        read_or_fmt(&mut r, &mut bytes, &mut offset, "frames", i)?;
        out.push(ProbeExample { frames: Image::from_u8(h, wd, c, &bytes)?, label: label[0] });
    }
    Ok((task, out))
}
