//! Scripted expert: a finite-state insertion policy standing in for
//! teleoperated demonstrations.
//!
//! Phases: (1) drift laterally toward the hole while descending and
//! reducing tilt; (2) on rim contact, lift slightly (a visible retreat)
//! while sliding toward the side the contact indicates; (3) once inside,
//! center and push to depth. Speeds are tuned so clean episodes land in the
//! 60-90 step band at 10 Hz; Gaussian noise of `noise_scale` mm applies to
//! the translational dims only.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Contact, Env, SimState, TaskSpec, TraceStep};
use crate::error::Result;

/// Lateral speed toward the hole during approach, mm/step.
const APPROACH_LATERAL: f64 = 0.11;
/// Approach deadband: no lateral correction below this offset, mm.
const APPROACH_DEADBAND: f64 = 0.35;
/// Descent speed in free space, mm/step.
const APPROACH_DESCENT: f64 = 0.4;
/// Recovery slide per step, mm.
const RECOVER_SLIDE: f64 = 0.9;
/// Recovery lift per step, mm (exceeds the retreat threshold).
const RECOVER_LIFT: f64 = 0.7;
/// Insertion descent speed, mm/step.
const INSERT_DESCENT: f64 = 0.6;

/// One expert action for the current state.
pub fn scripted_expert(
    state: &SimState,
    task: &TaskSpec,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    let off = state.x - task.hole_x;
    let mut action = if state.z < 0.0 {
        // Inside the hole: push down, keep centered, remove tilt.
        [
            (-off * 0.3).clamp(-0.5, 0.5),
            -INSERT_DESCENT,
            (-state.theta * 0.5).clamp(-0.03, 0.03),
        ]
    } else if matches!(state.contact, Contact::RimLeft | Contact::RimRight) {
        // Rim contact: retreat a little and slide toward the side the
        // contact indicates (left rim blocked -> move right).
        let dir = if state.contact == Contact::RimLeft { 1.0 } else { -1.0 };
        [dir * RECOVER_SLIDE, RECOVER_LIFT, (-state.theta).clamp(-0.04, 0.04)]
    } else {
        // Free-space approach: drift toward the hole while descending.
        let dx = if off.abs() > APPROACH_DEADBAND {
            (-off).clamp(-APPROACH_LATERAL, APPROACH_LATERAL)
        } else {
            0.0
        };
        [dx, -APPROACH_DESCENT, (-state.theta).clamp(-0.05, 0.05)]
    };

    if noise_scale > 0.0 {
        let normal = Normal::new(0.0, noise_scale).expect("noise scale must be finite");
        action[0] += normal.sample(rng);
        action[1] += normal.sample(rng);
    }
    action
}

/// Roll the expert in an environment until seating or `max_steps`.
pub fn run_expert_episode(
    env: &mut Env,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<Vec<TraceStep>> {
    let mut trace = Vec::new();
    for _ in 0..max_steps {
        if env.state.done {
            break;
        }
        let action = scripted_expert(&env.state, &env.task, noise_scale, rng);
        let info = env.step(action)?;
        trace.push(TraceStep { state: env.state, info, action });
        if env.state.done {
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::sim::{episode_outcome, Outcome};

    #[test]
    fn centered_noiseless_insertion_is_direct() {
        let task = TaskSpec::by_name("circle3").unwrap();
        let mut env = Env::reset(task.clone(), 0).unwrap();
        env.state.x = task.hole_x;
        env.state.theta = 0.0;
        let mut rng = derive_rng(0, "expert");
        let trace = run_expert_episode(&mut env, 0.0, &mut rng, 300).unwrap();
        assert!(trace.iter().all(|s| s.info.contact_force == 0.0), "no rim contact expected");
        let m = episode_outcome(&task, &trace, 300);
        assert_eq!(m.outcome, Outcome::Success { direct: true });
    }

    #[test]
    fn expert_success_rate_and_outcome_mix() {
        let task = TaskSpec::by_name("circle3").unwrap();
        let mut successes = 0;
        let mut direct = 0;
        let mut recovered = 0;
        let n = 200;
        for i in 0..n {
            let mut env = Env::reset(task.clone(), 10_000 + i).unwrap();
            let mut rng = derive_rng(10_000 + i, "expert-noise");
            let trace = run_expert_episode(&mut env, 0.3, &mut rng, 300).unwrap();
            let m = episode_outcome(&task, &trace, 300);
            match m.outcome {
                Outcome::Success { direct: true } => {
                    successes += 1;
                    direct += 1;
                }
                Outcome::Success { direct: false } => {
                    successes += 1;
                    recovered += 1;
                }
                Outcome::Failure => {}
            }
        }
        assert!(successes * 100 >= n * 98, "expert success {successes}/{n}");
        assert!(direct > 0, "no direct insertions in {n} episodes");
        assert!(recovered > 0, "no recovered insertions in {n} episodes");
    }

    #[test]
    fn outcome_mix_at_full_offset() {
        // Fixed 8 mm offset: the lateral drift races the descent, so both
        // outcome classes must appear under action noise.
        let task = TaskSpec::by_name("circle3").unwrap();
        let mut direct = 0;
        let mut recovered = 0;
        for i in 0..200 {
            let mut env = Env::reset(task.clone(), 5_000 + i).unwrap();
            env.state.x = task.hole_x + 8.0;
            let mut rng = derive_rng(5_000 + i, "expert-offset8");
            let trace = run_expert_episode(&mut env, 0.3, &mut rng, 300).unwrap();
            match episode_outcome(&task, &trace, 300).outcome {
                Outcome::Success { direct: true } => direct += 1,
                Outcome::Success { direct: false } => recovered += 1,
                Outcome::Failure => {}
            }
        }
        assert!(direct > 0, "expected some direct insertions at 8 mm offset");
        assert!(recovered > 0, "expected some recovered insertions at 8 mm offset");
    }

    #[test]
    fn clearance_monotonicity_for_noiseless_expert() {
        // Fixed 5 mm initial offset, zero noise, same seeds: success at
        // 2 mm clearance implies success at 3 mm.
        for seed in 0..30 {
            let run = |task_name: &str| {
                let task = TaskSpec::by_name(task_name).unwrap();
                let mut env = Env::reset(task.clone(), seed).unwrap();
                env.state.x = task.hole_x + 5.0;
                env.state.theta = 0.05;
                let mut rng = derive_rng(seed, "expert-mono");
                let trace = run_expert_episode(&mut env, 0.0, &mut rng, 300).unwrap();
                episode_outcome(&task, &trace, 300).outcome.is_success()
            };
            let tight = run("circle2");
            let loose = run("circle3");
            if tight {
                assert!(loose, "seed {seed}: success at 2 mm but failure at 3 mm");
            }
        }
    }

    #[test]
    fn episode_lengths_in_demo_band() {
        let task = TaskSpec::by_name("circle2").unwrap();
        let mut lengths = Vec::new();
        for i in 0..60 {
            let mut env = Env::reset(task.clone(), 20_000 + i).unwrap();
            let mut rng = derive_rng(20_000 + i, "expert-len");
            let trace = run_expert_episode(&mut env, 0.3, &mut rng, 300).unwrap();
            let m = episode_outcome(&task, &trace, 300);
            if m.outcome.is_success() {
                lengths.push(m.steps as f64);
            }
        }
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!(
            (40.0..=110.0).contains(&mean),
            "mean successful episode length {mean} outside rough band"
        );
    }
}
