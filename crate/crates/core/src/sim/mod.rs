//! Deterministic 2-D peg-insertion environment.
//!
//! Planar abstraction (x lateral, z vertical, theta tilt) of an insertion
//! task: a rigid base with a vertical aperture at the rim plane z = 0, a peg
//! held in-hand starting above the hole with randomized lateral offset and
//! tilt. Kinematic stepping with collision projection: attempted poses are
//! pushed out of the base geometry and the (capped) attempted penetration
//! yields a spring-plus-viscous contact force. Everything is a pure function
//! of `(task, seed, actions)`, bit-identical across runs.
//!
//! Units: millimetres, radians, Newtons, 10 Hz control (dt = 0.1 s).

pub mod expert;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::uniform_in;
use crate::rng::derive_rng;

pub const DT: f64 = 0.1;
pub const MAX_DX_MM: f64 = 2.0;
pub const MAX_DZ_MM: f64 = 2.0;
pub const MAX_DTHETA_RAD: f64 = 0.05;

/// Contact spring constant, N/m.
pub const STIFFNESS: f64 = 500.0;
/// Viscous force coefficient, N·s/m.
pub const VISCOUS: f64 = 5.0;
/// Coulomb-style sliding resistance on the rim (fraction of commanded slide
/// lost while pressing).
pub const FRICTION_MU: f64 = 0.3;
/// Penetration cap for force computation, mm.
pub const PENETRATION_CAP_MM: f64 = 2.0;
/// Tactile saturation force, N.
pub const FORCE_SAT: f64 = 20.0;
/// Effective half-width growth per unit |sin theta|, mm (tilt lever arm).
pub const TILT_LEVER_MM: f64 = 12.0;
/// Extra hole depth below the required insertion depth, mm.
pub const HOLE_DEPTH_MARGIN_MM: f64 = 2.0;
/// Grasp start height of the peg tip above the rim plane, mm.
pub const START_HEIGHT_MM: f64 = 18.0;
/// Reset ranges.
pub const OFFSET_RANGE_MM: f64 = 8.0;
pub const TILT_RANGE_RAD: f64 = 0.15;
/// Per-episode camera mount jitter, mm (sub-pixel at the 2 mm/px render).
pub const CAMERA_JITTER_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PegShape {
    Circle,
    Square,
    Pentagon,
    /// Keyed asymmetric connector, USB-like difficulty.
    ConnectorA,
    /// Keyed asymmetric connector, HDMI-like difficulty.
    ConnectorB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub shape: PegShape,
    /// Radial clearance, mm (symmetric for pegs; connectors are keyed, see
    /// [`TaskSpec::clearances`]).
    pub clearance: f64,
    /// Hole center, world coordinates (rim plane is z = hole_z).
    pub hole_x: f64,
    pub hole_z: f64,
    pub insertion_depth_required: f64,
}

impl TaskSpec {
    pub fn by_name(name: &str) -> Result<TaskSpec> {
        let (shape, clearance) = match name {
            "circle2" => (PegShape::Circle, 2.0),
            "circle3" => (PegShape::Circle, 3.0),
            "square2" => (PegShape::Square, 2.0),
            "square3" => (PegShape::Square, 3.0),
            "pentagon2" => (PegShape::Pentagon, 2.0),
            "pentagon3" => (PegShape::Pentagon, 3.0),
            "conn_a" => (PegShape::ConnectorA, 1.0),
            "conn_b" => (PegShape::ConnectorB, 1.0),
            other => return Err(Error::Config(format!("unknown task '{other}'"))),
        };
        Ok(TaskSpec {
            name: name.to_string(),
            shape,
            clearance,
            hole_x: 0.0,
            hole_z: 0.0,
            insertion_depth_required: 10.0,
        })
    }

    pub fn all_names() -> &'static [&'static str] {
        &["circle2", "circle3", "square2", "square3", "pentagon2", "pentagon3", "conn_a", "conn_b"]
    }

    pub fn instruction(&self) -> &'static str {
        match self.shape {
            PegShape::Circle => "insert the circle peg into the base",
            PegShape::Square => "insert the square peg into the base",
            PegShape::Pentagon => "insert the pentagon peg into the base",
            PegShape::ConnectorA => "plug the a connector into the port",
            PegShape::ConnectorB => "plug the b connector into the port",
        }
    }

    pub fn peg_half_width(&self) -> f64 {
        match self.shape {
            PegShape::Circle => 6.0,
            PegShape::Square => 7.0,
            PegShape::Pentagon => 6.5,
            PegShape::ConnectorA => 5.0,
            PegShape::ConnectorB => 5.5,
        }
    }

    /// (left, right) clearances in mm. Connectors are keyed: the right side
    /// is tighter, standing in for the asymmetric plug geometry.
    pub fn clearances(&self) -> (f64, f64) {
        match self.shape {
            PegShape::ConnectorA | PegShape::ConnectorB => (self.clearance, 0.5 * self.clearance),
            _ => (self.clearance, self.clearance),
        }
    }

    pub fn hole_depth(&self) -> f64 {
        self.insertion_depth_required + HOLE_DEPTH_MARGIN_MM
    }

    fn validate(&self) -> Result<()> {
        if self.clearance <= 0.0 {
            return Err(Error::Config("clearance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Contact {
    None,
    RimLeft,
    RimRight,
    Seated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Peg tip center, lateral, mm (world).
    pub x: f64,
    /// Peg tip height above the rim plane, mm; negative while inserted.
    pub z: f64,
    /// Tilt, rad.
    pub theta: f64,
    /// Realized per-step velocities (mm and rad per step).
    pub vx: f64,
    pub vz: f64,
    pub vtheta: f64,
    pub contact: Contact,
    pub time_steps: u32,
    pub done: bool,
    /// Per-episode camera mount offset, mm.
    pub camera_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Contact force magnitude, N. Zero iff no contact this step.
    pub contact_force: f64,
    pub contact: Contact,
    /// Current insertion depth, mm.
    pub inserted_depth: f64,
}

impl StepInfo {
    pub fn free() -> Self {
        StepInfo { contact_force: 0.0, contact: Contact::None, inserted_depth: 0.0 }
    }
}

/// One environment instance. All randomness is consumed at reset time, so
/// stepping is a pure fold over the action sequence.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: TaskSpec,
    pub state: SimState,
}

impl Env {
    /// Seeded reset: peg in hand above the hole with lateral offset
    /// U(-8, 8) mm, tilt U(-0.15, 0.15) rad, camera jitter U(-1, 1) mm.
    pub fn reset(task: TaskSpec, seed: u64) -> Result<Env> {
        task.validate()?;
        let mut rng = derive_rng(seed, &format!("sim:{}", task.name));
        let offset = uniform_in(&mut rng, -OFFSET_RANGE_MM, OFFSET_RANGE_MM);
        let tilt = uniform_in(&mut rng, -TILT_RANGE_RAD, TILT_RANGE_RAD);
        let jitter = uniform_in(&mut rng, -CAMERA_JITTER_MM, CAMERA_JITTER_MM);
        let state = SimState {
            x: task.hole_x + offset,
            z: START_HEIGHT_MM,
            theta: tilt,
            vx: 0.0,
            vz: 0.0,
            vtheta: 0.0,
            contact: Contact::None,
            time_steps: 0,
            done: false,
            camera_jitter: jitter,
        };
        Ok(Env { task, state })
    }

    /// Advance one control step. Returns the contact summary.
    pub fn step(&mut self, action: [f64; 3]) -> Result<StepInfo> {
        let (next, info) = step_dynamics(&self.task, &self.state, action)?;
        self.state = next;
        Ok(info)
    }

}

/// Effective half-width of the tilted peg footprint.
fn effective_half_width(task: &TaskSpec, theta: f64) -> f64 {
    task.peg_half_width() + TILT_LEVER_MM * theta.sin().abs()
}

/// Admissible range of the peg center inside the aperture at tilt `theta`;
/// empty (lo > hi) when the tilt binds completely.
fn center_bounds(task: &TaskSpec, theta: f64) -> (f64, f64) {
    let w = task.peg_half_width();
    let (cl, cr) = task.clearances();
    let we = effective_half_width(task, theta);
    (task.hole_x - w - cl + we, task.hole_x + w + cr - we)
}

/// Kinematic update with collision projection. Pure function of its inputs.
pub fn step_dynamics(
    task: &TaskSpec,
    state: &SimState,
    action: [f64; 3],
) -> Result<(SimState, StepInfo)> {
    if state.done {
        return Err(Error::State("episode already terminated".into()));
    }
    let dx = action[0].clamp(-MAX_DX_MM, MAX_DX_MM);
    let dz = action[1].clamp(-MAX_DZ_MM, MAX_DZ_MM);
    let dth = action[2].clamp(-MAX_DTHETA_RAD, MAX_DTHETA_RAD);

    let x0 = state.x;
    let z0 = state.z;
    let th0 = state.theta;
    let x_att = x0 + dx;
    let z_att = z0 + dz;
    let th_att = th0 + dth;

    let mut x1 = x_att;
    let mut z1 = z_att;
    let mut th1 = th_att;
    let mut contact = Contact::None;
    let mut penetration = 0.0f64;

    if z_att >= 0.0 && z0 >= 0.0 {
        // Free flight above the rim plane.
    } else if z0 >= 0.0 {
        // Descending through the rim plane: entry test at the attempted pose.
        let (lo, hi) = center_bounds(task, th_att);
        if lo <= hi && x_att >= lo && x_att <= hi {
            // Clean entry; the floor caps the descent.
            let floor = -task.hole_depth();
            if z1 < floor {
                penetration += (floor - z1).min(PENETRATION_CAP_MM);
                z1 = floor;
                contact = side_of(task, x1, th1);
            }
        } else {
            // Blocked: the tip lands on the rim top and may slide laterally
            // against Coulomb-style resistance.
            penetration += (-z_att).min(PENETRATION_CAP_MM);
            z1 = 0.0;
            x1 = x0 + dx * (1.0 - FRICTION_MU);
            contact = side_of(task, x_att, th_att);
        }
    } else {
        // Already inside the hole: project tilt, then the lateral position,
        // against the walls; vertical motion is free up to the floor.
        let (cl, cr) = task.clearances();
        let max_sin = ((cl + cr) / (2.0 * TILT_LEVER_MM)).min(1.0);
        if th1.sin().abs() > max_sin {
            let th_lim = max_sin.asin();
            let projected = th_lim.copysign(th1);
            penetration +=
                (TILT_LEVER_MM * (th1.sin().abs() - max_sin)).min(PENETRATION_CAP_MM);
            contact = if th1 > 0.0 { Contact::RimRight } else { Contact::RimLeft };
            th1 = projected;
        }
        let (lo, hi) = center_bounds(task, th1);
        if x1 < lo {
            penetration += (lo - x1).min(PENETRATION_CAP_MM);
            x1 = lo;
            contact = Contact::RimLeft;
        } else if x1 > hi {
            penetration += (x1 - hi).min(PENETRATION_CAP_MM);
            x1 = hi;
            contact = Contact::RimRight;
        }
        let floor = -task.hole_depth();
        if z1 < floor {
            penetration += (floor - z1).min(PENETRATION_CAP_MM);
            z1 = floor;
            if contact == Contact::None {
                contact = side_of(task, x1, th1);
            }
        }
    }
    let vx = x1 - x0;
    let vz = z1 - z0;
    let vth = th1 - th0;
    let inserted = (-z1).max(0.0);

    // Force: spring on the capped attempted penetration plus a viscous term
    // on the realized translation speed, only while in contact.
    let force = if contact != Contact::None {
        let delta_m = penetration.min(PENETRATION_CAP_MM) / 1000.0;
        let speed_m_s = (vx * vx + vz * vz).sqrt() / 1000.0 / DT;
        STIFFNESS * delta_m + VISCOUS * speed_m_s
    } else {
        0.0
    };

    let mut done = false;
    let mut final_contact = contact;
    if inserted >= task.insertion_depth_required {
        final_contact = Contact::Seated;
        done = true;
    }

    let next = SimState {
        x: x1,
        z: z1,
        theta: th1,
        vx,
        vz,
        vtheta: vth,
        contact: final_contact,
        time_steps: state.time_steps + 1,
        done,
        camera_jitter: state.camera_jitter,
    };
    let info = StepInfo {
        contact_force: force,
        contact: final_contact,
        inserted_depth: inserted,
    };
    Ok((next, info))
}

fn side_of(task: &TaskSpec, x: f64, theta: f64) -> Contact {
    let off = x - task.hole_x;
    if off > 0.0 {
        Contact::RimRight
    } else if off < 0.0 {
        Contact::RimLeft
    } else if theta >= 0.0 {
        Contact::RimRight
    } else {
        Contact::RimLeft
    }
}

/// One recorded step of a rollout.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep {
    pub state: SimState,
    pub info: StepInfo,
    pub action: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success { direct: bool },
    Failure,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Success { .. })
    }

    pub fn is_direct(self) -> bool {
        matches!(self, Outcome::Success { direct: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub outcome: Outcome,
    pub max_force: f64,
    pub steps: usize,
    pub time_s: f64,
}

/// Threshold for a retreat event: a rise of more than this many mm in one
/// step, after first contact.
pub const RETREAT_THRESHOLD_MM: f64 = 0.5;

/// Classify a completed trace. Success requires reaching the insertion
/// depth within `max_steps`; a success is direct when no retreat event
/// occurred after the first contact.
pub fn episode_outcome(
    task: &TaskSpec,
    trace: &[TraceStep],
    max_steps: usize,
) -> EpisodeMetrics {
    let mut success_at: Option<usize> = None;
    let mut contact_seen = false;
    let mut retreat = false;
    let mut max_force = 0.0f64;
    let mut prev_z = None;

    for (i, step) in trace.iter().take(max_steps).enumerate() {
        max_force = max_force.max(step.info.contact_force);
        if let Some(pz) = prev_z {
            if contact_seen && step.state.z - pz > RETREAT_THRESHOLD_MM {
                retreat = true;
            }
        }
        if step.info.contact != Contact::None {
            contact_seen = true;
        }
        prev_z = Some(step.state.z);
        if step.info.inserted_depth >= task.insertion_depth_required {
            success_at = Some(i + 1);
            break;
        }
    }

    let steps = success_at.unwrap_or_else(|| trace.len().min(max_steps));
    let outcome = match success_at {
        Some(_) => Outcome::Success { direct: !retreat },
        None => Outcome::Failure,
    };
    EpisodeMetrics { outcome, max_force, steps, time_s: steps as f64 * DT }
}
