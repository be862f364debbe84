//! Synthetic camera and tactile-gel rendering, plus camera degradation.
//!
//! The RGB view is an orthographic side view at 2 mm/pixel with hard pixel
//! thresholds (no anti-aliasing), so sub-pixel misalignment is genuinely
//! invisible to the policy: millimetre-scale precision has to come from
//! touch. The base is drawn over anything below the rim plane, occluding
//! the contact interface once the tip passes the rim. A per-episode camera
//! mount jitter (drawn at reset) randomizes the pixel-grid phase.
//!
//! The tactile image is a fixed reference pattern plus, under contact, a
//! Gaussian blob at the contact side, elongated along the shear direction,
//! rotated by the peg tilt, with peak intensity `min(F / F_sat, 1)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

use super::{Contact, PegShape, SimState, StepInfo, TaskSpec, FORCE_SAT};

pub const RGB_SIZE: usize = 48;
/// World width covered by the RGB view, mm (2 mm per pixel).
pub const RGB_VIEW_MM: f64 = 96.0;
pub const TACTILE_SIZE: usize = 32;

/// Visible peg length above the tip, mm.
const PEG_LENGTH_MM: f64 = 26.0;

/// Lateral shift of the gel contact point per radian of peg tilt, px. The
/// peg pivots in the grip, so tilt slides the contact edge across the pad.
pub const GEL_TILT_GAIN: f64 = 27.0;

fn peg_color(shape: PegShape) -> [f64; 3] {
    match shape {
        PegShape::Circle => [0.85, 0.25, 0.20],
        PegShape::Square => [0.20, 0.75, 0.30],
        PegShape::Pentagon => [0.25, 0.35, 0.85],
        PegShape::ConnectorA => [0.85, 0.80, 0.20],
        PegShape::ConnectorB => [0.80, 0.25, 0.80],
    }
}

const BG: [f64; 3] = [0.10, 0.11, 0.14];
const BASE: [f64; 3] = [0.45, 0.46, 0.50];
const SLOT: [f64; 3] = [0.22, 0.22, 0.26];
const GRIPPER: [f64; 3] = [0.62, 0.62, 0.64];

/// Is the world point inside the peg body? Peg frame: tip at the pose
/// origin, axis along +z rotated by theta.
fn in_peg(task: &TaskSpec, state: &SimState, px: f64, pz: f64) -> bool {
    let w = task.peg_half_width();
    let (s, c) = state.theta.sin_cos();
    let rx = px - state.x;
    let rz = pz - state.z;
    // Rotate into the peg frame (u across, v along the axis).
    let u = c * rx - s * rz;
    let v = s * rx + c * rz;
    if !(0.0..=PEG_LENGTH_MM).contains(&v) {
        return false;
    }
    match task.shape {
        PegShape::Square | PegShape::ConnectorA | PegShape::ConnectorB => u.abs() <= w,
        PegShape::Circle => {
            // Rounded tip: interpolate the half-width near the tip.
            if v < w {
                let dz = w - v;
                u.abs() <= (w * w - dz * dz).max(0.0).sqrt()
            } else {
                u.abs() <= w
            }
        }
        PegShape::Pentagon => {
            // Tapered tip over the first 5 mm.
            let frac = (v / 5.0).min(1.0);
            u.abs() <= w * (0.45 + 0.55 * frac)
        }
    }
}

fn in_gripper(task: &TaskSpec, state: &SimState, px: f64, pz: f64) -> bool {
    let w = task.peg_half_width();
    let (s, c) = state.theta.sin_cos();
    let rx = px - state.x;
    let rz = pz - state.z;
    let u = c * rx - s * rz;
    let v = s * rx + c * rz;
    // Two finger pads near the peg top plus a crossbar above.
    let fingers =
        (PEG_LENGTH_MM - 7.0..=PEG_LENGTH_MM).contains(&v) && (w..=w + 2.5).contains(&u.abs());
    let bar = (PEG_LENGTH_MM..=PEG_LENGTH_MM + 3.0).contains(&v) && u.abs() <= w + 2.5;
    fingers || bar
}

/// Orthographic side view, hard-thresholded at pixel centers.
pub fn render_rgb(task: &TaskSpec, state: &SimState) -> Image {
    let mut img = Image::zeros(RGB_SIZE, RGB_SIZE, 3);
    let px_mm = RGB_VIEW_MM / RGB_SIZE as f64;
    let (cl, cr) = task.clearances();
    let w = task.peg_half_width();
    let slot_lo = task.hole_x - w - cl;
    let slot_hi = task.hole_x + w + cr;
    let floor = -task.hole_depth();

    for r in 0..RGB_SIZE {
        // Row 0 is the top of the view; rim plane sits 3/4 of the way down.
        let z = 72.0 - (r as f64 + 0.5) * px_mm;
        for c in 0..RGB_SIZE {
            let x = task.hole_x - RGB_VIEW_MM / 2.0 + (c as f64 + 0.5) * px_mm
                + state.camera_jitter;
            let color = if z < 0.0 {
                // Base block occludes everything below the rim plane.
                if x >= slot_lo && x <= slot_hi && z >= floor {
                    SLOT
                } else {
                    BASE
                }
            } else if in_peg(task, state, x, z) {
                peg_color(task.shape)
            } else if in_gripper(task, state, x, z) {
                GRIPPER
            } else {
                BG
            };
            for ch in 0..3 {
                img.set(r, c, ch, color[ch]);
            }
        }
    }
    img
}

/// Fixed gel background pattern.
pub fn tactile_reference() -> Image {
    let mut img = Image::zeros(TACTILE_SIZE, TACTILE_SIZE, 3);
    let base = [0.35, 0.40, 0.48];
    for r in 0..TACTILE_SIZE {
        for c in 0..TACTILE_SIZE {
            let wave = (2.0 * std::f64::consts::PI * r as f64 / 8.0).sin()
                * (2.0 * std::f64::consts::PI * c as f64 / 8.0).sin();
            for ch in 0..3 {
                img.set(r, c, ch, (base[ch] + 0.06 * wave).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Gel image for the current contact. Equals the reference pattern exactly
/// when there is no contact force.
pub fn render_tactile(state: &SimState, info: &StepInfo) -> Image {
    let mut img = tactile_reference();
    if info.contact_force <= 0.0 || info.contact == Contact::None {
        return img;
    }
    let intensity = (info.contact_force / FORCE_SAT).min(1.0);

    // Blob center: contact side maps left/right on the gel, tilt slides the
    // contact point across the pad, insertion depth pushes it down the gel.
    let side = match info.contact {
        Contact::RimLeft => -1.0,
        Contact::RimRight => 1.0,
        _ => 0.0,
    };
    let center_c = 15.5 + side * 6.5 + state.theta * GEL_TILT_GAIN;
    let center_r = 13.5 + info.inserted_depth.clamp(0.0, 10.0) * 0.5;

    // Elongated along the shear (lateral slide) direction, rotated by tilt.
    let slide = state.vx.abs();
    let sigma_major = 5.0 * (1.0 + 0.4 * (slide / 1.0).min(1.5));
    let sigma_minor = 2.2;
    let (s, c) = state.theta.sin_cos();

    let tint = [0.55, 0.35, 0.15];
    for r in 0..TACTILE_SIZE {
        for col in 0..TACTILE_SIZE {
            let dr = r as f64 - center_r;
            let dc = col as f64 - center_c;
            let du = c * dc + s * dr;
            let dv = -s * dc + c * dr;
            let q = (du / sigma_major) * (du / sigma_major)
                + (dv / sigma_minor) * (dv / sigma_minor);
            let gain = intensity * (-0.5 * q).exp();
            if gain > 0.0 {
                for ch in 0..3 {
                    let v = img.get(r, col, ch) + gain * tint[ch];
                    img.set(r, col, ch, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CameraMode {
    Clean,
    /// 80% dimmed lighting: all pixels scaled by 0.2.
    Dim80,
    /// Partially frozen stream: each new frame is delivered with
    /// probability 0.5, otherwise the previous delivered frame repeats.
    Freeze50,
}

impl CameraMode {
    pub fn parse(s: &str) -> crate::error::Result<Self> {
        match s {
            "clean" => Ok(CameraMode::Clean),
            "dim80" => Ok(CameraMode::Dim80),
            "freeze50" => Ok(CameraMode::Freeze50),
            other => Err(crate::error::Error::Config(format!("unknown camera mode '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            CameraMode::Clean => "clean",
            CameraMode::Dim80 => "dim80",
            CameraMode::Freeze50 => "freeze50",
        }
    }
}

/// Apply a camera degradation. `last_delivered` is the previously delivered
/// frame; the first frame is always delivered.
pub fn degrade_camera(
    frame: &Image,
    mode: CameraMode,
    rng: &mut ChaCha8Rng,
    last_delivered: Option<&Image>,
) -> Image {
    match mode {
        CameraMode::Clean => frame.clone(),
        CameraMode::Dim80 => frame.scale(0.2),
        CameraMode::Freeze50 => match last_delivered {
            None => frame.clone(),
            Some(prev) => {
                if rng.random_range(0.0..1.0) < 0.5 {
                    frame.clone()
                } else {
                    prev.clone()
                }
            }
        },
    }
}
