//! Layered drive schedules and hardware task documents.
//!
//! A waveform is parameterized by five durations (ns): three resonant drive
//! layers `tau0, tau1, tau2` interleaved with two free-evolution gaps
//! `t0, t1`. Hardware admits it when every duration exceeds 5 ns and the
//! total stays under 500 ns. The built schedule is piecewise constant with
//! the drive phase fixed at pi/2 and zero detuning; the mixing angle of a
//! drive layer is `theta_i = omega0 * tau_i`.
//!
//! For interchange with hardware-facing tooling, a schedule plus its target
//! register can be emitted as a task document: canonical JSON in SI units
//! (meters, seconds, rad/s) under the schema tag `qek-task/1`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::embedding::{Register, RegisterConstraints};
use crate::error::{Error, Result};

pub const MIN_SEGMENT_NS: f64 = 5.0;
pub const MAX_TOTAL_NS: f64 = 500.0;
pub const OMEGA_MAX_RAD_PER_US: f64 = 15.8;
pub const TASK_SCHEMA_VERSION: &str = "qek-task/1";

/// Five-layer waveform durations, all in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformParams {
    pub tau0: f64,
    pub t0: f64,
    pub tau1: f64,
    pub t1: f64,
    pub tau2: f64,
}

impl WaveformParams {
    pub fn new(tau0: f64, t0: f64, tau1: f64, t1: f64, tau2: f64) -> Result<Self> {
        Self::from_array([tau0, t0, tau1, t1, tau2])
    }

    pub fn from_array(values: [f64; 5]) -> Result<Self> {
        let violations = Self::constraint_violations(&values);
        if violations.is_empty() {
            Ok(WaveformParams {
                tau0: values[0],
                t0: values[1],
                tau1: values[2],
                t1: values[3],
                tau2: values[4],
            })
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// One message per violated constraint; empty iff `values` is admissible.
    pub fn constraint_violations(values: &[f64; 5]) -> Vec<String> {
        const NAMES: [&str; 5] = ["tau0", "t0", "tau1", "t1", "tau2"];
        let mut out = Vec::new();
        for (name, &v) in NAMES.iter().zip(values) {
            if !v.is_finite() || v <= MIN_SEGMENT_NS {
                out.push(format!("{name} = {v} ns must exceed {MIN_SEGMENT_NS} ns"));
            }
        }
        let total: f64 = values.iter().sum();
        if !(total < MAX_TOTAL_NS) {
            out.push(format!("total {total} ns must stay under {MAX_TOTAL_NS} ns"));
        }
        out
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.tau0, self.t0, self.tau1, self.t1, self.tau2]
    }

    pub fn total_ns(&self) -> f64 {
        self.as_array().iter().sum()
    }

    /// Drive-layer durations only.
    pub fn mixing_durations_ns(&self) -> [f64; 3] {
        [self.tau0, self.tau1, self.tau2]
    }
}

/// One piecewise-constant slice of a schedule. Rates are rad/us, durations us.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_us: f64,
    pub omega_rad_per_us: f64,
    pub phase_rad: f64,
    pub detuning_rad_per_us: f64,
}

impl Segment {
    pub fn is_drive(&self) -> bool {
        self.omega_rad_per_us > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub segments: Vec<Segment>,
}

impl PulseSchedule {
    pub fn total_duration_us(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_us).sum()
    }

    /// `omega * duration` for each drive segment, in radians.
    pub fn mixing_angles_rad(&self) -> Vec<f64> {
        self.segments
            .iter()
            .filter(|s| s.is_drive())
            .map(|s| s.omega_rad_per_us * s.duration_us)
            .collect()
    }
}

/// Expand waveform durations into the five-segment schedule
/// drive/wait/drive/wait/drive with phase pi/2 and zero detuning.
pub fn build_schedule(params: &WaveformParams, omega0_rad_per_us: f64) -> Result<PulseSchedule> {
    if !(omega0_rad_per_us.is_finite() && omega0_rad_per_us > 0.0) {
        return Err(Error::Config(format!(
            "omega0 must be positive, got {omega0_rad_per_us}"
        )));
    }
    // Re-check the constraint set; params may have been built directly.
    let violations = WaveformParams::constraint_violations(&params.as_array());
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let drive = |ns: f64| Segment {
        duration_us: ns * 1e-3,
        omega_rad_per_us: omega0_rad_per_us,
        phase_rad: FRAC_PI_2,
        detuning_rad_per_us: 0.0,
    };
    let wait = |ns: f64| Segment {
        duration_us: ns * 1e-3,
        omega_rad_per_us: 0.0,
        phase_rad: 0.0,
        detuning_rad_per_us: 0.0,
    };
    Ok(PulseSchedule {
        segments: vec![
            drive(params.tau0),
            wait(params.t0),
            drive(params.tau1),
            wait(params.t1),
            drive(params.tau2),
        ],
    })
}

/// Hardware envelope a task must fit into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareLimits {
    pub omega_max_rad_per_us: f64,
    pub max_total_ns: f64,
    pub min_segment_ns: f64,
    pub register: RegisterConstraints,
}

impl HardwareLimits {
    pub fn standard(register: RegisterConstraints) -> Self {
        HardwareLimits {
            omega_max_rad_per_us: OMEGA_MAX_RAD_PER_US,
            max_total_ns: MAX_TOTAL_NS,
            min_segment_ns: MIN_SEGMENT_NS,
            register,
        }
    }
}

/// Violation list from checking a schedule and register against `limits`.
/// Every message pairs the measured value with the allowed bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskValidation {
    pub violations: Vec<String>,
}

impl TaskValidation {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_task(
    schedule: &PulseSchedule,
    register: &Register,
    limits: &HardwareLimits,
) -> TaskValidation {
    let mut violations = Vec::new();

    if schedule.segments.is_empty() {
        violations.push("schedule has no segments".to_string());
    }
    for (i, s) in schedule.segments.iter().enumerate() {
        let ns = s.duration_us * 1e3;
        if !(ns.is_finite() && ns > limits.min_segment_ns) {
            violations.push(format!(
                "segment {i} duration {ns} ns must exceed {} ns",
                limits.min_segment_ns
            ));
        }
        if !(s.omega_rad_per_us.is_finite()
            && s.omega_rad_per_us >= 0.0
            && s.omega_rad_per_us <= limits.omega_max_rad_per_us)
        {
            violations.push(format!(
                "segment {i} omega {} rad/us outside [0, {}]",
                s.omega_rad_per_us, limits.omega_max_rad_per_us
            ));
        }
        if !s.phase_rad.is_finite() || !s.detuning_rad_per_us.is_finite() {
            violations.push(format!("segment {i} has non-finite phase or detuning"));
        }
    }
    let total_ns = schedule.total_duration_us() * 1e3;
    if !(total_ns < limits.max_total_ns) {
        violations.push(format!(
            "total duration {total_ns} ns must stay under {} ns",
            limits.max_total_ns
        ));
    }

    let c = &limits.register;
    for (i, p) in register.positions.iter().enumerate() {
        let [x, y] = *p;
        if x < 0.0 || x > c.width_um || y < 0.0 || y > c.height_um {
            violations.push(format!(
                "atom {i} at ({x}, {y}) um outside field {} x {} um",
                c.width_um, c.height_um
            ));
        }
        if c.row_spacing_um > 0.0 {
            let k = (y / c.row_spacing_um).round();
            if (y - k * c.row_spacing_um).abs() > crate::embedding::VERIFY_EPS_UM {
                violations.push(format!(
                    "atom {i} at y = {y} um off the {} um row grid",
                    c.row_spacing_um
                ));
            }
        }
    }
    for i in 0..register.num_atoms() {
        for j in (i + 1)..register.num_atoms() {
            let d = register.distance(i, j);
            if d < c.min_pair_distance_um - crate::embedding::VERIFY_EPS_UM {
                violations.push(format!(
                    "atoms {i} and {j} at {d} um closer than {} um",
                    c.min_pair_distance_um
                ));
            }
        }
    }

    TaskValidation { violations }
}

/// Bandwidth model: replace each change of drive amplitude with a staircase
/// of `steps_per_ramp` constant slices linearly interpolating omega over
/// `ramp_ns`, carved out of the segment that follows the change. Total
/// duration is preserved. Not used by the main pipeline.
pub fn smooth_schedule(schedule: &PulseSchedule, ramp_ns: f64, steps_per_ramp: usize) -> PulseSchedule {
    assert!(ramp_ns >= 0.0 && steps_per_ramp >= 1);
    let ramp_us = ramp_ns * 1e-3;
    let mut out = Vec::new();
    let mut prev_omega = 0.0; // the drive is off before the schedule starts
    for s in &schedule.segments {
        let jump = s.omega_rad_per_us - prev_omega;
        let ramp = ramp_us.min(s.duration_us / 2.0);
        if jump.abs() > 0.0 && ramp > 0.0 {
            let dt = ramp / steps_per_ramp as f64;
            for k in 0..steps_per_ramp {
                // Midpoint of each staircase slice.
                let f = (k as f64 + 0.5) / steps_per_ramp as f64;
                out.push(Segment {
                    duration_us: dt,
                    omega_rad_per_us: prev_omega + jump * f,
                    phase_rad: s.phase_rad,
                    detuning_rad_per_us: s.detuning_rad_per_us,
                });
            }
            out.push(Segment {
                duration_us: s.duration_us - ramp,
                ..*s
            });
        } else {
            out.push(*s);
        }
        prev_omega = s.omega_rad_per_us;
    }
    PulseSchedule { segments: out }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegister {
    pub positions_m: Vec<[f64; 2]>,
    pub blockade_radius_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSegment {
    pub duration_s: f64,
    pub omega_rad_per_s: f64,
    pub phase_rad: f64,
    pub detuning_rad_per_s: f64,
}

/// Hardware-facing task: schedule and register in SI units plus shot count.
/// Serialization is canonical (fixed key order, shortest float repr), so
/// emit -> parse -> emit is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub schema_version: String,
    pub register: TaskRegister,
    pub schedule: Vec<TaskSegment>,
    pub n_shots: u64,
}

impl TaskDocument {
    pub fn new(schedule: &PulseSchedule, register: &Register, n_shots: u64) -> Result<Self> {
        if n_shots == 0 {
            return Err(Error::Config("n_shots must be >= 1".into()));
        }
        Ok(TaskDocument {
            schema_version: TASK_SCHEMA_VERSION.to_string(),
            register: TaskRegister {
                positions_m: register
                    .positions
                    .iter()
                    .map(|p| [p[0] * 1e-6, p[1] * 1e-6])
                    .collect(),
                blockade_radius_m: register.blockade_radius_um * 1e-6,
            },
            schedule: schedule
                .segments
                .iter()
                .map(|s| TaskSegment {
                    duration_s: s.duration_us * 1e-6,
                    omega_rad_per_s: s.omega_rad_per_us * 1e6,
                    phase_rad: s.phase_rad,
                    detuning_rad_per_s: s.detuning_rad_per_us * 1e6,
                })
                .collect(),
            n_shots,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("task document serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TaskDocument = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: "<task document>".into(),
            message: e.to_string(),
        })?;
        if doc.schema_version != TASK_SCHEMA_VERSION {
            return Err(Error::Schema {
                path: "<task document>".into(),
                message: format!(
                    "schema version {:?} unsupported, expected {TASK_SCHEMA_VERSION:?}",
                    doc.schema_version
                ),
            });
        }
        Ok(doc)
    }

    pub fn to_register(&self) -> Register {
        Register {
            positions: self
                .register
                .positions_m
                .iter()
                .map(|p| [p[0] * 1e6, p[1] * 1e6])
                .collect(),
            blockade_radius_um: self.register.blockade_radius_m * 1e6,
        }
    }

    pub fn to_schedule(&self) -> PulseSchedule {
        PulseSchedule {
            segments: self
                .schedule
                .iter()
                .map(|s| Segment {
                    duration_us: s.duration_s * 1e6,
                    omega_rad_per_us: s.omega_rad_per_s * 1e-6,
                    phase_rad: s.phase_rad,
                    detuning_rad_per_us: s.detuning_rad_per_s * 1e-6,
                })
                .collect(),
        }
    }
}

/// Serialize a task document for hand-off.
pub fn emit_task_document(schedule: &PulseSchedule, register: &Register, n_shots: u64) -> Result<String> {
    Ok(TaskDocument::new(schedule, register, n_shots)?.to_json_string())
}

/// Inverse of [`emit_task_document`]. The document keeps its SI values
/// verbatim, so re-emitting it reproduces the input byte for byte; the
/// `to_schedule`/`to_register` accessors convert back to internal units.
pub fn parse_task_document(text: &str) -> Result<TaskDocument> {
    TaskDocument::from_json_str(text)
}
