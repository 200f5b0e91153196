//! State-vector emulation of the Rydberg Hamiltonian and shot sampling.
//!
//! Basis states are indexed with atom 0 as the least-significant bit and bit
//! value 1 meaning the Rydberg state. Evolution starts from the all-ground
//! state and integrates each schedule segment with an embedded Runge-Kutta
//! 5(4) scheme; segments with the drive off are diagonal and solved exactly.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Register;
use crate::pulse::PulseSchedule;
use crate::{Error, Result};

/// Device-class interaction coefficient, rad um^6 / us.
pub const DEFAULT_C6_OVER_HBAR_RAD_UM6_PER_US: f64 = 5.42e6;

/// Default cap on emulated atom count (2^14 amplitudes).
pub const DEFAULT_MAX_ATOMS: usize = 14;

const EXPM_MAX_ATOMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub c6_over_hbar_rad_um6_per_us: f64,
    /// Relative tolerance of the adaptive integrator.
    pub rel_tol: f64,
    pub max_step_us: f64,
    pub max_atoms: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            c6_over_hbar_rad_um6_per_us: DEFAULT_C6_OVER_HBAR_RAD_UM6_PER_US,
            rel_tol: 1e-8,
            max_step_us: 0.05,
            max_atoms: DEFAULT_MAX_ATOMS,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.c6_over_hbar_rad_um6_per_us.is_finite() && self.c6_over_hbar_rad_um6_per_us > 0.0) {
            bad.push(format!(
                "c6_over_hbar must be positive and finite, got {}",
                self.c6_over_hbar_rad_um6_per_us
            ));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1e-4) {
            bad.push(format!("rel_tol must lie in (0, 1e-4), got {}", self.rel_tol));
        }
        if !(self.max_step_us.is_finite() && self.max_step_us > 0.0) {
            bad.push(format!("max_step_us must be positive, got {}", self.max_step_us));
        }
        if self.max_atoms == 0 {
            bad.push("max_atoms must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub num_atoms: usize,
    /// 2^num_atoms amplitudes, atom 0 at the least-significant bit.
    pub amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// The all-ground state |0...0>.
    pub fn ground(num_atoms: usize) -> Self {
        let mut amplitudes = vec![Complex64::ZERO; 1 << num_atoms];
        amplitudes[0] = Complex64::ONE;
        StateVector { num_atoms, amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn check_normalized(&self) -> Result<()> {
        let sum: f64 = self.amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (sum - 1.0).abs() <= 1e-8 {
            Ok(())
        } else {
            Err(Error::NotNormalized { sum })
        }
    }
}

/// Matrix-free action of the Hamiltonian for one schedule segment.
///
/// The diagonal (detuning plus pairwise van der Waals) is precomputed per
/// basis state; the drive couples states differing in one bit.
pub struct HamiltonianAction {
    num_atoms: usize,
    diag: Vec<f64>,
    half_omega: f64,
    /// e^{i phi} Omega/2, the matrix element <0_i|H|1_i>.
    drive_coeff: Complex64,
}

impl HamiltonianAction {
    pub fn new(register: &Register, omega: f64, phase: f64, detuning: f64, c6_over_hbar: f64) -> Self {
        let n = register.positions.len();
        let dim = 1usize << n;

        let mut pair = vec![0.0; n * n];
        for j in 0..n {
            for k in (j + 1)..n {
                let d = register.distance(j, k);
                let v = c6_over_hbar / d.powi(6);
                pair[j * n + k] = v;
                pair[k * n + j] = v;
            }
        }

        // diag(m) extends diag(m without its lowest set bit) by that bit's
        // detuning and its interactions with the remaining set bits.
        let mut diag = vec![0.0; dim];
        for m in 1..dim {
            let i = m.trailing_zeros() as usize;
            let rest = m & (m - 1);
            let mut v = diag[rest] - detuning;
            let mut r = rest;
            while r != 0 {
                let j = r.trailing_zeros() as usize;
                v += pair[i * n + j];
                r &= r - 1;
            }
            diag[m] = v;
        }

        HamiltonianAction {
            num_atoms: n,
            diag,
            half_omega: omega / 2.0,
            drive_coeff: Complex64::from_polar(omega / 2.0, phase),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.half_omega == 0.0
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// out = H psi.
    pub fn apply_h(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let dim = psi.len();
        for m in 0..dim {
            out[m] = self.diag[m] * psi[m];
        }
        if self.half_omega == 0.0 {
            return;
        }
        let c = self.drive_coeff;
        let cc = c.conj();
        for i in 0..self.num_atoms {
            let bit = 1usize << i;
            // Walk the bit-i-clear states in blocks to touch each pair once.
            let mut base = 0;
            while base < dim {
                for m0 in base..base + bit {
                    let m1 = m0 | bit;
                    let a0 = psi[m0];
                    let a1 = psi[m1];
                    out[m0] += c * a1;
                    out[m1] += cc * a0;
                }
                base += bit << 1;
            }
        }
    }

    /// out = -i H psi, the Schroedinger right-hand side.
    pub fn derivative(&self, psi: &[Complex64], out: &mut [Complex64]) {
        self.apply_h(psi, out);
        for a in out.iter_mut() {
            *a = Complex64::new(a.im, -a.re);
        }
    }
}

/// -i H |psi> for a single segment's parameters.
pub fn hamiltonian_apply(
    register: &Register,
    omega: f64,
    phase: f64,
    detuning: f64,
    state: &StateVector,
    c6_over_hbar: f64,
) -> StateVector {
    let h = HamiltonianAction::new(register, omega, phase, detuning, c6_over_hbar);
    let mut out = vec![Complex64::ZERO; state.dim()];
    h.derivative(&state.amplitudes, &mut out);
    StateVector {
        num_atoms: state.num_atoms,
        amplitudes: out,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolveStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evaluations: usize,
    pub renormalizations: usize,
    /// Largest |norm - 1| observed before renormalizing.
    pub max_norm_drift: f64,
}

/// Dormand-Prince RK5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// 5th-order weights minus the embedded 4th-order weights.
const ERR_W: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrate one constant-Hamiltonian segment in place.
fn integrate_segment(
    h_action: &HamiltonianAction,
    duration: f64,
    psi: &mut Vec<Complex64>,
    physics: &PhysicsConfig,
    segment: usize,
    stats: &mut EvolveStats,
) -> Result<()> {
    let dim = psi.len();
    let rtol = physics.rel_tol;
    let atol = rtol * 1e-3;

    let mut k: Vec<Vec<Complex64>> = (0..7).map(|_| vec![Complex64::ZERO; dim]).collect();
    let mut y_stage = vec![Complex64::ZERO; dim];
    let mut y_new = vec![Complex64::ZERO; dim];

    let mut t = 0.0;
    let mut h = physics.max_step_us.min(duration);
    h_action.derivative(psi, &mut k[0]);
    stats.rhs_evaluations += 1;

    while t < duration {
        if h < 1e-13 {
            return Err(Error::Integration {
                segment,
                message: format!("step size underflow at t = {t} us"),
            });
        }
        h = h.min(duration - t);

        for s in 0..6 {
            for m in 0..dim {
                let mut acc = psi[m];
                for (j, k_j) in k.iter().enumerate().take(s + 1) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc += h * a * k_j[m];
                    }
                }
                y_stage[m] = acc;
            }
            if s < 5 {
                let (head, tail) = k.split_at_mut(s + 1);
                let _ = head;
                h_action.derivative(&y_stage, &mut tail[0]);
            } else {
                y_new.copy_from_slice(&y_stage);
                h_action.derivative(&y_new, &mut k[6]);
            }
            stats.rhs_evaluations += 1;
        }

        let mut err_sq = 0.0;
        for m in 0..dim {
            let mut e = Complex64::ZERO;
            for (j, w) in ERR_W.iter().enumerate() {
                if *w != 0.0 {
                    e += h * *w * k[j][m];
                }
            }
            let scale = atol + rtol * psi[m].norm().max(y_new[m].norm());
            let r = e.norm() / scale;
            err_sq += r * r;
        }
        let err = (err_sq / dim as f64).sqrt();

        if err <= 1.0 {
            t += h;
            std::mem::swap(psi, &mut y_new);
            // FSAL: the last stage evaluated y_new's derivative already.
            k.swap(0, 6);
            stats.accepted_steps += 1;

            let norm = psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let drift = (norm - 1.0).abs();
            if drift > 1e-12 {
                for a in psi.iter_mut() {
                    *a /= norm;
                }
                stats.renormalizations += 1;
                stats.max_norm_drift = stats.max_norm_drift.max(drift);
                h_action.derivative(psi, &mut k[0]);
                stats.rhs_evaluations += 1;
            }
        } else {
            stats.rejected_steps += 1;
        }

        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h = (h * factor).min(physics.max_step_us);
    }
    Ok(())
}

/// Evolve |0...0> under the schedule, returning the final state and
/// integration statistics.
pub fn evolve_traced(
    register: &Register,
    schedule: &PulseSchedule,
    physics: &PhysicsConfig,
) -> Result<(StateVector, EvolveStats)> {
    physics.validate()?;
    let n = register.positions.len();
    if n > physics.max_atoms {
        return Err(Error::CapacityExceeded {
            n,
            cap: physics.max_atoms,
        });
    }

    let mut state = StateVector::ground(n);
    let mut stats = EvolveStats::default();
    for (idx, seg) in schedule.segments.iter().enumerate() {
        if seg.duration_us == 0.0 {
            continue;
        }
        let h_action = HamiltonianAction::new(
            register,
            seg.omega_rad_per_us,
            seg.phase_rad,
            seg.detuning_rad_per_us,
            physics.c6_over_hbar_rad_um6_per_us,
        );
        if h_action.is_diagonal() {
            // Drive off: the Hamiltonian is diagonal, so the segment is a
            // pure phase rotation solved without stepping.
            for (m, a) in state.amplitudes.iter_mut().enumerate() {
                *a *= Complex64::from_polar(1.0, -h_action.diagonal()[m] * seg.duration_us);
            }
            continue;
        }
        integrate_segment(
            &h_action,
            seg.duration_us,
            &mut state.amplitudes,
            physics,
            idx,
            &mut stats,
        )?;
    }
    state.check_normalized()?;
    Ok((state, stats))
}

pub fn evolve(register: &Register, schedule: &PulseSchedule, physics: &PhysicsConfig) -> Result<StateVector> {
    evolve_traced(register, schedule, physics).map(|(s, _)| s)
}

/// Computational-basis shots. Bit i of each shot is atom i's outcome,
/// 1 = Rydberg; `to_bitstrings` renders atom 0 as the leftmost character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub num_atoms: usize,
    pub requested: u64,
    pub shots: Vec<u64>,
}

impl MeasurementSet {
    pub fn kept(&self) -> u64 {
        self.shots.len() as u64
    }

    pub fn to_bitstrings(&self) -> Vec<String> {
        self.shots
            .iter()
            .map(|&m| mask_to_bitstring(m, self.num_atoms))
            .collect()
    }
}

pub fn mask_to_bitstring(mask: u64, num_atoms: usize) -> String {
    (0..num_atoms)
        .map(|i| if mask >> i & 1 == 1 { '1' } else { '0' })
        .collect()
}

pub fn bitstring_to_mask(s: &str) -> Result<u64> {
    if s.len() > 64 {
        return Err(Error::Numerical(format!("bitstring of length {} exceeds 64", s.len())));
    }
    let mut mask = 0u64;
    for (i, ch) in s.chars().enumerate() {
        match ch {
            '1' => mask |= 1 << i,
            '0' => {}
            other => {
                return Err(Error::Numerical(format!(
                    "bitstring may contain only 0 and 1, found {other:?}"
                )))
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-atom preparation failure; a shot is discarded unless every atom
    /// prepared, i.e. with probability 1 - (1 - p)^n.
    pub p_init_fail: f64,
    /// Detection flip 0 -> 1.
    pub eps_g_to_r: f64,
    /// Detection flip 1 -> 0.
    pub eps_r_to_g: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            p_init_fail: 0.0,
            eps_g_to_r: 0.0,
            eps_r_to_g: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn is_noiseless(&self) -> bool {
        self.p_init_fail == 0.0 && self.eps_g_to_r == 0.0 && self.eps_r_to_g == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_init_fail", self.p_init_fail),
            ("eps_g_to_r", self.eps_g_to_r),
            ("eps_r_to_g", self.eps_r_to_g),
        ] {
            if !(p.is_finite() && (0.0..1.0).contains(&p)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Draw `n_shots` computational-basis samples from `state`.
pub fn sample(state: &StateVector, n_shots: u64, seed: u64, noise: &NoiseModel) -> Result<MeasurementSet> {
    if n_shots == 0 {
        return Err(Error::Config("n_shots must be >= 1".into()));
    }
    noise.validate()?;
    state.check_normalized()?;

    let n = state.num_atoms;
    let probs = state.probabilities();
    let total: f64 = probs.iter().sum();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p / total;
        cdf.push(acc);
    }

    let p_discard = 1.0 - (1.0 - noise.p_init_fail).powi(n as i32);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut shots = Vec::with_capacity(n_shots as usize);
    for _ in 0..n_shots {
        if noise.p_init_fail > 0.0 && rng.random::<f64>() < p_discard {
            continue;
        }
        let u = rng.random::<f64>();
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let mut mask = idx as u64;
        if noise.eps_g_to_r > 0.0 || noise.eps_r_to_g > 0.0 {
            for i in 0..n {
                let bit = 1u64 << i;
                let eps = if mask & bit != 0 { noise.eps_r_to_g } else { noise.eps_g_to_r };
                if eps > 0.0 && rng.random::<f64>() < eps {
                    mask ^= bit;
                }
            }
        }
        shots.push(mask);
    }

    Ok(MeasurementSet {
        num_atoms: n,
        requested: n_shots,
        shots,
    })
}

/// Dense matrix-exponential propagator for one segment; test oracle only.
pub fn expm_oracle(
    register: &Register,
    omega: f64,
    phase: f64,
    detuning: f64,
    duration: f64,
    state: &StateVector,
    c6_over_hbar: f64,
) -> Result<StateVector> {
    let n = register.positions.len();
    if n > EXPM_MAX_ATOMS {
        return Err(Error::CapacityExceeded {
            n,
            cap: EXPM_MAX_ATOMS,
        });
    }
    if state.dim() != 1 << n {
        return Err(Error::DimensionMismatch {
            expected: 1 << n,
            got: state.dim(),
        });
    }
    let dim = 1usize << n;
    let h_action = HamiltonianAction::new(register, omega, phase, detuning, c6_over_hbar);

    // Columns of M = -i H t from the matrix-free action on basis vectors.
    let mut m = vec![Complex64::ZERO; dim * dim];
    let mut basis = vec![Complex64::ZERO; dim];
    let mut col = vec![Complex64::ZERO; dim];
    for j in 0..dim {
        basis[j] = Complex64::ONE;
        h_action.derivative(&basis, &mut col);
        basis[j] = Complex64::ZERO;
        for i in 0..dim {
            m[i * dim + j] = col[i] * duration;
        }
    }

    let e = expm(&m, dim);
    let mut out = vec![Complex64::ZERO; dim];
    for i in 0..dim {
        let mut acc = Complex64::ZERO;
        for j in 0..dim {
            acc += e[i * dim + j] * state.amplitudes[j];
        }
        out[i] = acc;
    }
    Ok(StateVector {
        num_atoms: state.num_atoms,
        amplitudes: out,
    })
}

/// Scaling-and-squaring Taylor exponential of a dim x dim matrix.
fn expm(m: &[Complex64], dim: usize) -> Vec<Complex64> {
    let one_norm = (0..dim)
        .map(|j| (0..dim).map(|i| m[i * dim + j].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if one_norm > 0.5 {
        (one_norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 2f64.powi(-(s as i32));
    let t: Vec<Complex64> = m.iter().map(|x| x * scale).collect();

    let mut result = identity(dim);
    let mut term = identity(dim);
    for k in 1..=24 {
        term = matmul(&term, &t, dim);
        for x in term.iter_mut() {
            *x /= k as f64;
        }
        for (r, w) in result.iter_mut().zip(&term) {
            *r += w;
        }
    }
    for _ in 0..s {
        result = matmul(&result, &result, dim);
    }
    result
}

fn identity(dim: usize) -> Vec<Complex64> {
    let mut id = vec![Complex64::ZERO; dim * dim];
    for i in 0..dim {
        id[i * dim + i] = Complex64::ONE;
    }
    id
}

fn matmul(a: &[Complex64], b: &[Complex64], dim: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::ZERO; dim * dim];
    for i in 0..dim {
        for l in 0..dim {
            let av = a[i * dim + l];
            if av == Complex64::ZERO {
                continue;
            }
            for j in 0..dim {
                out[i * dim + j] += av * b[l * dim + j];
            }
        }
    }
    out
}
