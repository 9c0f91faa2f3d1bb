//! Ground-state spin Hamiltonian of the NV center, solved per crystal axis.
//!
//! The NV ground state is a spin-1 triplet governed by
//! `H = D*Sz^2 + E*(Sx^2 - Sy^2) + gamma_e * B . S` with all terms expressed
//! in Hz. Each center sits along one of four tetrahedral <111> directions, so
//! the Zeeman term depends on the projection of the magnetic field onto the
//! axis of the individual center. This module builds the Hamiltonian in the
//! axis frame, solves it exactly and provides the linear approximation
//! `f± = D ± gamma_e*B_i` used for resonance bookkeeping.

use thiserror::Error;

/// Electron gyromagnetic ratio in Hz/T (g ~ 2.0028). Configurable through
/// [`SpinParams`]; this is only the default.
pub const GAMMA_E_HZ_PER_T: f64 = 2.8024954e10;

/// Axial zero-field splitting at room temperature, Hz.
pub const D_ROOM_TEMP_HZ: f64 = 2.87e9;

pub type Vec3 = [f64; 3];

const FRAC_1_SQRT_3: f64 = 0.577_350_269_189_625_8;

#[derive(Debug, Error)]
pub enum SpinError {
    #[error("axis is not a unit vector (norm = {norm})")]
    InvalidAxis { norm: f64 },
    #[error("axis index {index} outside 1..=4")]
    InvalidAxisIndex { index: u8 },
    #[error("invalid spin parameters: {0}")]
    InvalidParams(String),
    #[error("matrix is not Hermitian (max asymmetry {max_asym:e})")]
    NotHermitian { max_asym: f64 },
    #[error("Zeeman regime violated: gamma_e*|B|/D = {ratio:.6} (requires < 0.5)")]
    RegimeViolation { ratio: f64 },
    #[error("axis set violates tetrahedral geometry: {0}")]
    InvalidAxisSet(String),
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(v: Vec3) -> f64 {
    dot(v, v).sqrt()
}

/// The four tetrahedral <111> NV orientations in crystal coordinates.
///
/// Any valid set must consist of unit vectors with pairwise dot products of
/// exactly -1/3 and a completeness relation `sum_i n_i n_i^T = (4/3) I`.
#[derive(Debug, Clone)]
pub struct NVAxisSet {
    axes: [Vec3; 4],
}

impl NVAxisSet {
    /// Standard orientation set: (1,1,1), (1,-1,-1), (-1,1,-1), (-1,-1,1),
    /// each normalized. Axis 1 is the [111] direction the bias field is
    /// aligned with in Zeeman mode.
    pub fn standard() -> Self {
        let s = FRAC_1_SQRT_3;
        NVAxisSet {
            axes: [
                [s, s, s],
                [s, -s, -s],
                [-s, s, -s],
                [-s, -s, s],
            ],
        }
    }

    /// Validates the tetrahedral invariants before accepting a custom set
    /// (for example a rotated crystal frame).
    pub fn new(axes: [Vec3; 4]) -> Result<Self, SpinError> {
        for (i, &ax) in axes.iter().enumerate() {
            let n = norm(ax);
            if (n - 1.0).abs() > 1e-12 {
                return Err(SpinError::InvalidAxisSet(format!(
                    "axis {} has norm {n}",
                    i + 1
                )));
            }
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d = dot(axes[i], axes[j]);
                if (d + 1.0 / 3.0).abs() > 1e-12 {
                    return Err(SpinError::InvalidAxisSet(format!(
                        "dot(axis {}, axis {}) = {d}, expected -1/3",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        // completeness: sum of outer products must be (4/3) I
        for r in 0..3 {
            for c in 0..3 {
                let s: f64 = axes.iter().map(|ax| ax[r] * ax[c]).sum();
                let expect = if r == c { 4.0 / 3.0 } else { 0.0 };
                if (s - expect).abs() > 1e-12 {
                    return Err(SpinError::InvalidAxisSet(format!(
                        "completeness entry ({r},{c}) = {s}, expected {expect}"
                    )));
                }
            }
        }
        Ok(NVAxisSet { axes })
    }

    pub fn axes(&self) -> &[Vec3; 4] {
        &self.axes
    }

    /// Axis by 1-based index.
    pub fn axis(&self, index: u8) -> Result<Vec3, SpinError> {
        if (1..=4).contains(&index) {
            Ok(self.axes[(index - 1) as usize])
        } else {
            Err(SpinError::InvalidAxisIndex { index })
        }
    }
}

/// Physical parameters entering the ground-state Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct SpinParams {
    /// Axial zero-field splitting, Hz. Temperature dependent.
    pub d_hz: f64,
    /// Transverse zero-field splitting, Hz. Strain dependent, >= 0.
    pub e_hz: f64,
    /// Gyromagnetic ratio, Hz/T.
    pub gamma_e_hz_per_t: f64,
    /// Applied magnetic field in crystal coordinates, Tesla.
    pub b_t: Vec3,
}

impl SpinParams {
    pub fn new(d_hz: f64, e_hz: f64, gamma_e_hz_per_t: f64, b_t: Vec3) -> Result<Self, SpinError> {
        let p = SpinParams {
            d_hz,
            e_hz,
            gamma_e_hz_per_t,
            b_t,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.d_hz > 0.0) {
            return Err(SpinError::InvalidParams(format!("D must be > 0, got {}", self.d_hz)));
        }
        if !(self.e_hz >= 0.0) {
            return Err(SpinError::InvalidParams(format!("E must be >= 0, got {}", self.e_hz)));
        }
        if !(self.gamma_e_hz_per_t > 0.0) {
            return Err(SpinError::InvalidParams(format!(
                "gamma_e must be > 0, got {}",
                self.gamma_e_hz_per_t
            )));
        }
        if self.b_t.iter().any(|b| !b.is_finite()) {
            return Err(SpinError::InvalidParams("B contains non-finite components".into()));
        }
        Ok(())
    }

    /// `gamma_e*|B|/D`. The linear Zeeman picture (and the identification of
    /// the lowest eigenstate with the m_s = 0 level) requires this < 1/2.
    pub fn regime_ratio(&self) -> f64 {
        self.gamma_e_hz_per_t * norm(self.b_t) / self.d_hz
    }

    pub fn zeeman_regime_ok(&self) -> bool {
        self.regime_ratio() < 0.5
    }

    fn check_regime(&self) -> Result<(), SpinError> {
        let ratio = self.regime_ratio();
        if ratio < 0.5 {
            Ok(())
        } else {
            Err(SpinError::RegimeViolation { ratio })
        }
    }
}

/// Spin-1 Hamiltonian in the axis frame, basis |+1>, |0>, |-1>, entries Hz.
///
/// The frame convention puts the NV axis along z and the transverse field
/// component along x (azimuth 0), which makes every entry real: the matrix is
/// symmetric rather than complex Hermitian. The trace is always 2D because
/// only the D*Sz^2 term has a nonzero trace.
#[derive(Debug, Clone, Copy)]
pub struct Hamiltonian3 {
    m: [[f64; 3]; 3],
}

impl Hamiltonian3 {
    /// Wraps a raw matrix, rejecting asymmetric input.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, SpinError> {
        check_symmetric(&m)?;
        Ok(Hamiltonian3 { m })
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    /// Eigenvalues in ascending order, Hz.
    pub fn eigenvalues(&self) -> [f64; 3] {
        sym3_eigenvalues(&self.m)
    }
}

/// Signed projection of the field onto an NV axis, Tesla.
pub fn axis_projection(b_t: Vec3, axis: Vec3) -> Result<f64, SpinError> {
    let n = norm(axis);
    if (n - 1.0).abs() > 1e-6 {
        return Err(SpinError::InvalidAxis { norm: n });
    }
    Ok(dot(b_t, axis))
}

/// Builds the Hamiltonian for one NV orientation.
///
/// The field is decomposed into the component along the axis and the
/// transverse remainder; the transverse direction defines the local x-axis,
/// so `S_y` never enters and the matrix stays real.
pub fn build_hamiltonian(params: &SpinParams, axis: Vec3) -> Result<Hamiltonian3, SpinError> {
    params.validate()?;
    let n = norm(axis);
    if (n - 1.0).abs() > 1e-6 {
        return Err(SpinError::InvalidAxis { norm: n });
    }

    let b_par = dot(params.b_t, axis);
    let perp = [
        params.b_t[0] - b_par * axis[0],
        params.b_t[1] - b_par * axis[1],
        params.b_t[2] - b_par * axis[2],
    ];
    let b_perp = norm(perp);

    let wz = params.gamma_e_hz_per_t * b_par;
    let wx = params.gamma_e_hz_per_t * b_perp / std::f64::consts::SQRT_2;
    let d = params.d_hz;
    let e = params.e_hz;

    Ok(Hamiltonian3 {
        m: [[d + wz, wx, e], [wx, 0.0, wx], [e, wx, d - wz]],
    })
}

/// Eigenvalues of a Hermitian (here real symmetric) 3x3 matrix, ascending.
///
/// Uses the closed-form solution of the characteristic cubic; switches to a
/// cyclic-Jacobi iteration when the relative discriminant falls below 1e-10,
/// i.e. near-degenerate spectra where the trigonometric form loses digits.
pub fn eigenvalues3(m: &[[f64; 3]; 3]) -> Result<[f64; 3], SpinError> {
    check_symmetric(m)?;
    Ok(sym3_eigenvalues(m))
}

fn check_symmetric(m: &[[f64; 3]; 3]) -> Result<(), SpinError> {
    let scale = m
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let max_asym = (m[0][1] - m[1][0])
        .abs()
        .max((m[0][2] - m[2][0]).abs())
        .max((m[1][2] - m[2][1]).abs());
    if max_asym > 1e-9 * scale {
        return Err(SpinError::NotHermitian { max_asym });
    }
    Ok(())
}

fn sym3_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    if p1 == 0.0 {
        let mut ev = [m[0][0], m[1][1], m[2][2]];
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return ev;
    }

    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();

    // B = (A - q I) / p, r = det(B)/2 in [-1, 1]
    let b = [
        [(m[0][0] - q) / p, m[0][1] / p, m[0][2] / p],
        [m[0][1] / p, (m[1][1] - q) / p, m[1][2] / p],
        [m[0][2] / p, m[1][2] / p, (m[2][2] - q) / p],
    ];
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);

    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let mid = 3.0 * q - hi - lo;
    let mut ev = [lo, mid, hi];
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Relative discriminant of the characteristic cubic; small values mean a
    // near-degenerate pair where acos() conditioning is poor.
    let fro = m
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let disc = ((ev[0] - ev[1]) * (ev[0] - ev[2]) * (ev[1] - ev[2])).powi(2);
    if disc / fro.powi(6) < 1e-10 {
        return jacobi_cyclic(*m);
    }
    ev
}

/// Cyclic-by-row Jacobi sweeps; unconditionally stable for symmetric input.
fn jacobi_cyclic(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    let fro = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _ in 0..50 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off <= 1e-15 * fro {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = if theta >= 0.0 {
                1.0 / (theta + (1.0 + theta * theta).sqrt())
            } else {
                1.0 / (theta - (1.0 + theta * theta).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;

            let r = 3 - p - q;
            let (app, aqq) = (a[p][p], a[q][q]);
            a[p][p] = app - t * apq;
            a[q][q] = aqq + t * apq;
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            let (arp, arq) = (a[r][p], a[r][q]);
            a[r][p] = c * arp - s * arq;
            a[p][r] = a[r][p];
            a[r][q] = s * arp + c * arq;
            a[q][r] = a[r][q];
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// One resonance pair `f- <= f+` for a given NV orientation, Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionPair {
    pub f_minus_hz: f64,
    pub f_plus_hz: f64,
    /// 1-based orientation index into the [`NVAxisSet`].
    pub axis_index: u8,
}

impl TransitionPair {
    /// `(f+ + f-)/2`; equals D under the linear Zeeman approximation.
    pub fn midpoint_hz(&self) -> f64 {
        0.5 * (self.f_plus_hz + self.f_minus_hz)
    }

    /// `(f+ - f-)/2`; equals gamma_e*|B_i| under the approximation.
    pub fn half_splitting_hz(&self) -> f64 {
        0.5 * (self.f_plus_hz - self.f_minus_hz)
    }
}

fn check_axis_index(axis_index: u8) -> Result<(), SpinError> {
    if (1..=4).contains(&axis_index) {
        Ok(())
    } else {
        Err(SpinError::InvalidAxisIndex { index: axis_index })
    }
}

/// Transition frequencies from the exact eigenvalues: `f- = mid - min`,
/// `f+ = max - min`. Requires `gamma_e*|B| < D/2` so the lowest eigenstate is
/// still the m_s = 0-like level.
pub fn exact_transitions(
    params: &SpinParams,
    axis: Vec3,
    axis_index: u8,
) -> Result<TransitionPair, SpinError> {
    check_axis_index(axis_index)?;
    params.check_regime()?;
    let h = build_hamiltonian(params, axis)?;
    let ev = h.eigenvalues();
    Ok(TransitionPair {
        f_minus_hz: ev[1] - ev[0],
        f_plus_hz: ev[2] - ev[0],
        axis_index,
    })
}

/// Linear Zeeman approximation `f± = D ± gamma_e*|B.axis|`; E is neglected.
pub fn approx_transitions(
    params: &SpinParams,
    axis: Vec3,
    axis_index: u8,
) -> Result<TransitionPair, SpinError> {
    check_axis_index(axis_index)?;
    params.validate()?;
    let split = params.gamma_e_hz_per_t * axis_projection(params.b_t, axis)?.abs();
    Ok(TransitionPair {
        f_minus_hz: params.d_hz - split,
        f_plus_hz: params.d_hz + split,
        axis_index,
    })
}

/// Exact transition pairs for all four orientations.
pub fn exact_transitions_all(
    params: &SpinParams,
    axes: &NVAxisSet,
) -> Result<[TransitionPair; 4], SpinError> {
    let mut out = [TransitionPair {
        f_minus_hz: 0.0,
        f_plus_hz: 0.0,
        axis_index: 1,
    }; 4];
    for (i, &ax) in axes.axes().iter().enumerate() {
        out[i] = exact_transitions(params, ax, (i + 1) as u8)?;
    }
    Ok(out)
}

/// Approximate transition pairs for all four orientations.
pub fn approx_transitions_all(
    params: &SpinParams,
    axes: &NVAxisSet,
) -> Result<[TransitionPair; 4], SpinError> {
    let mut out = [TransitionPair {
        f_minus_hz: 0.0,
        f_plus_hz: 0.0,
        axis_index: 1,
    }; 4];
    for (i, &ax) in axes.axes().iter().enumerate() {
        out[i] = approx_transitions(params, ax, (i + 1) as u8)?;
    }
    Ok(out)
}
