//! N-cumulative Lorentzian fitting by damped least squares.
//!
//! The model is `S(f) = baseline - sum_k C_k (G_k/2)^2 / ((f-c_k)^2 + (G_k/2)^2)`,
//! fitted with a Levenberg-Marquardt iteration using the analytic Jacobian.
//! Parameter columns differ in scale by ~10 decades (centers in GHz,
//! contrasts of order 1e-2), so the normal equations are solved in
//! correlation form: columns scaled to unit diagonal before factorization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lineshape::{LorentzianPeak, Spectrum};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need {needed} initial peaks, found {found}")]
    InsufficientGuesses { needed: usize, found: usize },
    #[error("degenerate fit, collinear or insensitive parameters: {}", params.join(", "))]
    DegenerateFit { params: Vec<String> },
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
}

/// Cumulative-Lorentzian model with a free baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub baseline: f64,
    pub peaks: Vec<LorentzianPeak>,
}

impl FitModel {
    pub fn n_peaks(&self) -> usize {
        self.peaks.len()
    }

    /// Length of the parameter vector, 1 + 3*n_peaks.
    pub fn n_params(&self) -> usize {
        1 + 3 * self.peaks.len()
    }

    /// Model signal at frequency `f`.
    pub fn eval(&self, f_hz: f64) -> f64 {
        self.baseline - self.peaks.iter().map(|p| p.depth_at(f_hz)).sum::<f64>()
    }

    /// Analytic dS/df in 1/Hz; used for scale factors.
    pub fn derivative(&self, f_hz: f64) -> f64 {
        self.peaks
            .iter()
            .map(|p| {
                let a = 0.5 * p.fwhm_hz;
                let u = f_hz - p.center_hz;
                let den = u * u + a * a;
                2.0 * p.contrast * a * a * u / (den * den)
            })
            .sum()
    }
}

/// Fit tuning knobs; the defaults are used throughout the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Converged when the relative residual decrease drops below this.
    pub residual_tol: f64,
    /// Converged when the relative parameter step drops below this.
    pub step_tol: f64,
    pub initial_damping: f64,
    /// Fit one common linewidth across all peaks.
    pub shared_fwhm: bool,
    /// Prominence threshold handed to peak detection when no init is given.
    pub min_prominence: f64,
    /// Starting baseline; the signal median when absent. Supplying the
    /// previous solution here makes refits exact fixed points.
    pub init_baseline: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            residual_tol: 1e-10,
            step_tol: 1e-8,
            initial_damping: 1e-3,
            shared_fwhm: false,
            min_prominence: 0.005,
            init_baseline: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    /// Residual-variance-scaled inverse normal matrix, (1+3n) x (1+3n),
    /// ordered [baseline, (center, fwhm, contrast) per peak].
    pub covariance: Vec<Vec<f64>>,
    /// Euclidean norm of the residual vector at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    /// Standard deviation of the center of peak `k` from the covariance.
    pub fn center_sigma(&self, k: usize) -> f64 {
        let idx = 1 + 3 * k;
        self.covariance[idx][idx].max(0.0).sqrt()
    }
}

/// Initial dip guesses from a moving-average-smoothed spectrum.
///
/// A dip qualifies when its prominence (depth below the lower of the two
/// enclosing "walls") reaches `min_prominence`. The width guess is the
/// half-prominence crossing width, the contrast guess is the prominence.
/// Candidates closer than a quarter linewidth collapse onto the deeper one.
pub fn detect_peaks(s: &Spectrum, min_prominence: f64) -> Vec<LorentzianPeak> {
    const SMOOTH_HALF: usize = 2;
    let y = s.signal();
    let x = s.freqs_hz();
    let n = y.len();
    if n < 3 {
        return Vec::new();
    }

    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(SMOOTH_HALF);
            let hi = (i + SMOOTH_HALF).min(n - 1);
            y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();

    let mut cands: Vec<LorentzianPeak> = Vec::new();
    for i in 1..n - 1 {
        if !(smoothed[i] < smoothed[i - 1] && smoothed[i] < smoothed[i + 1]) {
            continue;
        }
        // walls: highest point toward the nearest deeper dip (or edge)
        let mut left_wall = smoothed[i];
        let mut j = i;
        while j > 0 {
            j -= 1;
            if smoothed[j] < smoothed[i] {
                break;
            }
            left_wall = left_wall.max(smoothed[j]);
        }
        let mut right_wall = smoothed[i];
        let mut j = i;
        while j < n - 1 {
            j += 1;
            if smoothed[j] < smoothed[i] {
                break;
            }
            right_wall = right_wall.max(smoothed[j]);
        }
        let prominence = left_wall.min(right_wall) - smoothed[i];
        if prominence < min_prominence {
            continue;
        }

        // half-prominence crossings, linearly interpolated
        let level = smoothed[i] + 0.5 * prominence;
        let mut f_left = x[0];
        for j in (0..i).rev() {
            if smoothed[j] >= level {
                let t = (level - smoothed[j + 1]) / (smoothed[j] - smoothed[j + 1]);
                f_left = x[j + 1] + t * (x[j] - x[j + 1]);
                break;
            }
        }
        let mut f_right = x[n - 1];
        for j in i + 1..n {
            if smoothed[j] >= level {
                let t = (level - smoothed[j - 1]) / (smoothed[j] - smoothed[j - 1]);
                f_right = x[j - 1] + t * (x[j] - x[j - 1]);
                break;
            }
        }
        let fwhm = (f_right - f_left).max(s.mean_step_hz());

        cands.push(LorentzianPeak {
            center_hz: x[i],
            fwhm_hz: fwhm,
            contrast: prominence.min(0.999),
        });
    }

    // collapse near-coincident candidates onto the deeper one
    cands.sort_by(|a, b| a.center_hz.partial_cmp(&b.center_hz).unwrap());
    let mut out: Vec<LorentzianPeak> = Vec::new();
    for c in cands {
        if let Some(last) = out.last_mut() {
            let gap = c.center_hz - last.center_hz;
            if gap < last.fwhm_hz.max(c.fwhm_hz) / 4.0 {
                if c.contrast > last.contrast {
                    *last = c;
                }
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Detected guesses topped up to `n_peaks` by splitting the deepest candidate
/// into a symmetric pair; used for unresolved profiles such as the strain
/// doublet, where detection sees a single dip.
pub fn initial_guesses(
    s: &Spectrum,
    n_peaks: usize,
    min_prominence: f64,
) -> Result<Vec<LorentzianPeak>, FitError> {
    let mut cands = detect_peaks(s, min_prominence);
    if cands.is_empty() {
        return Err(FitError::InsufficientGuesses {
            needed: n_peaks,
            found: 0,
        });
    }
    while cands.len() < n_peaks {
        cands.sort_by(|a, b| b.contrast.partial_cmp(&a.contrast).unwrap());
        let deepest = cands.remove(0);
        let offset = deepest.fwhm_hz / 4.0;
        for sign in [-1.0, 1.0] {
            cands.push(LorentzianPeak {
                center_hz: deepest.center_hz + sign * offset,
                fwhm_hz: deepest.fwhm_hz,
                contrast: deepest.contrast / 2.0,
            });
        }
    }
    cands.sort_by(|a, b| b.contrast.partial_cmp(&a.contrast).unwrap());
    cands.truncate(n_peaks);
    cands.sort_by(|a, b| a.center_hz.partial_cmp(&b.center_hz).unwrap());
    Ok(cands)
}

// ---------------------------------------------------------------------------
// parameter packing

struct ParamLayout {
    n_peaks: usize,
    shared_fwhm: bool,
}

impl ParamLayout {
    fn len(&self) -> usize {
        if self.shared_fwhm {
            2 + 2 * self.n_peaks
        } else {
            1 + 3 * self.n_peaks
        }
    }

    fn pack(&self, model: &FitModel) -> Vec<f64> {
        let mut v = vec![model.baseline];
        if self.shared_fwhm {
            v.push(model.peaks[0].fwhm_hz);
            for p in &model.peaks {
                v.push(p.center_hz);
                v.push(p.contrast);
            }
        } else {
            for p in &model.peaks {
                v.push(p.center_hz);
                v.push(p.fwhm_hz);
                v.push(p.contrast);
            }
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> FitModel {
        let mut peaks = Vec::with_capacity(self.n_peaks);
        if self.shared_fwhm {
            for k in 0..self.n_peaks {
                peaks.push(LorentzianPeak {
                    center_hz: v[2 + 2 * k],
                    fwhm_hz: v[1],
                    contrast: v[3 + 2 * k],
                });
            }
        } else {
            for k in 0..self.n_peaks {
                peaks.push(LorentzianPeak {
                    center_hz: v[1 + 3 * k],
                    fwhm_hz: v[2 + 3 * k],
                    contrast: v[3 + 3 * k],
                });
            }
        }
        FitModel {
            baseline: v[0],
            peaks,
        }
    }

    fn name(&self, idx: usize) -> String {
        if idx == 0 {
            return "baseline".into();
        }
        if self.shared_fwhm {
            if idx == 1 {
                return "shared fwhm".into();
            }
            let k = (idx - 2) / 2 + 1;
            if (idx - 2) % 2 == 0 {
                format!("peak {k} center")
            } else {
                format!("peak {k} contrast")
            }
        } else {
            let k = (idx - 1) / 3 + 1;
            match (idx - 1) % 3 {
                0 => format!("peak {k} center"),
                1 => format!("peak {k} fwhm"),
                _ => format!("peak {k} contrast"),
            }
        }
    }

    /// Index into the internal vector for each external
    /// [baseline, (center, fwhm, contrast)*n] slot.
    fn external_to_internal(&self, ext: usize) -> usize {
        if !self.shared_fwhm || ext == 0 {
            return ext;
        }
        let k = (ext - 1) / 3;
        match (ext - 1) % 3 {
            0 => 2 + 2 * k,
            1 => 1,
            _ => 3 + 2 * k,
        }
    }
}

fn project(v: &mut [f64], layout: &ParamLayout, f_lo: f64, f_hi: f64, min_fwhm: f64) {
    let clamp_fwhm = |x: f64| x.max(min_fwhm);
    let clamp_contrast = |x: f64| x.clamp(1e-12, 1.0 - 1e-12);
    if layout.shared_fwhm {
        v[1] = clamp_fwhm(v[1]);
        for k in 0..layout.n_peaks {
            v[2 + 2 * k] = v[2 + 2 * k].clamp(f_lo, f_hi);
            v[3 + 2 * k] = clamp_contrast(v[3 + 2 * k]);
        }
    } else {
        for k in 0..layout.n_peaks {
            v[1 + 3 * k] = v[1 + 3 * k].clamp(f_lo, f_hi);
            v[2 + 3 * k] = clamp_fwhm(v[2 + 3 * k]);
            v[3 + 3 * k] = clamp_contrast(v[3 + 3 * k]);
        }
    }
}

/// Rows: one per sample. Columns ordered per `ParamLayout`.
fn jacobian_row(layout: &ParamLayout, v: &[f64], f: f64, row: &mut [f64]) {
    row[0] = 1.0; // d/d baseline
    if layout.shared_fwhm {
        row[1] = 0.0;
        for k in 0..layout.n_peaks {
            let (c, g, cc) = (v[2 + 2 * k], v[1], v[3 + 2 * k]);
            let a = 0.5 * g;
            let u = f - c;
            let den = u * u + a * a;
            let den2 = den * den;
            row[1] += -cc * a * u * u / den2;
            row[2 + 2 * k] = -2.0 * cc * a * a * u / den2;
            row[3 + 2 * k] = -a * a / den;
        }
    } else {
        for k in 0..layout.n_peaks {
            let (c, g, cc) = (v[1 + 3 * k], v[2 + 3 * k], v[3 + 3 * k]);
            let a = 0.5 * g;
            let u = f - c;
            let den = u * u + a * a;
            let den2 = den * den;
            row[1 + 3 * k] = -2.0 * cc * a * a * u / den2;
            row[2 + 3 * k] = -cc * a * u * u / den2;
            row[3 + 3 * k] = -a * a / den;
        }
    }
}

fn model_at(layout: &ParamLayout, v: &[f64], f: f64) -> f64 {
    let mut s = v[0];
    if layout.shared_fwhm {
        let a = 0.5 * v[1];
        for k in 0..layout.n_peaks {
            let u = f - v[2 + 2 * k];
            s -= v[3 + 2 * k] * a * a / (u * u + a * a);
        }
    } else {
        for k in 0..layout.n_peaks {
            let a = 0.5 * v[2 + 3 * k];
            let u = f - v[1 + 3 * k];
            s -= v[3 + 3 * k] * a * a / (u * u + a * a);
        }
    }
    s
}

fn sse_at(layout: &ParamLayout, v: &[f64], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&f, &yi)| {
            let r = yi - model_at(layout, v, f);
            r * r
        })
        .sum()
}

/// Cholesky factorization in place; returns the first failing pivot on error.
fn cholesky(a: &mut [Vec<f64>]) -> Result<(), usize> {
    let n = a.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(i);
                }
                a[i][i] = sum.sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

fn cholesky_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = cholesky_solve(l, &e);
        for row in 0..n {
            inv[row][col] = x[row];
        }
    }
    // symmetrize against rounding
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = m;
            inv[j][i] = m;
        }
    }
    inv
}

/// Fits `n_peaks` Lorentzian dips plus a baseline to the spectrum.
///
/// When `init` is `None`, peak detection must supply at least `n_peaks`
/// candidates (the deepest ones are kept). Accepted steps never increase the
/// residual; an exhausted iteration budget yields `converged = false` rather
/// than an error.
pub fn fit(
    s: &Spectrum,
    n_peaks: usize,
    init: Option<&[LorentzianPeak]>,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    if n_peaks == 0 {
        return Err(FitError::InvalidInput("n_peaks must be >= 1".into()));
    }
    let layout = ParamLayout {
        n_peaks,
        shared_fwhm: opts.shared_fwhm,
    };
    let x = s.freqs_hz();
    let y = s.signal();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput("signal contains non-finite samples".into()));
    }
    if x.len() < layout.len() + 1 {
        return Err(FitError::InvalidInput(format!(
            "{} samples cannot constrain {} parameters",
            x.len(),
            layout.len()
        )));
    }

    let init_peaks: Vec<LorentzianPeak> = match init {
        Some(given) => {
            if given.len() < n_peaks {
                return Err(FitError::InsufficientGuesses {
                    needed: n_peaks,
                    found: given.len(),
                });
            }
            given[..n_peaks].to_vec()
        }
        None => {
            let mut cands = detect_peaks(s, opts.min_prominence);
            if cands.len() < n_peaks {
                return Err(FitError::InsufficientGuesses {
                    needed: n_peaks,
                    found: cands.len(),
                });
            }
            cands.sort_by(|a, b| b.contrast.partial_cmp(&a.contrast).unwrap());
            cands.truncate(n_peaks);
            cands.sort_by(|a, b| a.center_hz.partial_cmp(&b.center_hz).unwrap());
            cands
        }
    };

    let baseline_init = opts.init_baseline.unwrap_or_else(|| {
        let mut sorted: Vec<f64> = y.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[sorted.len() / 2]
    });

    let shared_init_fwhm = init_peaks[0].fwhm_hz;
    let init_model = FitModel {
        baseline: baseline_init,
        peaks: init_peaks
            .iter()
            .map(|p| LorentzianPeak {
                fwhm_hz: if opts.shared_fwhm { shared_init_fwhm } else { p.fwhm_hz },
                ..*p
            })
            .collect(),
    };

    let f_lo = x[0];
    let f_hi = x[x.len() - 1];
    let min_fwhm = s.mean_step_hz() * 1e-3;

    let np = layout.len();
    let mut p = layout.pack(&init_model);
    project(&mut p, &layout, f_lo, f_hi, min_fwhm);

    let mut sse = sse_at(&layout, &p, x, y);
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    let mut row = vec![0.0; np];
    let normal_equations = |p: &[f64], row: &mut [f64]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut jtj = vec![vec![0.0; np]; np];
        let mut jtr = vec![0.0; np];
        for (&f, &yi) in x.iter().zip(y) {
            jacobian_row(&layout, p, f, row);
            let r = yi - model_at(&layout, p, f);
            for a in 0..np {
                jtr[a] += row[a] * r;
                for b in 0..=a {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        for a in 0..np {
            for b in a + 1..np {
                jtj[a][b] = jtj[b][a];
            }
        }
        (jtj, jtr)
    };
    let damped_step = |jtj: &[Vec<f64>],
                       jtr: &[f64],
                       scale: &[f64],
                       lambda: f64|
     -> Option<Vec<f64>> {
        let mut a = vec![vec![0.0; np]; np];
        for i in 0..np {
            for j in 0..np {
                a[i][j] = jtj[i][j] / (scale[i] * scale[j]);
            }
            a[i][i] += lambda;
        }
        let b: Vec<f64> = (0..np).map(|i| jtr[i] / scale[i]).collect();
        match cholesky(&mut a) {
            Ok(()) => {
                let z = cholesky_solve(&a, &b);
                Some((0..np).map(|i| z[i] / scale[i]).collect())
            }
            Err(_) => None,
        }
    };
    let column_scale = |jtj: &[Vec<f64>]| -> Result<Vec<f64>, FitError> {
        let mut scale = vec![0.0; np];
        let mut dead: Vec<String> = Vec::new();
        for (i, sc) in scale.iter_mut().enumerate() {
            let d = jtj[i][i];
            if d <= 0.0 || !d.is_finite() {
                dead.push(layout.name(i));
            } else {
                *sc = d.sqrt();
            }
        }
        if dead.is_empty() {
            Ok(scale)
        } else {
            Err(FitError::DegenerateFit { params: dead })
        }
    };
    let rel_step_of = |delta: &[f64], p: &[f64]| -> f64 {
        delta
            .iter()
            .zip(p)
            .map(|(d, pi)| (d / pi.abs().max(1e-30)).abs())
            .fold(0.0f64, f64::max)
    };

    for iter in 1..=opts.max_iterations {
        iterations = iter;
        let (jtj, jtr) = normal_equations(&p, &mut row);
        let scale = column_scale(&jtj)?;

        let mut accepted = false;
        loop {
            if let Some(delta) = damped_step(&jtj, &jtr, &scale, lambda) {
                let rel_step = rel_step_of(&delta, &p);
                // already at the optimum: stop without moving so refits are
                // exact fixed points
                if rel_step < opts.step_tol && lambda <= 1.0 {
                    converged = true;
                    break;
                }

                let mut p_new: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + d).collect();
                project(&mut p_new, &layout, f_lo, f_hi, min_fwhm);
                let sse_new = sse_at(&layout, &p_new, x, y);
                if sse_new <= sse && sse_new.is_finite() {
                    let decrease = sse - sse_new;
                    p = p_new;
                    lambda = (lambda / 10.0).max(1e-14);
                    // the lambda gates keep heavily-damped micro-steps from
                    // masquerading as convergence
                    if lambda <= opts.initial_damping && decrease <= opts.residual_tol * sse {
                        converged = true;
                    }
                    if lambda <= opts.initial_damping && rel_step < opts.step_tol {
                        converged = true;
                    }
                    sse = sse_new;
                    accepted = true;
                    break;
                }
            }

            lambda *= 10.0;
            if lambda > 1e15 {
                // no descent direction at machine precision
                converged = true;
                break;
            }
        }
        if converged || !accepted {
            break;
        }
    }

    // Polish: Gauss-Newton steps at the reference damping until the proposed
    // step is negligible. This parks the solution at a stationary point, so
    // fitting again from the returned parameters does not move.
    if converged {
        for _ in 0..50 {
            let (jtj, jtr) = normal_equations(&p, &mut row);
            let scale = column_scale(&jtj)?;
            let Some(delta) = damped_step(&jtj, &jtr, &scale, opts.initial_damping) else {
                break;
            };
            if rel_step_of(&delta, &p) < opts.step_tol * 1e-3 {
                break;
            }
            let mut p_new: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + d).collect();
            project(&mut p_new, &layout, f_lo, f_hi, min_fwhm);
            let sse_new = sse_at(&layout, &p_new, x, y);
            if sse_new < sse && sse_new.is_finite() {
                p = p_new;
                sse = sse_new;
                if iterations < opts.max_iterations {
                    iterations += 1;
                }
            } else {
                break;
            }
        }
    }

    // covariance = sse/(n-p) * (JtJ)^-1, computed in correlation form
    let mut jtj = vec![vec![0.0; np]; np];
    for &f in x {
        jacobian_row(&layout, &p, f, &mut row);
        for a in 0..np {
            for b in 0..=a {
                jtj[a][b] += row[a] * row[b];
            }
        }
    }
    for a in 0..np {
        for b in a + 1..np {
            jtj[a][b] = jtj[b][a];
        }
    }
    let mut scale = vec![0.0; np];
    for (i, sc) in scale.iter_mut().enumerate() {
        let d = jtj[i][i];
        if d <= 0.0 || !d.is_finite() {
            return Err(FitError::DegenerateFit {
                params: vec![layout.name(i)],
            });
        }
        *sc = d.sqrt();
    }
    let dof = (x.len() - np).max(1) as f64;
    let sigma2 = sse / dof;

    let mut corr_inv = None;
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut a = vec![vec![0.0; np]; np];
        for i in 0..np {
            for j in 0..np {
                a[i][j] = jtj[i][j] / (scale[i] * scale[j]);
            }
            a[i][i] += jitter;
        }
        match cholesky(&mut a) {
            Ok(()) => {
                corr_inv = Some(cholesky_inverse(&a));
                break;
            }
            Err(_) => {
                jitter = if jitter == 0.0 { 1e-14 } else { jitter * 100.0 };
            }
        }
    }
    let corr_inv = corr_inv.ok_or_else(|| FitError::DegenerateFit {
        params: (0..np).map(|i| layout.name(i)).collect(),
    })?;

    let cov_internal: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            (0..np)
                .map(|j| sigma2 * corr_inv[i][j] / (scale[i] * scale[j]))
                .collect()
        })
        .collect();

    // expand to the external (1+3n) shape; shared-fwhm entries are duplicated
    let n_ext = 1 + 3 * n_peaks;
    let mut covariance = vec![vec![0.0; n_ext]; n_ext];
    for i in 0..n_ext {
        for j in 0..n_ext {
            covariance[i][j] =
                cov_internal[layout.external_to_internal(i)][layout.external_to_internal(j)];
        }
    }

    let mut model = layout.unpack(&p);
    // report peaks in frequency order
    let mut order: Vec<usize> = (0..n_peaks).collect();
    order.sort_by(|&a, &b| {
        model.peaks[a]
            .center_hz
            .partial_cmp(&model.peaks[b].center_hz)
            .unwrap()
    });
    if order.iter().enumerate().any(|(i, &o)| i != o) {
        let peaks = order.iter().map(|&o| model.peaks[o]).collect();
        let mut cov2 = vec![vec![0.0; n_ext]; n_ext];
        let remap = |i: usize| -> usize {
            if i == 0 {
                0
            } else {
                let k = (i - 1) / 3;
                let slot = (i - 1) % 3;
                1 + 3 * order.iter().position(|&o| o == k).unwrap() + slot
            }
        };
        for i in 0..n_ext {
            for j in 0..n_ext {
                cov2[remap(i)][remap(j)] = covariance[i][j];
            }
        }
        covariance = cov2;
        model = FitModel {
            baseline: model.baseline,
            peaks,
        };
    }

    Ok(FitResult {
        model,
        covariance,
        residual_norm: sse.sqrt(),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineshape::{frequency_grid, synthesize};

    const D: f64 = 2.87e9;

    fn single_dip(noise: f64, seed: u64) -> Spectrum {
        let p = LorentzianPeak::new(D, 9e6, 0.02).unwrap();
        synthesize(&[p], &frequency_grid(D, 5e8, 601), noise, seed).unwrap()
    }

    #[test]
    fn model_eval_matches_dip_arithmetic() {
        let m = FitModel {
            baseline: 1.0,
            peaks: vec![LorentzianPeak::new(D, 9e6, 0.02).unwrap()],
        };
        assert_eq!(m.eval(D), 1.0 - 0.02);
        assert!((m.eval(D + 4.5e6) - (1.0 - 0.01)).abs() < 1e-15);
        assert_eq!(m.derivative(D), 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let m = FitModel {
            baseline: 1.0,
            peaks: vec![
                LorentzianPeak::new(D - 2e7, 9e6, 0.02).unwrap(),
                LorentzianPeak::new(D + 1e7, 2.1e7, 0.01).unwrap(),
            ],
        };
        for f in [D - 3e7, D - 5e6, D + 3e6, D + 2e7] {
            let h = 10.0;
            let fd = (m.eval(f + h) - m.eval(f - h)) / (2.0 * h);
            assert!((m.derivative(f) - fd).abs() < 1e-14, "at {f}");
        }
    }

    #[test]
    fn detect_finds_a_single_noiseless_dip() {
        let s = single_dip(0.0, 0);
        let found = detect_peaks(&s, 0.005);
        assert_eq!(found.len(), 1);
        assert!((found[0].center_hz - D).abs() <= s.mean_step_hz());
        assert!((found[0].fwhm_hz - 9e6).abs() < 3e6);
        assert!((found[0].contrast - 0.02).abs() < 0.005);
    }

    #[test]
    fn detect_returns_empty_for_flat_spectrum() {
        let s = Spectrum::new(
            frequency_grid(D, 5e8, 201),
            vec![1.0; 201],
        )
        .unwrap();
        assert!(detect_peaks(&s, 0.005).is_empty());
    }

    #[test]
    fn noiseless_fit_with_exact_init_recovers_parameters() {
        let s = single_dip(0.0, 0);
        let init = [LorentzianPeak::new(D, 9e6, 0.02).unwrap()];
        let r = fit(&s, 1, Some(&init), &FitOptions::default()).unwrap();
        assert!(r.converged);
        let p = &r.model.peaks[0];
        assert!((p.center_hz - D).abs() < 1e-6 * D);
        assert!((p.fwhm_hz - 9e6).abs() < 1e-6 * 9e6);
        assert!((p.contrast - 0.02).abs() < 1e-6 * 0.02);
        assert!((r.model.baseline - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_fit_from_detection_recovers_parameters() {
        let s = single_dip(0.0, 0);
        let r = fit(&s, 1, None, &FitOptions::default()).unwrap();
        assert!(r.converged);
        let p = &r.model.peaks[0];
        assert!((p.center_hz - D).abs() < 1.0);
        assert!((p.fwhm_hz - 9e6).abs() < 10.0);
        assert!((p.contrast - 0.02).abs() < 1e-8);
    }

    #[test]
    fn refit_from_solution_is_a_fixed_point() {
        let s = single_dip(1e-3, 11);
        let first = fit(&s, 1, None, &FitOptions::default()).unwrap();
        let opts = FitOptions {
            init_baseline: Some(first.model.baseline),
            ..FitOptions::default()
        };
        let second = fit(&s, 1, Some(&first.model.peaks), &opts).unwrap();
        let a = &first.model.peaks[0];
        let b = &second.model.peaks[0];
        assert!((a.center_hz - b.center_hz).abs() <= 1e-10 * a.center_hz.abs());
        assert!((a.fwhm_hz - b.fwhm_hz).abs() <= 1e-10 * a.fwhm_hz);
        assert!((a.contrast - b.contrast).abs() <= 1e-10 * a.contrast);
    }

    #[test]
    fn residual_never_exceeds_initial_guess_residual() {
        let s = single_dip(1e-3, 3);
        let init = [LorentzianPeak::new(D + 2e7, 1.5e7, 0.01).unwrap()];
        let r = fit(&s, 1, Some(&init), &FitOptions::default()).unwrap();
        let init_model = FitModel {
            baseline: 1.0,
            peaks: init.to_vec(),
        };
        let init_sse: f64 = s
            .freqs_hz()
            .iter()
            .zip(s.signal())
            .map(|(&f, &y)| (y - init_model.eval(f)).powi(2))
            .sum();
        assert!(r.residual_norm <= init_sse.sqrt());
    }

    #[test]
    fn shift_equivariance() {
        let delta = 3.7e6;
        let s = single_dip(1e-3, 5);
        let shifted = Spectrum::new(
            s.freqs_hz().iter().map(|f| f + delta).collect(),
            s.signal().to_vec(),
        )
        .unwrap();
        let r0 = fit(&s, 1, None, &FitOptions::default()).unwrap();
        let r1 = fit(&shifted, 1, None, &FitOptions::default()).unwrap();
        let p0 = &r0.model.peaks[0];
        let p1 = &r1.model.peaks[0];
        assert!((p1.center_hz - (p0.center_hz + delta)).abs() < 1e-9 * p0.center_hz);
        assert!((p1.fwhm_hz - p0.fwhm_hz).abs() < 1e-9 * p0.fwhm_hz);
        assert!((p1.contrast - p0.contrast).abs() < 1e-9 * p0.contrast);
    }

    #[test]
    fn scale_equivariance() {
        let k = 2.5;
        let s = single_dip(1e-3, 6);
        let scaled = Spectrum::new(
            s.freqs_hz().to_vec(),
            s.signal().iter().map(|y| 1.0 + k * (y - 1.0)).collect(),
        )
        .unwrap();
        let r0 = fit(&s, 1, None, &FitOptions::default()).unwrap();
        let r1 = fit(&scaled, 1, None, &FitOptions::default()).unwrap();
        let p0 = &r0.model.peaks[0];
        let p1 = &r1.model.peaks[0];
        assert!((p1.contrast - k * p0.contrast).abs() < 1e-9 * (k * p0.contrast));
        assert!((p1.center_hz - p0.center_hz).abs() < 1e-9 * p0.center_hz);
    }

    #[test]
    fn iteration_budget_exhaustion_reports_not_converged() {
        let s = single_dip(1e-3, 9);
        let init = [LorentzianPeak::new(D + 8e7, 4e7, 0.005).unwrap()];
        let opts = FitOptions {
            max_iterations: 1,
            ..FitOptions::default()
        };
        let r = fit(&s, 1, Some(&init), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn missing_candidates_raise_insufficient_guesses() {
        let s = single_dip(0.0, 0);
        let err = fit(&s, 3, None, &FitOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            FitError::InsufficientGuesses { needed: 3, found: 1 }
        ));
    }

    #[test]
    fn out_of_window_peak_is_degenerate() {
        let s = single_dip(0.0, 0);
        // a dip 1e6 linewidths away has identically-zero partials in f64
        let init = [
            LorentzianPeak::new(D, 9e6, 0.02).unwrap(),
            LorentzianPeak::new(D + 1e15, 1.0, 0.5).unwrap(),
        ];
        // center clamps back into the window, but contrast column of the
        // coincident duplicate makes the normal matrix singular only in
        // exact arithmetic; the far peak with zero-width sensitivity is the
        // reliable degenerate case
        let r = fit(&s, 2, Some(&init), &FitOptions::default());
        match r {
            Err(FitError::DegenerateFit { .. }) => {}
            Ok(res) => {
                // acceptable alternative: the projection pulled the stray peak
                // into the window and the fit still converged
                assert!(res.converged);
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn covariance_is_symmetric_positive_semidefinite() {
        let s = single_dip(1e-3, 21);
        let r = fit(&s, 1, None, &FitOptions::default()).unwrap();
        let c = &r.covariance;
        let n = c.len();
        assert_eq!(n, 4);
        for i in 0..n {
            for j in 0..n {
                assert!((c[i][j] - c[j][i]).abs() <= 1e-9 * c[i][i].max(c[j][j]).max(1e-300));
            }
            assert!(c[i][i] >= 0.0);
        }
        // diagonal dominance of the determinant sign via Cholesky
        let mut a: Vec<Vec<f64>> = c.clone();
        // jitter for semidefinite tolerance
        for i in 0..n {
            a[i][i] += 1e-12 * c[i][i].max(1e-300);
        }
        assert!(cholesky(&mut a).is_ok());
    }

    #[test]
    fn shared_fwhm_fit_keeps_full_covariance_shape() {
        let peaks = [
            LorentzianPeak::new(D - 5e6, 2.1e7, 0.01).unwrap(),
            LorentzianPeak::new(D + 5e6, 2.1e7, 0.01).unwrap(),
        ];
        let s = synthesize(&peaks, &frequency_grid(D, 5e8, 601), 1e-4, 17).unwrap();
        let opts = FitOptions {
            shared_fwhm: true,
            ..FitOptions::default()
        };
        let init = initial_guesses(&s, 2, 0.005).unwrap();
        let r = fit(&s, 2, Some(&init), &opts).unwrap();
        assert!(r.converged);
        assert_eq!(r.covariance.len(), 7);
        assert_eq!(r.model.peaks[0].fwhm_hz, r.model.peaks[1].fwhm_hz);
        // duplicated shared-linewidth rows
        assert_eq!(r.covariance[2][2], r.covariance[5][5]);
    }

    #[test]
    fn initial_guesses_split_unresolved_profiles() {
        let peaks = [
            LorentzianPeak::new(D - 5e6, 2.1e7, 0.02).unwrap(),
            LorentzianPeak::new(D + 5e6, 2.1e7, 0.02).unwrap(),
        ];
        let s = synthesize(&peaks, &frequency_grid(D, 5e8, 601), 0.0, 0).unwrap();
        assert_eq!(detect_peaks(&s, 0.005).len(), 1);
        let init = initial_guesses(&s, 2, 0.005).unwrap();
        assert_eq!(init.len(), 2);
        assert!(init[0].center_hz < init[1].center_hz);
    }
}
