//! Shared test oracles, written independently of the library code paths they
//! check: a classical Jacobi eigensolver (largest-pivot, explicit rotation
//! matrices) and a brute-force grid-search fitter refined by coordinate
//! golden-section descent.

#![allow(dead_code)]

use nvtherm_core::lineshape::Spectrum;

/// Eigenvalues of a real symmetric 3x3 matrix by classical Jacobi iteration.
///
/// Pivots on the largest off-diagonal element and applies each plane rotation
/// as an explicit matrix product, so the arithmetic shares nothing with the
/// library solver.
pub fn jacobi_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut a = *m;
    let fro: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _ in 0..200 {
        // largest off-diagonal element
        let (mut p, mut q) = (0usize, 1usize);
        let mut max = a[0][1].abs();
        if a[0][2].abs() > max {
            (p, q) = (0, 2);
            max = a[0][2].abs();
        }
        if a[1][2].abs() > max {
            (p, q) = (1, 2);
            max = a[1][2].abs();
        }
        if max <= 1e-16 * fro {
            break;
        }

        let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
        let c = 1.0 / (1.0 + t * t).sqrt();
        let s = t * c;

        let mut g = [[0.0; 3]; 3];
        for (i, row) in g.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        g[p][p] = c;
        g[q][q] = c;
        g[p][q] = s;
        g[q][p] = -s;

        a = mat3_mul(&mat3_mul(&mat3_transpose(&g), &a), &g);
    }

    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Rodrigues rotation matrix about `axis` (normalized internally) by `angle`.
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
        [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
        [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Best-fit parameters of a symmetric two-dip model found by exhaustive
/// search, sharing no code with the least-squares fitter.
#[derive(Debug, Clone, Copy)]
pub struct TwoPeakSolution {
    pub center_lo: f64,
    pub center_hi: f64,
    pub fwhm: f64,
    pub contrast: f64,
    pub sse: f64,
}

fn two_peak_sse(spec: &Spectrum, c1: f64, c2: f64, fwhm: f64, contrast: f64) -> f64 {
    let h = 0.5 * fwhm;
    let h2 = h * h;
    spec.freqs_hz()
        .iter()
        .zip(spec.signal())
        .map(|(&f, &y)| {
            let u1 = f - c1;
            let u2 = f - c2;
            let model = 1.0 - contrast * h2 / (u1 * u1 + h2) - contrast * h2 / (u2 * u2 + h2);
            let r = y - model;
            r * r
        })
        .sum()
}

fn golden_min(mut lo: f64, mut hi: f64, iters: usize, f: &mut dyn FnMut(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Grid search over (c1, c2, fwhm, contrast) followed by cyclic per-coordinate
/// golden-section refinement. Baseline is fixed at 1 (noiseless synthesis).
pub fn two_peak_grid_search(
    spec: &Spectrum,
    center_window: (f64, f64),
    fwhm_window: (f64, f64),
    contrast_window: (f64, f64),
) -> TwoPeakSolution {
    let n_c = 25;
    let n_w = 13;
    let n_k = 13;
    let cs: Vec<f64> = (0..n_c)
        .map(|i| center_window.0 + (center_window.1 - center_window.0) * i as f64 / (n_c - 1) as f64)
        .collect();
    let ws: Vec<f64> = (0..n_w)
        .map(|i| fwhm_window.0 + (fwhm_window.1 - fwhm_window.0) * i as f64 / (n_w - 1) as f64)
        .collect();
    let ks: Vec<f64> = (0..n_k)
        .map(|i| contrast_window.0 + (contrast_window.1 - contrast_window.0) * i as f64 / (n_k - 1) as f64)
        .collect();

    let mut best = TwoPeakSolution {
        center_lo: cs[0],
        center_hi: cs[n_c - 1],
        fwhm: ws[0],
        contrast: ks[0],
        sse: f64::INFINITY,
    };
    for (i, &c1) in cs.iter().enumerate() {
        for &c2 in &cs[i..] {
            for &w in &ws {
                for &k in &ks {
                    let sse = two_peak_sse(spec, c1, c2, w, k);
                    if sse < best.sse {
                        best = TwoPeakSolution {
                            center_lo: c1,
                            center_hi: c2,
                            fwhm: w,
                            contrast: k,
                            sse,
                        };
                    }
                }
            }
        }
    }

    // Cyclic exact line minimization (bisection via golden section) over a
    // fixed window per coordinate, iterated until the centers stop moving.
    // The window stays wider than one coarse-grid cell so the descent can
    // follow diagonal valleys without stalling.
    let r_c = 2.0 * (center_window.1 - center_window.0) / (n_c - 1) as f64;
    let r_w = 2.0 * (fwhm_window.1 - fwhm_window.0) / (n_w - 1) as f64;
    let r_k = 2.0 * (contrast_window.1 - contrast_window.0) / (n_k - 1) as f64;
    for _ in 0..500 {
        let before = (best.center_lo, best.center_hi);
        let (c2, w, k) = (best.center_hi, best.fwhm, best.contrast);
        best.center_lo = golden_min(best.center_lo - r_c, best.center_lo + r_c, 60, &mut |x| {
            two_peak_sse(spec, x, c2, w, k)
        });
        let (c1, w, k) = (best.center_lo, best.fwhm, best.contrast);
        best.center_hi = golden_min(best.center_hi - r_c, best.center_hi + r_c, 60, &mut |x| {
            two_peak_sse(spec, c1, x, w, k)
        });
        let (c1, c2, k) = (best.center_lo, best.center_hi, best.contrast);
        best.fwhm = golden_min(
            (best.fwhm - r_w).max(1.0),
            best.fwhm + r_w,
            60,
            &mut |x| two_peak_sse(spec, c1, c2, x, k),
        );
        let (c1, c2, w) = (best.center_lo, best.center_hi, best.fwhm);
        best.contrast = golden_min(
            (best.contrast - r_k).max(1e-6),
            (best.contrast + r_k).min(0.999),
            60,
            &mut |x| two_peak_sse(spec, c1, c2, w, x),
        );
        let moved = (best.center_lo - before.0)
            .abs()
            .max((best.center_hi - before.1).abs());
        if moved < 0.5 {
            break;
        }
    }
    if best.center_lo > best.center_hi {
        std::mem::swap(&mut best.center_lo, &mut best.center_hi);
    }
    best.sse = two_peak_sse(spec, best.center_lo, best.center_hi, best.fwhm, best.contrast);
    best
}
