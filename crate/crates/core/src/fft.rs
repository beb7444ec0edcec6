//! Square 2D complex FFTs on row-major `N x N` buffers.
//!
//! Plans are cached per thread and per size. The forward transform is
//! unnormalized; the inverse divides by `N^2`, so `inverse(forward(x)) == x`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<Plan> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Rc::new(Plan {
                    forward: planner.plan_fft_forward(n),
                    inverse: planner.plan_fft_inverse(n),
                })
            })
            .clone()
    })
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

fn transform(buf: &mut [Complex64], n: usize, fft: &dyn Fft<f64>) {
    assert_eq!(buf.len(), n * n, "buffer is not N x N");
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(buf, &mut scratch);
    transpose(buf, n);
    fft.process_with_scratch(buf, &mut scratch);
    transpose(buf, n);
}

/// Unnormalized forward DFT: `X[k] = sum_x x[x] exp(-2 pi i k.x / N)`.
pub fn forward(buf: &mut [Complex64], n: usize) {
    let p = plan(n);
    transform(buf, n, p.forward.as_ref());
}

/// Inverse DFT including the `1/N^2` factor.
pub fn inverse(buf: &mut [Complex64], n: usize) {
    let p = plan(n);
    transform(buf, n, p.inverse.as_ref());
    let scale = 1.0 / (n * n) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Forward transform of a real grid.
pub fn forward_real(grid: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = grid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward(&mut buf, n);
    buf
}

/// Inverse transform, keeping the real part.
pub fn inverse_real(mut spec: Vec<Complex64>, n: usize) -> Vec<f64> {
    inverse(&mut spec, n);
    spec.into_iter().map(|c| c.re).collect()
}

/// Forward transforms of two real grids using one complex FFT.
pub fn forward_real_pair(a: &[f64], b: &[f64], n: usize) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
    forward(&mut z, n);
    let mut fa = vec![Complex64::default(); n * n];
    let mut fb = vec![Complex64::default(); n * n];
    for iy in 0..n {
        let cy = conjugate_index(iy, n);
        for ix in 0..n {
            let zk = z[iy * n + ix];
            let zc = z[cy * n + conjugate_index(ix, n)].conj();
            fa[iy * n + ix] = (zk + zc) * 0.5;
            fb[iy * n + ix] = Complex64::new(0.0, -0.5) * (zk - zc);
        }
    }
    (fa, fb)
}

/// Inverse transforms of two Hermitian spectra using one complex FFT.
pub fn inverse_real_pair(a: &[Complex64], b: &[Complex64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let i = Complex64::new(0.0, 1.0);
    let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| x + i * y).collect();
    inverse(&mut z, n);
    (z.iter().map(|c| c.re).collect(), z.iter().map(|c| c.im).collect())
}

/// Signed integer wavenumber of DFT index `i` on an `n`-point grid.
/// The Nyquist index maps to `+n/2`.
#[inline]
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Index of the conjugate-partner mode `-k`.
#[inline]
pub fn conjugate_index(i: usize, n: usize) -> usize {
    (n - i) % n
}

/// Squared wavenumber magnitude of mode `(ix, iy)` (x index inner).
#[inline]
pub fn k_squared(ix: usize, iy: usize, n: usize) -> i64 {
    let kx = wavenumber(ix, n);
    let ky = wavenumber(iy, n);
    kx * kx + ky * ky
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let n = 16;
        let grid: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let back = inverse_real(forward_real(&grid, n), n);
        for (a, b) in grid.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_harmonic_lands_in_one_mode_pair() {
        let n = 8;
        let grid: Vec<f64> = (0..n * n)
            .map(|i| {
                let x = (i % n) as f64;
                (2.0 * std::f64::consts::PI * 2.0 * x / n as f64).cos()
            })
            .collect();
        let spec = forward_real(&grid, n);
        for (i, c) in spec.iter().enumerate() {
            let (ix, iy) = (i % n, i / n);
            let expected = if iy == 0 && (ix == 2 || ix == n - 2) { (n * n) as f64 / 2.0 } else { 0.0 };
            assert!((c.norm() - expected).abs() < 1e-9, "mode ({ix},{iy}) = {c}");
        }
    }

    #[test]
    fn paired_transforms_match_single() {
        let n = 8;
        let a: Vec<f64> = (0..n * n).map(|i| ((i * 13) % 7) as f64).collect();
        let b: Vec<f64> = (0..n * n).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
        let (fa, fb) = forward_real_pair(&a, &b, n);
        let (sa, sb) = (forward_real(&a, n), forward_real(&b, n));
        for k in 0..n * n {
            assert!((fa[k] - sa[k]).norm() < 1e-10 && (fb[k] - sb[k]).norm() < 1e-10);
        }
        let (ra, rb) = inverse_real_pair(&fa, &fb, n);
        for k in 0..n * n {
            assert!((ra[k] - a[k]).abs() < 1e-12 && (rb[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn wavenumbers_are_signed() {
        assert_eq!(wavenumber(0, 8), 0);
        assert_eq!(wavenumber(4, 8), 4);
        assert_eq!(wavenumber(5, 8), -3);
        assert_eq!(conjugate_index(0, 8), 0);
        assert_eq!(conjugate_index(3, 8), 5);
    }
}
