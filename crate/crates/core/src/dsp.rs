//! FFT helpers on top of `rustfft`, with a per-thread plan cache.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized forward DFT, in place.
pub fn fft(buf: &mut [Complex64]) {
    if buf.len() <= 1 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

/// Inverse DFT with the `1/N` convention, in place.
pub fn ifft(buf: &mut [Complex64]) {
    if buf.len() <= 1 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()));
    plan.process(buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
}

/// Unnormalized 2-D forward DFT of a row-major `rows x cols` block.
pub fn fft2(buf: &mut [Complex64], rows: usize, cols: usize) {
    debug_assert_eq!(buf.len(), rows * cols);
    for row in buf.chunks_exact_mut(cols) {
        fft(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = buf[r * cols + c];
        }
        fft(&mut column);
        for r in 0..rows {
            buf[r * cols + c] = column[r];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_and_inverts() {
        let x: Vec<Complex64> = (0..12).map(|i| Complex64::new((i as f64).sin(), (i * i) as f64 * 0.1)).collect();
        let mut y = x.clone();
        fft(&mut y);
        for (a, b) in y.iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-10);
        }
        ifft(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
