use std::cell::RefCell;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Real-input DFT of a fixed length with its inverse and both adjoints.
///
/// `forward` is the unnormalized transform `X_f = sum_k x_k e^{-2 pi i f k / N}`
/// over the `N/2 + 1` non-negative bins. `inverse` is the unnormalized
/// Hermitian synthesis (no `1/N`); imaginary parts at DC and Nyquist are ignored.
#[derive(Clone)]
pub struct RealDft {
    n: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for RealDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealDft").field("n", &self.n).finish()
    }
}

impl RealDft {
    pub fn new(n: usize) -> Self {
        let (r2c, c2r) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        });
        Self { n, r2c, c2r }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_bins(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn forward(&self, x: &[f64], out: &mut [Complex<f64>]) {
        let mut buf = x.to_vec();
        self.r2c.process(&mut buf, out).expect("forward dft buffer sizes");
    }

    pub fn inverse(&self, spec: &[Complex<f64>], out: &mut [f64]) {
        let mut buf = spec.to_vec();
        buf[0].im = 0.0;
        if self.n % 2 == 0 {
            let last = buf.len() - 1;
            buf[last].im = 0.0;
        }
        self.c2r.process(&mut buf, out).expect("inverse dft buffer sizes");
    }

    /// Adjoint of `forward`: maps bin cotangents back to sample cotangents.
    pub fn forward_adjoint(&self, grad: &[Complex<f64>], out: &mut [f64]) {
        let nb = self.n_bins();
        let mut z: Vec<Complex<f64>> = grad.iter().map(|g| g * 0.5).collect();
        z[0] = Complex::new(grad[0].re, 0.0);
        if self.n % 2 == 0 {
            z[nb - 1] = Complex::new(grad[nb - 1].re, 0.0);
        }
        self.c2r.process(&mut z, out).expect("adjoint dft buffer sizes");
    }

    /// Adjoint of `inverse`: maps sample cotangents back to bin cotangents.
    pub fn inverse_adjoint(&self, grad: &[f64], out: &mut [Complex<f64>]) {
        let nb = self.n_bins();
        self.forward(grad, out);
        for (f, v) in out.iter_mut().enumerate() {
            let edge = f == 0 || (self.n % 2 == 0 && f == nb - 1);
            if edge {
                *v = Complex::new(v.re, 0.0);
            } else {
                *v *= 2.0;
            }
        }
    }
}
