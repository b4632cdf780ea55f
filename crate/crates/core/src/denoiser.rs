use std::cell::Cell;

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that maps a noisy signal at level `sigma` to a clean estimate.
///
/// Conditioning (instrument label, extractor features) is bound into the
/// implementor, so solvers only see `(x, sigma)`.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Adapts a closure.
pub struct FromFn<F>(pub F);

impl<F> Denoiser for FromFn<F>
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        (self.0)(x, sigma)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        (**self).denoise(x, sigma)
    }
}

/// Wraps a denoiser and counts invocations.
pub struct Counting<D> {
    inner: D,
    calls: Cell<usize>,
}

impl<D: Denoiser> Counting<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: Denoiser> Denoiser for Counting<D> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(x, sigma)
    }
}

/// Returns its input unchanged.
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&self, x: &Tensor, _sigma: f64) -> Result<Tensor> {
        Ok(x.clone())
    }
}
