//! Fixed-capacity ambient-coordinate vector.
//!
//! Points and tangents live in low-dimensional ambient embeddings (at most
//! a handful of sphere factors), so kernels pass coordinates around in a
//! stack-allocated, `Copy` container instead of heap vectors.

use crate::scalar::Scalar;
use std::ops::{Deref, DerefMut};

/// Largest supported ambient dimension across all product factors.
pub const MAX_AMBIENT: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct AVec<S> {
    len: u8,
    buf: [S; MAX_AMBIENT],
}

impl<S: Scalar> AVec<S> {
    #[inline]
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_AMBIENT, "ambient dimension {n} exceeds {MAX_AMBIENT}");
        Self { len: n as u8, buf: [S::zero(); MAX_AMBIENT] }
    }

    #[inline]
    pub fn from_slice(s: &[S]) -> Self {
        let mut v = Self::zeros(s.len());
        v.buf[..s.len()].copy_from_slice(s);
        v
    }

    #[inline]
    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> AVec<T> {
        let mut out = AVec::<T>::zeros(self.len());
        for i in 0..self.len() {
            out[i] = f(self[i]);
        }
        out
    }
}

impl<S> Deref for AVec<S> {
    type Target = [S];
    #[inline]
    fn deref(&self) -> &[S] {
        &self.buf[..self.len as usize]
    }
}

impl<S> DerefMut for AVec<S> {
    #[inline]
    fn deref_mut(&mut self) -> &mut [S] {
        &mut self.buf[..self.len as usize]
    }
}
