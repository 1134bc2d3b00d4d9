//! Iterative radix-2 FFT for real frames.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{config_err, Result};

#[derive(Debug, Clone)]
pub struct Fft {
    size: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 || !size.is_power_of_two() {
            return Err(config_err!("fft size {size} is not a power of two >= 2"));
        }
        let half = size / 2;
        let (cos, sin) = (0..half)
            .map(|k| {
                let angle = -2.0 * PI * k as f64 / size as f64;
                (libm::cos(angle), libm::sin(angle))
            })
            .unzip();
        let bits = size.trailing_zeros();
        let bitrev = (0..size).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
        Ok(Self { size, cos, sin, bitrev })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Transforms `re`/`im` in place. Both slices must have length `size`.
    pub fn transform(&self, re: &mut [f64], im: &mut [f64]) {
        debug_assert_eq!(re.len(), self.size);
        debug_assert_eq!(im.len(), self.size);
        for i in 0..self.size {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.size {
            let step = self.size / len;
            let half = len / 2;
            for start in (0..self.size).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    /// One-sided power spectrum `|X_k|^2`, `k = 0..=size/2`, of a real input
    /// zero-padded to `size`.
    pub fn power(&self, input: &[f64]) -> Vec<f64> {
        let mut re = vec![0.0; self.size];
        let mut im = vec![0.0; self.size];
        re[..input.len()].copy_from_slice(input);
        self.transform(&mut re, &mut im);
        re.iter()
            .zip(&im)
            .take(self.size / 2 + 1)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }
}
