//! Square 2-D discrete Fourier transform and the low/high frequency split
//! used by the frequency adapter.
//!
//! The transform is the plain separable DFT (rows, then columns). Grids are
//! at most a few dozen bins per side here, so no FFT is needed.

use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexGrid {
            height,
            width,
            real: vec![0.0; height * width],
            imag: vec![0.0; height * width],
        }
    }

    pub fn magnitude_sq(&self, idx: usize) -> f64 {
        self.real[idx] * self.real[idx] + self.imag[idx] * self.imag[idx]
    }

    pub fn energy(&self) -> f64 {
        (0..self.real.len()).map(|i| self.magnitude_sq(i)).sum()
    }
}

fn twiddles(n: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut c = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for k in 0..n {
        let a = sign * 2.0 * PI * k as f64 / n as f64;
        c.push(a.cos());
        s.push(a.sin());
    }
    (c, s)
}

/// In-place 1-D DFT along rows (`stride` 1) or columns (`stride` = width).
fn transform_lines(re: &mut [f64], im: &mut [f64], g: usize, along_rows: bool, sign: f64) {
    let (cos, sin) = twiddles(g, sign);
    let mut line_re = vec![0.0; g];
    let mut line_im = vec![0.0; g];
    for line in 0..g {
        let at = |k: usize| if along_rows { line * g + k } else { k * g + line };
        for k in 0..g {
            let (mut acc_re, mut acc_im) = (0.0, 0.0);
            for n in 0..g {
                let t = (k * n) % g;
                let (xr, xi) = (re[at(n)], im[at(n)]);
                acc_re += xr * cos[t] - xi * sin[t];
                acc_im += xr * sin[t] + xi * cos[t];
            }
            line_re[k] = acc_re;
            line_im[k] = acc_im;
        }
        for k in 0..g {
            re[at(k)] = line_re[k];
            im[at(k)] = line_im[k];
        }
    }
}

fn square_side(shape: &[usize]) -> Result<usize> {
    match shape {
        [h, w] if h == w && *h >= 1 => Ok(*h),
        _ => Err(Error::Shape(format!("expected a non-empty square grid, got {shape:?}"))),
    }
}

/// Unnormalized forward DFT of a real square grid.
pub fn dft2(x: &Tensor) -> Result<ComplexGrid> {
    let g = square_side(x.shape())?;
    let mut out = ComplexGrid {
        height: g,
        width: g,
        real: x.data().to_vec(),
        imag: vec![0.0; g * g],
    };
    transform_lines(&mut out.real, &mut out.imag, g, true, -1.0);
    transform_lines(&mut out.real, &mut out.imag, g, false, -1.0);
    Ok(out)
}

/// Inverse DFT (with the `1/g²` factor); returns the real part.
pub fn idft2(x: &ComplexGrid) -> Result<Tensor> {
    let g = square_side(&[x.height, x.width])?;
    let mut re = x.real.clone();
    let mut im = x.imag.clone();
    transform_lines(&mut re, &mut im, g, true, 1.0);
    transform_lines(&mut re, &mut im, g, false, 1.0);
    let norm = 1.0 / (g * g) as f64;
    Tensor::new(&[g, g], re.into_iter().map(|v| v * norm).collect())
}

fn signed_freq(k: usize, g: usize) -> usize {
    if k <= g / 2 {
        k
    } else {
        g - k
    }
}

/// Square low-pass mask in DC-centered coordinates.
///
/// Bin `(ky, kx)` is low-frequency when both `|fy|` and `|fx|` are at most
/// `floor(cutoff · g / 2)`, where `f` is the signed frequency. The mask is
/// symmetric under `k → g − k`, so the low-pass of a real grid is real.
pub fn low_pass_mask(g: usize, cutoff: f64) -> Vec<bool> {
    let radius = (cutoff * g as f64 / 2.0).floor() as usize;
    (0..g * g)
        .map(|idx| {
            let (ky, kx) = (idx / g, idx % g);
            signed_freq(ky, g) <= radius && signed_freq(kx, g) <= radius
        })
        .collect()
}

/// Splits a real square grid into its low- and high-frequency parts.
/// The parts sum back to the input.
pub fn frequency_split(x: &Tensor, cutoff: f64) -> Result<(Tensor, Tensor)> {
    let g = square_side(x.shape())?;
    let mask = low_pass_mask(g, cutoff);
    let spec = dft2(x)?;
    let mut low = spec.clone();
    let mut high = spec;
    for (i, &keep_low) in mask.iter().enumerate() {
        let target = if keep_low { &mut high } else { &mut low };
        target.real[i] = 0.0;
        target.imag[i] = 0.0;
    }
    Ok((idft2(&low)?, idft2(&high)?))
}

/// Low-pass each column of an `l×d` token matrix viewed as a `g×g` grid
/// (token `p` sits at row `p / g`, column `p % g`).
pub fn lowpass_tokens(tokens: &Tensor, g: usize, mask: &[bool]) -> Result<Tensor> {
    let (l, d) = (tokens.rows(), tokens.cols());
    if tokens.shape().len() != 2 || l != g * g || mask.len() != l {
        return Err(Error::Shape(format!(
            "lowpass over a {g}x{g} grid needs {} tokens, got shape {:?}",
            g * g,
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; l * d];
    let mut re = vec![0.0; l];
    let mut im = vec![0.0; l];
    let norm = 1.0 / l as f64;
    for c in 0..d {
        for p in 0..l {
            re[p] = tokens.data()[p * d + c];
            im[p] = 0.0;
        }
        transform_lines(&mut re, &mut im, g, true, -1.0);
        transform_lines(&mut re, &mut im, g, false, -1.0);
        for (p, &keep) in mask.iter().enumerate() {
            if !keep {
                re[p] = 0.0;
                im[p] = 0.0;
            }
        }
        transform_lines(&mut re, &mut im, g, true, 1.0);
        transform_lines(&mut re, &mut im, g, false, 1.0);
        for p in 0..l {
            out[p * d + c] = re[p] * norm;
        }
    }
    Tensor::new(&[l, d], out)
}
