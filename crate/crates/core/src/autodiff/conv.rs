//! Same-padding 1-D convolution kernels on time-major buffers.

use super::tensor::Shape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(len: usize, c_in: usize, kernel: Shape, bias: Shape, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv1d: kernel size must be odd, got {k}")));
        }
        if len == 0 {
            return Err(Error::Shape("conv1d: empty input sequence".into()));
        }
        let Shape::Matrix(rows, c_out) = kernel else {
            return Err(Error::Shape(format!("conv1d: kernel must be a matrix, got {kernel}")));
        };
        if rows != k * c_in {
            return Err(Error::Shape(format!(
                "conv1d: kernel has {rows} rows, expected K * C_in = {k} * {c_in}"
            )));
        }
        if bias != Shape::Vector(c_out) {
            return Err(Error::Shape(format!("conv1d: bias shape {bias}, expected ({c_out},)")));
        }
        Ok(Geometry {
            len,
            c_in,
            c_out,
            k,
            pad: (k - 1) / 2,
        })
    }

    /// Input row read by output row `t` at tap `j`, if inside the sequence.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        (t + j).checked_sub(self.pad).filter(|&s| s < self.len)
    }
}

pub(crate) fn forward(g: &Geometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len * g.c_out);
    for _ in 0..g.len {
        out.extend_from_slice(b);
    }
    for t in 0..g.len {
        let row = &mut out[t * g.c_out..(t + 1) * g.c_out];
        for j in 0..g.k {
            let Some(s) = g.source(t, j) else { continue };
            let xrow = &x[s * g.c_in..(s + 1) * g.c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(j * g.c_in + ci) * g.c_out..][..g.c_out];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(g: &Geometry, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    for t in 0..g.len {
        let dyrow = &dy[t * g.c_out..(t + 1) * g.c_out];
        for j in 0..g.k {
            let Some(s) = g.source(t, j) else { continue };
            let dxrow = &mut dx[s * g.c_in..(s + 1) * g.c_in];
            for (ci, d) in dxrow.iter_mut().enumerate() {
                let wrow = &w[(j * g.c_in + ci) * g.c_out..][..g.c_out];
                *d += wrow.iter().zip(dyrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

pub(crate) fn backward_kernel(g: &Geometry, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    for t in 0..g.len {
        let dyrow = &dy[t * g.c_out..(t + 1) * g.c_out];
        for j in 0..g.k {
            let Some(s) = g.source(t, j) else { continue };
            let xrow = &x[s * g.c_in..(s + 1) * g.c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let dwrow = &mut dw[(j * g.c_in + ci) * g.c_out..][..g.c_out];
                for (d, &e) in dwrow.iter_mut().zip(dyrow) {
                    *d += xv * e;
                }
            }
        }
    }
}

pub(crate) fn backward_bias(g: &Geometry, dy: &[f64], db: &mut [f64]) {
    for t in 0..g.len {
        for (d, &e) in db.iter_mut().zip(&dy[t * g.c_out..(t + 1) * g.c_out]) {
            *d += e;
        }
    }
}
