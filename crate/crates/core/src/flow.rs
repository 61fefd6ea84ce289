//! Optical-flow fields, backward warping and the photometric occlusion mask.

use crate::error::{shape_err, Result};
use crate::tensor::{kernels, Tensor};

/// Default mask sharpness.
pub const DEFAULT_MASK_BETA: f64 = 50.0;

/// Per-pixel displacement `(du, dv)` in pixels from this frame's grid into a
/// neighbouring frame, plus the pixels whose correspondence is unreliable.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// `[2, H, W]`: the `du` plane followed by the `dv` plane.
    flow: Vec<f64>,
    occluded: Vec<bool>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, flow: Vec<f64>, occluded: Vec<bool>) -> Result<Self> {
        if flow.len() != 2 * height * width || occluded.len() != height * width {
            return shape_err(format!("flow buffers do not match {height}x{width}"));
        }
        if flow.iter().any(|v| !v.is_finite()) {
            return Err(crate::SvdcError::InvalidArgument("flow has non-finite entries".into()));
        }
        Ok(Self { height, width, flow, occluded })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, flow: vec![0.0; 2 * height * width], occluded: vec![false; height * width] }
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        let hw = height * width;
        let mut flow = vec![du; 2 * hw];
        flow[hw..].fill(dv);
        Self { height, width, flow, occluded: vec![false; hw] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn du(&self) -> &[f64] {
        &self.flow[..self.height * self.width]
    }

    pub fn dv(&self) -> &[f64] {
        &self.flow[self.height * self.width..]
    }

    pub fn raw(&self) -> &[f64] {
        &self.flow
    }

    pub fn occluded(&self) -> &[bool] {
        &self.occluded
    }

    pub fn set_occluded(&mut self, occluded: Vec<bool>) -> Result<()> {
        if occluded.len() != self.height * self.width {
            return shape_err("occlusion mask size mismatch");
        }
        self.occluded = occluded;
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let p = y * self.width + x;
        (self.flow[p], self.flow[self.height * self.width + p])
    }

    /// Flow as a `[2, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![2, self.height, self.width], self.flow.clone()).expect("flow layout")
    }

    /// Block-averaged flow at `1/factor` resolution with displacements
    /// divided by `factor`. A coarse pixel is occluded if any fine pixel is.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return shape_err(format!("{}x{} not divisible by {factor}", self.height, self.width));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let hw_fine = self.height * self.width;
        let mut flow = vec![0.0; 2 * h * w];
        let mut occ = vec![false; h * w];
        let norm = (factor * factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 2];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = (y * factor + dy) * self.width + x * factor + dx;
                        acc[0] += self.flow[p];
                        acc[1] += self.flow[hw_fine + p];
                        occ[y * w + x] |= self.occluded[p];
                    }
                }
                flow[y * w + x] = acc[0] / norm;
                flow[h * w + y * w + x] = acc[1] / norm;
            }
        }
        Ok(Self { height: h, width: w, flow, occluded: occ })
    }
}

/// `out(x) = src(x + flow(x))` with clamp-to-edge bilinear sampling.
pub fn warp_backward(src: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = src.dims3()?;
    if flow.height != h || flow.width != w {
        return shape_err(format!("flow {}x{} does not match source {h}x{w}", flow.height, flow.width));
    }
    Tensor::new(vec![c, h, w], kernels::warp_forward(src.data(), c, h, w, &flow.flow))
}

/// `M(x) = exp(-beta * ||a(x) - b(x)||^2)` with the squared norm over channels.
pub fn occlusion_mask(frame: &Tensor, prev_warped: &Tensor, beta: f64) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    if prev_warped.shape() != frame.shape() {
        return shape_err(format!("mask inputs differ: {:?} vs {:?}", frame.shape(), prev_warped.shape()));
    }
    if beta <= 0.0 {
        return Err(crate::SvdcError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let hw = h * w;
    let (a, b) = (frame.data(), prev_warped.data());
    let mask = (0..hw)
        .map(|p| {
            let d2: f64 = (0..c).map(|ch| (a[ch * hw + p] - b[ch * hw + p]).powi(2)).sum();
            (-beta * d2).exp()
        })
        .collect();
    Tensor::new(vec![1, h, w], mask)
}

/// Occlusion mask between `frame` and `prev` warped onto `frame` by `flow`,
/// additionally zeroed where `flow` marks occlusion.
pub fn warped_mask(frame: &Tensor, prev: &Tensor, flow: &FlowField, beta: f64) -> Result<Tensor> {
    let warped = warp_backward(prev, flow)?;
    let mut m = occlusion_mask(frame, &warped, beta)?;
    for (v, &occ) in m.data_mut().iter_mut().zip(&flow.occluded) {
        if occ {
            *v = 0.0;
        }
    }
    Ok(m)
}
