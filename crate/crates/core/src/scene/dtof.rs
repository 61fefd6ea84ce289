//! Sparse direct time-of-flight sensor simulation.
//!
//! A uniform grid of spots inside the sensor's field of view is pushed
//! through a barrel distortion and a per-frame rigid jitter, then each spot
//! reads the ground-truth depth, may be lost to low reflectance or random
//! dropout, and is perturbed by multiplicative Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DepthFrame;
use crate::error::{Result, SvdcError};
use crate::tensor::{kernels, Tensor};

/// Sensor model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DToFConfig {
    /// Horizontal field of view of the dToF grid, degrees.
    pub fov_deg: f64,
    /// Horizontal field of view of the host RGB camera, degrees.
    pub camera_fov_deg: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Radial coefficient of `r' = r (1 + k1 r^2)`, `r` normalized to the half-diagonal.
    pub distortion_k1: f64,
    pub rot_deg_max: f64,
    pub offset_px_max: f64,
    pub dropout_rate: f64,
    /// Grayscale level in `[0, 1]` below which a spot returns nothing.
    pub reflectance_threshold: f64,
    /// Standard deviation of the multiplicative depth noise.
    pub depth_noise_rel: f64,
    pub seed: u64,
}

/// Noise level giving a sample REL of about 0.06 against the rasterized
/// ground truth on the default scene distribution (see the calibration test).
pub const CALIBRATED_DEPTH_NOISE_REL: f64 = 0.06;

impl Default for DToFConfig {
    fn default() -> Self {
        Self {
            fov_deg: 70.0,
            camera_fov_deg: 90.0,
            grid_rows: 30,
            grid_cols: 40,
            distortion_k1: 0.08,
            rot_deg_max: 1.0,
            offset_px_max: 2.0,
            dropout_rate: 0.05,
            reflectance_threshold: 0.05,
            depth_noise_rel: CALIBRATED_DEPTH_NOISE_REL,
            seed: 0,
        }
    }
}

impl DToFConfig {
    /// All perturbations off: the bare uniform grid reading exact depth.
    pub fn noiseless() -> Self {
        Self {
            distortion_k1: 0.0,
            rot_deg_max: 0.0,
            offset_px_max: 0.0,
            dropout_rate: 0.0,
            reflectance_threshold: 0.0,
            depth_noise_rel: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SvdcError::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1]", self.dropout_rate));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("dToF grid dimensions must be at least 1".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("dToF FOV {} outside (0, 180)", self.fov_deg));
        }
        if !(self.camera_fov_deg > 0.0 && self.camera_fov_deg < 180.0) {
            return bad(format!("camera FOV {} outside (0, 180)", self.camera_fov_deg));
        }
        if self.depth_noise_rel < 0.0 || self.rot_deg_max < 0.0 || self.offset_px_max < 0.0 {
            return bad("noise and jitter bounds must be non-negative".into());
        }
        Ok(())
    }

    fn rng(&self, frame_index: usize, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed, frame_index as u64, stream))
    }
}

/// SplitMix64-style combination of seed, frame and stream.
fn mix(seed: u64, frame: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(frame.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseSample {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub samples: Vec<SparseSample>,
    pub frame_index: usize,
}

/// Spot positions for one frame, in pixel coordinates of an `h x w` image.
pub fn sample_grid_coords(cfg: &DToFConfig, frame_index: usize, (h, w): (usize, usize)) -> Vec<(f64, f64)> {
    let focal = w as f64 / 2.0 / (cfg.camera_fov_deg.to_radians() / 2.0).tan();
    let extent = 2.0 * focal * (cfg.fov_deg.to_radians() / 2.0).tan();
    let pitch = extent / cfg.grid_cols as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half_diag = ((w as f64 / 2.0).powi(2) + (h as f64 / 2.0).powi(2)).sqrt();

    let mut rng = cfg.rng(frame_index, 0);
    let theta = if cfg.rot_deg_max > 0.0 {
        rng.random_range(-cfg.rot_deg_max..=cfg.rot_deg_max).to_radians()
    } else {
        0.0
    };
    let (tx, ty) = if cfg.offset_px_max > 0.0 {
        (
            rng.random_range(-cfg.offset_px_max..=cfg.offset_px_max),
            rng.random_range(-cfg.offset_px_max..=cfg.offset_px_max),
        )
    } else {
        (0.0, 0.0)
    };
    let (sin, cos) = theta.sin_cos();

    let mut out = Vec::with_capacity(cfg.grid_rows * cfg.grid_cols);
    for i in 0..cfg.grid_rows {
        for j in 0..cfg.grid_cols {
            let dx = (j as f64 + 0.5 - cfg.grid_cols as f64 / 2.0) * pitch;
            let dy = (i as f64 + 0.5 - cfg.grid_rows as f64 / 2.0) * pitch;
            let r = (dx * dx + dy * dy).sqrt() / half_diag;
            let k = 1.0 + cfg.distortion_k1 * r * r;
            let (dx, dy) = (dx * k, dy * k);
            let u = cx + cos * dx - sin * dy + tx;
            let v = cy + sin * dx + cos * dy + ty;
            if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
                out.push((u, v));
            }
        }
    }
    out
}

fn grayscale(guidance: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = guidance.dims3()?;
    if c != 3 {
        return Err(SvdcError::Shape(format!("guidance must have 3 channels, got {c}")));
    }
    let hw = h * w;
    let g = guidance.data();
    Ok((0..hw).map(|p| 0.299 * g[p] + 0.587 * g[hw + p] + 0.114 * g[2 * hw + p]).collect())
}

/// Simulated sensor readout for one frame.
pub fn simulate_dtof(depth: &DepthFrame, guidance: &Tensor, cfg: &DToFConfig, frame_index: usize) -> Result<SparseDepth> {
    cfg.validate()?;
    if depth.valid_count() == 0 {
        return Err(SvdcError::EmptyMask);
    }
    let (h, w) = (depth.height(), depth.width());
    let (_, gh, gw) = guidance.dims3()?;
    if (gh, gw) != (h, w) {
        return Err(SvdcError::Shape(format!("guidance {gh}x{gw} does not match depth {h}x{w}")));
    }
    let gray = grayscale(guidance)?;
    let valid_f: Vec<f64> = depth.valid().iter().map(|&v| v as u8 as f64).collect();
    let noise = Normal::new(0.0, cfg.depth_noise_rel.max(0.0)).map_err(|e| SvdcError::InvalidArgument(e.to_string()))?;
    let mut rng = cfg.rng(frame_index, 1);

    let mut samples = Vec::new();
    for (u, v) in sample_grid_coords(cfg, frame_index, (h, w)) {
        // draw every random number up front so one spot's fate never shifts another's
        let drop_draw: f64 = rng.random();
        let eps = noise.sample(&mut rng);
        // reads straddling an invalid pixel return nothing
        if kernels::bilinear_sample(&valid_f, h, w, u, v) < 1.0 - 1e-12 {
            continue;
        }
        if kernels::bilinear_sample(&gray, h, w, u, v) < cfg.reflectance_threshold {
            continue;
        }
        if drop_draw < cfg.dropout_rate {
            continue;
        }
        let truth = kernels::bilinear_sample(depth.depth(), h, w, u, v);
        let d = (truth * (1.0 + eps)).max(1e-3);
        samples.push(SparseSample { u, v, depth: d });
    }
    Ok(SparseDepth { samples, frame_index })
}

fn nearest_pixel(u: f64, v: f64, h: usize, w: usize) -> usize {
    let x = (u.round().max(0.0) as usize).min(w - 1);
    let y = (v.round().max(0.0) as usize).min(h - 1);
    y * w + x
}

/// Nearest-pixel scatter to `[1, H, W]`; 0 marks "no measurement" and
/// collisions keep the nearer sample.
pub fn rasterize_sparse(sparse: &SparseDepth, (h, w): (usize, usize)) -> Tensor {
    let mut map = vec![0.0; h * w];
    for s in &sparse.samples {
        let p = nearest_pixel(s.u, s.v, h, w);
        if map[p] == 0.0 || s.depth < map[p] {
            map[p] = s.depth;
        }
    }
    Tensor::new(vec![1, h, w], map).expect("raster layout")
}

/// Dense `[1, H, W]` map where every pixel takes the value of the nearest
/// non-zero pixel of `sparse` (ties go to the first in raster order). An
/// all-zero map stays zero.
pub fn nearest_fill(sparse: &Tensor) -> Result<Tensor> {
    let (_, h, w) = sparse.dims3()?;
    let pts: Vec<(i64, i64, f64)> = sparse
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(p, &v)| ((p / w) as i64, (p % w) as i64, v))
        .collect();
    let mut out = vec![0.0; h * w];
    if !pts.is_empty() {
        for (p, o) in out.iter_mut().enumerate() {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            let mut best = (i64::MAX, 0.0);
            for &(py, px, v) in &pts {
                let d = (py - y).pow(2) + (px - x).pow(2);
                if d < best.0 {
                    best = (d, v);
                }
            }
            *o = best.1;
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Mean absolute relative error of the samples against the ground truth of
/// the pixel each sample rasterizes to.
pub fn sample_rel(sparse: &SparseDepth, depth: &DepthFrame) -> Option<(f64, usize)> {
    let (h, w) = (depth.height(), depth.width());
    let mut sum = 0.0;
    let mut n = 0;
    for s in &sparse.samples {
        let p = nearest_pixel(s.u, s.v, h, w);
        if depth.valid()[p] {
            let gt = depth.depth()[p];
            sum += (s.depth - gt).abs() / gt;
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}
