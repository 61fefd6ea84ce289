//! Procedural RGB-D video with exact ground-truth depth and optical flow.
//!
//! A scene is a set of textured planes and spheres, each translating rigidly
//! at a constant per-frame velocity, seen by a translating pinhole camera.
//! Every pixel is ray-cast, so depth is exact, and flow is obtained by moving
//! the hit surface point to the other frame and projecting it.

pub mod dtof;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SvdcError};
use crate::flow::FlowField;
use crate::tensor::Tensor;

pub use dtof::{nearest_fill, rasterize_sparse, sample_grid_coords, sample_rel, simulate_dtof, DToFConfig, SparseDepth, SparseSample};

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Dense depth in metres with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthFrame {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(SvdcError::Shape(format!("depth buffers do not match {height}x{width}")));
        }
        if depth.iter().zip(&valid).any(|(d, v)| *v && !(d.is_finite() && *d > 0.0)) {
            return Err(SvdcError::InvalidArgument("valid depth must be finite and positive".into()));
        }
        Ok(Self { height, width, depth, valid })
    }

    /// Marks every finite positive value valid.
    pub fn from_dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(height, width, depth, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `[1, H, W]` tensor; invalid pixels hold 0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.depth.iter().zip(&self.valid).map(|(d, v)| if *v { *d } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("depth layout")
    }

    /// Mean of the valid pixels in each `factor x factor` block; a block
    /// with no valid pixel is invalid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(SvdcError::Shape(format!("{}x{} not divisible by {factor}", self.height, self.width)));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut depth = vec![0.0; h * w];
        let mut valid = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0usize);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = (y * factor + dy) * self.width + x * factor + dx;
                        if self.valid[p] {
                            s += self.depth[p];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    depth[y * w + x] = s / n as f64;
                    valid[y * w + x] = true;
                }
            }
        }
        Ok(Self { height: h, width: w, depth, valid })
    }
}

/// Pinhole camera with square pixels and the principal point at the centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub height: usize,
    pub width: usize,
    pub hfov_deg: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(SvdcError::InvalidArgument(format!("camera FOV {} must lie in (0, 180)", self.hfov_deg)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(SvdcError::InvalidArgument("camera resolution must be non-zero".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.width as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Surface {
    /// Plane through the object's position with unit normal `normal`.
    /// `tangent` spans the texture `u` axis; `v` is `normal x tangent`.
    Plane { normal: Vec3, tangent: Vec3 },
    Sphere { radius: f64 },
}

/// Procedural texture: a checkerboard of two colours with a soft stripe.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub color_a: Vec3,
    pub color_b: Vec3,
    /// Checker cell size in metres (planes) or radians (spheres).
    pub cell: f64,
    pub stripe_freq: f64,
}

impl Texture {
    fn eval(&self, s: f64, t: f64) -> Vec3 {
        let checker = ((s / self.cell).floor() as i64 + (t / self.cell).floor() as i64).rem_euclid(2) == 0;
        let base = if checker { self.color_a } else { self.color_b };
        let stripe = 0.9 + 0.1 * (self.stripe_freq * (s + 0.5 * t)).sin();
        scale(base, stripe)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub surface: Surface,
    /// Position at frame 0 (world metres, camera looks down +Z, +Y is down).
    pub position: Vec3,
    /// Displacement per frame.
    pub velocity: Vec3,
    pub texture: Texture,
}

impl SceneObject {
    fn position_at(&self, t: f64) -> Vec3 {
        add(self.position, scale(self.velocity, t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub hfov_deg: f64,
    pub camera_velocity: Vec3,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Knobs for [`SceneConfig::random`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutParams {
    pub min_spheres: usize,
    pub max_spheres: usize,
    /// Upper bound on object image motion in pixels per frame (roughly).
    pub max_motion_px: f64,
    pub camera_motion: bool,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self { min_spheres: 2, max_spheres: 4, max_motion_px: 1.5, camera_motion: true }
    }
}

fn random_texture(rng: &mut ChaCha8Rng, cell_range: (f64, f64)) -> Texture {
    fn color(rng: &mut ChaCha8Rng, dark: bool) -> Vec3 {
        if dark {
            let v = rng.random_range(0.01..0.04);
            [v, v, v]
        } else {
            [rng.random_range(0.15..1.0), rng.random_range(0.15..1.0), rng.random_range(0.15..1.0)]
        }
    }
    let a = color(rng, false);
    let dark_b = rng.random_bool(0.2);
    let b = color(rng, dark_b);
    Texture {
        color_a: a,
        color_b: b,
        cell: rng.random_range(cell_range.0..cell_range.1),
        stripe_freq: rng.random_range(2.0..8.0),
    }
}

impl SceneConfig {
    /// Camera for this scene.
    pub fn camera(&self) -> Camera {
        Camera { height: self.height, width: self.width, hfov_deg: self.hfov_deg }
    }

    /// Random layout: a back wall, a floor and a few moving spheres.
    pub fn random(seed: u64, height: usize, width: usize, num_frames: usize, hfov_deg: f64, layout: LayoutParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E5CE_7E5C_E7E5);
        let cam = Camera { height, width, hfov_deg };
        let f = cam.focal();
        let tan_half = (hfov_deg.to_radians() / 2.0).tan();
        let mut objects = Vec::new();

        let wall_z = rng.random_range(6.0..9.0);
        objects.push(SceneObject {
            surface: Surface::Plane { normal: [0.0, 0.0, -1.0], tangent: [1.0, 0.0, 0.0] },
            position: [0.0, 0.0, wall_z],
            velocity: [0.0; 3],
            texture: random_texture(&mut rng, (0.6, 1.5)),
        });
        let floor_y = rng.random_range(0.9..1.5);
        objects.push(SceneObject {
            surface: Surface::Plane { normal: [0.0, -1.0, 0.0], tangent: [1.0, 0.0, 0.0] },
            position: [0.0, floor_y, 0.0],
            velocity: [0.0; 3],
            texture: random_texture(&mut rng, (0.3, 0.8)),
        });
        let n = rng.random_range(layout.min_spheres..=layout.max_spheres.max(layout.min_spheres));
        for _ in 0..n {
            let z = rng.random_range(1.6..5.0);
            let radius = rng.random_range(0.25..0.8);
            let x = rng.random_range(-0.8..0.8) * z * tan_half;
            let y = rng.random_range(-0.5..0.4) * z * tan_half * height as f64 / width as f64;
            // metres per frame giving at most `max_motion_px` of image motion
            let m = layout.max_motion_px * z / f;
            let velocity = [rng.random_range(-m..m), rng.random_range(-m..m) * 0.5, rng.random_range(-0.02..0.02)];
            objects.push(SceneObject {
                surface: Surface::Sphere { radius },
                position: [x, y, z],
                velocity,
                texture: random_texture(&mut rng, (0.3, 0.9)),
            });
        }
        let camera_velocity = if layout.camera_motion {
            let m = 0.5 * layout.max_motion_px * 3.0 / f;
            [rng.random_range(-m..m), rng.random_range(-m..m) * 0.3, rng.random_range(-0.02..0.02)]
        } else {
            [0.0; 3]
        };
        Self { height, width, num_frames, hfov_deg, camera_velocity, objects, seed }
    }

    fn camera_position(&self, t: f64) -> Vec3 {
        scale(self.camera_velocity, t)
    }
}

/// Per-pixel ray-cast result for one frame.
#[derive(Clone, Debug)]
pub struct Render {
    pub depth: Vec<f64>,
    /// Index into `SceneConfig::objects` of the visible surface.
    pub ids: Vec<u32>,
    /// Hit point relative to its object's position.
    pub local: Vec<Vec3>,
    pub rgb: Vec<Vec3>,
}

fn intersect(obj: &SceneObject, origin: Vec3, dir: Vec3, t: f64) -> Option<f64> {
    let c = obj.position_at(t);
    match &obj.surface {
        Surface::Plane { normal, .. } => {
            let denom = dot(*normal, dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let s = dot(*normal, sub(c, origin)) / denom;
            (s > 1e-6).then_some(s)
        }
        Surface::Sphere { radius } => {
            let oc = sub(origin, c);
            let a = dot(dir, dir);
            let b = 2.0 * dot(oc, dir);
            let cc = dot(oc, oc) - radius * radius;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let s0 = (-b - sq) / (2.0 * a);
            let s1 = (-b + sq) / (2.0 * a);
            if s0 > 1e-6 {
                Some(s0)
            } else if s1 > 1e-6 {
                Some(s1)
            } else {
                None
            }
        }
    }
}

fn shade(obj: &SceneObject, local: Vec3) -> Vec3 {
    match &obj.surface {
        Surface::Plane { normal, tangent } => {
            let bitangent = [
                normal[1] * tangent[2] - normal[2] * tangent[1],
                normal[2] * tangent[0] - normal[0] * tangent[2],
                normal[0] * tangent[1] - normal[1] * tangent[0],
            ];
            obj.texture.eval(dot(local, *tangent), dot(local, bitangent))
        }
        Surface::Sphere { radius } => {
            let n = scale(local, 1.0 / radius);
            let theta = n[1].clamp(-1.0, 1.0).acos();
            let phi = n[2].atan2(n[0]);
            let light = [-0.4, -0.6, -0.7];
            let lambert = 0.55 + 0.45 * (-dot(n, light) / dot(light, light).sqrt()).max(0.0);
            scale(obj.texture.eval(phi, theta), lambert)
        }
    }
}

/// Ray-casts frame `t` (fractional and out-of-range frames are allowed).
pub fn render_frame(cfg: &SceneConfig, t: f64) -> Render {
    let cam = cfg.camera();
    let f = cam.focal();
    let (cx, cy) = cam.center();
    let origin = cfg.camera_position(t);
    let n = cfg.height * cfg.width;
    let mut out = Render { depth: vec![f64::INFINITY; n], ids: vec![u32::MAX; n], local: vec![[0.0; 3]; n], rgb: vec![[0.0; 3]; n] };
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let dir = [(x as f64 - cx) / f, (y as f64 - cy) / f, 1.0];
            let p = y * cfg.width + x;
            for (i, obj) in cfg.objects.iter().enumerate() {
                // dir has unit z, so the ray parameter is the z-depth
                if let Some(s) = intersect(obj, origin, dir, t) {
                    if s < out.depth[p] {
                        out.depth[p] = s;
                        out.ids[p] = i as u32;
                    }
                }
            }
            if out.ids[p] != u32::MAX {
                let obj = &cfg.objects[out.ids[p] as usize];
                let hit = add(origin, scale(dir, out.depth[p]));
                let local = sub(hit, obj.position_at(t));
                out.local[p] = local;
                let c = shade(obj, local);
                out.rgb[p] = [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)];
            }
        }
    }
    out
}

/// Flow from the frame rendered in `from` to frame `s` (displacements in pixels on `t`'s
/// grid), with occlusion where the surface point leaves the image, is
/// behind the camera, or is hidden by another surface in frame `s`.
pub fn flow_between(cfg: &SceneConfig, from: &Render, to: &Render, s: f64) -> FlowField {
    let cam = cfg.camera();
    let f = cam.focal();
    let (cx, cy) = cam.center();
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let cam_s = cfg.camera_position(s);
    let mut flow = vec![0.0; 2 * hw];
    let mut occ = vec![true; hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let id = from.ids[p];
            if id == u32::MAX {
                continue;
            }
            let obj = &cfg.objects[id as usize];
            let world = add(obj.position_at(s), from.local[p]);
            let rel = sub(world, cam_s);
            if rel[2] <= 1e-6 {
                continue;
            }
            let u = f * rel[0] / rel[2] + cx;
            let v = f * rel[1] / rel[2] + cy;
            flow[p] = u - x as f64;
            flow[hw + p] = v - y as f64;
            if u < -0.5 || v < -0.5 || u > w as f64 - 0.5 || v > h as f64 - 0.5 {
                continue;
            }
            let q = (v.round().clamp(0.0, (h - 1) as f64) as usize) * w + u.round().clamp(0.0, (w - 1) as f64) as usize;
            let visible = to.ids[q] == id && rel[2] <= to.depth[q] * 1.02 + 1e-3;
            occ[p] = !visible;
        }
    }
    FlowField::new(h, w, flow, occ).expect("flow layout")
}

/// One generated frame.
#[derive(Clone, Debug)]
pub struct SceneFrame {
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub guidance: Tensor,
    pub depth: DepthFrame,
    /// Frame `n` to frame `n + 1`.
    pub flow_fwd: FlowField,
    /// Frame `n` to frame `n - 1`.
    pub flow_bwd: FlowField,
    pub ids: Vec<u32>,
}

/// Guidance is stored at 8-bit precision, depth and flow at f32 precision,
/// so a dumped scene reloads bit-identically.
fn rgb_tensor(r: &Render, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (p, c) in r.rgb.iter().enumerate() {
        for ch in 0..3 {
            data[ch * hw + p] = (c[ch].clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb layout")
}

fn to_f32_precision(f: FlowField) -> FlowField {
    let flow = f.raw().iter().map(|&v| v as f32 as f64).collect();
    FlowField::new(f.height(), f.width(), flow, f.occluded().to_vec()).expect("flow layout")
}

/// Renders every frame of `cfg` with its forward and backward flow. The
/// first frame's backward flow and the last frame's forward flow point at
/// the (unrendered-for-output) frames just outside the sequence.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Vec<SceneFrame>> {
    cfg.camera().validate()?;
    if cfg.num_frames < 3 {
        return Err(SvdcError::InvalidArgument(format!("need at least 3 frames, got {}", cfg.num_frames)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let renders: Vec<Render> = (-1..=cfg.num_frames as i64).map(|t| render_frame(cfg, t as f64)).collect();
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for n in 0..cfg.num_frames {
        let r = &renders[n + 1];
        let t = n as f64;
        let depth: Vec<f64> = r.depth.iter().map(|d| if d.is_finite() { *d as f32 as f64 } else { 0.0 }).collect();
        frames.push(SceneFrame {
            guidance: rgb_tensor(r, h, w),
            depth: DepthFrame::from_dense(h, w, depth)?,
            flow_fwd: to_f32_precision(flow_between(cfg, r, &renders[n + 2], t + 1.0)),
            flow_bwd: to_f32_precision(flow_between(cfg, r, &renders[n], t - 1.0)),
            ids: r.ids.clone(),
        });
    }
    Ok(frames)
}
