//! The video depth-completion network: per-frame encoder, flow-guided
//! alignment, bidirectional recurrent propagation with attention-weighted
//! dual-kernel fusion, an adaptive-bin depth head and a pixel-shuffle
//! refinement back to input resolution.

mod blocks;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use blocks::{
    afsf, bidirectional_propagate, channel_enhance, csea, depth_head, encode, flow_guided_align, forward_encoded,
    forward_window, residual_block, spatial_attention, sparse_prior, upsample_refine, Encoded, FrameInput, WindowOutput,
};

use crate::error::{Result, SvdcError};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Tensor, Var};

/// Number of learned residual offsets per alignment.
pub const NUM_OFFSETS: usize = 8;
/// Spatial reduction between the input frame and the propagated features.
pub const DOWNSAMPLE: usize = 4;

/// Which fusion path feeds the propagated feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Per-pixel blend of both kernels weighted by the attention map.
    Adaptive,
    /// Only the small-kernel path (attention fixed at 1).
    Small,
    /// Only the large-kernel path (attention fixed at 0).
    Large,
}

impl std::str::FromStr for FusionMode {
    type Err = SvdcError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "small" => Ok(Self::Small),
            "large" => Ok(Self::Large),
            other => Err(SvdcError::Config(format!("unknown fusion mode `{other}` (adaptive|small|large)"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::Small => "small",
            Self::Large => "large",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Learned channels of the full-resolution guide features; the scaled
    /// sparse depth and its mask are appended to them.
    pub guide_channels: usize,
    pub encoder_downsample: usize,
    pub kernel_small: usize,
    pub kernel_large: usize,
    pub num_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub window: usize,
    /// Bound on the natural log of the refinement's depth ratio.
    pub residual_clamp: f64,
    pub use_csea: bool,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            guide_channels: 4,
            encoder_downsample: DOWNSAMPLE,
            kernel_small: 1,
            kernel_large: 3,
            num_bins: 16,
            d_min: 0.5,
            d_max: 10.0,
            window: 3,
            residual_clamp: 1.5,
            use_csea: true,
            fusion: FusionMode::Adaptive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SvdcError::Config(m.to_string()));
        if self.base_channels == 0 || self.guide_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.encoder_downsample != DOWNSAMPLE {
            return bad("encoder_downsample must be 4");
        }
        if self.kernel_small % 2 == 0 || self.kernel_large % 2 == 0 || self.kernel_small >= self.kernel_large {
            return bad("kernel sizes must be odd with kernel_small < kernel_large");
        }
        if self.num_bins == 0 {
            return bad("num_bins must be at least 1");
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad("depth range must satisfy 0 < d_min < d_max");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(self.residual_clamp >= 0.0) {
            return bad("residual_clamp must be non-negative");
        }
        Ok(())
    }

    fn ce_hidden(&self) -> usize {
        (self.base_channels / 4).max(1)
    }

    /// Name, shape and initialisation of every parameter.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.base_channels;
        let cg = self.guide_channels;
        let n = self.num_bins;
        let (ks, kl) = (self.kernel_small, self.kernel_large);
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, init: Init| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k], init));
            out.push((format!("{name}.b"), vec![cout], Init::Zero));
        };
        conv("enc1", cg, 5, 3, Init::He);
        conv("enc2", c, cg, 3, Init::He);
        conv("enc3", c, c, 3, Init::He);
        conv("enc4", c, c + 2, 3, Init::He);
        for dir in ["bwd", "fwd"] {
            conv(&format!("{dir}.align.offset"), 2 * NUM_OFFSETS, 2 * c + 2, 3, Init::Zero);
            conv(&format!("{dir}.align.merge"), c, NUM_OFFSETS * c, 1, Init::Average(NUM_OFFSETS));
            conv(&format!("{dir}.ce.fc1"), self.ce_hidden(), c, 1, Init::He);
            conv(&format!("{dir}.ce.fc2"), c, self.ce_hidden(), 1, Init::Xavier);
            conv(&format!("{dir}.sa"), 1, 2, 1, Init::Xavier);
            conv(&format!("{dir}.fuse.small"), c, 2 * c, ks, Init::Xavier);
            conv(&format!("{dir}.fuse.large"), c, 2 * c, kl, Init::Xavier);
            conv(&format!("{dir}.res.c1"), c, c, 3, Init::He);
            conv(&format!("{dir}.res.c2"), c, c, 3, Init::Scaled(0.1));
        }
        conv("head.bins1", c, c, 1, Init::He);
        conv("head.bins2", n, c, 1, Init::Scaled(0.1));
        conv("head.prob", n, c, 1, Init::Scaled(0.01));
        let sub = DOWNSAMPLE * DOWNSAMPLE;
        conv("up.c1", c, 1 + c + (cg + 3) * sub, 3, Init::He);
        conv("up.c2", sub, c + sub, 1, Init::Scaled(0.01));
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    /// `N(0, 2 / fan_in)`.
    He,
    /// `N(0, 1 / fan_in)`.
    Xavier,
    /// `N(0, s^2 / fan_in)`.
    Scaled(f64),
    /// 1x1 conv averaging `k` stacked copies of its output channels.
    Average(usize),

}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Seeded initialisation.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in cfg.layout() {
            let numel: usize = shape.iter().product();
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let normal = |var: f64| Normal::new(0.0, var.sqrt()).expect("finite variance");
            let data = match init {
                Init::Zero => vec![0.0; numel],
                Init::He => sample(&mut rng, normal(2.0 / fan_in as f64), numel),
                Init::Xavier => sample(&mut rng, normal(1.0 / fan_in as f64), numel),
                Init::Scaled(s) => sample(&mut rng, normal(s * s / fan_in as f64), numel),
                Init::Average(k) => {
                    let (cout, cin) = (shape[0], shape[1]);
                    let mut d = vec![0.0; numel];
                    for o in 0..cout {
                        for copy in 0..k {
                            d[o * cin + copy * cout + o] = 1.0 / k as f64;
                        }
                    }
                    d
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let tensors: BTreeMap<String, Tensor> = named.into_iter().collect();
        let layout = cfg.layout();
        if layout.len() != tensors.len() {
            return Err(SvdcError::Config(format!(
                "checkpoint has {} tensors, model config expects {}",
                tensors.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in layout {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(SvdcError::Config(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(SvdcError::Config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        Self::from_named(cfg, load_checkpoint(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), if trainable { g.param(v.clone()) } else { g.constant(v.clone()) }))
            .collect();
        Bound { vars }
    }
}

fn sample(rng: &mut ChaCha8Rng, dist: Normal<f64>, n: usize) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| SvdcError::Config(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ModelParams {
    /// Adds `N(0, scale^2)` noise to every entry, including zero-initialised
    /// heads; used to move a model off symmetric points before gradient checks.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, scale).expect("finite scale");
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }
}

/// Compares the analytic gradient of the scalar built by `build` with central
/// differences for every parameter. Returns the largest relative error and
/// the name of the parameter where it occurs.
pub fn param_gradient_error(
    params: &ModelParams,
    h: f64,
    max_entries: Option<usize>,
    build: &dyn Fn(&mut Graph, &Bound) -> Result<Var>,
) -> Result<(f64, String)> {
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = names
        .iter()
        .zip(&inputs)
        .map(|(n, t)| g.grad(bound.vars[n]).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut f = |ts: &[Tensor]| -> Result<f64> {
        let p = ModelParams { tensors: names.iter().cloned().zip(ts.iter().cloned()).collect() };
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).item())
    };
    let numeric = crate::tensor::gradcheck::numeric_gradient(&mut f, &inputs, h, max_entries)?;
    let mut worst = (0.0, String::new());
    for ((name, a), n) in names.iter().zip(&analytic).zip(&numeric) {
        let e = crate::tensor::gradcheck::max_relative_error(std::slice::from_ref(a), std::slice::from_ref(n));
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }
    Ok(worst)
}
