//! Flat `key=value` configuration and network checkpoints.

use std::path::Path;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::densecrf::Neighborhood;
use crate::error::{Error, Result};
use crate::superpixel::SlicParams;
use crate::toynet::{ConvSpec, Net, NetConfig, Sgd, TrainConfig};

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(x, _)| x == k) {
            return Err(Error::Format(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub slic: SlicParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { net: NetConfig::default(), train: TrainConfig::default(), slic: SlicParams::default() }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("'{key}' has invalid value '{v}'")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join(v: impl Iterator<Item = usize>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    /// Overrides fields from `key=value` pairs. Unknown keys are errors.
    pub fn apply(&mut self, kv: &[(String, String)]) -> Result<()> {
        let (mut channels, mut kernels, mut strides) = (None, None, None);
        for (k, v) in kv {
            let (n, t, s) = (&mut self.net, &mut self.train, &mut self.slic);
            match k.as_str() {
                "mode" => t.mode = v.parse()?,
                "lr0" => t.lr0 = num(k, v)?,
                "momentum" => t.momentum = num(k, v)?,
                "weight_decay" => t.weight_decay = num(k, v)?,
                "total_iters" => t.total_iters = num(k, v)?,
                "poly_power" => t.poly_power = num(k, v)?,
                "batch" => t.batch = num(k, v)?,
                "seed" => t.seed = num(k, v)?,
                "eval_every" => t.eval_every = num(k, v)?,
                "conv_channels" => channels = Some(list(k, v)?),
                "conv_kernels" => kernels = Some(list(k, v)?),
                "conv_strides" => strides = Some(list(k, v)?),
                "num_classes" => n.num_classes = num(k, v)?,
                "pos_dim" => n.pos_dim = num(k, v)?,
                "embed_dim" => n.embed_dim = num(k, v)?,
                "embed_gain" => n.embed_gain = num(k, v)?,
                "use_pairwise" => n.use_pairwise = num(k, v)?,
                "use_superpixel" => n.use_superpixel = num(k, v)?,
                "window" => {
                    let r: usize = num(k, v)?;
                    n.neighborhood = if r == 0 { Neighborhood::AllPairs } else { Neighborhood::Window(r) };
                }
                "joint_radius" => n.joint_radius = num(k, v)?,
                "joint_w1" => n.joint_kernel.w1 = num(k, v)?,
                "joint_w2" => n.joint_kernel.w2 = num(k, v)?,
                "joint_theta_alpha" => n.joint_kernel.theta_alpha = num(k, v)?,
                "joint_theta_beta" => n.joint_kernel.theta_beta = num(k, v)?,
                "joint_theta_gamma" => n.joint_kernel.theta_gamma = num(k, v)?,
                "sp_blocks" => s.target_blocks = num(k, v)?,
                "sp_compactness" => s.compactness = num(k, v)?,
                "sp_iterations" => s.iterations = num(k, v)?,
                "sp_min_block_fraction" => s.min_block_fraction = num(k, v)?,
                other => return Err(Error::Format(format!("unknown config key '{other}'"))),
            }
        }
        if channels.is_some() || kernels.is_some() || strides.is_some() {
            let cur = &self.net.layers;
            let channels = channels.unwrap_or_else(|| cur.iter().map(|l| l.channels).collect());
            let kernels = kernels.unwrap_or_else(|| cur.iter().map(|l| l.kernel).collect());
            let strides = strides.unwrap_or_else(|| cur.iter().map(|l| l.stride).collect());
            if channels.len() != kernels.len() || channels.len() != strides.len() {
                return Err(Error::Format("conv_channels, conv_kernels and conv_strides differ in length".into()));
            }
            self.net.layers = channels
                .into_iter()
                .zip(kernels)
                .zip(strides)
                .map(|((channels, kernel), stride)| ConvSpec { channels, kernel, stride })
                .collect();
        }
        self.net.validate()?;
        self.train.validate()
    }

    /// Every resolved field as `key=value`, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let (n, t, s) = (&self.net, &self.train, &self.slic);
        let window = match n.neighborhood {
            Neighborhood::AllPairs => 0,
            Neighborhood::Window(r) => r,
        };
        let kv: Vec<(&str, String)> = vec![
            ("mode", t.mode.to_string()),
            ("lr0", t.lr0.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("total_iters", t.total_iters.to_string()),
            ("poly_power", t.poly_power.to_string()),
            ("batch", t.batch.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("conv_channels", join(n.layers.iter().map(|l| l.channels))),
            ("conv_kernels", join(n.layers.iter().map(|l| l.kernel))),
            ("conv_strides", join(n.layers.iter().map(|l| l.stride))),
            ("num_classes", n.num_classes.to_string()),
            ("pos_dim", n.pos_dim.to_string()),
            ("embed_dim", n.embed_dim.to_string()),
            ("embed_gain", n.embed_gain.to_string()),
            ("use_pairwise", n.use_pairwise.to_string()),
            ("use_superpixel", n.use_superpixel.to_string()),
            ("window", window.to_string()),
            ("joint_radius", n.joint_radius.to_string()),
            ("joint_w1", n.joint_kernel.w1.to_string()),
            ("joint_w2", n.joint_kernel.w2.to_string()),
            ("joint_theta_alpha", n.joint_kernel.theta_alpha.to_string()),
            ("joint_theta_beta", n.joint_kernel.theta_beta.to_string()),
            ("joint_theta_gamma", n.joint_kernel.theta_gamma.to_string()),
            ("sp_blocks", s.target_blocks.to_string()),
            ("sp_compactness", s.compactness.to_string()),
            ("sp_iterations", s.iterations.to_string()),
            ("sp_min_block_fraction", s.min_block_fraction.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

const MOMENTUM_PREFIX: &str = "momentum.";

/// Network weights, optional optimizer state and the config echo.
pub fn net_to_checkpoint(net: &Net<f32>, cfg: &RunConfig, optimizer: Option<&Sgd>, iteration: usize) -> Checkpoint {
    let mut config = cfg.to_kv();
    config.push(("iteration".into(), iteration.to_string()));
    let mut tensors: Vec<NamedTensor> = net
        .tensors()
        .into_iter()
        .map(|(name, dims, data)| NamedTensor { name, dims, data: data.to_vec() })
        .collect();
    if let Some(opt) = optimizer {
        let momentum: Vec<NamedTensor> = tensors
            .iter()
            .zip(&opt.velocity)
            .map(|(t, v)| NamedTensor { name: format!("{MOMENTUM_PREFIX}{}", t.name), dims: t.dims.clone(), data: v.clone() })
            .collect();
        tensors.extend(momentum);
    }
    Checkpoint { config, tensors }
}

#[derive(Clone, Debug)]
pub struct LoadedNet {
    pub net: Net<f32>,
    pub config: RunConfig,
    pub optimizer: Option<Sgd>,
    pub iteration: usize,
}

pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedNet> {
    let mut config = RunConfig::default();
    let (iteration, kv): (Vec<_>, Vec<_>) = ckpt.config.iter().cloned().partition(|(k, _)| k == "iteration");
    config.apply(&kv)?;
    let iteration = match iteration.first() {
        Some((k, v)) => num(k, v)?,
        None => 0,
    };
    // Shapes come from the config; values from the tensor table.
    let mut net = Net::<f32>::init(config.net.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = net.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
    for ((name, dims), (_, dst)) in expected.iter().zip(net.tensors_mut()) {
        let t = ckpt.tensor(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
        if &t.dims != dims {
            return Err(Error::Format(format!("tensor '{name}' has dims {:?}, config implies {dims:?}", t.dims)));
        }
        dst.copy_from_slice(&t.data);
    }
    let momentum: Option<Vec<Vec<f32>>> =
        expected.iter().map(|(name, _)| ckpt.tensor(&format!("{MOMENTUM_PREFIX}{name}")).map(|t| t.data.clone())).collect();
    Ok(LoadedNet { net, config, optimizer: momentum.map(|velocity| Sgd { velocity }), iteration })
}

pub fn save_net(path: &Path, net: &Net<f32>, cfg: &RunConfig, optimizer: Option<&Sgd>, iteration: usize) -> Result<()> {
    net_to_checkpoint(net, cfg, optimizer, iteration).save(path)
}

pub fn load_net(path: &Path) -> Result<LoadedNet> {
    net_from_checkpoint(&Checkpoint::load(path)?)
}
