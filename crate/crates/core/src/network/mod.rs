//! The U-Net that maps the upsampled sub-frame stack to one object estimate.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamSpec, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imgcore::{ImageStack, Raster, Seed};

/// Encoder/decoder layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of sub-frames stacked as input channels.
    pub in_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Channels of the first level; each level doubles it.
    pub base_width: usize,
    pub convs_per_level: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            depth: 3,
            base_width: 32,
            convs_per_level: 2,
        }
    }
}

impl UNetConfig {
    pub fn with_inputs(in_channels: usize) -> Self {
        Self {
            in_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.convs_per_level == 0 {
            return Err(Error::invalid(
                "in_channels, base_width and convs_per_level must be positive",
            ));
        }
        if self.depth > 8 {
            return Err(Error::invalid(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Encoder widths followed by the bottleneck width.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width << l).collect()
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "input {width}x{height} is not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// `(cin, cout)` of every convolution in build order.
    pub fn conv_layers(&self) -> Vec<(usize, usize)> {
        let w = self.widths();
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for &width in &w {
            for _ in 0..self.convs_per_level {
                out.push((cin, width));
                cin = width;
            }
        }
        for l in (0..self.depth).rev() {
            let mut c = w[l + 1] + w[l];
            for _ in 0..self.convs_per_level {
                out.push((c, w[l]));
                c = w[l];
            }
        }
        out.push((w[0], 1));
        out
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|&(i, o)| o * (i * 9 + 1)).sum()
    }
}

/// A built network: the graph, its input slot and output node.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    pub config: UNetConfig,
    pub graph: Graph<T>,
    pub input: NodeId,
    pub output: NodeId,
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: NodeId, cout: usize, name: &str) -> Result<NodeId> {
    let cin = g.shape(x)[1];
    let w = g.param(format!("{name}.weight"), [cout, cin, 3, 3]);
    let b = g.param(format!("{name}.bias"), [cout, 1, 1, 1]);
    let y = g.conv2d(x, w, b)?;
    g.set_name(y, name);
    Ok(y)
}

/// Appends the U-Net to `g`, reading from node `x` of shape `(1, n, H, W)`.
/// Returns the `(1, 1, H, W)` output node.
pub fn build_unet_into<T: Scalar>(g: &mut Graph<T>, x: NodeId, config: &UNetConfig) -> Result<NodeId> {
    config.validate()?;
    let [_, c, h, w] = g.shape(x);
    if c != config.in_channels {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {c}",
            config.in_channels
        )));
    }
    config.check_input_size(h, w)?;
    let widths = config.widths();
    let mut skips = Vec::new();
    let mut cur = x;
    for (l, &width) in widths.iter().enumerate() {
        let stage = if l == config.depth {
            "bottleneck".to_string()
        } else {
            format!("enc{}", l + 1)
        };
        for k in 0..config.convs_per_level {
            let y = conv(g, cur, width, &format!("{stage}.conv{}", k + 1))?;
            cur = g.relu(y);
        }
        if l < config.depth {
            skips.push(cur);
            cur = g.max_pool2(cur)?;
        }
    }
    for l in (0..config.depth).rev() {
        let up = g.upsample2(cur);
        let skip = skips[l];
        if g.shape(up)[2..] != g.shape(skip)[2..] {
            return Err(Error::shape(format!(
                "skip at level {} has spatial size {:?}, decoder has {:?}",
                l + 1,
                &g.shape(skip)[2..],
                &g.shape(up)[2..]
            )));
        }
        cur = g.concat(up, skip)?;
        for k in 0..config.convs_per_level {
            let y = conv(g, cur, widths[l], &format!("dec{}.conv{}", l + 1, k + 1))?;
            cur = g.relu(y);
        }
    }
    let y = conv(g, cur, 1, "final")?;
    Ok(g.relu(y))
}

/// Standalone network for an `height × width` input.
pub fn build_unet<T: Scalar>(config: &UNetConfig, height: usize, width: usize) -> Result<UNet<T>> {
    config.check_input_size(height, width)?;
    let mut graph = Graph::new();
    let input = graph.input([1, config.in_channels, height, width]);
    let output = build_unet_into(&mut graph, input, config)?;
    Ok(UNet {
        config: config.clone(),
        graph,
        input,
        output,
    })
}

/// He-normal kernels (std = sqrt(2 / (cin·9))) and zero biases.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: Seed) -> Vec<Tensor<T>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let [cout, cin, kh, kw] = spec.shape;
            if kh == 1 && kw == 1 && cin == 1 {
                return Tensor::zeros(spec.shape);
            }
            let std = (2.0 / (cin * kh * kw) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = seed.rng("weights", i as u64);
            let data = (0..cout * cin * kh * kw).map(|_| T::of(normal.sample(&mut rng))).collect();
            Tensor { shape: spec.shape, data }
        })
        .collect()
}

/// Sub-frames as a `(1, n, H, W)` tensor.
pub fn stack_to_tensor<T: Scalar>(stack: &ImageStack) -> Tensor<T> {
    let g = stack.grid;
    Tensor {
        shape: [1, stack.len(), g.height, g.width],
        data: stack.frames.iter().flatten().map(|&v| T::of(v as f64)).collect(),
    }
}

/// Runs the network and returns its single output channel on `grid`.
pub fn unet_forward<T: Scalar>(net: &UNet<T>, params: &[Tensor<T>], input: &ImageStack) -> Result<Raster> {
    let eval = net.graph.evaluate(&[stack_to_tensor(input)], params)?;
    let out = eval.value(net.output);
    Raster::new(input.grid, out.data.iter().map(|v| v.as_f64() as f32).collect())
}
