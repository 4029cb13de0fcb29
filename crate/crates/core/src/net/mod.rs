//! U-Net with ReZero residual blocks (or batch-norm blocks for comparison).
//!
//! Input is `(N, 5, H, W)`: RGB, the raw depth X with invalid pixels set to
//! 0, and the X validity mask. Output is `(N, 1, H, W)` with no squashing.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::norm::batch_stats;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};
use crate::scalar::{lit, Real};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[default]
    ReZero,
    BN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Stride-2 downsamplings in the encoder.
    pub levels: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub block_kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            blocks_per_level: 2,
            block_kind: BlockKind::ReZero,
            in_channels: 5,
            out_channels: 1,
        }
    }

    /// Full-size network, about 17M parameters.
    pub fn paper() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            blocks_per_level: 2,
            ..Self::desk()
        }
    }

    /// Tiny network for gradient checks.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            base_channels: 4,
            blocks_per_level: 1,
            ..Self::desk()
        }
    }

    pub fn with_block_kind(self, block_kind: BlockKind) -> Self {
        Self { block_kind, ..self }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::invalid(format!(
                "levels must be in 1..=8, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
enum Block {
    ReZero {
        conv1: Conv,
        conv2: Conv,
        alpha: usize,
    },
    Bn {
        bn1: Norm,
        conv1: Conv,
        bn2: Norm,
        conv2: Conv,
    },
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    encoder: Vec<(Vec<Block>, Conv)>,
    bottleneck: Vec<Block>,
    decoder: Vec<(Conv, Vec<Block>)>,
    head: Conv,
}

/// Running per-channel statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm layers use batch statistics.
    Train,
    /// Batch-norm layers use running statistics.
    Eval,
}

/// Result of one forward pass.
pub struct Forward<T> {
    pub output: Var,
    /// Graph leaves of the parameters, in declaration order.
    pub params: Vec<Var>,
    batch_stats: Vec<Option<RunningStats<T>>>,
}

struct Builder<T> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    running: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data: Vec<T> = (0..cout * fan_in)
            .map(|_| lit(normal.sample(&mut self.rng)))
            .collect();
        let w = self.push(
            format!("{name}.weight"),
            Tensor::new(vec![cout, cin, k, k], data).expect("conv weight shape"),
        );
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv { w, b, stride }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(vec![c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
        self.running.push(c);
        Norm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn blocks(&mut self, name: &str, c: usize, n: usize, kind: BlockKind) -> Vec<Block> {
        (0..n)
            .map(|i| {
                let name = format!("{name}.block{i}");
                match kind {
                    BlockKind::ReZero => {
                        let conv1 = self.conv(&format!("{name}.conv1"), c, c, 3, 1);
                        let conv2 = self.conv(&format!("{name}.conv2"), c, c, 3, 1);
                        let alpha = self.push(format!("{name}.alpha"), Tensor::zeros(vec![1]));
                        Block::ReZero {
                            conv1,
                            conv2,
                            alpha,
                        }
                    }
                    BlockKind::BN => {
                        let bn1 = self.norm(&format!("{name}.bn1"), c);
                        let conv1 = self.conv(&format!("{name}.conv1"), c, c, 3, 1);
                        let bn2 = self.norm(&format!("{name}.bn2"), c);
                        let conv2 = self.conv(&format!("{name}.conv2"), c, c, 3, 1);
                        Block::Bn {
                            bn1,
                            conv1,
                            bn2,
                            conv2,
                        }
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

impl<T: Real> Network<T> {
    /// He-normal convolution weights, zero biases, unit/zero batch-norm
    /// affine terms, and every ReZero α at 0.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let base = config.base_channels;
        let nb = config.blocks_per_level;
        let kind = config.block_kind;
        let stem = b.conv("stem", config.in_channels, base, 3, 1);
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            let c = base << l;
            let blocks = b.blocks(&format!("enc{l}"), c, nb, kind);
            let down = b.conv(&format!("enc{l}.down"), c, 2 * c, 3, 2);
            encoder.push((blocks, down));
        }
        let bottleneck = b.blocks("mid", base << config.levels, nb, kind);
        let mut decoder = Vec::new();
        for l in (0..config.levels).rev() {
            let c = base << l;
            let reduce = b.conv(&format!("dec{l}.reduce"), 3 * c, c, 1, 1);
            let blocks = b.blocks(&format!("dec{l}"), c, nb, kind);
            decoder.push((reduce, blocks));
        }
        let head = b.conv("head", base, config.out_channels, 3, 1);
        let running = b
            .running
            .iter()
            .map(|&c| RunningStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            })
            .collect();
        Ok(Self {
            config,
            params: b.params,
            names: b.names,
            running,
            layout: Layout {
                stem,
                encoder,
                bottleneck,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices of the ReZero α parameters.
    pub fn alpha_indices(&self) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| self.names[i].ends_with(".alpha"))
            .collect()
    }

    pub(crate) fn from_parts(config: NetConfig, values: &[T], running: &[T]) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let expected: usize = net.parameter_count();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "checkpoint holds {} parameter values, config needs {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        for p in &mut net.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        let expected: usize = net.running.iter().map(|r| 2 * r.mean.len()).sum();
        if running.len() != expected {
            return Err(Error::invalid(format!(
                "checkpoint holds {} running-stat values, config needs {expected}",
                running.len()
            )));
        }
        let mut offset = 0;
        for r in &mut net.running {
            let c = r.mean.len();
            r.mean.copy_from_slice(&running[offset..offset + c]);
            r.var.copy_from_slice(&running[offset + c..offset + 2 * c]);
            offset += 2 * c;
        }
        Ok(net)
    }

    fn flat_running(&self) -> Vec<T> {
        self.running
            .iter()
            .flat_map(|r| r.mean.iter().chain(&r.var).copied())
            .collect()
    }

    /// Registers the parameters as graph leaves and runs the network.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Forward<T>> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let div = self.config.size_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not a positive multiple of {div}"
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut run = Run {
            g,
            net: self,
            params: &params,
            mode,
            stats: vec![None; self.running.len()],
        };
        let output = run.unet(input)?;
        let batch_stats = run.stats;
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, fwd: &Forward<T>) {
        let m = lit::<T>(BN_MOMENTUM);
        for (r, s) in self.running.iter_mut().zip(&fwd.batch_stats) {
            if let Some(s) = s {
                for (a, &b) in r.mean.iter_mut().zip(&s.mean) {
                    *a = (T::one() - m) * *a + m * b;
                }
                for (a, &b) in r.var.iter_mut().zip(&s.var) {
                    *a = (T::one() - m) * *a + m * b;
                }
            }
        }
    }

    /// Inference on a stacked `(N, 5, H, W)` input.
    pub fn predict_tensor(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(fwd.output).clone())
    }

    fn all_blocks(&self) -> Vec<(&Block, usize)> {
        let l = &self.layout;
        let base = self.config.base_channels;
        let levels = self.config.levels;
        let mut out: Vec<(&Block, usize)> = Vec::new();
        for (i, (blocks, _)) in l.encoder.iter().enumerate() {
            out.extend(blocks.iter().map(|b| (b, base << i)));
        }
        out.extend(l.bottleneck.iter().map(|b| (b, base << levels)));
        for (i, (_, blocks)) in l.decoder.iter().enumerate() {
            out.extend(blocks.iter().map(|b| (b, base << (levels - 1 - i))));
        }
        out
    }

    /// Number of residual blocks, encoder first, then bottleneck, then
    /// decoder.
    pub fn block_count(&self) -> usize {
        self.all_blocks().len()
    }

    /// Channel count of block `index`.
    pub fn block_channels(&self, index: usize) -> usize {
        self.all_blocks()[index].1
    }

    /// Runs residual block `index` alone on `x`.
    pub fn block_forward(&self, g: &mut Graph<T>, index: usize, x: Var, mode: Mode) -> Result<Var> {
        let blocks = self.all_blocks();
        let (block, c) = *blocks
            .get(index)
            .ok_or_else(|| Error::invalid(format!("block {index} of {}", blocks.len())))?;
        let (_, xc, _, _) = g.value(x).dims4()?;
        if xc != c {
            return Err(Error::invalid(format!(
                "block {index} expects {c} channels, got {xc}"
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut run = Run {
            g,
            net: self,
            params: &params,
            mode,
            stats: vec![None; self.running.len()],
        };
        run.block(x, block)
    }

    /// Single-sample inference; returns the H×W prediction.
    pub fn predict(&self, rgb: &RgbField<T>, x: &DepthField<T>) -> Result<Vec<T>> {
        Ok(self.predict_tensor(assemble_input(rgb, x)?)?.into_data())
    }
}

struct Run<'a, T> {
    g: &'a mut Graph<T>,
    net: &'a Network<T>,
    params: &'a [Var],
    mode: Mode,
    stats: Vec<Option<RunningStats<T>>>,
}

impl<T: Real> Run<'_, T> {
    fn conv(&mut self, x: Var, c: Conv) -> Result<Var> {
        Ok(self
            .g
            .conv2d(x, self.params[c.w], Some(self.params[c.b]), c.stride)?)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (b, c, h, w) = self.g.value(x).dims4()?;
                let s = batch_stats(b, c, h * w, self.g.value(x).data());
                self.stats[n.stats] = Some(RunningStats {
                    mean: s.mean,
                    var: s.var,
                });
                Ok(self.g.batch_norm(
                    x,
                    self.params[n.gamma],
                    self.params[n.beta],
                    lit(BN_EPSILON),
                )?)
            }
            Mode::Eval => {
                let r = &self.net.running[n.stats];
                let gamma = self.net.params[n.gamma].data();
                let beta = self.net.params[n.beta].data();
                let eps = lit::<T>(BN_EPSILON);
                let scale: Vec<T> = (0..r.mean.len())
                    .map(|i| gamma[i] / (r.var[i] + eps).sqrt())
                    .collect();
                let shift = (0..r.mean.len())
                    .map(|i| beta[i] - r.mean[i] * scale[i])
                    .collect();
                Ok(self.g.channel_affine(x, scale, shift)?)
            }
        }
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var> {
        match *b {
            Block::ReZero {
                conv1,
                conv2,
                alpha,
            } => {
                let a = self.g.relu(x)?;
                let a = self.conv(a, conv1)?;
                let a = self.g.relu(a)?;
                let a = self.conv(a, conv2)?;
                let a = self.g.mul(a, self.params[alpha])?;
                Ok(self.g.add(x, a)?)
            }
            Block::Bn {
                bn1,
                conv1,
                bn2,
                conv2,
            } => {
                let a = self.norm(x, bn1)?;
                let a = self.g.relu(a)?;
                let a = self.conv(a, conv1)?;
                let a = self.norm(a, bn2)?;
                let a = self.g.relu(a)?;
                let a = self.conv(a, conv2)?;
                Ok(self.g.add(x, a)?)
            }
        }
    }

    fn blocks(&mut self, mut x: Var, blocks: &[Block]) -> Result<Var> {
        for b in blocks {
            x = self.block(x, b)?;
        }
        Ok(x)
    }

    fn unet(&mut self, input: Var) -> Result<Var> {
        let layout = &self.net.layout;
        let x = self.conv(input, layout.stem)?;
        let mut x = self.g.relu(x)?;
        let mut skips = Vec::with_capacity(layout.encoder.len());
        for (blocks, down) in &layout.encoder {
            x = self.blocks(x, blocks)?;
            skips.push(x);
            x = self.conv(x, *down)?;
        }
        x = self.blocks(x, &layout.bottleneck)?;
        for (reduce, blocks) in &layout.decoder {
            let up = self.g.upsample2(x)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = self.g.concat_channels(up, skip)?;
            x = self.conv(cat, *reduce)?;
            x = self.blocks(x, blocks)?;
        }
        self.conv(x, layout.head)
    }
}

/// `(1, 5, H, W)` network input: RGB planes, X values (0 where invalid) and
/// the X mask.
pub fn assemble_input<T: Real>(rgb: &RgbField<T>, x: &DepthField<T>) -> Result<Tensor<T>> {
    if rgb.dims() != x.dims() {
        return Err(Error::SizeMismatch {
            expected: rgb.dims(),
            got: x.dims(),
        });
    }
    let (h, w) = x.dims();
    let mut data = rgb.planes();
    data.extend_from_slice(x.values());
    data.extend(x.mask_tensor().into_data());
    Ok(Tensor::new(vec![1, 5, h, w], data)?)
}

/// Concatenates `(1, C, H, W)` tensors along the batch axis.
pub fn stack_batch<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "batch items differ in shape: {:?} vs {:?}",
                t.shape(),
                shape
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = shape;
    out_shape[0] = items.len();
    Ok(Tensor::new(out_shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(
            vec![n, c, h, w],
            (0..n * c * h * w)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_parameter_count_matches_hand_count() {
        // stem 184, enc0 297 + 296, enc1 1169 + 1168, mid 4641,
        // dec1 200 + 1169, dec0 52 + 297, head 37
        let net = Network::<f64>::new(NetConfig::toy(), 0).unwrap();
        assert_eq!(net.parameter_count(), 9510);
    }

    #[test]
    fn init_rules() {
        let net = Network::<f64>::new(NetConfig::toy(), 4).unwrap();
        for i in net.alpha_indices() {
            assert_eq!(net.params()[i].data(), &[0.0]);
        }
        for (p, n) in net.params().iter().zip(net.param_names()) {
            if n.ends_with(".bias") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            }
        }
        let again = Network::<f64>::new(NetConfig::toy(), 4).unwrap();
        assert_eq!(net.params(), again.params());
    }

    #[test]
    fn output_shape_and_size_checks() {
        let net = Network::<f64>::new(NetConfig::toy(), 1).unwrap();
        let out = net.predict_tensor(probe(2, 5, 8, 12, 0)).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 12]);
        assert!(net.predict_tensor(probe(1, 5, 6, 8, 0)).is_err());
        assert!(net.predict_tensor(probe(1, 4, 8, 8, 0)).is_err());
    }

    #[test]
    fn bn_running_stats_update() {
        let mut net =
            Network::<f64>::new(NetConfig::toy().with_block_kind(BlockKind::BN), 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(probe(2, 5, 8, 8, 3));
        let fwd = net.forward(&mut g, x, Mode::Train).unwrap();
        net.update_running_stats(&fwd);
        assert!(net.running_stats()[0].mean.iter().any(|&m| m != 0.0));
        let mut g = Graph::new();
        let x = g.input(probe(1, 5, 8, 8, 3));
        assert!(net.forward(&mut g, x, Mode::Train).is_err());
        assert!(net.forward(&mut g, x, Mode::Eval).is_ok());
    }
}
