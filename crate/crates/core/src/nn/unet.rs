//! Two-headed U-Net and its single-head baseline.
//!
//! Encoder: a 3×3 stem, then `depth` stride-2 3×3 convolutions (no pooling).
//! Decoder: `depth` stages of nearest-neighbour upsampling + 5×5
//! convolution, concatenation with the matching encoder features and a
//! 3×3 merge convolution. The network input is concatenated to the final
//! features before the heads; each head is a 3×3 convolution followed by a
//! 1×1 convolution. Every non-head convolution is followed by ReLU and
//! spatial dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    init_conv_weight, spatial_dropout, upsample_nn_conv, DropoutStreams, Heads, Network, ParamStore,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound applied to the log-variance head output.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Initial weight-variance gain of the log-variance output layer.
pub const LOG_VAR_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub two_heads: bool,
    pub input_concat_before_heads: bool,
    pub head_kernels: [usize; 2],
    pub upsample_kernel: usize,
    /// Nominal input extent (square); must be divisible by `2^depth`.
    pub image_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            depth: 3,
            dropout_rate: 0.2,
            two_heads: true,
            input_concat_before_heads: true,
            head_kernels: [3, 1],
            upsample_kernel: 5,
            image_size: 64,
        }
    }
}

impl UNetConfig {
    /// Single-head, dropout-free variant with otherwise identical layers.
    pub fn baseline(&self) -> Self {
        Self {
            two_heads: false,
            dropout_rate: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Domain(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.depth == 0
            || self.base_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Domain(
                "depth and channel counts must be positive".into(),
            ));
        }
        if self
            .head_kernels
            .iter()
            .chain([&self.upsample_kernel])
            .any(|k| k % 2 == 0)
        {
            return Err(Error::Domain("kernel sizes must be odd".into()));
        }
        self.check_spatial(self.image_size, self.image_size)
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by 2^{} = {unit}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Head {
    hidden: ConvLayer,
    out: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    /// Indexed by level - 1; applied from the deepest level upward.
    up: Vec<ConvLayer>,
    merge: Vec<ConvLayer>,
    mean_head: Head,
    log_var_head: Option<Head>,
}

struct Builder<'a> {
    params: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        gain: f64,
    ) -> Result<ConvLayer> {
        let weight = self.params.push(
            format!("{name}.weight"),
            init_conv_weight(shape, gain, self.rng),
        )?;
        let bias = self
            .params
            .push(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding: shape[2] / 2,
        })
    }

    fn head(&mut self, name: &str, cfg: &UNetConfig, in_ch: usize, out_gain: f64) -> Result<Head> {
        let [k0, k1] = cfg.head_kernels;
        let hidden = self.conv(
            &format!("{name}.0"),
            [cfg.base_channels, in_ch, k0, k0],
            1,
            2.0,
        )?;
        let out = self.conv(
            &format!("{name}.1"),
            [cfg.out_channels, cfg.base_channels, k1, k1],
            1,
            out_gain,
        )?;
        Ok(Head { hidden, out })
    }
}

impl UNet {
    /// Builds a freshly initialised network. Weights use fan-in scaling and
    /// all biases start at zero, so the log-variance head starts near 0.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            rng: &mut rng,
        };
        let stem = b.conv("enc0", [config.width(0), config.in_channels, 3, 3], 1, 2.0)?;
        let mut down = Vec::with_capacity(config.depth);
        for level in 1..=config.depth {
            down.push(b.conv(
                &format!("down{level}"),
                [config.width(level), config.width(level - 1), 3, 3],
                2,
                2.0,
            )?);
        }
        let k = config.upsample_kernel;
        let mut up = Vec::with_capacity(config.depth);
        let mut merge = Vec::with_capacity(config.depth);
        for level in 1..=config.depth {
            let (hi, lo) = (config.width(level), config.width(level - 1));
            up.push(b.conv(&format!("up{level}"), [lo, hi, k, k], 1, 2.0)?);
            merge.push(b.conv(&format!("merge{level}"), [lo, 2 * lo, 3, 3], 1, 2.0)?);
        }
        let head_in = config.width(0)
            + if config.input_concat_before_heads {
                config.in_channels
            } else {
                0
            };
        // Linear output layers. The log-variance layer starts small so that
        // s stays close to 0 and the initial variance close to 1.
        let mean_head = b.head("head_mean", &config, head_in, 1.0)?;
        let log_var_head = if config.two_heads {
            Some(b.head("head_logvar", &config, head_in, LOG_VAR_INIT_GAIN)?)
        } else {
            None
        };
        Ok(Self {
            params: b.params,
            config,
            stem,
            down,
            up,
            merge,
            mean_head,
            log_var_head,
        })
    }

    /// Rebuilds a network around previously trained parameters.
    pub fn with_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if net.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (dst, src) in net.params.iter_mut().zip(params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scalar parameters outside the log-variance head.
    pub fn trunk_and_mean_head_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.name.starts_with("head_logvar"))
            .map(|p| p.value.len())
            .sum()
    }

    fn conv(&self, tape: &mut Tape, params: &[Var], x: Var, layer: ConvLayer) -> Result<Var> {
        tape.conv2d(
            x,
            params[layer.weight],
            Some(params[layer.bias]),
            layer.stride,
            layer.padding,
        )
    }

    fn block(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        layer: ConvLayer,
        dropout: &mut Option<&mut DropoutStreams>,
    ) -> Result<Var> {
        let h = self.conv(tape, params, x, layer)?;
        let h = tape.relu(h)?;
        spatial_dropout(tape, h, self.config.dropout_rate, dropout.as_deref_mut())
    }

    fn head(&self, tape: &mut Tape, params: &[Var], x: Var, head: &Head) -> Result<Var> {
        let h = self.conv(tape, params, x, head.hidden)?;
        let h = tape.relu(h)?;
        self.conv(tape, params, h, head.out)
    }
}

impl Network for UNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn two_heads(&self) -> bool {
        self.config.two_heads
    }

    fn dropout_rate(&self) -> f64 {
        self.config.dropout_rate
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mut dropout: Option<&mut DropoutStreams>,
    ) -> Result<Heads> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        self.config.check_spatial(h, w)?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for a network with {}",
                params.len(),
                self.params.len()
            )));
        }

        let mut feats = self.block(tape, params, x, self.stem, &mut dropout)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for &layer in &self.down {
            skips.push(feats);
            feats = self.block(tape, params, feats, layer, &mut dropout)?;
        }
        for level in (1..=self.config.depth).rev() {
            let up = self.up[level - 1];
            let u = upsample_nn_conv(tape, feats, params[up.weight], Some(params[up.bias]))?;
            let u = tape.relu(u)?;
            let u = spatial_dropout(tape, u, self.config.dropout_rate, dropout.as_deref_mut())?;
            let cat = tape.concat_channels(&[u, skips[level - 1]])?;
            feats = self.block(tape, params, cat, self.merge[level - 1], &mut dropout)?;
        }
        if self.config.input_concat_before_heads {
            feats = tape.concat_channels(&[feats, x])?;
        }
        let mean = self.head(tape, params, feats, &self.mean_head)?;
        let log_var = match &self.log_var_head {
            Some(head) => {
                let s = self.head(tape, params, feats, head)?;
                Some(tape.clamp(s, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?)
            }
            None => None,
        };
        Ok(Heads { mean, log_var })
    }
}
