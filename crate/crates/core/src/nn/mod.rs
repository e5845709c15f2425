//! Network building blocks: parameter storage, spatial dropout, the
//! upsample-then-convolve block and the U-Net constructors.

pub mod checkpoint;
pub mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use unet::{UNet, UNetConfig};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, uniquely named parameters of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.params.push(Param { name, value });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape` as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }
}

/// Per-batch-item random streams for dropout masks.
///
/// With one stream per batch item, item `n` of a batched forward pass draws
/// exactly the masks it would draw if it were run alone, so batching never
/// changes results. A single stream is shared by all items.
#[derive(Debug, Clone)]
pub struct DropoutStreams {
    streams: Vec<ChaCha8Rng>,
}

impl DropoutStreams {
    pub fn single(seed: u64) -> Self {
        Self {
            streams: vec![ChaCha8Rng::seed_from_u64(seed)],
        }
    }

    /// Stream `index` of the family seeded by `seed`.
    pub fn counter(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    /// One stream per batch item, taken from counters `first..first + n`.
    pub fn per_item(seed: u64, first: u64, n: usize) -> Self {
        Self {
            streams: (0..n as u64)
                .map(|i| Self::counter(seed, first + i))
                .collect(),
        }
    }

    pub fn from_streams(streams: Vec<ChaCha8Rng>) -> Self {
        assert!(!streams.is_empty());
        Self { streams }
    }

    fn stream(&mut self, item: usize) -> &mut ChaCha8Rng {
        if self.streams.len() == 1 {
            &mut self.streams[0]
        } else {
            &mut self.streams[item]
        }
    }

    fn check_batch(&self, n: usize) -> Result<()> {
        if self.streams.len() != 1 && self.streams.len() != n {
            return Err(Error::Shape(format!(
                "{} dropout streams for a batch of {n}",
                self.streams.len()
            )));
        }
        Ok(())
    }
}

/// Channel-wise dropout on an NCHW tensor.
///
/// When `streams` is `Some`, each of the `N·C` channel maps is zeroed with
/// probability `p` and the survivors are scaled by `1/(1-p)`. With `None`
/// (inactive) or `p == 0` the input variable is returned untouched.
pub fn spatial_dropout(
    tape: &mut Tape,
    x: Var,
    p: f64,
    streams: Option<&mut DropoutStreams>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    let Some(streams) = streams else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let [n, c, _, _] = tape.value(x).dims4()?;
    streams.check_batch(n)?;
    let keep_scale = 1.0 / (1.0 - p);
    let mut factors = Vec::with_capacity(n * c);
    for item in 0..n {
        let rng = streams.stream(item);
        for _ in 0..c {
            let u: f64 = rng.random();
            factors.push(if u < p { 0.0 } else { keep_scale });
        }
    }
    tape.channel_scale(x, factors)
}

/// Nearest-neighbour 2× upsampling followed by a same-padded convolution.
pub fn upsample_nn_conv(tape: &mut Tape, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    tape.upsample_conv2d(x, kernel, bias)
}

/// He-style fan-in initialisation: `N(0, gain / fan_in)`.
pub(crate) fn init_conv_weight(shape: [usize; 4], gain: f64, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(&shape, data).expect("shape matches")
}

/// Outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub mean: Var,
    /// Clamped log-variance `s = log σ̂²`, present on two-headed models.
    pub log_var: Option<Var>,
}

/// A trainable network whose parameters live in a [`ParamStore`].
pub trait Network: Send + Sync {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn two_heads(&self) -> bool;

    fn dropout_rate(&self) -> f64;

    /// Runs the network with parameters already bound on `tape` (in store
    /// order). Dropout is active iff `dropout` is `Some`.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        dropout: Option<&mut DropoutStreams>,
    ) -> Result<Heads>;

    /// Binds parameters and runs [`forward`](Self::forward) on a fresh input.
    fn run(
        &self,
        tape: &mut Tape,
        x: Tensor,
        dropout: Option<&mut DropoutStreams>,
        requires_grad: bool,
    ) -> Result<(Vec<Var>, Heads)> {
        let params = self.params().bind(tape, requires_grad);
        let x = tape.constant(x);
        let heads = self.forward(tape, &params, x, dropout)?;
        Ok((params, heads))
    }
}
