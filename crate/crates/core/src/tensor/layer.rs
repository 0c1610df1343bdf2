use rand::Rng;

use super::norm::BnBatchStats;
use super::pool::{max_pool_backward, pool_output_shape, unpool_backward};
use super::{max_pool_forward, unpool_forward, BatchNorm, Conv, Deconv, PoolSwitches, Real, Shape4, Tensor4};
use crate::error::{config_err, Result};

/// Batch-norm behaviour: batch statistics (`Train`) or running ones (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer kind without parameters; also the checkpoint tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Deconv,
    MaxPool,
    Unpool,
    BatchNorm,
    Relu,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 1,
            LayerKind::Deconv => 2,
            LayerKind::MaxPool => 3,
            LayerKind::Unpool => 4,
            LayerKind::BatchNorm => 5,
            LayerKind::Relu => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Conv,
            2 => LayerKind::Deconv,
            3 => LayerKind::MaxPool,
            4 => LayerKind::Unpool,
            5 => LayerKind::BatchNorm,
            6 => LayerKind::Relu,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Unpool => "unpool",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    Conv(Conv<T>),
    Deconv(Deconv<T>),
    MaxPool,
    Unpool,
    BatchNorm(BatchNorm<T>),
    Relu,
}

/// What a forward pass leaves behind for the matching backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv { input: Tensor4<T> },
    Deconv { input: Tensor4<T> },
    MaxPool { switches: PoolSwitches },
    Unpool { switches: PoolSwitches },
    BatchNormTrain { stats: BnBatchStats<T> },
    BatchNormEval { input: Tensor4<T> },
    Relu { input: Tensor4<T> },
}

impl<T> LayerCache<T> {
    /// Switches recorded by a max-pooling forward pass.
    pub fn switches(&self) -> Option<&PoolSwitches> {
        match self {
            LayerCache::MaxPool { switches } => Some(switches),
            _ => None,
        }
    }

    pub fn bn_stats(&self) -> Option<&BnBatchStats<T>> {
        match self {
            LayerCache::BatchNormTrain { stats } => Some(stats),
            _ => None,
        }
    }
}

/// Parameter gradients, one flat vector per entry of [`Layer::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Deconv(_) => LayerKind::Deconv,
            Layer::MaxPool => LayerKind::MaxPool,
            Layer::Unpool => LayerKind::Unpool,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        match self {
            Layer::Conv(c) => c.init(rng),
            Layer::Deconv(d) => d.init(rng),
            Layer::BatchNorm(bn) => *bn = BatchNorm::new(bn.channels),
            _ => {}
        }
    }

    /// Output shape for a given input shape. Unpooling needs the switches
    /// of its paired pooling layer.
    pub fn output_shape(&self, input: Shape4, switches: Option<&PoolSwitches>) -> Result<Shape4> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::Deconv(d) => d.output_shape(input),
            Layer::MaxPool => pool_output_shape(input),
            Layer::Unpool => match switches {
                Some(sw) if sw.output_shape == input => Ok(sw.input_shape),
                Some(sw) => config_err(format!(
                    "unpooling input {input} does not match paired pooling output {}",
                    sw.output_shape
                )),
                None => Ok(Shape4::new(input.n, input.c, input.h * 2, input.w * 2)),
            },
            Layer::BatchNorm(bn) if bn.channels != input.c => {
                config_err(format!("batch-norm expects {} channels, got {}", bn.channels, input.c))
            }
            Layer::BatchNorm(_) | Layer::Relu => Ok(input),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        switches: Option<&PoolSwitches>,
    ) -> Result<(Tensor4<T>, LayerCache<T>)> {
        match self {
            Layer::Conv(c) => Ok((c.forward(x)?, LayerCache::Conv { input: x.clone() })),
            Layer::Deconv(d) => Ok((d.forward(x)?, LayerCache::Deconv { input: x.clone() })),
            Layer::MaxPool => {
                let (y, switches) = max_pool_forward(x)?;
                Ok((y, LayerCache::MaxPool { switches }))
            }
            Layer::Unpool => {
                let Some(sw) = switches else {
                    return config_err("unpooling layer needs the switches of its paired pooling layer");
                };
                Ok((unpool_forward(x, sw)?, LayerCache::Unpool { switches: sw.clone() }))
            }
            Layer::BatchNorm(bn) => match mode {
                Mode::Train => {
                    let (y, stats) = bn.forward_train(x)?;
                    Ok((y, LayerCache::BatchNormTrain { stats }))
                }
                Mode::Eval => Ok((bn.forward_eval(x)?, LayerCache::BatchNormEval { input: x.clone() })),
            },
            Layer::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| {
                    if !(*v > T::zero()) {
                        *v = T::zero()
                    }
                });
                Ok((y, LayerCache::Relu { input: x.clone() }))
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache<T>, dy: &Tensor4<T>) -> Result<(Tensor4<T>, LayerGrads<T>)> {
        let none = || LayerGrads { tensors: Vec::new() };
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv { input }) => {
                let (dx, dw, db) = c.backward(input, dy)?;
                Ok((dx, LayerGrads { tensors: vec![dw, db] }))
            }
            (Layer::Deconv(d), LayerCache::Deconv { input }) => {
                let (dx, dw, db) = d.backward(input, dy)?;
                Ok((dx, LayerGrads { tensors: vec![dw, db] }))
            }
            (Layer::MaxPool, LayerCache::MaxPool { switches }) => Ok((max_pool_backward(switches, dy)?, none())),
            (Layer::Unpool, LayerCache::Unpool { switches }) => Ok((unpool_backward(switches, dy)?, none())),
            (Layer::BatchNorm(bn), LayerCache::BatchNormTrain { stats }) => {
                let (dx, dg, db) = bn.backward_train(stats, dy)?;
                Ok((dx, LayerGrads { tensors: vec![dg, db] }))
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNormEval { input }) => {
                let (dx, dg, db) = bn.backward_eval(input, dy)?;
                Ok((dx, LayerGrads { tensors: vec![dg, db] }))
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                dy.ensure_shape(input.shape(), "relu backward upstream gradient")?;
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(input.data()) {
                    if !(v > T::zero()) {
                        *g = T::zero();
                    }
                }
                Ok((dx, none()))
            }
            (layer, _) => config_err(format!("cache does not belong to a {} layer", layer.kind().name())),
        }
    }

    /// Trainable parameters: `[weight, bias]` for conv/deconv, `[gamma,
    /// beta]` for batch-norm, nothing otherwise.
    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![c.weight.data(), &c.bias],
            Layer::Deconv(d) => vec![d.weight.data(), &d.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Conv(c) => vec![c.weight.data_mut(), &mut c.bias],
            Layer::Deconv(d) => vec![d.weight.data_mut(), &mut d.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn absorb_batch_stats(&mut self, cache: &LayerCache<T>) {
        if let (Layer::BatchNorm(bn), Some(stats)) = (self, cache.bn_stats()) {
            bn.absorb(stats);
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::of(a.f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv(c) => Layer::Conv(Conv {
                in_c: c.in_c,
                out_c: c.out_c,
                k: c.k,
                pad: c.pad,
                weight: c.weight.cast(),
                bias: v(&c.bias),
            }),
            Layer::Deconv(d) => Layer::Deconv(Deconv {
                in_c: d.in_c,
                out_c: d.out_c,
                k: d.k,
                pad: d.pad,
                weight: d.weight.cast(),
                bias: v(&d.bias),
            }),
            Layer::MaxPool => Layer::MaxPool,
            Layer::Unpool => Layer::Unpool,
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                channels: bn.channels,
                gamma: v(&bn.gamma),
                beta: v(&bn.beta),
                running_mean: v(&bn.running_mean),
                running_var: v(&bn.running_var),
            }),
            Layer::Relu => Layer::Relu,
        }
    }
}
