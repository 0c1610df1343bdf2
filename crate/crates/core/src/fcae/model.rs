use std::path::Path;

use rand::Rng;

use super::spec::{LayerDesc, NetworkSpec};
use crate::error::{config_err, Result};
use crate::matrix::Matrix;
use crate::tensor::{
    read_layers, write_layers, BatchNorm, Conv, Deconv, GradCheckable, Layer, LayerCache, Mode, PoolSwitches, Real,
    Shape4, Tensor4,
};

/// Symmetric fully convolutional auto-encoder.
///
/// Every conv/deconv is followed by batch-norm and ReLU except the final
/// deconv, which is linear so reconstructions live in raw pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FcaeModel<T = f32> {
    spec: NetworkSpec,
    pub encoder: Vec<Layer<T>>,
    pub decoder: Vec<Layer<T>>,
}

/// Caches of a forward pass through a layer stack.
#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    pub caches: Vec<LayerCache<T>>,
}

impl<T> StackTrace<T> {
    /// Pool switches in encoder order.
    pub fn switches(&self) -> Vec<&PoolSwitches> {
        self.caches.iter().filter_map(LayerCache::switches).collect()
    }
}

fn encoder_layers<T: Real>(spec: &NetworkSpec) -> Vec<Layer<T>> {
    let mut c = spec.input.0;
    let mut layers = Vec::new();
    for desc in &spec.encoder {
        match *desc {
            LayerDesc::Conv { k, filters, pad } => {
                layers.push(Layer::Conv(Conv::new(c, filters, k, pad)));
                layers.push(Layer::BatchNorm(BatchNorm::new(filters)));
                layers.push(Layer::Relu);
                c = filters;
            }
            LayerDesc::Pool => layers.push(Layer::MaxPool),
            _ => unreachable!("validated encoder holds conv and pool only"),
        }
    }
    layers
}

fn decoder_layers<T: Real>(spec: &NetworkSpec) -> Vec<Layer<T>> {
    let mut c = spec.feature_dim();
    let decoder = spec.decoder();
    let last_deconv = decoder.iter().rposition(|d| matches!(d, LayerDesc::Deconv { .. }));
    let mut layers = Vec::new();
    for (i, desc) in decoder.iter().enumerate() {
        match *desc {
            LayerDesc::Deconv { k, filters, pad } => {
                layers.push(Layer::Deconv(Deconv::new(c, filters, k, pad)));
                if Some(i) != last_deconv {
                    layers.push(Layer::BatchNorm(BatchNorm::new(filters)));
                    layers.push(Layer::Relu);
                }
                c = filters;
            }
            LayerDesc::Unpool => layers.push(Layer::Unpool),
            _ => unreachable!("mirrored decoder holds deconv and unpool only"),
        }
    }
    layers
}

fn forward_stack<T: Real>(
    layers: &[Layer<T>],
    x: &Tensor4<T>,
    mode: Mode,
    mut switches: Vec<&PoolSwitches>,
) -> Result<(Tensor4<T>, StackTrace<T>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let sw = if matches!(layer, Layer::Unpool) {
            Some(switches.pop().ok_or_else(|| crate::Error::Config("unpooling layer without a paired pooling layer".into()))?)
        } else {
            None
        };
        let (y, cache) = layer.forward(&cur, mode, sw)?;
        caches.push(cache);
        cur = y;
    }
    Ok((cur, StackTrace { caches }))
}

/// Backpropagates through a stack, returning the input gradient and the
/// parameter gradients in [`Layer::params`] order, layer by layer.
fn backward_stack<T: Real>(layers: &[Layer<T>], trace: &StackTrace<T>, dy: Tensor4<T>) -> Result<(Tensor4<T>, Vec<Vec<T>>)> {
    let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(layers.len());
    let mut g = dy;
    for (layer, cache) in layers.iter().zip(&trace.caches).rev() {
        let (dx, grads) = layer.backward(cache, &g)?;
        per_layer.push(grads.tensors);
        g = dx;
    }
    per_layer.reverse();
    Ok((g, per_layer.into_iter().flatten().collect()))
}

impl<T: Real> FcaeModel<T> {
    /// Builds the model with zero weights, identity batch-norm.
    pub fn zeroed(spec: NetworkSpec) -> Self {
        let encoder = encoder_layers(&spec);
        let decoder = decoder_layers(&spec);
        Self { spec, encoder, decoder }
    }

    /// Builds the model with He-normal conv weights and zero biases.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mut model = Self::zeroed(spec);
        for layer in model.encoder.iter_mut().chain(model.decoder.iter_mut()) {
            layer.init(rng);
        }
        model
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn input_shape(&self, n: usize) -> Shape4 {
        let (c, h, w) = self.spec.input;
        Shape4::new(n, c, h, w)
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if s.n == 0 {
            return config_err("empty batch");
        }
        x.ensure_shape(self.input_shape(s.n), "FCAE input")
    }

    /// Encoder forward pass; features come out as `(n, d, 1, 1)`.
    pub fn encode_trace(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, StackTrace<T>)> {
        self.check_input(x)?;
        let (z, trace) = forward_stack(&self.encoder, x, mode, Vec::new())?;
        z.ensure_shape(Shape4::new(x.shape().n, self.feature_dim(), 1, 1), "feature map")?;
        Ok((z, trace))
    }

    /// Decoder forward pass, consuming the encoder's pooling switches in
    /// mirrored order.
    pub fn decode_trace(
        &self,
        z: &Tensor4<T>,
        encoder_trace: &StackTrace<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, StackTrace<T>)> {
        forward_stack(&self.decoder, z, mode, encoder_trace.switches())
    }

    /// Eval-mode features, one row per sample.
    pub fn encode(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        let (z, _) = self.encode_trace(x, Mode::Eval)?;
        Ok(Matrix::from_tensor(&z))
    }

    pub fn reconstruct(&self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let (z, et) = self.encode_trace(x, mode)?;
        let (xhat, _) = self.decode_trace(&z, &et, mode)?;
        Ok(xhat)
    }

    /// `sum_i ||x_i - g(f(x_i))||²` accumulated in double precision.
    pub fn reconstruction_loss(&self, x: &Tensor4<T>, mode: Mode) -> Result<f64> {
        let xhat = self.reconstruct(x, mode)?;
        Ok(squared_error(x, &xhat))
    }

    /// Backpropagates a feature-space gradient through the encoder.
    pub fn encoder_backward(&self, trace: &StackTrace<T>, dz: Tensor4<T>) -> Result<(Tensor4<T>, Vec<Vec<T>>)> {
        backward_stack(&self.encoder, trace, dz)
    }

    /// Forward and backward pass for the mean per-sample reconstruction loss
    /// `(1/n) sum_i ||x_i - x̂_i||²`. Returns the loss sum (not the mean) and
    /// gradients aligned with [`FcaeModel::params_mut`].
    pub fn reconstruction_step(&self, x: &Tensor4<T>, mode: Mode) -> Result<(f64, Vec<Vec<T>>, StackTrace<T>, StackTrace<T>)> {
        let n = x.shape().n;
        let (z, et) = self.encode_trace(x, mode)?;
        let (xhat, dt) = self.decode_trace(&z, &et, mode)?;
        let loss = squared_error(x, &xhat);
        let scale = T::of(2.0 / n as f64);
        let mut g = xhat;
        for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
            *gv = (*gv - xv) * scale;
        }
        let (dz, mut dec_grads) = backward_stack(&self.decoder, &dt, g)?;
        let (_, mut grads) = backward_stack(&self.encoder, &et, dz)?;
        grads.append(&mut dec_grads);
        Ok((loss, grads, et, dt))
    }

    /// Folds training-mode batch statistics into the batch-norm running
    /// estimates of the encoder (and decoder, when given).
    pub fn absorb(&mut self, encoder_trace: &StackTrace<T>, decoder_trace: Option<&StackTrace<T>>) {
        for (layer, cache) in self.encoder.iter_mut().zip(&encoder_trace.caches) {
            layer.absorb_batch_stats(cache);
        }
        if let Some(dt) = decoder_trace {
            for (layer, cache) in self.decoder.iter_mut().zip(&dt.caches) {
                layer.absorb_batch_stats(cache);
            }
        }
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut [T]> {
        self.encoder.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.encoder.iter().chain(self.decoder.iter()).flat_map(Layer::params).collect()
    }

    pub fn cast<U: Real>(&self) -> FcaeModel<U> {
        FcaeModel {
            spec: self.spec.clone(),
            encoder: self.encoder.iter().map(Layer::cast).collect(),
            decoder: self.decoder.iter().map(Layer::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn squared_error<T: Real>(x: &Tensor4<T>, xhat: &Tensor4<T>) -> f64 {
    x.data().iter().zip(xhat.data()).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum()
}

impl FcaeModel<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let all: Vec<Layer<f32>> = self.encoder.iter().chain(self.decoder.iter()).cloned().collect();
        write_layers(&mut out, &all).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a checkpoint, recovering the network spec from the layer
    /// stack and checking it against the layout the spec would build.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let layers = read_layers(bytes)?;
        let spec = spec_from_layers(&layers)?;
        let template = FcaeModel::<f32>::zeroed(spec);
        let split = template.encoder.len();
        if layers.len() != split + template.decoder.len() {
            return config_err("checkpoint layer stack is not a symmetric FCAE");
        }
        let (enc, dec) = layers.split_at(split);
        for (got, want) in enc.iter().chain(dec).zip(template.encoder.iter().chain(&template.decoder)) {
            if !same_layout(got, want) {
                return config_err(format!(
                    "checkpoint layer {} does not match the FCAE layout (expected {})",
                    got.kind().name(),
                    want.kind().name()
                ));
            }
        }
        Ok(Self { spec: template.spec, encoder: enc.to_vec(), decoder: dec.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn same_layout<T: Real>(a: &Layer<T>, b: &Layer<T>) -> bool {
    match (a, b) {
        (Layer::Conv(x), Layer::Conv(y)) => (x.in_c, x.out_c, x.k, x.pad) == (y.in_c, y.out_c, y.k, y.pad),
        (Layer::Deconv(x), Layer::Deconv(y)) => (x.in_c, x.out_c, x.k, x.pad) == (y.in_c, y.out_c, y.k, y.pad),
        (Layer::BatchNorm(x), Layer::BatchNorm(y)) => x.channels == y.channels,
        _ => a.kind() == b.kind(),
    }
}

/// Recovers the encoder description (and the input shape, by running the
/// shape algebra backwards from the 1×1 feature map).
fn spec_from_layers<T: Real>(layers: &[Layer<T>]) -> Result<NetworkSpec> {
    let mut encoder = Vec::new();
    let mut in_c = None;
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                in_c.get_or_insert(c.in_c);
                encoder.push(LayerDesc::Conv { k: c.k, filters: c.out_c, pad: c.pad });
            }
            Layer::MaxPool => encoder.push(LayerDesc::Pool),
            Layer::BatchNorm(_) | Layer::Relu => {}
            Layer::Deconv(_) | Layer::Unpool => break,
        }
    }
    let Some(c) = in_c else {
        return config_err("checkpoint holds no convolution layers");
    };
    let (mut h, mut w) = (1usize, 1usize);
    for desc in encoder.iter().rev() {
        match *desc {
            LayerDesc::Conv { k, pad, .. } => {
                h = (h + k - 1).checked_sub(2 * pad).ok_or_else(|| crate::Error::Config("inconsistent padding".into()))?;
                w = (w + k - 1).checked_sub(2 * pad).ok_or_else(|| crate::Error::Config("inconsistent padding".into()))?;
            }
            _ => {
                h *= 2;
                w *= 2;
            }
        }
    }
    NetworkSpec::new("checkpoint", (c, h, w), encoder)
}

/// Whole-network gradient check target: reconstruction loss summed over the
/// batch, with respect to every trainable parameter.
#[derive(Debug, Clone)]
pub struct ReconstructionProbe {
    pub model: FcaeModel<f64>,
    pub input: Tensor4<f64>,
    pub mode: Mode,
}

impl GradCheckable for ReconstructionProbe {
    fn loss(&self) -> f64 {
        self.model.reconstruction_loss(&self.input, self.mode).expect("probe input matches the model")
    }

    fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let n = self.input.shape().n as f64;
        let (_, grads, _, _) = self.model.reconstruction_step(&self.input, self.mode).expect("probe input matches");
        // reconstruction_step differentiates the per-sample mean.
        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| (format!("param{i}"), g.into_iter().map(|v| v * n).collect()))
            .collect()
    }

    fn variables_mut(&mut self) -> Vec<&mut [f64]> {
        self.model.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::parse("tiny", (1, 8, 8), "conv3x3,pool,conv3x4").unwrap()
    }

    #[test]
    fn every_preset_round_trips_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [NetworkSpec::mnist(), NetworkSpec::usps(), tiny_spec()] {
            let model = FcaeModel::<f32>::new(spec, &mut rng);
            let x = Tensor4::from_fn(model.input_shape(2), |i| (i % 7) as f32 / 7.0);
            let z = model.encode(&x).unwrap();
            assert_eq!((z.rows(), z.cols()), (2, model.feature_dim()));
            let xhat = model.reconstruct(&x, Mode::Train).unwrap();
            assert_eq!(xhat.shape(), x.shape());
        }
    }

    #[test]
    fn layer_layout_follows_bn_rule() {
        let model = FcaeModel::<f32>::zeroed(NetworkSpec::mnist());
        let kinds: Vec<&str> = model.encoder.iter().chain(&model.decoder).map(|l| l.kind().name()).collect();
        assert_eq!(
            kinds,
            vec![
                "conv", "batchnorm", "relu", "maxpool", "conv", "batchnorm", "relu", "maxpool", "conv", "batchnorm",
                "relu", "deconv", "batchnorm", "relu", "unpool", "deconv", "batchnorm", "relu", "unpool", "deconv",
            ]
        );
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let model = FcaeModel::<f32>::zeroed(NetworkSpec::mnist());
        let z = model.encode(&Tensor4::zeros(model.input_shape(3))).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_encoding_is_per_sample() {
        let model = FcaeModel::<f32>::new(NetworkSpec::mnist(), &mut ChaCha8Rng::seed_from_u64(5));
        let x = Tensor4::from_fn(model.input_shape(4), |i| ((i * 31) % 17) as f32 / 17.0);
        let all = model.encode(&x).unwrap();
        let one = model.encode(&x.slice_batch(2, 3)).unwrap();
        assert_eq!(one.row(0), all.row(2));
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let model = FcaeModel::<f32>::zeroed(NetworkSpec::mnist());
        assert!(model.encode(&Tensor4::zeros(Shape4::new(1, 1, 16, 16))).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_features() {
        let model = FcaeModel::<f32>::new(NetworkSpec::usps(), &mut ChaCha8Rng::seed_from_u64(2));
        let back = FcaeModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back.spec().input, (1, 16, 16));
        assert_eq!(back.encoder, model.encoder);
        assert_eq!(back.decoder, model.decoder);
        let x = Tensor4::from_fn(model.input_shape(3), |i| (i % 5) as f32 * 0.2);
        assert_eq!(model.encode(&x).unwrap(), back.encode(&x).unwrap());
    }

    #[test]
    fn single_pixel_loss() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![1.0f32]).unwrap();
        let xhat = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        assert_eq!(squared_error(&x, &xhat), 1.0);
        assert_eq!(squared_error(&x, &x), 0.0);
    }
}
