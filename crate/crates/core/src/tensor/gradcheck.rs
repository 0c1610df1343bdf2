use super::{Layer, Mode, PoolSwitches, Tensor4};
use crate::error::Result;

/// `|analytic - numeric| / max(|analytic|, |numeric|, denom_floor)`.
pub fn relative_error(analytic: f64, numeric: f64, denom_floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(denom_floor);
    (analytic - numeric).abs() / denom
}

/// A scalar function of some variable groups with a claimed analytic gradient.
pub trait GradCheckable {
    fn loss(&self) -> f64;

    /// Analytic gradient per variable group, aligned with
    /// [`GradCheckable::variables_mut`], each tagged with a group name.
    fn gradients(&self) -> Vec<(String, Vec<f64>)>;

    fn variables_mut(&mut self) -> Vec<&mut [f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per variable group.
    pub groups: Vec<(String, f64)>,
    /// Number of coordinates that were perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the analytic gradient against central differences with step
/// `step`. `max_per_group` caps how many coordinates of each group are
/// perturbed (evenly strided); `None` checks all of them.
pub fn grad_check<G: GradCheckable>(
    target: &mut G,
    step: f64,
    denom_floor: f64,
    max_per_group: Option<usize>,
) -> GradCheckReport {
    let analytic = target.gradients();
    let group_count = target.variables_mut().len();
    assert_eq!(analytic.len(), group_count, "one analytic gradient per variable group");
    let mut groups = Vec::with_capacity(group_count);
    let mut checked = 0;
    for (g, (name, grad)) in analytic.iter().enumerate() {
        let len = target.variables_mut()[g].len();
        assert_eq!(grad.len(), len, "gradient length for group {name}");
        let stride = match max_per_group {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        let mut worst = 0.0f64;
        for i in (0..len).step_by(stride) {
            let orig = target.variables_mut()[g][i];
            target.variables_mut()[g][i] = orig + step;
            let plus = target.loss();
            target.variables_mut()[g][i] = orig - step;
            let minus = target.loss();
            target.variables_mut()[g][i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad[i], numeric, denom_floor));
            checked += 1;
        }
        groups.push((name.clone(), worst));
    }
    let max_rel_error = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradCheckReport { max_rel_error, groups, checked }
}

/// A single layer under the probe loss `L = sum(weights ⊙ layer(input))`.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub layer: Layer<f64>,
    pub input: Tensor4<f64>,
    pub mode: Mode,
    pub switches: Option<PoolSwitches>,
    pub weights: Tensor4<f64>,
}

impl LayerProbe {
    pub fn new(
        layer: Layer<f64>,
        input: Tensor4<f64>,
        mode: Mode,
        switches: Option<PoolSwitches>,
        weights: Tensor4<f64>,
    ) -> Result<Self> {
        let out = layer.output_shape(input.shape(), switches.as_ref())?;
        weights.ensure_shape(out, "probe weights")?;
        Ok(Self { layer, input, mode, switches, weights })
    }
}

impl GradCheckable for LayerProbe {
    fn loss(&self) -> f64 {
        let (y, _) = self
            .layer
            .forward(&self.input, self.mode, self.switches.as_ref())
            .expect("probe shapes validated at construction");
        y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum()
    }

    fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let (_, cache) = self
            .layer
            .forward(&self.input, self.mode, self.switches.as_ref())
            .expect("probe shapes validated at construction");
        let (dx, grads) = self.layer.backward(&cache, &self.weights).expect("matching cache");
        let kind = self.layer.kind().name();
        let mut out: Vec<(String, Vec<f64>)> = grads
            .tensors
            .into_iter()
            .enumerate()
            .map(|(i, g)| (format!("{kind}.param{i}"), g))
            .collect();
        out.push((format!("{kind}.input"), dx.into_vec()));
        out
    }

    fn variables_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.layer.params_mut();
        v.push(self.input.data_mut());
        v
    }
}
