//! Sinusoidal MLP (Siren) with hand-written reverse-mode differentiation.
//!
//! Every hidden layer computes `sin(omega0 * (W a + b))`; the head is linear and
//! its output is multiplied component-wise by `output_scale`. Batches are laid
//! out row-major, one coordinate vector per row.
//!
//! [`SirenNetwork::backward`] returns, for an output cotangent `c`, both
//! `d<c, out>/d params` and `d<c, out>/d inputs`, which is exactly what the flow
//! module needs to backpropagate through an unrolled Euler trajectory.

use std::fs;
use std::path::Path;

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::sidecar_path;

pub const OUTPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    /// 3 for a stationary field `h(x)`, 4 for a time-dependent field `h(x, t)`.
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of linear layers, head included (`n_layers - 1` sinusoidal layers).
    pub n_layers: usize,
    pub omega0: f64,
    pub output_scale: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(fan_out, fan_in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirenNetwork {
    layers: Vec<DenseLayer>,
    omega0: f64,
    output_scale: [f64; 3],
    seed: u64,
}

/// Activations cached by [`SirenNetwork::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Array2<f64>,
    /// Output of each sinusoidal layer.
    activations: Vec<Array2<f64>>,
    /// `omega0 * cos(omega0 * pre)`: derivative of each activation w.r.t. its pre-activation.
    derivatives: Vec<Array2<f64>>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn depth(&self) -> usize {
        self.activations.len() + 1
    }
}

/// Parameter gradients, shape-congruent with a [`SirenNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &SirenNetwork) -> Self {
        ParamGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    /// Flat view in [`SirenNetwork::flatten_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Builds a Siren with the standard sinusoidal-network initialization: the first
/// layer draws from `U(-1/fan_in, 1/fan_in)`, deeper layers (head included) from
/// `U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)`. Biases start at zero.
pub fn init_siren(cfg: &SirenConfig) -> Result<SirenNetwork> {
    if cfg.input_dim == 0 || cfg.hidden_width == 0 {
        return Err(Error::Config(format!(
            "network dimensions must be positive (input {}, width {})",
            cfg.input_dim, cfg.hidden_width
        )));
    }
    if cfg.n_layers < 2 {
        return Err(Error::Config(format!(
            "a Siren needs at least 2 layers, got {}",
            cfg.n_layers
        )));
    }
    if !(cfg.omega0.is_finite() && cfg.omega0 > 0.0) {
        return Err(Error::Config(format!("omega0 must be positive, got {}", cfg.omega0)));
    }
    check_scale(cfg.output_scale)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let fan_in = if l == 0 { cfg.input_dim } else { cfg.hidden_width };
        let fan_out = if l + 1 == cfg.n_layers {
            OUTPUT_DIM
        } else {
            cfg.hidden_width
        };
        let bound = if l == 0 {
            1.0 / fan_in as f64
        } else {
            (6.0 / fan_in as f64).sqrt() / cfg.omega0
        };
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.gen_range(-bound..bound));
        layers.push(DenseLayer {
            weight,
            bias: Array1::zeros(fan_out),
        });
    }
    Ok(SirenNetwork {
        layers,
        omega0: cfg.omega0,
        output_scale: cfg.output_scale,
        seed: cfg.seed,
    })
}

fn check_scale(scale: [f64; 3]) -> Result<()> {
    if scale.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Config(format!("output_scale must be positive, got {scale:?}")))
    }
}

impl SirenNetwork {
    /// Assembles a network from explicit layers; used for hand-built fields.
    pub fn from_layers(
        layers: Vec<DenseLayer>,
        omega0: f64,
        output_scale: [f64; 3],
    ) -> Result<SirenNetwork> {
        if layers.len() < 2 {
            return Err(Error::Config("a Siren needs at least 2 layers".into()));
        }
        check_scale(output_scale)?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(
                    format!("layer {} fan_in {}", i + 1, pair[0].fan_out()),
                    pair[1].fan_in(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape(l.fan_out(), l.bias.len()));
            }
        }
        let head = layers.last().map(|l| l.fan_out()).unwrap_or(0);
        if head != OUTPUT_DIM {
            return Err(Error::shape(OUTPUT_DIM, head));
        }
        Ok(SirenNetwork {
            layers,
            omega0,
            output_scale,
            seed: 0,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].fan_out()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn output_scale(&self) -> [f64; 3] {
        self.output_scale
    }

    pub fn set_output_scale(&mut self, scale: [f64; 3]) -> Result<()> {
        check_scale(scale)?;
        self.output_scale = scale;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.fan_in() * l.fan_out() + l.fan_out())
            .sum()
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input columns", self.input_dim()),
                inputs.ncols(),
            ));
        }
        Ok(())
    }

    fn affine(layer: &DenseLayer, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((a.nrows(), layer.fan_out()));
        z.rows_mut().into_iter().for_each(|mut r| r.assign(&layer.bias));
        general_mat_mul(1.0, a, &layer.weight.t(), 1.0, &mut z);
        z
    }

    fn head(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Self::affine(self.layers.last().unwrap(), a);
        for (mut col, s) in out.axis_iter_mut(Axis(1)).zip(self.output_scale) {
            col *= s;
        }
        out
    }

    /// Forward pass without recording a tape.
    pub fn evaluate(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let omega = self.omega0;
        let hidden = &self.layers[..self.layers.len() - 1];
        let mut a: Option<Array2<f64>> = None;
        for layer in hidden {
            let mut z = match &a {
                None => Self::affine(layer, &inputs),
                Some(prev) => Self::affine(layer, &prev.view()),
            };
            z.mapv_inplace(|p| (omega * p).sin());
            a = Some(z);
        }
        Ok(self.head(&a.as_ref().unwrap().view()))
    }

    /// Forward pass recording the activations needed by [`SirenNetwork::backward`].
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape)> {
        self.check_inputs(&inputs)?;
        let omega = self.omega0;
        let hidden = &self.layers[..self.layers.len() - 1];
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(hidden.len());
        let mut derivatives = Vec::with_capacity(hidden.len());
        for layer in hidden {
            let z = match activations.last() {
                None => Self::affine(layer, &inputs),
                Some(prev) => Self::affine(layer, &prev.view()),
            };
            let mut act = Array2::zeros(z.raw_dim());
            let mut der = Array2::zeros(z.raw_dim());
            Zip::from(&mut act).and(&mut der).and(&z).for_each(|a, d, &p| {
                let (s, c) = (omega * p).sin_cos();
                *a = s;
                *d = omega * c;
            });
            activations.push(act);
            derivatives.push(der);
        }
        let out = self.head(&activations.last().unwrap().view());
        Ok((
            out,
            ForwardTape {
                inputs: inputs.to_owned(),
                activations,
                derivatives,
            },
        ))
    }

    /// Reverse pass: returns parameter gradients and the input cotangent of
    /// `<output_cotangent, forward(inputs)>`.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        output_cotangent: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        let mut grads = ParamGrads::zeros_like(self);
        let input_cot = self.backward_into(tape, output_cotangent, &mut grads)?;
        Ok((grads, input_cot))
    }

    /// Like [`SirenNetwork::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        tape: &ForwardTape,
        output_cotangent: ArrayView2<f64>,
        grads: &mut ParamGrads,
    ) -> Result<Array2<f64>> {
        if tape.depth() != self.layers.len() || tape.inputs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("tape of depth {}", self.layers.len()),
                format!("depth {}", tape.depth()),
            ));
        }
        let batch = tape.batch_size();
        if output_cotangent.dim() != (batch, OUTPUT_DIM) {
            return Err(Error::shape(
                format!("({batch}, {OUTPUT_DIM}) cotangent"),
                format!("{:?}", output_cotangent.dim()),
            ));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::shape(self.layers.len(), grads.weights.len()));
        }

        let mut delta = output_cotangent.to_owned();
        for (mut col, s) in delta.axis_iter_mut(Axis(1)).zip(self.output_scale) {
            col *= s;
        }
        let n = self.layers.len();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if l + 1 < n {
                delta *= &tape.derivatives[l];
            }
            let input = if l == 0 {
                tape.inputs.view()
            } else {
                tape.activations[l - 1].view()
            };
            general_mat_mul(1.0, &delta.t(), &input, 1.0, &mut grads.weights[l]);
            grads.biases[l] += &delta.sum_axis(Axis(0));
            let mut next = Array2::zeros((batch, layer.fan_in()));
            general_mat_mul(1.0, &delta, &layer.weight, 0.0, &mut next);
            delta = next;
        }
        Ok(delta)
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    /// Adds `delta` to the parameters in flat space.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), delta.len()));
        }
        let mut it = delta.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w += *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b += *it.next().unwrap());
        }
        Ok(())
    }

    /// Writes the raw little-endian f64 parameter blob to `path` and a JSON
    /// header to `path.json`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            input_dim: self.input_dim(),
            hidden_width: self.hidden_width(),
            n_layers: self.n_layers(),
            omega0: self.omega0,
            output_scale: self.output_scale,
            seed: self.seed,
            param_count: self.param_count(),
        };
        let blob: Vec<u8> = self
            .flatten_params()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect();
        fs::write(path, blob).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<SirenNetwork> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let h: CheckpointHeader = serde_json::from_str(&text)
            .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut net = init_siren(&SirenConfig {
            input_dim: h.input_dim,
            hidden_width: h.hidden_width,
            n_layers: h.n_layers,
            omega0: h.omega0,
            output_scale: h.output_scale,
            seed: h.seed,
        })?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 8 * h.param_count || h.param_count != net.param_count() {
            return Err(Error::SizeMismatch(format!(
                "checkpoint blob holds {} bytes, header promises {} parameters",
                bytes.len(),
                h.param_count
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("checkpoint holds non-finite parameters".into()));
        }
        net.set_params(&flat)?;
        Ok(net)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    input_dim: usize,
    hidden_width: usize,
    n_layers: usize,
    omega0: f64,
    output_scale: [f64; 3],
    seed: u64,
    param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(input_dim: usize, width: usize, n_layers: usize, seed: u64) -> SirenConfig {
        SirenConfig {
            input_dim,
            hidden_width: width,
            n_layers,
            omega0: 48.0,
            output_scale: [1.0; 3],
            seed,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_siren(&cfg(4, 16, 4, 7)).unwrap();
        let b = init_siren(&cfg(4, 16, 4, 7)).unwrap();
        assert_eq!(a, b);
        let c = init_siren(&cfg(4, 16, 4, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let net = init_siren(&cfg(4, 256, 4, 1)).unwrap();
        let hidden_bound = (6.0f64 / 256.0).sqrt() / 48.0;
        assert!((hidden_bound - 3.19e-3).abs() < 1e-5);
        assert!(net.layers[0].weight.iter().all(|w| w.abs() <= 0.25));
        for l in &net.layers[1..] {
            assert!(l.weight.iter().all(|w| w.abs() <= hidden_bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn width_one_shapes_chain() {
        let net = init_siren(&cfg(3, 1, 4, 0)).unwrap();
        let shapes: Vec<_> = net.layers.iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(1, 3), (1, 1), (1, 1), (3, 1)]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(init_siren(&cfg(0, 4, 3, 0)).is_err());
        assert!(init_siren(&cfg(3, 0, 3, 0)).is_err());
        assert!(init_siren(&cfg(3, 4, 1, 0)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut net = init_siren(&cfg(4, 8, 4, 3)).unwrap();
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let x = array![[0.3, -0.2, 0.9, 0.5], [-1.0, 1.0, 0.0, -0.4]];
        assert!(net.evaluate(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_network_matches_hand_computation() {
        let layers = vec![
            DenseLayer { weight: array![[0.5, -0.25, 0.125]], bias: array![0.1] },
            DenseLayer { weight: array![[0.7], [-0.3], [1.1]], bias: array![0.01, 0.02, -0.03] },
        ];
        let net = SirenNetwork::from_layers(layers, 2.0, [1.0, 2.0, 3.0]).unwrap();
        let x = [0.2, -0.6, 0.4];
        let h = (2.0f64 * (0.5 * x[0] - 0.25 * x[1] + 0.125 * x[2] + 0.1)).sin();
        let expect = [
            (0.7 * h + 0.01) * 1.0,
            (-0.3 * h + 0.02) * 2.0,
            (1.1 * h - 0.03) * 3.0,
        ];
        let out = net.evaluate(array![[x[0], x[1], x[2]]].view()).unwrap();
        for i in 0..3 {
            assert!((out[[0, i]] - expect[i]).abs() < 1e-12);
        }
        let (taped, _) = net.forward(array![[x[0], x[1], x[2]]].view()).unwrap();
        assert_eq!(taped, out);
    }

    #[test]
    fn doubling_output_scale_doubles_output() {
        let mut net = init_siren(&cfg(3, 8, 3, 5)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [0.9, -0.4, 0.0]];
        let a = net.evaluate(x.view()).unwrap();
        net.set_output_scale([2.0; 3]).unwrap();
        let b = net.evaluate(x.view()).unwrap();
        assert_eq!(b, &a * 2.0);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let net = init_siren(&cfg(4, 8, 3, 5)).unwrap();
        assert!(matches!(
            net.evaluate(array![[0.1, 0.2, 0.3]].view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = init_siren(&cfg(4, 8, 4, 9)).unwrap();
        let x = array![[0.1, 0.2, 0.3, -0.5]];
        let (_, tape) = net.forward(x.view()).unwrap();
        let (g, dx) = net.backward(&tape, Array2::zeros((1, 3)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let net = init_siren(&cfg(3, 8, 3, 1)).unwrap();
        let (_, tape) = net.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        assert!(net.backward(&tape, Array2::zeros((2, 3)).view()).is_err());
        let other = init_siren(&cfg(3, 8, 4, 1)).unwrap();
        assert!(other.backward(&tape, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn flatten_and_update_are_consistent() {
        let mut net = init_siren(&cfg(4, 5, 3, 2)).unwrap();
        let count = (4 * 5 + 5) + (5 * 5 + 5) + (5 * 3 + 3);
        assert_eq!(net.param_count(), count);
        let before = net.flatten_params();
        assert_eq!(before.len(), count);
        net.apply_update(&vec![0.0; count]).unwrap();
        assert_eq!(net.flatten_params(), before);
        let delta: Vec<f64> = (0..count).map(|i| i as f64 * 1e-3).collect();
        net.apply_update(&delta).unwrap();
        let after = net.flatten_params();
        for i in 0..count {
            assert_eq!(after[i], before[i] + delta[i]);
        }
        assert!(net.apply_update(&[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = init_siren(&SirenConfig {
            output_scale: [0.1, 0.2, 0.3],
            ..cfg(4, 6, 4, 11)
        })
        .unwrap();
        net.save_checkpoint(&path).unwrap();
        let back = SirenNetwork::load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
    }
}
