//! Feed-forward networks and flat parameter containers.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, DualVar, Tape, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::Softplus => Unary::Softplus,
            Activation::Relu => Unary::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Shape of one affine layer: weight is `fan_in × fan_out`, bias `fan_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

impl MlpSpec {
    /// Two hidden tanh layers of 64 units.
    pub fn default_dynamics(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(format!("all layer widths must be >= 1: {self:?}"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths
            .windows(2)
            .map(|w| LayerShape {
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }
}

/// Flat parameters, layer by layer: weights row-major then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            flat: vec![0.0; spec.param_count()],
            layout: spec.layers(),
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// `(weight_offset, bias_offset)` of each layer.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layout
            .iter()
            .map(|l| {
                let w = off;
                let b = off + l.fan_in * l.fan_out;
                off = b + l.fan_out;
                (w, b)
            })
            .collect()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.layout[layer];
        let (w, _) = self.offsets()[layer];
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.flat[w..w + l.fan_in * l.fan_out])
            .unwrap()
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = self.layout[layer];
        let (_, b) = self.offsets()[layer];
        &self.flat[b..b + l.fan_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer];
        let (_, b) = self.offsets()[layer];
        &mut self.flat[b..b + l.fan_out]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer];
        let (w, _) = self.offsets()[layer];
        &mut self.flat[w..w + l.fan_in * l.fan_out]
    }
}

/// Weights ~ N(0, 1/fan_in), zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamVector::zeros(spec);
    for (layer, shape) in spec.layers().iter().enumerate() {
        let dist = Normal::new(0.0, 1.0 / (shape.fan_in as f64).sqrt()).unwrap();
        for w in p.weight_mut(layer) {
            *w = dist.sample(&mut rng);
        }
    }
    p
}

/// Batched forward pass, one row per input.
pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &Array2<f64>) -> Result<Array2<f64>, AdError> {
    if x.ncols() != spec.input_dim {
        return Err(AdError::DimensionMismatch {
            expected: spec.input_dim,
            got: x.ncols(),
        });
    }
    if params.len() != spec.param_count() {
        return Err(AdError::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    let n_layers = params.layout.len();
    let act = spec.activation.unary();
    let mut h = x.clone();
    for layer in 0..n_layers {
        let b = ArrayView2::from_shape((1, params.layout[layer].fan_out), params.bias(layer)).unwrap();
        h = &h.dot(&params.weight(layer)) + &b;
        if layer + 1 < n_layers {
            h.mapv_inplace(|v| act.eval(v));
        }
    }
    Ok(h)
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, AdError> {
        forward(&self.spec, &self.params, x)
    }

    /// Binds this network's layers to a slice of a flat parameter row on the
    /// tape, starting at `offset`.
    pub fn bind(&self, tape: &mut Tape, theta: Var, offset: usize) -> BoundMlp {
        let layers = self
            .params
            .layout
            .iter()
            .zip(self.params.offsets())
            .map(|(l, (w, b))| {
                (
                    tape.view(theta, offset + w, l.fan_in, l.fan_out),
                    tape.view(theta, offset + b, 1, l.fan_out),
                )
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.spec.activation.unary(),
        }
    }
}

/// Network layers living on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Unary,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            h = tape.add(z, b);
            if i < last {
                h = tape.unary(self.activation, h);
            }
        }
        h
    }

    /// Forward pass that also pushes one tangent per seed (directional
    /// derivatives with respect to the input). Seeds broadcast against `x`.
    pub fn forward_tangents(&self, tape: &mut Tape, x: Var, seeds: &[Var]) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut tangents: Vec<Var> = seeds.to_vec();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            let pre = tape.add(z, b);
            for t in tangents.iter_mut() {
                *t = tape.matmul(*t, w);
            }
            if i < last {
                h = tape.unary(self.activation, pre);
                let d = tape.unary_deriv(self.activation, pre, h);
                for t in tangents.iter_mut() {
                    *t = tape.mul(d, *t);
                }
            } else {
                h = pre;
            }
        }
        (h, tangents)
    }

    /// Single-direction dual forward pass.
    pub fn forward_dual(&self, tape: &mut Tape, x: DualVar) -> DualVar {
        let (p, t) = self.forward_tangents(tape, x.primal, &[x.tangent]);
        DualVar {
            primal: p,
            tangent: t[0],
        }
    }
}
