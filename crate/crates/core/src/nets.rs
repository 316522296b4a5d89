//! Dense teacher/student networks with channel-grouped hidden layers.
//!
//! Each hidden activation vector of width `W` is viewed as `C` channels of
//! `S = W / C` spatial positions, which is what the attention maps in
//! [`crate::losses`] operate on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub channels: usize,
    pub activation: Activation,
}

impl HiddenLayer {
    pub fn new(width: usize, channels: usize, activation: Activation) -> Self {
        Self {
            width,
            channels,
            activation,
        }
    }

    pub fn spatial(&self) -> usize {
        self.width / self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
    pub init_seed: u64,
}

impl NetworkSpec {
    /// Two relu layers of width 64 split into 8 channels.
    pub fn reference(input_dim: usize, output_dim: usize, init_seed: u64) -> Self {
        Self {
            input_dim,
            hidden: vec![HiddenLayer::new(64, 8, Activation::Relu); 2],
            output_dim,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dims must be positive".into()));
        }
        for (j, h) in self.hidden.iter().enumerate() {
            if h.width == 0 || h.channels == 0 || h.width % h.channels != 0 {
                return Err(Error::InvalidSpec(format!(
                    "hidden layer {j}: {} channels do not divide width {}",
                    h.channels, h.width
                )));
            }
        }
        Ok(())
    }

    /// `(C, S)` for every hidden layer.
    pub fn trace_shapes(&self) -> Vec<(usize, usize)> {
        self.hidden.iter().map(|h| (h.channels, h.spatial())).collect()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for h in &self.hidden {
            dims.push((fan_in, h.width));
            fan_in = h.width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for j in 0..self.hidden.len() {
            names.push(format!("hidden{j}.weight"));
            names.push(format!("hidden{j}.bias"));
        }
        names.push("output.weight".into());
        names.push("output.bias".into());
        names
    }
}

/// Checks that two specs produce layer-by-layer identical `(C, S)` traces.
pub fn check_aligned(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    let (a, b) = (teacher.trace_shapes(), student.trace_shapes());
    if a != b {
        return Err(Error::InvalidSpec(format!(
            "teacher trace {a:?} does not align with student trace {b:?}"
        )));
    }
    if teacher.output_dim != student.output_dim {
        return Err(Error::InvalidSpec("teacher and student output dims differ".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

/// Per-hidden-layer post-activations, each shaped `(B, C, S)` for batched
/// input or `(C, S)` for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Tensor>,
}

impl ActivationTrace {
    /// Index of the final hidden layer.
    pub fn last_index(&self) -> Option<usize> {
        self.layers.len().checked_sub(1)
    }

    pub fn last(&self) -> Option<&Tensor> {
        self.layers.last()
    }
}

/// Graph handles produced by [`forward_on_tape`]. Hidden activations are
/// `(B, width)`.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub output: Var,
    pub hidden: Vec<Var>,
}

impl Network {
    /// Glorot-uniform weights and zero biases drawn from `spec.init_seed`.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamSet::new();
        let names = spec.param_names();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.push(&names[2 * l], Tensor::new(vec![fan_in, fan_out], w)?)?;
            params.push(&names[2 * l + 1], Tensor::zeros(&[fan_out]))?;
        }
        Ok(Self { spec, params })
    }

    pub fn with_params(spec: NetworkSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let reference = Self::init(spec.clone())?;
        reference.params.check_layout(&params)?;
        Ok(Self { spec, params })
    }

    /// Runs the network and records every hidden activation.
    pub fn forward_trace(&self, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        let single = x.shape().len() == 1;
        let batch = if single { x.reshape(&[1, x.len()])? } else { x.clone() };
        let mut tape = Tape::new();
        let vars = tape.constants(&self.params);
        let xv = tape.constant_owned(batch);
        let fwd = forward_on_tape(&mut tape, &self.spec, &vars, xv)?;
        let b = tape.value(xv).rows();
        let mut layers = Vec::with_capacity(fwd.hidden.len());
        for (h, (c, s)) in fwd.hidden.iter().zip(self.spec.trace_shapes()) {
            let shape: &[usize] = if single { &[c, s] } else { &[b, c, s] };
            layers.push(tape.value(*h).reshape(shape)?);
        }
        let out = tape.value(fwd.output);
        let out = if single {
            out.reshape(&[self.spec.output_dim])?
        } else {
            out.clone()
        };
        Ok((out, ActivationTrace { layers }))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.0)
    }
}

/// Records a forward pass of `spec` on `tape`, with parameters supplied as
/// graph nodes in `spec.param_names()` order and `x` shaped `(B, input_dim)`.
pub fn forward_on_tape(tape: &mut Tape, spec: &NetworkSpec, params: &[Var], x: Var) -> Result<TapeForward> {
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[1] != spec.input_dim {
        return Err(Error::shape(
            "forward",
            format!("input {xs:?} for input_dim {}", spec.input_dim),
        ));
    }
    if params.len() != 2 * (spec.hidden.len() + 1) {
        return Err(Error::Layout(format!(
            "{} parameter nodes for {} layers",
            params.len(),
            spec.hidden.len() + 1
        )));
    }
    let mut h = x;
    let mut hidden = Vec::with_capacity(spec.hidden.len());
    for (j, layer) in spec.hidden.iter().enumerate() {
        let z = tape.matmul(h, params[2 * j])?;
        let z = tape.add_row(z, params[2 * j + 1])?;
        h = match layer.activation {
            Activation::Relu => tape.relu(z)?,
            Activation::Tanh => tape.tanh(z)?,
            Activation::Identity => z,
        };
        hidden.push(h);
    }
    let n = spec.hidden.len();
    let out = tape.matmul(h, params[2 * n])?;
    let output = tape.add_row(out, params[2 * n + 1])?;
    Ok(TapeForward { output, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NetworkSpec::reference(12, 15, 7);
        let a = Network::init(spec.clone()).unwrap();
        let b = Network::init(spec.clone()).unwrap();
        assert_eq!(a.params, b.params);
        let c = Network::init(NetworkSpec { init_seed: 8, ..spec }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_respects_glorot_limits() {
        let net = Network::init(NetworkSpec::reference(12, 15, 0)).unwrap();
        let w = net.params.get("hidden0.weight").unwrap();
        let limit = (6.0f64 / 76.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(net.params.get("hidden0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_count_must_divide_width() {
        let mut spec = NetworkSpec::reference(4, 3, 0);
        spec.hidden[1].channels = 7;
        assert!(matches!(Network::init(spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn reference_trace_shapes() {
        let net = Network::init(NetworkSpec::reference(3, 2, 0)).unwrap();
        let (_, trace) = net
            .forward_trace(&Tensor::from_vec(vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        assert_eq!(trace.layers.len(), 2);
        for l in &trace.layers {
            assert_eq!(l.shape(), &[8, 8]);
        }
        assert_eq!(trace.last_index(), Some(1));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = NetworkSpec {
            input_dim: 3,
            hidden: vec![HiddenLayer::new(3, 1, Activation::Identity)],
            output_dim: 3,
            init_seed: 0,
        };
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let mut params = ParamSet::new();
        for name in ["hidden0", "output"] {
            params
                .push(format!("{name}.weight"), Tensor::new(vec![3, 3], eye.clone()).unwrap())
                .unwrap();
            params.push(format!("{name}.bias"), Tensor::zeros(&[3])).unwrap();
        }
        let net = Network::with_params(spec, params).unwrap();
        let x = Tensor::from_vec(vec![1.5, -2.0, 0.25]).unwrap();
        let (y, trace) = net.forward_trace(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(trace.layers[0].data(), x.data());
    }

    #[test]
    fn dead_relu_layer_traces_zero() {
        let mut net = Network::init(NetworkSpec::reference(2, 1, 3)).unwrap();
        for v in net.params.get_mut("hidden0.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        for v in net.params.get_mut("hidden0.bias").unwrap().data_mut() {
            *v = -1.0;
        }
        let (_, trace) = net.forward_trace(&Tensor::from_vec(vec![0.3, -0.7]).unwrap()).unwrap();
        assert!(trace.layers[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_shapes() {
        let net = Network::init(NetworkSpec::reference(4, 6, 1)).unwrap();
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.05).collect()).unwrap();
        let (y, trace) = net.forward_trace(&x).unwrap();
        assert_eq!(y.shape(), &[5, 6]);
        assert!(trace.layers.iter().all(|l| l.shape() == [5, 8, 8]));
        // row 2 of the batch equals the single-sample pass
        let (y2, t2) = net
            .forward_trace(&Tensor::from_vec(x.row(2).to_vec()).unwrap())
            .unwrap();
        assert_eq!(y.row(2), y2.data());
        assert_eq!(&trace.layers[1].data()[2 * 64..3 * 64], t2.layers[1].data());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = Network::init(NetworkSpec::reference(4, 6, 1)).unwrap();
        assert!(net.forward_trace(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn forward_does_not_mutate() {
        let net = Network::init(NetworkSpec::reference(4, 6, 1)).unwrap();
        let before = net.clone();
        let x = Tensor::filled(&[3, 4], 0.5);
        let a = net.forward_trace(&x).unwrap();
        let b = net.forward_trace(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, before);
    }

    #[test]
    fn alignment_check() {
        let t = NetworkSpec::reference(8, 15, 0);
        let s = NetworkSpec::reference(12, 15, 0);
        check_aligned(&t, &s).unwrap();
        let mut bad = s.clone();
        bad.hidden[0] = HiddenLayer::new(64, 4, Activation::Relu);
        assert!(check_aligned(&t, &bad).is_err());
    }
}
