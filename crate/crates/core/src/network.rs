//! Small fully connected PINN architectures, evaluated over scalars and jets.
//!
//! Weights are a flat `&[f64]`. Packing is layer by layer: the weight matrix
//! in row-major (output-neuron-major) order, followed by the bias vector when
//! the layer has one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{tanh_derivatives, Jet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn tanh(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec { fan_in, fan_out, has_bias: true, activation: Activation::Tanh }
    }

    pub fn linear(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec { fan_in, fan_out, has_bias: false, activation: Activation::Linear }
    }

    fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.has_bias { self.fan_out } else { 0 }
    }
}

/// Affine map `x ↦ scale·x + shift` applied to one network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub scale: f64,
    pub shift: f64,
}

impl InputMap {
    pub const IDENTITY: InputMap = InputMap { scale: 1.0, shift: 0.0 };
}

impl Default for InputMap {
    fn default() -> Self {
        InputMap::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// One entry per input; identity unless configured.
    #[serde(default)]
    pub input_map: Vec<InputMap>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.fan_in == 0 || l.fan_out == 0 {
                return Err(Error::Config("layer widths must be positive".into()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Config(format!(
                    "layers do not chain: fan_out {} then fan_in {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        let input_map = vec![InputMap::IDENTITY; layers[0].fan_in];
        Ok(NetworkSpec { layers, input_map })
    }

    /// `(x) - 5 - 5 - (u)`: 45 weights.
    pub fn conv_diff() -> Self {
        Self::new(vec![LayerSpec::tanh(1, 5), LayerSpec::tanh(5, 5), LayerSpec::linear(5, 1)])
            .expect("valid preset")
    }

    /// `(t) - 3 - 3 - 3 - 3 - (x, y)` with a linear bias-free last hidden layer: 45 weights.
    pub fn projectile() -> Self {
        Self::new(vec![
            LayerSpec::tanh(1, 3),
            LayerSpec::tanh(3, 3),
            LayerSpec::tanh(3, 3),
            LayerSpec::linear(3, 3),
            LayerSpec::linear(3, 2),
        ])
        .expect("valid preset")
    }

    /// `(x, t) - 4 - 4 - 4 - (u)`: 56 weights.
    pub fn burgers() -> Self {
        Self::new(vec![
            LayerSpec::tanh(2, 4),
            LayerSpec::tanh(4, 4),
            LayerSpec::tanh(4, 4),
            LayerSpec::linear(4, 1),
        ])
        .expect("valid preset")
    }

    /// `(x, t) - 4 - 4 - 4 - 4 - (u)` with a linear bias-free last hidden layer: 72 weights.
    pub fn kdv() -> Self {
        Self::new(vec![
            LayerSpec::tanh(2, 4),
            LayerSpec::tanh(4, 4),
            LayerSpec::tanh(4, 4),
            LayerSpec::linear(4, 4),
            LayerSpec::linear(4, 1),
        ])
        .expect("valid preset")
    }

    pub fn with_input_map(mut self, map: Vec<InputMap>) -> Result<Self> {
        if map.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input map",
                expected: self.input_dim(),
                got: map.len(),
            });
        }
        self.input_map = map;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.fan_out.max(l.fan_in)).max().unwrap_or(1)
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: self.param_count(),
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, n: usize) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network inputs",
                expected: self.input_dim(),
                got: n,
            });
        }
        Ok(())
    }

    fn input_map_at(&self, i: usize) -> InputMap {
        self.input_map.get(i).copied().unwrap_or_default()
    }
}

/// Weights of one layer after unpacking.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out × fan_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn unpack(spec: &NetworkSpec, w: &[f64]) -> Result<Vec<LayerParams>> {
    spec.check_weights(w)?;
    let mut off = 0;
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let n = l.fan_in * l.fan_out;
        let weights = w[off..off + n].to_vec();
        off += n;
        let bias = if l.has_bias {
            let b = w[off..off + l.fan_out].to_vec();
            off += l.fan_out;
            Some(b)
        } else {
            None
        };
        out.push(LayerParams { weights, bias });
    }
    Ok(out)
}

pub fn pack(spec: &NetworkSpec, layers: &[LayerParams]) -> Result<Vec<f64>> {
    if layers.len() != spec.layers.len() {
        return Err(Error::DimensionMismatch {
            what: "layer count",
            expected: spec.layers.len(),
            got: layers.len(),
        });
    }
    let mut w = Vec::with_capacity(spec.param_count());
    for (l, p) in spec.layers.iter().zip(layers) {
        if p.weights.len() != l.fan_in * l.fan_out || p.bias.is_some() != l.has_bias {
            return Err(Error::Config("layer parameters do not match the spec".into()));
        }
        w.extend_from_slice(&p.weights);
        if let Some(b) = &p.bias {
            if b.len() != l.fan_out {
                return Err(Error::Config("bias length does not match the spec".into()));
            }
            w.extend_from_slice(b);
        }
    }
    Ok(w)
}

/// Scalar forward pass.
pub fn forward(spec: &NetworkSpec, w: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
    spec.check_weights(w)?;
    spec.check_inputs(inputs.len())?;
    let mut cur: Vec<f64> = inputs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let m = spec.input_map_at(i);
            x * m.scale + m.shift
        })
        .collect();
    let mut off = 0;
    for l in &spec.layers {
        let wm = &w[off..off + l.fan_in * l.fan_out];
        off += l.fan_in * l.fan_out;
        let bias = if l.has_bias {
            let b = &w[off..off + l.fan_out];
            off += l.fan_out;
            Some(b)
        } else {
            None
        };
        let next: Vec<f64> = (0..l.fan_out)
            .map(|o| {
                let row = &wm[o * l.fan_in..(o + 1) * l.fan_in];
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for (wi, hi) in row.iter().zip(&cur) {
                    acc += wi * hi;
                }
                match l.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                }
            })
            .collect();
        cur = next;
    }
    if cur.iter().all(|v| v.is_finite()) {
        Ok(cur)
    } else {
        Err(Error::NonFinite("network output"))
    }
}

/// Jet forward pass: outputs carry derivatives with respect to whichever
/// input was seeded.
pub fn forward_jet(spec: &NetworkSpec, w: &[f64], inputs: &[Jet]) -> Result<Vec<Jet>> {
    let mut tape = JetTape::new(spec);
    let out = tape.forward(spec, w, inputs)?;
    Ok(out.to_vec())
}

/// Reusable buffers for jet forward passes and their reverse sweep.
///
/// `forward` records every layer's input and pre-activation so that
/// [`JetTape::backward`] can pull an adjoint on the output jets back onto the
/// weights.
#[derive(Debug, Clone)]
pub struct JetTape {
    acts: Vec<Vec<Jet>>,
    pre: Vec<Vec<Jet>>,
    adj_a: Vec<[f64; 4]>,
    adj_b: Vec<[f64; 4]>,
}

impl JetTape {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut acts = Vec::with_capacity(spec.layers.len() + 1);
        acts.push(vec![Jet::ZERO; spec.input_dim()]);
        let mut pre = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            acts.push(vec![Jet::ZERO; l.fan_out]);
            pre.push(vec![Jet::ZERO; l.fan_out]);
        }
        let width = spec.max_width();
        JetTape { acts, pre, adj_a: vec![[0.0; 4]; width], adj_b: vec![[0.0; 4]; width] }
    }

    pub fn forward(&mut self, spec: &NetworkSpec, w: &[f64], inputs: &[Jet]) -> Result<&[Jet]> {
        spec.check_weights(w)?;
        spec.check_inputs(inputs.len())?;
        for (i, (slot, x)) in self.acts[0].iter_mut().zip(inputs).enumerate() {
            let m = spec.input_map_at(i);
            *slot = x.scale(m.scale) + m.shift;
        }
        let mut off = 0;
        for (li, l) in spec.layers.iter().enumerate() {
            let wm = &w[off..off + l.fan_in * l.fan_out];
            off += l.fan_in * l.fan_out;
            let bias = if l.has_bias {
                let b = &w[off..off + l.fan_out];
                off += l.fan_out;
                Some(b)
            } else {
                None
            };
            let (inp, rest) = self.acts.split_at_mut(li + 1);
            let inp = &inp[li];
            let out = &mut rest[0];
            let pre = &mut self.pre[li];
            for o in 0..l.fan_out {
                let row = &wm[o * l.fan_in..(o + 1) * l.fan_in];
                let mut acc = Jet::constant(bias.map_or(0.0, |b| b[o]));
                for (wi, hi) in row.iter().zip(inp.iter()) {
                    acc = acc.mul_add_scalar(*wi, *hi);
                }
                pre[o] = acc;
                out[o] = match l.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                };
            }
        }
        let out = &self.acts[spec.layers.len()];
        if out.iter().all(Jet::is_finite) {
            Ok(out)
        } else {
            Err(Error::NonFinite("network output jet"))
        }
    }

    /// Accumulate `∂(Σ adjᵀ·out)/∂w` into `grad` for the pass last recorded by
    /// [`JetTape::forward`]. `out_adj[o][j]` is the sensitivity to component
    /// `v_j` of output `o`.
    pub fn backward(&mut self, spec: &NetworkSpec, w: &[f64], out_adj: &[[f64; 4]], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), spec.param_count());
        debug_assert_eq!(out_adj.len(), spec.output_dim());
        // Offsets of each layer's block inside the packed vector.
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut off = 0;
        for l in &spec.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let (mut cur, mut next) = (std::mem::take(&mut self.adj_a), std::mem::take(&mut self.adj_b));
        cur[..out_adj.len()].copy_from_slice(out_adj);
        for (li, l) in spec.layers.iter().enumerate().rev() {
            let pre = &self.pre[li];
            // Adjoint of the activation output -> adjoint of the pre-activation.
            if l.activation == Activation::Tanh {
                for o in 0..l.fan_out {
                    cur[o] = tanh_vjp(pre[o], cur[o]);
                }
            }
            let base = offsets[li];
            let inp = &self.acts[li];
            let wm = &w[base..base + l.fan_in * l.fan_out];
            for o in 0..l.fan_out {
                let a = cur[o];
                let grow = &mut grad[base + o * l.fan_in..base + (o + 1) * l.fan_in];
                for (g, h) in grow.iter_mut().zip(inp.iter()) {
                    *g += a[0] * h.v0 + a[1] * h.v1 + a[2] * h.v2 + a[3] * h.v3;
                }
            }
            if l.has_bias {
                let bb = base + l.fan_in * l.fan_out;
                for o in 0..l.fan_out {
                    grad[bb + o] += cur[o][0];
                }
            }
            if li > 0 {
                for i in 0..l.fan_in {
                    let mut acc = [0.0; 4];
                    for o in 0..l.fan_out {
                        let wi = wm[o * l.fan_in + i];
                        for j in 0..4 {
                            acc[j] += wi * cur[o][j];
                        }
                    }
                    next[i] = acc;
                }
                std::mem::swap(&mut cur, &mut next);
            }
        }
        self.adj_a = cur;
        self.adj_b = next;
    }
}

/// Reverse sweep through `h = tanh(a)` on jets.
#[inline]
fn tanh_vjp(a: Jet, hb: [f64; 4]) -> [f64; 4] {
    let t = a.v0.tanh();
    let [d1, d2, d3, d4] = tanh_derivatives(t);
    let (a1, a2, a3) = (a.v1, a.v2, a.v3);
    [
        hb[0] * d1
            + hb[1] * d2 * a1
            + hb[2] * (d3 * a1 * a1 + d2 * a2)
            + hb[3] * (d4 * a1 * a1 * a1 + 3.0 * d3 * a1 * a2 + d2 * a3),
        hb[1] * d1 + hb[2] * 2.0 * d2 * a1 + hb[3] * (3.0 * d3 * a1 * a1 + 3.0 * d2 * a2),
        hb[2] * d1 + hb[3] * 3.0 * d2 * a1,
        hb[3] * d1,
    ]
}
