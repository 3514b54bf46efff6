//! Fully connected network with feature taps on hidden layers.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CAKD1"                       5 bytes magic
//! u32 layer_width_count, u32 × count    input, hidden..., output widths
//! u8  activation                0 = relu, 1 = tanh
//! u32 tap_count, u32 × count    tapped hidden-layer indices
//! f64 × params                  for each layer: weights [out][in] row-major, then bias [out]
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoupled::TapActivations;
use crate::error::{format_err, invalid, Result};

const CHECKPOINT_MAGIC: &[u8; 5] = b"CAKD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input, hidden..., output.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// Hidden-layer indices (0 = first hidden layer) exposed as feature taps.
    pub tap_layers: Vec<usize>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(invalid("network needs input, at least one hidden, and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        let hidden = self.hidden_count();
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t >= hidden) {
            return Err(invalid(format!("tap layer {t} out of range for {hidden} hidden layers")));
        }
        Ok(())
    }

    pub fn hidden_count(&self) -> usize {
        self.layer_widths.len() - 2
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    /// Width of each tapped layer, in tap order.
    pub fn tap_widths(&self) -> Vec<usize> {
        self.tap_layers.iter().map(|&t| self.layer_widths[t + 1]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Parameter-shaped buffer (gradients, velocities).
pub type Params = Vec<Dense>;

/// Activations cached by [`Mlp::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[layer][sample][unit]` pre-activations, one entry per dense layer.
    pre: Vec<Vec<Vec<f64>>>,
    /// `[layer][sample][unit]` layer inputs: index 0 is the batch input,
    /// index `l` the activated output of hidden layer `l - 1`.
    post: Vec<Vec<Vec<f64>>>,
    taps: TapActivations<f64>,
}

impl ForwardPass {
    pub fn taps(&self) -> &TapActivations<f64> {
        &self.taps
    }

    pub fn into_taps(self) -> TapActivations<f64> {
        self.taps
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.taps.logits
    }
}

impl Mlp {
    /// All weights and biases zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { spec, layers })
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut m.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Runs a batch and keeps everything needed by [`Mlp::backward`].
    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<ForwardPass> {
        let width = self.spec.input_width();
        if let Some(x) = batch.iter().find(|x| x.len() != width) {
            return Err(invalid(format!("input width {} but network expects {width}", x.len())));
        }
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = vec![batch.to_vec()];
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<Vec<f64>> = post[l].iter().map(|x| layer.forward(x)).collect();
            if l < last {
                post.push(z.iter().map(|r| r.iter().map(|&v| act.apply(v)).collect()).collect());
            }
            pre.push(z);
        }
        let taps = TapActivations {
            logits: pre[last].clone(),
            features: self.spec.tap_layers.iter().map(|&t| post[t + 1].clone()).collect(),
        };
        Ok(ForwardPass { pre, post, taps })
    }

    /// Logits and tapped hidden activations for a batch.
    pub fn forward_with_taps(&self, batch: &[Vec<f64>]) -> Result<TapActivations<f64>> {
        self.forward(batch).map(ForwardPass::into_taps)
    }

    /// Parameter gradient given `∂loss/∂(site values)` for every site of `pass`.
    pub fn backward(&self, pass: &ForwardPass, upstream: &TapActivations<f64>) -> Result<Params> {
        let batch = pass.taps.batch_size();
        if upstream.batch_size() != batch || upstream.features.len() != pass.taps.features.len() {
            return Err(invalid("upstream gradients are not aligned with the forward pass"));
        }
        let aligned = |g: &[Vec<f64>], v: &[Vec<f64>]| g.len() == v.len() && g.iter().zip(v).all(|(a, b)| a.len() == b.len());
        if !aligned(&upstream.logits, &pass.taps.logits)
            || !upstream.features.iter().zip(&pass.taps.features).all(|(g, v)| aligned(g, v))
        {
            return Err(invalid("upstream gradient widths do not match site widths"));
        }

        let act = self.spec.activation;
        let mut grads: Params = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        // delta = ∂loss/∂(pre-activation) of the current layer
        let mut delta: Vec<Vec<f64>> = upstream.logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads[l];
            for (d, x) in delta.iter().zip(&pass.post[l]) {
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(x).for_each(|(gw, xv)| *gw += dv * xv);
                }
            }
            if l == 0 {
                break;
            }
            // ∂loss/∂(output of hidden layer l-1)
            let mut upstream_post: Vec<Vec<f64>> = delta
                .iter()
                .map(|d| {
                    let mut out = vec![0.0; layer.inputs];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv != 0.0 {
                            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                            out.iter_mut().zip(row).for_each(|(a, w)| *a += dv * w);
                        }
                    }
                    out
                })
                .collect();
            let hidden = l - 1;
            for (tap, _) in self.spec.tap_layers.iter().enumerate().filter(|(_, &t)| t == hidden) {
                for (acc, g) in upstream_post.iter_mut().zip(&upstream.features[tap]) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            delta = upstream_post
                .into_iter()
                .zip(pass.pre[hidden].iter().zip(&pass.post[l]))
                .map(|(up, (z, y))| {
                    up.iter()
                        .zip(z.iter().zip(y))
                        .map(|(u, (&zv, &yv))| u * act.derivative(zv, yv))
                        .collect()
                })
                .collect();
        }
        Ok(grads)
    }

    pub fn predict(&self, batch: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self
            .forward(batch)?
            .logits()
            .iter()
            .map(|z| argmax(z))
            .collect())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.spec.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put_u32(&mut out, self.spec.layer_widths.len());
        for &w in &self.spec.layer_widths {
            put_u32(&mut out, w);
        }
        out.push(self.spec.activation.code());
        put_u32(&mut out, self.spec.tap_layers.len());
        for &t in &self.spec.tap_layers {
            put_u32(&mut out, t);
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(format_err("not a CAKD1 checkpoint"));
        }
        let n = r.u32_le()?;
        if n > 1024 {
            return Err(format_err(format!("implausible layer count {n}")));
        }
        let layer_widths = (0..n).map(|_| r.u32_le()).collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(r.take(1)?[0]).ok_or_else(|| format_err("unknown activation code"))?;
        let taps = r.u32_le()?;
        if taps > n {
            return Err(format_err(format!("implausible tap count {taps}")));
        }
        let tap_layers = (0..taps).map(|_| r.u32_le()).collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec {
            layer_widths,
            activation,
            tap_layers,
        };
        spec.validate().map_err(|e| format_err(format!("checkpoint spec: {e}")))?;
        let expected = spec.param_count() * 8;
        let rest = &bytes[r.pos..];
        if rest.len() != expected {
            return Err(format_err(format!(
                "checkpoint has {} parameter bytes, spec needs {expected}",
                rest.len()
            )));
        }
        let mut model = Self::zeros(spec)?;
        for (p, chunk) in model.params_mut().zip(rest.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], taps: &[usize]) -> MlpSpec {
        MlpSpec {
            layer_widths: widths.to_vec(),
            activation: Activation::Relu,
            tap_layers: taps.to_vec(),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(&[2, 2], &[]).validate().is_err());
        assert!(spec(&[2, 3, 2], &[1]).validate().is_err());
        assert!(spec(&[2, 0, 2], &[]).validate().is_err());
        assert!(spec(&[2, 3, 4, 2], &[0, 1]).validate().is_ok());
        assert_eq!(spec(&[2, 3, 4, 2], &[0, 1]).param_count(), 9 + 16 + 10);
    }

    #[test]
    fn zero_network_gives_uniform() {
        let m = Mlp::zeros(spec(&[3, 4, 5], &[0])).unwrap();
        let taps = m.forward_with_taps(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(taps.logits, vec![vec![0.0; 5]]);
        let p = crate::prob::softmax(&taps.logits[0], 1.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_unit_tap_is_activation() {
        let mut m = Mlp::zeros(MlpSpec {
            layer_widths: vec![1, 1, 1],
            activation: Activation::Tanh,
            tap_layers: vec![0],
        })
        .unwrap();
        m.layers[0].weights[0] = 1.0;
        m.layers[1].weights[0] = 1.0;
        for x in [-2.0, 0.3, 1.7] {
            let taps = m.forward_with_taps(&[vec![x]]).unwrap();
            assert_eq!(taps.features[0][0][0], x.tanh());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Mlp::init(spec(&[4, 8, 6, 3], &[0, 1]), 11).unwrap();
        let x = vec![vec![0.1, 0.2, -0.3, 0.9]; 3];
        let a = m.forward_with_taps(&x).unwrap();
        let b = Mlp::init(spec(&[4, 8, 6, 3], &[0, 1]), 11).unwrap().forward_with_taps(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.len(), 2);
        assert!(m.forward(&[vec![1.0]]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = Mlp::init(spec(&[4, 8, 6, 3], &[1]), 5).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..5], b"CAKD1");
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), m);
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Mlp::from_bytes(&bad).is_err());
        assert!(Mlp::from_bytes(&bytes[..7]).is_err());
    }

    #[test]
    fn backward_rejects_misaligned() {
        let m = Mlp::init(spec(&[2, 3, 2], &[0]), 1).unwrap();
        let pass = m.forward(&[vec![0.1, 0.2]]).unwrap();
        let mut g = pass.taps().zeros_like();
        g.features.clear();
        assert!(m.backward(&pass, &g).is_err());
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
