//! Layer descriptors. Each layer knows its parameter names and shapes,
//! registers them with an [`Initializer`], and records its forward pass on a
//! [`Graph`].

use super::graph::{Graph, Var};
use super::params::{Initializer, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::IntensityVolume;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            inputs,
            outputs,
        }
    }

    pub fn without_bias(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            bias: None,
            ..Self::new(prefix, inputs, outputs)
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        store.insert(
            &self.weight,
            init.uniform(&[self.inputs, self.outputs], self.inputs),
        )?;
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(&[self.outputs]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&self.gain, Tensor::filled(&[self.width], 1.0))?;
        store.insert(&self.bias, Tensor::zeros(&[self.width]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, init))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Multi-head self-attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            query: Linear::new(&format!("{prefix}.query"), width, width),
            key: Linear::new(&format!("{prefix}.key"), width, width),
            value: Linear::new(&format!("{prefix}.value"), width, width),
            output: Linear::new(&format!("{prefix}.output"), width, width),
            heads,
        })
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        for l in [&self.query, &self.key, &self.value, &self.output] {
            l.init(store, init)?;
        }
        Ok(())
    }

    /// Attention restricted to each row span; rows of different spans never
    /// attend to each other.
    pub fn forward_spans(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.attention(q, k, v, spans, self.heads)?;
        self.output.forward(g, store, a)
    }

    /// Attention over all `T` rows of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        self.forward_spans(g, store, x, &[(0, t)])
    }
}

/// Pre-norm transformer encoder block:
/// `h = x + attn(ln1(x))`, `out = h + ffn(ln2(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(prefix: &str, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), width),
            attention: MultiHeadAttention::new(&format!("{prefix}.attention"), width, heads)?,
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), width),
            ffn: Mlp::new(&format!("{prefix}.ffn"), &[width, hidden, width]),
        })
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.norm1.init(store)?;
        self.attention.init(store, init)?;
        self.norm2.init(store)?;
        self.ffn.init(store, init)
    }

    pub fn forward_spans(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let n1 = self.norm1.forward(g, store, x)?;
        let a = self.attention.forward_spans(g, store, n1, spans)?;
        let h = g.add(x, a)?;
        let n2 = self.norm2.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n2)?;
        g.add(h, f)
    }
}

/// One graph convolution: `relu(a_hat * e * w)`.
pub fn gcn_layer(g: &mut Graph, e: Var, a_hat: Var, w: Var) -> Result<Var> {
    let n = g.shape(e)[0];
    if g.shape(a_hat) != [n, n] {
        return Err(Error::Shape(format!(
            "gcn: propagation matrix {:?} for {n} nodes",
            g.shape(a_hat)
        )));
    }
    let ae = g.matmul(a_hat, e)?;
    let aew = g.matmul(ae, w)?;
    Ok(g.relu(aew))
}

/// Propagation matrix for graph convolution over undirected `edges`.
/// Normalized form: `D^-1/2 (A + I) D^-1/2`; raw form: `A`.
pub fn propagation_matrix(n: usize, edges: &[(usize, usize)], raw: bool) -> Tensor {
    let mut a = vec![0.0; n * n];
    for &(i, j) in edges {
        if i != j {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
    }
    if !raw {
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Tensor::new(vec![n, n], a).expect("n x n")
}

/// Two-stage stride-2 3D convolutional encoder producing a feature map at a
/// quarter of the input resolution.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub stage1: Linear,
    pub stage2: Linear,
    pub channels: usize,
}

impl ConvEncoder {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            stage1: Linear::new(&format!("{prefix}.conv1"), 27, hidden),
            stage2: Linear::new(&format!("{prefix}.conv2"), 27 * hidden, channels),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.stage1.init(store, init)?;
        self.stage2.init(store, init)
    }

    /// `[H, W, D, 1]` input tensor from an x-fastest intensity volume.
    pub fn volume_tensor(volume: &IntensityVolume) -> Tensor {
        let [h, w, d] = volume.dims();
        let mut data = vec![0.0; h * w * d];
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    data[(x * w + y) * d + z] = volume.get([x, y, z]);
                }
            }
        }
        Tensor::new(vec![h, w, d, 1], data).expect("volume extents")
    }

    /// Encodes a `[H, W, D, 1]` tensor with all extents divisible by 4 into a
    /// `[H/4, W/4, D/4, C]` feature map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != 1 || shape[..3].iter().any(|d| d % 4 != 0) {
            return Err(Error::Shape(format!(
                "conv encoder needs [H, W, D, 1] with extents divisible by 4, got {shape:?}"
            )));
        }
        let (p1, geo1) = g.patches(x)?;
        let h1 = self.stage1.forward(g, store, p1)?;
        let h1 = g.relu(h1);
        let o1 = geo1.output();
        let h1 = g.reshape(h1, &[o1[0], o1[1], o1[2], self.stage1.outputs])?;
        let (p2, geo2) = g.patches(h1)?;
        let h2 = self.stage2.forward(g, store, p2)?;
        let o2 = geo2.output();
        g.reshape(h2, &[o2[0], o2[1], o2[2], self.channels])
    }
}
