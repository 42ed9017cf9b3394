//! Model state and the forward/backward engine behind every training op.

use rand::Rng;

use super::arch::{ActivationKind, ArchitectureSpec, LayerSpec, PoolKind};
use super::layers::{
    activation_backward, activation_forward, conv_backward, conv_forward, dense_backward,
    dense_forward, pool_backward, pool_forward, ConvDims, PoolDims,
};
use super::Real;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

const MODEL_MAGIC: &[u8; 4] = b"FPM1";
const MODEL_VERSION: u8 = 1;

/// Architecture descriptor plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchitectureSpec,
    params: Tensor,
}

impl ModelState {
    /// Seeded He-uniform weight init, zero biases.
    pub fn init(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, Purpose::ModelInit, &[]);
        let mut params = vec![0.0f32; arch.param_count()];
        let layout = arch.param_layout();
        for (layer, range) in arch.layers.iter().zip(&layout) {
            let (fan_in, weight_count) = match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (in_ch * kernel * kernel, out_ch * in_ch * kernel * kernel),
                LayerSpec::Dense { in_dim, out_dim } => (in_dim, in_dim * out_dim),
                _ => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            for w in &mut params[range.start..range.start + weight_count] {
                *w = rng.random_range(-limit..limit);
            }
            // Biases stay zero.
        }
        Ok(Self {
            arch,
            params: Tensor::new(vec![params.len()], params)?,
        })
    }

    /// Wraps an explicit parameter vector; length must match the layout.
    pub fn from_params(arch: ArchitectureSpec, params: Tensor) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::IncompatibleArchitecture(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Size of the parameter payload on the wire.
    pub fn param_bytes(&self) -> u64 {
        (self.params.len() * 4) as u64
    }

    /// Raw (pre-softmax) logits for a `[B, C, H, W]` batch; returns `[B, N]`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        self.forward_from_layer(0, inputs)
    }

    /// Activations at the embedding layer; returns `[B, E]`.
    pub fn embed(&self, inputs: &Tensor) -> Result<Tensor> {
        let engine: Engine<f32> = Engine::new(&self.arch, self.params.data())?;
        let out = engine.run_batch(0, Some(self.arch.embedding_layer + 1), inputs)?;
        out.ensure_finite("embed")?;
        Ok(out)
    }

    /// Runs layers `start..` on a batch of activations shaped like the input
    /// of layer `start`. `forward` is the `start == 0` case; feeding `embed`
    /// output at `start == embedding_layer + 1` reproduces `forward` exactly.
    pub fn forward_from_layer(&self, start: usize, inputs: &Tensor) -> Result<Tensor> {
        let engine: Engine<f32> = Engine::new(&self.arch, self.params.data())?;
        let out = engine.run_batch(start, None, inputs)?;
        out.ensure_finite("forward")?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(MODEL_MAGIC);
        w.put_u8(MODEL_VERSION);
        for d in self.arch.input_shape {
            w.put_u32(d as u32);
        }
        w.put_u32(self.arch.num_classes as u32);
        w.put_u32(self.arch.embedding_layer as u32);
        w.put_u32(self.arch.layers.len() as u32);
        for layer in &self.arch.layers {
            let (tag, f): (u8, [usize; 5]) = match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => (0, [in_ch, out_ch, kernel, stride, padding]),
                LayerSpec::Dense { in_dim, out_dim } => (1, [in_dim, out_dim, 0, 0, 0]),
                LayerSpec::Pool {
                    kind,
                    kernel,
                    stride,
                } => (
                    2,
                    [
                        match kind {
                            PoolKind::Avg => 0,
                            PoolKind::Max => 1,
                        },
                        kernel,
                        stride,
                        0,
                        0,
                    ],
                ),
                LayerSpec::Activation(kind) => (
                    3,
                    [
                        match kind {
                            ActivationKind::Relu => 0,
                            ActivationKind::Tanh => 1,
                            ActivationKind::Identity => 2,
                        },
                        0,
                        0,
                        0,
                        0,
                    ],
                ),
                LayerSpec::Flatten => (4, [0; 5]),
            };
            w.put_u8(tag);
            for v in f {
                w.put_u32(v as u32);
            }
        }
        w.put_u64(self.params.len() as u64);
        w.put_f32_slice(self.params.data());
        w.bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC, "model state")?;
        let version = r.get_u8()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let input_shape = [
            r.get_u32()? as usize,
            r.get_u32()? as usize,
            r.get_u32()? as usize,
        ];
        let num_classes = r.get_u32()? as usize;
        let embedding_layer = r.get_u32()? as usize;
        let n_layers = r.get_u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = r.get_u8()?;
            let mut f = [0usize; 5];
            for v in &mut f {
                *v = r.get_u32()? as usize;
            }
            layers.push(match tag {
                0 => LayerSpec::Conv {
                    in_ch: f[0],
                    out_ch: f[1],
                    kernel: f[2],
                    stride: f[3],
                    padding: f[4],
                },
                1 => LayerSpec::Dense {
                    in_dim: f[0],
                    out_dim: f[1],
                },
                2 => LayerSpec::Pool {
                    kind: if f[0] == 0 { PoolKind::Avg } else { PoolKind::Max },
                    kernel: f[1],
                    stride: f[2],
                },
                3 => LayerSpec::Activation(match f[0] {
                    0 => ActivationKind::Relu,
                    1 => ActivationKind::Tanh,
                    2 => ActivationKind::Identity,
                    k => return Err(Error::Format(format!("unknown activation kind {k}"))),
                }),
                4 => LayerSpec::Flatten,
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            });
        }
        let n_params = r.get_u64()? as usize;
        let params = r.get_f32_vec(n_params)?;
        if !r.done() {
            return Err(Error::Format("trailing bytes after model state".into()));
        }
        let arch = ArchitectureSpec::new(input_shape, layers, embedding_layer, num_classes)?;
        Self::from_params(arch, Tensor::new(vec![n_params], params)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A layer with its shapes resolved against a concrete architecture.
enum Resolved {
    Conv(ConvDims),
    Dense { in_dim: usize, out_dim: usize },
    Pool(PoolKind, PoolDims),
    Activation(ActivationKind),
    Flatten,
}

/// Forward/backward executor over a flat parameter vector, generic in the
/// scalar type so gradients can be verified in `f64` while production runs
/// `f32`.
pub struct Engine<F> {
    resolved: Vec<Resolved>,
    /// Element count of every layer boundary; `[0]` is the input.
    sizes: Vec<usize>,
    layout: Vec<std::ops::Range<usize>>,
    params: Vec<F>,
}

impl<F: Real> Engine<F> {
    pub fn new(arch: &ArchitectureSpec, params: &[f32]) -> Result<Self> {
        Self::from_values(arch, params.iter().map(|&p| F::from_f32(p)).collect())
    }

    pub fn from_values(arch: &ArchitectureSpec, params: Vec<F>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::IncompatibleArchitecture(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        let shapes = arch.layer_shapes()?;
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let mut resolved = Vec::with_capacity(arch.layers.len());
        for (layer, shape) in arch.layers.iter().zip(&shapes) {
            resolved.push(match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    let out = layer.output_shape(shape)?;
                    Resolved::Conv(ConvDims {
                        in_ch,
                        out_ch,
                        h: shape[1],
                        w: shape[2],
                        kernel,
                        stride,
                        padding,
                        out_h: out[1],
                        out_w: out[2],
                    })
                }
                LayerSpec::Dense { in_dim, out_dim } => Resolved::Dense { in_dim, out_dim },
                LayerSpec::Pool {
                    kind,
                    kernel,
                    stride,
                } => {
                    let out = layer.output_shape(shape)?;
                    Resolved::Pool(
                        kind,
                        PoolDims {
                            channels: shape[0],
                            h: shape[1],
                            w: shape[2],
                            kernel,
                            stride,
                            out_h: out[1],
                            out_w: out[2],
                        },
                    )
                }
                LayerSpec::Activation(kind) => Resolved::Activation(kind),
                LayerSpec::Flatten => Resolved::Flatten,
            });
        }
        Ok(Self {
            resolved,
            sizes,
            layout: arch.param_layout(),
            params,
        })
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn num_layers(&self) -> usize {
        self.resolved.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_input_size(&self, layer: usize) -> usize {
        self.sizes[layer]
    }

    /// Per-layer activations for one sample: `trace[l]` is the input of layer
    /// `l`, `trace[num_layers]` the logits.
    pub fn forward_trace(&self, x: &[F]) -> Vec<Vec<F>> {
        assert_eq!(x.len(), self.sizes[0], "input size mismatch");
        let mut trace = Vec::with_capacity(self.resolved.len() + 1);
        trace.push(x.to_vec());
        for (l, layer) in self.resolved.iter().enumerate() {
            let input = trace.last().unwrap();
            let mut out = vec![F::zero(); self.sizes[l + 1]];
            let p = &self.params[self.layout[l].clone()];
            match layer {
                Resolved::Conv(d) => {
                    let wn = d.out_ch * d.in_ch * d.kernel * d.kernel;
                    conv_forward(input, &p[..wn], &p[wn..], d, &mut out);
                }
                Resolved::Dense { in_dim, out_dim } => {
                    let wn = in_dim * out_dim;
                    dense_forward(input, &p[..wn], &p[wn..], &mut out);
                }
                Resolved::Pool(kind, d) => pool_forward(input, *kind, d, &mut out),
                Resolved::Activation(kind) => activation_forward(input, *kind, &mut out),
                Resolved::Flatten => out.copy_from_slice(input),
            }
            trace.push(out);
        }
        trace
    }

    /// Runs layers `start..end` on one sample (`end == num_layers` for logits).
    pub fn run_sample(&self, start: usize, end: usize, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.sizes[start], "activation size mismatch");
        let mut cur = x.to_vec();
        for l in start..end {
            let mut out = vec![F::zero(); self.sizes[l + 1]];
            let p = &self.params[self.layout[l].clone()];
            match &self.resolved[l] {
                Resolved::Conv(d) => {
                    let wn = d.out_ch * d.in_ch * d.kernel * d.kernel;
                    conv_forward(&cur, &p[..wn], &p[wn..], d, &mut out);
                }
                Resolved::Dense { in_dim, out_dim } => {
                    let wn = in_dim * out_dim;
                    dense_forward(&cur, &p[..wn], &p[wn..], &mut out);
                }
                Resolved::Pool(kind, d) => pool_forward(&cur, *kind, d, &mut out),
                Resolved::Activation(kind) => activation_forward(&cur, *kind, &mut out),
                Resolved::Flatten => out.copy_from_slice(&cur),
            }
            cur = out;
        }
        cur
    }

    /// Backpropagates a logit gradient through the trace, accumulating into
    /// `d_params` (`+=` semantics, so batches can share one buffer).
    pub fn backward(&self, trace: &[Vec<F>], d_logits: &[F], d_params: &mut [F]) {
        let mut d_out = d_logits.to_vec();
        for l in (0..self.resolved.len()).rev() {
            let input = &trace[l];
            let mut d_in = vec![F::zero(); self.sizes[l]];
            let p = &self.params[self.layout[l].clone()];
            let dp = &mut d_params[self.layout[l].clone()];
            match &self.resolved[l] {
                Resolved::Conv(d) => {
                    let wn = d.out_ch * d.in_ch * d.kernel * d.kernel;
                    let (dw, db) = dp.split_at_mut(wn);
                    conv_backward(input, &p[..wn], &d_out, d, &mut d_in, dw, db);
                }
                Resolved::Dense { in_dim, out_dim } => {
                    let wn = in_dim * out_dim;
                    let (dw, db) = dp.split_at_mut(wn);
                    dense_backward(input, &p[..wn], &d_out, &mut d_in, dw, db);
                }
                Resolved::Pool(kind, d) => pool_backward(input, *kind, d, &d_out, &mut d_in),
                Resolved::Activation(kind) => {
                    activation_backward(&trace[l + 1], *kind, &d_out, &mut d_in)
                }
                Resolved::Flatten => d_in.copy_from_slice(&d_out),
            }
            d_out = d_in;
        }
    }

    /// Batched layer execution over a `[B, ...]` tensor, optionally stopping
    /// before `end`. Used by the public f32 ops.
    fn run_batch(&self, start: usize, end: Option<usize>, inputs: &Tensor) -> Result<Tensor> {
        let end = end.unwrap_or(self.resolved.len());
        let batch = inputs.rows();
        let per = inputs.row_len();
        if per != self.sizes[start] || inputs.shape().len() < 2 {
            return Err(Error::InputShape {
                expected: vec![batch, self.sizes[start]],
                got: inputs.shape().to_vec(),
            });
        }
        let out_size = self.sizes[end];
        let mut data = Vec::with_capacity(batch * out_size);
        for b in 0..batch {
            let row: Vec<F> = inputs.row(b).iter().map(|&v| F::from_f32(v)).collect();
            let out = self.run_sample(start, end, &row);
            data.extend(out.iter().map(|&v| v.to_f32()));
        }
        Tensor::new(vec![batch, out_size], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Preset;

    fn small() -> ArchitectureSpec {
        Preset::Small.build([1, 8, 8], 3).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = ArchitectureSpec::new(
            [1, 2, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 4,
                },
                LayerSpec::Activation(ActivationKind::Identity),
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 2,
                },
            ],
            2,
            2,
        )
        .unwrap();
        let n = arch.param_count();
        let m = ModelState::from_params(arch, Tensor::zeros(vec![n])).unwrap();
        let x = Tensor::new(vec![2, 1, 2, 2], vec![0.5; 8]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        // Single dense layer with identity weights: logits == input.
        let arch = ArchitectureSpec::new(
            [1, 1, 3],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 3,
                },
            ],
            0,
            3,
        )
        .unwrap();
        let mut params = vec![0.0f32; arch.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let m = ModelState::from_params(arch, Tensor::new(vec![12], params).unwrap()).unwrap();
        let v = vec![0.25f32, -1.5, 3.0];
        let x = Tensor::new(vec![1, 1, 1, 3], v.clone()).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &v[..]);
    }

    // Frozen oracle: hand-computed two-layer forward.
    //   x = [1, 2], W1 = [[0.5, -1], [2, 0.25]], b1 = [0.1, -0.2]
    //   h = W1 x + b1 = [-1.4, 2.3]  (identity activation)
    //   W2 = [[1, 1], [-0.5, 2], [0, 3]], b2 = [0, 0.5, -1]
    //   y = W2 h + b2 = [0.9, 5.8, 5.9]
    #[test]
    fn two_layer_forward_matches_hand_computation() {
        let arch = ArchitectureSpec::new(
            [1, 1, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                },
                LayerSpec::Activation(ActivationKind::Identity),
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 3,
                },
            ],
            2,
            3,
        )
        .unwrap();
        let params = vec![
            0.5, -1.0, 2.0, 0.25, // W1 row-major
            0.1, -0.2, // b1
            1.0, 1.0, -0.5, 2.0, 0.0, 3.0, // W2
            0.0, 0.5, -1.0, // b2
        ];
        let m = ModelState::from_params(
            arch,
            Tensor::new(vec![params.len()], params).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = m.forward(&x).unwrap();
        let want = [0.9f32, 5.8, 5.9];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = ModelState::init(small(), 1).unwrap();
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        assert!(matches!(m.forward(&x), Err(Error::InputShape { .. })));
    }

    #[test]
    fn embed_then_tail_reproduces_forward_bitwise() {
        let m = ModelState::init(small(), 42).unwrap();
        let mut rng = stream(7, Purpose::Synth, &[]);
        let data: Vec<f32> = (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![3, 1, 8, 8], data).unwrap();
        let full = m.forward(&x).unwrap();
        let emb = m.embed(&x).unwrap();
        assert_eq!(emb.shape(), &[3, m.arch().embedding_dim()]);
        let tail = m
            .forward_from_layer(m.arch().embedding_layer + 1, &emb)
            .unwrap();
        assert_eq!(full, tail);
    }

    #[test]
    fn embedding_at_flatten_returns_flat_input() {
        let arch = ArchitectureSpec::new(
            [1, 2, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 2,
                },
            ],
            0,
            2,
        )
        .unwrap();
        let m = ModelState::init(arch, 3).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = m.embed(&x).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_weights_up_to_embedding_give_zero_embeddings() {
        let m0 = ModelState::init(small(), 5).unwrap();
        let mut params = m0.params().data().to_vec();
        let layout = m0.arch().param_layout();
        for (l, range) in layout.iter().enumerate() {
            if l <= m0.arch().embedding_layer {
                params[range.clone()].fill(0.0);
            }
        }
        let m = ModelState::from_params(
            m0.arch().clone(),
            Tensor::new(vec![params.len()], params).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], vec![0.7; 64]).unwrap();
        assert!(m.embed(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let m = ModelState::init(small(), 99).unwrap();
        let bytes = m.to_bytes();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(m, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(ModelState::from_bytes(b"nope").is_err());
        let mut ok = ModelState::init(small(), 1).unwrap().to_bytes();
        ok.push(0);
        assert!(ModelState::from_bytes(&ok).is_err());
    }
}
