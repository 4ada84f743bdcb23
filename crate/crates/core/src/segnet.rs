//! The per-image convolutional segmentation network.
//!
//! Each block is `conv3x3 -> relu -> channel_norm`, optionally followed by a
//! learnable per-channel scale and shift. The output of the final block is
//! the response map whose per-pixel argmax gives the cluster labels.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Param, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGSN";
/// Layout written by nets without scale/shift parameters.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Version 1 followed by every layer's scale and then shift values.
pub const CHECKPOINT_VERSION_AFFINE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub num_layers: usize,
    /// Filters per layer; also the maximum number of clusters.
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input_channels: usize,
    pub eps_norm: f64,
    /// Learnable per-channel scale and shift after every normalization.
    pub affine: bool,
}

impl SegNetConfig {
    pub fn new(input_channels: usize) -> Self {
        SegNetConfig {
            num_layers: 3,
            filters: 100,
            kernel: 3,
            stride: 1,
            pad: 1,
            input_channels,
            eps_norm: 1e-5,
            affine: true,
        }
    }

    pub fn with_filters(mut self, filters: usize) -> Self {
        self.filters = filters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.filters < 2 {
            return bad(format!("filters must be >= 2, got {}", self.filters));
        }
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1".into());
        }
        if self.input_channels < 1 {
            return bad("input_channels must be >= 1".into());
        }
        if (self.kernel, self.stride, self.pad) != (3, 1, 1) {
            return Err(Error::Unsupported(format!(
                "only kernel 3 / stride 1 / pad 1 is supported, got {} / {} / {}",
                self.kernel, self.stride, self.pad
            )));
        }
        if !(self.eps_norm >= 0.0 && self.eps_norm.is_finite()) {
            return bad(format!("eps_norm must be finite and >= 0, got {}", self.eps_norm));
        }
        Ok(())
    }

    fn layer_inputs(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.filters
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// `(scale, shift)` of the normalization, when the net is affine.
    pub affine: Option<(Param<T>, Param<T>)>,
}

/// All learnable parameters with their momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub config: SegNetConfig,
    pub layers: Vec<ConvLayer<T>>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub affine: Option<(Var, Var)>,
}

/// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases.
///
/// Samples are drawn in `f64` so `f32` and `f64` parameter sets built from
/// the same seed agree up to rounding.
pub fn init_params<T: Float>(config: &SegNetConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..config.num_layers)
        .map(|l| {
            let c_in = config.layer_inputs(l);
            let fan_in = (c_in * config.kernel * config.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weight = Tensor::from_fn([config.filters, c_in, 3, 3], |_| {
                T::from_f64_lossy(rng.random_range(-bound..bound))
            });
            ConvLayer {
                weight: Param::new(format!("layer{l}.weight"), weight),
                bias: Param::new(format!("layer{l}.bias"), Tensor::zeros([config.filters])),
                affine: config.affine.then(|| {
                    (
                        Param::new(format!("layer{l}.scale"), Tensor::full([config.filters], T::one())),
                        Param::new(format!("layer{l}.shift"), Tensor::zeros([config.filters])),
                    )
                }),
            }
        })
        .collect();
    Ok(ParamSet {
        config: *config,
        layers,
    })
}

impl<T: Float> ParamSet<T> {
    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| {
            [&l.weight, &l.bias]
                .into_iter()
                .chain(l.affine.iter().flat_map(|(a, b)| [a, b]))
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| {
            [&mut l.weight, &mut l.bias]
                .into_iter()
                .chain(l.affine.iter_mut().flat_map(|(a, b)| [a, b]))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.value.is_finite())
    }

    /// Places every parameter on the tape as a gradient-receiving leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.param(l.weight.value.clone()),
                bias: tape.param(l.bias.value.clone()),
                affine: l
                    .affine
                    .as_ref()
                    .map(|(a, b)| (tape.param(a.value.clone()), tape.param(b.value.clone()))),
            })
            .collect()
    }

    /// Copies gradients of the registered leaves back onto the parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[LayerVars]) {
        for (layer, v) in self.layers.iter_mut().zip(vars) {
            layer.weight.grad = tape.grad(v.weight);
            layer.bias.grad = tape.grad(v.bias);
            if let (Some((a, b)), Some((va, vb))) = (layer.affine.as_mut(), v.affine) {
                a.grad = tape.grad(va);
                b.grad = tape.grad(vb);
            }
        }
    }

    /// Records the network on `tape` and returns the normalized response map.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &[LayerVars], image: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, vars, image)?.0)
    }

    /// [`forward_on_tape`](Self::forward_on_tape), also returning each
    /// block's pre-activation (the convolution output fed to the relu).
    pub fn forward_traced(&self, tape: &mut Tape<T>, vars: &[LayerVars], image: Var) -> Result<(Var, Vec<Var>)> {
        let (c, h, w) = tape.value(image).dims3("forward")?;
        if h < 3 || w < 3 {
            return Err(Error::ImageTooSmall { height: h, width: w });
        }
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "image channels",
                expected: self.config.input_channels,
                found: c,
            });
        }
        let eps = T::from_f64_lossy(self.config.eps_norm);
        let mut x = image;
        let mut pre = Vec::with_capacity(vars.len());
        for v in vars {
            let y = tape.conv2d(x, v.weight, v.bias, self.config.stride, self.config.pad)?;
            pre.push(y);
            let y = tape.relu(y);
            x = tape.channel_norm(y, eps)?;
            if let Some((a, b)) = v.affine {
                x = tape.channel_affine(x, a, b)?;
            }
        }
        Ok((x, pre))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.constant(l.weight.value.clone()),
                bias: tape.constant(l.bias.value.clone()),
                affine: l
                    .affine
                    .as_ref()
                    .map(|(a, b)| (tape.constant(a.value.clone()), tape.constant(b.value.clone()))),
            })
            .collect();
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    /// Writes the parameters in the little-endian checkpoint layout:
    /// magic `SGSN`, version, layer count, four `u32` weight dimensions per
    /// layer, then per layer the weight values followed by the bias values
    /// as `f32`. Affine nets use version 2 and append per layer the scale
    /// and then the shift values.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        let affine = self.layers.iter().all(|l| l.affine.is_some());
        if !affine && self.layers.iter().any(|l| l.affine.is_some()) {
            return Err(Error::Checkpoint("either every layer or none may have scale/shift".into()));
        }
        let version = if affine { CHECKPOINT_VERSION_AFFINE } else { CHECKPOINT_VERSION };
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for &d in l.weight.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for l in &self.layers {
            for v in l.weight.value.data().iter().chain(l.bias.value.data()) {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        for (scale, shift) in self.layers.iter().filter_map(|l| l.affine.as_ref()) {
            for v in scale.value.data().iter().chain(shift.value.data()) {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out.write_all(&buf).and_then(|_| out.flush()).map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    /// Reads a checkpoint; momentum buffers start at zero.
    pub fn read_checkpoint(mut input: impl Read, eps_norm: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let read_u32 = |c: &mut &[u8]| -> Result<u32> {
            if c.len() < 4 {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let (head, rest) = c.split_at(4);
            *c = rest;
            Ok(u32::from_le_bytes(head.try_into().unwrap()))
        };
        let mut c = &bytes[4..];
        let version = read_u32(&mut c)?;
        if version != CHECKPOINT_VERSION && version != CHECKPOINT_VERSION_AFFINE {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = read_u32(&mut c)? as usize;
        if n_layers == 0 {
            return Err(Error::Checkpoint("no layers".into()));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut s = [0usize; 4];
            for d in &mut s {
                *d = read_u32(&mut c)? as usize;
            }
            shapes.push(s);
        }
        let mut read_floats = |n: usize| -> Result<Vec<T>> {
            (0..n)
                .map(|_| {
                    let bits = read_u32(&mut c)?;
                    Ok(T::from_f64_lossy(f32::from_bits(bits) as f64))
                })
                .collect()
        };
        let mut layers = Vec::with_capacity(n_layers);
        for (l, s) in shapes.iter().enumerate() {
            let weight = Tensor::new(s.to_vec(), read_floats(s.iter().product())?)?;
            let bias = Tensor::new([s[0]], read_floats(s[0])?)?;
            layers.push(ConvLayer {
                weight: Param::new(format!("layer{l}.weight"), weight),
                bias: Param::new(format!("layer{l}.bias"), bias),
                affine: None,
            });
        }
        let affine = version == CHECKPOINT_VERSION_AFFINE;
        if affine {
            for (l, layer) in layers.iter_mut().enumerate() {
                let f = shapes[l][0];
                let scale = Tensor::new([f], read_floats(f)?)?;
                let shift = Tensor::new([f], read_floats(f)?)?;
                layer.affine = Some((
                    Param::new(format!("layer{l}.scale"), scale),
                    Param::new(format!("layer{l}.shift"), shift),
                ));
            }
        }
        if !c.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", c.len())));
        }
        let first = shapes[0];
        let config = SegNetConfig {
            num_layers: n_layers,
            filters: first[0],
            kernel: first[2],
            stride: 1,
            pad: 1,
            input_channels: first[1],
            eps_norm,
            affine,
        };
        config.validate()?;
        for (l, s) in shapes.iter().enumerate() {
            if *s != [config.filters, config.layer_inputs(l), 3, 3] {
                return Err(Error::Checkpoint(format!("layer {l} has inconsistent shape {s:?}")));
            }
        }
        Ok(ParamSet { config, layers })
    }

    pub fn load(path: impl AsRef<Path>, eps_norm: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file), eps_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn image(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([c, h, w], |i| ((i * 31) % 17) as f64 / 17.0)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let config = SegNetConfig::new(3);
        let a: ParamSet<f64> = init_params(&config, 4).unwrap();
        let b: ParamSet<f64> = init_params(&config, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].weight.value.shape(), &[100, 3, 3, 3]);
        assert_eq!(a.layers[2].weight.value.shape(), &[100, 100, 3, 3]);
        assert!(a.layers.iter().all(|l| l.bias.value.data().iter().all(|&v| v == 0.0)));
        let c: ParamSet<f64> = init_params(&config, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_uniform_moments() {
        // layer 1 has 100 * 100 * 9 = 90k draws from U(-b, b)
        let p: ParamSet<f64> = init_params(&SegNetConfig::new(1), 0).unwrap();
        let w = p.layers[1].weight.value.data();
        let bound = (6.0f64 / 900.0).sqrt();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / (bound / 3f64.sqrt()) - 1.0).abs() < 0.2);
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn f32_and_f64_share_samples() {
        let a: ParamSet<f64> = init_params(&SegNetConfig::new(1), 9).unwrap();
        let b: ParamSet<f32> = init_params(&SegNetConfig::new(1), 9).unwrap();
        let (x, y) = (a.layers[0].weight.value.data(), b.layers[0].weight.value.data());
        assert!(x.iter().zip(y).all(|(p, q)| (p - *q as f64).abs() < 1e-7));
    }

    #[test]
    fn forward_shape_and_purity() {
        let p: ParamSet<f64> = init_params(&SegNetConfig::new(3).with_filters(8), 1).unwrap();
        let x = image(3, 64, 64);
        let a = p.forward(&x).unwrap();
        assert_eq!(a.shape(), &[8, 64, 64]);
        assert_eq!(a, p.forward(&x).unwrap());
    }

    #[test]
    fn full_width_output_shape() {
        let p: ParamSet<f32> = init_params(&SegNetConfig::new(3), 1).unwrap();
        let out = p.forward(&image(3, 16, 16).cast()).unwrap();
        assert_eq!(out.shape(), &[100, 16, 16]);
    }

    #[test]
    fn fresh_output_is_normalized() {
        // scale 1 / shift 0 at initialization, so every live channel is
        // standardized
        let p: ParamSet<f64> = init_params(&SegNetConfig::new(1).with_filters(12), 2).unwrap();
        let out = p.forward(&image(1, 10, 9)).unwrap();
        for plane in out.data().chunks_exact(90) {
            let mean = plane.iter().sum::<f64>() / 90.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 90.0;
            if var > 1e-6 {
                assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "mean {mean} var {var}");
            }
        }
    }

    #[test]
    fn rejects_small_or_mismatched_images() {
        let p: ParamSet<f64> = init_params(&SegNetConfig::new(1).with_filters(4), 0).unwrap();
        assert!(matches!(p.forward(&image(1, 2, 5)), Err(Error::ImageTooSmall { height: 2, width: 5 })));
        assert!(matches!(p.forward(&image(3, 5, 5)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SegNetConfig::new(1).with_filters(1).validate().is_err());
        let mut c = SegNetConfig::new(1);
        c.kernel = 5;
        assert!(matches!(c.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn layer0_weight_gradient_checks() {
        let p: ParamSet<f64> = init_params(&SegNetConfig::new(1).with_filters(4), 3).unwrap();
        let x = image(1, 5, 5);
        let proj: Vec<f64> = (0..4 * 25).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
        let f = |t: &mut Tape<f64>, w: Var| {
            let mut vars: Vec<LayerVars> = p
                .layers
                .iter()
                .map(|l| LayerVars {
                    weight: t.constant(l.weight.value.clone()),
                    bias: t.constant(l.bias.value.clone()),
                    affine: l
                        .affine
                        .as_ref()
                        .map(|(a, b)| (t.constant(a.value.clone()), t.constant(b.value.clone()))),
                })
                .collect();
            vars[0].weight = w;
            let xv = t.constant(x.clone());
            let out = p.forward_on_tape(t, &vars, xv)?;
            t.weighted_sum(out, proj.clone())
        };
        assert!(grad_check(f, &p.layers[0].weight.value, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_both_versions() {
        for affine in [false, true] {
            let mut config = SegNetConfig::new(3).with_filters(5);
            config.affine = affine;
            let mut p: ParamSet<f32> = init_params(&config, 11).unwrap();
            for (a, b) in p.layers.iter_mut().filter_map(|l| l.affine.as_mut()) {
                a.value.data_mut()[1] = 1.5;
                b.value.data_mut()[2] = -0.25;
            }
            let mut bytes = Vec::new();
            p.write_checkpoint(&mut bytes).unwrap();
            assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
            let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
            assert_eq!(version, if affine { 2 } else { 1 });
            let q = ParamSet::<f32>::read_checkpoint(bytes.as_slice(), 1e-5).unwrap();
            assert_eq!(q, p);
        }
    }

    #[test]
    fn version_one_layout_is_exact() {
        let mut config = SegNetConfig::new(1).with_filters(2);
        config.num_layers = 1;
        config.affine = false;
        let p: ParamSet<f32> = init_params(&config, 0).unwrap();
        let mut bytes = Vec::new();
        p.write_checkpoint(&mut bytes).unwrap();
        // header 4 + 4 + 4 + 16, then 18 weights and 2 biases
        assert_eq!(bytes.len(), 28 + 4 * 20);
        let dims: Vec<u32> = bytes[12..28].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(dims, [2, 1, 3, 3]);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p: ParamSet<f32> = init_params(&SegNetConfig::new(1).with_filters(3), 0).unwrap();
        let mut bytes = Vec::new();
        p.write_checkpoint(&mut bytes).unwrap();
        let read = |b: &[u8]| ParamSet::<f32>::read_checkpoint(b, 1e-5);
        assert!(read(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(read(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(read(&version).is_err());
    }
}
