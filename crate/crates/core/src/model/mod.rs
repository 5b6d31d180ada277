//! The encoder: images to unit-norm embeddings, plus the penultimate features
//! used by linear evaluation.

mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const INIT_STREAM: u64 = 0x1417;
/// Floor on the row norm in the final normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv3×3 → relu → maxpool2×2 per stage, then global average pool.
    SmallConv,
    /// Flattened pixels through affine → relu layers.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    /// Replaces the final affine with affine → relu → affine.
    pub projection_head: bool,
    pub head_hidden: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            architecture: Architecture::SmallConv,
            widths: vec![16, 32, 64],
            embed_dim: 128,
            projection_head: false,
            head_hidden: 128,
            image_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder widths must be non-empty".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths must be ≥ 1, got {:?}", self.widths)));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be ≥ 2, got {}", self.embed_dim)));
        }
        if self.projection_head && self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be ≥ 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be ≥ 1".into()));
        }
        if self.architecture == Architecture::SmallConv && self.image_size >> self.widths.len() == 0 {
            return Err(Error::Config(format!(
                "image_size {} too small for {} pooling stages",
                self.image_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Width of the penultimate features.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// Names, shapes and fan-ins of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        match self.architecture {
            Architecture::SmallConv => {
                let mut c = 3;
                for (i, &w) in self.widths.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![w, c, 3, 3], c * 9));
                    out.push((format!("conv{i}.bias"), vec![w], 0));
                    c = w;
                }
            }
            Architecture::Mlp => {
                let mut c = 3 * self.image_size * self.image_size;
                for (i, &w) in self.widths.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![c, w], c));
                    out.push((format!("fc{i}.bias"), vec![w], 0));
                    c = w;
                }
            }
        }
        let p = self.feature_dim();
        if self.projection_head {
            out.push(("head0.weight".into(), vec![p, self.head_hidden], p));
            out.push(("head0.bias".into(), vec![self.head_hidden], 0));
            out.push(("head1.weight".into(), vec![self.head_hidden, self.embed_dim], self.head_hidden));
            out.push(("head1.bias".into(), vec![self.embed_dim], 0));
        } else {
            out.push(("out.weight".into(), vec![p, self.embed_dim], p));
            out.push(("out.bias".into(), vec![self.embed_dim], 0));
        }
        out
    }
}

/// Encoder parameters together with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T: Scalar = f32> {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// He-normal weights with std `sqrt(2 / fan_in)`, zero biases.
pub fn init_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderState<T>> {
    config.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (i, (name, shape, fan_in)) in config.parameter_layout().into_iter().enumerate() {
        let len: usize = shape.iter().product();
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut rng = seed::rng(seed, &[INIT_STREAM, i as u64]);
            let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_f64(shape, &data)?
        };
        names.push(name);
        params.push(t);
    }
    Ok(EncoderState {
        config: config.clone(),
        names,
        params,
    })
}

/// Tape handles of the parameters and the outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub penultimate: Var,
    pub embedding: Var,
}

impl<T: Scalar> EncoderState<T> {
    /// Rebuilds a state from named tensors, checking them against `config`.
    pub fn from_parts(config: EncoderConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != named.len() {
            return Err(Error::Dimension(format!(
                "config needs {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got, t)) in layout.iter().zip(&named) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Dimension(format!(
                    "expected {name} {shape:?}, got {got} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(EncoderState {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Pushes every parameter onto `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Pushes every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Dimension(format!(
                "encoder expects n×3×{s}×{s} input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `input` (`n×3×h×w`) on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Forward> {
        self.check_input(tape.value(input).shape())?;
        let stages = self.config.widths.len();
        let mut h = input;
        match self.config.architecture {
            Architecture::SmallConv => {
                for i in 0..stages {
                    h = tape.conv2d(h, params[2 * i], 1, 1)?;
                    h = tape.channel_bias(h, params[2 * i + 1])?;
                    h = tape.relu(h);
                    h = tape.max_pool2x2(h)?;
                }
                h = tape.global_avg_pool(h)?;
            }
            Architecture::Mlp => {
                let n = tape.value(input).shape()[0];
                let flat = tape.value(input).len() / n.max(1);
                h = tape.reshape(h, &[n, flat])?;
                for i in 0..stages {
                    h = tape.affine(h, params[2 * i], params[2 * i + 1])?;
                    h = tape.relu(h);
                }
            }
        }
        let penultimate = h;
        let base = 2 * stages;
        let mut out = if self.config.projection_head {
            let z = tape.affine(h, params[base], params[base + 1])?;
            let z = tape.relu(z);
            tape.affine(z, params[base + 2], params[base + 3])?
        } else {
            tape.affine(h, params[base], params[base + 1])?
        };
        out = tape.l2_normalize_rows(out, T::from_f64_lossy(NORM_EPS))?;
        Ok(Forward {
            penultimate,
            embedding: out,
        })
    }

    /// Penultimate features and unit-norm embeddings of a batch.
    pub fn encode(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let input = tape.constant(batch.clone());
        let f = self.forward(&mut tape, &params, input)?;
        Ok((tape.value(f.penultimate).clone(), tape.value(f.embedding).clone()))
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        self.params.iter().flat_map(|p| p.data()).fold(0u64, |acc, v| {
            seed::mix64(acc ^ v.as_f64().to_bits())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            widths: vec![3, 4],
            embed_dim: 5,
            image_size: 6,
            ..EncoderConfig::default()
        }
    }

    fn batch(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = seed::rng(seed, &[]);
        let data: Vec<f64> = (0..n * 3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, 3, s, s], data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a: EncoderState = init_encoder(&EncoderConfig::default(), 3).unwrap();
        let b: EncoderState = init_encoder(&EncoderConfig::default(), 3).unwrap();
        let c: EncoderState = init_encoder(&EncoderConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = EncoderConfig::default();
        cfg.widths = vec![16, 0];
        assert!(matches!(init_encoder::<f32>(&cfg, 0), Err(Error::Config(_))));
        cfg.widths = vec![];
        assert!(init_encoder::<f32>(&cfg, 0).is_err());
        let cfg = EncoderConfig {
            embed_dim: 1,
            ..EncoderConfig::default()
        };
        assert!(init_encoder::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn weight_variance_matches_fan_in() {
        let cfg = EncoderConfig {
            widths: vec![64, 128],
            ..EncoderConfig::default()
        };
        let st: EncoderState<f64> = init_encoder(&cfg, 9).unwrap();
        // conv1: 128×64×3×3 = 73728 samples, fan_in 576.
        let w = &st.params()[2];
        let sample = &w.data()[..10_000];
        let mean = sample.iter().sum::<f64>() / sample.len() as f64;
        let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sample.len() as f64;
        let want = 2.0 / 576.0;
        assert!((var / want - 1.0).abs() < 0.2, "var {var} want {want}");
        assert!(st.params()[3].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let st: EncoderState<f64> = init_encoder(&EncoderConfig::default(), 1).unwrap();
        let (pen, emb) = st.encode(&batch(4, 32, 2)).unwrap();
        assert_eq!(pen.shape(), &[4, 64]);
        assert_eq!(emb.shape(), &[4, 128]);
        for r in 0..4 {
            let norm: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rows_do_not_interact() {
        let st: EncoderState<f64> = init_encoder(&tiny(), 1).unwrap();
        let b = batch(3, 6, 5);
        let (_, all) = st.encode(&b).unwrap();
        let per = 3 * 36;
        for i in 0..3 {
            let one = Tensor::new(vec![1, 3, 6, 6], b.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let (_, e) = st.encode(&one).unwrap();
            assert_eq!(e.data(), all.row(i));
        }
    }

    #[test]
    fn input_shape_checked() {
        let st: EncoderState<f64> = init_encoder(&tiny(), 1).unwrap();
        assert!(matches!(st.encode(&batch(2, 8, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_head_and_mlp_shapes() {
        let cfg = EncoderConfig {
            architecture: Architecture::Mlp,
            widths: vec![7],
            projection_head: true,
            head_hidden: 9,
            embed_dim: 4,
            image_size: 6,
        };
        let st: EncoderState<f64> = init_encoder(&cfg, 0).unwrap();
        let (pen, emb) = st.encode(&batch(2, 6, 0)).unwrap();
        assert_eq!(pen.shape(), &[2, 7]);
        assert_eq!(emb.shape(), &[2, 4]);
        assert_eq!(st.names().last().unwrap(), "head1.bias");
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let st: EncoderState<f64> = init_encoder(&tiny(), 2).unwrap();
        let b = batch(2, 6, 7);
        let probe: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let probe = Tensor::new(vec![2, 5], probe).unwrap();
        let loss = |state: &EncoderState<f64>| -> f64 {
            let (_, e) = state.encode(&b).unwrap();
            e.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };

        let mut tape = Tape::new();
        let params = st.bind(&mut tape);
        let x = tape.constant(b.clone());
        let f = st.forward(&mut tape, &params, x).unwrap();
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(f.embedding, pv).unwrap();
        let root = tape.sum(prod);
        let grads = tape.backward(root).unwrap();

        for k in [0, 2] {
            let analytic = grads.get(params[k]).unwrap();
            let numeric = finite_difference_gradient(
                |w| {
                    let mut s = st.clone();
                    s.params_mut()[k] = w.clone();
                    loss(&s)
                },
                &st.params()[k],
                1e-6,
            );
            let err = max_relative_error(analytic, &numeric);
            assert!(err < 1e-4, "param {k}: {err}");
        }
    }
}
