//! Encoder CNN, prediction heads, and discriminators.
//!
//! The encoder pipeline is fixed: conv → ReLU → 2×2 maxpool → conv → ReLU →
//! linear to a 10-dimensional latent `v` → affine head to a single logit.
//! The partitioned variant adds a second affine head that reads only the
//! trailing latent slice `[split_index, 10)`. Discriminators are small
//! leaky-ReLU MLPs ending in a sigmoid clamped to `[ε, 1−ε]`.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};
use crate::kernels;
use crate::synthgen::{Image32, IMAGE_PIXELS, IMAGE_SIZE, PIXEL_SCALE};

/// Latent dimension of the encoder; fixed by the architecture.
pub const LATENT_DIM: usize = 10;

/// Probability clamp applied to discriminator outputs before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

const CONV_K: usize = 3;
const CONV1_OUT: usize = IMAGE_SIZE - CONV_K + 1; // 30
const POOL_OUT: usize = CONV1_OUT / 2; // 15
const CONV2_OUT: usize = POOL_OUT - CONV_K + 1; // 13

const STREAM_ENCODER_INIT: u64 = 0x656e_6330;
const STREAM_DISC_INIT: u64 = 0x6469_7363;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Structural hyperparameters of the encoder. Defaults match the trained
/// models; tests shrink the channel counts to keep parameter counts small.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderArch {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub partitioned: bool,
    /// First index of the attribute-variant latent slice (partitioned only).
    pub split_index: usize,
    /// Raw pixel intensities are divided by this before entering the network.
    pub pixel_scale: f64,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            conv1_channels: 8,
            conv2_channels: 16,
            partitioned: false,
            split_index: 8,
            pixel_scale: PIXEL_SCALE,
        }
    }
}

impl EncoderArch {
    pub fn flat_features(&self) -> usize {
        self.conv2_channels * CONV2_OUT * CONV2_OUT
    }

    fn validate(&self) -> Result<()> {
        if self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::invalid("conv_channels", "must be nonzero"));
        }
        if !(self.pixel_scale > 0.0) {
            return Err(Error::invalid("pixel_scale", "must be > 0"));
        }
        if self.partitioned && !(0 < self.split_index && self.split_index < LATENT_DIM) {
            return Err(Error::invalid(
                "split_index",
                format!("must lie strictly between 0 and {LATENT_DIM}"),
            ));
        }
        Ok(())
    }
}

/// Encoder parameters. The latent is the output of `fc`; `head` maps it
/// affinely to the task logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub aux_w: Option<Tensor>,
    pub aux_b: Option<Tensor>,
}

/// Forward outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub latent: Vec<f64>,
    pub logit: f64,
    pub aux_logit: Option<f64>,
}

/// Batched forward outputs (row-major, one row per sample).
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub latents: Vec<f64>,
    pub logits: Vec<f64>,
    pub aux_logits: Option<Vec<f64>>,
    pub batch: usize,
}

fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

/// Initialize an encoder with the default architecture.
pub fn init_encoder(seed: u64, partitioned: bool, split_index: usize) -> Result<Encoder> {
    let arch = EncoderArch {
        partitioned,
        split_index,
        ..EncoderArch::default()
    };
    Encoder::init(&arch, seed)
}

impl Encoder {
    /// Deterministic initialization: uniform fan-in weights, zero biases,
    /// tensors drawn in declaration order from a seed-derived stream.
    pub fn init(arch: &EncoderArch, seed: u64) -> Result<Encoder> {
        arch.validate()?;
        let mut rng = crate::synthgen::stream_rng(seed, STREAM_ENCODER_INIT);
        let c1 = arch.conv1_channels;
        let c2 = arch.conv2_channels;
        let flat = arch.flat_features();
        let conv1_w = uniform_fan_in(&mut rng, &[c1, 1, CONV_K, CONV_K], CONV_K * CONV_K);
        let conv2_w = uniform_fan_in(&mut rng, &[c2, c1, CONV_K, CONV_K], c1 * CONV_K * CONV_K);
        let fc_w = uniform_fan_in(&mut rng, &[LATENT_DIM, flat], flat);
        let head_w = uniform_fan_in(&mut rng, &[1, LATENT_DIM], LATENT_DIM);
        let (aux_w, aux_b) = if arch.partitioned {
            let width = LATENT_DIM - arch.split_index;
            (
                Some(uniform_fan_in(&mut rng, &[1, width], width)),
                Some(Tensor::zeros(&[1])),
            )
        } else {
            (None, None)
        };
        Ok(Encoder {
            arch: arch.clone(),
            conv1_w,
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w,
            conv2_b: Tensor::zeros(&[c2]),
            fc_w,
            fc_b: Tensor::zeros(&[LATENT_DIM]),
            head_w,
            head_b: Tensor::zeros(&[1]),
            aux_w,
            aux_b,
        })
    }

    /// Parameter tensors with stable names, in update order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
        ];
        if let (Some(w), Some(b)) = (&self.aux_w, &self.aux_b) {
            v.push(("aux_w", w));
            v.push(("aux_b", b));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.head_w,
            &mut self.head_b,
        ];
        if let Some(w) = self.aux_w.as_mut() {
            v.push(w);
        }
        if let Some(b) = self.aux_b.as_mut() {
            v.push(b);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register all parameters on a graph. Returns node ids in `params_mut` order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect()
    }

    /// Register parameters as constants (no gradients computed for them).
    pub fn register_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect()
    }

    /// Tape forward pass over a normalized `[B,1,32,32]` input node.
    /// Returns `(latent, logit, aux_logit)` node ids.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
    ) -> (NodeId, NodeId, Option<NodeId>) {
        let c1 = g.conv2d(x, params[0], params[1], CONV_K);
        let r1 = g.relu(c1);
        let p1 = g.maxpool2(r1);
        let c2 = g.conv2d(p1, params[2], params[3], CONV_K);
        let r2 = g.relu(c2);
        let latent = g.linear(r2, params[4], params[5]);
        let logit = g.linear(latent, params[6], params[7]);
        let aux = if self.arch.partitioned {
            let variant = g.slice_cols(latent, self.arch.split_index, LATENT_DIM);
            Some(g.linear(variant, params[8], params[9]))
        } else {
            None
        };
        (latent, logit, aux)
    }

    /// Direct batched forward pass without gradient tracking.
    /// `x` is normalized `[batch, 32, 32]` data flattened row-major.
    pub fn infer_batch(&self, x: &[f64], batch: usize) -> Result<BatchOutput> {
        if x.len() != batch * IMAGE_PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {batch}x{IMAGE_PIXELS} inputs, got {}",
                x.len()
            )));
        }
        let arch = &self.arch;
        let (c1, c2) = (arch.conv1_channels, arch.conv2_channels);
        let mut a1 = vec![0.0; batch * c1 * CONV1_OUT * CONV1_OUT];
        kernels::conv2d_forward(
            x,
            batch,
            1,
            IMAGE_SIZE,
            IMAGE_SIZE,
            &self.conv1_w.data,
            c1,
            CONV_K,
            &self.conv1_b.data,
            &mut a1,
        );
        for v in a1.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut p1 = vec![0.0; batch * c1 * POOL_OUT * POOL_OUT];
        let mut idx = vec![0u32; p1.len()];
        kernels::maxpool2_forward(&a1, batch, c1, CONV1_OUT, CONV1_OUT, &mut p1, &mut idx);
        let mut a2 = vec![0.0; batch * c2 * CONV2_OUT * CONV2_OUT];
        kernels::conv2d_forward(
            &p1,
            batch,
            c1,
            POOL_OUT,
            POOL_OUT,
            &self.conv2_w.data,
            c2,
            CONV_K,
            &self.conv2_b.data,
            &mut a2,
        );
        for v in a2.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut latents = vec![0.0; batch * LATENT_DIM];
        kernels::linear_forward(
            &a2,
            batch,
            arch.flat_features(),
            &self.fc_w.data,
            LATENT_DIM,
            &self.fc_b.data,
            &mut latents,
        );
        let mut logits = vec![0.0; batch];
        kernels::linear_forward(
            &latents,
            batch,
            LATENT_DIM,
            &self.head_w.data,
            1,
            &self.head_b.data,
            &mut logits,
        );
        let aux_logits = if let (Some(w), Some(b)) = (&self.aux_w, &self.aux_b) {
            let from = arch.split_index;
            let width = LATENT_DIM - from;
            let mut slice = vec![0.0; batch * width];
            for i in 0..batch {
                slice[i * width..(i + 1) * width]
                    .copy_from_slice(&latents[i * LATENT_DIM + from..(i + 1) * LATENT_DIM]);
            }
            let mut aux = vec![0.0; batch];
            kernels::linear_forward(&slice, batch, width, &w.data, 1, &b.data, &mut aux);
            Some(aux)
        } else {
            None
        };
        Ok(BatchOutput {
            latents,
            logits,
            aux_logits,
            batch,
        })
    }

    /// Forward pass for a single raw image (normalization applied here).
    pub fn encode_predict(&self, image: &Image32) -> Result<EncoderOutput> {
        let x: Vec<f64> = image
            .as_slice()
            .iter()
            .map(|&p| p as f64 / self.arch.pixel_scale)
            .collect();
        let out = self.infer_batch(&x, 1)?;
        Ok(EncoderOutput {
            latent: out.latents,
            logit: out.logits[0],
            aux_logit: out.aux_logits.map(|a| a[0]),
        })
    }

    /// Serialize to a versioned checkpoint container.
    pub fn to_checkpoint(&self, seed: u64) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta(
            "format_version",
            serde_json::json!(crate::container::FORMAT_VERSION),
        );
        c.set_meta("seed", serde_json::json!(seed));
        c.set_meta("arch", serde_json::to_value(&self.arch).expect("arch serializes"));
        for (name, t) in self.named_params() {
            c.push(
                NamedArray::new(name, t.shape.clone(), ArrayData::F64(t.data.clone()))
                    .expect("tensor shape is consistent"),
            );
        }
        c
    }

    pub fn from_checkpoint(c: &Container) -> Result<(Encoder, u64)> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a checkpoint container, found kind `{}`",
                c.kind
            )));
        }
        let seed = c.meta_u64("seed")?;
        let arch_value = c
            .meta
            .get("arch")
            .ok_or_else(|| Error::Format("missing arch descriptor".into()))?;
        let arch: EncoderArch = serde_json::from_value(arch_value.clone())
            .map_err(|e| Error::Format(format!("bad arch descriptor: {e}")))?;
        arch.validate()?;

        let tensor = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
            let a = c.get(name)?;
            if a.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint array `{name}` has shape {:?}, expected {shape:?}",
                    a.shape
                )));
            }
            Ok(Tensor::from_vec(&shape, a.data.as_f64()?.to_vec()))
        };

        let (c1, c2) = (arch.conv1_channels, arch.conv2_channels);
        let flat = arch.flat_features();
        let enc = Encoder {
            conv1_w: tensor("conv1_w", vec![c1, 1, CONV_K, CONV_K])?,
            conv1_b: tensor("conv1_b", vec![c1])?,
            conv2_w: tensor("conv2_w", vec![c2, c1, CONV_K, CONV_K])?,
            conv2_b: tensor("conv2_b", vec![c2])?,
            fc_w: tensor("fc_w", vec![LATENT_DIM, flat])?,
            fc_b: tensor("fc_b", vec![LATENT_DIM])?,
            head_w: tensor("head_w", vec![1, LATENT_DIM])?,
            head_b: tensor("head_b", vec![1])?,
            aux_w: if arch.partitioned {
                Some(tensor("aux_w", vec![1, LATENT_DIM - arch.split_index])?)
            } else {
                None
            },
            aux_b: if arch.partitioned {
                Some(tensor("aux_b", vec![1])?)
            } else {
                None
            },
            arch,
        };
        Ok((enc, seed))
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        self.to_checkpoint(seed).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Encoder, u64)> {
        Self::from_checkpoint(&Container::load(path)?)
    }
}

/// Feed-forward discriminator: two leaky-ReLU hidden layers, sigmoid output
/// clamped to `[PROB_EPS, 1 − PROB_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub in_dim: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Result<Discriminator> {
        if in_dim == 0 || hidden == 0 {
            return Err(Error::invalid("in_dim/hidden", "must be nonzero"));
        }
        let mut rng = crate::synthgen::stream_rng(seed, STREAM_DISC_INIT);
        Ok(Discriminator {
            in_dim,
            hidden,
            w1: uniform_fan_in(&mut rng, &[hidden, in_dim], in_dim),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform_fan_in(&mut rng, &[hidden, hidden], hidden),
            b2: Tensor::zeros(&[hidden]),
            w3: uniform_fan_in(&mut rng, &[1, hidden], hidden),
            b3: Tensor::zeros(&[1]),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.w1.numel()
            + self.b1.numel()
            + self.w2.numel()
            + self.b2.numel()
            + self.w3.numel()
            + self.b3.numel()
    }

    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        vec![
            g.param(self.w1.clone()),
            g.param(self.b1.clone()),
            g.param(self.w2.clone()),
            g.param(self.b2.clone()),
            g.param(self.w3.clone()),
            g.param(self.b3.clone()),
        ]
    }

    pub fn register_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        vec![
            g.constant(self.w1.clone()),
            g.constant(self.b1.clone()),
            g.constant(self.w2.clone()),
            g.constant(self.b2.clone()),
            g.constant(self.w3.clone()),
            g.constant(self.b3.clone()),
        ]
    }

    /// Tape forward: `[B, in_dim]` → clamped probabilities `[B, 1]`.
    pub fn forward_graph(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> NodeId {
        let h1 = g.linear(x, params[0], params[1]);
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = g.linear(a1, params[2], params[3]);
        let a2 = g.leaky_relu(h2, LEAKY_SLOPE);
        let out = g.linear(a2, params[4], params[5]);
        let p = g.sigmoid(out);
        g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Probability for a single input vector.
    pub fn discriminate(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} inputs, got {}",
                self.in_dim,
                input.len()
            )));
        }
        let mut g = Graph::new();
        let params = self.register(&mut g);
        let x = g.constant(Tensor::from_vec(&[1, self.in_dim], input.to_vec()));
        let p = self.forward_graph(&mut g, &params, x);
        Ok(g.value(p).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::render_image;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_encoder(5, false, 8).unwrap();
        let b = init_encoder(5, false, 8).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(6, false, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partitioned_aux_head_reads_trailing_slice() {
        let e = init_encoder(1, true, 8).unwrap();
        assert_eq!(e.aux_w.as_ref().unwrap().shape, vec![1, 2]);

        // Changing only latent slots [8,10) must change aux_logit, and
        // changing slots [0,8) must not (with fc weights crafted so the
        // latent equals a chosen vector).
        let img = render_image(2.0, 5.0).unwrap();
        let out = e.encode_predict(&img).unwrap();
        let aux = out.aux_logit.unwrap();
        let w = e.aux_w.as_ref().unwrap();
        let b = e.aux_b.as_ref().unwrap();
        let expect = w.data[0] * out.latent[8] + w.data[1] * out.latent[9] + b.data[0];
        assert!((aux - expect).abs() < 1e-12);
    }

    #[test]
    fn invalid_split_index_is_rejected() {
        assert!(init_encoder(1, true, 0).is_err());
        assert!(init_encoder(1, true, 10).is_err());
        assert!(init_encoder(1, true, 5).is_ok());
    }

    #[test]
    fn zero_network_maps_to_zero_outputs() {
        let mut e = init_encoder(2, false, 8).unwrap();
        for t in e.params_mut() {
            t.data.fill(0.0);
        }
        let img = render_image(3.0, 3.0).unwrap();
        let out = e.encode_predict(&img).unwrap();
        assert!(out.latent.iter().all(|&v| v == 0.0));
        assert_eq!(out.logit, 0.0);
    }

    #[test]
    fn logit_is_affine_in_latent() {
        let e = init_encoder(3, false, 8).unwrap();
        let img = render_image(2.5, 4.0).unwrap();
        let out = e.encode_predict(&img).unwrap();
        let manual: f64 = e
            .head_w
            .data
            .iter()
            .zip(&out.latent)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + e.head_b.data[0];
        assert!((out.logit - manual).abs() < 1e-12);
    }

    #[test]
    fn doubling_head_weights_doubles_logit() {
        let mut e = init_encoder(4, false, 8).unwrap();
        e.head_b.data[0] = 0.0;
        let img = render_image(1.5, 2.0).unwrap();
        let before = e.encode_predict(&img).unwrap();
        for w in e.head_w.data.iter_mut() {
            *w *= 2.0;
        }
        let after = e.encode_predict(&img).unwrap();
        assert_eq!(after.latent, before.latent);
        assert!((after.logit - 2.0 * before.logit).abs() < 1e-12);
    }

    #[test]
    fn architecture_audit() {
        let e = init_encoder(7, false, 8).unwrap();
        let names: Vec<_> = e.named_params().iter().map(|(n, _)| *n).collect();
        let convs = names.iter().filter(|n| n.starts_with("conv") && n.ends_with("_w")).count();
        assert_eq!(convs, 2, "exactly two convolutional layers");
        assert_eq!(e.fc_w.shape[0], LATENT_DIM, "latent dimension is 10");
        assert_eq!(e.head_w.shape, vec![1, LATENT_DIM], "prediction head is one affine map");
    }

    #[test]
    fn graph_and_infer_paths_agree() {
        let e = init_encoder(8, true, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let batch = 3;
        let x: Vec<f64> = (0..batch * IMAGE_PIXELS)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let direct = e.infer_batch(&x, batch).unwrap();

        let mut g = Graph::new();
        let params = e.register(&mut g);
        let xn = g.constant(Tensor::from_vec(&[batch, 1, IMAGE_SIZE, IMAGE_SIZE], x));
        let (v, logit, aux) = e.forward_graph(&mut g, &params, xn);
        assert_eq!(g.value(v).data, direct.latents);
        assert_eq!(g.value(logit).data, direct.logits);
        assert_eq!(g.value(aux.unwrap()).data, direct.aux_logits.unwrap());
    }

    #[test]
    fn discriminator_contract() {
        let d = Discriminator::init(3, 16, 1).unwrap();
        // Clamp contract on arbitrary inputs.
        let p = d.discriminate(&[1000.0, -1000.0, 3.0]).unwrap();
        assert!((PROB_EPS..=1.0 - PROB_EPS).contains(&p));
        // Zero output layer gives exactly 0.5.
        let mut dz = d.clone();
        dz.w3.data.fill(0.0);
        dz.b3.data.fill(0.0);
        assert_eq!(dz.discriminate(&[0.3, -0.7, 2.0]).unwrap(), 0.5);
        // Dimension mismatch is an error.
        assert!(d.discriminate(&[1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_version_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.cifc");
        let e = init_encoder(11, true, 7).unwrap();
        e.save(&path, 11).unwrap();
        let (back, seed) = Encoder::load(&path).unwrap();
        assert_eq!(back, e);
        assert_eq!(seed, 11);

        // Corrupt the version field; load must fail.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&77u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Encoder::load(&path),
            Err(Error::UnsupportedVersion { found: 77, .. })
        ));
    }

    #[test]
    fn encode_predict_rejects_checkpoint_kind_confusion() {
        let d = crate::synthgen::generate_dataset(2, crate::synthgen::Split::Train, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.cifd");
        d.save(&path).unwrap();
        assert!(Encoder::load(&path).is_err());
    }
}
