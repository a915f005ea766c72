//! Feature extractors mapping raw inputs to embedding vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};

/// Default embedding width when a command does not specify one.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

const CONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    /// Pass-through over flat inputs of length `dim`.
    Identity { dim: usize },
    /// Fully connected layers; `widths[0]` is the input length and the last
    /// entry is the embedding dimension. Rectifiers sit between layers.
    Mlp { widths: Vec<usize> },
    /// Blocks of 3x3 conv, rectifier and 2x2 max pool over `H x W x C` input,
    /// flattened at the end. Four blocks give the "Conv-4" stack.
    Conv {
        height: usize,
        width: usize,
        channels: usize,
        block_channels: Vec<usize>,
    },
}

impl BackboneConfig {
    pub fn conv4(height: usize, width: usize, channels: usize, hidden: usize) -> Self {
        BackboneConfig::Conv {
            height,
            width,
            channels,
            block_channels: vec![hidden; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Identity { dim } if *dim == 0 => {
                Err(Error::Config("identity backbone needs dim >= 1".into()))
            }
            BackboneConfig::Mlp { widths } if widths.len() < 2 || widths.contains(&0) => Err(Error::Config(
                format!("mlp widths must list an input and at least one positive layer, got {widths:?}"),
            )),
            BackboneConfig::Conv {
                height,
                width,
                channels,
                block_channels,
            } => {
                if *channels == 0 || block_channels.is_empty() || block_channels.contains(&0) {
                    return Err(Error::Config("conv backbone needs positive channel counts".into()));
                }
                let shrink = 1usize << block_channels.len();
                if height / shrink == 0 || width / shrink == 0 {
                    return Err(Error::Config(format!(
                        "input {height}x{width} is too small for {} pooling blocks",
                        block_channels.len()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Flat length of one input item.
    pub fn input_len(&self) -> usize {
        match self {
            BackboneConfig::Identity { dim } => *dim,
            BackboneConfig::Mlp { widths } => widths[0],
            BackboneConfig::Conv {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            BackboneConfig::Conv {
                height,
                width,
                channels,
                ..
            } => vec![*height, *width, *channels],
            other => vec![other.input_len()],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            BackboneConfig::Identity { dim } => *dim,
            BackboneConfig::Mlp { widths } => *widths.last().unwrap(),
            BackboneConfig::Conv {
                height,
                width,
                block_channels,
                ..
            } => {
                let shrink = 1usize << block_channels.len();
                (height / shrink) * (width / shrink) * block_channels.last().unwrap()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape arithmetic")
}

/// Deterministically initialises a backbone: every weight and bias is drawn
/// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    match &config {
        BackboneConfig::Identity { .. } => {}
        BackboneConfig::Mlp { widths } => {
            for (i, pair) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                params.insert(format!("layer{i}.weight"), uniform_fan_in(&mut rng, &[fan_in, fan_out], fan_in));
                params.insert(format!("layer{i}.bias"), uniform_fan_in(&mut rng, &[fan_out], fan_in));
            }
        }
        BackboneConfig::Conv {
            channels,
            block_channels,
            ..
        } => {
            let mut cin = *channels;
            for (i, &cout) in block_channels.iter().enumerate() {
                let fan_in = CONV_KERNEL * CONV_KERNEL * cin;
                params.insert(
                    format!("conv{i}.weight"),
                    uniform_fan_in(&mut rng, &[CONV_KERNEL, CONV_KERNEL, cin, cout], fan_in),
                );
                params.insert(format!("conv{i}.bias"), uniform_fan_in(&mut rng, &[cout], fan_in));
                cin = cout;
            }
        }
    }
    Ok(Backbone { config, params })
}

impl Backbone {
    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn bind(&self, graph: &Graph, trainable: bool) -> Result<Bound> {
        self.params.bind(graph, trainable)
    }

    /// Records the forward pass of a `B x input` batch, producing `B x d`.
    pub fn forward(&self, graph: &Graph, bound: &Bound, batch: Var) -> Result<Var> {
        let shape = graph.shape(batch);
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        if cols != self.config.input_len() {
            return shape_err(format!(
                "batch rows hold {cols} values, backbone expects {}",
                self.config.input_len()
            ));
        }
        let get = |name: &str| {
            bound
                .get(name)
                .copied()
                .ok_or_else(|| Error::State(format!("parameter {name} not bound")))
        };
        match &self.config {
            BackboneConfig::Identity { dim } => graph.reshape(batch, &[rows, *dim]),
            BackboneConfig::Mlp { widths } => {
                let mut h = graph.reshape(batch, &[rows, widths[0]])?;
                let layers = widths.len() - 1;
                for i in 0..layers {
                    let w = get(&format!("layer{i}.weight"))?;
                    let b = get(&format!("layer{i}.bias"))?;
                    h = graph.add_row(graph.matmul(h, w)?, b)?;
                    if i + 1 < layers {
                        h = graph.relu(h)?;
                    }
                }
                Ok(h)
            }
            BackboneConfig::Conv {
                height,
                width,
                channels,
                block_channels,
            } => {
                let mut h = graph.reshape(batch, &[rows, *height, *width, *channels])?;
                for i in 0..block_channels.len() {
                    let w = get(&format!("conv{i}.weight"))?;
                    let b = get(&format!("conv{i}.bias"))?;
                    h = graph.max_pool2(graph.relu(graph.conv2d(h, w, b)?)?)?;
                }
                graph.reshape(h, &[rows, self.config.embedding_dim()])
            }
        }
    }

    /// Embeds a batch without recording gradients.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let x = g.constant(batch.clone());
        let out = self.forward(&g, &bound, x)?;
        Ok(g.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::max_relative_error;

    #[test]
    fn identity_has_no_parameters_and_passes_rows_through() {
        let b = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
        assert!(b.params.is_empty());
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(b.embed(&x).unwrap(), x);
    }

    #[test]
    fn mlp_parameter_count() {
        let b = build_backbone(BackboneConfig::Mlp { widths: vec![4, 8, 3] }, 1).unwrap();
        assert_eq!(b.params.numel(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn initialisation_is_seeded() {
        let cfg = BackboneConfig::Mlp { widths: vec![5, 7, 2] };
        let a = build_backbone(cfg.clone(), 42).unwrap();
        let b = build_backbone(cfg.clone(), 42).unwrap();
        let c = build_backbone(cfg, 43).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn zero_mlp_maps_to_zero() {
        let mut b = build_backbone(BackboneConfig::Mlp { widths: vec![3, 4, 2] }, 0).unwrap();
        let names: Vec<(String, Vec<usize>)> = b.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for (n, s) in names {
            b.params.insert(n, Tensor::zeros(&s));
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(b.embed(&x).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn output_shapes() {
        let b = build_backbone(BackboneConfig::conv4(16, 16, 3, 4), 0).unwrap();
        assert_eq!(b.embedding_dim(), 4);
        let x = Tensor::zeros(&[5, 16 * 16 * 3]);
        assert_eq!(b.embed(&x).unwrap().shape(), &[5, 4]);
        assert!(b.embed(&Tensor::zeros(&[5, 10])).is_err());
    }

    #[test]
    fn conv_rejects_tiny_inputs() {
        assert!(matches!(
            build_backbone(BackboneConfig::conv4(8, 8, 1, 2), 0),
            Err(Error::Config(_))
        ));
        assert!(build_backbone(BackboneConfig::Identity { dim: 0 }, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let b = build_backbone(
            BackboneConfig::Conv {
                height: 4,
                width: 4,
                channels: 2,
                block_channels: vec![3, 2],
            },
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![2, 32], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = max_relative_error(&b.params, 1e-5, |g, bound| {
            let xv = g.constant(x.clone());
            let e = b.forward(g, bound, xv)?;
            let sq = g.square(e)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
