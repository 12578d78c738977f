//! Feature pyramid backbone: a strided convolutional encoder C0..C5, 1x1x1
//! lateral projections, a nearest-neighbor top-down path and per-level output
//! projections to `d_hidden` channels.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{BackboneConfig, FeatureLevel};
use crate::nn::init::{he_normal, xavier_uniform};
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

struct ConvNorm {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

struct Projection {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles of the backbone.
pub struct Backbone {
    config: BackboneConfig,
    d_hidden: usize,
    /// `down[l]` holds the conv blocks of level `l`.
    down: Vec<Vec<ConvNorm>>,
    lateral: BTreeMap<usize, Projection>,
    output: BTreeMap<usize, Projection>,
}

/// P-level maps, each `[d_hidden, D0/2^l, D1/2^l, D2/2^l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: BTreeMap<FeatureLevel, Tensor<T>>,
}

fn ones<T: Float>(n: usize) -> Tensor<T> {
    Tensor::filled(&[n], T::one())
}

impl Backbone {
    /// Registers all backbone parameters in `store`.
    pub fn new<T: Float>(
        config: &BackboneConfig,
        d_hidden: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut down = Vec::new();
        let k = 3;
        for l in 0..config.num_down_levels {
            let c_out = config.channels(l);
            let mut blocks = Vec::new();
            // level 0 is a single full-resolution conv; deeper levels
            // downsample with a strided conv and refine with a second one
            let specs: Vec<(usize, usize, &str)> = if l == 0 {
                vec![(1, 1, "conv")]
            } else {
                vec![(config.channels(l - 1), 2, "down"), (c_out, 1, "conv")]
            };
            for (c_in, stride, tag) in specs {
                let prefix = format!("backbone.c{l}.{tag}");
                blocks.push(ConvNorm {
                    conv: store.add(&format!("{prefix}.weight"), he_normal(rng, &[c_out, c_in, k, k, k]))?,
                    gamma: store.add(&format!("{prefix}.norm.gamma"), ones(c_out))?,
                    beta: store.add(&format!("{prefix}.norm.beta"), Tensor::zeros(&[c_out]))?,
                    stride,
                });
            }
            down.push(blocks);
        }
        let f = config.fpn_channels;
        let mut lateral = BTreeMap::new();
        let mut output = BTreeMap::new();
        for l in 2..=config.top_level() {
            lateral.insert(
                l,
                Projection {
                    weight: store.add(
                        &format!("backbone.lateral{l}.weight"),
                        xavier_uniform(rng, &[f, config.channels(l), 1, 1, 1]),
                    )?,
                    bias: store.add(&format!("backbone.lateral{l}.bias"), Tensor::zeros(&[f]))?,
                },
            );
        }
        for l in 2..=config.top_level() {
            output.insert(
                l,
                Projection {
                    weight: store.add(
                        &format!("backbone.p{l}.weight"),
                        xavier_uniform(rng, &[d_hidden, f, 1, 1, 1]),
                    )?,
                    bias: store.add(&format!("backbone.p{l}.bias"), Tensor::zeros(&[d_hidden]))?,
                },
            );
        }
        Ok(Self {
            config: config.clone(),
            d_hidden,
            down,
            lateral,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Output projection handles, for tests that zero them.
    pub fn output_weights(&self) -> Vec<(ParamId, ParamId)> {
        self.output.values().map(|p| (p.weight, p.bias)).collect()
    }

    /// Feature grid of level `l` for an input of `shape`.
    pub fn grid(&self, shape: [usize; 3], level: FeatureLevel) -> [usize; 3] {
        shape.map(|d| d >> level.index())
    }

    pub fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.config.divisor();
        if shape.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::Shape(format!(
                "input {shape:?} is not divisible by {div} ({} backbone levels)",
                self.config.num_down_levels
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `input [1, D0, D1, D2]` and returns the
    /// nodes of the requested levels.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        levels: &[FeatureLevel],
    ) -> Result<BTreeMap<FeatureLevel, NodeId>> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Shape(format!("backbone input must be [1, D0, D1, D2], got {s:?}")));
        }
        self.check_input([s[1], s[2], s[3]])?;
        let top = self.config.top_level();
        if let Some(l) = levels.iter().find(|l| l.index() > top) {
            return Err(Error::Shape(format!("level {l:?} is above the top encoder level C{top}")));
        }
        let Some(lowest) = levels.iter().map(|l| l.index()).min() else {
            return Ok(BTreeMap::new());
        };

        let mut c = Vec::with_capacity(top + 1);
        let mut x = input;
        for blocks in &self.down {
            for b in blocks {
                x = g.conv3d(x, b.conv, None, b.stride)?;
                x = g.instance_norm(x, b.gamma, b.beta)?;
                x = g.leaky_relu(x, self.config.leaky_slope);
            }
            c.push(x);
        }

        let mut out = BTreeMap::new();
        let mut td: Option<NodeId> = None;
        for l in (lowest..=top).rev() {
            let lat = &self.lateral[&l];
            let y = g.conv3d(c[l], lat.weight, Some(lat.bias), 1)?;
            let y = match td {
                Some(prev) => {
                    let up = g.upsample2(prev)?;
                    g.add(y, up)?
                }
                None => y,
            };
            td = Some(y);
            let level = FeatureLevel::from_index(l).expect("levels 2..=5");
            if levels.contains(&level) {
                let p = &self.output[&l];
                out.insert(level, g.conv3d(y, p.weight, Some(p.bias), 1)?);
            }
        }
        debug_assert!(out.values().all(|&n| g.shape(n)[0] == self.d_hidden));
        Ok(out)
    }
}

/// Runs the backbone on `input [D0, D1, D2]` and returns every pyramid level
/// the configuration provides (P2 up to the top encoder level).
pub fn fpn_forward<T: Float>(
    backbone: &Backbone,
    params: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<FeaturePyramid<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("fpn_forward expects a 3D volume, got {s:?}")));
    }
    let mut g = Graph::new(params);
    let x = g.input(input.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let levels: Vec<FeatureLevel> = (2..=backbone.config.top_level())
        .filter_map(FeatureLevel::from_index)
        .collect();
    let nodes = backbone.forward(&mut g, x, &levels)?;
    Ok(FeaturePyramid {
        levels: nodes.into_iter().map(|(l, n)| (l, g.value(n).clone())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(cfg: &BackboneConfig, d: usize) -> (Backbone, ParamStore<f64>) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new(cfg, d, &mut store, &mut rng).unwrap();
        (b, store)
    }

    fn ramp(shape: [usize; 3]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|i| ((i as f64) * 0.013).sin()).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = BackboneConfig {
            base_channels: 2,
            fpn_channels: 4,
            ..Default::default()
        };
        let (b, p) = build(&cfg, 12);
        let fp = fpn_forward(&b, &p, &ramp([64, 64, 96])).unwrap();
        assert_eq!(fp.levels[&FeatureLevel::P2].shape(), &[12, 16, 16, 24]);
        assert_eq!(fp.levels[&FeatureLevel::P5].shape(), &[12, 2, 2, 3]);
        assert_eq!(fp.levels.len(), 4);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (b, p) = build(&BackboneConfig::default(), 12);
        assert!(matches!(fpn_forward(&b, &p, &ramp([16, 16, 24])), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_projection_gives_zero_features() {
        let cfg = BackboneConfig {
            base_channels: 2,
            fpn_channels: 4,
            num_down_levels: 4,
            ..Default::default()
        };
        let (b, mut p) = build(&cfg, 6);
        for (w, bias) in b.output_weights() {
            p.get_mut(w).data_mut().fill(0.0);
            p.get_mut(bias).data_mut().fill(0.0);
        }
        let fp = fpn_forward(&b, &p, &ramp([16, 16, 24])).unwrap();
        assert!(fp.levels.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
