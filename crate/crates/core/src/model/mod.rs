//! The Focused Decoder: object queries bound to atlas anchors, refined by
//! stacked blocks of self-attention, RoI-restricted cross-attention and an
//! FFN, followed by shared classification and tanh-bounded regression heads.

pub mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atlas::{generate_query_anchors_with, roi_to_feature_mask, Anchor, Atlas, AttentionMask, QueryAnchors};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::nn::init::{normal, xavier_uniform};
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub use config::{BackboneConfig, FeatureLevel, ModelConfig};

/// Sinusoidal code of one normalized position. Each axis owns `d/3`
/// channels holding sin/cos pairs at frequencies `10000^(-2k/(d/3))`.
pub fn encode_position(x: [f64; 3], d: usize, scale: f64) -> Vec<f64> {
    let per_axis = d / 3;
    let mut out = vec![0.0; d];
    for a in 0..3 {
        for k in 0..per_axis / 2 {
            let w = 10000f64.powf(-((2 * k) as f64) / per_axis as f64);
            let arg = scale * x[a] * w;
            out[a * per_axis + 2 * k] = arg.sin();
            out[a * per_axis + 2 * k + 1] = arg.cos();
        }
    }
    out
}

/// Encoding of every voxel center of `grid`, `[#voxels, d]`, in the same
/// axis-0-major order as flattened feature maps.
pub fn positional_encoding(grid: [usize; 3], d: usize, scale: f64) -> Result<Tensor<f64>> {
    if d == 0 || !d.is_multiple_of(6) {
        return Err(Error::Config(format!("positional encoding width {d} is not a multiple of 6")));
    }
    let n: usize = grid.iter().product();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..grid[0] {
        for j in 0..grid[1] {
            for k in 0..grid[2] {
                let idx = [i, j, k];
                let x = std::array::from_fn(|a| (idx[a] as f64 + 0.5) / grid[a] as f64);
                out.extend(encode_position(x, d, scale));
            }
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Value and derivative of decoded coordinate `c` (0..3 center, 3..6 size)
/// for a squashed head output `t` in [-1, 1].
fn decode_coord(a: &Anchor, c: usize, t: f64) -> (f64, f64) {
    if c < 3 {
        let off = a.max_center_offset[c];
        let v = (a.center[c] + t * off).clamp(a.tile.lo[c], a.tile.hi[c]);
        (v, off)
    } else {
        let ax = c - 3;
        let (med, lo, hi) = (a.size[ax], a.size_min[ax], a.size_max[ax]);
        let slope = if t >= 0.0 { hi - med } else { med - lo };
        ((med + t * slope).clamp(lo, hi), slope)
    }
}

/// Maps tanh outputs to boxes relative to their anchors: centers move within
/// the anchor tile, sizes interpolate piecewise linearly between the class
/// minimum, median and maximum.
pub fn decode_boxes(head_output: &[[f64; 6]], anchors: &QueryAnchors) -> Result<Vec<Box3>> {
    if head_output.len() != anchors.num_queries() {
        return Err(Error::Shape(format!(
            "{} head outputs for {} anchors",
            head_output.len(),
            anchors.num_queries()
        )));
    }
    Ok(head_output
        .iter()
        .zip(&anchors.anchors)
        .map(|(t, a)| Box3(std::array::from_fn(|c| decode_coord(a, c, t[c]).0)))
        .collect())
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fout: usize, fin: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(&format!("{name}.weight"), xavier_uniform(rng, &[fout, fin]))?,
            b: store.add(&format!("{name}.bias"), Tensor::zeros(&[fout]))?,
        })
    }

    fn zeros<T: Float>(store: &mut ParamStore<T>, name: &str, fout: usize, fin: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(&format!("{name}.weight"), Tensor::zeros(&[fout, fin]))?,
            b: store.add(&format!("{name}.bias"), Tensor::zeros(&[fout]))?,
        })
    }

    fn apply<T: Float>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.w, Some(self.b))
    }
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[d], T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }
}

struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Mha {
    fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, rng, &format!("{name}.out"), d, d)?,
        })
    }

    /// Returns the output projection and the attention core node.
    fn apply<T: Float>(
        &self,
        g: &mut Graph<T>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&Arc<AttentionMask>>,
    ) -> Result<(NodeId, NodeId)> {
        let (q, k, v) = (self.q.apply(g, q)?, self.k.apply(g, k)?, self.v.apply(g, v)?);
        let a = g.attention(q, k, v, heads, mask)?;
        Ok((self.o.apply(g, a)?, a))
    }
}

struct Block {
    self_attn: Mha,
    norm1: Norm,
    cross_attn: Mha,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

/// Graph nodes of one decoder block's outputs.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    /// `[#queries, 1]` confidence logits.
    pub logits: NodeId,
    /// `[#queries, 6]` center-format boxes.
    pub boxes: NodeId,
    pub self_attn: NodeId,
    pub cross_attn: NodeId,
}

/// Per-block predictions with head-averaged attention retained.
#[derive(Debug, Clone)]
pub struct BlockPrediction {
    pub logits: Vec<f64>,
    pub boxes: Vec<Box3>,
    /// `[#queries, #voxels]`.
    pub cross_attention: Tensor<f64>,
    /// `[#queries, #queries]`.
    pub self_attention: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub class_ids: Vec<u32>,
    pub queries_per_class: usize,
    pub feature_grid: [usize; 3],
    pub blocks: Vec<BlockPrediction>,
}

impl PredictionSet {
    pub fn last(&self) -> &BlockPrediction {
        self.blocks.last().expect("at least one block")
    }
}

pub struct FocusedDecoder {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub anchors: QueryAnchors,
    /// `None` when the RoI restriction is disabled.
    pub mask: Option<Arc<AttentionMask>>,
    pub input_shape: [usize; 3],
    pub feature_grid: [usize; 3],
    pos: Tensor<f64>,
    blocks: Vec<Block>,
    query_embed: ParamId,
    cls: Linear,
    reg: [Linear; 3],
}

impl FocusedDecoder {
    /// Builds the model and its freshly initialized parameters. Registration
    /// order, and therefore initialization, depends only on `(config, seed)`.
    pub fn new<T: Float>(
        config: &ModelConfig,
        atlas: &Atlas,
        input_shape: [usize; 3],
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        atlas.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_hidden;
        let backbone = Backbone::new(&config.backbone, d, &mut store, &mut rng)?;
        backbone.check_input(input_shape)?;
        let feature_grid = backbone.grid(input_shape, config.input_level);
        let anchors = generate_query_anchors_with(atlas, config.anchors_per_axis());
        let mask = if config.use_mask_restriction {
            Some(Arc::new(roi_to_feature_mask(atlas, feature_grid, config.queries_per_class)?))
        } else {
            None
        };
        let nq = anchors.num_queries();
        let query_embed = store.add("decoder.query_embed", normal(&mut rng, &[nq, d], 1.0))?;
        let mut blocks = Vec::new();
        for b in 0..config.num_blocks {
            let p = format!("decoder.block{b}");
            blocks.push(Block {
                self_attn: Mha::new(&mut store, &mut rng, &format!("{p}.self_attn"), d)?,
                norm1: Norm::new(&mut store, &format!("{p}.norm1"), d)?,
                cross_attn: Mha::new(&mut store, &mut rng, &format!("{p}.cross_attn"), d)?,
                norm2: Norm::new(&mut store, &format!("{p}.norm2"), d)?,
                ffn1: Linear::new(&mut store, &mut rng, &format!("{p}.ffn1"), config.d_ffn, d)?,
                ffn2: Linear::new(&mut store, &mut rng, &format!("{p}.ffn2"), d, config.d_ffn)?,
                norm3: Norm::new(&mut store, &format!("{p}.norm3"), d)?,
            });
        }
        let cls = Linear::new(&mut store, &mut rng, "head.cls", 1, d)?;
        let reg = [
            Linear::new(&mut store, &mut rng, "head.reg0", d, d)?,
            Linear::new(&mut store, &mut rng, "head.reg1", d, d)?,
            // zero output layer: untrained predictions coincide with the anchors
            Linear::zeros(&mut store, "head.reg2", 6, d)?,
        ];
        let pos = positional_encoding(feature_grid, d, config.pe_scale)?;
        Ok((
            Self {
                config: config.clone(),
                backbone,
                anchors,
                mask,
                input_shape,
                feature_grid,
                pos,
                blocks,
                query_embed,
                cls,
                reg,
            },
            store,
        ))
    }

    pub fn positions(&self) -> &Tensor<f64> {
        &self.pos
    }

    pub fn num_queries(&self) -> usize {
        self.anchors.num_queries()
    }

    /// Feature map `[d, g0, g1, g2]` to decoder outputs of every block.
    pub fn decode<T: Float>(&self, g: &mut Graph<T>, features: NodeId) -> Result<Vec<BlockNodes>> {
        let fs = g.shape(features).to_vec();
        let d = self.config.d_hidden;
        if fs.len() != 4 || fs[0] != d || fs[1..] != self.feature_grid {
            return Err(Error::Shape(format!(
                "decoder expects features [{d}, {:?}], got {fs:?}",
                self.feature_grid
            )));
        }
        if let Some(m) = &self.mask {
            if m.feature_grid_shape != self.feature_grid {
                return Err(Error::Config(format!(
                    "mask grid {:?} does not match feature grid {:?}",
                    m.feature_grid_shape, self.feature_grid
                )));
            }
        }
        let seq = g.to_sequence(features)?;
        self.decode_tokens(g, seq, &self.pos, self.mask.as_ref())
    }

    /// Decoder on an explicit token sequence `[V, d]` with its positional
    /// codes and mask; `decode` flattens a feature map and calls this.
    pub fn decode_tokens<T: Float>(
        &self,
        g: &mut Graph<T>,
        seq: NodeId,
        pos: &Tensor<f64>,
        mask: Option<&Arc<AttentionMask>>,
    ) -> Result<Vec<BlockNodes>> {
        let d = self.config.d_hidden;
        let heads = self.config.num_heads;
        let pos = g.input(pos.cast());
        let keys = g.add(seq, pos)?;
        let values = if self.config.pe_in_values { keys } else { seq };
        let mut content = g.input(Tensor::zeros(&[self.num_queries(), d]));
        let qe = g.param(self.query_embed);
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qk = g.add(content, qe)?;
            let (sa, sa_core) = b.self_attn.apply(g, qk, qk, content, heads, None)?;
            let x = g.add(content, sa)?;
            content = g.layer_norm(x, b.norm1.gamma, b.norm1.beta)?;

            let q = g.add(content, qe)?;
            let (ca, ca_core) = b.cross_attn.apply(g, q, keys, values, heads, mask)?;
            let x = g.add(content, ca)?;
            content = g.layer_norm(x, b.norm2.gamma, b.norm2.beta)?;

            let h = b.ffn1.apply(g, content)?;
            let h = g.relu(h);
            let h = b.ffn2.apply(g, h)?;
            let x = g.add(content, h)?;
            content = g.layer_norm(x, b.norm3.gamma, b.norm3.beta)?;

            let (logits, boxes) = self.heads(g, content)?;
            out.push(BlockNodes {
                logits,
                boxes,
                self_attn: sa_core,
                cross_attn: ca_core,
            });
        }
        Ok(out)
    }

    fn heads<T: Float>(&self, g: &mut Graph<T>, content: NodeId) -> Result<(NodeId, NodeId)> {
        let logits = self.cls.apply(g, content)?;
        let mut h = self.reg[0].apply(g, content)?;
        h = g.relu(h);
        h = self.reg[1].apply(g, h)?;
        h = g.relu(h);
        h = self.reg[2].apply(g, h)?;
        let t = g.tanh(h);
        let boxes = if self.config.use_anchors {
            let anchors = &self.anchors.anchors;
            g.pointwise(t, |i, v| {
                let (y, dy) = decode_coord(&anchors[i / 6], i % 6, v.f64());
                (T::of(y), T::of(dy))
            })
        } else {
            // absolute boxes squashed into the unit cube
            g.affine(t, 0.5, 0.5)
        };
        Ok((logits, boxes))
    }

    /// Backbone plus decoder for a single volume `[D0, D1, D2]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<Vec<BlockNodes>> {
        let s = input.shape();
        if s != self.input_shape {
            return Err(Error::Shape(format!(
                "model built for input {:?}, got {s:?}",
                self.input_shape
            )));
        }
        let x = g.input(input.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let level = self.config.input_level;
        let feats = self.backbone.forward(g, x, &[level])?;
        self.decode(g, feats[&level])
    }

    /// Inference pass returning every block's predictions and attention.
    pub fn predict<T: Float>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<PredictionSet> {
        let mut g = Graph::new(params);
        let nodes = self.forward(&mut g, input)?;
        Ok(self.collect(&g, &nodes))
    }

    pub fn collect<T: Float>(&self, g: &Graph<T>, nodes: &[BlockNodes]) -> PredictionSet {
        let blocks = nodes
            .iter()
            .map(|n| {
                let boxes = g
                    .value(n.boxes)
                    .data()
                    .chunks(6)
                    .map(|c| Box3(std::array::from_fn(|i| c[i].f64())))
                    .collect();
                BlockPrediction {
                    logits: g.value(n.logits).data().iter().map(|v| v.f64()).collect(),
                    boxes,
                    cross_attention: g.attention_weights(n.cross_attn).expect("attention node").cast(),
                    self_attention: g.attention_weights(n.self_attn).expect("attention node").cast(),
                }
            })
            .collect();
        PredictionSet {
            class_ids: self.anchors.class_ids.clone(),
            queries_per_class: self.anchors.queries_per_class(),
            feature_grid: self.feature_grid,
            blocks,
        }
    }
}
