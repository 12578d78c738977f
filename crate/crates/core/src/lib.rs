//! Focused Decoder: anatomy-guided 3D organ detection.

pub mod atlas;
pub mod backbone;
pub mod error;
pub mod explain;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod volume;

pub use atlas::{
    build_atlas, generate_query_anchors, roi_to_feature_mask, Atlas, AtlasClass, AttentionMask,
    QueryAnchors,
};
pub use error::{Error, Result};
pub use geometry::{giou, giou_grad, iou, map_coco, Box3, BoxSet, ClassDetection, CornerBox, EvalResult};
pub use phantom::{generate_dataset, DatasetManifest, PhantomConfig, Sample, Split};
pub use pipeline::{Ablation, RunConfig, RunDir};
pub use model::{FocusedDecoder, ModelConfig, PredictionSet};
pub use nn::ParamStore;
pub use preprocess::PreprocessConfig;
pub use tensor::Tensor;
pub use training::{dynamic_labels, infer, train, DynamicLabels, TrainConfig};
pub use volume::Volume;
