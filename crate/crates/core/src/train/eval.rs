use candle_core::{DType, Tensor};

use crate::data::{Dataset, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::metrics::{summarize, ConfusionMatrix, EvalReport};
use crate::network::{Registry, StudentEnsemble, VoteMode};

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::Method;
use super::TrainState;

/// Anything that turns a batch of images into class maps. The ground truth
/// is passed along so that test fixtures can echo it.
pub trait Segmenter {
    /// `[B, H, W]` u32 class ids for `images: [B, 3, H, W]`.
    fn segment(&self, images: &Tensor, labels: &Tensor) -> Result<Tensor>;
}

/// Predicts the label itself (ignored pixels become class 0).
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelEcho;

impl Segmenter for LabelEcho {
    fn segment(&self, _images: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let ignore = labels.ones_like()?.affine(IGNORE_INDEX as f64, 0.0)?;
        let zeros = labels.zeros_like()?;
        Ok(labels.eq(&ignore)?.where_cond(&zeros, labels)?)
    }
}

/// Predicts one class everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSegmenter(pub u32);

impl Segmenter for ConstantSegmenter {
    fn segment(&self, _images: &Tensor, labels: &Tensor) -> Result<Tensor> {
        Ok(labels.ones_like()?.affine(self.0 as f64, 0.0)?)
    }
}

/// Trained networks: the soft vote of both paths, or the single source path
/// for a source-only model.
#[derive(Debug, Clone, Copy)]
pub struct ModelSegmenter<'a> {
    pub ensemble: &'a StudentEnsemble,
    pub method: Method,
    pub vote: VoteMode,
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, images: &Tensor, _labels: &Tensor) -> Result<Tensor> {
        match self.method {
            Method::Full => self.ensemble.predict(images, self.vote),
            Method::SourceOnly => Ok(self.ensemble.forward_single_path(images)?.argmax(1)?),
        }
    }
}

/// Confusion matrix over every patch of a labelled dataset, in manifest
/// order, then per-class scores.
pub fn evaluate(segmenter: &dyn Segmenter, data: &Dataset, batch_size: usize, dtype: DType) -> Result<EvalReport> {
    if !data.has_labels() {
        return Err(Error::Data("evaluation needs a label for every patch".into()));
    }
    let mut cm = ConfusionMatrix::new(data.manifest.num_classes());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = data.images(chunk, dtype)?;
        let labels = data.labels(chunk)?;
        let pred = segmenter.segment(&images, &labels)?;
        if pred.dims() != labels.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match labels {:?}",
                pred.dims(),
                labels.dims()
            )));
        }
        cm.accumulate(
            &pred.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?,
            &labels.flatten_all()?.to_vec1::<u32>()?,
            data.manifest.ignore_index,
        )?;
    }
    Ok(summarize(&cm, &data.manifest.class_names))
}

/// Evaluate whatever a checkpoint holds: trained networks or the
/// label-echo fixture.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    match ckpt.meta.kind {
        CheckpointKind::LabelEcho => evaluate(&LabelEcho, data, batch_size, DType::F32),
        CheckpointKind::Model => {
            let state = TrainState::from_checkpoint(ckpt, &Registry::default())?;
            let segmenter = ModelSegmenter {
                ensemble: &state.ensemble,
                method: state.config.method,
                vote: state.config.vote,
            };
            evaluate(&segmenter, data, batch_size, state.config.dtype())
        }
    }
}
