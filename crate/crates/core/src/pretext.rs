//! Pretext label spaces and batch construction.
//!
//! Three batch flavours are supported:
//!
//! * IE-Rot: each image gets one freshly sampled rotation label and one
//!   enhancement-degree label; the image is rotated first, then enhanced.
//! * Rotation: each image expands into all four rotations.
//! * Rotation + augmentation: like Rotation, but every source image first
//!   receives a sampled enhancement degree whose label is discarded.

use crate::error::{Error, Result};
use crate::imgops::{apply_degree, rotate90, Degree, IeKind, Image, Rotation};
pub use crate::rng::{Rng, RngState};

/// Number of labels per pretext task.
pub const LABELS_PER_TASK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    Rotation,
    Enhancement,
}

/// The four labels of one task and the transform parameter behind each.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelSpace {
    Rotation([Rotation; 4]),
    Enhancement { kind: IeKind, degrees: [Degree; 4] },
}

impl LabelSpace {
    pub fn rotation() -> Self {
        LabelSpace::Rotation(Rotation::ALL)
    }

    pub fn enhancement(kind: IeKind) -> Self {
        LabelSpace::Enhancement {
            kind,
            degrees: kind.degrees(),
        }
    }

    pub fn task(&self) -> TaskId {
        match self {
            LabelSpace::Rotation(_) => TaskId::Rotation,
            LabelSpace::Enhancement { .. } => TaskId::Enhancement,
        }
    }

    pub fn len(&self) -> usize {
        LABELS_PER_TASK
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Transforms `img` according to label `index` of this space.
    pub fn apply(&self, img: &Image, index: usize) -> Result<Image> {
        check_label(index)?;
        match self {
            LabelSpace::Rotation(rots) => Ok(rotate90(img, rots[index])),
            LabelSpace::Enhancement { kind, degrees } => apply_degree(img, *kind, degrees[index]),
        }
    }
}

fn check_label(index: usize) -> Result<()> {
    if index >= LABELS_PER_TASK {
        return Err(Error::InvalidArgument(format!(
            "label {index} out of range 0..{LABELS_PER_TASK}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample {
    pub image: Image,
    pub rotation_label: usize,
    pub ie_label: usize,
    pub source_index: usize,
}

/// Source of `(rotation, enhancement)` label pairs.
pub trait LabelSampler {
    fn sample_labels(&mut self) -> (usize, usize);
}

impl LabelSampler for Rng {
    fn sample_labels(&mut self) -> (usize, usize) {
        sample_labels(self)
    }
}

/// Independent uniform draws over `0..4` for each task.
pub fn sample_labels(rng: &mut Rng) -> (usize, usize) {
    let r = rng.below(LABELS_PER_TASK);
    let i = rng.below(LABELS_PER_TASK);
    (r, i)
}

/// Always returns the same pair; useful to pin one task.
#[derive(Clone, Copy, Debug)]
pub struct FixedLabels(pub usize, pub usize);

impl LabelSampler for FixedLabels {
    fn sample_labels(&mut self) -> (usize, usize) {
        (self.0, self.1)
    }
}

/// Samples enhancement labels only; rotation stays at 0 degrees.
pub struct EnhancementOnly<'a>(pub &'a mut Rng);

impl LabelSampler for EnhancementOnly<'_> {
    fn sample_labels(&mut self) -> (usize, usize) {
        (0, self.0.below(LABELS_PER_TASK))
    }
}

/// Rotate by `rotation_label`, then apply enhancement degree `ie_label` of `ie`.
pub fn compose(img: &Image, rotation_label: usize, ie_label: usize, ie: IeKind) -> Result<Image> {
    check_label(rotation_label)?;
    check_label(ie_label)?;
    let rotated = rotate90(img, Rotation::ALL[rotation_label]);
    apply_degree(&rotated, ie, ie.degrees()[ie_label])
}

pub fn build_ierot_batch<S: LabelSampler + ?Sized>(
    images: &[Image],
    ie: IeKind,
    sampler: &mut S,
) -> Result<Vec<PretextSample>> {
    build_ierot_batch_indexed(images.iter().enumerate(), ie, sampler)
}

/// Like [`build_ierot_batch`] but with caller-supplied source indices.
pub fn build_ierot_batch_indexed<'a, S: LabelSampler + ?Sized>(
    images: impl IntoIterator<Item = (usize, &'a Image)>,
    ie: IeKind,
    sampler: &mut S,
) -> Result<Vec<PretextSample>> {
    let mut out = Vec::new();
    for (source_index, img) in images {
        let (rotation_label, ie_label) = sampler.sample_labels();
        out.push(PretextSample {
            image: compose(img, rotation_label, ie_label, ie)?,
            rotation_label,
            ie_label,
            source_index,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("build_ierot_batch"));
    }
    Ok(out)
}

/// All four rotations of every image, in image-major order.
pub fn build_rotation_batch(images: &[Image]) -> Result<Vec<(Image, usize)>> {
    if images.is_empty() {
        return Err(Error::Empty("build_rotation_batch"));
    }
    Ok(images
        .iter()
        .flat_map(|img| Rotation::ALL.map(|r| (rotate90(img, r), r.index())))
        .collect())
}

/// Rotation batch where each source image is first enhanced with a sampled degree.
/// Only the enhancement half of each sampled pair is used.
pub fn build_rotda_batch<S: LabelSampler + ?Sized>(
    images: &[Image],
    ie: IeKind,
    sampler: &mut S,
) -> Result<Vec<(Image, usize)>> {
    if images.is_empty() {
        return Err(Error::Empty("build_rotda_batch"));
    }
    let space = LabelSpace::enhancement(ie);
    let mut enhanced = Vec::with_capacity(images.len());
    for img in images {
        let (_, ie_label) = sampler.sample_labels();
        enhanced.push(space.apply(img, ie_label)?);
    }
    build_rotation_batch(&enhanced)
}
