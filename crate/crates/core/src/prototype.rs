//! Masked average pooling of projected feature maps into per-class
//! prototypes.

use crate::error::{DaclError, Result};
use crate::geometry::{ClassEmbedding, Origin, SeqCounter};
use crate::tensor::{Tape, Tensor, Var};

/// Projected features of one image, `values[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * channels {
            return Err(DaclError::shape(
                "feature_map",
                format!("{width}x{height}x{channels} from {} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DaclError::Contract("feature map has non-finite values".into()));
        }
        Ok(Self { width, height, channels, values })
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruth,
    PseudoLabel,
}

/// Per-pixel activation of one class, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMask {
    pub class_id: usize,
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub source: MaskSource,
}

impl ActivationMask {
    /// One-hot mask of `class_id` from an integer label map.
    pub fn from_labels(labels: &[u8], width: usize, height: usize, class_id: usize) -> Self {
        let scores = labels.iter().map(|&l| if l as usize == class_id { 1.0 } else { 0.0 }).collect();
        Self { class_id, width, height, scores, source: MaskSource::GroundTruth }
    }
}

/// Thresholded mask: `bits[p]` is true iff the pixel is selected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `1(score > phi)` per pixel.
pub fn binarize_mask(mask: &ActivationMask, phi: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&phi) {
        return Err(DaclError::config("phi", format!("{phi} is outside [0, 1)")));
    }
    if mask.scores.len() != mask.width * mask.height {
        return Err(DaclError::shape("binarize_mask", "score map does not match its size"));
    }
    Ok(BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: mask.scores.iter().map(|&s| s > phi).collect(),
    })
}

fn check_mask(width: usize, height: usize, mask: &BinaryMask) -> Result<()> {
    if mask.width != width || mask.height != height || mask.bits.len() != width * height {
        return Err(DaclError::Contract(format!(
            "mask {}x{} against features {width}x{height}",
            mask.width, mask.height
        )));
    }
    Ok(())
}

/// Mean feature over the masked pixels, or `None` when the mask is empty.
///
/// The result is not normalized.
pub fn masked_average_pool(features: &FeatureMap, mask: &BinaryMask) -> Result<Option<Vec<f64>>> {
    check_mask(features.width, features.height, mask)?;
    let count = mask.count();
    if count == 0 {
        return Ok(None);
    }
    let mut acc = vec![0.0; features.channels];
    for (p, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        acc.iter_mut().zip(features.pixel(p)).for_each(|(a, f)| *a += f);
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(Some(acc))
}

/// Prototypes of one image on the tape.
///
/// `features` is a `[width*height, channels]` slice of the projection map.
/// Returns a `[masks.len(), channels]` matrix of un-normalized means, one
/// row per mask; every mask must be non-empty.
pub fn masked_average_pool_on_tape(tape: &mut Tape, features: Var, masks: &[&BinaryMask]) -> Result<Var> {
    let pixels = tape.value(features).rows();
    let mut weights = vec![0.0; masks.len() * pixels];
    for (r, m) in masks.iter().enumerate() {
        if m.bits.len() != pixels {
            return Err(DaclError::Contract(format!(
                "mask of {} pixels against {pixels} feature rows",
                m.bits.len()
            )));
        }
        let count = m.count();
        if count == 0 {
            return Err(DaclError::Contract("empty mask passed to on-tape pooling".into()));
        }
        let w = 1.0 / count as f64;
        for (p, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
            weights[r * pixels + p] = w;
        }
    }
    let wv = tape.constant(Tensor::new(vec![masks.len(), pixels], weights)?);
    tape.matmul(wv, features)
}

/// [`masked_average_pool_on_tape`] for features stored at half resolution
/// that would be upsampled by 2x2 replication before pooling.
///
/// Each low-resolution cell is weighted by the number of masked pixels in
/// its 2x2 block, so the result equals pooling the upsampled map.
pub fn block_average_pool_on_tape(tape: &mut Tape, features: Var, masks: &[&BinaryMask]) -> Result<Var> {
    let cells = tape.value(features).rows();
    let mut weights = vec![0.0; masks.len() * cells];
    for (r, m) in masks.iter().enumerate() {
        let (w, h) = (m.width, m.height);
        if w % 2 != 0 || h % 2 != 0 || m.bits.len() != w * h || (w / 2) * (h / 2) != cells {
            return Err(DaclError::Contract(format!("{w}x{h} mask against {cells} half-resolution rows")));
        }
        let count = m.count();
        if count == 0 {
            return Err(DaclError::Contract("empty mask passed to on-tape pooling".into()));
        }
        let unit = 1.0 / count as f64;
        let row = &mut weights[r * cells..(r + 1) * cells];
        for (p, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (p % w, p / w);
            row[(y / 2) * (w / 2) + x / 2] += unit;
        }
    }
    let wv = tape.constant(Tensor::new(vec![masks.len(), cells], weights)?);
    tape.matmul(wv, features)
}

/// One normalized prototype per (image, class) whose binarized mask is
/// non-empty, tagged `Origin::Batch` with fresh seq ids.
pub fn batch_prototypes(
    batch_features: &[FeatureMap],
    masks_per_image: &[Vec<ActivationMask>],
    phi: f64,
    seq: &mut SeqCounter,
) -> Result<Vec<ClassEmbedding>> {
    if batch_features.len() != masks_per_image.len() {
        return Err(DaclError::Contract(format!(
            "{} feature maps with {} mask sets",
            batch_features.len(),
            masks_per_image.len()
        )));
    }
    let mut out = Vec::new();
    for (features, masks) in batch_features.iter().zip(masks_per_image) {
        for mask in masks {
            let bin = binarize_mask(mask, phi)?;
            if let Some(v) = masked_average_pool(features, &bin)? {
                out.push(ClassEmbedding::new(v, mask.class_id, Origin::Batch, seq.next_id()).normalized());
            }
        }
    }
    Ok(out)
}
