//! Reference-based editing: reconstruction, global and per-class style
//! transfer, shape transfer, and shape interpolation. All operations are
//! pure functions over a loaded model bundle; inputs are never mutated.

use crate::error::{Error, Result};
use crate::generator::GeneratedSample;
use crate::mask::SemanticMask;
use crate::mask_embedder::interpolate_embeddings;
use crate::model::Models;
use crate::tensor::Scalar;

fn check_classes(classes: &[usize], num_classes: usize) -> Result<()> {
    for &j in classes {
        if j >= num_classes {
            return Err(Error::Arg(format!(
                "class index {j} out of range (C = {num_classes})"
            )));
        }
    }
    Ok(())
}

/// Rebuild an image from its own mask and style codes.
pub fn reconstruct<E: Scalar>(
    m: &Models<E>,
    image: &[f32],
    mask: &SemanticMask,
) -> Result<GeneratedSample<E>> {
    m.check_class_count(mask)?;
    let styles = m.encoder.encode_styles(image, mask)?;
    m.generate(mask, &styles, None)
}

/// Replace the style rows of `classes` with the reference image's rows;
/// geometry stays the target's.
pub fn transfer_style<E: Scalar>(
    m: &Models<E>,
    target_img: &[f32],
    target_mask: &SemanticMask,
    ref_img: &[f32],
    ref_mask: &SemanticMask,
    classes: &[usize],
) -> Result<GeneratedSample<E>> {
    m.check_class_count(target_mask)?;
    m.check_class_count(ref_mask)?;
    check_classes(classes, m.config.num_classes)?;
    let mut styles = m.encoder.encode_styles(target_img, target_mask)?;
    let ref_styles = m.encoder.encode_styles(ref_img, ref_mask)?;
    for &j in classes {
        styles.replace_row(j, &ref_styles);
    }
    m.generate(target_mask, &styles, None)
}

/// Swap the mask-embedding rows of `classes` for the reference mask's rows;
/// styles always come from the target.
pub fn transfer_shape<E: Scalar>(
    m: &Models<E>,
    target_img: &[f32],
    target_mask: &SemanticMask,
    ref_mask: &SemanticMask,
    classes: &[usize],
) -> Result<GeneratedSample<E>> {
    m.check_class_count(target_mask)?;
    m.check_class_count(ref_mask)?;
    check_classes(classes, m.config.num_classes)?;
    let styles = m.encoder.encode_styles(target_img, target_mask)?;
    let mut emb = m.embedder.embed_mask(target_mask)?;
    let ref_emb = m.embedder.embed_mask(ref_mask)?;
    for &j in classes {
        emb.replace_code(j, &ref_emb);
    }
    m.generate(target_mask, &styles, Some(&emb))
}

/// Blend the embeddings of `classes` between two masks:
/// `alpha * embed(mask1) + (1 - alpha) * embed(mask2)`; other classes keep
/// `mask1`'s embedding. Styles come from the target image under `mask1`.
pub fn interpolate_shape<E: Scalar>(
    m: &Models<E>,
    target_img: &[f32],
    mask1: &SemanticMask,
    mask2: &SemanticMask,
    classes: &[usize],
    alpha: f64,
) -> Result<GeneratedSample<E>> {
    m.check_class_count(mask1)?;
    m.check_class_count(mask2)?;
    check_classes(classes, m.config.num_classes)?;
    let styles = m.encoder.encode_styles(target_img, mask1)?;
    let e1 = m.embedder.embed_mask(mask1)?;
    let e2 = m.embedder.embed_mask(mask2)?;
    let emb = interpolate_embeddings(&e1, &e2, classes, alpha)?;
    m.generate(mask1, &styles, Some(&emb))
}
