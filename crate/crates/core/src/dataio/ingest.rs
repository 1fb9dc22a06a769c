//! Adapter for real image collections: a directory of `<sample_id>.png`
//! (or `.jpg`) files plus a `sample_id,l0..` label CSV.

use std::path::Path;

use image::imageops::FilterType;

use super::audit;
use super::store::read_labels;
use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Loads and resizes every listed image to `size x size` RGB in `[0, 1]`.
pub fn load_image_folder(
    image_dir: &Path,
    labels_csv: &Path,
    size: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let (ids, labels) = read_labels(labels_csv)?;
    let plane = size * size;
    let mut pixels = vec![0f32; ids.len() * 3 * plane];
    for (i, id) in ids.iter().enumerate() {
        let path = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| image_dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Dataset(format!("no image file for sample {id}")))?;
        let img = image::load_from_memory(&audit::read_bytes(&path)?)?
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8();
        let out = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * size + x as usize;
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(LabeledDataset {
        split,
        images: Tensor::new(&[ids.len(), 3, size, size], pixels)?,
        sample_ids: ids,
        labels: (split != Split::Unlabeled).then_some(labels),
    })
}
