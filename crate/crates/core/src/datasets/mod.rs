//! Dataset generation, image/mask files and manifests.

pub mod manifest;
pub mod netpbm;
pub mod synth;

use std::fs;
use std::path::Path;

pub use manifest::{assign_splits, split_40_30_30, split_60_20_20, Manifest, Record, Split, SplitRatio};
pub use synth::{gen_one, gen_synthetic, Preset, Sample, SyntheticSpec};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Writes samples under `out_dir` (`images/`, `masks/`, `manifest.tsv`) and
/// returns the manifest. Gray samples are stored as PGM, colour ones as PPM.
pub fn write_dataset(samples: &[Sample], out_dir: &Path, ratio: SplitRatio, seed: u64) -> Result<Manifest> {
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{}_{i:05}", s.dataset_tag);
        let image_path = if s.image.is_gray() {
            let p = img_dir.join(format!("{stem}.pgm"));
            let gray = GrayImage::new(s.image.width, s.image.height, s.image.data.iter().step_by(3).copied().collect())?;
            netpbm::save_gray(&p, &gray)?;
            p
        } else {
            let p = img_dir.join(format!("{stem}.ppm"));
            netpbm::save_image(&p, &s.image)?;
            p
        };
        let mask_path = mask_dir.join(format!("{stem}.pbm"));
        netpbm::save_mask(&mask_path, &s.mask)?;
        records.push(Record {
            image_path,
            mask_path,
            subject_id: s.subject_id.clone(),
            dataset_tag: s.dataset_tag.clone(),
            split: Split::Train,
        });
    }
    let mut manifest = Manifest { records };
    if manifest.len() >= 10 {
        manifest = assign_splits(&manifest, ratio, seed)?;
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Loads every record of a manifest, checking that image and mask agree in size.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let image = netpbm::load_image(&r.image_path)?;
            let mask = netpbm::load_mask(&r.mask_path)?;
            if (image.width, image.height) != (mask.width, mask.height) {
                return Err(Error::Dimension(format!(
                    "{} is {}x{} but {} is {}x{}",
                    r.image_path.display(),
                    image.width,
                    image.height,
                    r.mask_path.display(),
                    mask.width,
                    mask.height
                )));
            }
            Ok(Sample {
                image,
                mask,
                subject_id: r.subject_id.clone(),
                dataset_tag: r.dataset_tag.clone(),
            })
        })
        .collect()
}

/// Mean foreground fraction of the masks.
pub fn mean_scale(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.mask.fraction()).sum::<f64>() / samples.len() as f64
}
