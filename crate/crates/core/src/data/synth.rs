use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::metrics::Annotation;

use super::{write_labels, ImageBuffer, Manifest, ManifestItem, NUM_CLASSES};

pub const BACKGROUND: [u8; 3] = [24, 24, 24];

/// Fill color of each class.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [250, 190, 212],
    [255, 255, 255],
];

pub const MIN_SIDE: usize = 8;
pub const MAX_SIDE: usize = 64;
const MAX_TRIES: usize = 10_000;

/// Side length in `[8, 64]`, skewed toward small values.
fn side(rng: &mut ChaCha8Rng, limit: usize) -> usize {
    let u: f64 = rng.random();
    (MIN_SIDE + (u * u * (MAX_SIDE - MIN_SIDE + 1) as f64) as usize).min(MAX_SIDE).min(limit)
}

/// One image with 2–10 non-touching filled rectangles, each at least one
/// pixel from the border.
pub fn synth_sample(rng: &mut ChaCha8Rng, size: usize) -> Result<(ImageBuffer, Vec<Annotation>)> {
    if size < MIN_SIDE + 2 {
        return Err(Error::InvalidParameter(format!("synthetic image size {size} too small")));
    }
    let target = rng.random_range(2..=10usize);
    let mut rects: Vec<(usize, usize, usize, usize, usize)> = Vec::with_capacity(target);
    let mut tries = 0;
    while rects.len() < target && tries < MAX_TRIES {
        tries += 1;
        let class = rng.random_range(0..NUM_CLASSES);
        let (w, h) = (side(rng, size - 2), side(rng, size - 2));
        let x = rng.random_range(1..=size - 1 - w);
        let y = rng.random_range(1..=size - 1 - h);
        let apart = rects.iter().all(|&(_, ox, oy, ow, oh)| x + w < ox || ox + ow < x || y + h < oy || oy + oh < y);
        if apart {
            rects.push((class, x, y, w, h));
        }
    }
    let mut img = ImageBuffer::filled(size, size, BACKGROUND);
    let mut anns = Vec::with_capacity(rects.len());
    for &(class, x, y, w, h) in &rects {
        img.fill_rect(x, y, x + w, y + h, CLASS_COLORS[class]);
        anns.push(Annotation { class_id: class, bbox: BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64) });
    }
    Ok((img, anns))
}

/// `n` images from one seeded stream.
pub fn synth_samples(seed: u64, n: usize, size: usize) -> Result<Vec<(ImageBuffer, Vec<Annotation>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_sample(&mut rng, size)).collect()
}

/// Writes `images/NNNN.ppm`, `labels/NNNN.txt` and `manifest.json` under `out`.
pub fn write_synth_dataset(seed: u64, n: usize, size: usize, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("labels"))?;
    let mut items = Vec::with_capacity(n);
    for (i, (img, anns)) in synth_samples(seed, n, size)?.into_iter().enumerate() {
        let item =
            ManifestItem { image: format!("images/{i:04}.ppm").into(), label: format!("labels/{i:04}.txt").into() };
        img.save_ppm(out.join(&item.image))?;
        std::fs::write(out.join(&item.label), write_labels(&anns, size, size))?;
        items.push(item);
    }
    let manifest = Manifest::new("synthetic", items);
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
