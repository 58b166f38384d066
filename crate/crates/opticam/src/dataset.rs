//! Synthetic shape dataset: noisy backgrounds with one class-determined
//! shape per image (disc, square, cross) and exact ground-truth boxes,
//! plus the on-disk representation (index.json + binary PPM files).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::nn::LabeledSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub image_size: usize,
    pub class_count: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub boxes: Vec<Vec<BBox>>,
    pub splits: Vec<Split>,
}

/// Per-image RNG stream independent of generation order.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .rotate_left(31);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Paint `shape` pixels at intensity-per-channel `tint` and return the
/// tight bounding box of the painted set.
fn paint(image: &mut Tensor, pixels: &[(usize, usize)], tint: [f64; 3]) -> BBox {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for &(y, x) in pixels {
        for c in 0..3 {
            image.data_mut()[(c * h + y) * w + x] = tint[c];
        }
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BBox { x0, y0, x1, y1 }
}

fn shape_pixels(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match class {
        // filled disc
        0 => {
            let r = rng.gen_range(3..=size / 6) as isize;
            let cy = rng.gen_range(r as usize..size - r as usize) as isize;
            let cx = rng.gen_range(r as usize..size - r as usize) as isize;
            let mut px = Vec::new();
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                        px.push((y as usize, x as usize));
                    }
                }
            }
            px
        }
        // filled square
        1 => {
            let side = rng.gen_range(5..=size / 3);
            let y0 = rng.gen_range(0..size - side);
            let x0 = rng.gen_range(0..size - side);
            (y0..y0 + side)
                .flat_map(|y| (x0..x0 + side).map(move |x| (y, x)))
                .collect()
        }
        // cross: horizontal and vertical bars of the same thickness
        _ => {
            let arm = rng.gen_range(3..=size / 6);
            let thick = rng.gen_range(1..=2usize);
            let cy = rng.gen_range(arm + thick..size - arm - thick);
            let cx = rng.gen_range(arm + thick..size - arm - thick);
            let mut px = Vec::new();
            for y in cy - thick..=cy + thick {
                for x in cx - arm..=cx + arm {
                    px.push((y, x));
                }
            }
            for y in cy - arm..=cy + arm {
                for x in cx - thick..=cx + thick {
                    if y < cy - thick || y > cy + thick {
                        px.push((y, x));
                    }
                }
            }
            px
        }
    }
}

/// Deterministic 3-channel shape dataset with a per-class 70/10/20 split.
pub fn generate_synthetic_dataset(
    seed: u64,
    n_per_class: usize,
    image_size: usize,
    class_count: usize,
) -> Result<SyntheticDataset> {
    if !(2..=3).contains(&class_count) {
        return Err(Error::invalid(format!(
            "generate_synthetic_dataset: class_count {class_count} not in 2..=3"
        )));
    }
    if image_size < 20 {
        return Err(Error::invalid(format!(
            "generate_synthetic_dataset: image size {image_size} too small for the minimum shape size (need >= 20)"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("generate_synthetic_dataset: n_per_class must be >= 1"));
    }
    let total = n_per_class * class_count;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut boxes = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let n_train = n_per_class * 7 / 10;
    let n_val = n_per_class / 10;
    for idx in 0..total {
        let class = idx / n_per_class;
        let within = idx % n_per_class;
        let mut rng = image_rng(seed, idx);
        // low-amplitude noise background
        let mut img = Tensor::new(
            vec![3, image_size, image_size],
            (0..3 * image_size * image_size)
                .map(|_| rng.gen_range(0.0..0.2))
                .collect(),
        )?;
        let pixels = shape_pixels(class, image_size, &mut rng);
        let tint = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        let bb = paint(&mut img, &pixels, tint);
        debug_assert!(bb.area() >= 16);
        images.push(img);
        labels.push(class);
        boxes.push(vec![bb]);
        splits.push(if within < n_train {
            Split::Train
        } else if within < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(SyntheticDataset {
        seed,
        image_size,
        class_count,
        images,
        labels,
        boxes,
        splits,
    })
}

impl SyntheticDataset {
    /// Image indices belonging to a split, in ascending order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn labeled_set(&self, split: Split) -> LabeledSet {
        let idx = self.split_indices(split);
        LabeledSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Write index.json plus one PPM (P6, maxval 255) per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.images.len());
        for i in 0..self.images.len() {
            let file = format!("img_{i:05}.ppm");
            save_ppm(&self.images[i], &dir.join(&file))?;
            entries.push(IndexEntry {
                id: i,
                label: self.labels[i],
                split: self.splits[i],
                boxes: self.boxes[i].clone(),
                file,
            });
        }
        let index = IndexFile {
            seed: self.seed,
            image_size: self.image_size,
            class_count: self.class_count,
            entries,
        };
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = fs::read_to_string(dir.join("index.json"))?;
        let index: IndexFile = serde_json::from_str(&raw)?;
        let mut images = Vec::with_capacity(index.entries.len());
        let mut labels = Vec::new();
        let mut boxes = Vec::new();
        let mut splits = Vec::new();
        for (i, e) in index.entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::invalid(format!(
                    "dataset index: entry {i} has id {}",
                    e.id
                )));
            }
            if e.label >= index.class_count {
                return Err(Error::invalid(format!(
                    "dataset index: label {} out of range",
                    e.label
                )));
            }
            if e.boxes.is_empty() {
                return Err(Error::invalid(format!("dataset index: entry {i} has no gt box")));
            }
            images.push(load_ppm(&dir.join(&e.file))?);
            labels.push(e.label);
            boxes.push(e.boxes.clone());
            splits.push(e.split);
        }
        Ok(SyntheticDataset {
            seed: index.seed,
            image_size: index.image_size,
            class_count: index.class_count,
            images,
            labels,
            boxes,
            splits,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexEntry {
    id: usize,
    label: usize,
    split: Split,
    boxes: Vec<BBox>,
    file: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexFile {
    seed: u64,
    image_size: usize,
    class_count: usize,
    entries: Vec<IndexEntry>,
}

/// Binary PPM (P6, maxval 255); values stored as round(255 * v).
pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::invalid("save_ppm: expected a 3xHxW image"));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(64 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.at3(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    // header: three whitespace-separated tokens after the magic
    let bad = || Error::invalid(format!("load_ppm: malformed PPM at {}", path.display()));
    if !bytes.starts_with(b"P6") {
        return Err(bad());
    }
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad())?
                .parse::<usize>()
                .map_err(|_| bad())?,
        );
    }
    pos += 1; // single whitespace byte after maxval
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 || bytes.len() != pos + 3 * h * w {
        return Err(bad());
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}
