//! Binary PPM images, JSON annotations, and the synthetic rectangles dataset.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Real, Tensor};
use crate::train::Sample;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("PPM image", d.to_string());
        let mut pos = 0;
        let mut token = || -> Result<String> {
            // Whitespace and `#` comments may separate header fields.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(bad("not a binary P6 file"));
        }
        let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("bad header number")) };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        if width == 0 || height == 0 {
            return Err(bad("empty image"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let n = width * height * 3;
        if bytes.len() != start + n {
            return Err(bad(&format!("expected {n} raster bytes, found {}", bytes.len().saturating_sub(start))));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[start..].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// `3 x H x W` tensor with values `v / 255 - 0.5`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::from_f64(px[c] as f64 / 255.0 - 0.5);
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("consistent shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Relative to the annotation file's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub image_id: u64,
    pub class: usize,
    /// Center format `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

impl InstanceEntry {
    pub fn to_bbox(&self) -> Result<BBox> {
        let [x, y, w, h] = self.bbox;
        BBox::new(self.class, x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub num_classes: usize,
    pub images: Vec<ImageEntry>,
    pub instances: Vec<InstanceEntry>,
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("annotations", "duplicate image id"));
        }
        for inst in &self.instances {
            let img = self
                .images
                .iter()
                .find(|i| i.id == inst.image_id)
                .ok_or_else(|| Error::format("annotations", format!("instance refers to unknown image {}", inst.image_id)))?;
            if inst.class >= self.num_classes {
                return Err(Error::format(
                    "annotations",
                    format!("class {} not below {}", inst.class, self.num_classes),
                ));
            }
            let c = inst.to_bbox().map_err(|e| Error::format("annotations", e.to_string()))?.corners();
            let (h, w) = (img.height as f64, img.width as f64);
            if c.top < 0.0 || c.left < 0.0 || c.bottom > h || c.right > w {
                return Err(Error::format(
                    "annotations",
                    format!("box {:?} leaves image {}", inst.bbox, img.id),
                ));
            }
        }
        Ok(())
    }

    /// Instances of one image, in file order.
    pub fn boxes_for(&self, image_id: u64) -> Result<Vec<BBox>> {
        self.instances
            .iter()
            .filter(|i| i.image_id == image_id)
            .map(InstanceEntry::to_bbox)
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let a: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        a.validate()?;
        Ok(a)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// A dataset held in memory: annotations plus decoded images in `images` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: AnnotationFile,
    pub images: Vec<Image>,
}

impl Dataset {
    /// Read `annotations.json` and the images it lists.
    pub fn load(annotation_path: impl AsRef<Path>) -> Result<Self> {
        let path = annotation_path.as_ref();
        let annotations = AnnotationFile::read(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let images = annotations
            .images
            .iter()
            .map(|e| {
                let img = Image::read(dir.join(&e.file))?;
                if (img.width, img.height) != (e.width, e.height) {
                    return Err(Error::format(
                        "annotations",
                        format!("{} is {}x{}, annotated {}x{}", e.file, img.width, img.height, e.width, e.height),
                    ));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { annotations, images })
    }

    /// Write images next to `annotations.json` inside `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (entry, img) in self.annotations.images.iter().zip(&self.images) {
            img.write(dir.join(&entry.file))?;
        }
        let path = dir.join("annotations.json");
        self.annotations.write(&path)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.annotations
            .images
            .iter()
            .zip(&self.images)
            .map(|(e, img)| {
                Ok(Sample {
                    image: img.to_tensor(),
                    instances: self.annotations.boxes_for(e.id)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_box: f64,
    /// Defaults to half the image size.
    pub max_box: Option<f64>,
    pub seed: u64,
    /// First image id; lets train and test splits share an id space.
    pub first_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            image_size: 128,
            num_classes: 3,
            min_instances: 1,
            max_instances: 4,
            min_box: 8.0,
            max_box: None,
            seed: 0,
            first_id: 0,
        }
    }
}

/// Fill colors per class; instances jitter each channel around these.
const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 210, 40],
    [200, 50, 210],
    [40, 210, 210],
    [240, 140, 30],
    [250, 250, 250],
];

const PLACEMENT_TRIES: usize = 200;

/// Uniform dark backgrounds with non-overlapping filled rectangles. Sides are
/// log-uniform in `[min_box, max_box]` for the geometric mean, aspect ratio
/// log-uniform in `[1/2, 2]`; rectangles are pixel-aligned so annotations are exact.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let size = cfg.image_size;
    let max_box = cfg.max_box.unwrap_or(size as f64 / 2.0);
    if cfg.num_classes == 0 || cfg.num_classes > PALETTE.len() {
        return Err(Error::arg(format!("between 1 and {} classes are supported", PALETTE.len())));
    }
    if cfg.min_instances > cfg.max_instances || size < 16 {
        return Err(Error::arg("invalid instance range or image size"));
    }
    if !(cfg.min_box >= 2.0 && cfg.min_box <= max_box && max_box <= size as f64) {
        return Err(Error::arg(format!("invalid box size range [{}, {max_box}]", cfg.min_box)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut entries = Vec::with_capacity(cfg.num_images);
    let mut instances = Vec::new();
    let (lo, hi) = (cfg.min_box.ln(), max_box.ln());
    for n in 0..cfg.num_images {
        let id = cfg.first_id + n as u64;
        let g = rng.gen_range(20..=70);
        let bg = [g, g + rng.gen_range(0..10), g + rng.gen_range(0..10)];
        let mut img = Image::filled(size, size, bg);
        let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
        let mut placed: Vec<[usize; 4]> = Vec::new();
        for _ in 0..count {
            for _ in 0..PLACEMENT_TRIES {
                let s = rng.gen_range(lo..=hi).exp();
                let r = rng.gen_range((0.5f64).ln()..=(2.0f64).ln()).exp();
                let side = |v: f64| (v.round() as usize).clamp(cfg.min_box.ceil() as usize, max_box.floor() as usize);
                let (w, h) = (side(s * r.sqrt()), side(s / r.sqrt()));
                let (x0, y0) = (rng.gen_range(0..=size - w), rng.gen_range(0..=size - h));
                // One pixel of background between rectangles.
                let clear = placed
                    .iter()
                    .all(|&[px, py, pw, ph]| x0 > px + pw || px > x0 + w || y0 > py + ph || py > y0 + h);
                if !clear {
                    continue;
                }
                let class = rng.gen_range(0..cfg.num_classes);
                let base = PALETTE[class];
                let rgb = base.map(|c| (c as i32 + rng.gen_range(-25..=25)).clamp(0, 255) as u8);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        img.set(x, y, rgb);
                    }
                }
                placed.push([x0, y0, w, h]);
                instances.push(InstanceEntry {
                    image_id: id,
                    class,
                    bbox: [x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0, w as f64, h as f64],
                });
                break;
            }
        }
        images.push(img);
        entries.push(ImageEntry {
            id,
            width: size,
            height: size,
            file: format!("img_{id:05}.ppm"),
        });
    }
    Ok(Dataset {
        annotations: AnnotationFile {
            num_classes: cfg.num_classes,
            images: entries,
            instances,
        },
        images,
    })
}
