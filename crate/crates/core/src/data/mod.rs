//! Sample catalogs: on-disk ingestion, the synthetic texture generator, and
//! class-level seen/unseen/validation splits.

mod ppm;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

pub use ppm::{decode_ppm, encode_ppm, write_ppm};
pub use split::{kept_count, split_classes, NUM_FOLDS, split_holdout, subsample_train, SplitSpec, SubsampleMode};
pub use synthetic::generate_synthetic;

use crate::error::{Error, Result};
use crate::numerics::{io, Float, Tensor};

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3,H,W]`, every value in `[0,1]`.
    pub image: Tensor<f32>,
    pub class_id: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: String,
    pub samples: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub classes: Vec<ClassEntry>,
    pub image_shape: [usize; 3],
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_size(&self, class_id: usize) -> usize {
        self.classes[class_id].samples.len()
    }
}

/// Immutable sample store plus its index. Sample ids are positions in the
/// store.
#[derive(Clone, Debug)]
pub struct Dataset {
    index: DatasetIndex,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Assembles a dataset from per-class image lists; classes keep the given
    /// order as their global ids.
    pub fn from_classes(classes: Vec<(String, Vec<(String, Tensor<f32>)>)>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid(format!(
                "a dataset needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut samples = Vec::new();
        let mut entries = Vec::with_capacity(classes.len());
        let mut shape: Option<[usize; 3]> = None;
        for (class_id, (name, images)) in classes.into_iter().enumerate() {
            if images.is_empty() {
                return Err(Error::invalid(format!("class {name:?} has no samples")));
            }
            let mut ids = Vec::with_capacity(images.len());
            for (source_id, image) in images {
                let s = image.shape();
                if s.len() != 3 || s[0] != 3 {
                    return Err(Error::shape(format!("{source_id}: image shape {s:?} is not [3,H,W]")));
                }
                let s = [s[0], s[1], s[2]];
                match shape {
                    None => shape = Some(s),
                    Some(expected) if expected != s => {
                        return Err(Error::shape(format!(
                            "{source_id}: image shape {s:?} differs from {expected:?}"
                        )))
                    }
                    _ => {}
                }
                if let Some(bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::invalid(format!("{source_id}: pixel value {bad} outside [0,1]")));
                }
                ids.push(samples.len());
                samples.push(Sample {
                    image,
                    class_id,
                    source_id,
                });
            }
            entries.push(ClassEntry { name, samples: ids });
        }
        Ok(Self {
            index: DatasetIndex {
                classes: entries,
                image_shape: shape.expect("at least one sample"),
            },
            samples,
        })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn num_classes(&self) -> usize {
        self.index.classes.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.index.image_shape
    }

    /// Stacks the given samples into a `[N,3,H,W]` batch of precision `F`.
    pub fn batch<F: Float>(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let [c, h, w] = self.index.image_shape;
        let mut data = Vec::with_capacity(ids.len() * c * h * w);
        for &id in ids {
            let s = self
                .samples
                .get(id)
                .ok_or_else(|| Error::invalid(format!("unknown sample id {id}")))?;
            data.extend(s.image.data().iter().map(|&v| F::cast(v as f64)));
        }
        Tensor::new(vec![ids.len(), c, h, w], data)
    }

    /// Writes every sample as `root/<class>/<stem>.ppm` (8-bit quantized).
    pub fn write_ppm_dir(&self, root: &Path) -> Result<()> {
        self.write_dir(root, "ppm", |path, img| write_ppm(path, img))
    }

    /// Writes every sample as `root/<class>/<stem>.mmtn` (lossless f32).
    pub fn write_mmtn_dir(&self, root: &Path) -> Result<()> {
        self.write_dir(root, "mmtn", |path, img| io::save_tensor(path, img))
    }

    fn write_dir(
        &self,
        root: &Path,
        ext: &str,
        write: impl Fn(&Path, &Tensor<f32>) -> Result<()>,
    ) -> Result<()> {
        for class in &self.index.classes {
            let dir = root.join(&class.name);
            std::fs::create_dir_all(&dir)?;
            for (k, &id) in class.samples.iter().enumerate() {
                let path = dir.join(format!("{:05}.{ext}", k));
                write(&path, &self.samples[id].image)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Center-crop to the target aspect ratio and nearest-neighbour resize
    /// every image to `(H, W)`.
    pub resize: Option<(usize, usize)>,
}

/// Loads `root/<class_name>/<file>` where files are `.ppm` (P6) or `.mmtn`.
/// Classes are ordered lexicographically by directory name; files within a
/// class likewise.
pub fn load_directory(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::data(root, format!("cannot read dataset directory: {e}")))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !is_hidden(p))
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::data(
            root,
            format!("expected at least 2 class directories, found {}", class_dirs.len()),
        ));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    for dir in class_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::data(&dir, format!("cannot read class directory: {e}")))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !is_hidden(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(&dir, format!("class directory {name:?} is empty")));
        }
        let mut images = Vec::with_capacity(files.len());
        for file in files {
            let image = load_image(&file)?;
            let image = match opts.resize {
                Some((h, w)) => center_crop_resize(&image, h, w),
                None => image,
            };
            let stem = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push((format!("{name}/{stem}"), image));
        }
        classes.push((name, images));
    }
    Dataset::from_classes(classes).map_err(|e| match e {
        Error::Shape(msg) => Error::data(
            root,
            format!("{msg} (enable resizing to mix image sizes)"),
        ),
        Error::InvalidArgument(msg) => Error::data(root, msg),
        other => other,
    })
}

fn is_hidden(p: &Path) -> bool {
    p.file_name()
        .map(|n| n.to_string_lossy().starts_with('.'))
        .unwrap_or(false)
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => {
            let bytes =
                std::fs::read(path).map_err(|e| Error::data(path, format!("unreadable file: {e}")))?;
            decode_ppm(&bytes, path)
        }
        "mmtn" => io::load_tensor(path)
            .map(|t| t.into_precision::<f32>())
            .map_err(|e| Error::data(path, e.to_string())),
        _ => Err(Error::data(path, "unsupported file type (expected .ppm or .mmtn)")),
    }
}

/// Largest centered crop with the target aspect ratio, then nearest-neighbour
/// sampling to `[3,h,w]`.
pub fn center_crop_resize(image: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = image.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    // crop so that crop_h / crop_w == h / w
    let (crop_h, crop_w) = if sh * w > sw * h {
        ((sw * h / w).max(1), sw)
    } else {
        (sh, (sh * w / h).max(1))
    };
    let (y0, x0) = ((sh - crop_h) / 2, (sw - crop_w) / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let sy = y0 + (y * crop_h) / h;
            for x in 0..w {
                let sx = x0 + (x * crop_w) / w;
                out.push(src[(ch * sh + sy) * sw + sx]);
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}
