//! Dataset trees of the form `<root>/<category>/<class>/<images>`.

pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrnaError, Result};
use crate::net::image::ImageTensor;
use crate::scalar::Scalar;
use crate::trainer::Sample;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "gif"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub root_category: String,
    /// Paths relative to the dataset root, sorted.
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub root_categories: Vec<String>,
    /// Sorted by (name, root category); the position is the class id.
    pub classes: Vec<ClassEntry>,
    /// Per class, per image; empty until [`split_70_30`].
    pub split: Vec<Vec<Split>>,
    pub seed: Option<u64>,
    /// Files with an image extension that could not be read.
    pub skipped: usize,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn readable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map(|r| r.into_dimensions().is_ok())
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DrnaError::io(dir, e))? {
        out.push(entry.map_err(|e| DrnaError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DrnaError::data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut root_categories = Vec::new();
    let mut classes = Vec::new();
    let mut skipped = 0;
    for cat in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let cat_name = file_name(&cat);
        root_categories.push(cat_name.clone());
        for class_dir in sorted_entries(&cat)?.into_iter().filter(|p| p.is_dir()) {
            let name = file_name(&class_dir);
            let mut images = Vec::new();
            for f in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                if readable(&f) {
                    images.push(PathBuf::from(&cat_name).join(&name).join(file_name(&f)));
                } else {
                    skipped += 1;
                }
            }
            if images.is_empty() {
                return Err(DrnaError::data(format!("class `{cat_name}/{name}` has no readable images")));
            }
            classes.push(ClassEntry {
                name,
                root_category: cat_name.clone(),
                images,
            });
        }
    }
    if classes.is_empty() {
        return Err(DrnaError::data(format!("no class directories under {}", root.display())));
    }
    if skipped > 0 {
        warn!("skipped {skipped} unreadable image files");
    }
    classes.sort_by(|a, b| (&a.name, &a.root_category).cmp(&(&b.name, &b.root_category)));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        root_categories,
        classes,
        split: Vec::new(),
        seed: None,
        skipped,
    })
}

/// Number of training images for a class of `n`: `⌈0.7·n⌉`.
pub fn train_count(n: usize) -> usize {
    (7 * n).div_ceil(10)
}

/// Stratified seeded split; each class's first `⌈0.7·n⌉` shuffled images
/// go to training.
pub fn split_70_30(manifest: &DatasetManifest, seed: u64) -> DatasetManifest {
    let mut out = manifest.clone();
    out.seed = Some(seed);
    out.split = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let n = class.images.len();
            if n == 1 {
                warn!("class `{}` has a single image; its test split is empty", class.name);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(c as u64)));
            let mut split = vec![Split::Test; n];
            for &i in &order[..train_count(n)] {
                split[i] = Split::Train;
            }
            split
        })
        .collect();
    out
}

impl DatasetManifest {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// `(absolute path, class id, global image index)` of one split, in
    /// class then file order. Everything when not yet split and `which` is
    /// `Train`.
    pub fn items(&self, which: Split) -> Vec<(PathBuf, usize, u64)> {
        let mut out = Vec::new();
        let mut index = 0u64;
        for (c, class) in self.classes.iter().enumerate() {
            for (i, p) in class.images.iter().enumerate() {
                let s = self.split.get(c).map(|v| v[i]).unwrap_or(Split::Train);
                if s == which {
                    out.push((self.root.join(p), c, index));
                }
                index += 1;
            }
        }
        out
    }

    /// Tab-separated body: `class_id  class  root_category  split  path`.
    fn body(&self) -> String {
        let mut out = String::new();
        for (c, class) in self.classes.iter().enumerate() {
            for (i, p) in class.images.iter().enumerate() {
                let split = match self.split.get(c).map(|v| v[i]) {
                    Some(Split::Train) => "train",
                    Some(Split::Test) => "test",
                    None => "-",
                };
                let _ = writeln!(
                    out,
                    "{c}\t{}\t{}\t{split}\t{}",
                    class.name,
                    class.root_category,
                    p.display()
                );
            }
        }
        out
    }

    /// SHA-256 of the manifest body, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    /// Manifest file: a `# sha256` header, a `# seed` header, then the body.
    pub fn to_tsv(&self) -> String {
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        format!("# sha256 {}\n# seed {seed}\n{}", self.hash(), self.body())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootStats {
    pub name: String,
    pub classes: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub roots: Vec<RootStats>,
    pub total_classes: usize,
    pub total_images: usize,
    /// Images per class, in class-id order.
    pub per_class: Vec<(String, usize)>,
    /// Number of classes having each image count.
    pub histogram: BTreeMap<usize, usize>,
    pub min_images: usize,
    pub max_images: usize,
    pub mean_images: f64,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let roots = manifest
        .root_categories
        .iter()
        .map(|r| {
            let cls: Vec<&ClassEntry> = manifest.classes.iter().filter(|c| &c.root_category == r).collect();
            RootStats {
                name: r.clone(),
                classes: cls.len(),
                images: cls.iter().map(|c| c.images.len()).sum(),
            }
        })
        .collect();
    let per_class: Vec<(String, usize)> = manifest.classes.iter().map(|c| (c.name.clone(), c.images.len())).collect();
    let mut histogram = BTreeMap::new();
    for (_, n) in &per_class {
        *histogram.entry(*n).or_insert(0) += 1;
    }
    let counts = per_class.iter().map(|p| p.1);
    let total_images = manifest.image_count();
    DatasetStats {
        roots,
        total_classes: per_class.len(),
        total_images,
        min_images: counts.clone().min().unwrap_or(0),
        max_images: counts.max().unwrap_or(0),
        mean_images: if per_class.is_empty() { 0.0 } else { total_images as f64 / per_class.len() as f64 },
        per_class,
        histogram,
    }
}

impl DatasetStats {
    pub fn table(&self) -> String {
        let mut out = String::from("Root category\tClasses\tImages\n");
        for r in &self.roots {
            let _ = writeln!(out, "{}\t{}\t{}", r.name, r.classes, r.images);
        }
        let _ = writeln!(out, "Total\t{}\t{}", self.total_classes, self.total_images);
        let _ = writeln!(
            out,
            "images per class: min {} max {} mean {:.2}",
            self.min_images, self.max_images, self.mean_images
        );
        out
    }
}

/// Decodes to RGB and stretches to `size`×`size` with bilinear filtering.
pub fn load_image<T: Scalar>(path: &Path, size: usize) -> Result<ImageTensor<T>> {
    let img = image::open(path).map_err(|source| DrnaError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(ImageTensor::from_rgb8(size, size, rgb.as_raw()))
}

pub fn load_samples<T: Scalar>(manifest: &DatasetManifest, which: Split, size: usize) -> Result<Vec<Sample<T>>> {
    manifest
        .items(which)
        .into_iter()
        .map(|(path, label, id)| {
            Ok(Sample {
                image: load_image(&path, size)?,
                label,
                id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_png(path: &Path, v: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([v, v, v])).save(path).unwrap();
    }

    fn tree(spec: &[(&str, &str, usize)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (root, class, n) in spec {
            for i in 0..*n {
                write_png(&dir.path().join(root).join(class).join(format!("{i:03}.png")), i as u8);
            }
        }
        dir
    }

    #[test]
    fn single_class() {
        let d = tree(&[("Food", "cola", 10)]);
        let m = load_manifest(d.path()).unwrap();
        assert_eq!(m.classes.len(), 1);
        assert_eq!(m.classes[0].images.len(), 10);
        assert_eq!(m.class_names(), vec!["cola".to_string()]);
        let s = dataset_stats(&m);
        assert_eq!(s.histogram, BTreeMap::from([(10, 1)]));
        assert_eq!((s.min_images, s.max_images, s.mean_images), (10, 10, 10.0));
    }

    #[test]
    fn classes_sorted_across_roots_and_counts_partition() {
        let d = tree(&[("B", "zeta", 3), ("A", "beta", 2), ("B", "alpha", 4), ("A", "gamma", 1)]);
        let m = load_manifest(d.path()).unwrap();
        assert_eq!(m.class_names(), vec!["alpha", "beta", "gamma", "zeta"]);
        assert_eq!(m.root_categories, vec!["A", "B"]);
        let s = dataset_stats(&m);
        assert_eq!(s.roots.iter().map(|r| r.images).sum::<usize>(), s.total_images);
        assert_eq!(s.roots.iter().map(|r| r.classes).sum::<usize>(), s.total_classes);
        assert_eq!(s.total_images, 10);
        assert_eq!(load_manifest(d.path()).unwrap().hash(), m.hash());
    }

    #[test]
    fn empty_class_names_the_class() {
        let d = tree(&[("A", "full", 2)]);
        fs::create_dir_all(d.path().join("A").join("hollow")).unwrap();
        let err = load_manifest(d.path()).unwrap_err().to_string();
        assert!(err.contains("hollow"), "{err}");
    }

    #[test]
    fn unreadable_images_are_skipped() {
        let d = tree(&[("A", "c", 2)]);
        fs::write(d.path().join("A").join("c").join("broken.png"), b"not a png").unwrap();
        let m = load_manifest(d.path()).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.classes[0].images.len(), 2);
    }

    #[test]
    fn split_counts() {
        for (n, train) in [(50, 35), (10, 7), (1, 1), (3, 3), (7, 5)] {
            assert_eq!(train_count(n), train, "n = {n}");
        }
        let d = tree(&[("A", "a", 10), ("A", "b", 1)]);
        let m = split_70_30(&load_manifest(d.path()).unwrap(), 4);
        assert_eq!(m.items(Split::Train).len(), 8);
        assert_eq!(m.items(Split::Test).len(), 3);
    }

    #[test]
    fn split_is_a_partition_and_seed_dependent() {
        let d = tree(&[("A", "a", 20), ("A", "b", 13)]);
        let m = load_manifest(d.path()).unwrap();
        let a = split_70_30(&m, 1);
        let b = split_70_30(&m, 2);
        let ids = |m: &DatasetManifest, s| m.items(s).into_iter().map(|x| x.2).collect::<HashSet<_>>();
        let (tr, te) = (ids(&a, Split::Train), ids(&a, Split::Test));
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len() + te.len(), 33);
        assert_eq!(ids(&b, Split::Train).len(), tr.len());
        assert_ne!(ids(&b, Split::Train), tr);
        assert_eq!(split_70_30(&m, 1), a);
        assert_ne!(a.hash(), b.hash());
        assert!(a.to_tsv().starts_with(&format!("# sha256 {}\n# seed 1\n", a.hash())));
    }

    #[test]
    fn load_image_stretches() {
        let d = tree(&[("A", "a", 1)]);
        let img: ImageTensor<f32> = load_image(&d.path().join("A/a/000.png"), 8).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
    }
}
