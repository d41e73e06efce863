//! Procedural logo-like dataset: one class glyph (a binary cell pattern on a
//! solid plate) composited over a textured, cluttered background.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, DatasetManifest};
use crate::error::{DrnaError, Result};
use crate::trainer::splitmix;

pub const ROOT_CATEGORY: &str = "Synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub canvas: usize,
    /// Glyph patterns are `glyph_cells`×`glyph_cells` binary grids.
    pub glyph_cells: usize,
    /// Expected clutter items per image, divided by 8.
    pub clutter_density: f64,
    /// Glyph plate side as a fraction of the canvas side.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// 0 keeps every color at its class or texture default, 1 draws it uniformly.
    pub color_jitter: f64,
    /// Size of the background texture pool.
    pub textures: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            images_per_class: 60,
            canvas: 64,
            glyph_cells: 4,
            clutter_density: 0.5,
            scale_min: 0.25,
            scale_max: 0.35,
            rotation_deg: 10.0,
            color_jitter: 1.0,
            textures: 4,
            seed: 0,
        }
    }
}

const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.60;

impl SyntheticSpec {
    const KEYS: [&'static str; 11] = [
        "classes",
        "images_per_class",
        "canvas",
        "glyph_cells",
        "clutter_density",
        "scale_min",
        "scale_max",
        "rotation_deg",
        "color_jitter",
        "textures",
        "seed",
    ];

    fn value_of(&self, key: &str) -> String {
        match key {
            "classes" => self.classes.to_string(),
            "images_per_class" => self.images_per_class.to_string(),
            "canvas" => self.canvas.to_string(),
            "glyph_cells" => self.glyph_cells.to_string(),
            "clutter_density" => self.clutter_density.to_string(),
            "scale_min" => self.scale_min.to_string(),
            "scale_max" => self.scale_max.to_string(),
            "rotation_deg" => self.rotation_deg.to_string(),
            "color_jitter" => self.color_jitter.to_string(),
            "textures" => self.textures.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DrnaError::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || DrnaError::config(format!("invalid value `{v}` for key `{k}`"));
            match k {
                "classes" => s.classes = v.parse().map_err(|_| bad())?,
                "images_per_class" => s.images_per_class = v.parse().map_err(|_| bad())?,
                "canvas" => s.canvas = v.parse().map_err(|_| bad())?,
                "glyph_cells" => s.glyph_cells = v.parse().map_err(|_| bad())?,
                "clutter_density" => s.clutter_density = v.parse().map_err(|_| bad())?,
                "scale_min" => s.scale_min = v.parse().map_err(|_| bad())?,
                "scale_max" => s.scale_max = v.parse().map_err(|_| bad())?,
                "rotation_deg" => s.rotation_deg = v.parse().map_err(|_| bad())?,
                "color_jitter" => s.color_jitter = v.parse().map_err(|_| bad())?,
                "textures" => s.textures = v.parse().map_err(|_| bad())?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                other => return Err(DrnaError::config(format!("unknown synthetic spec key `{other}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.value_of(k));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, why: &str| Err(DrnaError::config(format!("key `{k}`: {why}")));
        if self.classes == 0 {
            return fail("classes", "must be at least 1");
        }
        if self.images_per_class == 0 {
            return fail("images_per_class", "must be at least 1");
        }
        if self.canvas < 8 {
            return fail("canvas", "must be at least 8");
        }
        if self.glyph_cells < 2 {
            return fail("glyph_cells", "must be at least 2");
        }
        let patterns = 1u128 << (self.glyph_cells * self.glyph_cells).min(100);
        if (self.classes as u128) * 4 > patterns {
            return fail("glyph_cells", "too few cells for the number of classes");
        }
        if !(self.clutter_density.is_finite() && self.clutter_density >= 0.0) {
            return fail("clutter_density", "must be non-negative");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return fail("scale_min", "must satisfy 0 < scale_min <= scale_max");
        }
        if self.scale_min * self.scale_min < MIN_AREA || self.scale_max * self.scale_max > MAX_AREA {
            return fail("scale_max", "glyph area must stay within 5% and 60% of the canvas");
        }
        if !(0.0..=45.0).contains(&self.rotation_deg) {
            return fail("rotation_deg", "must lie in [0, 45]");
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return fail("color_jitter", "must lie in [0, 1]");
        }
        if self.textures == 0 {
            return fail("textures", "must be at least 1");
        }
        Ok(())
    }

    pub fn class_name(class: usize) -> String {
        format!("glyph_{class:02}")
    }
}

/// Where and how the class glyph was drawn in one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphPlacement {
    pub class: usize,
    pub center: (f64, f64),
    pub side: f64,
    /// Radians.
    pub angle: f64,
    pub foreground: [u8; 3],
    pub plate: [u8; 3],
}

#[derive(Clone, Copy, Debug)]
enum TextureKind {
    Stripes,
    Gradient,
    Checker,
    Diagonal,
}

#[derive(Clone, Copy, Debug)]
struct Texture {
    kind: TextureKind,
    a: [f64; 3],
    b: [f64; 3],
    period: f64,
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parts.iter().fold(0x0123_4567_89ab_cdef, |acc, &p| splitmix(acc ^ p)))
}

fn rand_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Plates are light and glyph cells dark.
fn plate_and_ink(c: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let plate = c.map(|v| 0.55 + 0.45 * v);
    (plate, plate.map(|v| v * 0.2))
}

/// Distinct random patterns, one per class, each with between a third and
/// two thirds of its cells set and differing from every other in at least
/// two cells.
pub fn class_patterns(spec: &SyntheticSpec) -> Vec<Vec<bool>> {
    let n = spec.glyph_cells * spec.glyph_cells;
    let mut rng = rng_for(&[spec.seed, 1]);
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(spec.classes);
    let mut attempts = 0usize;
    while out.len() < spec.classes {
        attempts += 1;
        let p: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let on = p.iter().filter(|&&b| b).count();
        let balanced = 3 * on >= n && 3 * on <= 2 * n;
        let separated = out
            .iter()
            .all(|q| q.iter().zip(&p).filter(|(a, b)| a != b).count() >= 2);
        if (balanced || attempts > 10_000) && (separated || attempts > 100_000) {
            out.push(p);
        }
    }
    out
}

fn textures(spec: &SyntheticSpec) -> Vec<Texture> {
    let mut rng = rng_for(&[spec.seed, 2]);
    (0..spec.textures)
        .map(|i| Texture {
            kind: [TextureKind::Stripes, TextureKind::Gradient, TextureKind::Checker, TextureKind::Diagonal][i % 4],
            a: rand_color(&mut rng),
            b: rand_color(&mut rng),
            period: rng.gen_range(4.0..16.0),
        })
        .collect()
}

fn texture_at(t: &Texture, x: f64, y: f64, size: f64) -> [f64; 3] {
    let w = match t.kind {
        TextureKind::Stripes => ((x / t.period).floor() as i64).rem_euclid(2) as f64,
        TextureKind::Gradient => x / size,
        TextureKind::Checker => (((x / t.period).floor() + (y / t.period).floor()) as i64).rem_euclid(2) as f64,
        TextureKind::Diagonal => (0.5 + 0.5 * ((x + y) * std::f64::consts::PI / t.period).sin()).round(),
    };
    lerp(t.a, t.b, w)
}

/// Cell of the plate under pixel `(px, py)`, or `None` outside the plate.
fn plate_cell(cells: usize, p: &GlyphPlacement, px: usize, py: usize) -> Option<usize> {
    let (x, y) = (px as f64 + 0.5 - p.center.0, py as f64 + 0.5 - p.center.1);
    let (s, c) = p.angle.sin_cos();
    let u = x * c + y * s + p.side / 2.0;
    let v = -x * s + y * c + p.side / 2.0;
    if u < 0.0 || v < 0.0 || u >= p.side || v >= p.side {
        return None;
    }
    let col = ((u / p.side * cells as f64) as usize).min(cells - 1);
    let row = ((v / p.side * cells as f64) as usize).min(cells - 1);
    Some(row * cells + col)
}

fn draw_plate(img: &mut RgbImage, cells: usize, pattern: &[bool], p: &GlyphPlacement) {
    let size = img.width() as usize;
    for py in 0..size {
        for px in 0..size {
            if let Some(cell) = plate_cell(cells, p, px, py) {
                let c = if pattern[cell] { p.foreground } else { p.plate };
                img.put_pixel(px as u32, py as u32, Rgb(c));
            }
        }
    }
}

fn random_placement<R: Rng>(spec: &SyntheticSpec, rng: &mut R, class: usize, side_scale: f64, base: [f64; 3]) -> GlyphPlacement {
    let size = spec.canvas as f64;
    let frac = if spec.scale_max > spec.scale_min {
        rng.gen_range(spec.scale_min..=spec.scale_max)
    } else {
        spec.scale_min
    };
    let side = frac * size * side_scale;
    let angle = if spec.rotation_deg > 0.0 {
        rng.gen_range(-spec.rotation_deg..=spec.rotation_deg).to_radians()
    } else {
        0.0
    };
    let half = side / 2.0 * (angle.cos().abs() + angle.sin().abs());
    let lo = half.ceil();
    let hi = (size - half).floor().max(lo);
    let cx = rng.gen_range(lo..=hi).round();
    let cy = rng.gen_range(lo..=hi).round();
    let (plate, ink) = plate_and_ink(lerp(base, rand_color(rng), spec.color_jitter));
    GlyphPlacement {
        class,
        center: (cx, cy),
        side,
        angle,
        foreground: to_u8(ink),
        plate: to_u8(plate),
    }
}

/// Renders image `index` of `class`. Deterministic in `(spec, class, index)`.
pub fn render(spec: &SyntheticSpec, patterns: &[Vec<bool>], class: usize, index: usize) -> (RgbImage, GlyphPlacement) {
    let size = spec.canvas;
    let pool = textures(spec);
    let mut rng = rng_for(&[spec.seed, 3, class as u64, index as u64]);
    let mut tex = pool[rng.gen_range(0..pool.len())];
    tex.a = lerp(tex.a, rand_color(&mut rng), spec.color_jitter);
    tex.b = lerp(tex.b, rand_color(&mut rng), spec.color_jitter);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let c = texture_at(&tex, x as f64 + 0.5, y as f64 + 0.5, size as f64);
            img.put_pixel(x as u32, y as u32, Rgb(to_u8(c)));
        }
    }
    let expected = spec.clutter_density * 8.0;
    let items = expected.floor() as usize + usize::from(rng.gen_bool(expected.fract()));
    for _ in 0..items {
        if rng.gen_bool(0.5) {
            let w = rng.gen_range(2..=size / 5);
            let h = rng.gen_range(2..=size / 5);
            let x0 = rng.gen_range(0..size - w);
            let y0 = rng.gen_range(0..size - h);
            let c = Rgb(to_u8(rand_color(&mut rng)));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        } else {
            let n = spec.glyph_cells * spec.glyph_cells;
            let pattern: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let base = rand_color(&mut rng);
            let scale = rng.gen_range(0.5..0.8);
            let p = random_placement(spec, &mut rng, usize::MAX, scale, base);
            draw_plate(&mut img, spec.glyph_cells, &pattern, &p);
        }
    }
    let base = rand_color(&mut rng_for(&[spec.seed, 4, class as u64]));
    let placement = random_placement(spec, &mut rng, class, 1.0, base);
    draw_plate(&mut img, spec.glyph_cells, &patterns[class], &placement);
    (img, placement)
}

/// Pixels covered by the glyph plate, row-major.
pub fn glyph_mask(spec: &SyntheticSpec, p: &GlyphPlacement) -> Vec<bool> {
    let size = spec.canvas;
    (0..size * size)
        .map(|i| plate_cell(spec.glyph_cells, p, i % size, i / size).is_some())
        .collect()
}

/// Whether every pixel under the re-rendered glyph mask carries the class
/// glyph's color.
pub fn glyph_present(spec: &SyntheticSpec, patterns: &[Vec<bool>], img: &RgbImage, p: &GlyphPlacement) -> bool {
    let size = spec.canvas;
    (0..size * size).all(|i| match plate_cell(spec.glyph_cells, p, i % size, i / size) {
        Some(cell) => {
            let want = if patterns[p.class][cell] { p.foreground } else { p.plate };
            img.get_pixel((i % size) as u32, (i / size) as u32).0 == want
        }
        None => true,
    })
}

/// Writes the dataset as `out/Synthetic/glyph_XX/XXXX.png` and loads its
/// manifest. Refuses a non-empty `out` unless `overwrite`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path, overwrite: bool) -> Result<DatasetManifest> {
    spec.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| DrnaError::io(out, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(DrnaError::config(format!(
                "{} exists and is not empty; pass the overwrite flag to replace it",
                out.display()
            )));
        }
        let root = out.join(ROOT_CATEGORY);
        if root.exists() {
            fs::remove_dir_all(&root).map_err(|e| DrnaError::io(&root, e))?;
        }
    }
    let patterns = class_patterns(spec);
    for class in 0..spec.classes {
        let dir = out.join(ROOT_CATEGORY).join(SyntheticSpec::class_name(class));
        fs::create_dir_all(&dir).map_err(|e| DrnaError::io(&dir, e))?;
        for i in 0..spec.images_per_class {
            let (img, _) = render(spec, &patterns, class, i);
            let path = dir.join(format!("{i:04}.png"));
            img.save(&path).map_err(|source| DrnaError::Image { path, source })?;
        }
    }
    let spec_path = out.join("synthetic_spec.txt");
    fs::write(&spec_path, spec.echo()).map_err(|e| DrnaError::io(&spec_path, e))?;
    load_manifest(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            images_per_class: 4,
            canvas: 32,
            ..Default::default()
        }
    }

    #[test]
    fn spec_parse_and_echo_round_trip() {
        let s = small();
        assert_eq!(SyntheticSpec::parse(&s.echo()).unwrap(), s);
        assert!(SyntheticSpec::parse("bogus = 1").unwrap_err().to_string().contains("bogus"));
        assert!(SyntheticSpec::parse("scale_min = 0.1").is_err());
        assert!(SyntheticSpec::parse("scale_max = 0.9").is_err());
    }

    #[test]
    fn patterns_are_distinct() {
        let p = class_patterns(&SyntheticSpec::default());
        for i in 0..p.len() {
            for j in 0..i {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn glyph_present_in_every_image_and_area_in_range() {
        let s = SyntheticSpec {
            clutter_density: 2.0,
            ..small()
        };
        let patterns = class_patterns(&s);
        for c in 0..s.classes {
            for i in 0..s.images_per_class {
                let (img, p) = render(&s, &patterns, c, i);
                assert!(glyph_present(&s, &patterns, &img, &p));
                let area = glyph_mask(&s, &p).iter().filter(|&&b| b).count() as f64 / (32.0 * 32.0);
                assert!((0.03..=0.62).contains(&area), "{area}");
            }
        }
    }

    #[test]
    fn degenerate_spec_differs_only_by_position() {
        let s = SyntheticSpec {
            clutter_density: 0.0,
            scale_min: 0.3,
            scale_max: 0.3,
            rotation_deg: 0.0,
            color_jitter: 0.0,
            textures: 1,
            ..small()
        };
        let patterns = class_patterns(&s);
        let (a, pa) = render(&s, &patterns, 1, 0);
        let (b, pb) = render(&s, &patterns, 1, 1);
        assert_eq!((pa.side, pa.angle, pa.foreground, pa.plate), (pb.side, pb.angle, pb.foreground, pb.plate));
        let shift = |img: &RgbImage, p: &GlyphPlacement| {
            let (x0, y0) = (p.center.0 - p.side / 2.0, p.center.1 - p.side / 2.0);
            let side = p.side as u32;
            let mut v = Vec::new();
            for y in 0..side {
                for x in 0..side {
                    v.push(img.get_pixel(x0 as u32 + x, y0 as u32 + y).0);
                }
            }
            v
        };
        assert_eq!(shift(&a, &pa), shift(&b, &pb));
    }

    #[test]
    fn generation_is_reproducible_and_guarded() {
        let s = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&s, d1.path(), false).unwrap();
        let m2 = generate_synthetic(&s, d2.path(), false).unwrap();
        assert_eq!(m1.image_count(), 12);
        assert_eq!(m1.classes.len(), 3);
        assert_eq!(m1.hash(), m2.hash());
        for class in &m1.classes {
            for p in &class.images {
                assert_eq!(fs::read(d1.path().join(p)).unwrap(), fs::read(d2.path().join(p)).unwrap());
            }
        }
        assert!(matches!(generate_synthetic(&s, d1.path(), false), Err(DrnaError::Config(_))));
        assert_eq!(generate_synthetic(&s, d1.path(), true).unwrap().hash(), m1.hash());
    }
}
