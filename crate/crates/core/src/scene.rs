//! Synthetic scene generation for the desk-scale detection lab.
//!
//! A class is a (shape, palette slot) pair: six shapes times three slots,
//! minus two unused combinations, giving sixteen classes. The first eight
//! form the base set and jointly cover every shape and every slot, so the
//! later classes are recombinations of visual factors the base model has
//! seen. Two rendering domains exist: the bright in-domain style and a dark,
//! textured, desaturated cross-domain style with its own object scale range.
//!
//! Determinism contract: a dataset is a pure function of (seed, domain,
//! config, drawable classes, count). The annotation filter is applied after
//! a scene is fully sampled and never changes the random draw order, so two
//! datasets differing only in annotation scope have identical pixels.

use crate::boxes::{iou, BoxCwh};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub type ClassId = u16;

pub const NUM_CLASSES: usize = 16;
pub const NUM_BASE_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

/// (shape, palette slot) for every class id. The base ids 0..8 cover all six
/// shapes and all three slots; ids 8..16 are held out for incremental tasks.
const CLASS_TABLE: [(Shape, u8); NUM_CLASSES] = [
    (Shape::Circle, 0),
    (Shape::Square, 1),
    (Shape::Triangle, 2),
    (Shape::Cross, 0),
    (Shape::Ring, 1),
    (Shape::Bar, 2),
    (Shape::Circle, 1),
    (Shape::Square, 2),
    (Shape::Triangle, 0),
    (Shape::Cross, 1),
    (Shape::Ring, 0),
    (Shape::Bar, 0),
    (Shape::Circle, 2),
    (Shape::Square, 0),
    (Shape::Bar, 1),
    (Shape::Triangle, 1),
];

pub fn class_shape_slot(class: ClassId) -> (Shape, u8) {
    CLASS_TABLE[class as usize]
}

pub fn base_classes() -> Vec<ClassId> {
    (0..NUM_BASE_CLASSES as ClassId).collect()
}

pub fn incremental_classes() -> Vec<ClassId> {
    (NUM_BASE_CLASSES as ClassId..NUM_CLASSES as ClassId).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    CrossDomain,
}

impl Domain {
    /// Dedicated ChaCha stream per domain so the two styles never share a
    /// random sequence even under the same seed.
    pub fn stream(self) -> u64 {
        match self {
            Domain::InDomain => 1,
            Domain::CrossDomain => 2,
        }
    }
}

/// Saturated palette of the in-domain style, one RGB color per slot.
const PALETTE: [[f32; 3]; 3] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.20, 0.30, 0.85],
];

const IN_DOMAIN_BG: [f32; 3] = [0.82, 0.82, 0.80];
const CROSS_DOMAIN_BG: [f32; 3] = [0.13, 0.12, 0.12];

/// Slot color under a domain. The cross-domain palette is pulled toward its
/// luminance and darkened, keeping slots separable while shifting the image
/// statistics far from the in-domain ones.
pub fn slot_color(domain: Domain, slot: u8) -> [f32; 3] {
    let c = PALETTE[slot as usize];
    match domain {
        Domain::InDomain => c,
        Domain::CrossDomain => {
            let lum = 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
            [
                0.5 * (0.4 * c[0] + 0.6 * lum),
                0.5 * (0.4 * c[1] + 0.6 * lum),
                0.5 * (0.4 * c[2] + 0.6 * lum),
            ]
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub domain: Domain,
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Pairwise IoU ceiling between placed objects.
    pub max_overlap: f64,
    /// Upper bound on background distractor count.
    pub max_clutter: usize,
}

impl SceneConfig {
    pub fn pretrain(size: usize) -> Self {
        SceneConfig {
            size,
            domain: Domain::InDomain,
            min_scale: 0.08,
            max_scale: 0.50,
            min_objects: 1,
            max_objects: 6,
            max_overlap: 0.3,
            max_clutter: 3,
        }
    }

    pub fn in_domain(size: usize) -> Self {
        SceneConfig {
            min_scale: 0.20,
            ..SceneConfig::pretrain(size)
        }
    }

    pub fn cross_domain(size: usize) -> Self {
        SceneConfig {
            domain: Domain::CrossDomain,
            min_scale: 0.08,
            max_scale: 0.20,
            ..SceneConfig::pretrain(size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("scene size {} below 16", self.size)));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 0.9) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] invalid",
                self.min_scale, self.max_scale
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range [{}, {}] invalid",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(Error::Config(format!(
                "max_overlap {} outside [0, 1]",
                self.max_overlap
            )));
        }
        Ok(())
    }
}

/// Interleaved RGB image, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&color);
        }
        Image { size, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.size + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = 3 * (y * self.size + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class: ClassId,
    /// Normalized center-form box, tight around the rendered pixels.
    pub bbox: BoxCwh,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    /// Annotated objects only; unannotated objects are still rendered.
    pub objects: Vec<SceneObject>,
}

/// Height/width ratio per shape; squares and triangles jitter theirs.
fn aspect_for(shape: Shape, rng: &mut ChaCha8Rng) -> f64 {
    match shape {
        Shape::Circle | Shape::Ring | Shape::Cross => 1.0,
        Shape::Square => rng.random_range(0.85..1.15),
        Shape::Triangle => rng.random_range(0.70..0.90),
        Shape::Bar => 0.4,
    }
}

/// Point-in-shape test in bbox-normalized coordinates (each axis in
/// [-1, 1]). Every shape touches its bounding box, so ground-truth boxes
/// are tight by construction.
fn inside(shape: Shape, nx: f64, ny: f64) -> bool {
    match shape {
        Shape::Circle => nx * nx + ny * ny <= 1.0,
        Shape::Square | Shape::Bar => true,
        Shape::Triangle => {
            // Apex-truncated: top edge spans 0.3 of the width, widening
            // linearly to the full base.
            let t = (ny + 1.0) / 2.0;
            nx.abs() <= 0.3 + 0.7 * t
        }
        Shape::Cross => nx.abs() <= 0.34 || ny.abs() <= 0.34,
        Shape::Ring => {
            let r2 = nx * nx + ny * ny;
            (0.3025..=1.0).contains(&r2)
        }
    }
}

fn rasterize(img: &mut Image, shape: Shape, cx: f64, cy: f64, w: f64, h: f64, color: [f32; 3]) {
    let size = img.size as f64;
    let x_lo = ((cx - w / 2.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + w / 2.0).ceil().min(size - 1.0)) as usize;
    let y_lo = ((cy - h / 2.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + h / 2.0).ceil().min(size - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let nx = (x as f64 + 0.5 - cx) / (w / 2.0);
            let ny = (y as f64 + 0.5 - cy) / (h / 2.0);
            if nx.abs() <= 1.0 && ny.abs() <= 1.0 && inside(shape, nx, ny) {
                img.set_pixel(x, y, color);
            }
        }
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn render_background(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Image {
    let (base, noise) = match cfg.domain {
        Domain::InDomain => (IN_DOMAIN_BG, 0.02f32),
        Domain::CrossDomain => (CROSS_DOMAIN_BG, 0.05f32),
    };
    let mut img = Image::filled(cfg.size, base);
    for y in 0..cfg.size {
        // Horizontal grain stripes give the cross domain its texture.
        let stripe = match cfg.domain {
            Domain::InDomain => 0.0f32,
            Domain::CrossDomain => {
                if (y / 3) % 2 == 0 {
                    0.03
                } else {
                    -0.03
                }
            }
        };
        for x in 0..cfg.size {
            let n = rng.random_range(-noise..noise);
            let p = img.pixel(x, y);
            img.set_pixel(
                x,
                y,
                [
                    clamp01(p[0] + n + stripe),
                    clamp01(p[1] + n + stripe),
                    clamp01(p[2] + n + stripe),
                ],
            );
        }
    }
    img
}

fn render_clutter(rng: &mut ChaCha8Rng, cfg: &SceneConfig, img: &mut Image) {
    let count = if cfg.max_clutter == 0 {
        0
    } else {
        rng.random_range(0..=cfg.max_clutter)
    };
    let base = match cfg.domain {
        Domain::InDomain => 0.60f32,
        Domain::CrossDomain => 0.22f32,
    };
    for _ in 0..count {
        let gray = clamp01(base + rng.random_range(-0.08..0.08));
        let color = [gray, gray, gray];
        let w = rng.random_range(2.0..6.0);
        let h = rng.random_range(1.0..4.0);
        let cx = rng.random_range(w / 2.0..cfg.size as f64 - w / 2.0);
        let cy = rng.random_range(h / 2.0..cfg.size as f64 - h / 2.0);
        rasterize(img, Shape::Bar, cx, cy, w, h, color);
    }
}

fn range_draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples and renders one scene. Objects come from `drawable`; only those
/// whose class is in `annotate` (or all of them when `annotate` is `None`)
/// appear in the returned annotation list.
pub fn generate_scene(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    drawable: &[ClassId],
    annotate: Option<&[ClassId]>,
) -> Result<Scene> {
    cfg.validate()?;
    if drawable.is_empty() {
        return Err(Error::Contract("generate_scene: no drawable classes".into()));
    }
    let mut img = render_background(rng, cfg);
    render_clutter(rng, cfg, &mut img);

    let target = if cfg.min_objects < cfg.max_objects {
        rng.random_range(cfg.min_objects..=cfg.max_objects)
    } else {
        cfg.min_objects
    };
    let size = cfg.size as f64;
    let mut placed: Vec<(ClassId, Shape, f64, f64, f64, f64)> = Vec::new();
    'slots: for _ in 0..target {
        for _attempt in 0..40 {
            let class = drawable[rng.random_range(0..drawable.len())];
            let (shape, _slot) = class_shape_slot(class);
            let w = range_draw(rng, cfg.min_scale, cfg.max_scale) * size;
            let h = w * aspect_for(shape, rng);
            if w + 2.0 >= size || h + 2.0 >= size {
                continue;
            }
            let cx = range_draw(rng, w / 2.0 + 1.0, size - 1.0 - w / 2.0);
            let cy = range_draw(rng, h / 2.0 + 1.0, size - 1.0 - h / 2.0);
            let cand = BoxCwh::new(cx, cy, w, h);
            let mut ok = true;
            for &(_, _, pcx, pcy, pw, ph) in &placed {
                let prev = BoxCwh::new(pcx, pcy, pw, ph);
                if iou(&cand, &prev)? > cfg.max_overlap {
                    ok = false;
                    break;
                }
            }
            if ok {
                placed.push((class, shape, cx, cy, w, h));
                continue 'slots;
            }
        }
        // Crowded scene: keep what fits instead of retrying forever.
        break;
    }

    let mut objects = Vec::new();
    for &(class, shape, cx, cy, w, h) in &placed {
        let (_, slot) = class_shape_slot(class);
        let base = slot_color(cfg.domain, slot);
        let jitter = rng.random_range(-0.05f32..0.05f32);
        let color = [
            clamp01(base[0] + jitter),
            clamp01(base[1] + jitter),
            clamp01(base[2] + jitter),
        ];
        rasterize(&mut img, shape, cx, cy, w, h, color);
        let keep = annotate.is_none_or(|set| set.contains(&class));
        if keep {
            objects.push(SceneObject {
                class,
                bbox: BoxCwh::new(cx / size, cy / size, w / size, h / size),
            });
        }
    }
    Ok(Scene { image: img, objects })
}

/// Generates `count` scenes from one seeded stream. The stream id comes from
/// the domain so in-domain and cross-domain data never correlate.
pub fn generate_dataset(
    seed: u64,
    cfg: &SceneConfig,
    drawable: &[ClassId],
    annotate: Option<&[ClassId]>,
    count: usize,
) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cfg.domain.stream());
    (0..count)
        .map(|_| generate_scene(&mut rng, cfg, drawable, annotate))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Deterministic 80/20 split by scene index.
pub fn split_of(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Incremental task layout: an ordered partition of the non-base classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    pub groups: Vec<Vec<ClassId>>,
}

impl TaskSchedule {
    /// Parses forms like "4-4" or "4-2-2". Group sizes must be positive and
    /// sum to the number of non-base classes; classes are assigned to groups
    /// in ascending id order.
    pub fn parse(s: &str) -> Result<Self> {
        let avail = NUM_CLASSES - NUM_BASE_CLASSES;
        let mut sizes = Vec::new();
        for part in s.split('-') {
            let n: usize = part
                .parse()
                .map_err(|_| Error::Schedule(format!("bad group size {part:?} in {s:?}")))?;
            if n == 0 {
                return Err(Error::Schedule(format!("zero-sized group in {s:?}")));
            }
            sizes.push(n);
        }
        let total: usize = sizes.iter().sum();
        if total != avail {
            return Err(Error::Schedule(format!(
                "schedule {s:?} covers {total} classes, expected {avail}"
            )));
        }
        let mut next = NUM_BASE_CLASSES as ClassId;
        let mut groups = Vec::new();
        for n in sizes {
            let group: Vec<ClassId> = (next..next + n as ClassId).collect();
            next += n as ClassId;
            groups.push(group);
        }
        Ok(TaskSchedule { groups })
    }

    /// Like [`TaskSchedule::parse`], but a non-zero `class_order_seed`
    /// shuffles which classes land in which group. Group sizes and the
    /// covered class set are unchanged.
    pub fn parse_seeded(s: &str, class_order_seed: u64) -> Result<Self> {
        let mut schedule = Self::parse(s)?;
        if class_order_seed != 0 {
            let mut order: Vec<ClassId> = incremental_classes();
            let mut rng = ChaCha8Rng::seed_from_u64(class_order_seed);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut it = order.into_iter();
            for group in &mut schedule.groups {
                for slot in group.iter_mut() {
                    *slot = it.next().expect("order covers every class");
                }
            }
        }
        Ok(schedule)
    }

    pub fn name(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.len().to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    /// All classes known after finishing task `t` (0-based), base included.
    pub fn classes_through(&self, t: usize) -> Vec<ClassId> {
        let mut out = base_classes();
        for g in self.groups.iter().take(t + 1) {
            out.extend_from_slice(g);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub image: usize,
    pub class: ClassId,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P6\n{} {}\n255\n", img.size, img.size)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let raw = std::fs::read(path)?;
    let bad = |msg: &str| Error::Checkpoint(format!("ppm {}: {msg}", path.display()));
    // Header: three whitespace-separated fields after the magic.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    if raw.len() < 2 || &raw[0..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    pos += 2;
    while fields.len() < 3 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            break;
        }
        fields.push(
            std::str::from_utf8(&raw[start..pos])
                .map_err(|_| bad("non-ascii header"))?
                .to_string(),
        );
    }
    if fields.len() != 3 {
        return Err(bad("truncated header"));
    }
    pos += 1;
    let w: usize = fields[0].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[1].parse().map_err(|_| bad("bad height"))?;
    if w != h {
        return Err(bad("image not square"));
    }
    if fields[2] != "255" {
        return Err(bad("maxval must be 255"));
    }
    let need = w * h * 3;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<f32> = raw[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Image { size: w, data })
}

/// Writes `images/NNNN.ppm` plus `annotations.jsonl` under `dir`.
pub fn dump_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let f = std::fs::File::create(dir.join("annotations.jsonl"))?;
    let mut ann = BufWriter::new(f);
    for (i, scene) in scenes.iter().enumerate() {
        write_ppm(&img_dir.join(format!("{i:04}.ppm")), &scene.image)?;
        for obj in &scene.objects {
            let row = AnnotationRow {
                image: i,
                class: obj.class,
                cx: obj.bbox.cx,
                cy: obj.bbox.cy,
                w: obj.bbox.w,
                h: obj.bbox.h,
            };
            let line = serde_json::to_string(&row)
                .map_err(|e| Error::Checkpoint(format!("annotation encode: {e}")))?;
            writeln!(ann, "{line}")?;
        }
    }
    Ok(())
}

/// Reads a dataset previously written by [`dump_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let img_dir = dir.join("images");
    let mut images = Vec::new();
    loop {
        let path = img_dir.join(format!("{:04}.ppm", images.len()));
        if !path.exists() {
            break;
        }
        images.push(read_ppm(&path)?);
    }
    let mut objects: Vec<Vec<SceneObject>> = vec![Vec::new(); images.len()];
    let f = std::fs::File::open(dir.join("annotations.jsonl"))?;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(&line)
            .map_err(|e| Error::Checkpoint(format!("annotation decode: {e}")))?;
        if row.image >= images.len() {
            return Err(Error::Checkpoint(format!(
                "annotation references image {} of {}",
                row.image,
                images.len()
            )));
        }
        objects[row.image].push(SceneObject {
            class: row.class,
            bbox: BoxCwh::new(row.cx, row.cy, row.w, row.h),
        });
    }
    Ok(images
        .into_iter()
        .zip(objects)
        .map(|(image, objects)| Scene { image, objects })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn class_table_is_consistent() {
        let pairs: BTreeSet<(u8, u8)> = (0..NUM_CLASSES as ClassId)
            .map(|c| {
                let (s, slot) = class_shape_slot(c);
                (s as u8, slot)
            })
            .collect();
        assert_eq!(pairs.len(), NUM_CLASSES);
        // Base classes cover every shape and every slot.
        let base_shapes: BTreeSet<u8> = base_classes()
            .iter()
            .map(|&c| class_shape_slot(c).0 as u8)
            .collect();
        let base_slots: BTreeSet<u8> = base_classes()
            .iter()
            .map(|&c| class_shape_slot(c).1)
            .collect();
        assert_eq!(base_shapes.len(), 6);
        assert_eq!(base_slots.len(), 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::pretrain(64);
        let classes = base_classes();
        let a = generate_dataset(42, &cfg, &classes, None, 4).unwrap();
        let b = generate_dataset(42, &cfg, &classes, None, 4).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image.data, sb.image.data);
            assert_eq!(sa.objects, sb.objects);
        }
        let c = generate_dataset(43, &cfg, &classes, None, 4).unwrap();
        assert_ne!(a[0].image.data, c[0].image.data);
    }

    #[test]
    fn annotation_filter_leaves_pixels_untouched() {
        let cfg = SceneConfig::pretrain(64);
        let classes = base_classes();
        let full = generate_dataset(7, &cfg, &classes, None, 6).unwrap();
        let filtered = generate_dataset(7, &cfg, &classes, Some(&[0, 1]), 6).unwrap();
        for (fa, fb) in full.iter().zip(&filtered) {
            assert_eq!(fa.image.data, fb.image.data);
            for obj in &fb.objects {
                assert!(obj.class == 0 || obj.class == 1);
            }
            let expect: Vec<_> = fa
                .objects
                .iter()
                .filter(|o| o.class == 0 || o.class == 1)
                .collect();
            assert_eq!(expect.len(), fb.objects.len());
        }
    }

    /// Rendered extent of the single object in a clutter-free scene.
    fn lit_extent(img: &Image) -> (usize, usize, usize, usize) {
        let bg = IN_DOMAIN_BG;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..img.size {
            for x in 0..img.size {
                let p = img.pixel(x, y);
                let d = (p[0] - bg[0])
                    .abs()
                    .max((p[1] - bg[1]).abs())
                    .max((p[2] - bg[2]).abs());
                if d > 0.25 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn ground_truth_boxes_are_tight() {
        for class in 0..NUM_CLASSES as ClassId {
            for (lo, hi) in [(0.35, 0.45), (0.10, 0.14)] {
                let cfg = SceneConfig {
                    min_scale: lo,
                    max_scale: hi,
                    min_objects: 1,
                    max_objects: 1,
                    max_clutter: 0,
                    ..SceneConfig::pretrain(64)
                };
                let scenes = generate_dataset(5, &cfg, &[class], None, 3).unwrap();
                for scene in &scenes {
                    assert_eq!(scene.objects.len(), 1);
                    let b = scene.objects[0].bbox;
                    let size = scene.image.size as f64;
                    let (x0, y0, x1, y1) = lit_extent(&scene.image);
                    assert!(x0 != usize::MAX, "class {class}: nothing rendered");
                    let (bx0, by0, bx1, by1) = b.corners();
                    let (bx0, by0, bx1, by1) =
                        (bx0 * size, by0 * size, bx1 * size, by1 * size);
                    assert!(
                        (x0 as f64 - bx0).abs() <= 1.5
                            && (y0 as f64 - by0).abs() <= 1.5
                            && (x1 as f64 + 1.0 - bx1).abs() <= 1.5
                            && (y1 as f64 + 1.0 - by1).abs() <= 1.5,
                        "class {class}: extent ({x0},{y0})-({x1},{y1}) vs box ({bx0:.1},{by0:.1})-({bx1:.1},{by1:.1})"
                    );
                }
            }
        }
    }

    #[test]
    fn class_balance_within_tolerance() {
        let cfg = SceneConfig::pretrain(64);
        let classes = base_classes();
        let scenes = generate_dataset(3, &cfg, &classes, None, 400).unwrap();
        let mut counts = vec![0usize; NUM_BASE_CLASSES];
        let mut total = 0usize;
        for s in &scenes {
            for o in &s.objects {
                counts[o.class as usize] += 1;
                total += 1;
            }
        }
        let mean = total as f64 / NUM_BASE_CLASSES as f64;
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - mean).abs() <= 0.3 * mean,
                "class {c}: {n} objects vs mean {mean:.1}"
            );
        }
    }

    #[test]
    fn domains_are_statistically_separate() {
        let classes = base_classes();
        let in_cfg = SceneConfig::in_domain(64);
        let cross_cfg = SceneConfig::cross_domain(64);
        let a: Vec<f64> = generate_dataset(9, &in_cfg, &classes, None, 48)
            .unwrap()
            .iter()
            .map(|s| s.image.mean_intensity())
            .collect();
        let b: Vec<f64> = generate_dataset(9, &cross_cfg, &classes, None, 48)
            .unwrap()
            .iter()
            .map(|s| s.image.mean_intensity())
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64], m: f64| {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let spread = sd(&a, ma).max(sd(&b, mb));
        assert!(
            (ma - mb).abs() >= 5.0 * spread,
            "domain gap {} vs spread {spread}",
            (ma - mb).abs()
        );
    }

    #[test]
    fn placement_respects_overlap_and_scale() {
        let cfg = SceneConfig::pretrain(64);
        let classes = base_classes();
        let scenes = generate_dataset(13, &cfg, &classes, None, 60).unwrap();
        for s in &scenes {
            assert!(!s.objects.is_empty() && s.objects.len() <= cfg.max_objects);
            for o in &s.objects {
                assert!(o.bbox.w >= cfg.min_scale - 1e-9 && o.bbox.w <= cfg.max_scale + 1e-9);
                assert!(o.bbox.h <= 1.15 * cfg.max_scale + 1e-9);
            }
            for i in 0..s.objects.len() {
                for j in i + 1..s.objects.len() {
                    let ov = iou(&s.objects[i].bbox, &s.objects[j].bbox).unwrap();
                    assert!(ov <= cfg.max_overlap + 1e-9);
                }
            }
        }
    }

    #[test]
    fn schedule_parsing() {
        let s = TaskSchedule::parse("4-4").unwrap();
        assert_eq!(s.groups, vec![vec![8, 9, 10, 11], vec![12, 13, 14, 15]]);
        assert_eq!(s.name(), "4-4");
        let s = TaskSchedule::parse("4-2-2").unwrap();
        assert_eq!(
            s.groups,
            vec![vec![8, 9, 10, 11], vec![12, 13], vec![14, 15]]
        );
        assert_eq!(s.classes_through(0), vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!(TaskSchedule::parse("8").unwrap().groups.len(), 1);
        for bad in ["", "5-4", "0-8", "4-4-x", "9"] {
            assert!(
                matches!(TaskSchedule::parse(bad), Err(Error::Schedule(_))),
                "{bad:?} should fail"
            );
        }
    }

    #[test]
    fn split_is_80_20() {
        let test = (0..100).filter(|&i| split_of(i) == Split::Test).count();
        assert_eq!(test, 20);
        assert_eq!(split_of(4), Split::Test);
        assert_eq!(split_of(0), Split::Train);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::pretrain(32);
        let scenes = generate_dataset(21, &cfg, &base_classes(), None, 3).unwrap();
        dump_dataset(dir.path(), &scenes).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.objects.len(), b.objects.len());
            for (oa, ob) in a.objects.iter().zip(&b.objects) {
                assert_eq!(oa.class, ob.class);
                assert!((oa.bbox.cx - ob.bbox.cx).abs() < 1e-12);
            }
            // Pixels survive u8 quantization within half a step.
            for (pa, pb) in a.image.data.iter().zip(&b.image.data) {
                assert!((pa - pb).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn corrupt_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"P6\n8 8\n255\nshort").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Checkpoint(_))));
    }
}
