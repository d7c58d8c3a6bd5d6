//! Synthetic shapes scenes with exact ground truth for detection and
//! segmentation, Gaussian corruption, and on-disk datasets.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};
use crate::priming::Cue;
use crate::tensor::Tensor;
use crate::training::{GtBox, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

pub const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

impl Shape {
    /// Shape drawn for 1-based `class`.
    pub fn for_class(class: usize) -> Option<Shape> {
        class.checked_sub(1).and_then(|i| SHAPES.get(i)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Whether the point `(dx, dy)` relative to the centre lies inside the
    /// shape at half-extent `s`.
    pub fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
            Shape::Triangle => dy >= -s && dy <= s && dx.abs() <= 0.5 * (dy + s),
            Shape::Cross => {
                let arm = s / 3.0;
                (dx.abs() <= s && dy.abs() <= arm) || (dy.abs() <= s && dx.abs() <= arm)
            }
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= s * s && r2 >= 0.3 * s * s
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub max_objects: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Minimum gap in pixels between object extents.
    pub margin: f64,
    pub max_retries: usize,
    /// Range of object-to-background intensity difference.
    pub contrast: (f64, f64),
    /// Range of the per-scene pixel grain amplitude.
    pub grain: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 5,
            max_objects: 3,
            min_scale: 4.5,
            max_scale: 9.0,
            margin: 2.0,
            max_retries: 200,
            contrast: (0.15, 0.6),
            grain: (0.0, 0.4),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects == 0 {
            return Err(Error::Degenerate("scene config allows no objects".into()));
        }
        if self.n_classes == 0 || self.n_classes > SHAPES.len() {
            return Err(Error::invalid(
                "scene config",
                format!("n_classes must be in 1..={}", SHAPES.len()),
            ));
        }
        if !(self.min_scale >= 2.0 && self.min_scale <= self.max_scale) {
            return Err(Error::invalid("scene config", "need 2 <= min_scale <= max_scale"));
        }
        if 2.0 * self.max_scale + 2.0 > self.image_size as f64 {
            return Err(Error::invalid(
                "scene config",
                format!("objects of scale {} do not fit a {} image", self.max_scale, self.image_size),
            ));
        }
        let (c0, c1) = self.contrast;
        let (g0, g1) = self.grain;
        if !(c0 > 0.0 && c0 < c1 && c1 <= 1.0) || !(g0 >= 0.0 && g0 <= g1 && g1 <= 1.0) {
            return Err(Error::invalid("scene config", "contrast and grain ranges must be ordered within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub center: (f64, f64),
    pub scale: f64,
    /// RGB fill in `[0, 1]`.
    pub fill: [f64; 3],
}

impl SceneObject {
    fn extent(&self) -> BBox {
        let (cx, cy) = self.center;
        BBox::new(cx - self.scale, cy - self.scale, cx + self.scale, cy + self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub texture_seed: u64,
    /// RGB base level.
    pub base: [f64; 3],
    /// Half-width of the uniform per-pixel grain.
    pub grain: f64,
}

/// Everything needed to render one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

fn separated(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x_max + margin <= b.x_min
        || b.x_max + margin <= a.x_min
        || a.y_max + margin <= b.y_min
        || b.y_max + margin <= a.y_min
}

/// Draws object classes, sizes, positions and colours for one scene.
pub fn sample_scene_spec(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size as f64;
    let count = rng.random_range(1..=cfg.max_objects);
    let gray = rng.random_range(0.25..0.6);
    let base = [0, 1, 2].map(|_| gray + rng.random_range(-0.03..0.03));
    let (g0, g1) = cfg.grain;
    let background = Background {
        texture_seed: rng.random(),
        base,
        grain: if g1 > g0 { rng.random_range(g0..g1) } else { g0 },
    };
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(1..=cfg.n_classes);
        // classes share most of the contrast range, either polarity
        let lo = cfg.contrast.0 + 0.01 * (class_id - 1) as f64;
        let contrast = rng.random_range(lo.min(cfg.contrast.1)..=cfg.contrast.1);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let level = gray + sign * contrast;
        let fill = [0, 1, 2].map(|_| (level + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let scale = rng.random_range(cfg.min_scale..=cfg.max_scale);
            let lo = scale + 1.0;
            let hi = size - scale - 1.0;
            let center = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let obj = SceneObject {
                class_id,
                center,
                scale,
                fill,
            };
            if objects.iter().all(|o| separated(&o.extent(), &obj.extent(), cfg.margin)) {
                placed = Some(obj);
                break;
            }
        }
        let obj = placed.ok_or_else(|| {
            Error::Degenerate(format!(
                "could not place object {} of {count} after {} tries (seed {seed})",
                objects.len() + 1,
                cfg.max_retries
            ))
        })?;
        objects.push(obj);
    }
    Ok(SceneSpec {
        image_size: cfg.image_size,
        n_classes: cfg.n_classes,
        objects,
        background,
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes a scene: hard-edged shapes sampled at pixel centres over a
/// faint procedural texture, quantized to 8-bit levels.
pub fn render_scene(spec: &SceneSpec) -> Result<Sample> {
    if spec.objects.is_empty() {
        return Err(Error::Degenerate("scene has no objects".into()));
    }
    let n = spec.image_size;
    let plane = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background.texture_seed);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.05..0.3);
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut img = vec![0.0; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| 0.04 * (fx * px + fy * py + ph).sin())
                .sum();
            for c in 0..3 {
                let g = spec.background.grain;
                let grain = if g > 0.0 { rng.random_range(-g..g) } else { 0.0 };
                img[c * plane + y * n + x] = spec.background.base[c] + tex + grain;
            }
        }
    }
    let mut mask = LabelMap::background(n, n);
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        let shape = Shape::for_class(obj.class_id).ok_or_else(|| {
            Error::invalid("render_scene", format!("no shape for class {}", obj.class_id))
        })?;
        let ext = obj.extent();
        let x0 = ext.x_min.floor().max(0.0) as usize;
        let y0 = ext.y_min.floor().max(0.0) as usize;
        let x1 = (ext.x_max.ceil() as usize).min(n);
        let y1 = (ext.y_max.ceil() as usize).min(n);
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - obj.center.0;
                let dy = y as f64 + 0.5 - obj.center.1;
                if !shape.contains(dx, dy, obj.scale) {
                    continue;
                }
                for c in 0..3 {
                    let i = c * plane + y * n + x;
                    img[i] = obj.fill[c] + (img[i] - spec.background.base[c]);
                }
                mask.set(x, y, obj.class_id as u8);
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
        let (a, b, c, d) = bb.ok_or_else(|| {
            Error::Degenerate(format!("object of class {} covers no pixel", obj.class_id))
        })?;
        boxes.push(GtBox {
            bbox: BBox::new(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64),
            class_id: obj.class_id,
        });
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));
    let classes: Vec<usize> = boxes.iter().map(|b| b.class_id).collect();
    Ok(Sample {
        image: Tensor::from_vec(&[3, n, n], img)?,
        gt_boxes: boxes,
        gt_mask: mask,
        cue: Cue::from_classes(spec.n_classes, &classes)?,
    })
}

/// Samples and renders one scene, cued with all of its classes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Sample> {
    render_scene(&sample_scene_spec(seed, cfg)?)
}

/// Keeps samples whose objects all share one class.
pub fn filter_single_class(data: &[Sample]) -> Vec<Sample> {
    data.iter().filter(|s| s.classes().len() == 1).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-scene seed. Train and test draw from disjoint seed ranges.
pub fn scene_seed(dataset_seed: u64, split: Split, index: u32) -> u64 {
    let tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    (dataset_seed << 33) | (tag << 32) | index as u64
}

/// Which generated scenes a split keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassFilter {
    #[default]
    Any,
    /// Exactly one distinct class (possibly several instances).
    SingleClass,
    /// Exactly this many distinct classes.
    DistinctClasses(usize),
}

impl ClassFilter {
    pub fn accepts(self, s: &Sample) -> bool {
        match self {
            ClassFilter::Any => true,
            ClassFilter::SingleClass => s.classes().len() == 1,
            ClassFilter::DistinctClasses(k) => s.classes().len() == k,
        }
    }
}

/// Generates `count` accepted scenes, scanning scene seeds in order.
pub fn generate_split(
    cfg: &SceneConfig,
    dataset_seed: u64,
    split: Split,
    count: usize,
    filter: ClassFilter,
) -> Result<Vec<Sample>> {
    if let ClassFilter::DistinctClasses(k) = filter {
        if k == 0 || k > cfg.n_classes || k > cfg.max_objects {
            return Err(Error::invalid("generate_split", format!("cannot produce {k}-class scenes")));
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut index: u32 = 0;
    while out.len() < count {
        let s = generate_scene(scene_seed(dataset_seed, split, index), cfg)?;
        if filter.accepts(&s) {
            out.push(s);
        }
        index = index
            .checked_add(1)
            .ok_or_else(|| Error::Degenerate("scene seed range exhausted".into()))?;
    }
    Ok(out)
}

/// Gaussian corruption strength. `sigma` is in image units, where the range
/// `[0, 1]` corresponds to 8-bit `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
}

impl NoiseConfig {
    /// From a standard deviation in 8-bit intensity steps.
    pub fn from_8bit(sigma: f64) -> Self {
        Self { sigma: sigma / 255.0 }
    }
}

/// Draws `len` i.i.d. `N(0, sigma^2)` values.
pub fn gaussian_noise(len: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("gaussian noise", format!("sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok((0..len).map(|_| normal.sample(&mut rng)).collect())
}

/// Adds per-pixel, per-channel Gaussian noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(image: &Tensor, nc: &NoiseConfig, seed: u64) -> Result<Tensor> {
    let noise = gaussian_noise(image.numel(), nc.sigma, seed)?;
    if nc.sigma == 0.0 {
        return Ok(image.clone());
    }
    let data = image
        .data()
        .iter()
        .zip(&noise)
        .map(|(v, e)| (v + e).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.shape(), data)
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    boxes: Vec<(f64, f64, f64, f64, usize)>,
    classes: Vec<usize>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<stem>.png` (RGB), `<stem>_mask.png` (labels) and `<stem>.json`.
pub fn save_sample(dir: &Path, stem: &str, s: &Sample) -> Result<()> {
    let (_, h, w) = s.image.dims3("save_sample")?;
    let plane = h * w;
    let d = s.image.data();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        *px = image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])]);
    }
    let img_path = dir.join(format!("{stem}.png"));
    rgb.save(&img_path)
        .map_err(|e| Error::format("png", format!("{}: {e}", img_path.display())))?;
    let m = &s.gt_mask;
    let mask = image::GrayImage::from_raw(m.width() as u32, m.height() as u32, m.labels().to_vec())
        .expect("mask buffer matches its size");
    let mask_path = dir.join(format!("{stem}_mask.png"));
    mask.save(&mask_path)
        .map_err(|e| Error::format("png", format!("{}: {e}", mask_path.display())))?;
    let meta = SampleMeta {
        boxes: s
            .gt_boxes
            .iter()
            .map(|b| (b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max, b.class_id))
            .collect(),
        classes: s.cue.classes(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string(&meta).expect("metadata serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn load_sample(dir: &Path, stem: &str, n_classes: usize) -> Result<Sample> {
    let img_path = dir.join(format!("{stem}.png"));
    let rgb = image::open(&img_path)
        .map_err(|e| Error::format("png", format!("{}: {e}", img_path.display())))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    let mask_path = dir.join(format!("{stem}_mask.png"));
    let mask = image::open(&mask_path)
        .map_err(|e| Error::format("png", format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    if (mask.width() as usize, mask.height() as usize) != (w, h) {
        return Err(Error::format("dataset", format!("{stem}: mask and image sizes differ")));
    }
    let json_path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text)
        .map_err(|e| Error::format("sample metadata", format!("{}: {e}", json_path.display())))?;
    let gt_boxes = meta
        .boxes
        .iter()
        .map(|&(x0, y0, x1, y1, c)| GtBox {
            bbox: BBox::new(x0, y0, x1, y1),
            class_id: c,
        })
        .collect();
    Ok(Sample {
        image: Tensor::from_vec(&[3, h, w], data)?,
        gt_boxes,
        gt_mask: LabelMap::new(w, h, mask.into_raw())?,
        cue: Cue::from_classes(n_classes, &meta.classes)?,
    })
}

/// A train/test pair as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub image_size: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Writes samples plus `index.csv` (`stem,split`) and `dataset.cfg`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index_path = dir.join("index.csv");
        let mut index = csv::Writer::from_path(&index_path)
            .map_err(|e| Error::format("index.csv", e.to_string()))?;
        index
            .write_record(["stem", "split"])
            .map_err(|e| Error::format("index.csv", e.to_string()))?;
        for split in [Split::Train, Split::Test] {
            for (i, s) in self.split(split).iter().enumerate() {
                let stem = format!("{split}_{i:05}");
                save_sample(dir, &stem, s)?;
                index
                    .write_record([stem.as_str(), split.name()])
                    .map_err(|e| Error::format("index.csv", e.to_string()))?;
            }
        }
        index.flush().map_err(|e| Error::io(&index_path, e))?;
        let cfg_path = dir.join("dataset.cfg");
        let text = format!("n_classes = {}\nimage_size = {}\n", self.n_classes, self.image_size);
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.cfg");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut n_classes = None;
        let mut image_size = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::format("dataset.cfg", format!("bad value in {line:?}")))?;
            match k.trim() {
                "n_classes" => n_classes = Some(v),
                "image_size" => image_size = Some(v),
                _ => {}
            }
        }
        let (Some(n_classes), Some(image_size)) = (n_classes, image_size) else {
            return Err(Error::format("dataset.cfg", "needs n_classes and image_size"));
        };
        let index_path = dir.join("index.csv");
        let mut reader = csv::Reader::from_path(&index_path)
            .map_err(|e| Error::format("index.csv", format!("{}: {e}", index_path.display())))?;
        let mut ds = Dataset {
            n_classes,
            image_size,
            train: Vec::new(),
            test: Vec::new(),
        };
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::format("index.csv", e.to_string()))?;
            let (Some(stem), Some(split)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::format("index.csv", "rows need stem and split"));
            };
            let s = load_sample(dir, stem, n_classes)?;
            match split {
                "train" => ds.train.push(s),
                "test" => ds.test.push(s),
                other => return Err(Error::format("index.csv", format!("unknown split {other:?}"))),
            }
        }
        Ok(ds)
    }
}
