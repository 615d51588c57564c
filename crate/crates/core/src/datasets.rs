//! Synthetic colored-shape dataset and the folder layout shared with
//! user-supplied data.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json
//! train.tsv  val.tsv  test.tsv
//! images/<id>.fcr  masks/<id>.fcr
//! ```
//!
//! Each split file has one record per line:
//! `id<TAB>image path<TAB>label<TAB>x0 y0 x1 y1[;x0 y0 x1 y1...]<TAB>mask path or -`.
//! Paths are relative to the root; images may also be PNG or JPEG.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, FcamError, Result};
use crate::evaluation::{mask_extent, BoundingBox};
use crate::raster::{load_raster, save_raster, Raster, RasterMeta};
use crate::tensor::{resample_bilinear, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = FcamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(FcamError::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One labeled image with its localization ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageTensor,
    pub label: usize,
    pub gt_boxes: Vec<BoundingBox>,
    /// Row-major foreground mask at image resolution.
    pub gt_mask: Option<Vec<bool>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub splits: Vec<SplitInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub split: Split,
    pub file: String,
    pub count: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Diamond];

    fn name(&self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Area of the shape with half-extent `r`, divided by `r²`.
    fn area_factor(&self) -> f64 {
        match self {
            Shape::Disk => std::f64::consts::PI,
            Shape::Square => 4.0,
            Shape::Triangle | Shape::Diamond => 2.0,
        }
    }

    /// Whether the offset `(dx, dy)` from the center lies inside.
    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at +r
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
];

/// Class `k` as a (shape, color) pair. The first four classes differ in both.
fn class_pair(k: usize) -> (Shape, usize) {
    let s = k % Shape::ALL.len();
    (Shape::ALL[s], (s + k / Shape::ALL.len()) % COLORS.len())
}

pub fn max_synthetic_classes() -> usize {
    Shape::ALL.len() * COLORS.len()
}

pub fn synthetic_class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| {
            let (shape, color) = class_pair(k);
            format!("{}_{}", COLORS[color].0, shape.name())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub min_area: f64,
    pub max_area: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            image_size: 64,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 20,
            min_area: 0.05,
            max_area: 0.40,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FcamError::InvalidArgument("need at least two classes".into()));
        }
        if self.classes > max_synthetic_classes() {
            return Err(FcamError::InvalidArgument(format!(
                "{} classes requested but only {} shape/color pairs exist",
                self.classes,
                max_synthetic_classes()
            )));
        }
        if self.image_size < 32 {
            return Err(FcamError::InvalidArgument("image size must be at least 32".into()));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 0.5) {
            return Err(FcamError::InvalidArgument(format!(
                "area range [{}, {}] must satisfy 0 < min < max <= 0.5",
                self.min_area, self.max_area
            )));
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Low-frequency muted background: a coarse random color grid upsampled
/// bilinearly, plus faint per-pixel noise.
fn background<R: Rng>(size: usize, rng: &mut R) -> Vec<f32> {
    let grid = 5;
    let mut coarse = vec![0.0f32; 3 * grid * grid];
    for p in 0..grid * grid {
        let gray = rng.random_range(0.35f32..0.65);
        for c in 0..3 {
            coarse[c * grid * grid + p] = gray + rng.random_range(-0.08f32..0.08);
        }
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = &coarse[c * grid * grid..(c + 1) * grid * grid];
        out.extend(resample_bilinear(plane, grid, grid, size, size));
    }
    for v in &mut out {
        *v = (*v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
    }
    out
}

fn synthetic_sample(cfg: &SyntheticConfig, class: usize, stream: u64) -> (ImageTensor, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n = cfg.image_size;
    let (shape, color) = class_pair(class);
    let mut data = background(n, &mut rng);
    let mask = loop {
        let area = rng.random_range(cfg.min_area..cfg.max_area) * (n * n) as f64;
        let r = (area / shape.area_factor()).sqrt();
        let cx = rng.random_range(r..n as f64 - r);
        let cy = rng.random_range(r..n as f64 - r);
        let mask: Vec<bool> = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
                shape.contains(x - cx, y - cy, r)
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if frac >= cfg.min_area && frac <= cfg.max_area {
            break mask;
        }
    };
    let base = COLORS[color].1;
    let tint: [f32; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0));
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            data[c * n * n + p] = (tint[c] + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
        }
    }
    (ImageTensor::new(n, n, data).expect("values clamped"), mask)
}

/// Generates records in memory. Classes are interleaved within each split.
pub fn synthetic_records(cfg: &SyntheticConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut stream = 0u64;
    for split in Split::ALL {
        for i in 0..cfg.per_class(split) {
            for class in 0..cfg.classes {
                let (image, mask) = synthetic_sample(cfg, class, stream);
                stream += 1;
                let b = mask_extent(&mask, cfg.image_size);
                out.push(SampleRecord {
                    id: format!("{}_{class:02}_{i:04}", split.as_str()),
                    image,
                    label: class,
                    gt_boxes: vec![b],
                    gt_mask: Some(mask),
                    split,
                });
            }
        }
    }
    Ok(out)
}

fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {}", b.x0, b.y0, b.x1, b.y1))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_boxes(s: &str) -> std::result::Result<Vec<BoundingBox>, String> {
    s.split(';')
        .map(|part| {
            let v: Vec<usize> = part
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| format!("box `{part}`: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != 4 {
                return Err(format!("box `{part}` needs four coordinates"));
            }
            BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
        })
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes a synthetic dataset under `root` and returns its manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<DatasetManifest> {
    let records = synthetic_records(cfg)?;
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut splits = Vec::new();
    for split in Split::ALL {
        let mut lines = String::new();
        let mut count = 0;
        for r in records.iter().filter(|r| r.split == split) {
            let img_rel = format!("images/{}.fcr", r.id);
            let mask_rel = format!("masks/{}.fcr", r.id);
            save_raster(
                &root.join(&img_rel),
                &Raster::from(&r.image),
                &RasterMeta {
                    class_id: Some(r.label),
                    normalized: true,
                    ..Default::default()
                },
            )?;
            let mask = r.gt_mask.as_ref().expect("synthetic records carry masks");
            save_raster(
                &root.join(&mask_rel),
                &Raster::new(
                    1,
                    r.image.height(),
                    r.image.width(),
                    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                )?,
                &RasterMeta {
                    class_id: Some(r.label),
                    encoding: Some("binary mask: 1 foreground, 0 background".into()),
                    ..Default::default()
                },
            )?;
            lines.push_str(&format!(
                "{}\t{img_rel}\t{}\t{}\t{mask_rel}\n",
                r.id,
                r.label,
                format_boxes(&r.gt_boxes)
            ));
            count += 1;
        }
        let file = format!("{}.tsv", split.as_str());
        write_file(&root.join(&file), lines.as_bytes())?;
        splits.push(SplitInfo { split, file, count });
    }
    let manifest = DatasetManifest {
        name: "synthetic-shapes".into(),
        classes: synthetic_class_names(cfg.classes),
        splits,
        synthetic: Some(cfg.clone()),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// One unparsed line of a split file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub id: String,
    pub image_path: String,
    pub label: usize,
    pub boxes: Vec<BoundingBox>,
    pub mask_path: Option<String>,
}

fn parse_entry(line: &str, line_no: usize, classes: usize) -> Result<RecordEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    let id = fields
        .first()
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("line {line_no}"));
    let fail = |message: String| FcamError::Record {
        id: id.clone(),
        message,
    };
    if fields.len() != 5 {
        return Err(fail(format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let label: usize = fields[2]
        .parse()
        .map_err(|e| fail(format!("label `{}`: {e}", fields[2])))?;
    if label >= classes {
        return Err(fail(format!("label {label} outside 0..{classes}")));
    }
    let boxes = parse_boxes(fields[3]).map_err(fail)?;
    let mask_path = match fields[4] {
        "-" | "" => None,
        p => Some(p.to_string()),
    };
    Ok(RecordEntry {
        id: id.clone(),
        image_path: fields[1].to_string(),
        label,
        boxes,
        mask_path,
    })
}

fn is_raster(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "fcr")
}

/// Reads a raster or a PNG/JPEG file as an RGB image in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    if is_raster(path) {
        let (raster, _) = load_raster(path)?;
        return ImageTensor::try_from(raster);
    }
    let img = image::open(path)
        .map_err(|e| FcamError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

/// Reads a single-channel mask; values above one half count as foreground.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    if is_raster(path) {
        let (r, _) = load_raster(path)?;
        if r.channels != 1 {
            return Err(FcamError::ShapeMismatch {
                expected: "1-channel mask".into(),
                actual: format!("{} channels", r.channels),
            });
        }
        return Ok((r.height, r.width, r.data.iter().map(|&v| v > 0.5).collect()));
    }
    let img = image::open(path)
        .map_err(|e| FcamError::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    Ok((
        img.height() as usize,
        img.width() as usize,
        img.pixels().map(|p| p.0[0] > 127).collect(),
    ))
}

/// A dataset root with a validated manifest; records load lazily.
#[derive(Debug, Clone)]
pub struct FolderDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl FolderDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(FcamError::DatasetNotFound(root.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.classes.len() < 2 {
            return Err(FcamError::Config("manifest needs at least two classes".into()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Parsed split file entries, without touching image files.
    pub fn entries(&self, split: Split) -> Result<Vec<RecordEntry>> {
        let Some(info) = self.manifest.splits.iter().find(|s| s.split == split) else {
            return Ok(Vec::new());
        };
        let path = self.root.join(&info.file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_entry(l, i + 1, self.num_classes()))
            .collect()
    }

    /// Record counts per split as listed in the split files.
    pub fn split_sizes(&self) -> Result<Vec<(Split, usize)>> {
        Split::ALL
            .iter()
            .map(|&s| Ok((s, self.entries(s)?.len())))
            .collect()
    }

    pub fn load_entry(&self, entry: &RecordEntry, split: Split) -> Result<SampleRecord> {
        let wrap = |e: FcamError| match e {
            e @ FcamError::Record { .. } => e,
            other => FcamError::Record {
                id: entry.id.clone(),
                message: other.to_string(),
            },
        };
        let image = load_image(&self.root.join(&entry.image_path)).map_err(wrap)?;
        let gt_mask = match &entry.mask_path {
            None => None,
            Some(p) => {
                let (h, w, m) = load_mask(&self.root.join(p)).map_err(wrap)?;
                if (h, w) != (image.height(), image.width()) {
                    return Err(FcamError::Record {
                        id: entry.id.clone(),
                        message: format!(
                            "mask is {h}x{w} but image is {}x{}",
                            image.height(),
                            image.width()
                        ),
                    });
                }
                Some(m)
            }
        };
        for b in &entry.boxes {
            if b.x1 > image.width() || b.y1 > image.height() {
                return Err(FcamError::Record {
                    id: entry.id.clone(),
                    message: format!("box {b:?} exceeds the image"),
                });
            }
        }
        Ok(SampleRecord {
            id: entry.id.clone(),
            image,
            label: entry.label,
            gt_boxes: entry.boxes.clone(),
            gt_mask,
            split,
        })
    }

    /// Lazily loads the records of a split.
    pub fn records(&self, split: Split) -> Result<impl Iterator<Item = Result<SampleRecord>> + '_> {
        let entries = self.entries(split)?;
        Ok(entries.into_iter().map(move |e| self.load_entry(&e, split)))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        self.records(split)?.collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            classes: 3,
            image_size: 32,
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn records_are_deterministic() {
        assert_eq!(synthetic_records(&small()).unwrap(), synthetic_records(&small()).unwrap());
        let other = SyntheticConfig { seed: 8, ..small() };
        assert_ne!(synthetic_records(&small()).unwrap(), synthetic_records(&other).unwrap());
    }

    #[test]
    fn masks_boxes_and_areas_agree() {
        let cfg = small();
        for r in synthetic_records(&cfg).unwrap() {
            let mask = r.gt_mask.as_ref().unwrap();
            assert_eq!(r.gt_boxes, vec![mask_extent(mask, 32)]);
            let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            assert!(frac >= cfg.min_area && frac <= cfg.max_area, "{}: {frac}", r.id);
        }
    }

    #[test]
    fn classes_are_balanced() {
        let recs = synthetic_records(&small()).unwrap();
        for split in Split::ALL {
            for class in 0..3 {
                let n = recs.iter().filter(|r| r.split == split && r.label == class).count();
                assert_eq!(n, small().per_class(split));
            }
        }
    }

    #[test]
    fn class_pairs_unique() {
        let names = synthetic_class_names(max_synthetic_classes());
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let cfg = SyntheticConfig {
            classes: 17,
            ..small()
        };
        assert!(synthetic_records(&cfg).is_err());
    }

    #[test]
    fn parse_entry_errors_name_record() {
        let err = parse_entry("img_7\ta.fcr\t1\t0 0 x 3\t-", 1, 3).unwrap_err();
        assert!(err.to_string().contains("img_7"), "{err}");
        let err = parse_entry("img_8\ta.fcr\t9\t0 0 1 1\t-", 1, 3).unwrap_err();
        assert!(err.to_string().contains("img_8"));
        let ok = parse_entry("a\tb.png\t2\t0 0 4 4;1 1 2 2\t-", 1, 3).unwrap();
        assert_eq!(ok.boxes.len(), 2);
        assert_eq!(ok.mask_path, None);
    }
}
