//! Corpus ingestion, palette masks, balanced subset plans and the synthetic corpus.
//!
//! Corpus layout on disk:
//!
//! ```text
//! <root>/metadata.csv   id,image_path,mask_path,tone_bin,malignant,disease
//! <root>/images/…       RGB(A) images
//! <root>/masks/…        RGBA palette masks (optional per row)
//! ```
//!
//! Mask palette (RGBA): lesion `(255,0,0,255)`, skin `(0,255,0,255)`, marker
//! `(128,0,128,255)`, ruler `(0,0,255,255)`. Any pixel with alpha 0 is background.
//! Class indices are background 0, lesion 1, skin 2, marker 3, ruler 4.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::image_to_array;
use crate::error::{param, Error, Issue, Result};

pub const BACKGROUND: u8 = 0;
pub const LESION: u8 = 1;
pub const SKIN: u8 = 2;
pub const MARKER: u8 = 3;
pub const RULER: u8 = 4;
pub const CLASS_NAMES: [&str; 5] = ["background", "lesion", "skin", "marker", "ruler"];

pub const METADATA_HEADER: [&str; 6] = ["id", "image_path", "mask_path", "tone_bin", "malignant", "disease"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToneBin {
    #[serde(rename = "I-II")]
    Light,
    #[serde(rename = "III-IV")]
    Medium,
    #[serde(rename = "V-VI")]
    Dark,
}

impl ToneBin {
    pub const ALL: [ToneBin; 3] = [ToneBin::Light, ToneBin::Medium, ToneBin::Dark];

    pub fn label(self) -> &'static str {
        match self {
            ToneBin::Light => "I-II",
            ToneBin::Medium => "III-IV",
            ToneBin::Dark => "V-VI",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ToneBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ToneBin {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ToneBin::ALL
            .into_iter()
            .find(|t| t.label() == s.trim())
            .ok_or_else(|| format!("unknown tone_bin {s:?} (expected I-II, III-IV or V-VI)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub tone_bin: ToneBin,
    pub malignant: bool,
    pub disease: String,
}

impl SampleRecord {
    /// Loads the image as a `[-1, 1]` CHW array, bilinearly resized to `resolution`.
    pub fn load_image(&self, resolution: usize) -> Result<Array3<f32>> {
        load_rgb(&self.image_path, resolution).map_err(|e| Error::Data {
            id: self.id.clone(),
            reason: e.to_string(),
        })
    }

    /// Decodes the mask and resamples it (nearest neighbour) to `resolution`.
    pub fn load_mask(&self, resolution: usize) -> Result<Array2<u8>> {
        let path = self.mask_path.as_ref().ok_or_else(|| Error::Data {
            id: self.id.clone(),
            reason: "sample has no mask".into(),
        })?;
        let img = image::open(path)
            .map_err(|e| Error::Data {
                id: self.id.clone(),
                reason: format!("cannot read mask {}: {e}", path.display()),
            })?
            .to_rgba8();
        Ok(resize_nearest(&decode_mask(&img)?, resolution))
    }
}

/// Reads any RGB image file as a `[-1, 1]` CHW array at `resolution`.
pub fn load_rgb(path: &Path, resolution: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Param(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    Ok(image_to_array(&resize_bilinear(&img, resolution)))
}

pub fn resize_bilinear(img: &RgbImage, resolution: usize) -> RgbImage {
    let r = resolution as u32;
    if img.dimensions() == (r, r) {
        return img.clone();
    }
    image::imageops::resize(img, r, r, image::imageops::FilterType::Triangle)
}

/// Nearest-neighbour resampling of a class map; never mixes labels.
pub fn resize_nearest(map: &Array2<u8>, resolution: usize) -> Array2<u8> {
    let (h, w) = map.dim();
    if (h, w) == (resolution, resolution) {
        return map.clone();
    }
    Array2::from_shape_fn((resolution, resolution), |(y, x)| {
        let sy = ((y * 2 + 1) * h / (2 * resolution)).min(h - 1);
        let sx = ((x * 2 + 1) * w / (2 * resolution)).min(w - 1);
        map[[sy, sx]]
    })
}

#[derive(Debug, Deserialize)]
struct MetadataRow {
    id: String,
    image_path: String,
    mask_path: String,
    tone_bin: String,
    malignant: String,
    disease: String,
}

/// Reads and validates a metadata table. Relative paths resolve against `root`.
/// All row problems are collected into one [`Error::Validation`].
pub fn load_corpus(metadata: &Path, root: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(metadata)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != METADATA_HEADER {
        return Err(Error::Validation(vec![Issue {
            row: None,
            message: format!("header must be {}, found {}", METADATA_HEADER.join(","), header.join(",")),
        }]));
    }
    let mut issues = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<MetadataRow>().enumerate() {
        let n = i + 1;
        let mut issue = |message: String| issues.push(Issue { row: Some(n), message });
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                issue(e.to_string());
                continue;
            }
        };
        let mut ok = true;
        if row.id.is_empty() {
            issue("empty id".into());
            ok = false;
        } else if !seen.insert(row.id.clone()) {
            issue(format!("duplicate id {:?}", row.id));
            ok = false;
        }
        let tone = match row.tone_bin.parse::<ToneBin>() {
            Ok(t) => Some(t),
            Err(e) => {
                issue(e);
                None
            }
        };
        let malignant = match row.malignant.as_str() {
            "0" => Some(false),
            "1" => Some(true),
            other => {
                issue(format!("malignant must be 0 or 1, found {other:?}"));
                None
            }
        };
        let image_path = root.join(&row.image_path);
        if let Err(e) = image::image_dimensions(&image_path) {
            issue(format!("unreadable image {}: {e}", image_path.display()));
            ok = false;
        }
        let mask_path = (!row.mask_path.is_empty()).then(|| root.join(&row.mask_path));
        if let Some(p) = &mask_path {
            if let Err(e) = image::image_dimensions(p) {
                issue(format!("unreadable mask {}: {e}", p.display()));
                ok = false;
            }
        }
        if let (true, Some(tone_bin), Some(malignant)) = (ok, tone, malignant) {
            records.push(SampleRecord {
                id: row.id,
                image_path,
                mask_path,
                tone_bin,
                malignant,
                disease: row.disease,
            });
        }
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(Error::Validation(issues))
    }
}

pub fn write_metadata(path: &Path, root: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METADATA_HEADER)?;
    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/");
    for r in records {
        w.write_record([
            r.id.as_str(),
            &rel(&r.image_path),
            &r.mask_path.as_deref().map(rel).unwrap_or_default(),
            r.tone_bin.label(),
            if r.malignant { "1" } else { "0" },
            r.disease.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const PALETTE: [(u8, [u8; 4]); 4] = [
    (LESION, [255, 0, 0, 255]),
    (SKIN, [0, 255, 0, 255]),
    (MARKER, [128, 0, 128, 255]),
    (RULER, [0, 0, 255, 255]),
];

pub fn class_color(class: u8) -> [u8; 4] {
    PALETTE
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, rgba)| *rgba)
        .unwrap_or([0, 0, 0, 0])
}

pub fn decode_mask(img: &RgbaImage) -> Result<Array2<u8>> {
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        if px[3] == 0 {
            continue;
        }
        let class = PALETTE
            .iter()
            .find(|(_, rgba)| *rgba == px.0)
            .map(|(c, _)| *c)
            .ok_or(Error::MaskDecode { x, y, rgba: px.0 })?;
        out[[y as usize, x as usize]] = class;
    }
    Ok(out)
}

pub fn encode_mask(classes: &Array2<u8>) -> Result<RgbaImage> {
    let (h, w) = classes.dim();
    if let Some(bad) = classes.iter().find(|&&c| c > RULER) {
        return param(format!("class index {bad} is outside 0..=4"));
    }
    Ok(RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        Rgba(class_color(classes[[y as usize, x as usize]]))
    }))
}

/// Training subset sizes; each holds `per_cell()` samples of every
/// (tone bin × malignancy) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Subset {
    P5,
    P10,
    P15,
    P20,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::P5, Subset::P10, Subset::P15, Subset::P20];

    pub fn percent(self) -> u32 {
        5 * (self as u32 + 1)
    }

    pub fn per_cell(self) -> usize {
        5 * (self as usize + 1)
    }

    pub fn size(self) -> usize {
        6 * self.per_cell()
    }

    pub fn from_percent(p: u32) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|s| s.percent() == p)
            .ok_or_else(|| Error::Config(format!("subset must be one of 5, 10, 15, 20 (percent), got {p}")))
    }
}

impl TryFrom<u32> for Subset {
    type Error = String;
    fn try_from(p: u32) -> std::result::Result<Self, String> {
        Subset::from_percent(p).map_err(|e| e.to_string())
    }
}

impl From<Subset> for u32 {
    fn from(s: Subset) -> u32 {
        s.percent()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.percent())
    }
}

/// Per (tone × malignancy) cell: S20 takes 20, validation 5, test 5.
pub const EVAL_PER_CELL: usize = 5;
pub const CELL_CAPACITY: usize = 20 + 2 * EVAL_PER_CELL;

/// Nested balanced training subsets plus fixed validation/test splits, by sample id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub seed: u64,
    pub subsets: BTreeMap<Subset, Vec<String>>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Every sample not in S20, validation or test.
    pub remainder: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Remainder,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "remainder" => Ok(Split::Remainder),
            _ => Err(format!("unknown split {s:?} (train, validation, test, remainder)")),
        }
    }
}

impl SubsetPlan {
    pub fn subset(&self, s: Subset) -> &[String] {
        &self.subsets[&s]
    }

    pub fn split(&self, split: Split, subset: Subset) -> &[String] {
        match split {
            Split::Train => self.subset(subset),
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Remainder => &self.remainder,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn cell_name(tone: ToneBin, malignant: bool) -> String {
    format!("{}/{}", tone, if malignant { "malignant" } else { "benign" })
}

/// Draws the plan: each (tone × malignancy) cell is shuffled with a seeded RNG;
/// its first 20 ids form the S20 share (smaller subsets are prefixes), the next
/// 5 go to validation, the next 5 to test and the rest to the remainder.
pub fn draw_subset_plan(records: &[SampleRecord], seed: u64) -> Result<SubsetPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets: BTreeMap<Subset, Vec<String>> = Subset::ALL.into_iter().map(|s| (s, vec![])).collect();
    let (mut validation, mut test, mut remainder) = (vec![], vec![], vec![]);
    for tone in ToneBin::ALL {
        for malignant in [false, true] {
            let mut cell: Vec<&str> = records
                .iter()
                .filter(|r| r.tone_bin == tone && r.malignant == malignant)
                .map(|r| r.id.as_str())
                .collect();
            if cell.len() < CELL_CAPACITY {
                return Err(Error::Capacity {
                    cell: cell_name(tone, malignant),
                    needed: CELL_CAPACITY,
                    available: cell.len(),
                });
            }
            cell.sort_unstable();
            cell.shuffle(&mut rng);
            for s in Subset::ALL {
                subsets
                    .get_mut(&s)
                    .unwrap()
                    .extend(cell[..s.per_cell()].iter().map(|s| s.to_string()));
            }
            let owned = |r: &[&str]| r.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            validation.extend(owned(&cell[20..20 + EVAL_PER_CELL]));
            test.extend(owned(&cell[20 + EVAL_PER_CELL..CELL_CAPACITY]));
            remainder.extend(owned(&cell[CELL_CAPACITY..]));
        }
    }
    Ok(SubsetPlan {
        seed,
        subsets,
        validation,
        test,
        remainder,
    })
}

/// Looks up records by id, preserving the order of `ids`.
pub fn select<'a>(records: &'a [SampleRecord], ids: &[String]) -> Result<Vec<&'a SampleRecord>> {
    let index: std::collections::HashMap<&str, &SampleRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| Error::Data {
                id: id.clone(),
                reason: "id is not in the corpus".into(),
            })
        })
        .collect()
}

/// Metadata-only records with the per-cell population of the 656-image DDI
/// release (I-II 159/49, III-IV 167/74, V-VI 159/48 benign/malignant).
/// Paths are placeholders; useful for plan checks without the real images.
pub fn ddi_shaped_records() -> Vec<SampleRecord> {
    const CELLS: [(ToneBin, usize, usize); 3] = [
        (ToneBin::Light, 159, 49),
        (ToneBin::Medium, 167, 74),
        (ToneBin::Dark, 159, 48),
    ];
    let mut out = Vec::with_capacity(656);
    for (tone, benign, malignant) in CELLS {
        for (count, m) in [(benign, false), (malignant, true)] {
            for _ in 0..count {
                let id = format!("{:06}", out.len() + 1);
                out.push(SampleRecord {
                    image_path: PathBuf::from(format!("images/{id}.png")),
                    mask_path: None,
                    id,
                    tone_bin: tone,
                    malignant: m,
                    disease: if m { "melanoma" } else { "nevus" }.into(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub n_per_cell: usize,
    pub resolution: usize,
    pub seed: u64,
}

const TONE_BASE: [[f64; 3]; 3] = [[236.0, 200.0, 176.0], [196.0, 146.0, 104.0], [112.0, 74.0, 50.0]];
const MARKER_INK: [f64; 3] = [104.0, 28.0, 196.0];
const RULER_FACE: [f64; 3] = [250.0, 250.0, 246.0];
const FABRIC: [f64; 3] = [24.0, 98.0, 122.0];

/// One rendered sample: RGB image and the class map used to paint it.
pub struct RenderedSample {
    pub image: RgbImage,
    pub classes: Array2<u8>,
}

/// Procedurally renders one sample. Malignant lesions have a wavy, high-contrast
/// border and speckled interior; benign ones are smooth, low-contrast ellipses.
pub fn render_sample(tone: ToneBin, malignant: bool, resolution: usize, rng: &mut impl Rng) -> RenderedSample {
    let r = resolution as f64;
    let mut classes = Array2::from_elem((resolution, resolution), SKIN);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let jitter = |rng: &mut dyn rand::RngCore, c: [f64; 3], amount: f64| {
        let k = 1.0 + rng.random_range(-amount..amount);
        c.map(|v| v * k)
    };
    let skin = jitter(rng, TONE_BASE[tone.index()], 0.05);

    // background fabric band along one edge
    let band = if rng.random_bool(0.5) {
        Some((rng.random_range(0..4u8), rng.random_range(0.10..0.18) * r))
    } else {
        None
    };
    // ruler strip along a vertical edge
    let ruler = if rng.random_bool(0.5) {
        Some((rng.random_bool(0.5), rng.random_range(0.12..0.18) * r))
    } else {
        None
    };

    let cx = r * rng.random_range(0.42..0.58);
    let cy = r * rng.random_range(0.42..0.58);
    let ax = r * rng.random_range(0.14..0.22);
    let ay = r * rng.random_range(0.14..0.22);
    let rot = rng.random_range(0.0..std::f64::consts::PI);
    let (k1, k2) = (rng.random_range(5..9) as f64, rng.random_range(9..14) as f64);
    let (p1, p2) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let wobble = if malignant { 0.22 } else { 0.03 };
    let lesion_color = if malignant {
        jitter(rng, [40.0, 22.0, 30.0], 0.15)
    } else {
        skin.map(|v| v * 0.72)
    };
    let in_lesion = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
        let theta = v.atan2(u);
        let rho = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
        let edge = 1.0 + wobble * (0.6 * (k1 * theta + p1).sin() + 0.4 * (k2 * theta + p2).sin());
        (rho, rho < edge)
    };

    // marker dot in a corner quadrant away from the lesion
    let marker = if rng.random_bool(0.5) {
        let corner = rng.random_range(0..4u8);
        let (mx, my) = (
            if corner & 1 == 0 { 0.22 * r } else { 0.78 * r },
            if corner & 2 == 0 { 0.22 * r } else { 0.78 * r },
        );
        Some((mx, my, rng.random_range(0.08..0.11) * r))
    } else {
        None
    };

    let mut image = RgbImage::new(resolution as u32, resolution as u32);
    for y in 0..resolution {
        for x in 0..resolution {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut class = SKIN;
            let mut rgb = skin;
            let (rho, inside) = in_lesion(fx, fy);
            if inside {
                class = LESION;
                rgb = lesion_color;
                if malignant {
                    if rng.random_bool(0.25) {
                        rgb = [150.0, 40.0, 40.0];
                    } else if rng.random_bool(0.15) {
                        rgb = [70.0, 80.0, 140.0];
                    }
                } else {
                    let t = rho.min(1.0);
                    rgb = std::array::from_fn(|c| lesion_color[c] * (1.0 - 0.3 * t) + skin[c] * 0.3 * t);
                }
            }
            if let Some((mx, my, mr)) = marker {
                if (fx - mx).powi(2) + (fy - my).powi(2) < mr * mr {
                    class = MARKER;
                    rgb = MARKER_INK;
                }
            }
            if let Some((edge, width)) = band {
                let d = match edge {
                    0 => fy,
                    1 => r - fy,
                    2 => fx,
                    _ => r - fx,
                };
                if d < width {
                    class = BACKGROUND;
                    let stripe = if ((fx + fy) as usize / 3) % 2 == 0 { 1.0 } else { 0.85 };
                    rgb = FABRIC.map(|v| v * stripe);
                }
            }
            if let Some((left, width)) = ruler {
                let d = if left { fx } else { r - fx };
                if d < width {
                    class = RULER;
                    let tick_period = (r / 16.0).max(3.0);
                    let tick_len = if (fy / tick_period) as usize % 4 == 0 { 0.8 } else { 0.45 };
                    let on_tick = fy % tick_period < 1.0 && d > width * (1.0 - tick_len);
                    rgb = if on_tick { [20.0, 20.0, 20.0] } else { RULER_FACE };
                }
            }
            classes[[y, x]] = class;
            let px = rgb.map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    RenderedSample { image, classes }
}

/// Renders `n_per_cell` samples for each of the six (tone × malignancy) cells into
/// `root/images`, `root/masks` and `root/metadata.csv`. Byte-identical for a seed.
pub fn generate_synthetic_corpus(root: &Path, opts: &SynthOptions) -> Result<Vec<SampleRecord>> {
    if opts.n_per_cell == 0 {
        return param("n_per_cell must be at least 1");
    }
    if opts.resolution < 16 {
        return param(format!("resolution must be at least 16, got {}", opts.resolution));
    }
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    let mut records = Vec::new();
    for tone in ToneBin::ALL {
        for malignant in [false, true] {
            for _ in 0..opts.n_per_cell {
                let idx = records.len();
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(idx as u64 + 1);
                let sample = render_sample(tone, malignant, opts.resolution, &mut rng);
                let id = format!("syn{idx:05}");
                let image_path = root.join("images").join(format!("{id}.png"));
                let mask_path = root.join("masks").join(format!("{id}.png"));
                sample.image.save(&image_path)?;
                encode_mask(&sample.classes)?.save(&mask_path)?;
                records.push(SampleRecord {
                    id,
                    image_path,
                    mask_path: Some(mask_path),
                    tone_bin: tone,
                    malignant,
                    disease: if malignant { "synthetic-malignant" } else { "synthetic-benign" }.into(),
                });
            }
        }
    }
    write_metadata(&root.join("metadata.csv"), root, &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_csv(dir: &Path, rows: &[&str]) -> PathBuf {
        let p = dir.join("metadata.csv");
        let mut s = METADATA_HEADER.join(",");
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        std::fs::write(&p, s).unwrap();
        p
    }

    fn tiny_png(dir: &Path) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        RgbImage::new(2, 2).save(dir.join("images/a.png")).unwrap();
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), &[]);
        assert!(load_corpus(&p, dir.path()).unwrap().is_empty());
    }

    #[test]
    fn ddi_sized_table_loads_656_records() {
        let dir = tempfile::tempdir().unwrap();
        tiny_png(dir.path());
        let rows: Vec<String> = ddi_shaped_records()
            .iter()
            .map(|r| format!("{},images/a.png,,{},{},{}", r.id, r.tone_bin, r.malignant as u8, r.disease))
            .collect();
        let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
        let p = write_csv(dir.path(), &rows);
        let recs = load_corpus(&p, dir.path()).unwrap();
        assert_eq!(recs.len(), 656);
        assert!(recs.iter().all(|r| r.mask_path.is_none()));
    }

    #[test]
    fn itemized_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny_png(dir.path());
        let p = write_csv(
            dir.path(),
            &[
                "a,images/a.png,,I-II,0,nevus",
                "b,images/a.png,,VII,1,melanoma",
                "a,images/a.png,,V-VI,0,nevus",
                "c,images/missing.png,,V-VI,0,nevus",
                "d,images/a.png,,V-VI,yes,nevus",
            ],
        );
        let Err(Error::Validation(issues)) = load_corpus(&p, dir.path()) else {
            panic!("expected validation error");
        };
        let rows: Vec<Option<usize>> = issues.iter().map(|i| i.row).collect();
        assert_eq!(rows, vec![Some(2), Some(3), Some(4), Some(5)]);
        assert!(issues[0].message.contains("VII"));
        assert!(issues[1].message.contains("duplicate"));
        assert!(issues[2].message.contains("unreadable"));
        let msg = Error::Validation(issues).to_string();
        assert!(msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn bad_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "id,image,tone\n").unwrap();
        assert!(matches!(load_corpus(&p, dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn mask_point_checks() {
        let clear = RgbaImage::new(4, 3);
        assert!(decode_mask(&clear).unwrap().iter().all(|&c| c == BACKGROUND));
        let mut m = RgbaImage::new(3, 3);
        m.put_pixel(2, 1, Rgba([255, 0, 0, 255]));
        let d = decode_mask(&m).unwrap();
        assert_eq!(d.iter().filter(|&&c| c == LESION).count(), 1);
        assert_eq!(d[[1, 2]], LESION);
        m.put_pixel(0, 2, Rgba([255, 0, 1, 255]));
        match decode_mask(&m) {
            Err(Error::MaskDecode { x: 0, y: 2, rgba }) => assert_eq!(rgba, [255, 0, 1, 255]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn palette_is_bijective() {
        let colors: HashSet<[u8; 4]> = PALETTE.iter().map(|p| p.1).collect();
        assert_eq!(colors.len(), 4);
        assert!(PALETTE.iter().all(|p| p.1[3] == 255));
    }

    proptest! {
        #[test]
        fn decode_histogram_matches_pixel_loop(
            w in 1u32..12, h in 1u32..12,
            cells in prop::collection::vec(0u8..5, 144),
            alpha_noise in prop::collection::vec(any::<[u8; 3]>(), 144),
        ) {
            // background pixels carry arbitrary RGB under alpha 0
            let img = RgbaImage::from_fn(w, h, |x, y| {
                let i = (y * w + x) as usize;
                let c = cells[i];
                if c == 0 {
                    let n = alpha_noise[i];
                    Rgba([n[0], n[1], n[2], 0])
                } else {
                    Rgba(class_color(c))
                }
            });
            let decoded = decode_mask(&img).unwrap();
            let mut want = [0usize; 5];
            for y in 0..h { for x in 0..w {
                let px = img.get_pixel(x, y).0;
                let c = if px[3] == 0 { 0 } else if px == [255,0,0,255] { 1 } else if px == [0,255,0,255] { 2 }
                    else if px == [128,0,128,255] { 3 } else { 4 };
                want[c] += 1;
            }}
            let mut got = [0usize; 5];
            for &c in decoded.iter() { got[c as usize] += 1; }
            prop_assert_eq!(got, want);
            prop_assert_eq!(decode_mask(&encode_mask(&decoded).unwrap()).unwrap(), decoded);
        }
    }

    fn check_plan(plan: &SubsetPlan, records: &[SampleRecord]) {
        let by_id: std::collections::HashMap<&str, &SampleRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let counts = |ids: &[String]| {
            let mut c = [[0usize; 2]; 3];
            for id in ids {
                let r = by_id[id.as_str()];
                c[r.tone_bin.index()][r.malignant as usize] += 1;
            }
            c
        };
        for s in Subset::ALL {
            let ids = plan.subset(s);
            assert_eq!(ids.len(), s.size());
            assert_eq!(counts(ids), [[s.per_cell(); 2]; 3]);
        }
        for w in Subset::ALL.windows(2) {
            let big: HashSet<&String> = plan.subset(w[1]).iter().collect();
            assert!(plan.subset(w[0]).iter().all(|id| big.contains(id)));
        }
        for split in [&plan.validation, &plan.test] {
            assert_eq!(split.len(), 30);
            assert_eq!(counts(split), [[5; 2]; 3]);
        }
        let mut all: Vec<&String> = plan.subset(Subset::P20).iter().collect();
        all.extend(&plan.validation);
        all.extend(&plan.test);
        all.extend(&plan.remainder);
        let unique: HashSet<&String> = all.iter().copied().collect();
        assert_eq!(unique.len(), all.len());
        assert_eq!(all.len(), records.len());
    }

    #[test]
    fn ddi_plan_matches_subset_table() {
        let recs = ddi_shaped_records();
        assert_eq!(recs.len(), 656);
        for seed in 0..5 {
            let plan = draw_subset_plan(&recs, seed).unwrap();
            check_plan(&plan, &recs);
            assert_eq!(plan.remainder.len(), 476);
            assert_eq!(plan, draw_subset_plan(&recs, seed).unwrap());
        }
        assert_ne!(
            draw_subset_plan(&recs, 1).unwrap().subsets,
            draw_subset_plan(&recs, 2).unwrap().subsets
        );
    }

    #[test]
    fn plan_ignores_record_order() {
        let recs = ddi_shaped_records();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(draw_subset_plan(&recs, 4).unwrap(), draw_subset_plan(&rev, 4).unwrap());
    }

    #[test]
    fn capacity_error_names_cell() {
        let mut recs = ddi_shaped_records();
        let mut dark_malignant = 0;
        recs.retain(|r| {
            if r.tone_bin == ToneBin::Dark && r.malignant {
                dark_malignant += 1;
                dark_malignant <= 4
            } else {
                true
            }
        });
        match draw_subset_plan(&recs, 0) {
            Err(Error::Capacity { cell, needed, available }) => {
                assert_eq!(cell, "V-VI/malignant");
                assert_eq!((needed, available), (30, 4));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plan_json_roundtrip() {
        let plan = draw_subset_plan(&ddi_shaped_records(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.json");
        plan.save(&p).unwrap();
        assert_eq!(SubsetPlan::load(&p).unwrap(), plan);
    }

    #[test]
    fn subset_sizes() {
        let sizes: Vec<usize> = Subset::ALL.iter().map(|s| s.size()).collect();
        assert_eq!(sizes, vec![30, 60, 90, 120]);
        assert!(Subset::from_percent(12).is_err());
    }

    #[test]
    fn synthetic_corpus_contract() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_per_cell: 10,
            resolution: 32,
            seed: 3,
        };
        let recs = generate_synthetic_corpus(dir.path(), &opts).unwrap();
        assert_eq!(recs.len(), 60);
        let loaded = load_corpus(&dir.path().join("metadata.csv"), dir.path()).unwrap();
        assert_eq!(loaded, recs);
        for r in &loaded {
            let mask = r.load_mask(32).unwrap();
            assert!(mask.iter().any(|&c| c == LESION), "{}", r.id);
            assert_eq!(r.load_image(32).unwrap().dim(), (3, 32, 32));
        }
        let again = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(again.path(), &opts).unwrap();
        for sub in ["metadata.csv", "images/syn00017.png", "masks/syn00042.png"] {
            assert_eq!(
                std::fs::read(dir.path().join(sub)).unwrap(),
                std::fs::read(again.path().join(sub)).unwrap()
            );
        }
    }

    #[test]
    fn rendered_classes_survive_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tone in ToneBin::ALL {
            let s = render_sample(tone, true, 48, &mut rng);
            let back = decode_mask(&encode_mask(&s.classes).unwrap()).unwrap();
            assert_eq!(back, s.classes);
        }
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        let m = Array2::from_shape_fn((8, 8), |(y, x)| ((x / 4) + 2 * (y / 4)) as u8);
        let up = resize_nearest(&m, 16);
        assert_eq!(up[[0, 0]], 0);
        assert_eq!(up[[15, 15]], 3);
        let down = resize_nearest(&up, 8);
        assert_eq!(down, m);
        let set: HashSet<u8> = resize_nearest(&m, 5).iter().copied().collect();
        assert!(set.is_subset(&[0, 1, 2, 3].into_iter().collect()));
    }

    #[test]
    fn missing_mask_is_data_error() {
        let r = ddi_shaped_records().remove(0);
        assert!(matches!(r.load_mask(16), Err(Error::Data { .. })));
    }
}
