//! Synthetic shapes corpus: a deterministic renderer, its caption template,
//! the IMG1 raw image format and the JSON-lines manifest.
//!
//! Each scene puts one to three colored primitives into distinct cells of a
//! 3×3 layout. Objects are listed by column, then row; consecutive objects
//! are joined by "left of" when the columns differ and "above" otherwise.
//! Clips repeat the scene with every object drifting a few pixels per frame.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocabulary;

pub const IMG_MAGIC: &[u8; 4] = b"IMG1";
pub const MANIFEST: &str = "manifest.jsonl";
const BACKGROUND: [u8; 3] = [24, 24, 24];
const GRID: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    Above,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 70],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [235, 215, 40],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`. Triangles point up.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::Above => "above",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    /// Layout cell `(column, row)`.
    pub cell: (usize, usize),
    pub center: (f64, f64),
    pub radius: f64,
    /// Pixels moved per frame.
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Sorted by column, then row.
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let count = rng.random_range(1..=3);
        let cells = rand::seq::index::sample(rng, GRID * GRID, count).into_vec();
        let cell_side = size as f64 / GRID as f64;
        let mut objects: Vec<Object> = cells
            .into_iter()
            .map(|c| {
                let cell = (c % GRID, c / GRID);
                let jitter = cell_side * 0.08;
                let center = (
                    (cell.0 as f64 + 0.5) * cell_side + rng.random_range(-jitter..=jitter),
                    (cell.1 as f64 + 0.5) * cell_side + rng.random_range(-jitter..=jitter),
                );
                let step = size as f64 / 64.0;
                Object {
                    color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                    shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                    cell,
                    center,
                    radius: cell_side * rng.random_range(0.28..0.36),
                    velocity: (
                        step * rng.random_range(-1i32..=1) as f64,
                        step * rng.random_range(-1i32..=1) as f64,
                    ),
                }
            })
            .collect();
        objects.sort_by_key(|o| o.cell);
        Self { objects }
    }

    pub fn relations(&self) -> Vec<Relation> {
        self.objects
            .windows(2)
            .map(|p| {
                if p[0].cell.0 != p[1].cell.0 {
                    Relation::LeftOf
                } else {
                    Relation::Above
                }
            })
            .collect()
    }

    pub fn caption(&self) -> String {
        let mut parts = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                parts.push(self.relations()[i - 1].phrase().to_string());
            }
            parts.push(format!("a {} {}", o.color.name(), o.shape.name()));
        }
        parts.join(" ")
    }

    /// Row-major RGB bytes of frame `frame`.
    pub fn render(&self, size: usize, frame: usize) -> Vec<u8> {
        let mut px = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let hit = self.objects.iter().rev().find(|o| {
                    let cx = o.center.0 + o.velocity.0 * frame as f64;
                    let cy = o.center.1 + o.velocity.1 * frame as f64;
                    o.shape.contains(fx - cx, fy - cy, o.radius)
                });
                px.extend_from_slice(&hit.map_or(BACKGROUND, |o| o.color.rgb()));
            }
        }
        px
    }
}

/// Objects in caption order and the relations between neighbours.
pub type CaptionFacts = (Vec<(Color, Shape)>, Vec<Relation>);

/// Inverse of the caption template: `(color, shape)` list and relations.
pub fn parse_caption(text: &str) -> Option<CaptionFacts> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut objects = Vec::new();
    let mut relations = Vec::new();
    let mut i = 0;
    loop {
        if words.get(i) != Some(&"a") {
            return None;
        }
        let color = Color::ALL.into_iter().find(|c| Some(&c.name()) == words.get(i + 1))?;
        let shape = Shape::ALL.into_iter().find(|s| Some(&s.name()) == words.get(i + 2))?;
        objects.push((color, shape));
        i += 3;
        match (words.get(i), words.get(i + 1)) {
            (None, _) => return Some((objects, relations)),
            (Some(&"left"), Some(&"of")) => {
                relations.push(Relation::LeftOf);
                i += 2;
            }
            (Some(&"above"), _) => {
                relations.push(Relation::Above);
                i += 1;
            }
            _ => return None,
        }
    }
}

/// Every word the template can produce.
pub fn template_words() -> Vec<&'static str> {
    let mut w = vec!["a", "left", "of", "above"];
    w.extend(Color::ALL.iter().map(|c| c.name()));
    w.extend(Shape::ALL.iter().map(|s| s.name()));
    w
}

pub fn write_img1(path: &Path, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != h * w * 3 {
        return Err(Error::Data(format!(
            "{h}x{w} image needs {} bytes, got {}",
            h * w * 3,
            rgb.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(IMG_MAGIC)?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Returns `(h, w, rgb)`.
pub fn read_img1(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("cannot open image {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != IMG_MAGIC {
        return Err(Error::Data(format!("{} is not an IMG1 file", path.display())));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 || bytes.len() != 12 + h * w * 3 {
        return Err(Error::Data(format!("{} has a bad size header", path.display())));
    }
    Ok((h, w, bytes.split_off(12)))
}

/// Channel-first tensor scaled to `[0, 1]`. With `frames`, the file holds
/// the frames stacked vertically and the result is `[3, frames, h, w]`.
pub fn image_tensor<T: Scalar>(path: &Path, frames: Option<usize>) -> Result<Tensor<T>> {
    let (h, w, rgb) = read_img1(path)?;
    let t = frames.unwrap_or(1);
    if t == 0 || h % t != 0 {
        return Err(Error::Data(format!(
            "{} has height {h}, not a stack of {t} frames",
            path.display()
        )));
    }
    let fh = h / t;
    let plane = h * w;
    let shape = match frames {
        Some(t) => vec![3, t, fh, w],
        None => vec![3, h, w],
    };
    // stacked frames are contiguous per channel, so [3, T·fh, w] == [3, T, fh, w]
    Tensor::new(
        shape,
        (0..3 * plane)
            .map(|i| T::from_f64(rgb[(i % plane) * 3 + i / plane] as f64 / 255.0))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusOptions {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub frames: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub vocab_size: usize,
}

/// Scene `index` of the corpus seeded with `seed`, independent of count.
pub fn scene(seed: u64, index: usize, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    Scene::random(&mut rng, size)
}

pub fn gen_corpus(opts: &CorpusOptions, out: &Path) -> Result<CorpusSummary> {
    if opts.count == 0 {
        return Err(Error::Config("corpus count must be positive".into()));
    }
    if opts.image_size < GRID * 4 {
        return Err(Error::Config(format!(
            "image size {} is too small to draw",
            opts.image_size
        )));
    }
    if opts.frames == Some(0) {
        return Err(Error::Config("clip length must be positive".into()));
    }
    fs::create_dir_all(out.join("images"))?;
    let size = opts.image_size;
    let mut manifest = BufWriter::new(File::create(out.join(MANIFEST))?);
    let mut captions = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let s = scene(opts.seed, i, size);
        let frames = opts.frames.unwrap_or(1);
        let rgb: Vec<u8> = (0..frames).flat_map(|f| s.render(size, f)).collect();
        let rel = format!("images/{i:05}.img");
        write_img1(&out.join(&rel), size * frames, size, &rgb)?;
        let record = ManifestRecord {
            image: rel,
            caption: s.caption(),
            frames: opts.frames,
        };
        serde_json::to_writer(&mut manifest, &record).map_err(|e| Error::Data(e.to_string()))?;
        manifest.write_all(b"\n")?;
        captions.push(record.caption);
    }
    manifest.flush()?;
    let vocab = Vocabulary::build(captions.iter().map(String::as_str));
    Ok(CorpusSummary {
        manifest: out.join(MANIFEST),
        vocab_size: vocab.len(),
    })
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub frames: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.caption.as_str())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Loads every record of a manifest; image paths are relative to it.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let frames = records.first().and_then(|r| r.frames);
    if records.iter().any(|r| r.frames != frames) {
        return Err(Error::Data("manifest mixes images and clips".into()));
    }
    let samples = records
        .into_iter()
        .map(|r| {
            Ok(Sample {
                image: image_tensor(&base.join(&r.image), r.frames)?,
                caption: r.caption,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, frames })
}
