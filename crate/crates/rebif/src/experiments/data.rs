//! Synthetic shape datasets: anti-aliased squares, disks, and triangles on a
//! gray background, with exact bounding boxes as labels.
//!
//! Images are synthesized at 64x64 in one gray channel. Object side lengths
//! span 6..=40 px so every pyramid scale receives positives. Pixel values
//! are quantized to exact `k/255` levels at generation time, so the
//! in-memory tensor and its PGM file round-trip bit-exactly.
//!
//! Determinism: the dataset seed and a split tag fork one stream per image
//! (`img.<index>`), so any image can be regenerated independently and
//! train/test splits with different tags share nothing.

use std::path::Path;

use crate::detector::{iou, BBox, GroundTruth};
use crate::tensor::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

use super::ExperimentError;

/// Canvas side in pixels.
pub const IMAGE_PX: usize = 64;
/// Object classes: square, disk, triangle.
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["square", "disk", "triangle"];
/// Background gray level before noise.
pub const BACKGROUND: f64 = 0.1;
/// Gaussian pixel-noise standard deviation.
pub const NOISE_SD: f64 = 0.02;
/// Object side lengths in pixels (inclusive).
pub const MIN_SIDE_PX: f64 = 6.0;
pub const MAX_SIDE_PX: f64 = 40.0;
/// Anti-aliasing supersampling factor per axis.
const AA: usize = 4;
/// New objects overlapping an accepted one above this IoU are re-drawn.
const MAX_OVERLAP: f64 = 0.3;
/// Placement attempts per object before giving up on it.
const MAX_ATTEMPTS: usize = 20;

/// One synthesized image with its exact labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor4,
    pub gts: Vec<GroundTruth>,
}

/// Layout of one object before rasterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub bbox: BBox,
    pub intensity: f64,
}

/// Draws 1..=5 non-overlapping objects: class, square bounding box with side
/// in `[6, 40]` px fully inside the canvas, and a fill intensity. Objects
/// whose placement keeps colliding are skipped, but the first always lands,
/// so every image has at least one object.
pub fn sample_layout(rng: &mut Rng) -> Vec<ObjectSpec> {
    let n_objects = 1 + rng.below(5);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    for _ in 0..n_objects {
        for _attempt in 0..MAX_ATTEMPTS {
            let class_id = rng.below(NUM_CLASSES);
            let side = rng.uniform(MIN_SIDE_PX, MAX_SIDE_PX) / IMAGE_PX as f64;
            let half = side / 2.0;
            let cx = rng.uniform(half, 1.0 - half);
            let cy = rng.uniform(half, 1.0 - half);
            let bbox = BBox::new(cx, cy, side, side).expect("layout box is valid");
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_OVERLAP) {
                objects.push(ObjectSpec {
                    class_id,
                    bbox,
                    intensity: rng.uniform(0.5, 1.0),
                });
                break;
            }
        }
    }
    objects
}

/// Fraction of the pixel at `(row, col)` covered by the object, estimated on
/// an `AA x AA` subsample grid.
fn coverage(obj: &ObjectSpec, row: usize, col: usize) -> f64 {
    let (x0, y0, x1, y1) = obj.bbox.corners();
    let px = IMAGE_PX as f64;
    let mut inside = 0usize;
    for sy in 0..AA {
        for sx in 0..AA {
            let x = (col as f64 + (sx as f64 + 0.5) / AA as f64) / px;
            let y = (row as f64 + (sy as f64 + 0.5) / AA as f64) / px;
            let hit = match obj.class_id {
                // Square: the bounding box itself.
                0 => x >= x0 && x < x1 && y >= y0 && y < y1,
                // Disk inscribed in the box.
                1 => {
                    let dx = x - obj.bbox.cx;
                    let dy = y - obj.bbox.cy;
                    let r = obj.bbox.w / 2.0;
                    dx * dx + dy * dy <= r * r
                }
                // Upward triangle: base along the bottom edge, apex mid-top.
                // At depth t below the apex the half-width grows as t * w/2h.
                _ => {
                    let t = (y - y0) / (y1 - y0);
                    (0.0..=1.0).contains(&t) && (x - obj.bbox.cx).abs() <= t * obj.bbox.w / 2.0
                }
            };
            inside += hit as usize;
        }
    }
    inside as f64 / (AA * AA) as f64
}

/// Rounds to the nearest 8-bit gray level, as the PGM file will store it.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paints the objects over the background with coverage-weighted blending,
/// adds seeded Gaussian noise, and quantizes to exact 8-bit levels.
pub fn rasterize(objects: &[ObjectSpec], rng: &mut Rng) -> Tensor4 {
    let mut image = Tensor4::filled(Shape4::new(1, 1, IMAGE_PX, IMAGE_PX), BACKGROUND);
    let px = IMAGE_PX as f64;
    for obj in objects {
        let (x0, y0, x1, y1) = obj.bbox.corners();
        let c0 = (x0 * px).floor().max(0.0) as usize;
        let r0 = (y0 * px).floor().max(0.0) as usize;
        let c1 = ((x1 * px).ceil() as usize).min(IMAGE_PX);
        let r1 = ((y1 * px).ceil() as usize).min(IMAGE_PX);
        for row in r0..r1 {
            for col in c0..c1 {
                let alpha = coverage(obj, row, col);
                if alpha > 0.0 {
                    let idx = row * IMAGE_PX + col;
                    let v = &mut image.data_mut()[idx];
                    *v = *v * (1.0 - alpha) + obj.intensity * alpha;
                }
            }
        }
    }
    for v in image.data_mut() {
        *v = quantize(*v + rng.normal(0.0, NOISE_SD));
    }
    image
}

/// Synthesizes a deterministic dataset. Different `tag`s (e.g. "train" and
/// "test") under the same seed yield disjoint, independently reproducible
/// splits.
pub fn gen_dataset(n_images: usize, seed: u64, tag: &str) -> Vec<Sample> {
    let base = Rng::seeded(seed).fork(tag);
    (0..n_images)
        .map(|i| {
            let mut rng = base.fork(&format!("img.{i}"));
            let objects = sample_layout(&mut rng);
            let image = rasterize(&objects, &mut rng);
            let gts = objects
                .iter()
                .map(|o| GroundTruth::new(o.class_id, o.bbox, NUM_CLASSES).expect("layout box"))
                .collect();
            Sample { image, gts }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) image files.
// ---------------------------------------------------------------------------

/// Serializes a single-channel image with values on exact `k/255` levels.
pub fn write_pgm(image: &Tensor4) -> Result<Vec<u8>, ExperimentError> {
    let shape = image.shape();
    if shape.n != 1 || shape.c != 1 {
        return Err(ExperimentError::BadImage {
            message: format!("expected a 1x1xHxW image, got {shape:?}"),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", shape.w, shape.h).into_bytes();
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(ExperimentError::BadImage {
                message: format!("pixel value {v} outside [0, 1]"),
            });
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Largest accepted image side; guards parsers against absurd allocations.
const MAX_DIM: usize = 4096;

/// Parses a binary PGM (P5) file into a `1x1xHxW` tensor with values
/// `k/255`. Header comments (`#` to end of line) are allowed; the maxval
/// must be 255 and the payload must hold exactly `w*h` bytes.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor4, ExperimentError> {
    let bad = |message: String| ExperimentError::BadImage { message };
    let mut pos = 0usize;

    // Reads the next whitespace-delimited header token, skipping comments.
    let token = |pos: &mut usize| -> Result<&[u8], ExperimentError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header".into()));
        }
        Ok(&bytes[start..*pos])
    };

    if token(&mut pos)? != b"P5" {
        return Err(bad("not a binary PGM (P5) file".into()));
    }
    let dim = |what: &str, pos: &mut usize| -> Result<usize, ExperimentError> {
        let t = token(pos)?;
        let s = std::str::from_utf8(t).map_err(|_| bad(format!("{what} is not ASCII")))?;
        let v: usize = s
            .parse()
            .map_err(|_| bad(format!("{what} {s:?} is not a number")))?;
        if v == 0 || v > MAX_DIM {
            return Err(bad(format!("{what} {v} out of range 1..={MAX_DIM}")));
        }
        Ok(v)
    };
    let w = dim("width", &mut pos)?;
    let h = dim("height", &mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != b"255" {
        return Err(bad(format!(
            "unsupported maxval {:?}, expected 255",
            String::from_utf8_lossy(maxval)
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval".into()));
    }
    pos += 1;

    let count = w.checked_mul(h).ok_or_else(|| bad("image size overflows".into()))?;
    let payload = &bytes[pos..];
    if payload.len() != count {
        return Err(bad(format!(
            "payload holds {} bytes, expected {} for {}x{}",
            payload.len(),
            count,
            w,
            h
        )));
    }
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor4::from_vec(Shape4::new(1, 1, h, w), data).map_err(|e| bad(e.to_string()))
}

// ---------------------------------------------------------------------------
// Label text files: one `class_id cx cy w h` line per object.
// ---------------------------------------------------------------------------

pub fn format_labels(gts: &[GroundTruth]) -> String {
    let mut out = String::new();
    for g in gts {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            g.class_id, g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h
        ));
    }
    out
}

pub fn parse_labels(text: &str, num_classes: usize) -> Result<Vec<GroundTruth>, ExperimentError> {
    let mut gts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |message: String| ExperimentError::BadLabel {
            line: line_no,
            message,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad class id {:?}", fields[0])))?;
        let mut nums = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| bad(format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value {f:?}")));
            }
            nums[k] = v;
        }
        let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| bad(e.to_string()))?;
        gts.push(GroundTruth::new(class_id, bbox, num_classes).map_err(|e| bad(e.to_string()))?);
    }
    Ok(gts)
}

// ---------------------------------------------------------------------------
// Dataset directory IO.
// ---------------------------------------------------------------------------

fn image_name(i: usize) -> String {
    format!("img_{i:05}.pgm")
}

fn label_name(i: usize) -> String {
    format!("img_{i:05}.txt")
}

/// Writes `img_NNNNN.pgm` / `img_NNNNN.txt` pairs into `dir` (created if
/// missing).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let img_path = dir.join(image_name(i));
        std::fs::write(&img_path, write_pgm(&s.image)?)
            .map_err(|e| ExperimentError::io(&img_path, e))?;
        let label_path = dir.join(label_name(i));
        std::fs::write(&label_path, format_labels(&s.gts))
            .map_err(|e| ExperimentError::io(&label_path, e))?;
    }
    Ok(())
}

/// Loads every `img_NNNNN.pgm` / `.txt` pair from `dir`, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, ExperimentError> {
    let mut indices: Vec<usize> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| ExperimentError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| ExperimentError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".pgm")) {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    let mut samples = Vec::with_capacity(indices.len());
    for i in indices {
        let img_path = dir.join(image_name(i));
        let bytes = std::fs::read(&img_path).map_err(|e| ExperimentError::io(&img_path, e))?;
        let image = parse_pgm(&bytes)?;
        let label_path = dir.join(label_name(i));
        let text =
            std::fs::read_to_string(&label_path).map_err(|e| ExperimentError::io(&label_path, e))?;
        let gts = parse_labels(&text, NUM_CLASSES)?;
        samples.push(Sample { image, gts });
    }
    Ok(samples)
}
