//! Datasets: IDX image files, labeled CSV, and seeded Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{format_err, invalid, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(invalid("dataset has no samples"));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(invalid(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let width = self.width();
        if width == 0 || self.inputs.iter().any(|x| x.len() != width) {
            return Err(invalid("inputs must share a non-zero width"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(invalid(format!("label {y} >= class count {}", self.class_count)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Copies the samples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Keeps at most the first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        self.inputs.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// Appends `other`'s samples; widths and class counts must agree.
    pub fn concat(mut self, other: &Dataset) -> Result<Self> {
        if other.class_count != self.class_count || (!other.is_empty() && other.width() != self.width()) {
            return Err(invalid("cannot concatenate datasets of different shape"));
        }
        self.inputs.extend(other.inputs.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        Ok(self)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(format!(
                "{}: truncated, wanted {n} bytes at offset {} of {}",
                self.what,
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Parses IDX image bytes (magic 0x803) into rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut c = Cursor { bytes, pos: 0, what: "idx images" };
    let magic = c.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(format!("idx images: bad magic {magic:#010x}")));
    }
    let count = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let width = rows
        .checked_mul(cols)
        .filter(|&w| w > 0)
        .ok_or_else(|| format_err(format!("idx images: bad dimensions {rows}x{cols}")))?;
    let total = count
        .checked_mul(width)
        .ok_or_else(|| format_err("idx images: size overflow"))?;
    let pixels = c.take(total)?;
    Ok(pixels
        .chunks_exact(width)
        .map(|px| px.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect())
}

/// Parses IDX label bytes (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, pos: 0, what: "idx labels" };
    let magic = c.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(format!("idx labels: bad magic {magic:#010x}")));
    }
    let count = c.u32_be()? as usize;
    Ok(c.take(count)?.iter().map(|&l| usize::from(l)).collect())
}

/// Loads an IDX image/label file pair. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let inputs = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if inputs.len() != labels.len() {
        return Err(format_err(format!(
            "idx: {} images but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(inputs, labels, class_count).map_err(|e| format_err(format!("idx: {e}")))
}

/// Loads a CSV with a header row, a `label` column, and numeric feature columns.
///
/// `class_count` of `None` infers `max label + 1`.
pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err(format!("csv: {e}")))?;
    let headers = reader.headers().map_err(|e| format_err(format!("csv: {e}")))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| format_err("csv: no `label` column"))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(format!("csv: {e}")))?;
        let row = line + 2;
        let mut x = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|_| format_err(format!("csv row {row}: bad label `{field}`")))?,
                );
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| format_err(format!("csv row {row}: bad value `{field}`")))?;
                if !v.is_finite() {
                    return Err(format_err(format!("csv row {row}: non-finite value")));
                }
                x.push(v);
            }
        }
        inputs.push(x);
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    Dataset::new(inputs, labels, classes).map_err(|e| format_err(format!("csv: {e}")))
}

/// Class centers with unit pairwise distance where the dimension allows it.
///
/// Vertices of a regular simplex are written in a Helmert basis of the
/// `(C-1)`-dimensional sum-zero subspace, then embedded into `d` dimensions
/// by a random orthonormal frame. For `d < C - 1` a random projection is used
/// and rescaled so the closest pair is at distance 1.
fn blob_centers(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let m = classes - 1;
    // simplex vertex c, Helmert coordinate j: u_j[c] / sqrt(2)
    let helmert = |c: usize, j: usize| -> f64 {
        let j1 = j + 1;
        let norm = ((j1 * (j1 + 1)) as f64).sqrt();
        let v = match c.cmp(&j1) {
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Equal => -(j1 as f64),
            std::cmp::Ordering::Greater => 0.0,
        };
        v / norm / std::f64::consts::SQRT_2
    };
    let frame_cols = m.min(dim);
    // random frame: `dim` x `m` matrix, Gram-Schmidt on the first `frame_cols` columns
    let mut frame: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for j in 0..frame_cols {
        for i in 0..j {
            let dot: f64 = frame[j].iter().zip(&frame[i]).map(|(a, b)| a * b).sum();
            let prev = frame[i].clone();
            frame[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = frame[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        frame[j].iter_mut().for_each(|a| *a /= norm);
    }
    let mut centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut x = vec![0.0; dim];
            for (j, col) in frame.iter().enumerate() {
                let h = helmert(c, j);
                x.iter_mut().zip(col).for_each(|(xi, fi)| *xi += h * fi);
            }
            x
        })
        .collect();
    if dim < m {
        let mut min_d = f64::INFINITY;
        for a in 0..classes {
            for b in a + 1..classes {
                let d = centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                min_d = min_d.min(d);
            }
        }
        if min_d > 0.0 {
            centers.iter_mut().flatten().for_each(|v| *v /= min_d);
        }
    }
    centers
}

/// Isotropic Gaussian blobs around seeded class centers.
///
/// Samples are ordered class-major: `per_class` samples of class 0, then 1, ...
pub fn generate_blobs(seed: u64, classes: usize, per_class: usize, dim: usize, spread: f64) -> Result<Dataset> {
    if classes < 2 || per_class < 1 || dim < 1 {
        return Err(invalid(format!(
            "blobs need classes >= 2, per_class >= 1, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(&mut rng, classes, dim);
    sample_blobs(&centers, per_class, spread, &mut rng)
}

/// Fresh samples around the centers of [`generate_blobs`]`(seed, ..)`, drawn
/// from an independent random stream (`stream >= 1`).
pub fn generate_blob_split(
    seed: u64,
    stream: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if stream == 0 {
        return Err(invalid("stream 0 is reserved for generate_blobs"));
    }
    if per_class < 1 || !(spread.is_finite() && spread > 0.0) {
        return Err(invalid(format!("bad blob split: per_class {per_class}, spread {spread}")));
    }
    let centers = blob_centers_for(seed, classes, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    sample_blobs(&centers, per_class, spread, &mut rng)
}

fn sample_blobs(centers: &[Vec<f64>], per_class: usize, spread: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(centers.len() * per_class);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            inputs.push(
                center
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + spread * z
                    })
                    .collect(),
            );
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, centers.len())
}

/// The centers used by [`generate_blobs`] for the same arguments.
pub fn blob_centers_for(seed: u64, classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if classes < 2 || dim < 1 {
        return Err(invalid("blobs need classes >= 2 and dim >= 1"));
    }
    Ok(blob_centers(&mut ChaCha8Rng::seed_from_u64(seed), classes, dim))
}

/// Shuffled index blocks for one epoch; the final short block is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
