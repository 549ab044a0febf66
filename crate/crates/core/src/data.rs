//! Multi-domain image datasets: IDX ingestion, rotated MNIST, a synthetic
//! generator, batching and an on-disk cache.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images with identity labels, as read from an IDX pair.
#[derive(Debug, Clone)]
pub struct ImagePool {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels in `[0, 1]`, `rows * cols` per image.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImagePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length("IDX header truncated".into()))
}

/// Parses an IDX image file: `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Length(format!("IDX images: need {need} bytes, found {}", payload.len())));
    }
    Ok((n, rows, cols, payload[..need].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Length(format!("IDX labels: need {n} bytes, found {}", payload.len())));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImagePool> {
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::Length(format!("{n} images but {} labels", labels.len())));
    }
    Ok(ImagePool {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Loads the standard four MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(ImagePool, ImagePool)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Counter-clockwise rotation about the image center with bilinear
/// interpolation; samples falling outside the source read as 0.
pub fn rotate(image: &[f64], rows: usize, cols: usize, degrees: f64) -> Vec<f64> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
            0.0
        } else {
            image[r as usize * cols + c as usize]
        }
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let sx = cx + x * cos - y * sin;
            let sy = cy + x * sin + y * cos;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out[r * cols + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Images with identity and domain labels, pooled across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainDataset {
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub num_ids: usize,
    pub num_domains: usize,
    /// Human-readable domain names, one per domain.
    pub domain_tags: Vec<String>,
    #[serde(skip)]
    pub pixels: Vec<f64>,
    #[serde(skip)]
    pub identities: Vec<usize>,
    #[serde(skip)]
    pub domains: Vec<usize>,
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pixels: Tensor,
    pub ids: Vec<usize>,
    pub domains: Vec<usize>,
}

impl MultiDomainDataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.domains.len() != n || self.pixels.len() != n * self.image_len() {
            return Err(Error::Length("dataset arrays disagree in length".into()));
        }
        if self.domain_tags.len() != self.num_domains {
            return Err(Error::Length("one tag per domain required".into()));
        }
        if let Some(&y) = self.identities.iter().find(|&&y| y >= self.num_ids) {
            return Err(Error::Contract(format!("identity {y} outside [0, {})", self.num_ids)));
        }
        if let Some(&d) = self.domains.iter().find(|&&d| d >= self.num_domains) {
            return Err(Error::Contract(format!("domain {d} outside [0, {})", self.num_domains)));
        }
        for d in 0..self.num_domains {
            if !self.domains.contains(&d) {
                return Err(Error::Contract(format!("domain {d} is empty")));
            }
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Ok(Batch {
            pixels: Tensor::new(shape, pixels)?,
            ids: indices.iter().map(|&i| self.identities[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
        })
    }

    /// All images as one `[N, C, H, W]` tensor.
    pub fn all_pixels(&self) -> Result<Tensor> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.image_shape);
        Tensor::new(shape, self.pixels.clone())
    }

    /// Samples with the given domain labels, keeping the label space.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = MultiDomainDataset {
            pixels: Vec::with_capacity(indices.len() * self.image_len()),
            identities: Vec::with_capacity(indices.len()),
            domains: Vec::with_capacity(indices.len()),
            ..self.clone_header()
        };
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.identities.push(self.identities[i]);
            out.domains.push(self.domains[i]);
        }
        out
    }

    fn clone_header(&self) -> Self {
        MultiDomainDataset {
            image_shape: self.image_shape,
            num_ids: self.num_ids,
            num_domains: self.num_domains,
            domain_tags: self.domain_tags.clone(),
            pixels: Vec::new(),
            identities: Vec::new(),
            domains: Vec::new(),
        }
    }

    /// Splits off domain `d` as its own single-domain set; the rest keep their
    /// labels, renumbered to stay contiguous.
    pub fn hold_out_domain(&self, d: usize) -> Result<(Self, Self)> {
        if d >= self.num_domains {
            return Err(Error::Contract(format!("domain {d} outside [0, {})", self.num_domains)));
        }
        let mut rest = self.subset(&self.select(|i| self.domains[i] != d));
        rest.domains.iter_mut().filter(|x| **x > d).for_each(|x| *x -= 1);
        rest.num_domains -= 1;
        rest.domain_tags.remove(d);
        let mut held = self.subset(&self.select(|i| self.domains[i] == d));
        held.domains.iter_mut().for_each(|x| *x = 0);
        held.num_domains = 1;
        held.domain_tags = vec![self.domain_tags[d].clone()];
        Ok((rest, held))
    }

    /// Writes `manifest.csv`, `pixels.bin` and `dataset.json` into `dir`.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
        w.write_record(["index", "identity", "domain"]).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record([i.to_string(), self.identities[i].to_string(), self.domains[i].to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        let mut bytes = Vec::with_capacity(self.pixels.len() * 8);
        for p in &self.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(dir.join("pixels.bin"), bytes)?;
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_cache(dir: &Path) -> Result<Self> {
        let mut ds: MultiDomainDataset = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        let mut r = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
        for (row, rec) in r.deserialize::<(usize, usize, usize)>().enumerate() {
            let (index, identity, domain) = rec.map_err(csv_err)?;
            if index != row {
                return Err(Error::Format(format!("manifest row {row} has index {index}")));
            }
            ds.identities.push(identity);
            ds.domains.push(domain);
        }
        let bytes = std::fs::read(dir.join("pixels.bin"))?;
        if bytes.len() != ds.len() * ds.image_len() * 8 {
            return Err(Error::Length(format!(
                "pixels.bin holds {} bytes, manifest implies {}",
                bytes.len(),
                ds.len() * ds.image_len() * 8
            )));
        }
        ds.pixels = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        ds.validate()?;
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// `per_class` indices of each class `0..classes`, sampled without replacement.
pub fn sample_per_class<R: Rng>(labels: &[usize], classes: usize, per_class: usize, exclude: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let pool: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == class && !exclude.contains(&i))
            .collect();
        if pool.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {class} has {} images, need {per_class}",
                pool.len()
            )));
        }
        out.extend(sample(rng, pool.len(), per_class).into_iter().map(|p| pool[p]));
    }
    Ok(out)
}

/// Builds one domain per angle from the same source images.
pub fn rotated_domains(pool: &ImagePool, indices: &[usize], angles: &[f64]) -> MultiDomainDataset {
    let mut ds = MultiDomainDataset {
        image_shape: [1, pool.rows, pool.cols],
        num_ids: 10,
        num_domains: angles.len(),
        domain_tags: angles.iter().map(|a| format!("{a}deg")).collect(),
        pixels: Vec::new(),
        identities: Vec::new(),
        domains: Vec::new(),
    };
    for (d, &angle) in angles.iter().enumerate() {
        for &i in indices {
            if angle == 0.0 {
                ds.pixels.extend_from_slice(pool.image(i));
            } else {
                ds.pixels.extend(rotate(pool.image(i), pool.rows, pool.cols, angle));
            }
            ds.identities.push(pool.labels[i]);
            ds.domains.push(d);
        }
    }
    ds
}

pub const MNIST_TRAIN_ANGLES: [f64; 5] = [0.0, 15.0, 30.0, 45.0, 60.0];
pub const MNIST_TEST_ANGLE: f64 = 75.0;
pub const MNIST_PER_CLASS: usize = 100;

#[derive(Debug, Clone)]
pub struct RotatedMnist {
    pub train: MultiDomainDataset,
    pub test: MultiDomainDataset,
    /// Source indices of the training digits, class-major.
    pub train_indices: Vec<usize>,
    /// Source indices (into the test pool) of the test digits.
    pub test_indices: Vec<usize>,
}

/// 100 digits per class from `train_pool`, replicated at 0/15/30/45/60 degrees,
/// and a disjoint 100-per-class sample from `test_pool` rotated 75 degrees.
pub fn build_rotated_mnist(train_pool: &ImagePool, test_pool: &ImagePool, seed: u64) -> Result<RotatedMnist> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_indices = sample_per_class(&train_pool.labels, 10, MNIST_PER_CLASS, &[], &mut rng)?;
    let test_indices = sample_per_class(&test_pool.labels, 10, MNIST_PER_CLASS, &[], &mut rng)?;
    Ok(RotatedMnist {
        train: rotated_domains(train_pool, &train_indices, &MNIST_TRAIN_ANGLES),
        test: rotated_domains(test_pool, &test_indices, &[MNIST_TEST_ANGLE]),
        train_indices,
        test_indices,
    })
}

/// Fresh digits from the training pool (excluding `used`) at the training
/// angles, for probing latents on held-out samples of the seen domains.
pub fn rotated_mnist_heldout(train_pool: &ImagePool, used: &[usize], per_class: usize, seed: u64) -> Result<MultiDomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_4e1d);
    let mut sorted = used.to_vec();
    sorted.sort_unstable();
    let labels_masked: Vec<usize> = (0..train_pool.len())
        .map(|i| if sorted.binary_search(&i).is_ok() { usize::MAX } else { train_pool.labels[i] })
        .collect();
    let idx = sample_per_class(&labels_masked, 10, per_class, &[], &mut rng)?;
    Ok(rotated_domains(train_pool, &idx, &MNIST_TRAIN_ANGLES))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub ids: usize,
    pub per_class: usize,
    pub image_size: usize,
}

struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
}

struct DomainStyle {
    brightness: f64,
    texture_amp: f64,
    freq: (f64, f64),
    phase: f64,
    /// Inverse affine map applied to centered output coordinates.
    warp: [[f64; 2]; 2],
}

fn segment_distance(p: (f64, f64), s: &Stroke) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// A deterministic multi-domain glyph dataset.
///
/// Each class is a fixed set of three strokes. Each domain applies its own
/// affine warp to the glyph, a brightness offset and a sinusoidal background
/// texture. Samples add a small random shift, stroke-intensity change and
/// pixel noise.
pub fn make_synthetic_blobs(domains: usize, ids: usize, per_class: usize, image_size: usize, seed: u64) -> Result<MultiDomainDataset> {
    synthetic_draw(domains, ids, per_class, image_size, seed, 0)
}

/// Like [`make_synthetic_blobs`] with the same glyphs and styles but an
/// independent stream of per-sample variation.
pub fn synthetic_draw(domains: usize, ids: usize, per_class: usize, image_size: usize, seed: u64, draw: u64) -> Result<MultiDomainDataset> {
    if domains < 2 || ids < 2 {
        return Err(Error::config("data", "synthetic data needs at least 2 domains and 2 classes"));
    }
    if per_class == 0 || image_size < 8 {
        return Err(Error::config("data", "per_class must be positive and image_size at least 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rng.set_stream(1 + draw);
    let glyphs: Vec<Vec<Stroke>> = (0..ids)
        .map(|_| {
            (0..3)
                .map(|_| Stroke {
                    a: (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)),
                    b: (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)),
                })
                .collect()
        })
        .collect();
    let styles: Vec<DomainStyle> = (0..domains)
        .map(|d| {
            let angle = (d as f64 * 25.0 + rng.gen_range(-5.0..5.0)).to_radians();
            let scale = rng.gen_range(0.85..1.15);
            let shear = rng.gen_range(-0.25..0.25);
            let (s, c) = angle.sin_cos();
            // forward = R(angle) · [[scale, shear], [0, scale]]; store its inverse
            let f = [[c * scale, c * shear - s * scale], [s * scale, s * shear + c * scale]];
            let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
            DomainStyle {
                brightness: 0.25 * d as f64 / (domains - 1) as f64,
                texture_amp: rng.gen_range(0.05..0.15),
                freq: (rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5)),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                warp: [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]],
            }
        })
        .collect();
    let n = image_size;
    let half = (n as f64 - 1.0) / 2.0;
    let mut ds = MultiDomainDataset {
        image_shape: [1, n, n],
        num_ids: ids,
        num_domains: domains,
        domain_tags: (0..domains).map(|d| format!("style{d}")).collect(),
        pixels: Vec::with_capacity(domains * ids * per_class * n * n),
        identities: Vec::new(),
        domains: Vec::new(),
    };
    for (d, style) in styles.iter().enumerate() {
        for (y, glyph) in glyphs.iter().enumerate() {
            for _ in 0..per_class {
                let shift = (sample_rng.gen_range(-0.12..0.12), sample_rng.gen_range(-0.12..0.12));
                let strength = sample_rng.gen_range(0.6..1.0);
                let width = sample_rng.gen_range(0.08..0.14);
                for r in 0..n {
                    for c in 0..n {
                        let (u, v) = ((c as f64 - half) / half, (r as f64 - half) / half);
                        let gx = style.warp[0][0] * u + style.warp[0][1] * v - shift.0;
                        let gy = style.warp[1][0] * u + style.warp[1][1] * v - shift.1;
                        let dist = glyph
                            .iter()
                            .map(|s| segment_distance((gx, gy), s))
                            .fold(f64::INFINITY, f64::min);
                        let ink = (1.0 - (dist - width).max(0.0) / 0.12).clamp(0.0, 1.0);
                        let texture = style.texture_amp
                            * (0.5 + 0.5 * (style.freq.0 * 3.0 * u + style.freq.1 * 3.0 * v + style.phase).sin());
                        let noise = sample_rng.gen_range(-0.05..0.05);
                        let p = style.brightness + texture + strength * ink + noise;
                        ds.pixels.push(p.clamp(0.0, 1.0));
                    }
                }
                ds.identities.push(y);
                ds.domains.push(d);
            }
        }
    }
    Ok(ds)
}

/// Generates `spec.domains + 1` styles and holds the last one out as the
/// unseen test domain.
pub fn synthetic_split(spec: &SyntheticSpec, seed: u64) -> Result<(MultiDomainDataset, MultiDomainDataset)> {
    let all = make_synthetic_blobs(spec.domains + 1, spec.ids, spec.per_class, spec.image_size, seed)?;
    all.hold_out_domain(spec.domains)
}

/// Fresh samples of the training styles of [`synthetic_split`].
pub fn synthetic_heldout(spec: &SyntheticSpec, seed: u64) -> Result<MultiDomainDataset> {
    let all = synthetic_draw(spec.domains + 1, spec.ids, spec.per_class, spec.image_size, seed, 1)?;
    Ok(all.hold_out_domain(spec.domains)?.0)
}

/// One epoch of shuffled mini-batch index lists; the short remainder is dropped.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Contract(format!("batch size {batch_size} does not fit {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Mini-batches of one shuffled epoch.
pub fn batch_iter<'a>(dataset: &'a MultiDomainDataset, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Batch> + 'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = epoch_batches(dataset.len(), batch_size, &mut rng)?;
    Ok(plan.into_iter().map(move |idx| dataset.batch(&idx).expect("indices come from the dataset")))
}
