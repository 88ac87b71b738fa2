//! Deterministic synthetic face-like corpora for tests, examples and demos.
//!
//! Images are 32x32 RGB built from cosine patterns, so every property a test
//! relies on (identity structure, attribute effects, frequency content) is
//! known by construction.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, ImageRecord, InMemoryImages};
use crate::error::{Error, Result};
use crate::perturb::quantize;

pub const SIDE: u32 = 32;

/// Images plus CelebA-style annotations, in record order.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub attribute_names: Vec<String>,
    pub ids: Vec<String>,
    pub identities: Vec<i64>,
    pub attributes: Vec<Vec<bool>>,
    pub images: Vec<RgbImage>,
}

/// Where [`SyntheticCorpus::write`] put things.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub image_dir: PathBuf,
    pub identity_file: PathBuf,
    pub attr_file: PathBuf,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn file_name(id: &str) -> String {
        format!("{id}.png")
    }

    /// Dataset whose records point into `image_dir` (files need not exist).
    pub fn dataset(&self, image_dir: &Path) -> Result<Dataset> {
        let records = (0..self.len())
            .map(|i| ImageRecord {
                id: self.ids[i].clone(),
                path: image_dir.join(Self::file_name(&self.ids[i])),
                identity: self.identities[i],
                attributes: self.attributes[i].clone(),
            })
            .collect();
        Dataset::new(records, self.attribute_names.clone())
    }

    /// Dataset and decoded images without touching the filesystem.
    pub fn in_memory(&self) -> Result<(Dataset, InMemoryImages)> {
        Ok((self.dataset(Path::new("."))?, InMemoryImages(self.images.clone())))
    }

    /// Write PNGs to `dir/images` plus identity and attribute files.
    pub fn write(&self, dir: &Path) -> Result<CorpusPaths> {
        let image_dir = dir.join("images");
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        let mut identity = String::new();
        let mut attrs = format!("{}\n{}\n", self.len(), self.attribute_names.join(" "));
        for i in 0..self.len() {
            let name = Self::file_name(&self.ids[i]);
            let path = image_dir.join(&name);
            self.images[i].save(&path).map_err(|source| Error::Image {
                what: path.display().to_string(),
                source,
            })?;
            identity.push_str(&format!("{name} {}\n", self.identities[i]));
            attrs.push_str(&name);
            for &a in &self.attributes[i] {
                attrs.push_str(if a { "  1" } else { " -1" });
            }
            attrs.push('\n');
        }
        let identity_file = dir.join("identity.txt");
        let attr_file = dir.join("attributes.txt");
        fs::write(&identity_file, identity).map_err(|e| Error::io(&identity_file, e))?;
        fs::write(&attr_file, attrs).map_err(|e| Error::io(&attr_file, e))?;
        Ok(CorpusPaths {
            image_dir,
            identity_file,
            attr_file,
        })
    }
}

/// Separable cosine basis value at pixel `(x, y)` for frequencies `(fx, fy)`.
fn basis(fx: u32, fy: u32, x: u32, y: u32) -> f64 {
    let s = SIDE as f64;
    (PI * fx as f64 * (x as f64 + 0.5) / s).cos() * (PI * fy as f64 * (y as f64 + 0.5) / s).cos()
}

/// Random combination of the basis functions with frequencies in `freqs`,
/// scaled to unit RMS.
fn random_field(rng: &mut ChaCha8Rng, freqs: &[(u32, u32)]) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let weights: Vec<f64> = freqs.iter().map(|_| normal.sample(rng)).collect();
    let mut field = vec![0.0; (SIDE * SIDE) as usize];
    for y in 0..SIDE {
        for x in 0..SIDE {
            field[(y * SIDE + x) as usize] = freqs
                .iter()
                .zip(&weights)
                .map(|(&(fx, fy), w)| w * basis(fx, fy, x, y))
                .sum();
        }
    }
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    if rms > 0.0 {
        field.iter_mut().for_each(|v| *v /= rms);
    }
    field
}

fn render(channels: impl Fn(u32, u32, usize) -> f64) -> RgbImage {
    RgbImage::from_fn(SIDE, SIDE, |x, y| {
        Rgb([quantize(channels(x, y, 0)), quantize(channels(x, y, 1)), quantize(channels(x, y, 2))])
    })
}

fn low_freqs() -> Vec<(u32, u32)> {
    (0..=2u32)
        .flat_map(|fy| (0..=2u32).map(move |fx| (fx, fy)))
        .filter(|&f| f != (0, 0))
        .collect()
}

fn high_freqs() -> Vec<(u32, u32)> {
    [(10, 0), (0, 10), (12, 3), (3, 12), (9, 9), (14, 1), (1, 14)].to_vec()
}

/// `identities x per_identity` images with two identity-level attributes:
/// `Bright` (higher mean luminance, clips sooner under exposure) and
/// `Textured` (identity detail partly in high frequencies, lost to blur).
pub fn standard_corpus(identities: usize, per_identity: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (low, high) = (low_freqs(), high_freqs());
    let mut c = SyntheticCorpus {
        attribute_names: vec!["Bright".into(), "Textured".into()],
        ids: Vec::new(),
        identities: Vec::new(),
        attributes: Vec::new(),
        images: Vec::new(),
    };
    for k in 0..identities {
        let bright = k % 2 == 0;
        let textured = (k / 2) % 2 == 0;
        let base = random_field(&mut rng, &low);
        let texture = random_field(&mut rng, &high);
        let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.8..1.2)).collect();
        let mean = if bright { 0.66 } else { 0.36 };
        for _ in 0..per_identity {
            let variation = random_field(&mut rng, &low);
            let offset = rng.random_range(-0.03..0.03);
            let image = render(|x, y, ch| {
                let i = (y * SIDE + x) as usize;
                let mut p = 0.13 * (base[i] + 0.55 * variation[i]);
                if textured {
                    p += 0.09 * texture[i];
                }
                mean + offset + tint[ch] * p
            });
            c.ids.push(format!("{:06}", c.ids.len() + 1));
            c.identities.push(k as i64 + 1);
            c.attributes.push(vec![bright, textured]);
            c.images.push(image);
        }
    }
    c
}

/// The 64-image corpus used by the end-to-end checks and `fairsa synth`.
pub fn default_corpus(seed: u64) -> SyntheticCorpus {
    standard_corpus(16, 4, seed)
}

/// Two subgroups of `per_group` single-image identities. `Stripes` images
/// carry their identity in column-alternating stripes at the highest
/// frequency the toy embedder resolves; the others in smooth quadratic
/// gradients. `Even` marks even record positions and is unrelated to content.
pub fn directional_corpus(per_group: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal: Normal<f64> = Normal::new(0.0, 1.0).expect("valid normal");
    let mut c = SyntheticCorpus {
        attribute_names: vec!["Stripes".into(), "Even".into()],
        ids: Vec::new(),
        identities: Vec::new(),
        attributes: Vec::new(),
        images: Vec::new(),
    };
    for n in 0..2 * per_group {
        // Interleave the groups so neither occupies a contiguous id range.
        let stripes = n % 2 == 0;
        let image = if stripes {
            let rows: Vec<f64> = (0..SIDE / 2).map(|_| (normal.sample(&mut rng) / 2.5).clamp(-1.0, 1.0)).collect();
            render(|x, y, _| {
                let sign = if (x / 2) % 2 == 0 { 1.0 } else { -1.0 };
                0.5 + 0.3 * sign * rows[(y / 2) as usize]
            })
        } else {
            let w: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
            let field: Vec<f64> = (0..SIDE * SIDE)
                .map(|i| {
                    let u = 2.0 * ((i % SIDE) as f64 + 0.5) / SIDE as f64 - 1.0;
                    let v = 2.0 * ((i / SIDE) as f64 + 0.5) / SIDE as f64 - 1.0;
                    w[0] * u + w[1] * v + w[2] * (u * u - 1.0 / 3.0) + w[3] * (v * v - 1.0 / 3.0) + w[4] * u * v
                })
                .collect();
            let peak = field.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
            render(|x, y, _| 0.5 + 0.3 * field[(y * SIDE + x) as usize] / peak)
        };
        c.ids.push(format!("{:06}", n + 1));
        c.identities.push(n as i64 + 1);
        c.attributes.push(vec![stripes, n % 2 == 0 && (n / 2) % 2 == 0]);
        c.images.push(image);
    }
    c
}
