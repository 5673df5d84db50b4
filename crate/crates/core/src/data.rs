//! Procedurally rendered multi-domain image classification data.
//!
//! A class is a shape family (bar, cross, blob, ring, ...) drawn with random
//! position, size and orientation. A domain is a rendering style (intensity
//! palette, background texture, noise level, stroke thickness) applied to every
//! sample of that domain, which gives a controlled distribution shift between
//! domains while keeping the class semantics fixed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PegoError, Result};
use crate::numerics::{Matrix, Rng};

/// Identity of a sample within its dataset, used to audit which data reached
/// a gradient step or a selection decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub domain: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Matrix,
    pub label: usize,
    pub id: SampleId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.domains.iter().map(Domain::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// Resolves a domain given by name or by index.
    pub fn resolve_domain(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.domain_index(key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.domains.len() => Ok(i),
            _ => Err(PegoError::Input(format!("unknown domain `{key}`"))),
        }
    }

    /// Dataset restricted to the listed domains, in the given order. Sample ids
    /// keep their original domain index.
    pub fn subset(&self, domains: &[usize]) -> DomainDataset {
        DomainDataset {
            domains: domains.iter().map(|&d| self.domains[d].clone()).collect(),
            num_classes: self.num_classes,
            image_size: self.image_size,
        }
    }

    /// `counts[domain][class]`
    pub fn class_counts(&self) -> Vec<Vec<usize>> {
        self.domains
            .iter()
            .map(|d| {
                let mut c = vec![0; self.num_classes];
                for s in &d.samples {
                    c[s.label] += 1;
                }
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(PegoError::Input("a domain dataset needs more than one domain".into()));
        }
        for (d, counts) in self.class_counts().iter().enumerate() {
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(PegoError::Input(format!(
                    "domain `{}` has no sample of class {c}",
                    self.domains[d].name
                )));
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.domains.iter().flat_map(|d| d.samples.iter())
    }
}

/// Shape families, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Bar,
    Cross,
    Blob,
    Ring,
    Square,
    Triangle,
    Corner,
    DotPair,
}

pub const SHAPE_FAMILIES: [ShapeFamily; 8] = [
    ShapeFamily::Bar,
    ShapeFamily::Cross,
    ShapeFamily::Blob,
    ShapeFamily::Ring,
    ShapeFamily::Square,
    ShapeFamily::Triangle,
    ShapeFamily::Corner,
    ShapeFamily::DotPair,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Flat,
    Stripes { period: f64, angle: f64 },
    Checker { period: f64 },
    Gradient { angle: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub name: String,
    pub foreground: f64,
    pub background: f64,
    pub texture: Texture,
    pub texture_amp: f64,
    pub noise: f64,
    pub thickness: f64,
}

impl Style {
    /// Fixed styles for the first four domains.
    pub fn preset(index: usize) -> Option<Style> {
        let s = |name: &str, fg, bg, texture, amp, noise, thickness| Style {
            name: name.to_string(),
            foreground: fg,
            background: bg,
            texture,
            texture_amp: amp,
            noise,
            thickness,
        };
        match index {
            0 => Some(s("photo", 1.0, 0.0, Texture::Flat, 0.0, 0.05, 1.5)),
            1 => Some(s(
                "striped",
                0.9,
                0.3,
                Texture::Stripes {
                    period: 4.0,
                    angle: 0.6,
                },
                0.25,
                0.05,
                1.2,
            )),
            2 => Some(s("noisy", 0.8, 0.2, Texture::Gradient { angle: 2.2 }, 0.3, 0.2, 2.0)),
            3 => Some(s(
                "inverted",
                0.15,
                0.85,
                Texture::Checker { period: 4.0 },
                0.1,
                0.05,
                1.5,
            )),
            _ => None,
        }
    }

    pub fn random(name: String, rng: &mut Rng) -> Style {
        let foreground = rng.uniform();
        let mut background = rng.uniform();
        if (foreground - background).abs() < 0.35 {
            background = if foreground > 0.5 {
                foreground - 0.35 - 0.3 * rng.uniform() * (foreground - 0.35)
            } else {
                foreground + 0.35 + 0.3 * rng.uniform() * (0.65 - foreground)
            };
        }
        let texture = match rng.below(4) {
            0 => Texture::Flat,
            1 => Texture::Stripes {
                period: rng.uniform_in(2.5, 6.0),
                angle: rng.uniform_in(0.0, PI),
            },
            2 => Texture::Checker {
                period: rng.uniform_in(2.0, 6.0),
            },
            _ => Texture::Gradient {
                angle: rng.uniform_in(0.0, 2.0 * PI),
            },
        };
        Style {
            name,
            foreground,
            background,
            texture,
            texture_amp: rng.uniform_in(0.0, 0.3),
            noise: rng.uniform_in(0.0, 0.2),
            thickness: rng.uniform_in(1.0, 2.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domains: usize,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    /// The canonical desk-scale dataset: 4 domains x 4 classes x 100 per class.
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 4,
            per_class: 100,
            image_size: 16,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 3 {
            return Err(PegoError::Config(format!(
                "need at least 3 domains to hold one out, got {}",
                self.domains
            )));
        }
        if self.classes < 2 || self.classes > SHAPE_FAMILIES.len() {
            return Err(PegoError::Config(format!(
                "classes must lie in 2..={}, got {}",
                SHAPE_FAMILIES.len(),
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(PegoError::Config("per_class must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(PegoError::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

/// Renders every domain with its own style; samples are ordered class-major
/// within a domain.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<DomainDataset> {
    cfg.validate()?;
    let mut root = Rng::new(seed);
    let mut domains = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let mut rng = root.fork();
        let style = Style::preset(d).unwrap_or_else(|| Style::random(format!("style{d}"), &mut rng));
        let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
        for (class, &shape) in SHAPE_FAMILIES.iter().take(cfg.classes).enumerate() {
            for _ in 0..cfg.per_class {
                let index = samples.len();
                samples.push(Sample {
                    image: render(shape, &style, cfg.image_size, &mut rng),
                    label: class,
                    id: SampleId { domain: d, index },
                });
            }
        }
        domains.push(Domain {
            name: style.name.clone(),
            samples,
        });
    }
    Ok(DomainDataset {
        domains,
        num_classes: cfg.classes,
        image_size: cfg.image_size,
    })
}

/// One sample with a freshly drawn random style, for the style-diverse
/// pre-training stream.
pub fn random_style_sample(classes: usize, image_size: usize, rng: &mut Rng) -> Sample {
    let label = rng.below(classes);
    let style = Style::random(String::new(), rng);
    Sample {
        image: render(SHAPE_FAMILIES[label], &style, image_size, rng),
        label,
        id: SampleId {
            domain: usize::MAX,
            index: 0,
        },
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn polygon_outline_distance(p: (f64, f64), pts: &[(f64, f64)]) -> f64 {
    (0..pts.len())
        .map(|i| segment_distance(p, pts[i], pts[(i + 1) % pts.len()]))
        .fold(f64::INFINITY, f64::min)
}

/// Draws one shape into a `size x size` image.
pub fn render(shape: ShapeFamily, style: &Style, size: usize, rng: &mut Rng) -> Matrix {
    let s = size as f64;
    let c = (
        s / 2.0 + rng.uniform_in(-0.12, 0.12) * s,
        s / 2.0 + rng.uniform_in(-0.12, 0.12) * s,
    );
    let radius = rng.uniform_in(0.25, 0.36) * s;
    let theta = rng.uniform_in(0.0, PI);
    let u = (theta.cos(), theta.sin());
    let v = (-u.1, u.0);
    let at = |k: f64, dir: (f64, f64)| (c.0 + k * dir.0, c.1 + k * dir.1);
    let thickness = style.thickness * rng.uniform_in(0.85, 1.15);
    let stroke = |dist: f64| (thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
    let fill = |sdf: f64| (0.5 - sdf).clamp(0.0, 1.0);

    let coverage = |p: (f64, f64)| -> f64 {
        let r = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
        match shape {
            ShapeFamily::Bar => stroke(segment_distance(p, at(-radius, u), at(radius, u))),
            ShapeFamily::Cross => {
                let d1 = segment_distance(p, at(-0.9 * radius, u), at(0.9 * radius, u));
                let d2 = segment_distance(p, at(-0.9 * radius, v), at(0.9 * radius, v));
                stroke(d1.min(d2))
            }
            ShapeFamily::Blob => fill(r - 0.6 * radius),
            ShapeFamily::Ring => stroke((r - 0.8 * radius).abs()),
            ShapeFamily::Square => {
                let h = 0.75 * radius;
                let corners = [(-h, -h), (h, -h), (h, h), (-h, h)]
                    .map(|(a, b)| (c.0 + a * u.0 + b * v.0, c.1 + a * u.1 + b * v.1));
                stroke(polygon_outline_distance(p, &corners))
            }
            ShapeFamily::Triangle => {
                let pts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = theta + k as f64 * 2.0 * PI / 3.0;
                        (c.0 + radius * a.cos(), c.1 + radius * a.sin())
                    })
                    .collect();
                stroke(polygon_outline_distance(p, &pts))
            }
            ShapeFamily::Corner => {
                let o = (c.0 - 0.7 * radius * (u.0 + v.0), c.1 - 0.7 * radius * (u.1 + v.1));
                let e1 = (o.0 + 1.4 * radius * u.0, o.1 + 1.4 * radius * u.1);
                let e2 = (o.0 + 1.4 * radius * v.0, o.1 + 1.4 * radius * v.1);
                stroke(segment_distance(p, o, e1).min(segment_distance(p, o, e2)))
            }
            ShapeFamily::DotPair => {
                let a = at(0.7 * radius, u);
                let b = at(-0.7 * radius, u);
                let da = ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt();
                let db = ((p.0 - b.0).powi(2) + (p.1 - b.1).powi(2)).sqrt();
                fill(da.min(db) - 0.3 * radius)
            }
        }
    };

    let phase = rng.uniform_in(0.0, 2.0 * PI);
    let texture = |x: f64, y: f64| -> f64 {
        match style.texture {
            Texture::Flat => 0.0,
            Texture::Stripes { period, angle } => {
                (2.0 * PI * (x * angle.cos() + y * angle.sin()) / period + phase).sin()
            }
            Texture::Checker { period } => {
                let cx = (x / period).floor() as i64;
                let cy = (y / period).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Gradient { angle } => ((x - s / 2.0) * angle.cos() + (y - s / 2.0) * angle.sin()) / (s / 2.0),
        }
    };

    let mut img = Matrix::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let cov = coverage(p);
            let mut val = style.background + (style.foreground - style.background) * cov;
            val += style.texture_amp * texture(p.0, p.1) * (1.0 - cov);
            val += style.noise * rng.gaussian();
            img[(y, x)] = val;
        }
    }
    img
}

/// Per-domain split stratified by class. Each domain contributes
/// `floor(fraction * n)` validation samples.
pub fn split_train_val(dataset: &DomainDataset, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PegoError::Config(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::with_capacity(dataset.domains.len());
    let mut val = Vec::with_capacity(dataset.domains.len());
    for domain in &dataset.domains {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (i, s) in domain.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        for (c, idx) in by_class.iter().enumerate() {
            if idx.len() < 2 {
                return Err(PegoError::Split(format!(
                    "class {c} of domain `{}` has {} sample(s); at least 2 are needed",
                    domain.name,
                    idx.len()
                )));
            }
        }
        let n = domain.len();
        let target = (fraction * n as f64).floor() as usize;
        // Largest-remainder allocation of the validation quota across classes.
        let exact: Vec<f64> = by_class.iter().map(|v| fraction * v.len() as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut missing = target - quota.iter().sum::<usize>();
        for &c in order.iter().cycle().take(order.len() * 2) {
            if missing == 0 {
                break;
            }
            if quota[c] + 1 < by_class[c].len() {
                quota[c] += 1;
                missing -= 1;
            }
        }

        let mut is_val = vec![false; n];
        for (c, idx) in by_class.iter_mut().enumerate() {
            rng.shuffle(idx);
            for &i in idx.iter().take(quota[c]) {
                is_val[i] = true;
            }
        }
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (i, s) in domain.samples.iter().enumerate() {
            if is_val[i] {
                va.push(s.clone());
            } else {
                tr.push(s.clone());
            }
        }
        train.push(Domain {
            name: domain.name.clone(),
            samples: tr,
        });
        val.push(Domain {
            name: domain.name.clone(),
            samples: va,
        });
    }
    let wrap = |domains| DomainDataset {
        domains,
        num_classes: dataset.num_classes,
        image_size: dataset.image_size,
    };
    Ok((wrap(train), wrap(val)))
}

/// `per_domain` samples from every domain, concatenated in domain order.
/// Draws without replacement when a domain is large enough, with replacement
/// otherwise.
pub fn make_batch(sources: &DomainDataset, per_domain: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut batch = Vec::with_capacity(per_domain * sources.domains.len());
    for domain in &sources.domains {
        let n = domain.len();
        if n == 0 {
            continue;
        }
        if n >= per_domain {
            let mut idx: Vec<usize> = (0..n).collect();
            for k in 0..per_domain {
                let j = k + rng.below(n - k);
                idx.swap(k, j);
                batch.push(domain.samples[idx[k]].clone());
            }
        } else {
            for _ in 0..per_domain {
                batch.push(domain.samples[rng.below(n)].clone());
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DataConfig {
        DataConfig {
            domains: 3,
            classes: 2,
            per_class: 5,
            image_size: 8,
            seed: 0,
        }
    }

    #[test]
    fn canonical_counts() {
        let ds = generate_dataset(&DataConfig::default(), 1).unwrap();
        assert_eq!(ds.len(), 1600);
        assert_eq!(ds.domains.len(), 4);
        for counts in ds.class_counts() {
            assert_eq!(counts, vec![100; 4]);
        }
        ds.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&tiny(), 9).unwrap();
        let b = generate_dataset(&tiny(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&tiny(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs() {
        for cfg in [
            DataConfig { domains: 2, ..tiny() },
            DataConfig { classes: 1, ..tiny() },
            DataConfig { classes: 9, ..tiny() },
            DataConfig { per_class: 0, ..tiny() },
        ] {
            assert!(matches!(generate_dataset(&cfg, 0), Err(PegoError::Config(_))));
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let cfg = DataConfig {
            per_class: 25,
            ..tiny()
        };
        let ds = generate_dataset(&cfg, 2).unwrap();
        let (tr, va) = split_train_val(&ds, 0.2, 4).unwrap();
        for (t, v) in tr.domains.iter().zip(&va.domains) {
            assert_eq!(v.len(), 10);
            assert_eq!(t.len(), 40);
        }
        let mut ids: Vec<SampleId> = tr.samples().chain(va.samples()).map(|s| s.id).collect();
        ids.sort();
        let mut orig: Vec<SampleId> = ds.samples().map(|s| s.id).collect();
        orig.sort();
        assert_eq!(ids, orig);
        let (tr2, va2) = split_train_val(&ds, 0.2, 4).unwrap();
        assert_eq!((tr, va), (tr2, va2));
    }

    #[test]
    fn split_rejects_singleton_class() {
        let cfg = DataConfig { per_class: 1, ..tiny() };
        let ds = generate_dataset(&cfg, 0).unwrap();
        assert!(matches!(split_train_val(&ds, 0.2, 0), Err(PegoError::Split(_))));
        let ds = generate_dataset(&tiny(), 0).unwrap();
        assert!(split_train_val(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn batch_sizes() {
        let ds = generate_dataset(
            &DataConfig {
                per_class: 20,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(make_batch(&ds, 8, &mut rng).len(), 24);
        assert_eq!(make_batch(&ds, 32, &mut rng).len(), 96);
        let a = make_batch(&ds, 8, &mut Rng::new(5));
        let b = make_batch(&ds, 8, &mut Rng::new(5));
        assert_eq!(a, b);
        // without replacement when possible
        let mut ids: Vec<SampleId> = a.iter().map(|s| s.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 24);
    }

    #[test]
    fn small_domain_sampled_with_replacement() {
        let ds = generate_dataset(&tiny(), 0).unwrap();
        let batch = make_batch(&ds, 32, &mut Rng::new(1));
        assert_eq!(batch.len(), 96);
    }

    #[test]
    fn rendered_images_are_finite_and_vary() {
        let mut rng = Rng::new(3);
        for (k, &shape) in SHAPE_FAMILIES.iter().enumerate() {
            let style = Style::preset(k % 4).unwrap();
            let img = render(shape, &style, 16, &mut rng);
            assert!(img.is_finite());
            assert!(img.max_abs() > 0.0);
        }
    }
}
