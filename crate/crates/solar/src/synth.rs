//! Synthetic retrieval benchmark.
//!
//! Each class is a distinct procedural texture (a seeded sum of oriented
//! sinusoids) rendered under instance transforms: translation and rotation
//! of the sampling grid, brightness jitter and optional occlusion. The
//! generator emits a training split, one query per class, a database split
//! and the matching ground truth: mildly transformed instances are easy,
//! strongly transformed ones hard, and half-occluded ones junk.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::eval::{QueryGroundTruth, RetrievalGroundTruth};
use crate::imageio::{read_image, write_image, Image};
use crate::loss::ClassId;

/// An image with an identifier and class label.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub class: ClassId,
    pub image: Image,
}

/// The generated dataset: training images, queries, database and ground
/// truth.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train: Vec<LabeledImage>,
    pub queries: Vec<LabeledImage>,
    pub database: Vec<LabeledImage>,
    pub ground_truth: RetrievalGroundTruth,
}

/// One class's analytic texture: three oriented sinusoidal gratings.
#[derive(Debug, Clone)]
struct Texture {
    comps: [(f64, f64, f64, f64); 3], // (frequency, orientation, phase, weight)
}

impl Texture {
    fn sample(rng: &mut ChaCha12Rng) -> Self {
        let mut comps = [(0.0, 0.0, 0.0, 0.0); 3];
        for slot in comps.iter_mut() {
            *slot = (
                rng.gen_range(0.04..0.22),
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            );
        }
        Texture { comps }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for &(freq, theta, phase, weight) in &self.comps {
            let u = x * theta.cos() + y * theta.sin();
            acc += weight * (std::f64::consts::TAU * freq * u + phase).sin();
            norm += weight;
        }
        0.5 + 0.5 * acc / norm
    }
}

#[derive(Debug, Clone, Copy)]
enum Severity {
    Mild,
    Strong,
    /// mild transform plus an occlusion covering half the pixels
    Occluded,
}

fn render(
    texture: &Texture,
    size: usize,
    severity: Severity,
    rng: &mut ChaCha12Rng,
) -> Image {
    let (shift, rot, gain_lo, gain_hi, bias_span) = match severity {
        Severity::Mild => (4.0, 0.08, 0.92, 1.08, 0.04),
        Severity::Strong | Severity::Occluded => (16.0, 0.45, 0.65, 1.35, 0.12),
    };
    let dx = rng.gen_range(-shift..shift);
    let dy = rng.gen_range(-shift..shift);
    let alpha: f64 = rng.gen_range(-rot..rot);
    let gain = rng.gen_range(gain_lo..gain_hi);
    let bias = rng.gen_range(-bias_span..bias_span);
    let center = size as f64 / 2.0;
    let (sin_a, cos_a) = alpha.sin_cos();

    let mut pixels = Array3::zeros((size, size, 1));
    for r in 0..size {
        for c in 0..size {
            let xr = c as f64 - center;
            let yr = r as f64 - center;
            let x = cos_a * xr - sin_a * yr + center + dx;
            let y = sin_a * xr + cos_a * yr + center + dy;
            let v = texture.value(x, y) * gain + bias;
            pixels[[r, c, 0]] = v.clamp(0.0, 1.0);
        }
    }

    // strong instances carry a small occlusion, junk instances lose half
    // the pixels
    let occluded_fraction: f64 = match severity {
        Severity::Mild => 0.0,
        Severity::Strong => 0.15,
        Severity::Occluded => 0.5,
    };
    if occluded_fraction > 0.0 {
        let area = occluded_fraction * (size * size) as f64;
        let oh = (area.sqrt()
            * rng.gen_range(0.8..1.25f64).sqrt())
        .round()
        .clamp(1.0, size as f64) as usize;
        let ow = ((area / oh as f64).round() as usize).clamp(1, size);
        let top = rng.gen_range(0..=(size - oh.min(size)));
        let left = rng.gen_range(0..=(size - ow.min(size)));
        for r in top..(top + oh).min(size) {
            for c in left..(left + ow).min(size) {
                pixels[[r, c, 0]] = 0.0;
            }
        }
    }
    Image::new(pixels).expect("values clamped into range")
}

/// Generate the benchmark. Identical seeds yield byte-identical datasets.
pub fn generate_synthetic_benchmark(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticBenchmark> {
    if n_classes < 2 {
        return Err(Error::validation("need at least 2 classes"));
    }
    if per_class < 3 {
        return Err(Error::validation("need at least 3 database images per class"));
    }
    if image_size < 32 {
        return Err(Error::validation("image size must be at least 32"));
    }

    let n_junk = (per_class / 4).max(1);
    let n_hard = ((per_class - n_junk) / 2).max(1);
    let n_easy = per_class - n_junk - n_hard;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let textures: Vec<Texture> = (0..n_classes).map(|_| Texture::sample(&mut rng)).collect();

    let mut train = Vec::new();
    let mut queries = Vec::new();
    let mut database = Vec::new();
    let mut gt_queries = Vec::new();

    for (class_idx, texture) in textures.iter().enumerate() {
        let class = class_idx as ClassId;

        for i in 0..per_class {
            let severity = if i % 2 == 0 { Severity::Mild } else { Severity::Strong };
            train.push(LabeledImage {
                id: format!("tr{class_idx:02}_{i:02}"),
                class,
                image: render(texture, image_size, severity, &mut rng),
            });
        }

        // several queries per class keep mAP estimates stable on small sets
        let n_queries = (per_class / 5).max(1);
        for qi in 0..n_queries {
            queries.push(LabeledImage {
                id: format!("q{class_idx:02}_{qi}"),
                class,
                image: render(texture, image_size, Severity::Mild, &mut rng),
            });
        }

        let mut easy = Vec::new();
        let mut hard = Vec::new();
        let mut junk = Vec::new();
        for i in 0..n_easy {
            let id = format!("db{class_idx:02}_e{i:02}");
            easy.push(id.clone());
            database.push(LabeledImage {
                id,
                class,
                image: render(texture, image_size, Severity::Mild, &mut rng),
            });
        }
        for i in 0..n_hard {
            let id = format!("db{class_idx:02}_h{i:02}");
            hard.push(id.clone());
            database.push(LabeledImage {
                id,
                class,
                image: render(texture, image_size, Severity::Strong, &mut rng),
            });
        }
        for i in 0..n_junk {
            let id = format!("db{class_idx:02}_j{i:02}");
            junk.push(id.clone());
            database.push(LabeledImage {
                id,
                class,
                image: render(texture, image_size, Severity::Occluded, &mut rng),
            });
        }

        // query box: a small inset, exercising the crop-before-extraction
        // path while staying above the backbone's minimum size
        let inset = if image_size >= 40 { 4 } else { 0 } as u32;
        gt_queries.push(QueryGroundTruth {
            id: format!("q{class_idx:02}"),
            bbox: [inset, inset, image_size as u32 - inset, image_size as u32 - inset],
            easy,
            hard,
            junk,
        });
    }

    let ground_truth = RetrievalGroundTruth { queries: gt_queries };
    ground_truth.validate()?;
    Ok(SyntheticBenchmark { train, queries, database, ground_truth })
}

impl SyntheticBenchmark {
    /// Write the dataset under `dir`: `images/<id>.pgm`, a `labels.tsv`
    /// with id/class/split columns, and `ground_truth.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let mut labels = String::new();
        for (split, items) in [
            ("train", &self.train),
            ("query", &self.queries),
            ("db", &self.database),
        ] {
            for item in items.iter() {
                write_image(&images.join(format!("{}.pgm", item.id)), &item.image)?;
                labels.push_str(&format!("{}\t{}\t{}\n", item.id, item.class, split));
            }
        }
        crate::imageio::write_atomic(&dir.join("labels.tsv"), labels.as_bytes())?;
        crate::imageio::write_atomic(
            &dir.join("ground_truth.json"),
            self.ground_truth.to_json().as_bytes(),
        )?;
        Ok(())
    }

    /// Load a dataset previously written by [`SyntheticBenchmark::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<SyntheticBenchmark> {
        let labels = fs::read_to_string(dir.join("labels.tsv"))?;
        let mut train = Vec::new();
        let mut queries = Vec::new();
        let mut database = Vec::new();
        for (lineno, line) in labels.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, class, split) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(Error::validation(format!(
                        "labels.tsv line {}: expected id<TAB>class<TAB>split",
                        lineno + 1
                    )))
                }
            };
            let class: ClassId = class.parse().map_err(|_| {
                Error::validation(format!("labels.tsv line {}: bad class {class:?}", lineno + 1))
            })?;
            let image = read_image(&dir.join("images").join(format!("{id}.pgm")))?;
            let item = LabeledImage { id: id.to_string(), class, image };
            match split {
                "train" => train.push(item),
                "query" => queries.push(item),
                "db" => database.push(item),
                other => {
                    return Err(Error::validation(format!(
                        "labels.tsv line {}: unknown split {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let gt = RetrievalGroundTruth::from_json(&fs::read_to_string(
            dir.join("ground_truth.json"),
        )?)?;
        Ok(SyntheticBenchmark { train, queries, database, ground_truth: gt })
    }

    /// Queries cropped to their ground-truth bounding boxes, ready for
    /// extraction.
    pub fn cropped_queries(&self) -> Result<Vec<(String, Image)>> {
        self.queries
            .iter()
            .map(|q| {
                let gt = self
                    .ground_truth
                    .query(&q.id)
                    .ok_or_else(|| Error::validation(format!("query {} missing from gt", q.id)))?;
                let [x0, y0, x1, y1] = gt.bbox;
                let cropped =
                    q.image.crop(x0 as usize, y0 as usize, x1 as usize, y1 as usize)?;
                Ok((q.id.clone(), cropped))
            })
            .collect()
    }

    /// Database images as (id, image) pairs.
    pub fn database_items(&self) -> Vec<(String, Image)> {
        self.database
            .iter()
            .map(|d| (d.id.clone(), d.image.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, DescriptorModel};
    use crate::eval::{evaluate_retrieval, extract_descriptors};

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate_synthetic_benchmark(3, 4, 32, 9).unwrap();
        let b = generate_synthetic_benchmark(3, 4, 32, 9).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image.pixels(), y.image.pixels());
        }
        for (x, y) in a.database.iter().zip(b.database.iter()) {
            assert_eq!(x.image.pixels(), y.image.pixels());
        }
        let c = generate_synthetic_benchmark(3, 4, 32, 10).unwrap();
        assert_ne!(
            a.train[0].image.pixels(),
            c.train[0].image.pixels(),
            "different seeds differ"
        );
    }

    #[test]
    fn class_labels_are_balanced() {
        let bench = generate_synthetic_benchmark(4, 5, 32, 1).unwrap();
        for class in 0..4u32 {
            assert_eq!(bench.train.iter().filter(|i| i.class == class).count(), 5);
            assert_eq!(bench.database.iter().filter(|i| i.class == class).count(), 5);
            assert_eq!(bench.queries.iter().filter(|i| i.class == class).count(), 1);
        }
    }

    #[test]
    fn ground_truth_references_existing_database_ids() {
        let bench = generate_synthetic_benchmark(3, 6, 32, 2).unwrap();
        let db_ids: std::collections::BTreeSet<&String> =
            bench.database.iter().map(|d| &d.id).collect();
        for q in &bench.ground_truth.queries {
            assert!(!q.easy.is_empty());
            assert!(!q.hard.is_empty());
            assert!(!q.junk.is_empty());
            for id in q.easy.iter().chain(&q.hard).chain(&q.junk) {
                assert!(db_ids.contains(id));
            }
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic_benchmark(1, 5, 32, 0).is_err());
        assert!(generate_synthetic_benchmark(3, 2, 32, 0).is_err());
        assert!(generate_synthetic_benchmark(3, 5, 16, 0).is_err());
    }

    #[test]
    fn dir_roundtrip_preserves_dataset() {
        let bench = generate_synthetic_benchmark(2, 3, 32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bench.write_dir(dir.path()).unwrap();
        let back = SyntheticBenchmark::read_dir(dir.path()).unwrap();
        assert_eq!(bench.train.len(), back.train.len());
        assert_eq!(bench.queries.len(), back.queries.len());
        assert_eq!(bench.database.len(), back.database.len());
        // pgm quantizes to 8 bits; compare through one more write cycle
        let first = &bench.database[0];
        let again = back.database.iter().find(|d| d.id == first.id).unwrap();
        let reloaded = crate::imageio::decode_pnm(&crate::imageio::encode_pnm(&first.image))
            .unwrap();
        assert_eq!(again.image.pixels(), reloaded.pixels());
        assert_eq!(bench.ground_truth.to_json(), back.ground_truth.to_json());
    }

    #[test]
    fn untrained_gem_model_beats_chance() {
        let bench = generate_synthetic_benchmark(8, 8, 64, 33).unwrap();
        let model =
            DescriptorModel::init(BackboneSpec::toy_fcn(1, &[]).unwrap(), 71).unwrap();
        let queries = extract_descriptors(&model, &bench.cropped_queries().unwrap(), &[1.0])
            .unwrap();
        let database =
            extract_descriptors(&model, &bench.database_items(), &[1.0]).unwrap();
        let [_, medium, _] = evaluate_retrieval(&queries, &database, &bench.ground_truth).unwrap();
        let chance = 1.0 / 8.0;
        assert!(
            medium.value > chance,
            "medium mAP {} should beat chance {chance}",
            medium.value
        );
    }
}
