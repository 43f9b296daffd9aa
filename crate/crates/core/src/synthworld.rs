//! Deterministic synthetic open-vocabulary detection worlds.
//!
//! Every class owns a latent prototype on the unit sphere. Raw region
//! features are an affine scramble of the latent prototype plus Gaussian
//! noise, so the detector has to learn a real map into the text space.
//! Captions name every object in the image (known and novel) among
//! distractor words. The train split keeps only known-class boxes; images
//! whose objects are all novel survive as caption-only pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::io;
use crate::regions::{
    make_grid_regions, select_box_regions, Bbox, Proposal, RegionSet, OBJECTNESS_THRESHOLD,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub known_classes: usize,
    pub novel_classes: usize,
    /// Dimension of the latent prototype space.
    pub latent_dim: usize,
    /// Raw region-feature dimension.
    pub feature_dim: usize,
    pub image_size: f64,
    pub grid_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub caption_len_min: usize,
    pub caption_len_max: usize,
    pub noise_std: f64,
    pub distractor_tokens: usize,
    /// Random proposals per image on top of one jittered copy per object.
    pub noise_proposals: usize,
    /// Maximum corner shift of a jittered proposal, as a fraction of the
    /// object's width/height.
    pub proposal_jitter: f64,
    /// Proposals per object covering only a part of it (IoU below 0.5).
    pub part_proposals: usize,
    /// Scale of the class-agnostic extent shift carried by boxes that miss
    /// part of an object.
    pub extent_strength: f64,
    /// Number of background prototypes; each image draws one as its context.
    pub background_kinds: usize,
    /// Probability that an image's background is the preferred context of
    /// its first object's class.
    pub context_affinity: f64,
    /// Weight of the direction shared by all class prototypes (0: classes
    /// are independent, 1: identical).
    pub shared_objectness: f64,
    /// Probability that an image may mix known and novel classes; otherwise
    /// all its objects come from the first object's partition.
    pub mixed_images: f64,
    /// Every n-th class gets a two-token name (0 disables).
    pub two_token_every: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            known_classes: 20,
            novel_classes: 6,
            latent_dim: 32,
            feature_dim: 48,
            image_size: 100.0,
            grid_size: 10,
            train_images: 2000,
            val_images: 200,
            test_images: 200,
            objects_min: 1,
            objects_max: 3,
            caption_len_min: 6,
            caption_len_max: 10,
            noise_std: 0.05,
            distractor_tokens: 40,
            noise_proposals: 12,
            proposal_jitter: 0.08,
            part_proposals: 4,
            extent_strength: 1.0,
            background_kinds: 8,
            context_affinity: 0.8,
            shared_objectness: 0.0,
            mixed_images: 0.1,
            two_token_every: 4,
            seed: 7,
        }
    }
}

impl WorldConfig {
    fn max_class_tokens(&self) -> usize {
        if self.two_token_every > 0 {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("known_classes", self.known_classes),
            ("novel_classes", self.novel_classes),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("grid_size", self.grid_size),
            ("train_images", self.train_images),
            ("val_images", self.val_images),
            ("test_images", self.test_images),
            ("objects_min", self.objects_min),
            ("caption_len_min", self.caption_len_min),
            ("distractor_tokens", self.distractor_tokens),
            ("background_kinds", self.background_kinds),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid_config(field, "must be at least 1"));
            }
        }
        if self.objects_max < self.objects_min {
            return Err(Error::invalid_config(
                "objects_max",
                "must be >= objects_min",
            ));
        }
        if self.caption_len_max < self.caption_len_min {
            return Err(Error::invalid_config(
                "caption_len_max",
                "must be >= caption_len_min",
            ));
        }
        let needed = self.objects_max * self.max_class_tokens();
        if self.caption_len_max < needed {
            return Err(Error::invalid_config(
                "caption_len_max",
                format!(
                    "caption of at most {} tokens cannot name {} objects ({needed} tokens)",
                    self.caption_len_max, self.objects_max
                ),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid_config(
                "noise_std",
                "must be finite and >= 0",
            ));
        }
        if !(self.image_size > 0.0 && self.image_size.is_finite()) {
            return Err(Error::invalid_config("image_size", "must be positive"));
        }
        if !(0.0..0.5).contains(&self.proposal_jitter) {
            return Err(Error::invalid_config(
                "proposal_jitter",
                "must lie in [0, 0.5)",
            ));
        }
        if !(0.0..=1.0).contains(&self.mixed_images) {
            return Err(Error::invalid_config("mixed_images", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.context_affinity) {
            return Err(Error::invalid_config(
                "context_affinity",
                "must lie in [0, 1]",
            ));
        }
        if !(self.extent_strength >= 0.0 && self.extent_strength.is_finite()) {
            return Err(Error::invalid_config(
                "extent_strength",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.shared_objectness) {
            return Err(Error::invalid_config(
                "shared_objectness",
                "must lie in [0, 1)",
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.known_classes + self.novel_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub tokens: Vec<usize>,
    pub novel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: Bbox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image_id: u64,
    /// Annotated objects (known only on the train split).
    pub objects: Vec<GroundTruthObject>,
    pub proposals: Vec<Proposal>,
    /// `G×G×F` raw grid feature map.
    pub grid: Tensor,
    pub caption: Vec<usize>,
    /// Train images whose objects are all novel: no annotation survives.
    pub caption_only: bool,
}

impl SyntheticImage {
    /// Box regions (objectness-filtered and capped) plus grid regions.
    pub fn regions(&self, threshold: f64, cap: usize) -> RegionSet {
        RegionSet {
            image_id: self.image_id,
            boxes: select_box_regions(&self.proposals, threshold, cap),
            grid: make_grid_regions(&self.grid).expect("grid map shape checked at load"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub vocabulary: Vocabulary,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<SyntheticImage>,
    pub val: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<SyntheticImage> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn known_ids(&self) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| !c.novel)
            .map(|c| c.id)
            .collect()
    }

    pub fn novel_ids(&self) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.novel)
            .map(|c| c.id)
            .collect()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.classes.get(class_id).is_some_and(|c| c.novel)
    }
}

/// Fixed world geometry shared by every image.
struct Prototypes {
    classes: Vec<Vec<f64>>,
    backgrounds: Vec<Vec<f64>>,
    /// Linear image of the latent extent direction (no offset).
    extent: Vec<f64>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn build_prototypes(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Prototypes {
    let normal = Normal::new(0.0, 1.0 / (cfg.latent_dim as f64).sqrt()).unwrap();
    let scramble: Vec<f64> = (0..cfg.feature_dim * cfg.latent_dim)
        .map(|_| normal.sample(rng))
        .collect();
    let offset: Vec<f64> = (0..cfg.feature_dim)
        .map(|_| 0.1 * normal.sample(rng))
        .collect();
    let embed = |z: &[f64]| -> Vec<f64> {
        (0..cfg.feature_dim)
            .map(|f| {
                let row = &scramble[f * cfg.latent_dim..(f + 1) * cfg.latent_dim];
                round_f32(offset[f] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    };
    let shared = unit_vector(cfg.latent_dim, rng);
    let (a, b) = (
        cfg.shared_objectness.sqrt(),
        (1.0 - cfg.shared_objectness).sqrt(),
    );
    let classes = (0..cfg.total_classes())
        .map(|_| {
            let own = unit_vector(cfg.latent_dim, rng);
            let z: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(s, o)| a * s + b * o)
                .collect();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            embed(&z.iter().map(|v| v / n).collect::<Vec<_>>())
        })
        .collect();
    let backgrounds = (0..cfg.background_kinds)
        .map(|_| embed(&unit_vector(cfg.latent_dim, rng)))
        .collect();
    let origin = embed(&vec![0.0; cfg.latent_dim]);
    let extent = embed(&unit_vector(cfg.latent_dim, rng))
        .iter()
        .zip(&origin)
        .map(|(e, o)| e - o)
        .collect();
    Prototypes {
        classes,
        backgrounds,
        extent,
    }
}

fn class_tokens(cfg: &WorldConfig) -> Vec<(String, Vec<String>, bool)> {
    (0..cfg.total_classes())
        .map(|k| {
            let novel = k >= cfg.known_classes;
            let stem = if novel {
                format!("n{:02}", k - cfg.known_classes)
            } else {
                format!("k{k:02}")
            };
            let toks =
                if cfg.two_token_every > 0 && k % cfg.two_token_every == cfg.two_token_every - 1 {
                    vec![format!("{stem}a"), format!("{stem}b")]
                } else {
                    vec![stem]
                };
            (toks.join(" "), toks, novel)
        })
        .collect()
}

/// Derives an independent per-image stream from the world seed.
fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | (index as u64 + 1));
    rng
}

fn noisy(proto: &[f64], noise: &Normal<f64>, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if std == 0.0 {
        return proto.to_vec();
    }
    proto
        .iter()
        .map(|&p| round_f32(p + noise.sample(rng)))
        .collect()
}

fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

fn random_box(size: f64, rng: &mut ChaCha8Rng, min_frac: f64, max_frac: f64) -> Bbox {
    let w = size * rng.random_range(min_frac..max_frac);
    let h = size * rng.random_range(min_frac..max_frac);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    Bbox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

fn generate_image(
    cfg: &WorldConfig,
    protos: &Prototypes,
    classes: &[ClassInfo],
    distractors: &[usize],
    split: Split,
    index: usize,
    image_id: u64,
) -> SyntheticImage {
    let mut rng = image_rng(cfg.seed, split, index);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let size = cfg.image_size;

    let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mix = rng.random_bool(cfg.mixed_images);
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class_id = match objects.first() {
            Some(first) if !mix => {
                if first.class_id < cfg.known_classes {
                    rng.random_range(0..cfg.known_classes)
                } else {
                    rng.random_range(cfg.known_classes..cfg.total_classes())
                }
            }
            _ => rng.random_range(0..cfg.total_classes()),
        };
        let mut bbox = random_box(size, &mut rng, 0.2, 0.45);
        for _ in 0..32 {
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.3) {
                break;
            }
            bbox = random_box(size, &mut rng, 0.2, 0.45);
        }
        objects.push(GroundTruthObject { bbox, class_id });
    }

    let kinds = protos.backgrounds.len();
    let context = if rng.random_bool(cfg.context_affinity) {
        objects[0].class_id % kinds
    } else {
        rng.random_range(0..kinds)
    };
    let background = &protos.backgrounds[context];

    // IoU >= 0.5: the object's prototype. Otherwise the background, blended
    // with the most-covering object by the fraction of the box it covers,
    // plus an extent shift growing with the share of the object left out.
    let feature_for = |b: &Bbox, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let best = objects
            .iter()
            .map(|o| (iou(&o.bbox, b), o.class_id))
            .filter(|(v, _)| *v >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, k)) = best {
            return noisy(&protos.classes[k], &noise, cfg.noise_std, rng);
        }
        let cover = objects
            .iter()
            .map(|o| {
                let inter = o.bbox.intersection(b);
                (inter / b.area(), inter / o.bbox.area(), o.class_id)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match cover {
            Some((a, kept, k)) if a > 0.0 => {
                let shift = cfg.extent_strength * a * (1.0 - kept);
                let mixed: Vec<f64> = protos.classes[k]
                    .iter()
                    .zip(background)
                    .zip(&protos.extent)
                    .map(|((p, q), e)| round_f32(a * p + (1.0 - a) * q + shift * e))
                    .collect();
                noisy(&mixed, &noise, cfg.noise_std, rng)
            }
            _ => noisy(background, &noise, cfg.noise_std, rng),
        }
    };

    let mut proposals = Vec::with_capacity(n_obj + cfg.noise_proposals);
    for o in &objects {
        let j = cfg.proposal_jitter;
        let (w, h) = (o.bbox.width(), o.bbox.height());
        let mut shift = |span: f64| {
            if j > 0.0 {
                rng.random_range(-j..j) * span
            } else {
                0.0
            }
        };
        let jittered = Bbox {
            x1: o.bbox.x1 + shift(w),
            y1: o.bbox.y1 + shift(h),
            x2: o.bbox.x2 + shift(w),
            y2: o.bbox.y2 + shift(h),
        }
        .clamp(size, size)
        .unwrap_or(o.bbox);
        let objectness = round_f32(rng.random_range(0.75..1.0));
        let feature = feature_for(&jittered, &mut rng);
        proposals.push(Proposal {
            bbox: jittered,
            objectness,
            feature,
        });
        for _ in 0..cfg.part_proposals {
            let (pw, ph) = (
                w * rng.random_range(0.35..0.65),
                h * rng.random_range(0.35..0.65),
            );
            let x = o.bbox.x1 + rng.random_range(0.0..=w - pw);
            let y = o.bbox.y1 + rng.random_range(0.0..=h - ph);
            let part = Bbox {
                x1: x,
                y1: y,
                x2: x + pw,
                y2: y + ph,
            };
            let objectness = round_f32(rng.random_range(0.7..1.0));
            let feature = feature_for(&part, &mut rng);
            proposals.push(Proposal {
                bbox: part,
                objectness,
                feature,
            });
        }
    }
    for _ in 0..cfg.noise_proposals {
        let bbox = random_box(size, &mut rng, 0.1, 0.5);
        let objectness = round_f32(rng.random_range(0.0..1.0));
        let feature = feature_for(&bbox, &mut rng);
        proposals.push(Proposal {
            bbox,
            objectness,
            feature,
        });
    }
    // hide the generation order from the detector
    proposals.shuffle(&mut rng);

    let g = cfg.grid_size;
    let cell = size / g as f64;
    let f = cfg.feature_dim;
    let mut grid = Vec::with_capacity(g * g * f);
    for r in 0..g {
        for c in 0..g {
            let cb = Bbox {
                x1: c as f64 * cell,
                y1: r as f64 * cell,
                x2: (c + 1) as f64 * cell,
                y2: (r + 1) as f64 * cell,
            };
            let covering: Vec<usize> = objects
                .iter()
                .filter(|o| o.bbox.intersection(&cb) >= 0.5 * cb.area())
                .map(|o| o.class_id)
                .collect();
            let base: Vec<f64> = if covering.is_empty() {
                background.clone()
            } else {
                let mut m = vec![0.0; f];
                for &k in &covering {
                    for (mi, p) in m.iter_mut().zip(&protos.classes[k]) {
                        *mi += p;
                    }
                }
                m.into_iter()
                    .map(|v| round_f32(v / covering.len() as f64))
                    .collect()
            };
            grid.extend(noisy(&base, &noise, cfg.noise_std, &mut rng));
        }
    }
    let grid = Tensor::new(vec![g, g, f], grid).expect("grid shape");

    // caption: one phrase per distinct class, padded with distractors
    let mut phrases: Vec<Vec<usize>> = Vec::new();
    let mut seen = Vec::new();
    for o in &objects {
        if !seen.contains(&o.class_id) {
            seen.push(o.class_id);
            phrases.push(classes[o.class_id].tokens.clone());
        }
    }
    let named: usize = phrases.iter().map(Vec::len).sum();
    let target = rng.random_range(cfg.caption_len_min..=cfg.caption_len_max);
    for _ in named..target {
        phrases.push(vec![distractors[rng.random_range(0..distractors.len())]]);
    }
    phrases.shuffle(&mut rng);
    let caption = phrases.concat();

    let mut image = SyntheticImage {
        image_id,
        objects,
        proposals,
        grid,
        caption,
        caption_only: false,
    };
    if split == Split::Train {
        image.objects.retain(|o| !classes[o.class_id].novel);
        image.caption_only = image.objects.is_empty();
    }
    image
}

pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = build_prototypes(cfg, &mut rng);

    let names = class_tokens(cfg);
    let distractor_names: Vec<String> = (0..cfg.distractor_tokens)
        .map(|i| format!("w{i:03}"))
        .collect();
    let vocabulary = Vocabulary::new(
        names
            .iter()
            .flat_map(|(_, toks, _)| toks.iter().cloned())
            .chain(distractor_names.iter().cloned()),
    )?;
    let classes: Vec<ClassInfo> = names
        .into_iter()
        .enumerate()
        .map(|(id, (name, toks, novel))| {
            let tokens = toks
                .iter()
                .map(|t| vocabulary.id(t))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClassInfo {
                id,
                name,
                tokens,
                novel,
            })
        })
        .collect::<Result<_>>()?;
    let distractors = distractor_names
        .iter()
        .map(|t| vocabulary.id(t))
        .collect::<Result<Vec<_>>>()?;

    let counts = [cfg.train_images, cfg.val_images, cfg.test_images];
    let mut next_id = 0u64;
    let mut splits = Vec::with_capacity(3);
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        let images: Vec<SyntheticImage> = (0..n)
            .map(|i| {
                generate_image(
                    cfg,
                    &protos,
                    &classes,
                    &distractors,
                    *split,
                    i,
                    next_id + i as u64,
                )
            })
            .collect();
        next_id += n as u64;
        splits.push(images);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        config: cfg.clone(),
        vocabulary,
        classes,
        train,
        val,
        test,
    })
}

/// Raw class prototypes in feature space, exposed for tests and diagnostics.
pub fn class_feature_prototypes(cfg: &WorldConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build_prototypes(cfg, &mut rng).classes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub class_id: usize,
    pub name: String,
    pub novel: bool,
    pub objects: usize,
    pub proposal_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldStatistics {
    pub images: usize,
    pub caption_only_images: usize,
    pub annotated_objects: usize,
    /// Fraction of annotated objects whose class tokens occur in the caption.
    pub caption_coverage: f64,
    /// Fraction of annotated objects with a proposal at IoU >= 0.5 and
    /// objectness above the selection threshold.
    pub proposal_recall: f64,
    pub per_class: Vec<ClassStatistics>,
}

fn contains_phrase(caption: &[usize], phrase: &[usize]) -> bool {
    !phrase.is_empty() && caption.windows(phrase.len()).any(|w| w == phrase)
}

pub fn world_statistics(dataset: &Dataset) -> WorldStatistics {
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut images = 0usize;
    let mut caption_only = 0usize;
    for split in Split::ALL {
        for img in dataset.split(split) {
            images += 1;
            caption_only += img.caption_only as usize;
            for o in &img.objects {
                total += 1;
                if contains_phrase(&img.caption, &dataset.classes[o.class_id].tokens) {
                    covered += 1;
                }
                let hit = img
                    .proposals
                    .iter()
                    .any(|p| p.objectness > OBJECTNESS_THRESHOLD && iou(&p.bbox, &o.bbox) >= 0.5);
                let e = per_class.entry(o.class_id).or_default();
                e.0 += 1;
                e.1 += hit as usize;
            }
        }
    }
    let recalled: usize = per_class.values().map(|v| v.1).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    WorldStatistics {
        images,
        caption_only_images: caption_only,
        annotated_objects: total,
        caption_coverage: ratio(covered, total),
        proposal_recall: ratio(recalled, total),
        per_class: dataset
            .classes
            .iter()
            .map(|c| {
                let (n, hit) = per_class.get(&c.id).copied().unwrap_or_default();
                ClassStatistics {
                    class_id: c.id,
                    name: c.name.clone(),
                    novel: c.novel,
                    objects: n,
                    proposal_recall: ratio(hit, n),
                }
            })
            .collect(),
    }
}

// ---- on-disk layout -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub images: String,
    pub proposal_features: String,
    pub grid_features: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub vocabulary: String,
    pub classes: String,
    pub splits: BTreeMap<String, SplitFiles>,
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    bbox: Bbox,
    objectness: f64,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    image_id: u64,
    objects: Vec<GroundTruthObject>,
    proposals: Vec<ProposalRecord>,
    caption: Vec<usize>,
    caption_only: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &dataset.config;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let name = split.name();
        let files = SplitFiles {
            images: format!("{name}_images.jsonl"),
            proposal_features: format!("{name}_proposals.bin"),
            grid_features: format!("{name}_grid.bin"),
        };
        let images = dataset.split(split);
        let records: Vec<ImageRecord> = images
            .iter()
            .map(|img| ImageRecord {
                image_id: img.image_id,
                objects: img.objects.clone(),
                proposals: img
                    .proposals
                    .iter()
                    .map(|p| ProposalRecord {
                        bbox: p.bbox,
                        objectness: p.objectness,
                    })
                    .collect(),
                caption: img.caption.clone(),
                caption_only: img.caption_only,
            })
            .collect();
        io::write_jsonl(&dir.join(&files.images), &records)?;

        let f = cfg.feature_dim;
        let prop_rows: usize = images.iter().map(|i| i.proposals.len()).sum();
        let prop_data: Vec<f64> = images
            .iter()
            .flat_map(|i| i.proposals.iter().flat_map(|p| p.feature.iter().copied()))
            .collect();
        let props = Tensor::new(
            vec![prop_rows.max(1), f],
            if prop_rows == 0 {
                vec![0.0; f]
            } else {
                prop_data
            },
        )?;
        io::write_tensor_file(&dir.join(&files.proposal_features), &props)?;

        let g = cfg.grid_size;
        let grid_data: Vec<f64> = images
            .iter()
            .flat_map(|i| i.grid.data().iter().copied())
            .collect();
        let grid = Tensor::new(vec![images.len(), g, g, f], grid_data)?;
        io::write_tensor_file(&dir.join(&files.grid_features), &grid)?;
        splits.insert(name.to_string(), files);
    }
    std::fs::write(dir.join("vocab.txt"), dataset.vocabulary.to_text())?;
    io::write_jsonl(&dir.join("classes.jsonl"), &dataset.classes)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        vocabulary: "vocab.txt".into(),
        classes: "classes.jsonl".into(),
        splits,
    };
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Dataset(format!(
            "no {MANIFEST_FILE} in {}",
            dir.display()
        )));
    }
    let manifest: Manifest = io::read_json(&manifest_path)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let vocabulary =
        Vocabulary::from_text(&std::fs::read_to_string(dir.join(&manifest.vocabulary))?)?;
    let classes: Vec<ClassInfo> = io::read_jsonl(&dir.join(&manifest.classes))?;
    let (g, f) = (cfg.grid_size, cfg.feature_dim);

    let mut loaded: BTreeMap<Split, Vec<SyntheticImage>> = BTreeMap::new();
    for split in Split::ALL {
        let files = manifest
            .splits
            .get(split.name())
            .ok_or_else(|| Error::Dataset(format!("manifest lacks split {}", split.name())))?;
        let records: Vec<ImageRecord> = io::read_jsonl(&dir.join(&files.images))?;
        let props = io::read_tensor_file(&dir.join(&files.proposal_features))?;
        let grid = io::read_tensor_file(&dir.join(&files.grid_features))?;
        if props.cols() != f || grid.shape() != [records.len(), g, g, f] {
            return Err(Error::Dataset(format!(
                "{} feature shapes disagree with config",
                split.name()
            )));
        }
        let mut row = 0usize;
        let mut images = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            let mut proposals = Vec::with_capacity(rec.proposals.len());
            for p in rec.proposals {
                if row >= props.rows() {
                    return Err(Error::Dataset("proposal feature rows exhausted".into()));
                }
                proposals.push(Proposal {
                    bbox: p.bbox,
                    objectness: p.objectness,
                    feature: props.row(row).to_vec(),
                });
                row += 1;
            }
            let cell = g * g * f;
            let grid_map = Tensor::new(
                vec![g, g, f],
                grid.data()[i * cell..(i + 1) * cell].to_vec(),
            )?;
            images.push(SyntheticImage {
                image_id: rec.image_id,
                objects: rec.objects,
                proposals,
                grid: grid_map,
                caption: rec.caption,
                caption_only: rec.caption_only,
            });
        }
        loaded.insert(split, images);
    }
    Ok(Dataset {
        config: cfg,
        vocabulary,
        classes,
        train: loaded.remove(&Split::Train).unwrap_or_default(),
        val: loaded.remove(&Split::Val).unwrap_or_default(),
        test: loaded.remove(&Split::Test).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            train_images: 40,
            val_images: 10,
            test_images: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let other = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train[0], other.train[0]);
    }

    #[test]
    fn zero_noise_gives_exact_prototypes() {
        let cfg = WorldConfig {
            noise_std: 0.0,
            ..small()
        };
        let d = generate_world(&cfg).unwrap();
        let protos = class_feature_prototypes(&cfg);
        let mut checked = 0;
        for img in &d.val {
            for o in &img.objects {
                for p in &img.proposals {
                    if iou(&p.bbox, &o.bbox) >= 0.5
                        && img
                            .objects
                            .iter()
                            .filter(|x| iou(&x.bbox, &p.bbox) >= 0.5)
                            .count()
                            == 1
                    {
                        assert_eq!(p.feature, protos[o.class_id]);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn train_split_hides_novel_boxes() {
        let d = generate_world(&small()).unwrap();
        for img in &d.train {
            assert!(img.objects.iter().all(|o| !d.is_novel(o.class_id)));
            assert_eq!(img.caption_only, img.objects.is_empty());
        }
        assert!(d
            .val
            .iter()
            .flat_map(|i| &i.objects)
            .any(|o| d.is_novel(o.class_id)));
    }

    #[test]
    fn captions_name_every_object() {
        let d = generate_world(&small()).unwrap();
        for img in d.val.iter().chain(&d.test) {
            for o in &img.objects {
                assert!(contains_phrase(&img.caption, &d.classes[o.class_id].tokens));
            }
            assert!(img.caption.len() >= d.config.caption_len_min);
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cfg = WorldConfig {
            caption_len_max: 3,
            caption_len_min: 2,
            ..small()
        };
        match generate_world(&cfg) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "caption_len_max"),
            other => panic!("expected invalid config, got {other:?}"),
        }
        let cfg = WorldConfig {
            known_classes: 0,
            ..small()
        };
        assert!(matches!(
            generate_world(&cfg),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn recall_extremes() {
        let cfg = WorldConfig {
            proposal_jitter: 0.0,
            ..small()
        };
        let mut d = generate_world(&cfg).unwrap();
        assert_eq!(world_statistics(&d).proposal_recall, 1.0);
        for split in Split::ALL {
            for img in d.split_mut(split) {
                img.proposals.clear();
            }
        }
        assert_eq!(world_statistics(&d).proposal_recall, 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate_world(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let again = tempfile::tempdir().unwrap();
        save_dataset(&back, again.path()).unwrap();
        for name in [
            "manifest.json",
            "train_images.jsonl",
            "train_proposals.bin",
            "test_grid.bin",
            "vocab.txt",
        ] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }
}
