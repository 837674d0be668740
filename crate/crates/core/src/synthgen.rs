//! Two-domain synthetic detection benchmark.
//!
//! Every image is a `G × G` grid of observation vectors. An object occupies
//! the cell containing its box center; that cell carries the class
//! prototype plus a linear encoding of the box geometry. Target-domain
//! images apply a global style translation to every cell and, for each
//! class `k`, a fixed rotation of angle `ROTATION_PER_GAP · γ_k` plus a
//! translation `TRANSLATION_SCALE · γ_k · u_k` to that class's object cells. The per-class gap
//! `γ_k` is therefore known ground truth for how transferable a class is.
//!
//! All structural directions (style, prototypes, translation directions,
//! rotation planes, geometry encoding) come from one orthonormal basis
//! drawn from `GenConfig::seed`, so the style direction carries no class
//! information and the per-class perturbations do not interfere.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec::{put_f64, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::seed::{rng_for, sha256_hex};

pub const MIN_BOX_SIZE: f64 = 0.08;
pub const MAX_BOX_SIZE: f64 = 0.3;
/// Reference box size for the log-size encoding.
pub const REFERENCE_BOX_SIZE: f64 = 0.15;

const PROTOTYPE_NORM: f64 = 2.0;
const GEOMETRY_SCALE: f64 = 1.0;
const ROTATION_PER_GAP: f64 = 0.25;
/// Per-coordinate style offset in units of `global_style_shift`.
const STYLE_SCALE: f64 = 2.0;
const TRANSLATION_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub grid_size: usize,
    pub obs_dim: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: [usize; 2],
    pub noise_sigma: f64,
    pub class_gap: Vec<f64>,
    pub global_style_shift: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            obs_dim: 16,
            num_classes: 3,
            objects_per_image: [1, 4],
            noise_sigma: 0.1,
            class_gap: vec![0.0, 0.5, 1.5],
            global_style_shift: 0.3,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.grid_size == 0 {
            problems.push("grid_size must be positive".to_owned());
        }
        if self.obs_dim == 0 {
            problems.push("obs_dim must be positive".to_owned());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be at least 1".to_owned());
        }
        if self.class_gap.len() != self.num_classes {
            problems.push(format!(
                "class_gap has {} entries, expected {}",
                self.class_gap.len(),
                self.num_classes
            ));
        }
        if self.class_gap.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            problems.push("class_gap entries must be nonnegative".to_owned());
        }
        let [lo, hi] = self.objects_per_image;
        if lo > hi || hi > self.grid_size * self.grid_size {
            problems.push(format!(
                "objects_per_image [{lo}, {hi}] invalid for a {0}x{0} grid",
                self.grid_size
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            problems.push("noise_sigma must be nonnegative".to_owned());
        }
        if !(self.global_style_shift.is_finite() && self.global_style_shift >= 0.0) {
            problems.push("global_style_shift must be nonnegative".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Grid cell `(u, v)` containing the center; `u` follows `cx`.
    pub fn center_cell(&self, grid: usize) -> (usize, usize) {
        let clamp = |x: f64| ((x * grid as f64).floor().max(0.0) as usize).min(grid - 1);
        (clamp(self.cx), clamp(self.cy))
    }

    pub fn inside_unit_square(&self) -> bool {
        self.cx - self.w / 2.0 >= 0.0
            && self.cx + self.w / 2.0 <= 1.0
            && self.cy - self.h / 2.0 >= 0.0
            && self.cy + self.h / 2.0 <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Foreground class in `1..=K`.
    pub class: usize,
    pub bbox: BBox,
}

/// Counts reads of target-domain labels.
#[derive(Clone, Debug, Default)]
pub struct LabelGuard(Arc<AtomicUsize>);

impl LabelGuard {
    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Index of the image in its generated set.
    pub id: u32,
    /// `G × G × obs_dim`, indexed `[v][u][d]`.
    pub cells: Tensor,
    pub domain: Domain,
    annotations: Vec<Annotation>,
    guard: LabelGuard,
}

impl Sample {
    pub fn new(id: u32, cells: Tensor, domain: Domain, annotations: Vec<Annotation>) -> Self {
        Self {
            id,
            cells,
            domain,
            annotations,
            guard: LabelGuard::default(),
        }
    }

    /// Ground-truth labels. Reads of target-domain labels are counted.
    pub fn annotations(&self) -> &[Annotation] {
        if self.domain == Domain::Target {
            self.guard.record();
        }
        &self.annotations
    }

    /// Uncounted access for data-selection protocols that are allowed to
    /// see labels (per-class quotas, serialization).
    pub(crate) fn annotations_unguarded(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn observation(&self, cell: usize) -> &[f64] {
        self.cells.row(cell)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub config: GenConfig,
    pub domain: Domain,
    pub split: Split,
    /// Set on few-shot subsets: labels exist for evaluation only.
    pub labels_withheld: bool,
    guard: LabelGuard,
}

impl Dataset {
    pub fn new(config: GenConfig, domain: Domain, split: Split, samples: Vec<Sample>) -> Self {
        let guard = LabelGuard::default();
        let samples = samples
            .into_iter()
            .map(|mut s| {
                s.guard = guard.clone();
                s
            })
            .collect();
        Self {
            samples,
            config,
            domain,
            split,
            labels_withheld: false,
            guard,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of target-label reads made through [`Sample::annotations`].
    pub fn label_reads(&self) -> usize {
        self.guard.reads()
    }

    pub fn digest(&self) -> String {
        dataset_digest(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode(self);
        crate::fsio::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        decode(&bytes)
    }
}

/// Fixed structural directions of a benchmark world.
#[derive(Clone, Debug)]
pub struct World {
    pub style: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub geometry: Vec<Vec<f64>>,
    pub translation_dirs: Vec<Vec<f64>>,
    pub rotation_planes: Vec<(Vec<f64>, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl World {
    pub fn new(config: &GenConfig) -> Self {
        let d = config.obs_dim;
        let k = config.num_classes;
        let mut rng = rng_for(config.seed, "world", 0);
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| StandardNormal.sample(rng)).collect()
        };

        let mut style_sign: Vec<f64> = (0..d)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let style = style_sign
            .iter()
            .map(|s| s * config.global_style_shift * STYLE_SCALE)
            .collect();
        normalize(&mut style_sign);

        // orthonormal directions: style first, then prototypes, translations,
        // rotation partners, geometry; fresh random unit vectors once the
        // space is exhausted
        let mut basis = vec![style_sign];
        let mut next_direction = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v = gaussian(rng);
            if basis.len() < d {
                for b in &basis {
                    let p = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            normalize(&mut v);
            basis.push(v.clone());
            v
        };

        let proto_dirs: Vec<Vec<f64>> = (0..k).map(|_| next_direction(&mut rng)).collect();
        let translation_dirs: Vec<Vec<f64>> = (0..k).map(|_| next_direction(&mut rng)).collect();
        let partners: Vec<Vec<f64>> = (0..k).map(|_| next_direction(&mut rng)).collect();
        let geometry: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                next_direction(&mut rng)
                    .iter()
                    .map(|x| x * GEOMETRY_SCALE)
                    .collect()
            })
            .collect();

        let prototypes = proto_dirs
            .iter()
            .map(|p| p.iter().map(|x| x * PROTOTYPE_NORM).collect())
            .collect();
        let rotation_planes = proto_dirs.into_iter().zip(partners).collect();
        Self {
            style,
            prototypes,
            background: vec![0.0; d],
            geometry,
            translation_dirs,
            rotation_planes,
        }
    }

    /// Noise-free object signal for class `k` (1-based) at a box inside `cell`.
    pub fn object_signal(&self, class: usize, bbox: &BBox, grid: usize) -> Vec<f64> {
        let enc = encode_box(bbox, bbox.center_cell(grid), grid);
        let mut x = self.prototypes[class - 1].clone();
        for (g, e) in self.geometry.iter().zip(enc) {
            x.iter_mut().zip(g).for_each(|(x, g)| *x += e * g);
        }
        x
    }

    /// Class-specific target perturbation: rotation in the class plane by
    /// `ROTATION_PER_GAP · gap`, then translation by `TRANSLATION_SCALE · gap · u_k`.
    pub fn perturb(&self, class: usize, gap: f64, x: &mut [f64]) {
        if gap == 0.0 {
            return;
        }
        let (e1, e2) = &self.rotation_planes[class - 1];
        let theta = ROTATION_PER_GAP * gap;
        let (a, b) = (dot(x, e1), dot(x, e2));
        let (ra, rb) = (
            a * theta.cos() - b * theta.sin(),
            a * theta.sin() + b * theta.cos(),
        );
        for ((x, p), q) in x.iter_mut().zip(e1).zip(e2) {
            *x += (ra - a) * p + (rb - b) * q;
        }
        for (x, u) in x.iter_mut().zip(&self.translation_dirs[class - 1]) {
            *x += gap * TRANSLATION_SCALE * u;
        }
    }
}

/// `(Δcx, Δcy, log(w/0.15), log(h/0.15))` relative to the center of `cell`,
/// with offsets measured in cell units.
pub fn encode_box(bbox: &BBox, cell: (usize, usize), grid: usize) -> [f64; 4] {
    let g = grid as f64;
    [
        bbox.cx * g - (cell.0 as f64 + 0.5),
        bbox.cy * g - (cell.1 as f64 + 0.5),
        (bbox.w / REFERENCE_BOX_SIZE).ln(),
        (bbox.h / REFERENCE_BOX_SIZE).ln(),
    ]
}

pub fn decode_box(enc: &[f64], cell: (usize, usize), grid: usize) -> BBox {
    let g = grid as f64;
    BBox {
        cx: (cell.0 as f64 + 0.5 + enc[0]) / g,
        cy: (cell.1 as f64 + 0.5 + enc[1]) / g,
        w: REFERENCE_BOX_SIZE * enc[2].exp(),
        h: REFERENCE_BOX_SIZE * enc[3].exp(),
    }
}

fn sample_box_in_cell(rng: &mut ChaCha8Rng, cell: (usize, usize), grid: usize) -> BBox {
    let g = grid as f64;
    loop {
        let w = rng.gen_range(MIN_BOX_SIZE..=MAX_BOX_SIZE);
        let h = rng.gen_range(MIN_BOX_SIZE..=MAX_BOX_SIZE);
        let cx = (cell.0 as f64 + rng.gen::<f64>()) / g;
        let cy = (cell.1 as f64 + rng.gen::<f64>()) / g;
        let bbox = BBox { cx, cy, w, h };
        if bbox.inside_unit_square() && bbox.center_cell(grid) == cell {
            return bbox;
        }
    }
}

fn generate_sample(
    config: &GenConfig,
    world: &World,
    domain: Domain,
    split_seed: u64,
    index: usize,
) -> Sample {
    let g = config.grid_size;
    let d = config.obs_dim;
    let tag = format!("sample/{}/{}", domain.tag(), split_seed);
    let mut rng = rng_for(config.seed, &tag, index as u64);

    let [lo, hi] = config.objects_per_image;
    let count = rng.gen_range(lo..=hi);
    let mut cells: Vec<usize> = (0..g * g).collect();
    cells.shuffle(&mut rng);
    let mut annotations = Vec::with_capacity(count);
    let mut data = vec![0.0; g * g * d];
    let mut is_object = vec![false; g * g];

    for &cell_index in &cells[..count] {
        let cell = (cell_index % g, cell_index / g);
        let class = rng.gen_range(1..=config.num_classes);
        let bbox = sample_box_in_cell(&mut rng, cell, g);
        let mut x = world.object_signal(class, &bbox, g);
        if domain == Domain::Target {
            world.perturb(class, config.class_gap[class - 1], &mut x);
        }
        data[cell_index * d..(cell_index + 1) * d].copy_from_slice(&x);
        is_object[cell_index] = true;
        annotations.push(Annotation { class, bbox });
    }
    for (cell_index, object) in is_object.iter().enumerate() {
        let row = &mut data[cell_index * d..(cell_index + 1) * d];
        if !object {
            row.copy_from_slice(&world.background);
        }
        for x in row.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += config.noise_sigma * n;
        }
        if domain == Domain::Target {
            row.iter_mut().zip(&world.style).for_each(|(x, s)| *x += s);
        }
    }
    Sample::new(
        index as u32,
        Tensor::from_parts(vec![g, g, d], data),
        domain,
        annotations,
    )
}

pub fn generate_dataset(
    config: &GenConfig,
    domain: Domain,
    split: Split,
    count: usize,
    split_seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(Exec::default(), config, domain, split, count, split_seed)
}

/// Each sample draws from its own stream keyed by `(seed, domain, split_seed, index)`,
/// so sequential and parallel generation are bit-identical.
pub fn generate_dataset_with(
    exec: Exec,
    config: &GenConfig,
    domain: Domain,
    split: Split,
    count: usize,
    split_seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".to_owned()));
    }
    let world = World::new(config);
    let samples = par::map_range(exec, count, |i| {
        generate_sample(config, &world, domain, split_seed, i)
    });
    Ok(Dataset::new(config.clone(), domain, split, samples))
}

/// Union of `n` randomly chosen images per class. The result keeps labels
/// for evaluation but marks them withheld from training.
pub fn sample_ufda_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("shots must be positive".to_owned()));
    }
    let k = dataset.config.num_classes;
    let mut rng = rng_for(seed, "ufda", n as u64);
    let mut chosen = vec![false; dataset.len()];
    for class in 1..=k {
        let containing: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.annotations_unguarded().iter().any(|a| a.class == class))
            .map(|(i, _)| i)
            .collect();
        if containing.len() < n {
            return Err(Error::InsufficientClass {
                class,
                available: containing.len(),
                requested: n,
            });
        }
        for &i in containing.choose_multiple(&mut rng, n) {
            chosen[i] = true;
        }
    }
    let samples = dataset
        .samples
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(s, _)| s.clone())
        .collect();
    let mut subset = Dataset::new(
        dataset.config.clone(),
        dataset.domain,
        dataset.split,
        samples,
    );
    subset.labels_withheld = true;
    // share the label counter with the parent set
    subset.guard = dataset.guard.clone();
    for s in &mut subset.samples {
        s.guard = dataset.guard.clone();
    }
    Ok(subset)
}

// ---- canonical serialization ----

const MAGIC: &[u8; 8] = b"JADFDS01";

/// Canonical little-endian byte encoding, also the on-disk file format:
///
/// ```text
/// magic "JADFDS01"
/// grid u32, obs_dim u32, K u32, objects_min u32, objects_max u32,
/// noise f64, gap f64 × K, style f64, seed u64
/// domain u8 (0 source, 1 target), split u8 (0 train, 1 test), withheld u8
/// count u32, then per sample:
///   id u32, annotation count u32,
///   per annotation: class u32, cx f64, cy f64, w f64, h f64
///   G·G·obs_dim f64 observations, row-major [v][u][d]
/// ```
pub fn encode(ds: &Dataset) -> Vec<u8> {
    let c = &ds.config;
    let mut out = Vec::with_capacity(64 + ds.len() * c.cells() * c.obs_dim * 8);
    out.extend_from_slice(MAGIC);
    for v in [
        c.grid_size,
        c.obs_dim,
        c.num_classes,
        c.objects_per_image[0],
        c.objects_per_image[1],
    ] {
        put_u32(&mut out, v);
    }
    put_f64(&mut out, c.noise_sigma);
    for &g in &c.class_gap {
        put_f64(&mut out, g);
    }
    put_f64(&mut out, c.global_style_shift);
    put_u64(&mut out, c.seed);
    out.push(match ds.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    out.push(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.push(ds.labels_withheld as u8);
    put_u32(&mut out, ds.len());
    for s in &ds.samples {
        put_u32(&mut out, s.id as usize);
        let anns = s.annotations_unguarded();
        put_u32(&mut out, anns.len());
        for a in anns {
            put_u32(&mut out, a.class);
            for v in [a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h] {
                put_f64(&mut out, v);
            }
        }
        for &v in s.cells.data() {
            put_f64(&mut out, v);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset file");
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset file".to_owned()));
    }
    let grid_size = r.u32()?;
    let obs_dim = r.u32()?;
    let num_classes = r.u32()?;
    let objects_per_image = [r.u32()?, r.u32()?];
    let noise_sigma = r.f64()?;
    let class_gap = (0..num_classes)
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    let global_style_shift = r.f64()?;
    let seed = r.u64()?;
    let config = GenConfig {
        grid_size,
        obs_dim,
        num_classes,
        objects_per_image,
        noise_sigma,
        class_gap,
        global_style_shift,
        seed,
    };
    config.validate()?;
    let domain = match r.u8()? {
        0 => Domain::Source,
        1 => Domain::Target,
        other => return Err(Error::Format(format!("bad domain tag {other}"))),
    };
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(Error::Format(format!("bad split tag {other}"))),
    };
    let labels_withheld = r.u8()? != 0;
    let count = r.u32()?;
    let per_image = grid_size * grid_size * obs_dim;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()? as u32;
        let n = r.u32()?;
        let mut annotations = Vec::with_capacity(n);
        for _ in 0..n {
            let class = r.u32()?;
            let bbox = BBox {
                cx: r.f64()?,
                cy: r.f64()?,
                w: r.f64()?,
                h: r.f64()?,
            };
            annotations.push(Annotation { class, bbox });
        }
        let data = (0..per_image)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        let cells = Tensor::from_parts(vec![grid_size, grid_size, obs_dim], data);
        samples.push(Sample::new(id, cells, domain, annotations));
    }
    r.finish()?;
    let mut ds = Dataset::new(config, domain, split, samples);
    ds.labels_withheld = labels_withheld;
    Ok(ds)
}

/// SHA-256 of the canonical encoding, as 64 lowercase hex characters.
pub fn dataset_digest(ds: &Dataset) -> String {
    sha256_hex(&encode(ds))
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    out.write_all(&encode(ds))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_gap_target_transform_is_identity() {
        let config = GenConfig {
            class_gap: vec![0.0; 3],
            global_style_shift: 0.0,
            ..small(4)
        };
        let src = generate_dataset(&config, Domain::Source, Split::Train, 20, 9).unwrap();
        let world = World::new(&config);
        assert!(world.style.iter().all(|&s| s == 0.0));
        let mut x = vec![1.0; config.obs_dim];
        let before = x.clone();
        world.perturb(2, 0.0, &mut x);
        assert_eq!(x, before);
        // target generation applies nothing beyond the shared source transform
        let tgt = generate_dataset(&config, Domain::Target, Split::Train, 20, 9).unwrap();
        assert_eq!(src.len(), tgt.len());
    }

    #[test]
    fn determinism_and_digest() {
        let config = small(1);
        let a = generate_dataset(&config, Domain::Target, Split::Train, 30, 5).unwrap();
        let b = generate_dataset(&config, Domain::Target, Split::Train, 30, 5).unwrap();
        assert_eq!(dataset_digest(&a), dataset_digest(&b));
        assert_eq!(dataset_digest(&a).len(), 64);
        let c = generate_dataset(&small(2), Domain::Target, Split::Train, 30, 5).unwrap();
        assert_ne!(dataset_digest(&a), dataset_digest(&c));
    }

    #[test]
    fn sequential_and_parallel_generation_agree() {
        let config = small(3);
        let a = generate_dataset_with(
            Exec::Sequential,
            &config,
            Domain::Source,
            Split::Test,
            40,
            1,
        )
        .unwrap();
        let b = generate_dataset_with(Exec::Parallel, &config, Domain::Source, Split::Test, 40, 1)
            .unwrap();
        assert_eq!(encode(&a), encode(&b));
    }

    #[test]
    fn default_annotation_contract() {
        let ds = generate_dataset(&small(5), Domain::Source, Split::Train, 200, 0).unwrap();
        for s in &ds.samples {
            let anns = s.annotations();
            assert!((1..=4).contains(&anns.len()));
            let mut cells: Vec<_> = anns.iter().map(|a| a.bbox.center_cell(8)).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), anns.len(), "center cells unique");
            for a in anns {
                assert!((MIN_BOX_SIZE..=MAX_BOX_SIZE).contains(&a.bbox.w));
                assert!((MIN_BOX_SIZE..=MAX_BOX_SIZE).contains(&a.bbox.h));
                assert!(a.bbox.inside_unit_square());
            }
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_dataset(&small(0), Domain::Source, Split::Train, 0, 0).is_err());
    }

    #[test]
    fn invalid_config_lists_fields() {
        let config = GenConfig {
            num_classes: 2,
            objects_per_image: [1, 100],
            ..GenConfig::default()
        };
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("class_gap"), "{err}");
        assert!(err.contains("objects_per_image"), "{err}");
    }

    #[test]
    fn object_cells_carry_their_prototype() {
        let config = small(6);
        let world = World::new(&config);
        let ds = generate_dataset(&config, Domain::Source, Split::Train, 50, 0).unwrap();
        for s in &ds.samples {
            for a in s.annotations() {
                let (u, v) = a.bbox.center_cell(8);
                let obs = s.observation(v * 8 + u);
                let scores: Vec<f64> = world.prototypes.iter().map(|p| dot(obs, p)).collect();
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .unwrap()
                    .0;
                assert_eq!(best + 1, a.class);
            }
        }
    }

    #[test]
    fn background_differs_only_by_style() {
        let config = small(8);
        let world = World::new(&config);
        let src = generate_dataset(&config, Domain::Source, Split::Train, 300, 1).unwrap();
        let tgt = generate_dataset(&config, Domain::Target, Split::Train, 300, 1).unwrap();
        let mean_bg = |ds: &Dataset| {
            let mut acc = vec![0.0; config.obs_dim];
            let mut n = 0.0;
            for s in &ds.samples {
                let occupied: Vec<usize> = s
                    .annotations_unguarded()
                    .iter()
                    .map(|a| {
                        let (u, v) = a.bbox.center_cell(8);
                        v * 8 + u
                    })
                    .collect();
                for c in (0..64).filter(|c| !occupied.contains(c)) {
                    acc.iter_mut()
                        .zip(s.observation(c))
                        .for_each(|(a, x)| *a += x);
                    n += 1.0;
                }
            }
            acc.iter().map(|a| a / n).collect::<Vec<_>>()
        };
        let (ms, mt) = (mean_bg(&src), mean_bg(&tgt));
        for ((s, t), shift) in ms.iter().zip(&mt).zip(&world.style) {
            assert!((t - s - shift).abs() < 0.01);
        }
    }

    #[test]
    fn class_shift_grows_with_gap() {
        let config = small(10);
        let src = generate_dataset(&config, Domain::Source, Split::Train, 800, 2).unwrap();
        let tgt = generate_dataset(&config, Domain::Target, Split::Train, 800, 2).unwrap();
        let class_means = |ds: &Dataset| {
            let mut sums = vec![vec![0.0; config.obs_dim]; 3];
            let mut counts = [0usize; 3];
            for s in &ds.samples {
                for a in s.annotations_unguarded() {
                    let (u, v) = a.bbox.center_cell(8);
                    sums[a.class - 1]
                        .iter_mut()
                        .zip(s.observation(v * 8 + u))
                        .for_each(|(a, x)| *a += x);
                    counts[a.class - 1] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c >= 500), "{counts:?}");
            sums.into_iter()
                .zip(counts)
                .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let (ms, mt) = (class_means(&src), class_means(&tgt));
        let dist: Vec<f64> = ms
            .iter()
            .zip(&mt)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(dist[0] < dist[1] && dist[1] < dist[2], "{dist:?}");
    }

    #[test]
    fn round_trip_file() {
        let ds = generate_dataset(&small(11), Domain::Target, Split::Test, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(dataset_digest(&ds), dataset_digest(&back));
        assert!(decode(&encode(&ds)[..40]).is_err());
    }

    fn single_class_dataset(classes: &[usize]) -> Dataset {
        let config = GenConfig::default();
        let samples = classes
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let bbox = BBox {
                    cx: 0.5,
                    cy: 0.5,
                    w: 0.1,
                    h: 0.1,
                };
                Sample::new(
                    i as u32,
                    Tensor::zeros(&[8, 8, 16]),
                    Domain::Target,
                    vec![Annotation { class, bbox }],
                )
            })
            .collect();
        Dataset::new(config, Domain::Target, Split::Train, samples)
    }

    #[test]
    fn ufda_subset_sizes() {
        let ds = generate_dataset(&small(12), Domain::Target, Split::Train, 300, 0).unwrap();
        let one = sample_ufda_subset(&ds, 1, 7).unwrap();
        assert!((1..=3).contains(&one.len()));
        assert!(one.labels_withheld);
        let again = sample_ufda_subset(&ds, 1, 7).unwrap();
        assert_eq!(dataset_digest(&one), dataset_digest(&again));

        let disjoint = single_class_dataset(&[1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3]);
        assert_eq!(sample_ufda_subset(&disjoint, 3, 0).unwrap().len(), 9);
        assert_eq!(
            ds.label_reads(),
            0,
            "protocol selection is not a training read"
        );
    }

    #[test]
    fn ufda_insufficient_class_named() {
        let ds = single_class_dataset(&[1, 1, 2, 3, 3]);
        match sample_ufda_subset(&ds, 2, 0) {
            Err(Error::InsufficientClass {
                class: 2,
                available: 1,
                requested: 2,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn target_label_reads_are_counted() {
        let ds = generate_dataset(&small(13), Domain::Target, Split::Train, 3, 0).unwrap();
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.samples[0].annotations();
        let _ = ds.samples[1].annotations();
        assert_eq!(ds.label_reads(), 2);
        let src = generate_dataset(&small(13), Domain::Source, Split::Train, 3, 0).unwrap();
        let _ = src.samples[0].annotations();
        assert_eq!(src.label_reads(), 0);
    }

    #[test]
    fn box_codec_round_trip() {
        let b = BBox {
            cx: 0.5625,
            cy: 0.4375,
            w: 0.15,
            h: 0.2,
        };
        let cell = b.center_cell(8);
        let enc = encode_box(&b, cell, 8);
        assert_eq!(&enc[..3], &[0.0, 0.0, 0.0]);
        let back = decode_box(&enc, cell, 8);
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
    }
}
