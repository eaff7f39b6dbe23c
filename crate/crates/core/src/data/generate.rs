//! Synthetic multi-domain task generators.
//!
//! Tasks are assigned to domain groups. Tasks of one group share generative
//! structure (a class-mean subspace and layout for Gaussian clusters, a stroke
//! vocabulary for glyphs); tasks of different groups do not, to a degree set
//! by `relatedness.gap`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GLYPH_SIDE: usize = 8;
const GLYPH_PRIMITIVES: usize = 12;
const STROKES_PER_GLYPH: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    GaussianClusters,
    ProceduralGlyphs,
}

/// Classes per task: one count for all, a uniform range, or one per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassCount {
    Fixed(usize),
    Range { min: usize, max: usize },
    PerTask(Vec<usize>),
}

impl Default for ClassCount {
    fn default() -> Self {
        ClassCount::Fixed(10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Relatedness {
    /// Domain group of each task; empty puts every task in its own group.
    pub groups: Vec<usize>,
    /// 0 makes all groups share one structure, 1 makes groups independent.
    pub gap: f64,
    /// Noise multiplier along the signal subspace of the next group (Gaussian
    /// family). Above 1, directions that separate classes in one domain are
    /// extra noise in another, so no single metric suits every domain.
    pub nuisance_scale: f64,
}

impl Default for Relatedness {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            gap: 1.0,
            nuisance_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n_tasks: usize,
    pub classes_per_task: ClassCount,
    pub examples_per_class: usize,
    pub feature_dim: usize,
    /// Dimension of the subspace holding the class means (Gaussian family).
    pub signal_dim: usize,
    /// Typical distance between two class means (Gaussian family).
    pub separation: f64,
    /// Per-coordinate noise standard deviation, or the bit-flip probability
    /// for glyphs.
    pub noise_scale: f64,
    pub relatedness: Relatedness,
    /// Filled in from the run seed; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            family: Family::GaussianClusters,
            n_tasks: 12,
            classes_per_task: ClassCount::default(),
            examples_per_class: 20,
            feature_dim: 16,
            signal_dim: 4,
            separation: 6.0,
            noise_scale: 1.0,
            relatedness: Relatedness::default(),
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_tasks == 0 || self.examples_per_class == 0 || self.feature_dim == 0 {
            return bad("n_tasks, examples_per_class and feature_dim must be positive".into());
        }
        match &self.classes_per_task {
            ClassCount::Fixed(0) => return bad("classes_per_task must be positive".into()),
            ClassCount::Range { min, max } if *min == 0 || min > max => {
                return bad(format!("invalid classes_per_task range {min}..={max}"))
            }
            ClassCount::PerTask(v) if v.len() != self.n_tasks || v.contains(&0) => {
                return bad(format!("classes_per_task needs {} positive entries", self.n_tasks))
            }
            _ => {}
        }
        if !self.relatedness.groups.is_empty() && self.relatedness.groups.len() != self.n_tasks {
            return bad(format!("relatedness.groups needs {} entries", self.n_tasks));
        }
        if !(0.0..=1.0).contains(&self.relatedness.gap) {
            return bad("relatedness.gap must lie in [0, 1]".into());
        }
        if !(self.relatedness.nuisance_scale >= 0.0 && self.relatedness.nuisance_scale.is_finite()) {
            return bad("relatedness.nuisance_scale must be finite and non-negative".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        match self.family {
            Family::GaussianClusters => {
                if self.signal_dim == 0 || self.signal_dim > self.feature_dim {
                    return bad(format!(
                        "signal_dim must lie in 1..={}, got {}",
                        self.feature_dim, self.signal_dim
                    ));
                }
                if !(self.separation >= 0.0 && self.separation.is_finite()) {
                    return bad("separation must be finite and non-negative".into());
                }
            }
            Family::ProceduralGlyphs => {
                if self.feature_dim != GLYPH_SIDE * GLYPH_SIDE {
                    return bad(format!("procedural-glyphs needs feature_dim = {}", GLYPH_SIDE * GLYPH_SIDE));
                }
                if self.noise_scale > 0.5 {
                    return bad("glyph bit-flip probability must not exceed 0.5".into());
                }
            }
        }
        Ok(())
    }

    pub fn group_of(&self, task: usize) -> usize {
        self.relatedness.groups.get(task).copied().unwrap_or(task)
    }

    fn class_count(&self, task: usize, rng: &mut Rng) -> usize {
        match &self.classes_per_task {
            ClassCount::Fixed(n) => *n,
            ClassCount::Range { min, max } => rng.random_range(*min..=*max),
            ClassCount::PerTask(v) => v[task],
        }
    }

    fn max_classes(&self) -> usize {
        match &self.classes_per_task {
            ClassCount::Fixed(n) => *n,
            ClassCount::Range { max, .. } => *max,
            ClassCount::PerTask(v) => v.iter().copied().max().unwrap_or(0),
        }
    }
}

pub fn task_id(index: usize) -> String {
    format!("t{index:02}")
}

pub fn class_id(index: usize) -> String {
    format!("c{index:02}")
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt on the given columns; degenerate columns are replaced by
/// fresh random directions.
fn orthonormalize(mut cols: Vec<Vec<f64>>, rng: &mut Rng) -> Vec<Vec<f64>> {
    let dim = cols.first().map_or(0, Vec::len);
    for j in 0..cols.len() {
        loop {
            for i in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let basis = cols[i].clone();
                for (v, b) in cols[j].iter_mut().zip(basis) {
                    *v -= proj * b;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[j].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            cols[j] = normal_vec(rng, dim);
        }
    }
    cols
}

fn random_basis(rng: &mut Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let cols = (0..k).map(|_| normal_vec(rng, dim)).collect();
    orthonormalize(cols, rng)
}

struct GaussianGroup {
    /// `signal_dim` orthonormal columns of length `feature_dim`.
    basis: Vec<Vec<f64>>,
    /// Prototype class means in signal coordinates.
    layout: Vec<Vec<f64>>,
}

fn gaussian_group(spec: &GeneratorSpec, anchor: &[Vec<f64>], group: usize) -> GaussianGroup {
    let mut rng = rng::substream(spec.seed, &format!("generator/group/{group}"));
    let (d, s) = (spec.feature_dim, spec.signal_dim);
    let fresh = random_basis(&mut rng, d, s);
    let gap = spec.relatedness.gap;
    let blended = anchor
        .iter()
        .zip(&fresh)
        .map(|(a, f)| a.iter().zip(f).map(|(x, y)| (1.0 - gap) * x + gap * y).collect())
        .collect();
    let basis = orthonormalize(blended, &mut rng);

    // expected distance between two prototypes equals `separation`
    let sigma = spec.separation / (2.0 * s as f64).sqrt();
    let min_dist = 0.7 * spec.separation;
    let mut layout: Vec<Vec<f64>> = Vec::new();
    for _ in 0..spec.max_classes() {
        let mut candidate = Vec::new();
        for _ in 0..100 {
            candidate = normal_vec(&mut rng, s).into_iter().map(|v| v * sigma).collect();
            let far = layout.iter().all(|p: &Vec<f64>| {
                p.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if far {
                break;
            }
        }
        layout.push(candidate);
    }
    GaussianGroup { basis, layout }
}

fn generate_gaussian(spec: &GeneratorSpec) -> Vec<TaskDataset> {
    let (d, s) = (spec.feature_dim, spec.signal_dim);
    let anchor = random_basis(&mut rng::substream(spec.seed, "generator/anchor"), d, s);
    let ids: std::collections::BTreeSet<usize> = (0..spec.n_tasks).map(|t| spec.group_of(t)).collect();
    let ids: Vec<usize> = ids.into_iter().collect();
    let groups: BTreeMap<usize, GaussianGroup> = ids.iter().map(|&g| (g, gaussian_group(spec, &anchor, g))).collect();
    // nuisance directions of a group: the signal basis of the next group
    let nuisance: BTreeMap<usize, &[Vec<f64>]> = ids
        .iter()
        .enumerate()
        .filter(|_| ids.len() > 1)
        .map(|(i, &g)| (g, groups[&ids[(i + 1) % ids.len()]].basis.as_slice()))
        .collect();
    let extra = spec.relatedness.nuisance_scale - 1.0;
    (0..spec.n_tasks)
        .map(|t| {
            let g = spec.group_of(t);
            let group = &groups[&g];
            let mut rng = rng::substream(spec.seed, &format!("generator/task/{t}"));
            let n_classes = spec.class_count(t, &mut rng);
            // task-specific rotation and translation of the group layout
            let rotation = random_basis(&mut rng, s, s);
            let shift: Vec<f64> = normal_vec(&mut rng, s)
                .into_iter()
                .map(|v| v * 0.25 * spec.separation / (s as f64).sqrt())
                .collect();
            let mut task = TaskDataset::new(task_id(t), d);
            task.group = Some(g);
            for c in 0..n_classes {
                let proto = &group.layout[c];
                let local: Vec<f64> = (0..s)
                    .map(|i| rotation.iter().zip(proto).map(|(col, p)| col[i] * p).sum::<f64>() + shift[i])
                    .collect();
                let mean: Vec<f64> = (0..d)
                    .map(|k| group.basis.iter().zip(&local).map(|(col, z)| col[k] * z).sum())
                    .collect();
                let examples = (0..spec.examples_per_class)
                    .map(|i| {
                        let mut z = normal_vec(&mut rng, d);
                        if let (Some(basis), true) = (nuisance.get(&g), extra != 0.0) {
                            let proj: Vec<f64> = basis.iter().map(|b| b.iter().zip(&z).map(|(x, y)| x * y).sum()).collect();
                            for (b, p) in basis.iter().zip(proj) {
                                z.iter_mut().zip(b).for_each(|(v, bk)| *v += extra * p * bk);
                            }
                        }
                        Example {
                            id: format!("{}/{}/{i:03}", task_id(t), class_id(c)),
                            task_id: task_id(t),
                            class_id: class_id(c),
                            features: mean.iter().zip(&z).map(|(m, v)| m + spec.noise_scale * v).collect(),
                        }
                    })
                    .collect();
                task.classes.insert(class_id(c), examples);
            }
            task
        })
        .collect()
}

type Stroke = Vec<usize>;

fn random_stroke(rng: &mut Rng) -> Stroke {
    const DIRS: [(i32, i32); 8] = [(0, 1), (1, 0), (1, 1), (1, -1), (0, -1), (-1, 0), (-1, -1), (-1, 1)];
    let side = GLYPH_SIDE as i32;
    let (mut r, mut c) = (rng.random_range(0..side), rng.random_range(0..side));
    let (dr, dc) = DIRS[rng.random_range(0..DIRS.len())];
    let len = rng.random_range(3..=6);
    let mut cells = Vec::with_capacity(len);
    for _ in 0..len {
        if !(0..side).contains(&r) || !(0..side).contains(&c) {
            break;
        }
        cells.push((r * side + c) as usize);
        r += dr;
        c += dc;
    }
    cells
}

fn generate_glyphs(spec: &GeneratorSpec) -> Vec<TaskDataset> {
    let mut anchor_rng = rng::substream(spec.seed, "generator/anchor");
    let anchor: Vec<Stroke> = (0..GLYPH_PRIMITIVES).map(|_| random_stroke(&mut anchor_rng)).collect();
    let mut groups: BTreeMap<usize, Vec<Stroke>> = BTreeMap::new();
    let cells = GLYPH_SIDE * GLYPH_SIDE;
    (0..spec.n_tasks)
        .map(|t| {
            let g = spec.group_of(t);
            let primitives = groups.entry(g).or_insert_with(|| {
                let mut rng = rng::substream(spec.seed, &format!("generator/group/{g}"));
                anchor
                    .iter()
                    .map(|a| {
                        let fresh = random_stroke(&mut rng);
                        if rng.random_bool(spec.relatedness.gap) {
                            fresh
                        } else {
                            a.clone()
                        }
                    })
                    .collect()
            });
            let mut rng = rng::substream(spec.seed, &format!("generator/task/{t}"));
            let n_classes = spec.class_count(t, &mut rng);
            let mut task = TaskDataset::new(task_id(t), cells);
            task.group = Some(g);
            let mut glyphs: Vec<Vec<bool>> = Vec::new();
            for c in 0..n_classes {
                let mut glyph = vec![false; cells];
                for _ in 0..20 {
                    glyph = vec![false; cells];
                    for p in sample(&mut rng, primitives.len(), STROKES_PER_GLYPH) {
                        for &cell in &primitives[p] {
                            glyph[cell] = true;
                        }
                    }
                    if !glyphs.contains(&glyph) {
                        break;
                    }
                }
                glyphs.push(glyph.clone());
                let examples = (0..spec.examples_per_class)
                    .map(|i| {
                        let features = glyph
                            .iter()
                            .map(|&on| {
                                let flip = spec.noise_scale > 0.0 && rng.random_bool(spec.noise_scale);
                                if on != flip {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        Example {
                            id: format!("{}/{}/{i:03}", task_id(t), class_id(c)),
                            task_id: task_id(t),
                            class_id: class_id(c),
                            features,
                        }
                    })
                    .collect();
                task.classes.insert(class_id(c), examples);
            }
            task
        })
        .collect()
}

/// Generates the task pool described by `spec`; a pure function of it.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    Ok(match spec.family {
        Family::GaussianClusters => generate_gaussian(spec),
        Family::ProceduralGlyphs => generate_glyphs(spec),
    })
}
