//! Synthetic two-domain datasets with class/subtype conditional and label shift.
//!
//! Every subtype is an isotropic Gaussian. A [`DomainShiftSpec`] fixes the means
//! and mixing proportions for source, target and a held-out target test draw.
//! Ground-truth subtypes are carried by [`LabeledSample`] for evaluation only;
//! training code consumes [`SourcePool`] and [`TargetPool`], which do not have
//! the field at all (and the target pool has no class labels either).


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Parse(format!("unknown domain {other:?}"))),
        }
    }
}

/// Mixture parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub class_proportions: Vec<f64>,
    /// `[class][subtype]`, each row sums to one.
    pub subtype_proportions: Vec<Vec<f64>>,
    /// `[class][subtype][dim]`.
    pub subtype_means: Vec<Vec<Vec<f64>>>,
    pub samples: usize,
}

/// Proportions of the held-out target draw; means are the target's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    pub class_proportions: Vec<f64>,
    pub subtype_proportions: Vec<Vec<f64>>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub name: String,
    pub num_classes: usize,
    pub subtypes_per_class: Vec<usize>,
    pub input_dim: usize,
    /// Isotropic noise standard deviation shared by all subtypes.
    pub noise_std: f64,
    pub source: DomainParams,
    pub target: DomainParams,
    pub test: TestParams,
}

const PROPORTION_TOL: f64 = 1e-9;

fn check_simplex(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("{what}: proportions must be finite and nonnegative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROPORTION_TOL {
        return Err(Error::Validation(format!("{what}: proportions sum to {s}, not 1")));
    }
    Ok(())
}

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes;
        if n == 0 || self.input_dim == 0 {
            return Err(Error::Validation("need at least one class and one input dim".into()));
        }
        if self.subtypes_per_class.len() != n || self.subtypes_per_class.contains(&0) {
            return Err(Error::Validation("subtypes_per_class must list a positive count per class".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Validation("noise_std must be finite and nonnegative".into()));
        }
        let check_props = |label: &str, cp: &[f64], sp: &[Vec<f64>]| -> Result<()> {
            if cp.len() != n || sp.len() != n {
                return Err(Error::Validation(format!("{label}: expected {n} classes")));
            }
            check_simplex(&format!("{label} class"), cp)?;
            for (c, row) in sp.iter().enumerate() {
                if row.len() != self.subtypes_per_class[c] {
                    return Err(Error::Validation(format!("{label}: class {c} subtype count mismatch")));
                }
                check_simplex(&format!("{label} class {c} subtype"), row)?;
            }
            Ok(())
        };
        for (label, d) in [("source", &self.source), ("target", &self.target)] {
            check_props(label, &d.class_proportions, &d.subtype_proportions)?;
            if d.subtype_means.len() != n {
                return Err(Error::Validation(format!("{label}: means for {n} classes expected")));
            }
            for (c, subs) in d.subtype_means.iter().enumerate() {
                if subs.len() != self.subtypes_per_class[c] {
                    return Err(Error::Validation(format!("{label}: class {c} mean count mismatch")));
                }
                for m in subs {
                    if m.len() != self.input_dim || m.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Validation(format!("{label}: malformed mean in class {c}")));
                    }
                }
            }
        }
        check_props("test", &self.test.class_proportions, &self.test.subtype_proportions)?;
        Ok(())
    }

    /// True iff some subtype mean differs between source and target.
    pub fn has_conditional_shift(&self) -> bool {
        self.source.subtype_means != self.target.subtype_means
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One drawn point with its hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub domain: Domain,
    pub class_label: usize,
    /// Evaluation only.
    pub true_subtype: usize,
    pub x: Vec<f64>,
}

fn draw(
    spec: &DomainShiftSpec,
    means: &[Vec<Vec<f64>>],
    class_p: &[f64],
    subtype_p: &[Vec<f64>],
    count: usize,
    domain: Domain,
    first_id: u64,
    rng: &mut Rng,
) -> Vec<LabeledSample> {
    (0..count)
        .map(|i| {
            let class_label = rng.weighted_index(class_p).expect("validated simplex");
            let true_subtype = rng.weighted_index(&subtype_p[class_label]).expect("validated simplex");
            let mean = &means[class_label][true_subtype];
            let x = mean.iter().map(|m| m + spec.noise_std * rng.normal()).collect();
            LabeledSample { id: first_id + i as u64, domain, class_label, true_subtype, x }
        })
        .collect()
}

/// Draws the source and target training sets. Deterministic in `(spec, seed)`.
pub fn generate_domain_pair(spec: &DomainShiftSpec, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    spec.validate()?;
    let s = &spec.source;
    let t = &spec.target;
    let source = draw(spec, &s.subtype_means, &s.class_proportions, &s.subtype_proportions, s.samples, Domain::Source, 0, &mut Rng::substream(seed, 0));
    let target = draw(
        spec,
        &t.subtype_means,
        &t.class_proportions,
        &t.subtype_proportions,
        t.samples,
        Domain::Target,
        s.samples as u64,
        &mut Rng::substream(seed, 1),
    );
    Ok((source, target))
}

/// Draws the held-out labelled target test set.
pub fn generate_test_set(spec: &DomainShiftSpec, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let first = (spec.source.samples + spec.target.samples) as u64;
    Ok(draw(
        spec,
        &spec.target.subtype_means,
        &spec.test.class_proportions,
        &spec.test.subtype_proportions,
        spec.test.samples,
        Domain::Target,
        first,
        &mut Rng::substream(seed, 2),
    ))
}

/// Labelled source data as seen by training code.
#[derive(Debug, Clone)]
pub struct SourcePool {
    pub ids: Vec<u64>,
    pub x: Matrix,
    pub labels: Vec<usize>,
}

/// Unlabelled target data as seen by training code.
#[derive(Debug, Clone)]
pub struct TargetPool {
    pub ids: Vec<u64>,
    pub x: Matrix,
}

/// Labelled evaluation data (any domain). Never passed to training.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ids: Vec<u64>,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub subtypes: Vec<usize>,
}

fn stack(samples: &[LabeledSample]) -> Result<Matrix> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    Matrix::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>(), dim)
}

impl SourcePool {
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        if samples.iter().any(|s| s.domain != Domain::Source) {
            return Err(Error::Validation("source pool given target samples".into()));
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            x: stack(samples)?,
            labels: samples.iter().map(|s| s.class_label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl TargetPool {
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        if samples.iter().any(|s| s.domain != Domain::Target) {
            return Err(Error::Validation("target pool given source samples".into()));
        }
        Ok(Self { ids: samples.iter().map(|s| s.id).collect(), x: stack(samples)? })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl EvalSet {
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            x: stack(samples)?,
            labels: samples.iter().map(|s| s.class_label).collect(),
            subtypes: samples.iter().map(|s| s.true_subtype).collect(),
        })
    }
}

/// Everything a training run consumes: the two training pools and a held-out
/// labelled target test set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub source: SourcePool,
    pub target: TargetPool,
    pub test: EvalSet,
}

impl Dataset {
    pub fn generate(spec: &DomainShiftSpec, seed: u64) -> Result<Self> {
        let (s, t) = generate_domain_pair(spec, seed)?;
        let test = generate_test_set(spec, seed)?;
        Self::from_samples(spec.num_classes, &s, &t, &test)
    }

    pub fn from_samples(
        num_classes: usize,
        source: &[LabeledSample],
        target: &[LabeledSample],
        test: &[LabeledSample],
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Validation("both training pools must be non-empty".into()));
        }
        let all = source.iter().chain(target).chain(test);
        if let Some(s) = all.clone().find(|s| s.class_label >= num_classes) {
            return Err(Error::Validation(format!("sample {} has class {} of {num_classes}", s.id, s.class_label)));
        }
        let dim = source[0].x.len();
        if all.clone().any(|s| s.x.len() != dim) {
            return Err(shape_err!("samples disagree on input dimension"));
        }
        Ok(Self {
            num_classes,
            source: SourcePool::from_samples(source)?,
            target: TargetPool::from_samples(target)?,
            test: EvalSet::from_samples(test)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.source.x.cols()
    }
}

/// Which shift components a preset switches on.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShiftRecipe {
    pub conditional: bool,
    pub class_label: bool,
    pub subtype_label: bool,
    /// Fraction of target subtypes (per class) with zero mass, in quarters.
    pub missing_quarters: Option<usize>,
}

impl ShiftRecipe {
    fn union(self, other: Self) -> Result<Self> {
        let missing = match (self.missing_quarters, other.missing_quarters) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Validation("cannot combine two missing-subtype fractions".into()))
            }
            (a, b) => a.or(b),
        };
        Ok(Self {
            conditional: self.conditional || other.conditional,
            class_label: self.class_label || other.class_label,
            subtype_label: self.subtype_label || other.subtype_label,
            missing_quarters: missing,
        })
    }
}

/// Geometry of the preset mixtures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetGeometry {
    pub input_dim: usize,
    pub class_sep: f64,
    pub subtype_sep: f64,
    pub noise_std: f64,
    /// Norm of the per-subtype target displacement.
    pub shift: f64,
    /// Fraction of the way the confusable subtype sits toward the other class, in both domains.
    pub base_confusion: f64,
    /// Extra fraction the confusable target subtype moves under conditional shift.
    pub confusion: f64,
    pub samples_per_domain: usize,
    pub test_samples: usize,
}

impl Default for PresetGeometry {
    fn default() -> Self {
        Self {
            input_dim: 64,
            class_sep: 4.0,
            subtype_sep: 3.0,
            noise_std: 1.0,
            shift: 2.5,
            base_confusion: 0.3,
            confusion: 0.35,
            samples_per_domain: 1500,
            test_samples: 1500,
        }
    }
}

const GEOMETRY_SEED: u64 = 0x5eed_0f_d0_4a1e;

/// Names accepted by [`preset`]; `a+b` composes two names.
pub const PRESET_NAMES: &[&str] = &[
    "baseline-noshift",
    "class-labelshift",
    "subtype-labelshift",
    "subtype-condshift",
    "missing-subtypes-0",
    "missing-subtypes-25",
    "missing-subtypes-50",
    "missing-subtypes-75",
];

fn recipe_for(name: &str) -> Result<ShiftRecipe> {
    let r = ShiftRecipe::default();
    Ok(match name {
        "baseline-noshift" => r,
        "class-labelshift" => ShiftRecipe { class_label: true, ..r },
        "subtype-labelshift" => ShiftRecipe { subtype_label: true, ..r },
        "subtype-condshift" => ShiftRecipe { conditional: true, ..r },
        "missing-subtypes" | "missing-subtypes-75" => ShiftRecipe { conditional: true, missing_quarters: Some(3), ..r },
        "missing-subtypes-0" => ShiftRecipe { conditional: true, missing_quarters: Some(0), ..r },
        "missing-subtypes-25" => ShiftRecipe { conditional: true, missing_quarters: Some(1), ..r },
        "missing-subtypes-50" => ShiftRecipe { conditional: true, missing_quarters: Some(2), ..r },
        other => return Err(Error::Lookup(format!("unknown preset {other:?}"))),
    })
}

/// Looks up a named scenario with default geometry.
pub fn preset(name: &str) -> Result<DomainShiftSpec> {
    preset_with(name, &PresetGeometry::default())
}

/// All base presets with default geometry.
pub fn scenario_presets() -> Vec<DomainShiftSpec> {
    PRESET_NAMES.iter().map(|n| preset(n).expect("catalog names resolve")).collect()
}

pub fn preset_with(name: &str, geo: &PresetGeometry) -> Result<DomainShiftSpec> {
    let mut recipe = ShiftRecipe::default();
    for part in name.split('+') {
        recipe = recipe.union(recipe_for(part.trim())?)?;
    }
    let mut spec = build_spec(&recipe, geo);
    spec.name = name.to_string();
    spec.validate()?;
    Ok(spec)
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn skewed(k: usize, reverse: bool) -> Vec<f64> {
    // Geometric weights 1, 1/3, 1/9, ... normalized.
    let mut w: Vec<f64> = (0..k).map(|i| 3f64.powi(-(i as i32))).collect();
    if reverse {
        w.reverse();
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn build_spec(recipe: &ShiftRecipe, geo: &PresetGeometry) -> DomainShiftSpec {
    let subtypes: Vec<usize> = if recipe.missing_quarters.is_some() { vec![4, 4, 4] } else { vec![2, 3, 4] };
    let n = subtypes.len();
    let d = geo.input_dim;
    let mut rng = Rng::new(GEOMETRY_SEED);

    let class_dirs: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(d, &mut rng)).collect();
    let mut source_means: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|c| {
            (0..subtypes[c])
                .map(|_| {
                    let off = unit_vector(d, &mut rng);
                    (0..d).map(|j| geo.class_sep * class_dirs[c][j] + geo.subtype_sep * off[j]).collect()
                })
                .collect()
        })
        .collect();
    // Confusable pair: the last subtype of class 0 leans toward subtype 0 of class 1.
    let last = subtypes[0] - 1;
    let anchor = source_means[1][0].clone();
    for (m, a) in source_means[0][last].iter_mut().zip(&anchor) {
        *m += geo.base_confusion * (a - *m);
    }
    let shift_dirs: Vec<Vec<Vec<f64>>> =
        subtypes.iter().map(|&k| (0..k).map(|_| unit_vector(d, &mut rng)).collect()).collect();

    let mut target_means = source_means.clone();
    if recipe.conditional {
        for c in 0..n {
            for k in 0..subtypes[c] {
                for j in 0..d {
                    target_means[c][k][j] += geo.shift * shift_dirs[c][k][j];
                }
            }
        }
        for j in 0..d {
            let toward = source_means[1][0][j] - source_means[0][last][j];
            target_means[0][last][j] += geo.confusion * toward;
        }
    }

    let source_class = uniform(n);
    let target_class = if recipe.class_label {
        let w: Vec<f64> = (0..n).map(|c| (n - c) as f64).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    } else {
        uniform(n)
    };
    let (source_sub, mut target_sub): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if recipe.subtype_label {
        (subtypes.iter().map(|&k| skewed(k, false)).collect(), subtypes.iter().map(|&k| skewed(k, true)).collect())
    } else {
        (subtypes.iter().map(|&k| uniform(k)).collect(), subtypes.iter().map(|&k| uniform(k)).collect())
    };
    let mut test_sub = target_sub.clone();
    if let Some(q) = recipe.missing_quarters {
        // Subtype 0 is shared by every setting; subtypes 1..=q are removed from the target.
        for (c, &k) in subtypes.iter().enumerate() {
            let removed = (q * k) / 4;
            let kept: Vec<usize> = (0..k).filter(|&s| s == 0 || s > removed).collect();
            let mut row = vec![0.0; k];
            for &s in &kept {
                row[s] = 1.0 / kept.len() as f64;
            }
            target_sub[c] = row;
            let mut t = vec![0.0; k];
            t[0] = 1.0;
            test_sub[c] = t;
        }
    }

    DomainShiftSpec {
        name: String::new(),
        num_classes: n,
        subtypes_per_class: subtypes,
        input_dim: d,
        noise_std: geo.noise_std,
        source: DomainParams {
            class_proportions: source_class,
            subtype_proportions: source_sub,
            subtype_means: source_means,
            samples: geo.samples_per_domain,
        },
        target: DomainParams {
            class_proportions: target_class.clone(),
            subtype_proportions: target_sub,
            subtype_means: target_means,
            samples: geo.samples_per_domain,
        },
        test: TestParams { class_proportions: target_class, subtype_proportions: test_sub, samples: geo.test_samples },
    }
}
