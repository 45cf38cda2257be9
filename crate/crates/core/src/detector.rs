//! Learnable class prototypes, the distance-based training losses, and the
//! nearest-prototype seen/unseen decision.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sq_dist_slice, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

/// `classes × per_class` prototype vectors of width `dim`, stored as one
/// `[C × K × D]` parameter tensor.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeBank {
    pub prototypes: ParamId,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
}

impl PrototypeBank {
    /// Coordinates drawn from N(0, 0.1²).
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        classes: usize,
        per_class: usize,
        dim: usize,
    ) -> Result<Self> {
        if classes == 0 || per_class == 0 {
            return Err(Error::Config(
                "prototype bank needs at least one class and one prototype".into(),
            ));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let data = (0..classes * per_class * dim)
            .map(|_| S::from_f64_lossy(normal.sample(rng)))
            .collect();
        let tensor = Tensor::new(vec![classes, per_class, dim], data)?;
        Ok(PrototypeBank {
            prototypes: store.push("prototypes", ParamGroup::Prototypes, tensor),
            classes,
            per_class,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat prototype index `class·K + j`.
    pub fn flat(&self, class: usize, j: usize) -> usize {
        class * self.per_class + j
    }

    /// Squared distances `[B × C·K]` from every row of `p[B×D]` to every prototype.
    pub fn distances<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, p: Var) -> Result<Var> {
        distances(g, p, bound.var(self.prototypes))
    }
}

/// `dis(p, m_kl)` for all rows of `p[B×D]` against `prototypes[C×K×D]`;
/// column `k·K + l` holds prototype `(k, l)`.
pub fn distances<S: Scalar>(g: &mut Graph<S>, p: Var, prototypes: Var) -> Result<Var> {
    let shape = g.shape(prototypes).to_vec();
    let Some(&dim) = shape.last() else {
        return Err(Error::dim("distances", g.shape(p), &shape));
    };
    if g.shape(p).last() != Some(&dim) {
        return Err(Error::dim("distances", g.shape(p), &shape));
    }
    let count = shape.iter().product::<usize>() / dim.max(1);
    let flat = g.reshape(prototypes, &[count, dim])?;
    g.pairwise_sq_dist(p, flat)
}

fn class_columns(labels: &[usize], classes: usize, per_class: usize) -> Result<Vec<usize>> {
    let mut cols = Vec::with_capacity(labels.len() * per_class);
    for &y in labels {
        if y >= classes {
            return Err(Error::Protocol(format!(
                "label {y} is not one of the {classes} seen classes"
            )));
        }
        cols.extend((0..per_class).map(|j| y * per_class + j));
    }
    Ok(cols)
}

/// Distance-based cross entropy per sample, `[B]`:
/// `−log Σ_j e^{−γ·d(p, m_yj)} / Σ_{k,l} e^{−γ·d(p, m_kl)}`, both sums in
/// max-shifted log-sum-exp form.
pub fn dce_loss<S: Scalar>(
    g: &mut Graph<S>,
    dist: Var,
    labels: &[usize],
    classes: usize,
    per_class: usize,
    gamma: f64,
) -> Result<Var> {
    if g.shape(dist) != [labels.len(), classes * per_class] {
        return Err(Error::dim(
            "dce_loss",
            g.shape(dist),
            &[labels.len(), classes * per_class],
        ));
    }
    let cols = class_columns(labels, classes, per_class)?;
    let logits = g.scale(dist, S::from_f64_lossy(-gamma));
    let all = g.logsumexp(logits)?;
    let own = g.gather_columns(logits, &cols, per_class)?;
    let own = g.logsumexp(own)?;
    g.sub(all, own)
}

/// Squared distance to the nearest prototype of the sample's own class, `[B]`.
/// Only that prototype (and `p`) receive gradient.
pub fn pl_loss<S: Scalar>(
    g: &mut Graph<S>,
    dist: Var,
    labels: &[usize],
    classes: usize,
    per_class: usize,
) -> Result<Var> {
    if g.shape(dist) != [labels.len(), classes * per_class] {
        return Err(Error::dim(
            "pl_loss",
            g.shape(dist),
            &[labels.len(), classes * per_class],
        ));
    }
    let cols = class_columns(labels, classes, per_class)?;
    let own = g.gather_columns(dist, &cols, per_class)?;
    Ok(g.min(own, 1)?.0)
}

/// Nearest prototype `ε(x)` and its squared distance `d_m(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub class: usize,
    pub prototype: usize,
    pub distance: f64,
}

/// Exhaustive nearest-prototype scan; ties go to the lowest class, then the
/// lowest prototype index.
pub fn classify<S: Scalar>(p: &[S], prototypes: &Tensor<S>) -> Result<Nearest> {
    let shape = prototypes.shape();
    if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::dim("classify", &[p.len()], shape));
    }
    let (classes, per_class, dim) = (shape[0], shape[1], shape[2]);
    if p.len() != dim {
        return Err(Error::dim("classify", &[p.len()], shape));
    }
    let mut best: Option<Nearest> = None;
    for class in 0..classes {
        for j in 0..per_class {
            let start = (class * per_class + j) * dim;
            let d = sq_dist_slice(p, &prototypes.data()[start..start + dim]).to_f64_lossy();
            if best.is_none_or(|b| d < b.distance) {
                best = Some(Nearest {
                    class,
                    prototype: j,
                    distance: d,
                });
            }
        }
    }
    Ok(best.expect("bank is non-empty"))
}

/// Per-prototype acceptance radii in squared-distance units, `[C × K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub classes: usize,
    pub per_class: usize,
    pub values: Vec<f64>,
}

impl ThresholdSet {
    pub fn zeros(classes: usize, per_class: usize) -> Self {
        ThresholdSet {
            classes,
            per_class,
            values: vec![0.0; classes * per_class],
        }
    }

    pub fn uniform(classes: usize, per_class: usize, value: f64) -> Self {
        ThresholdSet {
            classes,
            per_class,
            values: vec![value; classes * per_class],
        }
    }

    pub fn get(&self, class: usize, j: usize) -> f64 {
        self.values[class * self.per_class + j]
    }

    /// Sum of squared radii.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|t| t * t).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.classes * self.per_class {
            return Err(Error::dim(
                "thresholds",
                &[self.values.len()],
                &[self.classes, self.per_class],
            ));
        }
        if let Some(bad) = self.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Checkpoint(format!(
                "threshold {bad} is not a finite non-negative radius"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorVerdict {
    pub nearest: Nearest,
    pub threshold: f64,
    /// `d_m ≤ threshold of the nearest prototype`.
    pub accepted: bool,
}

impl DetectorVerdict {
    /// Seen class when accepted, `None` ("unseen") otherwise.
    pub fn seen_label(&self) -> Option<usize> {
        self.accepted.then_some(self.nearest.class)
    }
}

pub fn decide(nearest: Nearest, thresholds: &ThresholdSet) -> DetectorVerdict {
    let threshold = thresholds.get(nearest.class, nearest.prototype);
    DetectorVerdict {
        nearest,
        threshold,
        accepted: nearest.distance <= threshold,
    }
}

pub fn detect<S: Scalar>(
    p: &[S],
    prototypes: &Tensor<S>,
    thresholds: Option<&ThresholdSet>,
) -> Result<DetectorVerdict> {
    let thresholds = thresholds.ok_or(Error::UnfittedThresholds)?;
    let nearest = classify(p, prototypes)?;
    if thresholds.classes != prototypes.shape()[0] || thresholds.per_class != prototypes.shape()[1]
    {
        return Err(Error::dim(
            "detect",
            &[thresholds.classes, thresholds.per_class],
            &prototypes.shape()[..2],
        ));
    }
    Ok(decide(nearest, thresholds))
}
