//! Finite differences against reverse-mode gradients, per parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dataset::{AttributeTable, ClassInfo, GestureSequence, Split};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::trainer::{joint_loss, LossWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(index, analytic, numeric)` of the entry with the largest relative error.
    pub worst: (usize, f64, f64),
    /// Whether any entry of the analytic gradient is non-zero.
    pub nonzero: bool,
}

/// Compares `∂loss/∂θ` from one backward pass with the five-point central
/// difference `(8(L(θ+h) − L(θ−h)) − (L(θ+2h) − L(θ−2h))) / 12h` for every
/// scalar of every parameter tensor. `loss` must build a scalar
/// node from the bound parameters. Differences are divided by at least
/// `floor` so that vanishing entries are judged on their absolute error.
pub fn check_model<F>(model: &Model<f64>, loss: F, h: f64, floor: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&Model<f64>, &mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g, |_| true);
    let root = loss(model, &mut g, &bound)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = model
        .params
        .ids()
        .map(|id| {
            g.grad(bound.var(id))
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; model.params.get(id).len()])
        })
        .collect();
    drop(g);

    let value = |m: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, |_| false);
        let root = loss(m, &mut g, &bound)?;
        Ok(g.value(root).item())
    };
    let mut probe = model.clone();
    let mut out = Vec::new();
    for id in model.params.ids() {
        let mut check = ParamCheck {
            name: model.params.name(id).to_string(),
            entries: analytic[id.index()].len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: (0, 0.0, 0.0),
            nonzero: analytic[id.index()].iter().any(|&v| v != 0.0),
        };
        for (i, &a) in analytic[id.index()].iter().enumerate() {
            let base = model.params.get(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe.params.get_mut(id).data_mut()[i] = base + offset;
                value(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.params.get_mut(id).data_mut()[i] = base;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = (i, a, numeric);
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// A tiny problem for gradient checks: 3 seen classes and 1 unseen over 4
/// attributes, 8 frames of width 6, hidden width 8, one prototype per class.
pub struct MicroProblem {
    pub model: Model<f64>,
    pub batch: Vec<GestureSequence>,
    pub table: AttributeTable,
}

impl MicroProblem {
    pub const STEPS: usize = 8;
    pub const WIDTH: usize = 6;

    pub fn new(seed: u64, layers: usize) -> Result<Self> {
        let config = ModelConfig {
            input_width: Self::WIDTH,
            sequence_length: Self::STEPS,
            hidden: 8,
            layers,
            seen_classes: 3,
            prototypes_per_class: 1,
            attributes: 4,
            prototype_dim: 4,
            sae_hidden: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f64>::new(config, seed)?;
        // zero biases park ReLU inputs on the kink; move to a generic point
        for id in model.params.ids().collect::<Vec<_>>() {
            if model.params.name(id).ends_with(".bias") {
                for v in model.params.get_mut(id).data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let rows: [(&str, bool, [u8; 4]); 4] = [
            ("a", true, [1, 0, 0, 1]),
            ("b", true, [0, 1, 0, 1]),
            ("c", true, [0, 0, 1, 0]),
            ("d", false, [1, 1, 0, 0]),
        ];
        let table = AttributeTable::new(
            (0..4).map(|i| format!("attr{i}")).collect(),
            rows.iter()
                .map(|(name, seen, attrs)| ClassInfo {
                    name: name.to_string(),
                    seen: *seen,
                    attributes: attrs.to_vec(),
                })
                .collect(),
        )?;
        let batch = [0, 2]
            .iter()
            .enumerate()
            .map(|(id, &class)| GestureSequence {
                sample_id: id,
                class,
                split: Split::Train,
                steps: Self::STEPS,
                width: Self::WIDTH,
                frames: (0..Self::STEPS * Self::WIDTH)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            })
            .collect();
        Ok(MicroProblem {
            model,
            batch,
            table,
        })
    }

    /// [`check_model`] on the joint loss with the given term weights.
    pub fn check(&self, weights: LossWeights, h: f64, floor: f64) -> Result<Vec<ParamCheck>> {
        let refs: Vec<&GestureSequence> = self.batch.iter().collect();
        check_model(
            &self.model,
            |m, g, bound| Ok(joint_loss(g, bound, m, &refs, &self.table, 1.0, weights)?.total),
            h,
            floor,
        )
    }
}
