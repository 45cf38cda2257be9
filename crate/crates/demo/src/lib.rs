//! WebAssembly bindings for `www/index.html`: draw synthetic gestures, probe
//! the nearest-prototype detector on a 2-D toy bank, and compute H.

use gzsl::autodiff::{Graph, Tensor};
use gzsl::dataset::{generate_synthetic, SyntheticSpec, PALM_COLUMNS};
use gzsl::detector::{classify, dce_loss, decide, distances, ThresholdSet};
use wasm_bindgen::prelude::*;

/// A small synthetic corpus: 4 seen and 2 unseen classes, 2 samples each.
#[wasm_bindgen]
pub struct Gestures {
    ds: gzsl::dataset::Dataset,
}

#[wasm_bindgen]
impl Gestures {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, noise: f64) -> Result<Gestures, JsError> {
        let spec = SyntheticSpec {
            seed,
            seen_classes: 4,
            unseen_classes: 2,
            train_per_class: 2,
            test_per_class: 2,
            sequence_length: 60,
            noise,
            ..SyntheticSpec::default()
        };
        Ok(Gestures {
            ds: generate_synthetic(&spec)?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.ds.table.classes.len()
    }

    /// `name (seen|unseen): attr, attr, …` listing the active attributes.
    pub fn describe(&self, class: usize) -> String {
        let Some(c) = self.ds.table.classes.get(class) else {
            return String::new();
        };
        let active: Vec<&str> = c
            .attributes
            .iter()
            .zip(&self.ds.table.attribute_names)
            .filter(|(a, _)| **a == 1)
            .map(|(_, n)| n.as_str())
            .collect();
        let kind = if c.seen { "seen" } else { "unseen" };
        format!("{} ({kind}): {}", c.name, active.join(", "))
    }

    /// Palm `x, y` per frame of the `index`-th test sample of `class`, flattened.
    pub fn palm_path(&self, class: usize, index: usize) -> Vec<f64> {
        self.ds
            .test
            .iter()
            .filter(|s| s.class == class)
            .nth(index)
            .map(|s| {
                (0..s.steps)
                    .flat_map(|t| {
                        let f = s.frame(t);
                        [f[PALM_COLUMNS[0]], f[PALM_COLUMNS[1]]]
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Prototypes in the plane, one per class, with a shared acceptance radius.
#[wasm_bindgen]
pub struct Detector {
    bank: Tensor<f64>,
    classes: usize,
}

#[wasm_bindgen]
impl Detector {
    /// `xy` holds `x0, y0, x1, y1, …`.
    #[wasm_bindgen(constructor)]
    pub fn new(xy: Vec<f64>) -> Result<Detector, JsError> {
        if xy.is_empty() || !xy.len().is_multiple_of(2) {
            return Err(JsError::new("need an even, non-zero number of coordinates"));
        }
        let classes = xy.len() / 2;
        Ok(Detector {
            bank: Tensor::new(vec![classes, 1, 2], xy)?,
            classes,
        })
    }

    /// `[class, squared distance, accepted (0/1)]` for the point under a
    /// radius of `threshold` in squared-distance units.
    pub fn decide(&self, x: f64, y: f64, threshold: f64) -> Result<Vec<f64>, JsError> {
        let nearest = classify(&[x, y], &self.bank)?;
        let v = decide(nearest, &ThresholdSet::uniform(self.classes, 1, threshold));
        Ok(vec![
            v.nearest.class as f64,
            v.nearest.distance,
            f64::from(u8::from(v.accepted)),
        ])
    }

    /// Distance-based cross entropy of the point for each possible label.
    pub fn dce(&self, x: f64, y: f64, gamma: f64) -> Result<Vec<f64>, JsError> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::matrix(
            self.classes,
            2,
            [x, y].repeat(self.classes),
        )?);
        let m = g.constant(self.bank.clone());
        let d = distances(&mut g, p, m)?;
        let labels: Vec<usize> = (0..self.classes).collect();
        let l = dce_loss(&mut g, d, &labels, self.classes, 1, gamma)?;
        Ok(g.value(l).data().to_vec())
    }
}

#[wasm_bindgen]
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    gzsl::eval::harmonic_mean(acc_s, acc_u)
}
