//! Multi-layer semantic auto-encoder: feature → attribute space → feature.

use rand::Rng;

use crate::autodiff::{sq_dist_slice, Graph, Scalar, Tensor, Var};
use crate::encoder::uniform_tensor;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Encoder `feature → h → h → attributes` and the mirrored decoder
/// `attributes → h → h → feature`. Hidden layers use ReLU; the last layer of
/// each half is linear.
#[derive(Clone, Debug)]
pub struct SaeParams {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub feature_width: usize,
    pub attributes: usize,
    pub hidden: usize,
}

impl SaeParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        feature_width: usize,
        hidden: usize,
        attributes: usize,
    ) -> Self {
        let mut dense = |name: String, from: usize, to: usize| Dense {
            weight: store.push(
                format!("{name}.weight"),
                ParamGroup::Sae,
                uniform_tensor(rng, &[from, to], 1.0 / (from as f64).sqrt()),
            ),
            bias: store.push(
                format!("{name}.bias"),
                ParamGroup::Sae,
                Tensor::zeros(&[to]),
            ),
        };
        let enc_widths = [feature_width, hidden, hidden, attributes];
        let encoder = enc_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(format!("sae.enc{i}"), w[0], w[1]))
            .collect();
        let decoder = enc_widths
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(format!("sae.dec{i}"), *w[0], *w[1]))
            .collect();
        SaeParams {
            encoder,
            decoder,
            feature_width,
            attributes,
            hidden,
        }
    }
}

fn stack<S: Scalar>(g: &mut Graph<S>, bound: &Bound, layers: &[Dense], mut x: Var) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        let w = bound.var(layer.weight);
        if g.shape(x).last() != g.shape(w).first() {
            return Err(Error::dim("sae_forward", g.shape(x), g.shape(w)));
        }
        x = g.matmul(x, w)?;
        x = g.add_row(x, bound.var(layer.bias))?;
        if i + 1 < layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// `(z, v_res)` for features `v[B × feature_width]`.
pub fn sae_forward<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    params: &SaeParams,
    v: Var,
) -> Result<(Var, Var)> {
    let z = stack(g, bound, &params.encoder, v)?;
    let v_res = stack(g, bound, &params.decoder, z)?;
    Ok((z, v_res))
}

fn row_sq_dist<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, op: &'static str) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(Error::dim(op, g.shape(a), g.shape(b)));
    }
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    g.sum(sq, Some(1))
}

/// `‖z − z_s‖²` per row, `[B]`.
pub fn attr_loss<S: Scalar>(g: &mut Graph<S>, z: Var, target: Var) -> Result<Var> {
    row_sq_dist(g, z, target, "attr_loss")
}

/// `‖v − v_res‖²` per row, `[B]`.
pub fn res_loss<S: Scalar>(g: &mut Graph<S>, v: Var, v_res: Var) -> Result<Var> {
    row_sq_dist(g, v, v_res, "res_loss")
}

/// Index of the attribute row nearest to `z`; ties go to the lowest index.
pub fn zsl_predict<R: AsRef<[f64]>>(z: &[f64], rows: &[R]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::Dataset(
            "zero-shot prediction needs at least one class".into(),
        ));
    }
    let mut best = (0, f64::INFINITY);
    for (j, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != z.len() {
            return Err(Error::dim("zsl_predict", &[z.len()], &[row.len()]));
        }
        let d = sq_dist_slice(z, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(hidden: usize) -> (ParamStore<f64>, SaeParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sae = SaeParams::init(&mut store, &mut rng, 128, hidden, 11);
        (store, sae)
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let (mut store, sae) = setup(64);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g, |_| true);
        let v = g.constant(Tensor::full(&[2, 128], 0.7));
        let (z, r) = sae_forward(&mut g, &bound, &sae, v).unwrap();
        assert!(g.value(z).data().iter().all(|&x| x == 0.0));
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn widths_are_mirrored() {
        let (store, sae) = setup(32);
        let enc: Vec<_> = sae
            .encoder
            .iter()
            .map(|d| store.get(d.weight).shape().to_vec())
            .collect();
        let dec: Vec<_> = sae
            .decoder
            .iter()
            .map(|d| store.get(d.weight).shape().to_vec())
            .collect();
        assert_eq!(enc, vec![vec![128, 32], vec![32, 32], vec![32, 11]]);
        assert_eq!(dec, vec![vec![11, 32], vec![32, 32], vec![32, 128]]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, |_| false);
        let v = g.constant(Tensor::zeros(&[3, 128]));
        let (z, r) = sae_forward(&mut g, &bound, &sae, v).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 11]);
        assert_eq!(g.value(r).shape(), &[3, 128]);
        let bad = g.constant(Tensor::zeros(&[3, 100]));
        assert!(sae_forward(&mut g, &bound, &sae, bad).is_err());
    }

    #[test]
    fn attribute_and_reconstruction_losses() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 11]));
        let mut target = vec![0.0; 11];
        target[1] = 1.0;
        target[4] = 1.0;
        target[9] = 1.0;
        let zs = g.constant(Tensor::matrix(1, 11, target).unwrap());
        let l = attr_loss(&mut g, z, zs).unwrap();
        assert_eq!(g.value(l).data(), &[3.0]);
        let l = attr_loss(&mut g, zs, zs).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let v: Vec<f64> = (0..128).map(|i| (i as f64 * 0.1).sin()).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum();
        let vv = g.constant(Tensor::matrix(1, 128, v).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 128]));
        let l = res_loss(&mut g, vv, zero).unwrap();
        assert!((g.value(l).item() - norm).abs() < 1e-12);
        let l = res_loss(&mut g, vv, vv).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(res_loss(&mut g, vv, z).is_err());
    }

    #[test]
    fn zsl_exact_and_ties() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        assert_eq!(zsl_predict(&[1.0, 1.0], &rows).unwrap(), 1);
        // equidistant to rows 0 and 2
        assert_eq!(
            zsl_predict(
                &[1.0, 0.0],
                &[vec![0.0, 0.0], vec![9.0, 9.0], vec![2.0, 0.0]]
            )
            .unwrap(),
            0
        );
        assert!(zsl_predict::<Vec<f64>>(&[1.0], &[]).is_err());
        assert!(zsl_predict(&[1.0], &rows).is_err());
    }
}
