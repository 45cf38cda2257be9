//! Library results against plain scalar loops written independently of it.

use gzsl::autodiff::{Graph, Tensor};
use gzsl::dataset::{GestureSequence, Split, TrainView};
use gzsl::detector::{classify, dce_loss, distances, Nearest, ThresholdSet};
use gzsl::encoder::{encode, Readout};
use gzsl::error::Error;
use gzsl::eval::harmonic_mean;
use gzsl::gradcheck::MicroProblem;
use gzsl::model::{Model, ModelConfig};
use gzsl::sae::zsl_predict;
use gzsl::trainer::{
    fit_thresholds, joint_loss, threshold_assignments, threshold_loss, train, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if grid {
                rng.gen_range(-1..=1) as f64
            } else {
                rng.gen_range(-2.0..2.0)
            }
        })
        .collect()
}

/// dce over a graph for rows `p` against `protos[C·K × D]`.
fn library_dce(
    p: &[Vec<f64>],
    protos: &[f64],
    labels: &[usize],
    c: usize,
    k: usize,
    gamma: f64,
) -> Vec<f64> {
    let dim = p[0].len();
    let mut g = Graph::<f64>::new();
    let pv = g.constant(Tensor::matrix(p.len(), dim, p.concat()).unwrap());
    let mv = g.constant(Tensor::new(vec![c, k, dim], protos.to_vec()).unwrap());
    let dist = distances(&mut g, pv, mv).unwrap();
    let loss = dce_loss(&mut g, dist, labels, c, k, gamma).unwrap();
    g.value(loss).data().to_vec()
}

#[test]
fn dce_with_one_prototype_is_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let c = rng.gen_range(2..=8);
        let dim = rng.gen_range(1..=6);
        let batch = rng.gen_range(1..=4);
        let gamma = rng.gen_range(0.1..2.0);
        let protos = random_vec(&mut rng, c * dim, false);
        let p: Vec<Vec<f64>> = (0..batch)
            .map(|_| random_vec(&mut rng, dim, false))
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..c)).collect();
        let got = library_dce(&p, &protos, &labels, c, 1, gamma);
        for b in 0..batch {
            let logits: Vec<f64> = (0..c)
                .map(|k| -gamma * sq_dist(&p[b], &protos[k * dim..(k + 1) * dim]))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let ce = -(logits[labels[b]].exp() / z).ln();
            assert!(
                (got[b] - ce).abs() <= 1e-9,
                "case {case}: {} vs {ce}",
                got[b]
            );
        }
    }
}

#[test]
fn dce_with_several_prototypes_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..300 {
        let c = rng.gen_range(2..=5);
        let k = rng.gen_range(2..=3);
        let dim = rng.gen_range(1..=4);
        let gamma = rng.gen_range(0.1..2.0);
        let protos = random_vec(&mut rng, c * k * dim, false);
        let p = vec![random_vec(&mut rng, dim, false)];
        let y = rng.gen_range(0..c);
        let got = library_dce(&p, &protos, &[y], c, k, gamma)[0];
        let e = |i: usize| (-gamma * sq_dist(&p[0], &protos[i * dim..(i + 1) * dim])).exp();
        let own: f64 = (0..k).map(|j| e(y * k + j)).sum();
        let all: f64 = (0..c * k).map(e).sum();
        assert!((got - (all.ln() - own.ln())).abs() <= 1e-9, "case {case}");
    }
}

#[test]
fn dce_is_log_c_when_all_prototypes_are_equidistant() {
    for c in 2..=12 {
        for gamma in [0.1, 1.0, 7.5] {
            // unit basis vectors around the origin
            let mut protos = vec![0.0; c * c];
            for i in 0..c {
                protos[i * c + i] = 1.0;
            }
            let got = library_dce(&[vec![0.0; c]], &protos, &[c / 2], c, 1, gamma)[0];
            assert!((got - (c as f64).ln()).abs() <= 1e-9, "C={c}, γ={gamma}");
        }
    }
}

fn brute_nearest(p: &[f64], protos: &[f64], c: usize, k: usize) -> Nearest {
    let dim = p.len();
    let mut best = Nearest {
        class: 0,
        prototype: 0,
        distance: f64::INFINITY,
    };
    for class in 0..c {
        for j in 0..k {
            let start = (class * k + j) * dim;
            let d = sq_dist(p, &protos[start..start + dim]);
            if d < best.distance {
                best = Nearest {
                    class,
                    prototype: j,
                    distance: d,
                };
            }
        }
    }
    best
}

#[test]
fn classify_and_zsl_predict_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        // grid coordinates make ties common
        let grid = case % 2 == 0;
        let c = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=3);
        let dim = rng.gen_range(1..=5);
        let protos = random_vec(&mut rng, c * k * dim, grid);
        let p = random_vec(&mut rng, dim, grid);
        let bank = Tensor::new(vec![c, k, dim], protos.clone()).unwrap();
        assert_eq!(
            classify(&p, &bank).unwrap(),
            brute_nearest(&p, &protos, c, k),
            "case {case}"
        );

        let rows: Vec<Vec<f64>> = (0..c * k)
            .map(|i| protos[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let mut want = 0;
        for (j, row) in rows.iter().enumerate() {
            if sq_dist(&p, row) < sq_dist(&p, &rows[want]) {
                want = j;
            }
        }
        assert_eq!(zsl_predict(&p, &rows).unwrap(), want, "case {case}");
    }
}

#[test]
fn threshold_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let c = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=3);
        let n = rng.gen_range(0..=40);
        let beta = [0.0, 0.005, 0.1, 1.0, rng.gen_range(0.0..2.0)][case % 5];
        let values: Vec<f64> = (0..c * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let th = ThresholdSet {
            classes: c,
            per_class: k,
            values: values.clone(),
        };
        let nearest: Vec<Nearest> = (0..n)
            .map(|_| {
                let (class, prototype) = (rng.gen_range(0..c), rng.gen_range(0..k));
                // sometimes exactly on the radius
                let distance = if rng.gen_bool(0.1) {
                    values[class * k + prototype]
                } else {
                    rng.gen_range(0.0..1.5)
                };
                Nearest {
                    class,
                    prototype,
                    distance,
                }
            })
            .collect();

        let mut hinge = 0.0;
        for s in &nearest {
            let delta = s.distance - values[s.class * k + s.prototype];
            if delta > 0.0 {
                hinge += delta + 1.0;
            }
        }
        let mut norm = 0.0;
        for t in &values {
            norm += t * t;
        }
        let want = hinge / (n.max(1) as f64) + beta * norm;
        assert_eq!(threshold_loss(&nearest, &th, beta), want, "case {case}");
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of an LSTM over `frames[T][W]`, gate blocks `[i | f | o | g]`.
fn scalar_lstm(
    frames: &[Vec<f64>],
    w_x: &[f64],
    w_h: &[f64],
    bias: &[f64],
    hidden: usize,
) -> Vec<Vec<f64>> {
    let width = frames[0].len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for x in frames {
        let mut z = bias.to_vec();
        for (col, zc) in z.iter_mut().enumerate() {
            for r in 0..width {
                *zc += x[r] * w_x[r * 4 * hidden + col];
            }
            for r in 0..hidden {
                *zc += h[r] * w_h[r * 4 * hidden + col];
            }
        }
        for j in 0..hidden {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hidden + j]);
            let o = sigmoid(z[2 * hidden + j]);
            let g = z[3 * hidden + j].tanh();
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn one_layer_model(readout: Readout, seed: u64) -> Model<f64> {
    let config = ModelConfig {
        input_width: 3,
        sequence_length: 6,
        hidden: 4,
        layers: 1,
        readout,
        seen_classes: 2,
        attributes: 2,
        prototype_dim: 3,
        sae_hidden: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    model
}

fn features(model: &Model<f64>, seqs: &[&GestureSequence]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, |_| false);
    let input = model.batch_of(seqs).unwrap();
    let f = encode(&mut g, &bound, &model.blstm, &input).unwrap();
    let t = g.value(f);
    (0..seqs.len()).map(|i| t.row(i).to_vec()).collect()
}

fn sequence(rng: &mut ChaCha8Rng, id: usize, steps: usize, width: usize) -> GestureSequence {
    GestureSequence {
        sample_id: id,
        class: 0,
        split: Split::Test,
        steps,
        width,
        frames: (0..steps * width)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect(),
    }
}

#[test]
fn bidirectional_encoder_matches_scalar_lstm() {
    for readout in [Readout::Final, Readout::Mean] {
        let model = one_layer_model(readout, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seqs: Vec<GestureSequence> = (0..3).map(|i| sequence(&mut rng, i, 6, 3)).collect();
        let refs: Vec<&GestureSequence> = seqs.iter().collect();
        let got = features(&model, &refs);
        let [fwd, bwd] = model.blstm.layers[0];
        let p = |id| model.params.get(id).data().to_vec();
        for (s, row) in seqs.iter().zip(&got) {
            let frames: Vec<Vec<f64>> = (0..6).map(|t| s.frame(t).to_vec()).collect();
            let hf = scalar_lstm(&frames, &p(fwd.w_x), &p(fwd.w_h), &p(fwd.bias), 4);
            let reversed: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
            let mut hb = scalar_lstm(&reversed, &p(bwd.w_x), &p(bwd.w_h), &p(bwd.bias), 4);
            hb.reverse();
            let want: Vec<f64> = match readout {
                Readout::Final => [hf[5].clone(), hb[0].clone()].concat(),
                Readout::Mean => (0..8)
                    .map(|j| {
                        let col = |t: usize| if j < 4 { hf[t][j] } else { hb[t][j - 4] };
                        (0..6).map(col).sum::<f64>() / 6.0
                    })
                    .collect(),
            };
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "{readout:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn reversing_time_swaps_directions() {
    let model = one_layer_model(Readout::Final, 7);
    let mut swapped = model.clone();
    let [fwd, bwd] = model.blstm.layers[0];
    for (a, b) in [(fwd.w_x, bwd.w_x), (fwd.w_h, bwd.w_h), (fwd.bias, bwd.bias)] {
        *swapped.params.get_mut(a) = model.params.get(b).clone();
        *swapped.params.get_mut(b) = model.params.get(a).clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = sequence(&mut rng, 0, 6, 3);
    let mut r = s.clone();
    r.frames = (0..6).rev().flat_map(|t| s.frame(t).to_vec()).collect();
    let a = &features(&model, &[&s])[0];
    let b = &features(&swapped, &[&r])[0];
    for j in 0..4 {
        assert!((a[j] - b[j + 4]).abs() <= 1e-12);
        assert!((a[j + 4] - b[j]).abs() <= 1e-12);
    }
}

#[test]
fn harmonic_mean_reference_value() {
    assert!((harmonic_mean(0.8906, 0.5833) - 0.7049).abs() <= 0.0005);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    assert_eq!(harmonic_mean(1.0, 0.0), 0.0);
}

#[test]
fn unseen_samples_are_rejected_by_training_entry_points() {
    let problem = MicroProblem::new(9, 1).unwrap();
    let mut intruder = problem.batch[0].clone();
    intruder.class = 3;
    assert!(!problem.table.is_seen(3));
    let samples: Vec<&GestureSequence> = vec![&problem.batch[0], &intruder, &problem.batch[1]];
    let config = TrainConfig {
        epochs: 1,
        precision: gzsl::trainer::Precision::F64,
        ..TrainConfig::default()
    };
    let protocol = |r: Result<(), Error>| matches!(r, Err(Error::Protocol(_)));

    let mut model = problem.model.clone();
    let before = model.params.checksum();
    assert!(protocol(
        train(&mut model, &samples, &problem.table, &config).map(|_| ())
    ));
    assert_eq!(model.params.checksum(), before);
    assert!(protocol(
        fit_thresholds(&model, &samples, &problem.table, &config).map(|_| ())
    ));
    assert!(protocol(
        threshold_assignments(&model, &samples, &problem.table, config.threshold_samples)
            .map(|_| ())
    ));
    assert!(protocol(
        TrainView::new(samples.clone(), &problem.table).map(|_| ())
    ));
    let mut g = Graph::new();
    let bound = model.bind(&mut g, |_| true);
    assert!(protocol(
        joint_loss(
            &mut g,
            &bound,
            &model,
            &samples,
            &problem.table,
            1.0,
            config.weights()
        )
        .map(|_| ())
    ));

    // the seen-only subset goes through
    let clean: Vec<&GestureSequence> = problem.batch.iter().collect();
    assert!(train(&mut model, &clean, &problem.table, &config).is_ok());
    assert!(fit_thresholds(&model, &clean, &problem.table, &config).is_ok());
}
