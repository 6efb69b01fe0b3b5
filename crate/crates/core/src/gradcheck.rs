//! Central finite-difference checks of tape gradients for every op, layer
//! and loss in the crate.
//!
//! The relative error of one entry is `|g − ĝ| / max(|g|, |ĝ|, FLOOR)`,
//! with `ĝ` the central difference at step [`STEP`].

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::diffusion::{timestep_embedding, NoisePredictor, PredictorVars};
use crate::error::Result;
use crate::graph::Graph;
use crate::layers::{
    weighted_ce_loss, Activation, Aggregator, ClassifierHead, GatLayer, GatVars, GcnLayer, HeadVars,
    NormalizedAdjacency, Neighborhoods, OverrideMode, Overrides,
};
use crate::pointer::{Bound, PointerNet, RecurrentCell};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

/// Largest relative error of one check over all its instances.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Loss<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error between the tape gradient of `f` with respect to
/// each of `inputs` and its central difference.
pub fn max_relative_error(inputs: &[Tensor], f: &Loss<'_>) -> Result<f64> {
    let tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let v = xs.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let l = f(&t, &v)?;
        Ok(t.scalar_value(l))
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let g = tape.grad(v).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let num = (up - down) / (2.0 * STEP);
            let err = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

const KINK_MARGIN: f64 = 1e-2;

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    let cols = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % cols];
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Random projection to a scalar, so every output entry gets a distinct
/// upstream gradient.
fn project(tape: &Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone())?;
    tape.sum(tape.mul(out, rv)?)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n));
        for j in i + 2..n {
            if rng.gen::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let labels = (0..n).map(|v| u8::from(v % 3 == 0)).collect();
    Graph::new(normal(rng, &[n, d]), labels, edges).expect("valid graph")
}

struct Case {
    name: &'static str,
    run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

fn op_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            run: |rng| {
                let (a, b, r) = (normal(rng, &[3, 4]), normal(rng, &[4, 2]), normal(rng, &[3, 2]));
                max_relative_error(&[a, b], &|t, v| project(t, t.matmul(v[0], v[1])?, &r))
            },
        },
        Case {
            name: "add_sub_mul",
            run: |rng| {
                let (a, b, c, r) = (normal(rng, &[3, 3]), normal(rng, &[3, 3]), normal(rng, &[1, 1]), normal(rng, &[3, 3]));
                max_relative_error(&[a, b, c], &|t, v| {
                    let x = t.mul(t.add(v[0], v[1])?, t.sub(v[1], v[0])?)?;
                    project(t, t.mul(x, v[2])?, &r)
                })
            },
        },
        Case {
            name: "affine_transpose",
            run: |rng| {
                let (a, r) = (normal(rng, &[2, 3]), normal(rng, &[3, 2]));
                max_relative_error(&[a], &|t, v| project(t, t.affine(t.transpose(v[0])?, -1.7, 0.3)?, &r))
            },
        },
        Case {
            name: "tanh_sigmoid",
            run: |rng| {
                let (a, r) = (normal(rng, &[3, 3]), normal(rng, &[3, 3]));
                max_relative_error(&[a], &|t, v| project(t, t.mul(t.tanh(v[0])?, t.sigmoid(v[0])?)?, &r))
            },
        },
        Case {
            name: "relu_leaky_relu",
            run: |rng| {
                let (a, r) = (normal(rng, &[4, 3]), normal(rng, &[4, 3]));
                max_relative_error(&[a], &|t, v| project(t, t.add(t.relu(v[0])?, t.leaky_relu(v[0])?)?, &r))
            },
        },
        Case {
            name: "exp_log",
            run: |rng| {
                let a = normal(rng, &[3, 3]).map(|x| 0.5 + x.abs());
                let r = normal(rng, &[3, 3]);
                max_relative_error(&[a], &|t, v| project(t, t.add(t.exp(t.scale(v[0], 0.5)?)?, t.log(v[0])?)?, &r))
            },
        },
        Case {
            name: "softmax_rows",
            run: |rng| {
                let (a, r) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
                let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
                max_relative_error(&[a], &move |t, v| {
                    let s = t.add(t.softmax_rows(v[0])?, t.masked_softmax_rows(v[0], &mask)?)?;
                    let l = t.masked_log_softmax_rows(v[0], &mask)?;
                    project(t, t.add(s, l)?, &r)
                })
            },
        },
        Case {
            name: "sum_mean",
            run: |rng| {
                let a = normal(rng, &[3, 2]);
                max_relative_error(&[a], &|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    t.add(t.sum(sq)?, t.scale(t.mean(t.tanh(v[0])?)?, 3.0)?)
                })
            },
        },
        Case {
            name: "add_row_concat",
            run: |rng| {
                let (a, b, row, r) = (normal(rng, &[2, 3]), normal(rng, &[2, 2]), normal(rng, &[1, 5]), normal(rng, &[4, 5]));
                max_relative_error(&[a, b, row], &|t, v| {
                    let c = t.add_row(t.concat_cols(&[v[0], v[1]])?, v[2])?;
                    project(t, t.concat_rows(&[c, t.tanh(c)?])?, &r)
                })
            },
        },
        Case {
            name: "gather_scatter_scale_rows",
            run: |rng| {
                let (a, w, r) = (normal(rng, &[4, 2]), normal(rng, &[6, 1]), normal(rng, &[3, 2]));
                let idx: Rc<[usize]> = vec![0, 3, 3, 1, 2, 0].into();
                let to: Rc<[usize]> = vec![0, 0, 1, 2, 2, 2].into();
                max_relative_error(&[a, w], &move |t, v| {
                    let g = t.scale_rows(t.gather_rows(v[0], idx.clone())?, v[1])?;
                    project(t, t.scatter_add_rows(g, to.clone(), 3)?, &r)
                })
            },
        },
        Case {
            name: "segment_softmax",
            run: |rng| {
                let (a, r) = (normal(rng, &[7, 1]), normal(rng, &[7, 1]));
                let seg: Rc<[usize]> = vec![0, 0, 1, 1, 1, 2, 0].into();
                max_relative_error(&[a], &move |t, v| project(t, t.segment_softmax(v[0], seg.clone(), 3)?, &r))
            },
        },
        Case {
            name: "weighted_bce",
            run: |rng| {
                let a = normal(rng, &[6, 1]);
                let y: Vec<f64> = (0..6).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
                let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..3.0)).collect();
                max_relative_error(&[a], &move |t, v| t.weighted_bce(t.sigmoid(v[0])?, &y, &w))
            },
        },
    ]
}

fn gat_case(rng: &mut ChaCha8Rng, aggregator: Aggregator, heads: usize, overrides: bool) -> Result<f64> {
    let (n, d, h) = (6, 3, 2);
    let g = random_graph(rng, n, d);
    let mut layer = GatLayer::new(d, h, heads, Activation::Relu, rng);
    layer.aggregator = aggregator;
    let nb = if overrides {
        let mut ov = Overrides::new(OverrideMode::Replace);
        let v = g.neighbors(0)[0];
        ov.insert(0, v, normal(rng, &[d]).into_data());
        Neighborhoods::with_overrides(&g, &ov)?
    } else {
        Neighborhoods::vanilla(&g)
    };
    // Attention logits near zero would put leaky_relu's kink inside the
    // difference step; scaling keeps them clear of it.
    let mut inputs = vec![g.features().clone()];
    for hd in &layer.heads {
        inputs.push(hd.weight.clone());
        inputs.push(hd.attention.map(|x| 2.0 * x));
    }
    let r = normal(rng, &[n, h]);
    max_relative_error(&inputs, &move |t, v| {
        let vars = GatVars {
            heads: v[1..].chunks(2).map(|c| (c[0], c[1])).collect(),
        };
        project(t, layer.forward_tape(t, &nb, v[0], &vars)?, &r)
    })
}

fn layer_cases() -> Vec<Case> {
    vec![
        Case {
            name: "gcn_layer",
            run: |rng| {
                let g = random_graph(rng, 6, 3);
                let adj = NormalizedAdjacency::new(&g);
                let layer = GcnLayer::new(3, 2, rng);
                let r = normal(rng, &[6, 2]);
                let inputs = [g.features().clone(), layer.weight.clone()];
                max_relative_error(&inputs, &move |t, v| project(t, layer.forward_tape(t, &adj, v[0], v[1])?, &r))
            },
        },
        Case { name: "gat_attention", run: |rng| gat_case(rng, Aggregator::Attention, 1, false) },
        Case { name: "gat_mean", run: |rng| gat_case(rng, Aggregator::Mean, 1, false) },
        Case { name: "gat_two_heads", run: |rng| gat_case(rng, Aggregator::Attention, 2, false) },
        Case { name: "gat_with_overrides", run: |rng| gat_case(rng, Aggregator::Attention, 1, true) },
        Case {
            name: "classifier_head_loss",
            run: |rng| {
                let head = ClassifierHead::new(3, 4, rng);
                let z = normal(rng, &[5, 3]);
                let y = [1.0, 0.0, 0.0, 1.0, 0.0];
                let inputs = [z, head.w1.clone(), head.b1.clone(), head.w2.clone(), head.b2.clone()];
                max_relative_error(&inputs, &move |t, v| {
                    let hv = HeadVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                    let p = head.forward_tape(t, v[0], &hv)?;
                    weighted_ce_loss(t, p, &y, 2.5)
                })
            },
        },
        Case { name: "pointer_tanh", run: |rng| pointer_case(rng, RecurrentCell::Tanh) },
        Case { name: "pointer_lstm", run: |rng| pointer_case(rng, RecurrentCell::Lstm) },
        Case {
            name: "ddpm_loss",
            run: |rng| {
                let (d, tw) = (2, 4);
                // Redraw until no hidden pre-activation sits within reach of
                // the ReLU kink for the difference step.
                let (net, x) = loop {
                    let mut net = NoisePredictor::new(d, 5, tw, rng);
                    net.w3 = normal(rng, &[5, d]);
                    net.b3 = normal(rng, &[1, d]);
                    let mut input = Vec::new();
                    for t in [1usize, 7, 40] {
                        input.extend(normal(rng, &[d]).into_data());
                        input.extend(timestep_embedding(t, tw));
                    }
                    let x = Tensor::matrix(3, d + tw, input)?;
                    let pre1 = affine(&x, &net.w1, &net.b1)?;
                    let pre2 = affine(&pre1.map(|v| v.max(0.0)), &net.w2, &net.b2)?;
                    if [&pre1, &pre2].iter().all(|p| p.data().iter().all(|v| v.abs() > KINK_MARGIN)) {
                        break (net, x);
                    }
                };
                let eps = normal(rng, &[3, d]);
                let inputs = [net.w1.clone(), net.b1.clone(), net.w2.clone(), net.b2.clone(), net.w3.clone(), net.b3.clone()];
                max_relative_error(&inputs, &move |t, v| {
                    let pv = PredictorVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], w3: v[4], b3: v[5] };
                    let pred = net.forward_tape(t, &pv, t.constant(x.clone())?)?;
                    let diff = t.sub(pred, t.constant(eps.clone())?)?;
                    t.scale(t.sum(t.mul(diff, diff)?)?, 1.0 / 3.0)
                })
            },
        },
    ]
}

fn pointer_case(rng: &mut ChaCha8Rng, cell: RecurrentCell) -> Result<f64> {
    let (n, d, hidden) = (5, 2, 3);
    let g = random_graph(rng, n, d);
    let seqs = crate::pointer::build_sequences(&g, 3, crate::graph::Truncation::AscendingId, 0)?;
    let seqs: Vec<_> = seqs.into_iter().take(2).collect();
    let net = PointerNet::new(d, hidden, cell, rng);
    let x = g.features().clone();
    let mut inputs = vec![x.clone()];
    inputs.extend(net.w_enc.iter().cloned());
    inputs.extend(net.b_enc.iter().cloned());
    inputs.extend(net.w_dec.iter().cloned());
    inputs.extend(net.b_dec.iter().cloned());
    inputs.extend([net.w1.clone(), net.w2.clone(), net.b_score.clone(), net.beta.clone()]);
    let mask: Vec<bool> = seqs.iter().flat_map(|s| s.duplicated.iter().map(|&dup| !dup)).collect();
    let q = normal(rng, &[seqs.len(), 3]).map(f64::abs);
    let k = cell_gates(cell);
    max_relative_error(&inputs, &move |t, v| {
        let (enc_w, rest) = v[1..].split_at(k);
        let (enc_b, rest) = rest.split_at(k);
        let (dec_w, rest) = rest.split_at(k);
        let (dec_b, rest) = rest.split_at(k);
        let b = Bound {
            enc: enc_w.iter().copied().zip(enc_b.iter().copied()).collect(),
            dec: dec_w.iter().copied().zip(dec_b.iter().copied()).collect(),
            w1: rest[0],
            w2: rest[1],
            b_score: rest[2],
            beta: rest[3],
        };
        let f = net.forward(t, &b, v[0], &x, &seqs)?;
        let logp = t.masked_log_softmax_rows(f.scores, &mask)?;
        let ce = t.scale(t.sum(t.mul(logp, t.constant(q.clone())?)?)?, -1.0)?;
        t.add(ce, t.sum(t.mul(f.scores, f.scores)?)?)
    })
}

fn cell_gates(cell: RecurrentCell) -> usize {
    match cell {
        RecurrentCell::Tanh => 1,
        RecurrentCell::Lstm => 4,
    }
}

/// Runs every check on `instances` random instances drawn from `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (c, case) in op_cases().into_iter().chain(layer_cases()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max((case.run)(&mut rng)?);
        }
        reports.push(CheckReport {
            name: case.name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_matches_finite_differences() {
        for r in run_suite(10, 11).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: relative error {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // `relu` at exactly zero has a one-sided difference of 1/2.
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let e = max_relative_error(&[a], &|t, v| t.sum(t.relu(v[0])?)).unwrap();
        assert!(e > 0.1);
    }
}
