//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use idac::actor::{actor_loss, actor_loss_with_components, alpha_loss, standard_normal, ActorParams, SiaSampleBundle};
use idac::autodiff::{MlpParams, Tape, Tensor, Var};
use idac::critic::{critic_loss, CriticMode, CriticPair, TransitionBatch};
use idac::distributional::{quantile_huber_loss_rows, sort_rows, QuantileConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor so near-zero entries are judged on absolute error.
const FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter().zip(n).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_grad_h(x, H, f)
}

pub fn numeric_grad_h(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between the tape gradient and central differences
/// over every entry of every input. `f` must return a scalar node.
pub fn check_graph(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (idx, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[idx], t.len());
        let numeric = numeric_grad(t.data(), |p| {
            let mut perturbed = inputs.to_vec();
            perturbed[idx] = Tensor::matrix(t.rows(), t.cols(), p.to_vec()).unwrap();
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.into_iter().map(|t| tape.param(t)).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Inputs whose magnitude stays at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = rng.random_range(gap..2.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
    .unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every output
/// entry carries a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape, v: Var, rng_seed: u64) -> Var {
    let (r, c) = (tape.value(v).rows(), tape.value(v).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(v, w);
    tape.sum(p)
}

pub type Case = (&'static str, fn(&mut ChaCha8Rng) -> f64);

/// One check per differentiable primitive, each on fresh random inputs.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), uniform(rng, 3, 4, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.add(v[0], v[1]);
                weighted_sum(t, o, 1)
            })
        }),
        ("sub", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), uniform(rng, 3, 4, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.sub(v[0], v[1]);
                weighted_sum(t, o, 2)
            })
        }),
        ("mul", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), uniform(rng, 3, 4, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.mul(v[0], v[1]);
                weighted_sum(t, o, 3)
            })
        }),
        ("div", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), away_from_zero(rng, 3, 4, 0.5));
            check_graph(&[a, b], &|t, v| {
                let o = t.div(v[0], v[1]);
                weighted_sum(t, o, 4)
            })
        }),
        ("add_row", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), uniform(rng, 1, 4, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.add_row(v[0], v[1]);
                weighted_sum(t, o, 5)
            })
        }),
        ("matmul", |rng| {
            let (a, b) = (uniform(rng, 3, 4, -2.0, 2.0), uniform(rng, 4, 2, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.matmul(v[0], v[1]);
                weighted_sum(t, o, 6)
            })
        }),
        ("neg", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.neg(v[0]);
                weighted_sum(t, o, 7)
            })
        }),
        ("scale", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.scale(v[0], -1.7);
                weighted_sum(t, o, 8)
            })
        }),
        ("add_scalar", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.add_scalar(v[0], 0.3);
                weighted_sum(t, o, 9)
            })
        }),
        ("exp", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.exp(v[0]);
                weighted_sum(t, o, 10)
            })
        }),
        ("log", |rng| {
            check_graph(&[uniform(rng, 2, 3, 0.2, 3.0)], &|t, v| {
                let o = t.log(v[0]);
                weighted_sum(t, o, 11)
            })
        }),
        ("tanh", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.tanh(v[0]);
                weighted_sum(t, o, 12)
            })
        }),
        ("softplus", |rng| {
            check_graph(&[uniform(rng, 2, 3, -4.0, 4.0)], &|t, v| {
                let o = t.softplus(v[0]);
                weighted_sum(t, o, 13)
            })
        }),
        ("relu", |rng| {
            check_graph(&[away_from_zero(rng, 2, 3, 0.01)], &|t, v| {
                let o = t.relu(v[0]);
                weighted_sum(t, o, 14)
            })
        }),
        ("square", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.square(v[0]);
                weighted_sum(t, o, 15)
            })
        }),
        ("clamp", |rng| {
            // keep clear of both bounds so the kinks are not straddled
            let x = away_from_zero(rng, 2, 3, 0.01);
            let x = Tensor::matrix(2, 3, x.data().iter().map(|v| if v.abs() > 1.0 { v * 1.5 } else { v * 0.9 }).collect()).unwrap();
            check_graph(&[x], &|t, v| {
                let o = t.clamp(v[0], -1.0, 1.0);
                weighted_sum(t, o, 16)
            })
        }),
        ("sum", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let s = t.sum(v[0]);
                t.square(s)
            })
        }),
        ("mean", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let s = t.mean(v[0]);
                t.square(s)
            })
        }),
        ("sum_cols", |rng| {
            check_graph(&[uniform(rng, 3, 4, -2.0, 2.0)], &|t, v| {
                let o = t.sum_cols(v[0]);
                weighted_sum(t, o, 17)
            })
        }),
        ("max", |rng| {
            check_graph(&[uniform(rng, 3, 4, -2.0, 2.0)], &|t, v| {
                let m = t.max(v[0]);
                let s = t.sum(v[0]);
                let o = t.mul(m, s);
                t.sum(o)
            })
        }),
        ("logsumexp_rows", |rng| {
            check_graph(&[uniform(rng, 3, 5, -3.0, 3.0)], &|t, v| {
                let o = t.logsumexp_rows(v[0]);
                weighted_sum(t, o, 18)
            })
        }),
        ("concat_cols", |rng| {
            let (a, b) = (uniform(rng, 3, 2, -2.0, 2.0), uniform(rng, 3, 3, -2.0, 2.0));
            check_graph(&[a, b], &|t, v| {
                let o = t.concat_cols(&[v[0], v[1], v[0]]);
                weighted_sum(t, o, 19)
            })
        }),
        ("slice_cols", |rng| {
            check_graph(&[uniform(rng, 3, 5, -2.0, 2.0)], &|t, v| {
                let o = t.slice_cols(v[0], 1, 3);
                weighted_sum(t, o, 20)
            })
        }),
        ("gather_rows", |rng| {
            check_graph(&[uniform(rng, 3, 2, -2.0, 2.0)], &|t, v| {
                let o = t.gather_rows(v[0], vec![2, 0, 2, 1]);
                weighted_sum(t, o, 21)
            })
        }),
        ("gather_flat", |rng| {
            check_graph(&[uniform(rng, 2, 3, -2.0, 2.0)], &|t, v| {
                let o = t.gather_flat(v[0], vec![5, 0, 0, 3], 2, 2);
                weighted_sum(t, o, 22)
            })
        }),
        ("sort_rows", |rng| {
            check_graph(&[uniform(rng, 3, 6, -2.0, 2.0)], &|t, v| {
                let o = t.sort_rows(v[0]);
                weighted_sum(t, o, 23)
            })
        }),
        ("reshape", |rng| {
            check_graph(&[uniform(rng, 2, 6, -2.0, 2.0)], &|t, v| {
                let o = t.reshape(v[0], 4, 3);
                weighted_sum(t, o, 24)
            })
        }),
        ("stop_gradient", |rng| {
            // d/dx [x · sg(x)] is sg(x), so compare against x·c with c fixed
            let x = uniform(rng, 2, 3, -2.0, 2.0);
            let c = x.clone();
            let tape_err = {
                let mut tape = Tape::new();
                let v = tape.param(x.clone());
                let s = tape.stop_gradient(v);
                let p = tape.mul(v, s);
                let o = tape.sum(p);
                let g = tape.backward(o).unwrap();
                max_rel_err(&g.wrt(v, x.len()), c.data())
            };
            let sg_only = {
                let mut tape = Tape::new();
                let v = tape.param(x.clone());
                let s = tape.stop_gradient(v);
                let o = tape.sum(s);
                let g = tape.backward(o).unwrap();
                g.wrt(v, x.len()).iter().map(|v| v.abs()).fold(0.0, f64::max)
            };
            tape_err.max(sg_only)
        }),
        ("gaussian_log_pdf_rows", |rng| {
            let (x, mu, sigma) = (
                uniform(rng, 3, 2, -2.0, 2.0),
                uniform(rng, 3, 2, -2.0, 2.0),
                uniform(rng, 3, 2, 0.3, 2.0),
            );
            check_graph(&[x, mu, sigma], &|t, v| {
                let o = t.gaussian_log_pdf_rows(v[0], v[1], v[2]);
                weighted_sum(t, o, 25)
            })
        }),
        ("quantile_huber_loss_rows", |rng| {
            let x = sort_rows(&uniform(rng, 3, 5, -2.0, 2.0));
            let y = sort_rows(&uniform(rng, 3, 5, -2.0, 2.0));
            let kappa = rng.random_range(0.05..1.5);
            check_graph(&[x], &move |t, v| quantile_huber_loss_rows(t, v[0], &y, kappa))
        }),
        ("mlp", |rng| {
            // 5-3-2 network under a squared-error loss
            let net = MlpParams::init_uniform(&[5, 3, 2], rng).unwrap();
            let input = uniform(rng, 4, 5, -1.0, 1.0);
            let target = uniform(rng, 4, 2, -1.0, 1.0);
            let widths = net.widths().to_vec();
            let loss = |values: &[f64]| {
                let net = MlpParams::from_values(&widths, values.to_vec()).unwrap();
                let mut tape = Tape::new();
                let b = net.bind(&mut tape, true);
                let x = tape.constant(input.clone());
                let out = b.forward(&mut tape, x);
                let y = tape.constant(target.clone());
                let d = tape.sub(out, y);
                let sq = tape.square(d);
                let l = tape.sum(sq);
                (tape, b, l)
            };
            let (tape, b, l) = loss(net.values());
            let analytic = b.flat_grad(&tape, &tape.backward(l).unwrap());
            let numeric = numeric_grad(net.values(), |p| {
                let (tape, _, l) = loss(p);
                tape.value(l).item()
            });
            max_rel_err(&analytic, &numeric)
        }),
        ("alpha_loss", |rng| {
            let eta = rng.random_range(-2.0..2.0);
            let log_pis: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target = rng.random_range(-2.0..1.0);
            let (_, g) = alpha_loss(eta, &log_pis, target).unwrap();
            let n = numeric_grad(&[eta], |p| alpha_loss(p[0], &log_pis, target).unwrap().0);
            rel_err(g, n[0])
        }),
    ]
}

/// A random composite of smooth ops, up to `depth` levels deep, reduced to a
/// scalar. The ops keep values bounded so differences stay well conditioned.
pub fn random_graph_err(seed: u64, depth: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (3, 4);
    let inputs = vec![
        uniform(&mut rng, r, c, -1.0, 1.0),
        uniform(&mut rng, r, c, -1.0, 1.0),
        uniform(&mut rng, c, c, -0.8, 0.8),
        uniform(&mut rng, 1, c, -1.0, 1.0),
    ];
    let plan: Vec<(u32, usize)> = (0..depth).map(|_| (rng.random_range(0..12), rng.random_range(0..8))).collect();
    let reduce = rng.random_range(0..4u32);
    check_graph(&inputs, &move |t, v| {
        let mut nodes = vec![v[0], v[1]];
        for &(op, pick) in &plan {
            let a = *nodes.last().unwrap();
            let b = nodes[pick % nodes.len()];
            let next = match op {
                0 => t.tanh(a),
                1 => t.softplus(a),
                2 => t.mul(a, b),
                3 => t.add(a, b),
                4 => t.sub(a, b),
                5 => {
                    let m = t.matmul(a, v[2]);
                    t.tanh(m)
                }
                6 => {
                    let h = t.tanh(a);
                    t.exp(h)
                }
                7 => {
                    let s = t.softplus(a);
                    let s = t.add_scalar(s, 0.5);
                    t.log(s)
                }
                8 => {
                    let s = t.softplus(b);
                    let s = t.add_scalar(s, 0.5);
                    t.div(a, s)
                }
                9 => t.add_row(a, v[3]),
                10 => {
                    let h = t.tanh(a);
                    t.square(h)
                }
                _ => {
                    let s = t.sort_rows(a);
                    t.add(s, b)
                }
            };
            nodes.push(next);
        }
        let out = *nodes.last().unwrap();
        match reduce {
            0 => weighted_sum(t, out, seed),
            1 => {
                let l = t.logsumexp_rows(out);
                t.sum(l)
            }
            2 => {
                let m = t.mean(out);
                let w = weighted_sum(t, out, seed);
                t.add(m, w)
            }
            _ => {
                let sq = t.square(out);
                t.mean(sq)
            }
        }
    })
}

/// Smallest `|z|` over hidden-layer pre-activations of `net` on `input`.
pub fn relu_margin(net: &MlpParams, input: &Tensor) -> f64 {
    let widths = net.widths();
    let mut x = input.clone();
    let mut margin = f64::INFINITY;
    for layer in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
        let (w, b) = (net.weight(layer), net.bias(layer));
        let mut z = vec![0.0; x.rows() * fan_out];
        for r in 0..x.rows() {
            for o in 0..fan_out {
                z[r * fan_out + o] = b[o] + (0..fan_in).map(|i| x.get(r, i) * w[i * fan_out + o]).sum::<f64>();
            }
        }
        if layer + 2 < widths.len() {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        x = Tensor::matrix(x.rows(), fan_out, z.iter().map(|v| v.max(0.0)).collect()).unwrap();
    }
    margin
}

/// Central differences with step `H` are only meaningful where no ReLU kink
/// lies within reach; composite checks redraw points closer than this.
pub const KINK_MARGIN: f64 = 1e-4;

fn critic_pair(seed: u64, mode: CriticMode) -> (CriticPair, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = CriticPair::new(mode, (2, 2, 3), &[6, 5], 0.005, &mut rng).unwrap();
    (pair, rng)
}

/// Critic loss gradient for both online critics against differences.
pub fn critic_loss_err(seed: u64) -> f64 {
    critic_loss_err_h(seed, H)
}

pub fn critic_loss_err_h(seed: u64, h: f64) -> f64 {
    let (pair, mut rng) = critic_pair(seed, CriticMode::Twin);
    let (m, k) = (3, 4);
    let cfg = QuantileConfig::new(k, rng.random_range(0.1..1.5)).unwrap();
    let (batch, eps) = loop {
        let batch = TransitionBatch {
            states: uniform(&mut rng, m, 2, -1.0, 1.0),
            actions: uniform(&mut rng, m, 2, -1.0, 1.0),
            rewards: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            next_states: uniform(&mut rng, m, 2, -1.0, 1.0),
            dones: vec![false; m],
        };
        let eps = standard_normal(&mut rng, m * k, 3);
        let rep: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let input = Tensor::concat_cols(&[&batch.states.select_rows(&rep), &batch.actions.select_rows(&rep), &eps]).unwrap();
        if pair.online().iter().all(|c| relu_margin(c.net(), &input) > KINK_MARGIN) {
            break (batch, eps);
        }
    };
    let targets = sort_rows(&uniform(&mut rng, m, k, -1.0, 1.0));
    let loss = |pair: &CriticPair| {
        let mut tape = Tape::new();
        let out = critic_loss(&mut tape, pair, &batch, &targets, &eps, &cfg).unwrap();
        (tape, out)
    };
    let (tape, out) = loss(&pair);
    let grads = tape.backward(out.total).unwrap();
    let mut worst: f64 = 0.0;
    for z in 0..pair.len() {
        let analytic = out.bound[z].flat_grad(&tape, &grads);
        let base = pair.online()[z].net().values().to_vec();
        let numeric = numeric_grad_h(&base, h, |p| {
            let mut moved = pair.clone();
            moved.online_mut()[z].net_mut().values_mut().copy_from_slice(p);
            let (tape, out) = loss(&moved);
            tape.value(out.total).item()
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Actor loss gradient with the mixture components held at the base
/// parameters, which is what the stop-gradient on them means.
pub fn actor_loss_err(seed: u64, squash: bool) -> f64 {
    let (critics, mut rng) = critic_pair(seed, CriticMode::Twin);
    let actor = ActorParams::new(2, 2, 3, &[6], squash, &mut rng).unwrap();
    let (m, j, l) = (3, 2, 3);
    let (states, bundle, eps) = loop {
        let states = uniform(&mut rng, m, 2, -1.0, 1.0);
        let bundle = SiaSampleBundle::draw(m, j, l, 3, 2, &mut rng);
        let eps = standard_normal(&mut rng, m * j, 3);
        let rep: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, j)).collect();
        let s = states.select_rows(&rep);
        let a = actor.sample_actions(&s, &bundle.private_xi, &bundle.e).unwrap();
        let actor_in = Tensor::concat_cols(&[&s, &bundle.private_xi]).unwrap();
        let critic_in = Tensor::concat_cols(&[&s, &a, &eps]).unwrap();
        if relu_margin(actor.net(), &actor_in) > KINK_MARGIN
            && critics.online().iter().all(|c| relu_margin(c.net(), &critic_in) > KINK_MARGIN)
        {
            break (states, bundle, eps);
        }
    };
    let alpha = rng.random_range(0.05..1.0);
    let mut tape = Tape::new();
    let out = actor_loss(&mut tape, &actor, &critics, &states, &bundle, &eps, alpha).unwrap();
    let analytic = out.bound.flat_grad(&tape, &tape.backward(out.loss).unwrap());
    let numeric = numeric_grad(actor.net().values(), |p| {
        let mut moved = actor.clone();
        moved.net_mut().values_mut().copy_from_slice(p);
        let mut tape = Tape::new();
        let out = actor_loss_with_components(&mut tape, &moved, Some(&actor), &critics, &states, &bundle, &eps, alpha).unwrap();
        tape.value(out.loss).item()
    });
    max_rel_err(&analytic, &numeric)
}

/// Worst error of every check over `seeds` seeds, one entry per check.
pub fn gradient_report(seeds: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, case) in primitive_cases() {
        let worst = (0..seeds)
            .map(|s| case(&mut ChaCha8Rng::seed_from_u64(s)))
            .fold(0.0, f64::max);
        out.push((name.to_string(), worst));
    }
    for depth in 1..=6 {
        let worst = (0..seeds).map(|s| random_graph_err(s * 7 + depth as u64, depth)).fold(0.0, f64::max);
        out.push((format!("random_graph_depth_{depth}"), worst));
    }
    out.push(("critic_loss".into(), (0..seeds).map(critic_loss_err).fold(0.0, f64::max)));
    out.push(("actor_loss".into(), (0..seeds).map(|s| actor_loss_err(s, false)).fold(0.0, f64::max)));
    out.push(("actor_loss_squashed".into(), (0..seeds).map(|s| actor_loss_err(s, true)).fold(0.0, f64::max)));
    out
}
