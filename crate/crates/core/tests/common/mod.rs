//! Shared oracles for the integration tests and the acceptance suite.
#![allow(dead_code)]

use looc_core::autodiff::{Tape, Var};
use looc_core::tensor::{self, Tensor};
use looc_core::training;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Scalar loss graph over leaf inputs.
pub type Graph = dyn Fn(&mut Tape, &[Var]) -> Var;

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, or the absolute difference when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()) + norm(numeric.iter().copied());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn eval_graph(inputs: &[Tensor], build: &Graph, as_variables: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if as_variables {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let loss = build(&mut tape, &vars);
    (tape, vars, loss)
}

/// Largest relative error between tape gradients and central differences
/// over all inputs of one graph instance.
pub fn check_gradient(inputs: &[Tensor], build: &Graph) -> f64 {
    let (mut tape, vars, loss) = eval_graph(inputs, build, true);
    tape.backward(loss).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let value_at = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (tape, _, loss) = eval_graph(&shifted, build, false);
                tape.value(loss).item()
            };
            numeric.push((value_at(FD_STEP) - value_at(-FD_STEP)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so a finite-difference step never
/// crosses the relu kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random linear functional `sum(x · r)` that turns a matrix into a scalar
/// loss with distinct weights per column.
pub fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Var {
    let rv = tape.constant(r.clone());
    let y = tape.matmul(x, rv).unwrap();
    tape.sum(y)
}

/// One randomly drawn gradient-check case.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Graph>,
}

/// Names of the cases `gradient_case` cycles through.
pub const GRAD_CASE_NAMES: [&str; 15] = [
    "matmul",
    "add_row_bias",
    "add",
    "sub",
    "scale",
    "add_scalar",
    "relu",
    "softmax_temp",
    "entropy",
    "nll",
    "sum",
    "mean",
    "margin_entropy_loss",
    "max_entropy_diff_loss",
    "sfx_loss",
];

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..5))
}

/// Small MLP whose hidden pre-activations stay away from zero on `xs`.
fn mlp_instance(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize, xs: &[&Tensor]) -> Vec<Tensor> {
    loop {
        let w1 = random_matrix(rng, d_in, hidden, 1.0);
        let b1 = random_matrix(rng, 1, hidden, 0.5).reshape(vec![hidden]).unwrap();
        let w2 = random_matrix(rng, hidden, d_out, 1.5);
        let b2 = random_matrix(rng, 1, d_out, 0.5).reshape(vec![d_out]).unwrap();
        let clear = xs.iter().all(|x| {
            let z = tensor::add_row_bias(&tensor::matmul(x, &w1).unwrap(), &b1).unwrap();
            z.data().iter().all(|v| v.abs() > 1e-3)
        });
        if clear {
            return vec![w1, b1, w2, b2];
        }
    }
}

fn mlp_probs(tape: &mut Tape, p: &[Var], x: Var) -> Var {
    let h = tape.matmul(x, p[0]).unwrap();
    let h = tape.add_row_bias(h, p[1]).unwrap();
    let h = tape.relu(h);
    let z = tape.matmul(h, p[2]).unwrap();
    let z = tape.add_row_bias(z, p[3]).unwrap();
    tape.softmax_temp(z, 1.0).unwrap()
}

fn entropy_gap(params: &[Tensor], x_id: &Tensor, x_ood: &Tensor) -> f64 {
    let fwd = |x: &Tensor| {
        let h = tensor::relu(&tensor::add_row_bias(&tensor::matmul(x, &params[0]).unwrap(), &params[1]).unwrap());
        let z = tensor::add_row_bias(&tensor::matmul(&h, &params[2]).unwrap(), &params[3]).unwrap();
        let p = tensor::softmax_temp(&z, 1.0).unwrap();
        let h = tensor::entropy(&p).unwrap();
        h.data().iter().sum::<f64>() / h.len() as f64
    };
    fwd(x_id) - fwd(x_ood)
}

/// Draws case `index % GRAD_CASE_NAMES.len()` with fresh random shapes.
pub fn gradient_case(index: usize, rng: &mut ChaCha8Rng) -> GradCase {
    let name = GRAD_CASE_NAMES[index % GRAD_CASE_NAMES.len()];
    let (n, k, m) = dims(rng);
    let r = random_matrix(rng, m, 1, 1.0);
    let (inputs, build): (Vec<Tensor>, Box<Graph>) = match name {
        "matmul" => (
            vec![random_matrix(rng, n, k, 1.0), random_matrix(rng, k, m, 1.0)],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                project(t, y, &r)
            }),
        ),
        "add_row_bias" => (
            vec![random_matrix(rng, n, m, 1.0), random_matrix(rng, 1, m, 1.0).reshape(vec![m]).unwrap()],
            Box::new(move |t, v| {
                let y = t.add_row_bias(v[0], v[1]).unwrap();
                project(t, y, &r)
            }),
        ),
        "add" | "sub" => (
            vec![random_matrix(rng, n, m, 1.0), random_matrix(rng, n, m, 1.0)],
            Box::new(move |t, v| {
                let y = if name == "add" { t.add(v[0], v[1]) } else { t.sub(v[0], v[1]) }.unwrap();
                project(t, y, &r)
            }),
        ),
        "scale" => {
            let factor = rng.gen_range(-3.0..3.0);
            (
                vec![random_matrix(rng, n, m, 1.0)],
                Box::new(move |t, v| {
                    let y = t.scale(v[0], factor);
                    project(t, y, &r)
                }),
            )
        }
        "add_scalar" => {
            let offset = rng.gen_range(-3.0..3.0);
            (
                vec![random_matrix(rng, n, m, 1.0)],
                Box::new(move |t, v| {
                    let y = t.add_scalar(v[0], offset);
                    project(t, y, &r)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(rng, n, m)],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &r)
            }),
        ),
        "softmax_temp" => {
            let temperature = [0.5, 1.0, 3.0, 1000.0][rng.gen_range(0..4)];
            (
                vec![random_matrix(rng, n, m, 3.0)],
                Box::new(move |t, v| {
                    let p = t.softmax_temp(v[0], temperature).unwrap();
                    project(t, p, &r)
                }),
            )
        }
        // Entropy is only defined on the simplex, so it is checked through a
        // softmax that keeps perturbed inputs valid.
        "entropy" => {
            let temperature = rng.gen_range(0.5..4.0);
            (
                vec![random_matrix(rng, n, m, 3.0)],
                Box::new(move |t, v| {
                    let p = t.softmax_temp(v[0], temperature).unwrap();
                    let h = t.entropy(p).unwrap();
                    let w = t.scale(h, 0.7);
                    t.sum(w)
                }),
            )
        }
        "nll" => {
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            (
                vec![random_matrix(rng, n, m, 3.0)],
                Box::new(move |t, v| {
                    let p = t.softmax_temp(v[0], 1.0).unwrap();
                    t.nll(p, &labels).unwrap()
                }),
            )
        }
        "sum" | "mean" => (
            vec![random_matrix(rng, n, m, 1.0)],
            Box::new(move |t, v| {
                let y = t.scale(v[0], 1.3);
                if name == "sum" {
                    t.sum(y)
                } else {
                    t.mean(y)
                }
            }),
        ),
        _ => {
            let (d_in, hidden, classes) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..5));
            let (n_id, n_ood) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let x_id = random_matrix(rng, n_id, d_in, 1.0);
            let x_ood = random_matrix(rng, n_ood, d_in, 1.0);
            let reject = name == "sfx_loss";
            let head = classes + usize::from(reject);
            let labels: Vec<usize> = (0..n_id).map(|_| rng.gen_range(0..classes)).collect();
            let mut params;
            let mut margin;
            loop {
                params = mlp_instance(rng, d_in, hidden, head, &[&x_id, &x_ood]);
                // Keep the hinge away from its kink; both branches occur.
                margin = rng.gen_range(0.0..1.5);
                if (entropy_gap(&params, &x_id, &x_ood) + margin).abs() > 1e-3 {
                    break;
                }
            }
            let beta = rng.gen_range(0.0..2.0);
            (
                params,
                Box::new(move |t, v| {
                    let xi = t.constant(x_id.clone());
                    let xo = t.constant(x_ood.clone());
                    let pi = mlp_probs(t, v, xi);
                    let po = mlp_probs(t, v, xo);
                    match name {
                        "margin_entropy_loss" => {
                            training::margin_entropy_loss(t, pi, &labels, po, margin, beta).unwrap()
                        }
                        "max_entropy_diff_loss" => {
                            training::max_entropy_diff_loss(t, pi, &labels, po, beta).unwrap()
                        }
                        _ => training::sfx_loss(t, Some((pi, &labels)), Some(po), classes).unwrap(),
                    }
                }),
            )
        }
    };
    GradCase { name, inputs, build }
}

/// Runs `instances` random cases per primitive; returns the worst error
/// per case name.
pub fn gradient_sweep(instances_per_case: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![0.0f64; GRAD_CASE_NAMES.len()];
    for i in 0..instances_per_case * GRAD_CASE_NAMES.len() {
        let case = gradient_case(i, &mut rng);
        let err = check_gradient(&case.inputs, case.build.as_ref());
        let slot = i % GRAD_CASE_NAMES.len();
        worst[slot] = worst[slot].max(err);
    }
    GRAD_CASE_NAMES.iter().copied().zip(worst).collect()
}

// ---- metric oracles: exhaustive thresholds and pairwise enumeration ----

fn thresholds(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().collect();
    t.push(f64::INFINITY);
    t.push(f64::NEG_INFINITY);
    t
}

fn count_at_least(scores: &[f64], tau: f64) -> usize {
    scores.iter().filter(|&&s| s >= tau).count()
}

pub fn brute_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    thresholds(id, ood)
        .into_iter()
        .filter(|&tau| 100 * count_at_least(id, tau) >= 95 * id.len())
        .map(|tau| 100.0 * count_at_least(ood, tau) as f64 / ood.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

pub fn brute_detection_error(id: &[f64], ood: &[f64]) -> f64 {
    thresholds(id, ood)
        .into_iter()
        .map(|tau| {
            let tpr = count_at_least(id, tau) as f64 / id.len() as f64;
            let fpr = count_at_least(ood, tau) as f64 / ood.len() as f64;
            100.0 * (0.5 * (1.0 - tpr) + 0.5 * fpr)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    100.0 * wins / (id.len() * ood.len()) as f64
}

/// Average precision: recall increments times precision at every distinct
/// threshold, each evaluated from scratch.
pub fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut taus: Vec<f64> = pos.iter().chain(neg).copied().collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for tau in taus {
        let tp = count_at_least(pos, tau);
        let fp = count_at_least(neg, tau);
        let recall = tp as f64 / pos.len() as f64;
        if tp + fp > 0 {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    100.0 * area
}

/// Random score lists of 1..=`max_len` samples each; half of the
/// instances snap to a coarse grid to force ties.
pub fn random_scores(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<f64>) {
    let coarse = rng.gen_bool(0.5);
    let n_id = rng.gen_range(1..=max_len);
    let n_ood = rng.gen_range(1..=max_len);
    let shift = rng.gen_range(0.0..1.5);
    let mut draw = |len: usize, shift: f64| -> Vec<f64> {
        (0..len)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0) + shift;
                if coarse {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect()
    };
    let id = draw(n_id, shift);
    let ood = draw(n_ood, 0.0);
    (id, ood)
}

/// CIFAR-10 binary records: a per-class colour and low-frequency stripe
/// pattern plus uniform pixel noise. The bases are smooth so random crops
/// and flips keep them recognisable.
pub fn synth_cifar_bytes(count: usize, seed: u64) -> Vec<u8> {
    use looc_core::data::{CIFAR_CLASSES, CIFAR_RECORD_BYTES, CIFAR_SIDE};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = CIFAR_SIDE as f64;
    let bases: Vec<Vec<f64>> = (0..CIFAR_CLASSES)
        .map(|_| {
            let colour: [f64; 3] = [rng.gen_range(60.0..195.0), rng.gen_range(60.0..195.0), rng.gen_range(60.0..195.0)];
            let (fx, fy) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
            let mut base = Vec::with_capacity(CIFAR_RECORD_BYTES - 1);
            for c in colour {
                for y in 0..CIFAR_SIDE {
                    for x in 0..CIFAR_SIDE {
                        let phase = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / side;
                        base.push(c + 40.0 * phase.sin());
                    }
                }
            }
            base
        })
        .collect();
    let mut out = Vec::with_capacity(count * CIFAR_RECORD_BYTES);
    for i in 0..count {
        let label = i % CIFAR_CLASSES;
        out.push(label as u8);
        for &b in &bases[label] {
            out.push((b + rng.gen_range(-40.0..40.0)).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}
