//! Gradient cases: every tape op and the full objective against central
//! differences, each on 100 random micro-instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sskd_core::autodiff::clamped_log;
use sskd_core::distill::{cross_entropy, kd_loss, kd_loss_unlabeled, sskd_total};
use sskd_core::{build_model, ExtractorConfig, Tape, Tensor, Var};

use super::{away_from_zero, grad_check, rel_err, rng, uniform, weighted_sum};

pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 100;

/// Case name and worst relative error over all instances.
pub type Worst = (&'static str, f64);

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn each_instance(name: &'static str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> Worst {
    let worst = (0..INSTANCES)
        .map(|i| case(&mut rng(0xD1FF ^ i.wrapping_mul(0x9E37_79B9))))
        .fold(0.0, f64::max);
    (name, worst)
}

/// `f(input) · w` summed, for an op with one input.
fn unary(r: &mut ChaCha8Rng, x: Tensor, op: impl Fn(&mut Tape, Var) -> sskd_core::Result<Var>) -> f64 {
    let w = uniform(r, x.shape(), -1.0, 1.0);
    grad_check(&[x], |t, v| {
        let o = op(t, v[0])?;
        weighted_sum(t, o, &w)
    })
}

pub fn matmul() -> Vec<Worst> {
    vec![each_instance("matmul", |r| {
        let (m, k, n) = dims(r);
        let w = uniform(r, &[m, n], -1.0, 1.0);
        let inputs = [uniform(r, &[m, k], -2.0, 2.0), uniform(r, &[k, n], -2.0, 2.0)];
        grad_check(&inputs, |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, &w)
        })
    })]
}

/// add, sub and mul with every broadcast form: same shape, row vector on
/// the right, scalar on either side.
pub fn binary() -> Vec<Worst> {
    type Op = fn(&mut Tape, Var, Var) -> sskd_core::Result<Var>;
    let ops: [(&'static str, Op); 3] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    ops.into_iter()
        .map(|(name, op)| {
            each_instance(name, |r| {
                let (m, n, _) = dims(r);
                let w = uniform(r, &[m, n], -1.0, 1.0);
                let main = uniform(r, &[m, n], -2.0, 2.0);
                let inputs = match r.random_range(0..4) {
                    0 => [main, uniform(r, &[m, n], -2.0, 2.0)],
                    1 => [main, uniform(r, &[n], -2.0, 2.0)],
                    2 => [main, uniform(r, &[1], -2.0, 2.0)],
                    _ => [uniform(r, &[1], -2.0, 2.0), main],
                };
                grad_check(&inputs, |t, v| {
                    let o = op(t, v[0], v[1])?;
                    weighted_sum(t, o, &w)
                })
            })
        })
        .collect()
}

pub fn elementwise() -> Vec<Worst> {
    vec![
        each_instance("scale", |r| {
            let (m, n, _) = dims(r);
            let c = r.random_range(-3.0..3.0);
            let x = uniform(r, &[m, n], -2.0, 2.0);
            unary(r, x, |t, v| t.scale(v, c))
        }),
        each_instance("relu", |r| {
            let (m, n, _) = dims(r);
            let x = away_from_zero(r, &[m, n], 0.01, 2.0);
            unary(r, x, |t, v| t.relu(v))
        }),
        each_instance("exp", |r| {
            let (m, n, _) = dims(r);
            let x = uniform(r, &[m, n], -3.0, 3.0);
            unary(r, x, |t, v| t.exp(v))
        }),
        each_instance("log", |r| {
            let (m, n, _) = dims(r);
            let x = uniform(r, &[m, n], 0.1, 4.0);
            unary(r, x, |t, v| t.log(v))
        }),
        each_instance("clamp", |r| {
            let (m, n, _) = dims(r);
            // magnitudes in [0.04, 1.96]: clear of 0 and of the bounds ±1
            let x = away_from_zero(r, &[m, n], 0.01, 0.49);
            let x = Tensor::new(vec![m, n], x.data().iter().map(|v| v * 4.0).collect()).unwrap();
            unary(r, x, |t, v| t.clamp(v, -1.0, 1.0))
        }),
        each_instance("sum", |r| {
            let (m, n, _) = dims(r);
            grad_check(&[uniform(r, &[m, n], -2.0, 2.0)], |t, v| {
                let s = t.sum(v[0])?;
                t.mul(s, s)
            })
        }),
        each_instance("mean", |r| {
            let (m, n, _) = dims(r);
            grad_check(&[uniform(r, &[m, n], -2.0, 2.0)], |t, v| {
                let s = t.mean(v[0])?;
                t.exp(s)
            })
        }),
        each_instance("softmax", |r| {
            let (m, n, _) = dims(r);
            let tau = r.random_range(0.5..16.0);
            let x = uniform(r, &[m, n], -4.0, 4.0);
            unary(r, x, |t, v| t.softmax(v, tau))
        }),
        each_instance("clamped_log", |r| {
            let (m, n, _) = dims(r);
            let x = uniform(r, &[m, n], 0.05, 0.95);
            unary(r, x, clamped_log)
        }),
    ]
}

pub fn losses() -> Vec<Worst> {
    vec![
        each_instance("cross_entropy", |r| {
            let (b, _, _) = dims(r);
            let k = r.random_range(2..6);
            let tau = r.random_range(0.5..16.0);
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
            grad_check(&[uniform(r, &[b, k], -3.0, 3.0)], |t, v| cross_entropy(t, v[0], &labels, tau))
        }),
        each_instance("kd_loss", |r| {
            let (b, _, _) = dims(r);
            let k = r.random_range(2..6);
            let tau = r.random_range(0.5..16.0);
            let teacher = uniform(r, &[b, k], -3.0, 3.0);
            grad_check(&[uniform(r, &[b, k], -3.0, 3.0)], |t, v| {
                let tl = t.constant(teacher.clone());
                kd_loss(t, tl, v[0], tau)
            })
        }),
        each_instance("kd_loss_unlabeled", |r| {
            let (b, _, _) = dims(r);
            let k = r.random_range(2..6);
            let tau = r.random_range(0.5..16.0);
            let teacher = uniform(r, &[b, k], -3.0, 3.0);
            grad_check(&[uniform(r, &[b, k], -3.0, 3.0)], |t, v| {
                let tl = t.constant(teacher.clone());
                kd_loss_unlabeled(t, tl, v[0], tau)
            })
        }),
    ]
}

/// The full stage-2 objective with respect to every student parameter,
/// both heads included.
pub fn objective() -> Vec<Worst> {
    vec![each_instance("sskd_total", |r| {
        let d = r.random_range(2..5);
        let k = r.random_range(2..5);
        let cfg = |seed, h| ExtractorConfig {
            input_dim: d,
            hidden_dims: vec![h],
            embed_dim: 3,
            seed,
        };
        let mut student = build_model(&cfg(r.random(), 4), k, Some(k)).unwrap();
        let teacher = build_model(&cfg(r.random(), 5), k, None).unwrap().freeze();
        // move biases off zero so no hidden unit sits at the ReLU kink
        for p in student.params_mut() {
            for x in p.data_mut() {
                *x += r.random_range(-0.3..0.3);
            }
        }
        let b = r.random_range(1..4);
        let x = uniform(r, &[b, d], -2.0, 2.0);
        let u = r.random_range(1..4);
        let ux = uniform(r, &[u, d], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let temps = (r.random_range(1.0..16.0), r.random_range(1.0..16.0), r.random_range(1.0..16.0));
        let params: Vec<Tensor> = student.params().into_iter().cloned().collect();

        let objective = |t: &mut Tape, params: &[Tensor]| {
            let mut m = student.clone();
            for (dst, src) in m.params_mut().into_iter().zip(params) {
                dst.data_mut().copy_from_slice(src.data());
            }
            let bound = m.bind(t, true);
            let loss = sskd_total(t, &m, &bound, &teacher, &x, &labels, Some(&ux), temps.0, temps.1, temps.2, (1.0, 1.0))?;
            Ok::<_, sskd_core::Error>((loss.total, bound))
        };

        let mut tape = Tape::new();
        let (total, bound) = objective(&mut tape, &params).unwrap();
        tape.backward(total).unwrap();
        let analytic = bound.grads(&tape);

        let value = |ps: &[Tensor]| {
            let mut t = Tape::new();
            let (total, _) = objective(&mut t, ps).unwrap();
            t.value(total).item().unwrap()
        };
        let h = 1e-5;
        let mut work = params.clone();
        let numeric: Vec<Vec<f64>> = (0..params.len())
            .map(|i| {
                (0..params[i].numel())
                    .map(|j| {
                        let x0 = params[i].data()[j];
                        work[i].data_mut()[j] = x0 + h;
                        let up = value(&work);
                        work[i].data_mut()[j] = x0 - h;
                        let down = value(&work);
                        work[i].data_mut()[j] = x0;
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            })
            .collect();
        rel_err(&analytic, &numeric)
    })]
}

/// Every case in a fixed order.
pub fn all() -> Vec<Worst> {
    [matmul(), binary(), elementwise(), losses(), objective()].concat()
}
