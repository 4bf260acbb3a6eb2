//! Randomized tape graphs checked against central finite differences.

use mmxai::numeric::{finite_diff_gradient, Tape, Tensor, Var};
use mmxai::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Relative error is taken against `max(|autodiff|, |numeric|, FLOOR)` so
/// that coordinates whose true gradient is zero are compared absolutely.
pub const FLOOR: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub leaves: Vec<Tensor<f64>>,
    build: Build,
}

pub const PRIMITIVES: [&str; 18] = [
    "matmul", "add_bias", "add", "sub", "mul", "scale", "relu", "sigmoid", "reshape", "concat", "conv2d", "upconv2d",
    "upsample", "softmax", "mse", "cross_entropy", "sum", "gather",
];

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero, for inputs that feed `relu` directly.
fn off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// The `i`-th graph; templates cycle so every primitive appears.
pub fn case(i: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A09_E667 ^ i as u64);
    let rows = rng.random_range(1..4);
    let a = rng.random_range(2..6);
    let b = rng.random_range(2..6);
    match i % 8 {
        0 => {
            let target = tensor(&mut rng, vec![rows, b]);
            Case {
                name: "dense relu mse",
                leaves: vec![tensor(&mut rng, vec![rows, a]), tensor(&mut rng, vec![a, b]), tensor(&mut rng, vec![b])],
                build: Box::new(move |t, v| {
                    let z = t.matmul(v[0], v[1])?;
                    let z = t.add_bias(z, v[2])?;
                    let z = t.relu(z)?;
                    let target = t.constant(&target);
                    t.mse(z, target)
                }),
            }
        }
        1 => {
            let factor = rng.random_range(-2.0..2.0);
            Case {
                name: "sigmoid mul sub scale sum",
                leaves: vec![tensor(&mut rng, vec![rows, a]), tensor(&mut rng, vec![rows, a])],
                build: Box::new(move |t, v| {
                    let s = t.sigmoid(v[0])?;
                    let m = t.mul(s, v[1])?;
                    let d = t.sub(m, v[0])?;
                    let d = t.add(d, s)?;
                    let d = t.scale(d, factor)?;
                    let d = t.mul(d, d)?;
                    t.sum(d)
                }),
            }
        }
        2 => {
            let classes = rng.random_range(2..5);
            let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            Case {
                name: "softmax cross_entropy",
                leaves: vec![tensor(&mut rng, vec![rows, a]), tensor(&mut rng, vec![a, classes])],
                build: Box::new(move |t, v| {
                    let z = t.matmul(v[0], v[1])?;
                    let p = t.softmax(z)?;
                    t.cross_entropy(p, &labels)
                }),
            }
        }
        3 => {
            let width = a + b;
            let index: Vec<usize> = (0..width).map(|_| rng.random_range(0..rows * 2)).collect();
            Case {
                name: "concat reshape gather",
                leaves: vec![tensor(&mut rng, vec![rows * 2, a]), tensor(&mut rng, vec![rows * 2, b])],
                build: Box::new(move |t, v| {
                    let c = t.concat(v[0], v[1])?;
                    let sq = t.mul(c, c)?;
                    let r = t.reshape(sq, vec![width, rows * 2])?;
                    let g = t.gather(r, &index)?;
                    t.sum(g)
                }),
            }
        }
        4 => {
            let (cin, cout, k) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..k);
            let side = rng.random_range(k + 2..k + 5);
            let weights = tensor(&mut rng, vec![rows, cout, (side + 2 * pad - k) / stride + 1, (side + 2 * pad - k) / stride + 1]);
            Case {
                name: "conv2d relu weighted sum",
                leaves: vec![
                    tensor(&mut rng, vec![rows, cin, side, side]),
                    tensor(&mut rng, vec![cout, cin, k, k]),
                    off_kink(&mut rng, vec![cout]),
                ],
                build: Box::new(move |t, v| {
                    let z = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                    let z = t.relu(z)?;
                    let w = t.constant(&weights);
                    let z = t.mul(z, w)?;
                    t.sum(z)
                }),
            }
        }
        5 => {
            let (cin, cout, k) = (rng.random_range(1..3), rng.random_range(1..3), 3);
            let factor = rng.random_range(1..3);
            let side = rng.random_range(2..5);
            let pad = 1;
            let out = side * factor;
            let target = tensor(&mut rng, vec![rows, cout, out, out]);
            Case {
                name: "upconv2d sigmoid mse",
                leaves: vec![
                    tensor(&mut rng, vec![rows, cin, side, side]),
                    tensor(&mut rng, vec![cout, cin, k, k]),
                    tensor(&mut rng, vec![cout]),
                ],
                build: Box::new(move |t, v| {
                    let z = t.upconv2d(v[0], v[1], v[2], factor, pad)?;
                    let z = t.sigmoid(z)?;
                    let target = t.constant(&target);
                    t.mse(z, target)
                }),
            }
        }
        6 => {
            let (cin, cout) = (rng.random_range(1..3), rng.random_range(1..3));
            let factor = rng.random_range(2..4);
            let side = rng.random_range(2..4);
            Case {
                name: "upsample conv2d",
                leaves: vec![
                    tensor(&mut rng, vec![rows, cin, side, side]),
                    tensor(&mut rng, vec![cout, cin, 3, 3]),
                    tensor(&mut rng, vec![cout]),
                ],
                build: Box::new(move |t, v| {
                    let u = t.upsample(v[0], factor)?;
                    let z = t.conv2d(u, v[1], v[2], 1, 1)?;
                    let z = t.mul(z, z)?;
                    t.sum(z)
                }),
            }
        }
        _ => {
            let cin = rng.random_range(1..3);
            let side = 4;
            let classes = rng.random_range(2..4);
            let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            Case {
                name: "conv2d reshape dense softmax",
                leaves: vec![
                    tensor(&mut rng, vec![rows, cin, side, side]),
                    tensor(&mut rng, vec![2, cin, 3, 3]),
                    off_kink(&mut rng, vec![2]),
                    tensor(&mut rng, vec![8, classes]),
                    tensor(&mut rng, vec![classes]),
                ],
                build: Box::new(move |t, v| {
                    let z = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    let z = t.relu(z)?;
                    let z = t.reshape(z, vec![rows, 8])?;
                    let z = t.matmul(z, v[3])?;
                    let z = t.add_bias(z, v[4])?;
                    let p = t.softmax(z)?;
                    t.cross_entropy(p, &labels)
                }),
            }
        }
    }
}

impl Case {
    fn eval(&self, leaves: &[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = leaves
            .iter()
            .map(|l| tape.input(l.shape().to_vec(), l.data().to_vec(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = (self.build)(&mut tape, &vars)?;
        Ok((tape, loss, vars))
    }

    /// Ops recorded by one forward pass.
    pub fn ops(&self) -> Vec<&'static str> {
        let (tape, _, _) = self.eval(&self.leaves).unwrap();
        tape.op_names()
    }

    /// Largest relative error over every coordinate of every leaf.
    pub fn max_rel_error(&self) -> Result<f64> {
        let (mut tape, loss, vars) = self.eval(&self.leaves)?;
        tape.backward(loss)?;
        let mut worst = 0.0f64;
        for (i, var) in vars.iter().enumerate() {
            let analytic = tape.grad(*var);
            let numeric = finite_diff_gradient(
                |probe: &Tensor<f64>| {
                    let mut leaves = self.leaves.clone();
                    leaves[i] = probe.clone();
                    let (tape, loss, _) = self.eval(&leaves)?;
                    Ok(tape.value(loss)[0])
                },
                &self.leaves[i],
                EPS,
            )?;
            for (a, n) in analytic.iter().zip(numeric.data()) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}
