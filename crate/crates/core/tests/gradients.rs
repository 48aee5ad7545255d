//! Tape gradients against central finite differences, op by op and for the
//! whole step loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimix::model::{Arch, ModelParams};
use trimix::objective::{LambdaPolicy, ObjectiveConfig};
use trimix::oracle::{finite_diff, relative_error};
use trimix::stats::Axis;
use trimix::verify::gradcheck;
use trimix::{Result, Tape, Tensor, Var};

const INSTANCES: u64 = 50;
const OP_TOLERANCE: f64 = 1e-6;
const H: f64 = 1e-6;
// gradients here are O(1); the floor only matters for entries that are
// zero analytically
const FLOOR: f64 = 1e-2;

fn random(rng: &mut impl Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Max relative error of `∂/∂inputs Σ(f(inputs) ⊙ R)` for a random fixed `R`.
fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&vars).unwrap().shape()
    };
    let weights = random(
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD),
        &out_shape,
        false,
    );
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars).unwrap();
    let total = out.hadamard(tape.leaf(weights.clone())).unwrap().sum();
    let grads = tape.backward(total).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let numeric = finite_diff(
            |theta| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.leaf(Tensor::new(t.shape().to_vec(), theta.to_vec()).unwrap())
                        } else {
                            tape.leaf(t.clone())
                        }
                    })
                    .collect();
                Ok(f(&vars)?.hadamard(tape.leaf(weights.clone()))?.sum().item())
            },
            input.data(),
            H,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, FLOOR));
        }
    }
    worst
}

fn run<F>(name: &str, shapes: &[&[usize]], away_from_zero: bool, f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random(&mut rng, s, away_from_zero))
            .collect();
        worst = worst.max(check(&inputs, i, &f));
    }
    assert!(worst < OP_TOLERANCE, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_grad() {
    run("matmul", &[&[3, 4], &[4, 5]], false, |v| v[0].matmul(v[1]));
}

#[test]
fn affine_grad() {
    run("affine", &[&[6, 4], &[4, 3], &[3]], false, |v| {
        v[0].affine(v[1], v[2])
    });
}

#[test]
fn elementwise_grads() {
    run("add", &[&[3, 4], &[3, 4]], false, |v| v[0].add(v[1]));
    run("sub", &[&[3, 4], &[3, 4]], false, |v| v[0].sub(v[1]));
    run("hadamard", &[&[3, 4], &[3, 4]], false, |v| {
        v[0].hadamard(v[1])
    });
    run("scale", &[&[3, 4]], false, |v| Ok(v[0].scale(-2.5)));
    run("square", &[&[3, 4]], false, |v| Ok(v[0].square()));
    run("relu", &[&[5, 4]], true, |v| Ok(v[0].relu()));
    run("abs", &[&[5, 4]], true, |v| Ok(v[0].abs()));
}

#[test]
fn reduction_and_shape_grads() {
    run("sum", &[&[3, 4]], false, |v| Ok(v[0].sum()));
    run("mean", &[&[3, 4]], false, |v| Ok(v[0].mean()));
    run("transpose", &[&[3, 4]], false, |v| v[0].transpose());
    run("flip_rows", &[&[4, 3]], false, |v| Ok(v[0].flip_rows()));
    run("reshape", &[&[4, 3]], false, |v| v[0].reshape(&[2, 6]));
    run("flatten_rows", &[&[2, 2, 3]], false, |v| {
        Ok(v[0].flatten_rows())
    });
}

#[test]
fn standardize_grads() {
    run("standardize batch", &[&[6, 4]], false, |v| {
        v[0].standardize(Axis::Batch, false)
    });
    run("standardize feature", &[&[6, 5]], false, |v| {
        v[0].standardize(Axis::Feature, false)
    });
    run("standardize twice", &[&[6, 5]], false, |v| {
        v[0].standardize(Axis::Batch, false)?
            .standardize(Axis::Feature, false)
    });
}

#[test]
fn softmax_grads() {
    run("row_softmax", &[&[4, 4]], false, |v| v[0].row_softmax(2.0));
    run("row_softmax sharp", &[&[4, 6]], false, |v| {
        v[0].row_softmax(0.5)
    });
    run("cross_entropy", &[&[6, 3]], false, |v| {
        v[0].softmax_cross_entropy(&[0, 2, 1, 1, 0, 2])
    });
}

#[test]
fn cross_entropy_at_uniform_softmax() {
    let tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[4, 3]));
    let targets = [0, 2, 1, 2];
    let g = tape
        .backward(logits.softmax_cross_entropy(&targets).unwrap())
        .unwrap()
        .wrt(logits);
    for (i, &t) in targets.iter().enumerate() {
        for c in 0..3 {
            let onehot = if c == t { 1.0 } else { 0.0 };
            assert!((g.at(i, c) - (1.0 / 3.0 - onehot) / 4.0).abs() < 1e-15);
        }
    }
    let numeric = finite_diff(
        |theta| {
            let tape = Tape::new();
            let l = tape.leaf(Tensor::new(vec![4, 3], theta.to_vec()).unwrap());
            Ok(l.softmax_cross_entropy(&targets)?.item())
        },
        &[0.0; 12],
        H,
    )
    .unwrap();
    for (a, n) in g.data().iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-9);
    }
}

#[test]
fn full_loss_small_model() {
    let arch = Arch::new(vec![16, 16, 16], vec![16, 16, 16], true).unwrap();
    let cfg = ObjectiveConfig {
        lambda_policy: LambdaPolicy::Fixed(0.3),
        ..ObjectiveConfig::default()
    };
    for seed in 0..5 {
        let r = gradcheck(&arch, 8, 4, &cfg, seed).unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn full_loss_every_placement_and_toggle() {
    use trimix::objective::Placement;
    let arch = Arch::new(vec![9, 8, 6], vec![6, 6, 5], true).unwrap();
    for placement in [Placement::ZZ, Placement::YY, Placement::ZY] {
        for feature_norm in [true, false] {
            let cfg = ObjectiveConfig {
                lambda_policy: LambdaPolicy::Fixed(0.3),
                placement,
                enable_feature_norm: feature_norm,
                ..ObjectiveConfig::default()
            };
            let r = gradcheck(&arch, 6, 3, &cfg, 4).unwrap();
            assert!(r.passed(), "{placement:?} feature_norm={feature_norm}: {r}");
        }
    }
}

#[test]
fn params_roundtrip_through_gradcheck_layout() {
    // gradcheck flattens parameters in declaration order; from_tensors must
    // invert that exactly
    let arch = Arch::new(vec![5, 4, 3], vec![3, 2], false).unwrap();
    let p = ModelParams::init(&arch, 1).unwrap();
    let flat: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    assert_eq!(ModelParams::from_tensors(&arch, flat).unwrap(), p);
}
