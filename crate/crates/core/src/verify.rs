//! Checks that pit the optimized paths against [`crate::oracle`]: seeded
//! oracle-equivalence cases and a finite-difference check of the full step
//! loss. Shared by the test suites and the `verify-oracle` / `gradcheck`
//! commands.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ViewPair;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelParams};
use crate::objective::{
    ground_truth_matrix, loss_and_grads, loss_bt, loss_con, loss_vrt, mixup, step_loss_value,
    trimix_step_loss, LambdaPolicy, MixFactor, ObjectiveConfig,
};
use crate::oracle::{self, Matrix, OracleMode, OracleReport};
use crate::rng::derive_seed;
use crate::stats::{cross_correlation, row_softmax, standardize, Axis, CorrelationMode};
use crate::tensor::{Tape, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-10;

pub const ORACLE_QUANTITIES: [&str; 6] = ["C", "M", "L_inv", "L_rr", "L_vrt", "L_con"];

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}

fn tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).expect("rectangular")
}

/// Every quantity's optimized value and oracle value for one random case.
fn oracle_case(seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 2 * rng.gen_range(2..=8);
    let d = rng.gen_range(3..=12);
    let tau = rng.gen_range(0.5..4.0);
    let lambda = rng.gen::<f64>();
    let z = random_matrix(&mut rng, b, d);
    let z2 = random_matrix(&mut rng, b, d);
    let zv = random_matrix(&mut rng, b, d);

    let tape = Tape::new();
    let zs = standardize(tape.leaf(tensor(&z)), Axis::Batch, false)?;
    let z2s = standardize(tape.leaf(tensor(&z2)), Axis::Batch, false)?;
    let c = cross_correlation(zs, z2s, CorrelationMode::Features)?;
    let (l_inv, l_rr) = loss_bt(&c)?;

    let zr = standardize(tape.leaf(tensor(&z)), Axis::Feature, false)?;
    let zvr = standardize(tape.leaf(tensor(&zv)), Axis::Feature, false)?;
    let m_rows = cross_correlation(zr, zvr, CorrelationMode::Samples)?;

    let zvs = standardize(
        standardize(tape.leaf(tensor(&zv)), Axis::Batch, false)?,
        Axis::Feature,
        false,
    )?;
    let m = cross_correlation(zs, zvs, CorrelationMode::Samples)?;
    let mix = MixFactor::new(lambda)?;
    let l_vrt = loss_vrt(row_softmax(&m, tau)?, &ground_truth_matrix(b, mix)?)?;
    let l_con = loss_con(mixup(zs, mix)?, zvs)?;

    let zs_n = oracle::naive_standardize_columns(&z)?;
    let z2s_n = oracle::naive_standardize_columns(&z2)?;
    let c_n = oracle::naive_correlation(&zs_n, &z2s_n, OracleMode::Features)?;
    let m_rows_n = oracle::naive_correlation(
        &oracle::naive_standardize_rows(&z)?,
        &oracle::naive_standardize_rows(&zv)?,
        OracleMode::Samples,
    )?;
    let zvs_n = oracle::naive_standardize_rows(&oracle::naive_standardize_columns(&zv)?)?;
    let m_n: Matrix = oracle::naive_matmul(&zs_n, &oracle::transpose(&zvs_n))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / d as f64).collect())
        .collect();
    let l_vrt_n = oracle::naive_mean_l1(
        &oracle::naive_softmax_rows(&m_n, tau),
        &oracle::naive_ground_truth(b, lambda),
    );
    let l_con_n = oracle::naive_mean_l1(&oracle::naive_mixup_rows(&zs_n, lambda), &zvs_n);

    Ok(vec![
        (c.values.value().into_data(), oracle::flatten(&c_n)),
        (
            m_rows.values.value().into_data(),
            oracle::flatten(&m_rows_n),
        ),
        (vec![l_inv.item()], vec![oracle::naive_l_inv(&c_n)]),
        (vec![l_rr.item()], vec![oracle::naive_l_rr(&c_n)]),
        (vec![l_vrt.item()], vec![l_vrt_n]),
        (vec![l_con.item()], vec![l_con_n]),
    ])
}

/// `cases` seeded cases per quantity; one report per quantity carrying the
/// worst case seen.
pub fn oracle_suite(cases: usize, master_seed: u64) -> Result<Vec<OracleReport>> {
    let mut worst: Vec<Option<OracleReport>> = vec![None; ORACLE_QUANTITIES.len()];
    for case in 0..cases {
        let seed = derive_seed(master_seed, &[case as u64]);
        for (q, (actual, expected)) in oracle_case(seed)?.into_iter().enumerate() {
            let r = OracleReport::compare(
                ORACLE_QUANTITIES[q],
                seed,
                &actual,
                &expected,
                ORACLE_TOLERANCE,
            );
            let replace = match &worst[q] {
                None => true,
                Some(w) => r.max_abs_diff > w.max_abs_diff || (w.passed && !r.passed),
            };
            if replace {
                worst[q] = Some(r);
            }
        }
    }
    Ok(worst.into_iter().flatten().collect())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// A coordinate that fails at the standard step is re-differenced with the
/// step shrinking tenfold, at most this many times, until two consecutive
/// estimates agree; this separates a kink inside the stencil from a wrong
/// gradient.
pub const GRADCHECK_REFINEMENTS: u32 = 3;
/// Relative errors divide by `max(|analytic|, |numeric|, floor)`.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub params: usize,
    pub checked: usize,
    /// Coordinates that failed at the standard step and were re-differenced.
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} gradcheck: max relative error {:.3e} (tol {:.0e}) over {}/{} coordinates ({} refined), worst #{} analytic={:.6e} numeric={:.6e}, {:.1}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.params,
            self.refined,
            self.worst_coord,
            self.analytic,
            self.numeric,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Tape gradients of the full step loss against central differences over
/// every parameter of `arch`, on a random batch of `batch` images of side
/// `side` (one channel). λ is `cfg`'s policy; the step rng is reseeded for
/// every evaluation so a uniform policy still yields one fixed λ.
pub fn gradcheck(
    arch: &Arch,
    batch: usize,
    side: usize,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_px = side * side;
    let mut img = || {
        Tensor::new(
            vec![batch, 1, side, side],
            (0..batch * n_px).map(|_| rng.gen::<f64>()).collect(),
        )
    };
    let views = ViewPair {
        x: img()?,
        x_prime: img()?,
        labels: vec![0; batch],
    };
    let params = ModelParams::init(arch, derive_seed(seed, &[1]))?;
    let lambda_seed = derive_seed(seed, &[2]);

    let (_, grads) = loss_and_grads(
        &views,
        &params,
        cfg,
        &mut ChaCha8Rng::seed_from_u64(lambda_seed),
    )?;
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();
    let flat: Vec<f64> = params
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let shapes = arch.param_shapes();

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut off = 0;
        let tensors = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), theta[off..off + n].to_vec());
                off += n;
                t
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ModelParams::from_tensors(arch, tensors)?;
        Ok(step_loss_value(&views, &p, cfg, &mut ChaCha8Rng::seed_from_u64(lambda_seed))?.total)
    };

    let n = flat.len();
    let threads = std::thread::available_parallelism()
        .map_or(1, |t| t.get())
        .min(n.max(1));
    let chunk = n.div_ceil(threads);
    let mut numeric: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let coords: Vec<usize> = (t * chunk..((t + 1) * chunk).min(n)).collect();
                let (eval, flat) = (&eval, &flat);
                s.spawn(move || oracle::finite_diff_at(eval, flat, &coords, GRADCHECK_STEP))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradcheck worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .concat();

    let mut refined = 0;
    for i in 0..n {
        if oracle::relative_error(analytic[i], numeric[i], GRADCHECK_FLOOR) < GRADCHECK_TOLERANCE {
            continue;
        }
        refined += 1;
        if let Some((d, _)) = oracle::converged_diff(
            &eval,
            &flat,
            i,
            GRADCHECK_STEP,
            GRADCHECK_REFINEMENTS,
            GRADCHECK_TOLERANCE,
            GRADCHECK_FLOOR,
        )? {
            numeric[i] = d;
        }
    }

    let mut report = GradcheckReport {
        params: n,
        checked: n,
        refined,
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        tolerance: GRADCHECK_TOLERANCE,
        elapsed: Duration::ZERO,
    };
    for (i, (&a, &nu)) in analytic.iter().zip(&numeric).enumerate() {
        let e = oracle::relative_error(a, nu, GRADCHECK_FLOOR);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            report.worst_coord = i;
            report.analytic = a;
            report.numeric = nu;
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

/// The standard check: default architecture on 16×16 inputs, `B = 8`,
/// every term active, λ fixed at 0.3.
pub fn gradcheck_default(seed: u64) -> Result<GradcheckReport> {
    let cfg = ObjectiveConfig {
        lambda_policy: LambdaPolicy::Fixed(0.3),
        ..ObjectiveConfig::default()
    };
    gradcheck(&Arch::desk_default(256), 8, 16, &cfg, seed)
}

fn random_views(rng: &mut impl Rng, batch: usize, width: usize) -> Result<ViewPair> {
    let mut t = || {
        Tensor::new(
            vec![batch, width],
            (0..batch * width).map(|_| rng.gen::<f64>()).collect(),
        )
    };
    Ok(ViewPair {
        x: t()?,
        x_prime: t()?,
        labels: vec![0; batch],
    })
}

/// One named pass/fail line of a check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// λ = 1 and λ = 0 endpoints of one step, compared bit for bit.
pub fn endpoint_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch::new(vec![12, 10, 8], vec![8, 8, 6], true)?;
    let params = ModelParams::init(&arch, derive_seed(seed, &[1]))?;
    let views = random_views(&mut rng, 8, 12)?;
    let mut out = Vec::new();
    for lambda in [1.0, 0.0] {
        let cfg = ObjectiveConfig {
            lambda_policy: LambdaPolicy::Fixed(lambda),
            ..ObjectiveConfig::default()
        };
        let tape = Tape::new();
        let attached = params.attach(&tape);
        let g = trimix_step_loss(&tape, &views, &attached, &cfg, &mut rng)?;
        let x_vrt = g.x_vrt.value();
        if lambda == 1.0 {
            out.push(check(
                "x_vrt == x at λ=1",
                x_vrt.bit_eq(&views.x),
                "bitwise",
            ));
            out.push(check(
                "z_tilde == standardized z at λ=1",
                g.z_tilde.value().bit_eq(&g.z_std.value()),
                "bitwise",
            ));
            out.push(check(
                "GT == I at λ=1",
                g.gt.values().bit_eq(&Tensor::eye(8)),
                "bitwise",
            ));
        } else {
            out.push(check(
                "x_vrt == flip_rows(x) at λ=0",
                x_vrt.bit_eq(&views.x.flip_rows()),
                "bitwise",
            ));
        }
    }
    Ok(out)
}

/// Max `L_con` over `trials` random λ for a purely affine network with every
/// standardization off.
pub fn linearity_max_l_con(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch::new(vec![16, 12, 10], vec![10, 10, 8], false)?;
    let params = ModelParams::init(&arch, derive_seed(seed, &[1]))?;
    let cfg = ObjectiveConfig {
        normalize_on: false,
        ..ObjectiveConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let views = random_views(&mut rng, 8, 16)?;
        worst = worst.max(step_loss_value(&views, &params, &cfg, &mut rng)?.l_con);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralReport {
    pub trials: usize,
    pub softmax_row_dev: f64,
    pub corr_excess: f64,
    pub gt_row_dev: f64,
    pub recombination_dev: f64,
    pub bt_grad_dev: f64,
}

impl StructuralReport {
    pub fn checks(&self) -> Vec<Check> {
        vec![
            check(
                "softmax rows sum to 1",
                self.softmax_row_dev <= 1e-9,
                format!("max |Σ−1| = {:.2e}", self.softmax_row_dev),
            ),
            check(
                "|C_ij| <= 1",
                self.corr_excess <= 1e-9,
                format!("max |C|−1 = {:.2e}", self.corr_excess),
            ),
            check(
                "GT rows sum to 1",
                self.gt_row_dev <= 1e-12,
                format!("max |Σ−1| = {:.2e}", self.gt_row_dev),
            ),
            check(
                "total == weighted parts",
                self.recombination_dev <= 1e-12,
                format!("max relative deviation {:.2e}", self.recombination_dev),
            ),
            check(
                "β=γ=0 gradients == Barlow Twins gradients",
                self.bt_grad_dev <= 1e-12,
                format!("max |Δ| = {:.2e}", self.bt_grad_dev),
            ),
        ]
    }
}

/// `per_property` randomized trials for each of the five structural
/// properties of a step.
pub fn structural_trials(per_property: usize, seed: u64) -> Result<StructuralReport> {
    let mut rep = StructuralReport {
        trials: 5 * per_property,
        softmax_row_dev: 0.0,
        corr_excess: 0.0,
        gt_row_dev: 0.0,
        recombination_dev: 0.0,
        bt_grad_dev: 0.0,
    };
    for t in 0..per_property {
        // a ReLU draw can kill every unit feeding an embedding column; such a
        // case is rejected by the pipeline, so draw another
        let mut attempt = 0u64;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64, attempt]));
            match structural_case(&mut rng, &rep) {
                Err(Error::Degenerate { .. }) if attempt < 20 => attempt += 1,
                other => break rep = other?,
            }
        }
    }
    Ok(rep)
}

fn structural_case(rng: &mut ChaCha8Rng, prev: &StructuralReport) -> Result<StructuralReport> {
    let mut rep = prev.clone();
    let b = 2 * rng.gen_range(2..=8);
    let width = rng.gen_range(4..=12);
    let hidden = rng.gen_range(3..=10);
    let emb = rng.gen_range(3..=10);
    let arch = Arch::new(
        vec![width, hidden, hidden],
        vec![hidden, emb, emb],
        rng.gen(),
    )?;
    let params = ModelParams::init(&arch, rng.gen())?;
    let views = random_views(rng, b, width)?;
    let cfg = ObjectiveConfig {
        tau: rng.gen_range(0.1..4.0),
        alpha: rng.gen_range(0.0..0.1),
        beta: rng.gen_range(0.0..2000.0),
        gamma: rng.gen_range(0.0..400.0),
        ..ObjectiveConfig::default()
    };

    let tape = Tape::new();
    let attached = params.attach(&tape);
    let g = trimix_step_loss(&tape, &views, &attached, &cfg, rng)?;
    let soft = g.m_soft.value();
    for r in 0..soft.rows() {
        rep.softmax_row_dev = rep
            .softmax_row_dev
            .max((soft.row(r).iter().sum::<f64>() - 1.0).abs());
    }
    for &v in g.c.value().data() {
        rep.corr_excess = rep.corr_excess.max(v.abs() - 1.0);
    }
    let gt = g.gt.values();
    for r in 0..gt.rows() {
        rep.gt_row_dev = rep
            .gt_row_dev
            .max((gt.row(r).iter().sum::<f64>() - 1.0).abs());
    }
    let bd = g.breakdown;
    let recombined = bd
        .weights
        .combine(bd.l_bt_inv, bd.l_bt_rr, bd.l_vrt, bd.l_con);
    rep.recombination_dev = rep
        .recombination_dev
        .max((recombined - bd.total).abs() / bd.total.abs().max(1.0));

    let zero = ObjectiveConfig {
        beta: 0.0,
        gamma: 0.0,
        ..cfg.clone()
    };
    let (_, full) = loss_and_grads(&views, &params, &zero, rng)?;
    let tape = Tape::new();
    let attached = params.attach(&tape);
    let bt = crate::objective::barlow_twins_step_loss(&tape, &views, &attached, &zero)?;
    let grads = tape.backward(bt)?;
    for (v, gf) in attached.vars().into_iter().zip(&full) {
        rep.bt_grad_dev = rep.bt_grad_dev.max(grads.wrt(v).max_abs_diff(gf));
    }
    Ok(rep)
}
