//! The TriMix objective: Barlow Twins redundancy reduction plus the
//! virtual-embedding decomposition loss and the self-consistency loss.
//!
//! One training step, for views `x`, `x′` of the same batch:
//!
//! 1. `z, z′` = projector(encoder(·)), standardized over the batch;
//!    `C = zᵀz′/B`; `L_BT = Σ(1−C_ii)² + α·Σ_{i≠j} C_ij²`.
//! 2. A single `λ ~ U[0,1]` mixes `x` with its row-reversal into `x_vrt`;
//!    `z_vrt` = net(`x_vrt`), standardized over the batch then over features.
//! 3. `M = z·z_vrtᵀ/D`, row softmax at temperature τ, and
//!    `L_vrt = mean|softmax(M) − GT|` with `GT = λI + (1−λ)·antidiag`.
//! 4. `z̃ = λz + (1−λ)·flip(z)`, `L_con = mean|z̃ − z_vrt|`.
//! 5. `total = L_BT + β·L_vrt + γ·L_con`.

use rand::Rng;

use crate::data::ViewPair;
use crate::error::{Error, Result};
use crate::model::{forward, AttachedParams, ModelParams};
use crate::stats::{
    cross_correlation, row_softmax, standardize, Axis, CorrelationMatrix, CorrelationMode,
};
use crate::tensor::{Tape, Tensor, Var};

/// The mixup factor, shared by input mixup, embedding mixup and `GT`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MixFactor(f64);

impl MixFactor {
    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(MixFactor(lambda))
        } else {
            Err(Error::contract(format!(
                "mixup factor must lie in [0, 1], got {lambda}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    Uniform,
    Fixed(f64),
}

impl LambdaPolicy {
    pub fn sample(self, rng: &mut impl Rng) -> Result<MixFactor> {
        match self {
            LambdaPolicy::Uniform => MixFactor::new(rng.gen::<f64>()),
            LambdaPolicy::Fixed(v) => MixFactor::new(v),
        }
    }
}

/// Which representation each auxiliary loss consumes: `Z` (embedding) or `Y`
/// (encoder output). The first letter is for `L_vrt`, the second for `L_con`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    ZZ,
    YY,
    ZY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Z,
    Y,
}

impl Placement {
    fn levels(self) -> (Level, Level) {
        match self {
            Placement::ZZ => (Level::Z, Level::Z),
            Placement::YY => (Level::Y, Level::Y),
            Placement::ZY => (Level::Z, Level::Y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lambda_policy: LambdaPolicy,
    pub enable_vrt: bool,
    pub enable_con: bool,
    /// Feature-axis standardization of the virtual embeddings.
    pub enable_feature_norm: bool,
    pub placement: Placement,
    /// Master switch for every standardization in the step.
    pub normalize_on: bool,
    pub allow_degenerate: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 5e-3,
            beta: 1000.0,
            gamma: 200.0,
            tau: 2.0,
            lambda_policy: LambdaPolicy::Uniform,
            enable_vrt: true,
            enable_con: true,
            enable_feature_norm: true,
            placement: Placement::ZZ,
            normalize_on: true,
            allow_degenerate: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config("alpha, beta and gamma must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let LambdaPolicy::Fixed(v) = self.lambda_policy {
            MixFactor::new(v).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Loss weights after applying the enable toggles.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: if self.enable_vrt { self.beta } else { 0.0 },
            gamma: if self.enable_con { self.gamma } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// `(l_inv + α·l_rr) + β·l_vrt + γ·l_con`, in the order the tape evaluates it.
    pub fn combine(&self, l_inv: f64, l_rr: f64, l_vrt: f64, l_con: f64) -> f64 {
        ((l_inv + l_rr * self.alpha) + l_vrt * self.beta) + l_con * self.gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_bt_inv: f64,
    pub l_bt_rr: f64,
    pub l_vrt: f64,
    pub l_con: f64,
    pub lambda: MixFactor,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn bt(&self) -> f64 {
        self.l_bt_inv + self.l_bt_rr * self.weights.alpha
    }
}

/// `GT = λI + (1−λ)·R(I)` where `R` rotates by 90°, i.e. the anti-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMatrix(Tensor);

impl GroundTruthMatrix {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

fn check_even(b: usize) -> Result<()> {
    if b == 0 || !b.is_multiple_of(2) {
        Err(Error::BatchParity(b))
    } else {
        Ok(())
    }
}

pub fn ground_truth_matrix(batch: usize, lambda: MixFactor) -> Result<GroundTruthMatrix> {
    check_even(batch)?;
    let l = lambda.value();
    let mut t = Tensor::zeros(&[batch, batch]);
    let d = t.data_mut();
    for i in 0..batch {
        d[i * batch + i] = l;
        d[i * batch + (batch - 1 - i)] = 1.0 - l;
    }
    Ok(GroundTruthMatrix(t))
}

/// `λ·x + (1−λ)·flip_rows(x)` over the leading (batch) dimension.
pub fn mixup(x: Var<'_>, lambda: MixFactor) -> Result<Var<'_>> {
    check_even(x.shape()[0])?;
    let l = lambda.value();
    x.scale(l).add(x.flip_rows().scale(1.0 - l))
}

/// `(Σ_i (1−C_ii)², Σ_i Σ_{j≠i} C_ij²)` for a feature correlation matrix.
pub fn loss_bt<'t>(c: &CorrelationMatrix<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = c.values.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension {
            op: "loss_bt",
            lhs: shape.clone(),
            rhs: vec![shape[0], shape[0]],
        });
    }
    let d = shape[0];
    let tape = c.values.tape();
    let eye = Tensor::eye(d);
    let off = eye.map(|v| 1.0 - v);
    let diff_sq = c.values.sub(tape.leaf(eye.clone()))?.square();
    let l_inv = diff_sq.hadamard(tape.leaf(eye))?.sum();
    let l_rr = diff_sq.hadamard(tape.leaf(off))?.sum();
    Ok((l_inv, l_rr))
}

/// Mean over all `B²` cells of `|m_soft − GT|`.
pub fn loss_vrt<'t>(m_soft: Var<'t>, gt: &GroundTruthMatrix) -> Result<Var<'t>> {
    let target = m_soft.tape().leaf(gt.0.clone());
    Ok(m_soft.sub(target)?.abs().mean())
}

/// Mean over all cells of `|z̃ − z_vrt|`.
pub fn loss_con<'t>(z_tilde: Var<'t>, z_vrt: Var<'t>) -> Result<Var<'t>> {
    Ok(z_tilde.sub(z_vrt)?.abs().mean())
}

/// Everything a step recorded, for backward and for inspection.
#[derive(Debug)]
pub struct StepGraph<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    /// Mixed inputs fed to the network.
    pub x_vrt: Var<'t>,
    /// First-view embedding after batch standardization.
    pub z_std: Var<'t>,
    /// Feature cross-correlation of the two views.
    pub c: Var<'t>,
    /// Mixed-up embeddings on the `L_con` level.
    pub z_tilde: Var<'t>,
    /// Normalized virtual embeddings on the `L_con` level.
    pub z_vrt: Var<'t>,
    /// Row-softmaxed sample similarity.
    pub m_soft: Var<'t>,
    pub gt: GroundTruthMatrix,
}

fn finite(v: Var<'_>, term: &str) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(term))
    }
}

fn check_views(views: &ViewPair) -> Result<usize> {
    if views.x.shape() != views.x_prime.shape() {
        return Err(Error::Dimension {
            op: "views",
            lhs: views.x.shape().to_vec(),
            rhs: views.x_prime.shape().to_vec(),
        });
    }
    let b = views.x.rows();
    check_even(b)?;
    Ok(b)
}

struct BarlowPart<'t> {
    x: Var<'t>,
    y: Var<'t>,
    z_std: Var<'t>,
    l_inv: Var<'t>,
    l_rr: Var<'t>,
    c: Var<'t>,
}

fn barlow_part<'t>(
    tape: &'t Tape,
    views: &ViewPair,
    params: &AttachedParams<'t>,
    cfg: &ObjectiveConfig,
) -> Result<BarlowPart<'t>> {
    let x = tape.leaf(views.x.clone());
    let x_prime = tape.leaf(views.x_prime.clone());
    let f = forward(x, params)?;
    let f_prime = forward(x_prime, params)?;
    let (z, z_prime) = if cfg.normalize_on {
        (
            standardize(f.z, Axis::Batch, cfg.allow_degenerate)?,
            standardize(f_prime.z, Axis::Batch, cfg.allow_degenerate)?,
        )
    } else {
        (f.z, f_prime.z)
    };
    let c = cross_correlation(z, z_prime, CorrelationMode::Features)?;
    let (l_inv, l_rr) = loss_bt(&c)?;
    Ok(BarlowPart {
        x,
        y: f.y,
        z_std: z,
        l_inv,
        l_rr,
        c: c.values,
    })
}

/// One full TriMix step recorded on `tape`. λ is drawn from `rng` according
/// to `cfg.lambda_policy`.
pub fn trimix_step_loss<'t>(
    tape: &'t Tape,
    views: &ViewPair,
    params: &AttachedParams<'t>,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<StepGraph<'t>> {
    let b = check_views(views)?;
    let bt = barlow_part(tape, views, params, cfg)?;

    let lambda = cfg.lambda_policy.sample(rng)?;
    let x_vrt = mixup(bt.x, lambda)?;
    let f_vrt = forward(x_vrt, params)?;

    // (original, virtual) pair at a representation level, normalized the same
    // way for both auxiliary losses
    let level = |lv: Level| -> Result<(Var<'t>, Var<'t>)> {
        let (orig, virt) = match lv {
            Level::Z => (bt.z_std, f_vrt.z),
            Level::Y if cfg.normalize_on => (
                standardize(bt.y, Axis::Batch, cfg.allow_degenerate)?,
                f_vrt.y,
            ),
            Level::Y => (bt.y, f_vrt.y),
        };
        let virt = if cfg.normalize_on {
            let v = standardize(virt, Axis::Batch, cfg.allow_degenerate)?;
            if cfg.enable_feature_norm {
                standardize(v, Axis::Feature, cfg.allow_degenerate)?
            } else {
                v
            }
        } else {
            virt
        };
        Ok((orig, virt))
    };

    let (vrt_level, con_level) = cfg.placement.levels();
    let (vrt_orig, vrt_virt) = level(vrt_level)?;
    let (con_orig, con_virt) = if con_level == vrt_level {
        (vrt_orig, vrt_virt)
    } else {
        level(con_level)?
    };

    let m = cross_correlation(vrt_orig, vrt_virt, CorrelationMode::Samples)?;
    let m_soft = row_softmax(&m, cfg.tau)?;
    let gt = ground_truth_matrix(b, lambda)?;
    let l_vrt = loss_vrt(m_soft, &gt)?;

    let z_tilde = mixup(con_orig, lambda)?;
    let l_con = loss_con(z_tilde, con_virt)?;

    let w = cfg.weights();
    let total = bt
        .l_inv
        .add(bt.l_rr.scale(w.alpha))?
        .add(l_vrt.scale(w.beta))?
        .add(l_con.scale(w.gamma))?;

    let breakdown = LossBreakdown {
        l_bt_inv: finite(bt.l_inv, "l_bt_inv")?,
        l_bt_rr: finite(bt.l_rr, "l_bt_rr")?,
        l_vrt: finite(l_vrt, "l_vrt")?,
        l_con: finite(l_con, "l_con")?,
        total: finite(total, "total")?,
        lambda,
        weights: w,
    };
    Ok(StepGraph {
        total,
        breakdown,
        x_vrt,
        z_std: bt.z_std,
        c: bt.c,
        z_tilde,
        z_vrt: con_virt,
        m_soft,
        gt,
    })
}

/// The Barlow Twins loss alone, `L_inv + α·L_rr`, on the same two views.
pub fn barlow_twins_step_loss<'t>(
    tape: &'t Tape,
    views: &ViewPair,
    params: &AttachedParams<'t>,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    check_views(views)?;
    let bt = barlow_part(tape, views, params, cfg)?;
    let total = bt.l_inv.add(bt.l_rr.scale(cfg.alpha))?;
    finite(total, "l_bt")?;
    Ok(total)
}

/// Loss breakdown and parameter gradients (declaration order) for one step.
pub fn loss_and_grads(
    views: &ViewPair,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let attached = params.attach(&tape);
    let step = trimix_step_loss(&tape, views, &attached, cfg, rng)?;
    let grads = tape.backward(step.total)?;
    Ok((
        step.breakdown,
        attached.vars().into_iter().map(|v| grads.wrt(v)).collect(),
    ))
}

/// Loss value only, without a backward pass.
pub fn step_loss_value(
    views: &ViewPair,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let attached = params.attach(&tape);
    Ok(trimix_step_loss(&tape, views, &attached, cfg, rng)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mf(v: f64) -> MixFactor {
        MixFactor::new(v).unwrap()
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        assert!(mixup(x, mf(1.0)).unwrap().value().bit_eq(&x.value()));
        assert!(mixup(x, mf(0.0))
            .unwrap()
            .value()
            .bit_eq(&x.value().flip_rows()));
        assert_eq!(mixup(x, mf(0.5)).unwrap().value().data(), &[4.0, 4.0]);
        let odd = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(mixup(odd, mf(0.5)), Err(Error::BatchParity(3))));
    }

    #[test]
    fn ground_truth_cases() {
        let gt = ground_truth_matrix(4, mf(0.7)).unwrap();
        let v = gt.values();
        for i in 0..4 {
            assert_eq!(v.at(i, i), 0.7);
            assert!((v.at(i, 3 - i) - 0.3).abs() < 1e-15);
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(
            ground_truth_matrix(6, mf(1.0)).unwrap().values(),
            &Tensor::eye(6)
        );
        assert_eq!(
            ground_truth_matrix(2, mf(0.5)).unwrap().values().data(),
            &[0.5; 4]
        );
        assert!(matches!(
            ground_truth_matrix(5, mf(0.5)),
            Err(Error::BatchParity(5))
        ));
    }

    #[test]
    fn mix_factor_range() {
        assert!(MixFactor::new(-0.1).is_err());
        assert!(MixFactor::new(1.1).is_err());
        assert!(MixFactor::new(f64::NAN).is_err());
    }

    #[test]
    fn bt_closed_forms() {
        let tape = Tape::new();
        let c = |t: Tensor| CorrelationMatrix {
            values: tape.leaf(t),
            mode: CorrelationMode::Features,
        };
        let (inv, rr) = loss_bt(&c(Tensor::eye(3))).unwrap();
        assert_eq!((inv.item(), rr.item()), (0.0, 0.0));
        let (inv, rr) = loss_bt(&c(Tensor::ones(&[2, 2]))).unwrap();
        assert_eq!((inv.item(), rr.item()), (0.0, 2.0));
        assert!(loss_bt(&c(Tensor::ones(&[2, 3]))).is_err());
    }

    #[test]
    fn vrt_and_con_closed_forms() {
        let tape = Tape::new();
        let gt = ground_truth_matrix(4, mf(1.0)).unwrap();
        let uniform = tape.leaf(Tensor::full(&[4, 4], 0.25));
        assert_eq!(loss_vrt(uniform, &gt).unwrap().item(), 0.375);
        assert_eq!(
            loss_vrt(tape.leaf(gt.values().clone()), &gt)
                .unwrap()
                .item(),
            0.0
        );

        let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let b = tape.leaf(a.value().map(|v| v + 1.0));
        assert_eq!(loss_con(a, a).unwrap().item(), 0.0);
        assert_eq!(loss_con(b, a).unwrap().item(), 1.0);
        assert!(loss_con(a, tape.leaf(Tensor::zeros(&[2, 3]))).is_err());
    }

    fn views(b: usize, width: usize, seed: u64) -> ViewPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || {
            Tensor::new(
                vec![b, width],
                (0..b * width).map(|_| rng.gen::<f64>()).collect(),
            )
            .unwrap()
        };
        ViewPair {
            x: t(),
            x_prime: t(),
            labels: vec![0; b],
        }
    }

    #[test]
    fn recombination_identity_and_bt_only_gradients() {
        let arch = Arch::new(vec![6, 8], vec![8, 8, 5], true).unwrap();
        let params = ModelParams::init(&arch, 1).unwrap();
        let v = views(8, 6, 2);

        let cfg = ObjectiveConfig::default();
        let (lb, _) = loss_and_grads(&v, &params, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(
            lb.total,
            lb.weights
                .combine(lb.l_bt_inv, lb.l_bt_rr, lb.l_vrt, lb.l_con)
        );

        let zero = ObjectiveConfig {
            beta: 0.0,
            gamma: 0.0,
            ..cfg.clone()
        };
        let (lb, grads) =
            loss_and_grads(&v, &params, &zero, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(lb.total, lb.bt());
        assert!(lb.l_vrt > 0.0 && lb.l_con > 0.0);

        let tape = Tape::new();
        let attached = params.attach(&tape);
        let bt = barlow_twins_step_loss(&tape, &v, &attached, &zero).unwrap();
        assert_eq!(bt.item(), lb.total);
        let g = tape.backward(bt).unwrap();
        for (a, var) in grads.iter().zip(attached.vars()) {
            assert!(a.max_abs_diff(&g.wrt(var)) <= 1e-12);
        }
    }

    #[test]
    fn lambda_one_endpoints() {
        let arch = Arch::new(vec![6, 8], vec![8, 8, 5], true).unwrap();
        let params = ModelParams::init(&arch, 1).unwrap();
        let v = views(8, 6, 3);
        let cfg = ObjectiveConfig {
            lambda_policy: LambdaPolicy::Fixed(1.0),
            ..Default::default()
        };
        let tape = Tape::new();
        let attached = params.attach(&tape);
        let step = trimix_step_loss(
            &tape,
            &v,
            &attached,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(step.x_vrt.value().bit_eq(&v.x));
        assert!(step.z_tilde.value().bit_eq(&step.z_std.value()));
        assert_eq!(step.gt.values(), &Tensor::eye(8));
    }

    #[test]
    fn odd_batch_rejected() {
        let params =
            ModelParams::init(&Arch::new(vec![4, 4], vec![4, 3], true).unwrap(), 0).unwrap();
        let v = views(5, 4, 0);
        let err = loss_and_grads(
            &v,
            &params,
            &ObjectiveConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::BatchParity(5))));
    }

    #[test]
    fn placements_run() {
        let arch = Arch::new(vec![6, 8], vec![8, 8, 5], true).unwrap();
        let params = ModelParams::init(&arch, 4).unwrap();
        let v = views(8, 6, 5);
        for placement in [Placement::ZZ, Placement::YY, Placement::ZY] {
            let cfg = ObjectiveConfig {
                placement,
                ..Default::default()
            };
            let (lb, grads) =
                loss_and_grads(&v, &params, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(lb.l_vrt >= 0.0 && lb.l_con >= 0.0);
            assert_eq!(grads.len(), 6);
        }
    }

    proptest! {
        #[test]
        fn mixup_flip_symmetry(data in prop::collection::vec(-5.0f64..5.0, 12), l in 0.0f64..=1.0) {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![4, 3], data).unwrap());
            let a = mixup(x, mf(l)).unwrap().value();
            // flip-equivariance holds bit for bit
            let b = mixup(x.flip_rows(), mf(l)).unwrap().flip_rows().value();
            prop_assert!(a.bit_eq(&b));
            // mixing the reversal with 1-λ gives the same convex combination
            let c = mixup(x.flip_rows(), mf(1.0 - l)).unwrap().value();
            prop_assert!(a.max_abs_diff(&c) < 1e-12);
        }

        #[test]
        fn gt_rows_sum_to_one(half in 1usize..=32, l in 0.0f64..=1.0) {
            let gt = ground_truth_matrix(2 * half, mf(l)).unwrap();
            for i in 0..2 * half {
                prop_assert!((gt.values().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
