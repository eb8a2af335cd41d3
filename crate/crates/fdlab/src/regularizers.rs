//! The penalty zoo: the siamese consistency objectives (FD, ELD, ELDM,
//! Pi-model) and the activation-norm penalties (AR, TAR, PR).
//!
//! All penalties act on pre-softmax logits or raw hidden activations as
//! recorded on the caller's tape. Target losses are batch means; siamese
//! penalties are scaled by `kappa / (m * T * batch)` so the per-sample
//! weighting is `kappa / (m T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StepOutput;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Fd,
    Eld,
    Eldm,
    Pi,
    Ar,
    Tar,
    Pr,
}

impl RegKind {
    /// Kinds that forward the input through two copies of the network.
    pub fn is_siamese(&self) -> bool {
        matches!(self, RegKind::Fd | RegKind::Eld | RegKind::Eldm | RegKind::Pi)
    }
}

/// Declarative description of one active penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    /// FD/ELD/ELDM/Pi coefficient.
    #[serde(default)]
    pub kappa: f64,
    /// AR coefficient.
    #[serde(default)]
    pub alpha: f64,
    /// TAR coefficient.
    #[serde(default)]
    pub beta: f64,
    /// PR coefficient.
    #[serde(default)]
    pub gamma: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        RegularizerSpec {
            kind: RegKind::None,
            kappa: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(
                "regularizer coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// ‖p_i − p_j‖² summed over all entries; gradients flow into both sides.
pub fn r_fd(tape: &mut Tape, p_i: Var, p_j: Var) -> Result<Var> {
    let diff = tape.sub(p_i, p_j)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// ‖p_dropout − p_meanmask‖² with the mask-free side held constant.
pub fn r_eld(tape: &mut Tape, p_dropout: Var, p_meanmask: Var) -> Result<Var> {
    if tape.shape(p_dropout) != tape.shape(p_meanmask) {
        return Err(Error::ShapeMismatch {
            op: "r_eld",
            lhs: tape.shape(p_dropout).to_vec(),
            rhs: tape.shape(p_meanmask).to_vec(),
        });
    }
    let frozen = tape.detach(p_meanmask);
    r_fd(tape, p_dropout, frozen)
}

/// (alpha/d)·‖mask ⊙ h‖² for one step's activation.
pub fn r_ar(tape: &mut Tape, h: Var, mask: &Tensor, alpha: f64) -> Result<Var> {
    let d = *tape.shape(h).last().unwrap();
    let mv = tape.leaf(mask.clone());
    let masked = tape.mul(h, mv)?;
    let sq = tape.square(masked)?;
    let s = tape.sum(sq)?;
    tape.mul_scalar(s, alpha / d as f64)
}

/// (beta/d)·‖h_t − h_prev‖².
pub fn r_tar(tape: &mut Tape, h_t: Var, h_prev: Var, beta: f64) -> Result<Var> {
    let d = *tape.shape(h_t).last().unwrap();
    let diff = tape.sub(h_t, h_prev)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.mul_scalar(s, beta / d as f64)
}

/// (gamma/m)·‖p‖².
pub fn r_pr(tape: &mut Tape, p: Var, gamma: f64) -> Result<Var> {
    let m = *tape.shape(p).last().unwrap();
    let sq = tape.square(p)?;
    let s = tape.sum(sq)?;
    tape.mul_scalar(s, gamma / m as f64)
}

fn check_lengths(outs: &[StepOutput], targets: &[Vec<usize>]) -> Result<()> {
    if outs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "objective",
            lhs: vec![outs.len()],
            rhs: vec![targets.len()],
        });
    }
    Ok(())
}

/// Σ_t cross_entropy summed over batch rows.
fn ce_sum(tape: &mut Tape, outs: &[StepOutput], targets: &[Vec<usize>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (o, t) in outs.iter().zip(targets) {
        let l = tape.cross_entropy(o.logits, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("at least one step"))
}

fn batch_of(targets: &[Vec<usize>]) -> usize {
    targets.first().map(|t| t.len()).unwrap_or(0)
}

/// Mean token cross-entropy of a single pass (the unregularized baseline).
pub fn baseline_objective(
    tape: &mut Tape,
    outs: &[StepOutput],
    targets: &[Vec<usize>],
) -> Result<Var> {
    check_lengths(outs, targets)?;
    let total = ce_sum(tape, outs, targets)?;
    let n = (outs.len() * batch_of(targets)) as f64;
    tape.mul_scalar(total, 1.0 / n)
}

/// Sum over steps of the squared logit distance, scaled kappa/(m·T·batch).
fn siamese_penalty(
    tape: &mut Tape,
    outs_a: &[StepOutput],
    outs_b: &[StepOutput],
    kappa: f64,
    detach_b: bool,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (a, b) in outs_a.iter().zip(outs_b) {
        let r = if detach_b {
            r_eld(tape, a.logits, b.logits)?
        } else {
            r_fd(tape, a.logits, b.logits)?
        };
        total = Some(match total {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
    }
    let m = *tape.shape(outs_a[0].logits).last().unwrap();
    let batch = tape.shape(outs_a[0].logits)[0];
    let scale = kappa / (m as f64 * outs_a.len() as f64 * batch as f64);
    tape.mul_scalar(total.expect("at least one step"), scale)
}

/// Average both copies' target losses and penalize their logit distance;
/// gradients reach the parameters through both copies.
pub fn fd_objective(
    tape: &mut Tape,
    outs_i: &[StepOutput],
    outs_j: &[StepOutput],
    targets: &[Vec<usize>],
    kappa: f64,
) -> Result<Var> {
    check_lengths(outs_i, targets)?;
    check_lengths(outs_j, targets)?;
    let l_i = ce_sum(tape, outs_i, targets)?;
    let l_j = ce_sum(tape, outs_j, targets)?;
    let both = tape.add(l_i, l_j)?;
    let half = tape.mul_scalar(both, 0.5)?;
    let n = (targets.len() * batch_of(targets)) as f64;
    let loss = tape.mul_scalar(half, 1.0 / n)?;
    if kappa == 0.0 {
        return Ok(loss);
    }
    let pen = siamese_penalty(tape, outs_i, outs_j, kappa, false)?;
    tape.add(loss, pen)
}

/// Target loss on the dropout pass only; penalty against the frozen
/// expected-mask pass.
pub fn eld_objective(
    tape: &mut Tape,
    outs_drop: &[StepOutput],
    outs_mean: &[StepOutput],
    targets: &[Vec<usize>],
    kappa: f64,
) -> Result<Var> {
    check_lengths(outs_drop, targets)?;
    let loss = baseline_objective(tape, outs_drop, targets)?;
    if kappa == 0.0 {
        return Ok(loss);
    }
    let pen = siamese_penalty(tape, outs_drop, outs_mean, kappa, true)?;
    tape.add(loss, pen)
}

/// As ELD, but the target loss is applied to both passes. The penalty's
/// expected-mask argument is still gradient-blocked.
pub fn eldm_objective(
    tape: &mut Tape,
    outs_drop: &[StepOutput],
    outs_mean: &[StepOutput],
    targets: &[Vec<usize>],
    kappa: f64,
) -> Result<Var> {
    check_lengths(outs_drop, targets)?;
    check_lengths(outs_mean, targets)?;
    let l_d = ce_sum(tape, outs_drop, targets)?;
    let l_m = ce_sum(tape, outs_mean, targets)?;
    let both = tape.add(l_d, l_m)?;
    let half = tape.mul_scalar(both, 0.5)?;
    let n = (targets.len() * batch_of(targets)) as f64;
    let loss = tape.mul_scalar(half, 1.0 / n)?;
    if kappa == 0.0 {
        return Ok(loss);
    }
    let pen = siamese_penalty(tape, outs_drop, outs_mean, kappa, true)?;
    tape.add(loss, pen)
}

/// Target loss on copy i only; the consistency penalty still reaches both
/// copies.
pub fn pi_objective(
    tape: &mut Tape,
    outs_i: &[StepOutput],
    outs_j: &[StepOutput],
    targets: &[Vec<usize>],
    kappa: f64,
) -> Result<Var> {
    check_lengths(outs_i, targets)?;
    let loss = baseline_objective(tape, outs_i, targets)?;
    if kappa == 0.0 {
        return Ok(loss);
    }
    let pen = siamese_penalty(tape, outs_i, outs_j, kappa, false)?;
    tape.add(loss, pen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logit_out(tape: &mut Tape, data: &[f64]) -> StepOutput {
        let v = tape.leaf(Tensor::new(vec![1, data.len()], data.to_vec()).unwrap());
        StepOutput {
            logits: v,
            hidden: vec![],
        }
    }

    #[test]
    fn r_fd_zero_for_identical() {
        let mut tape = Tape::new(0);
        let p = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let r = r_fd(&mut tape, p, p).unwrap();
        assert_eq!(tape.data(r), &[0.0]);
    }

    #[test]
    fn r_fd_hand_values() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let r1 = r_fd(&mut tape, a, b).unwrap();
        assert_eq!(tape.data(r1), &[2.0]);
        let c = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let r2 = r_fd(&mut tape, c, z).unwrap();
        assert_eq!(tape.data(r2), &[25.0]);
    }

    #[test]
    fn r_fd_shape_mismatch() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(Tensor::zeros(vec![1, 2]));
        let b = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(r_fd(&mut tape, a, b).is_err());
    }

    #[test]
    fn fd_objective_hand_value() {
        // T=1, m=2, p_i=(0,0), p_j=(1,0), target 0, kappa=0.2
        let mut tape = Tape::new(0);
        let oi = logit_out(&mut tape, &[0.0, 0.0]);
        let oj = logit_out(&mut tape, &[1.0, 0.0]);
        let v = fd_objective(&mut tape, &[oi], &[oj], &[vec![0]], 0.2).unwrap();
        let expect = 0.5 * (2f64.ln() + 0.31326169) + 0.1 * 1.0;
        assert!((tape.data(v)[0] - expect).abs() < 1e-7, "{}", tape.data(v)[0]);
    }

    #[test]
    fn fd_objective_kappa_zero_is_mean_of_losses() {
        let mut tape = Tape::new(0);
        let oi = logit_out(&mut tape, &[0.3, -0.2, 0.9]);
        let oj = logit_out(&mut tape, &[0.1, 0.4, -0.5]);
        let li = tape.cross_entropy(oi.logits, &[2]).unwrap();
        let lj = tape.cross_entropy(oj.logits, &[2]).unwrap();
        let mean = 0.5 * (tape.data(li)[0] + tape.data(lj)[0]);
        let v = fd_objective(&mut tape, &[oi], &[oj], &[vec![2]], 0.0).unwrap();
        assert!((tape.data(v)[0] - mean).abs() < 1e-15);
    }

    #[test]
    fn fd_objective_identical_copies_reduce_to_baseline() {
        let mut tape = Tape::new(0);
        let oi = logit_out(&mut tape, &[0.3, -0.2, 0.9]);
        let oj = logit_out(&mut tape, &[0.3, -0.2, 0.9]);
        let ob = logit_out(&mut tape, &[0.3, -0.2, 0.9]);
        let base = baseline_objective(&mut tape, &[ob], &[vec![1]]).unwrap();
        let v = fd_objective(&mut tape, &[oi], &[oj], &[vec![1]], 5.0).unwrap();
        assert_eq!(tape.data(v), tape.data(base));
    }

    #[test]
    fn fd_symmetry_under_copy_swap() {
        let mut tape = Tape::new(0);
        let a = [0.3, -0.2, 0.9];
        let b = [-1.0, 0.4, 0.2];
        let o1 = logit_out(&mut tape, &a);
        let o2 = logit_out(&mut tape, &b);
        let v12 = fd_objective(&mut tape, &[o1], &[o2], &[vec![0]], 0.7).unwrap();
        let o1b = logit_out(&mut tape, &a);
        let o2b = logit_out(&mut tape, &b);
        let v21 = fd_objective(&mut tape, &[o2b], &[o1b], &[vec![0]], 0.7).unwrap();
        assert_eq!(tape.data(v12), tape.data(v21));
    }

    #[test]
    fn eld_stop_gradient() {
        let mut tape = Tape::new(0);
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let q = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let r = r_eld(&mut tape, p, q).unwrap();
        assert_eq!(tape.data(r), &[2.0]);
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(q).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(p).data(), &[2.0, 2.0]);
    }

    #[test]
    fn eldm_differs_from_eld_by_half_meanmask_loss() {
        let mut tape = Tape::new(0);
        let drop = [0.4, -0.8, 0.1];
        let mean = [0.2, -0.3, 0.6];
        let d1 = logit_out(&mut tape, &drop);
        let m1 = logit_out(&mut tape, &mean);
        let eld = eld_objective(&mut tape, &[d1], &[m1], &[vec![1]], 0.3).unwrap();
        let d2 = logit_out(&mut tape, &drop);
        let m2 = logit_out(&mut tape, &mean);
        let eldm = eldm_objective(&mut tape, &[d2], &[m2], &[vec![1]], 0.3).unwrap();
        let m3 = logit_out(&mut tape, &mean);
        let ce_mean = tape.cross_entropy(m3.logits, &[1]).unwrap();
        let d4 = logit_out(&mut tape, &drop);
        let ce_drop = tape.cross_entropy(d4.logits, &[1]).unwrap();
        let expect_delta = 0.5 * (tape.data(ce_mean)[0] - tape.data(ce_drop)[0]);
        let delta = tape.data(eldm)[0] - tape.data(eld)[0];
        assert!((delta - expect_delta).abs() < 1e-12);
    }

    #[test]
    fn pi_target_loss_through_one_copy_only() {
        let mut tape = Tape::new(0);
        let oi = logit_out(&mut tape, &[0.4, -0.8]);
        let oj = logit_out(&mut tape, &[0.2, -0.3]);
        let oj_logits = oj.logits;
        let v = pi_objective(&mut tape, &[oi], &[oj], &[vec![0]], 0.5).unwrap();
        tape.backward(v).unwrap();
        // Copy j's gradient comes only from the penalty term.
        let d = [0.4 - 0.2, -0.8 + 0.3];
        let scale = 0.5 / 2.0; // kappa / (m T B)
        for (g, di) in tape.grad(oj_logits).data().iter().zip(d) {
            assert!((g - scale * (-2.0) * di).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_kappa_zero_is_single_copy_loss() {
        let mut tape = Tape::new(0);
        let oi = logit_out(&mut tape, &[0.4, -0.8]);
        let oj = logit_out(&mut tape, &[9.0, -3.0]);
        let v = pi_objective(&mut tape, &[oi], &[oj], &[vec![0]], 0.0).unwrap();
        let ob = logit_out(&mut tape, &[0.4, -0.8]);
        let ce = tape.cross_entropy(ob.logits, &[0]).unwrap();
        assert_eq!(tape.data(v), tape.data(ce));
    }

    #[test]
    fn ar_hand_values() {
        let mut tape = Tape::new(0);
        let h = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mask = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let v = r_ar(&mut tape, h, &mask, 2.0).unwrap();
        assert_eq!(tape.data(v), &[5.0]);
        let zero_mask = Tensor::zeros(vec![1, 2]);
        let v0 = r_ar(&mut tape, h, &zero_mask, 2.0).unwrap();
        assert_eq!(tape.data(v0), &[0.0]);
        let hz = tape.leaf(Tensor::zeros(vec![1, 2]));
        let vz = r_ar(&mut tape, hz, &mask, 2.0).unwrap();
        assert_eq!(tape.data(vz), &[0.0]);
    }

    #[test]
    fn tar_hand_values() {
        let mut tape = Tape::new(0);
        let h = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let p = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let v = r_tar(&mut tape, h, p, 1.0).unwrap();
        assert_eq!(tape.data(v), &[4.0]);
        let v0 = r_tar(&mut tape, h, h, 1.0).unwrap();
        assert_eq!(tape.data(v0), &[0.0]);
        let vb = r_tar(&mut tape, h, p, 0.0).unwrap();
        assert_eq!(tape.data(vb), &[0.0]);
    }

    #[test]
    fn pr_hand_values() {
        let mut tape = Tape::new(0);
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let v = r_pr(&mut tape, p, 2.0).unwrap();
        assert_eq!(tape.data(v), &[2.0]);
        let z = tape.leaf(Tensor::zeros(vec![1, 2]));
        let vz = r_pr(&mut tape, z, 2.0).unwrap();
        assert_eq!(tape.data(vz), &[0.0]);
    }

    #[test]
    fn pr_equals_fd_self_term_up_to_coefficient() {
        // The FD expansion's self term is ‖p‖²; PR is (gamma/m) of it.
        let mut tape = Tape::new(0);
        let data = [0.7, -1.3, 0.2];
        let p = tape.leaf(Tensor::new(vec![1, 3], data.to_vec()).unwrap());
        let v = r_pr(&mut tape, p, 3.0).unwrap();
        let self_term: f64 = data.iter().map(|x| x * x).sum();
        assert!((tape.data(v)[0] - self_term).abs() < 1e-14);
    }

    #[test]
    fn coefficient_doubling_doubles_penalty_part() {
        let mut tape = Tape::new(0);
        let a = [0.3, -0.2, 0.9];
        let b = [-1.0, 0.4, 0.2];
        let mk = |tape: &mut Tape| (logit_out(tape, &a), logit_out(tape, &b));
        let (o1, o2) = mk(&mut tape);
        let base = fd_objective(&mut tape, &[o1], &[o2], &[vec![0]], 0.0).unwrap();
        let (o1, o2) = mk(&mut tape);
        let k1 = fd_objective(&mut tape, &[o1], &[o2], &[vec![0]], 0.4).unwrap();
        let (o1, o2) = mk(&mut tape);
        let k2 = fd_objective(&mut tape, &[o1], &[o2], &[vec![0]], 0.8).unwrap();
        let p1 = tape.data(k1)[0] - tape.data(base)[0];
        let p2 = tape.data(k2)[0] - tape.data(base)[0];
        assert!((p2 - 2.0 * p1).abs() < 1e-14);
    }

    #[test]
    fn negative_coefficients_rejected() {
        let mut s = RegularizerSpec::none();
        s.kappa = -1.0;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn fd_decomposition_identity(
            xs in proptest::collection::vec(-5.0f64..5.0, 4),
            ys in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut tape = Tape::new(0);
            let a = tape.leaf(Tensor::new(vec![1, 4], xs.clone()).unwrap());
            let b = tape.leaf(Tensor::new(vec![1, 4], ys.clone()).unwrap());
            let r = r_fd(&mut tape, a, b).unwrap();
            let na: f64 = xs.iter().map(|x| x * x).sum();
            let nb: f64 = ys.iter().map(|y| y * y).sum();
            let dot: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
            prop_assert!((tape.data(r)[0] - (na + nb - 2.0 * dot)).abs() < 1e-12);
        }
    }
}
