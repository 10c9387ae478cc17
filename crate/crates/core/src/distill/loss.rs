use crate::autodiff::{clamped_log, softmax_row, Tape, Tensor, Var, LOG_CLAMP_FLOOR};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model};

/// Mean over the batch of `-ln softmax(logits_i / tau)[y_i]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (b, k) = match tape.value(logits).shape() {
        [b, k] => (*b, *k),
        s => return Err(Error::shape("cross_entropy", format!("logits must be [B, K], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Parameter(format!("label {y} out of range for {k} classes")));
        }
        onehot[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(b, k, onehot)?);
    let p = tape.softmax(logits, tau)?;
    let lp = clamped_log(tape, p)?;
    let picked = tape.mul(mask, lp)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Mean over the batch of `KL(p_t || p_s)` with both sides at `tau`.
///
/// The teacher side is read off the tape as a constant, so no gradient
/// flows into `teacher_logits` even if it was produced by trainable
/// parameters.
pub fn kd_loss(tape: &mut Tape, teacher_logits: Var, student_logits: Var, tau: f64) -> Result<Var> {
    kl_term("kd_loss", tape, teacher_logits, student_logits, tau)
}

/// Same divergence on the unlabeled batch, with the student's auxiliary
/// head on the right-hand side.
pub fn kd_loss_unlabeled(
    tape: &mut Tape,
    teacher_logits: Var,
    student_aux_logits: Var,
    tau_u: f64,
) -> Result<Var> {
    kl_term("kd_loss_unlabeled", tape, teacher_logits, student_aux_logits, tau_u)
}

fn kl_term(op: &'static str, tape: &mut Tape, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let (ts, ss) = (tape.value(teacher).shape(), tape.value(student).shape());
    if ts != ss || ts.len() != 2 {
        return Err(Error::shape(op, format!("teacher {ts:?} vs student {ss:?}")));
    }
    let (b, k) = (ts[0], ts[1]);
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    crate::autodiff::ensure_finite("teacher logits", tape.value(teacher).data())?;

    let t = tape.value(teacher);
    let mut pt = vec![0.0; b * k];
    for r in 0..b {
        softmax_row(t.row(r), tau, &mut pt[r * k..(r + 1) * k]);
    }
    // Σ p_t ln p_t, with the same clamp as the student side.
    let neg_entropy: f64 = pt
        .iter()
        .map(|&p| p * p.clamp(LOG_CLAMP_FLOOR, 1.0).ln())
        .sum();

    let pt = tape.constant(Tensor::matrix(b, k, pt)?);
    let ps = tape.softmax(student, tau)?;
    let lps = clamped_log(tape, ps)?;
    let cross = tape.mul(pt, lps)?;
    let cross = tape.sum(cross)?;
    let offset = tape.constant(Tensor::scalar(neg_entropy));
    let kl = tape.sub(offset, cross)?;
    tape.scale(kl, 1.0 / b as f64)
}

/// Cross-entropy value without gradient bookkeeping.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = cross_entropy(&mut tape, l, labels, tau)?;
    tape.value(v).item()
}

/// KL value without gradient bookkeeping.
pub fn kd_loss_value(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher_logits.clone());
    let s = tape.constant(student_logits.clone());
    let v = kd_loss(&mut tape, t, s, tau)?;
    tape.value(v).item()
}

/// The three terms of the stage-2 objective and their sum.
#[derive(Debug, Clone, Copy)]
pub struct SskdLoss {
    pub total: Var,
    /// Student main-head logits on the labeled batch.
    pub logits: Var,
    pub ce: Var,
    pub kd: Var,
    pub kd_u: Option<Var>,
}

/// Builds the full stage-2 objective on `tape`.
///
/// `ce_tau` is the cross-entropy temperature (normally `tau_kd`). KL terms
/// are multiplied by `kl_weight` (1 unless τ² rescaling is enabled). An
/// empty unlabeled batch drops the unlabeled term.
#[allow(clippy::too_many_arguments)]
pub fn sskd_total(
    tape: &mut Tape,
    student: &Model,
    bound: &BoundModel,
    teacher: &Model,
    labeled_x: &Tensor,
    labels: &[usize],
    unlabeled_x: Option<&Tensor>,
    ce_tau: f64,
    tau_kd: f64,
    tau_kd_u: f64,
    kl_weights: (f64, f64),
) -> Result<SskdLoss> {
    if !teacher.is_frozen() {
        return Err(Error::Usage("the teacher must be frozen before distillation".into()));
    }
    let t_lab = teacher.forward(labeled_x)?.logits_main;
    if t_lab.shape()[1] != student.k_main() {
        return Err(Error::shape(
            "sskd_total",
            format!("teacher has {} classes, student main head {}", t_lab.shape()[1], student.k_main()),
        ));
    }
    let x = tape.constant(labeled_x.clone());
    let emb = student.extract(tape, bound, x)?;
    let logits = student.main_logits(tape, bound, emb)?;
    let ce = cross_entropy(tape, logits, labels, ce_tau)?;
    let t_lab = tape.constant(t_lab);
    let kd = kd_loss(tape, t_lab, logits, tau_kd)?;
    let kd_w = tape.scale(kd, kl_weights.0)?;
    let mut total = tape.add(ce, kd_w)?;

    let mut kd_u = None;
    if let Some(ux) = unlabeled_x {
        let t_un = teacher.forward(ux)?.logits_main;
        match student.k_aux() {
            Some(k) if k == t_un.shape()[1] => {}
            other => {
                return Err(Error::shape(
                    "kd_loss_unlabeled",
                    format!("teacher width {} vs aux head {other:?}", t_un.shape()[1]),
                ))
            }
        }
        let uxv = tape.constant(ux.clone());
        let uemb = student.extract(tape, bound, uxv)?;
        let ulogits = student.aux_logits(tape, bound, uemb)?;
        let t_un = tape.constant(t_un);
        let term = kd_loss_unlabeled(tape, t_un, ulogits, tau_kd_u)?;
        let term_w = tape.scale(term, kl_weights.1)?;
        total = tape.add(total, term_w)?;
        kd_u = Some(term);
    }
    Ok(SskdLoss {
        total,
        logits,
        ce,
        kd,
        kd_u,
    })
}
