//! MESA self-distillation: an EMA teacher tracking the student and a loss of
//! cross-entropy plus a temperature-softened KL term against the teacher.

use serde::{Deserialize, Serialize};

use crate::engine::{log_softmax_rows, Float, Graph, Optimizer, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Mode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub kd_weight: f64,
    pub ema_decay: f64,
    /// `KL(student || teacher)` instead of `KL(teacher || student)`.
    pub kl_literal_order: bool,
    /// Multiply the KL term by `temperature^2`.
    pub scale_by_t2: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 5.0,
            kd_weight: 1.0,
            ema_decay: 0.999,
            kl_literal_order: false,
            scale_by_t2: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("distill.temperature must be positive, got {}", self.temperature)));
        }
        if !(self.kd_weight >= 0.0) {
            return Err(Error::config(format!("distill.kd_weight must be nonnegative, got {}", self.kd_weight)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("distill.ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// `theta_T <- rho * theta_T + (1 - rho) * theta_S` for every entry,
/// including batch-norm running statistics.
pub fn ema_update<T: Float>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, rho: f64) -> Result<()> {
    teacher.check_aligned(student)?;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = T::lit(rho * tv.as_f64() + (1.0 - rho) * sv.as_f64());
        }
    }
    Ok(())
}

/// The EMA teacher. Always evaluated in eval mode and never differentiated.
#[derive(Clone, Debug)]
pub struct TeacherState<T> {
    pub model: Model<T>,
    pub ema_decay: f64,
}

impl<T: Float> TeacherState<T> {
    /// Starts the teacher as an exact copy of the student.
    pub fn from_student(student: &Model<T>, ema_decay: f64) -> Result<Self> {
        let mut model = student.clone();
        model.set_mode(Mode::Eval)?;
        model.store.zero_grad();
        Ok(TeacherState { model, ema_decay })
    }

    pub fn update(&mut self, student: &Model<T>) -> Result<()> {
        ema_update(&mut self.model.store, &student.store, self.ema_decay)
    }

    /// Detached teacher logits.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.logits(images, &mut ForwardCtx::default())
    }
}

/// Batch-mean cross-entropy against one-hot or mixed targets.
pub fn ce_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    g.soft_target_nll(logp, targets)
}

/// The two terms of the distillation loss, both on the tape.
#[derive(Clone, Copy, Debug)]
pub struct MesaTerms {
    pub total: Var,
    pub ce: Var,
    pub kl: Option<Var>,
}

/// `CE(student, y) + kd_weight * KL(softmax(teacher/t) || softmax(student/t))`,
/// averaged over the batch. The teacher logits enter as constants.
pub fn mesa_loss<T: Float>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<MesaTerms> {
    cfg.validate()?;
    if g.shape(student_logits) != teacher_logits.shape() {
        return Err(Error::shape("mesa_loss", g.shape(student_logits), teacher_logits.shape()));
    }
    let ce = ce_loss(g, student_logits, targets)?;
    if cfg.kd_weight == 0.0 {
        return Ok(MesaTerms { total: ce, ce, kl: None });
    }
    let inv_t = T::lit(1.0 / cfg.temperature);
    let classes = teacher_logits.shape()[1];
    let soft_teacher = teacher_logits.map(|v| inv_t * v);
    let target_logp = Tensor::new(teacher_logits.shape().to_vec(), log_softmax_rows(soft_teacher.data(), classes))?;
    let soft_student = g.scale(student_logits, inv_t);
    let logq = g.log_softmax(soft_student)?;
    let kl = g.kl_div(logq, &target_logp, !cfg.kl_literal_order)?;
    let weight = if cfg.scale_by_t2 {
        cfg.kd_weight * cfg.temperature * cfg.temperature
    } else {
        cfg.kd_weight
    };
    let weighted = g.scale(kl, T::lit(weight));
    let total = g.add(ce, weighted)?;
    Ok(MesaTerms { total, ce, kl: Some(kl) })
}

/// Runs one forward/backward/update on `student`. Returns the batch loss;
/// a non-finite loss or gradient skips the update and is returned as NaN.
pub fn gradient_step<T, F>(
    student: &mut Model<T>,
    images: &Tensor<T>,
    optimizer: &mut dyn Optimizer<T>,
    lr: f64,
    ctx: &mut ForwardCtx,
    loss_fn: F,
) -> Result<f64>
where
    T: Float,
    F: FnOnce(&mut Graph<T>, Var) -> Result<Var>,
{
    if student.mode() != Mode::Train {
        return Err(Error::WrongMode {
            expected: "training step needs a train-mode student",
        });
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let logits = student.forward(&mut g, x, ctx)?;
    let loss = loss_fn(&mut g, logits)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Ok(f64::NAN);
    }
    student.store.zero_grad();
    g.backward(loss, &mut student.store)?;
    match optimizer.step(&mut student.store, lr) {
        Ok(()) => {}
        Err(Error::NonFiniteGradient(_)) => return Ok(f64::NAN),
        Err(e) => return Err(e),
    }
    let updates = std::mem::take(&mut ctx.bn_updates);
    student.apply_bn_updates(&updates)?;
    Ok(value)
}

/// One plain cross-entropy step.
pub fn ce_train_step<T: Float>(
    student: &mut Model<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
    optimizer: &mut dyn Optimizer<T>,
    lr: f64,
    ctx: &mut ForwardCtx,
) -> Result<f64> {
    gradient_step(student, images, optimizer, lr, ctx, |g, logits| ce_loss(g, logits, targets))
}

/// One distillation step on the student followed by one EMA update of the
/// teacher.
#[allow(clippy::too_many_arguments)]
pub fn mesa_train_step<T: Float>(
    student: &mut Model<T>,
    teacher: &mut TeacherState<T>,
    images: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
    optimizer: &mut dyn Optimizer<T>,
    lr: f64,
    ctx: &mut ForwardCtx,
) -> Result<f64> {
    let teacher_logits = teacher.logits(images)?;
    let loss = gradient_step(student, images, optimizer, lr, ctx, |g, logits| {
        mesa_loss(g, logits, &teacher_logits, targets, cfg).map(|t| t.total)
    })?;
    if loss.is_finite() {
        teacher.update(student)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamKind, ParamStore};

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::DenseWeight, Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn ema_extremes() {
        let student = store(&[0.3, -1.7]);
        let mut t = store(&[5.0, 5.0]);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.by_name("w").unwrap().value.data(), &[5.0, 5.0]);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.by_name("w").unwrap().value.data(), &[0.3, -1.7]);
    }

    #[test]
    fn ema_geometric_series() {
        let student = store(&[1.0]);
        let mut t = store(&[0.0]);
        for k in 1..=30 {
            ema_update(&mut t, &student, 0.9).unwrap();
            let got = t.by_name("w").unwrap().value.data()[0];
            assert!((got - (1.0 - 0.9f64.powi(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut t = store(&[0.0]);
        assert!(ema_update(&mut t, &store(&[0.0, 1.0]), 0.5).is_err());
    }

    fn loss_of(student: &[f64], teacher: &[f64], label: usize, cfg: &DistillConfig) -> (f64, f64) {
        let c = student.len();
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::new(vec![1, c], student.to_vec()).unwrap());
        let t = Tensor::new(vec![1, c], teacher.to_vec()).unwrap();
        let y = Tensor::from_fn(vec![1, c], |i| if i == label { 1.0 } else { 0.0 }).unwrap();
        let terms = mesa_loss(&mut g, s, &t, &y, cfg).unwrap();
        (
            g.value(terms.total).item().unwrap(),
            g.value(terms.ce).item().unwrap(),
        )
    }

    #[test]
    fn identical_logits_give_zero_kl() {
        let cfg = DistillConfig::default();
        let logits = [0.3, -2.0, 1.7, 0.01];
        let (total, ce) = loss_of(&logits, &logits, 2, &cfg);
        assert_eq!(total, ce);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (total, _) = loss_of(&[0.0; 5], &[0.0; 5], 1, &DistillConfig::default());
        assert!((total - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_suppresses_kl() {
        let cfg = DistillConfig {
            temperature: 1e6,
            ..Default::default()
        };
        let (total, ce) = loss_of(&[2.0, -1.0, 0.5], &[-3.0, 4.0, 0.0], 0, &cfg);
        assert!((total - ce).abs() < 1e-6);
    }

    #[test]
    fn kl_term_nonnegative_both_orders() {
        for literal in [false, true] {
            let cfg = DistillConfig {
                kl_literal_order: literal,
                temperature: 2.0,
                ..Default::default()
            };
            let (total, ce) = loss_of(&[2.0, -1.0, 0.5], &[-3.0, 4.0, 0.0], 0, &cfg);
            assert!(total - ce > 0.0);
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        let cfg = DistillConfig {
            temperature: 0.0,
            ..Default::default()
        };
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::zeros(vec![1, 2]).unwrap());
        let t = Tensor::zeros(vec![1, 2]).unwrap();
        assert!(mesa_loss(&mut g, s, &t, &t, &cfg).is_err());
    }
}
