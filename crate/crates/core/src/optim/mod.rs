//! Update rules: momentum SGD with weight decay, the two delay-compensated
//! variants (constant and adaptive coefficient), and the MeanSquare moving
//! average that drives the adaptive one.
//!
//! With `g = g(w_base)` the gradient computed at stale weights and `w_cur` the
//! weights being updated, the compensated step is
//!
//! ```text
//! w_cur ← w_cur − lr · ( g + c ⊙ g ⊙ g ⊙ (w_cur − w_base) )
//! ```
//!
//! where `c = λ` (constant) or `c = λ / sqrt(MeanSquare + ε)` (adaptive).

mod schedule;

pub use schedule::{LrKind, LrSchedule};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Denominator guard for the adaptive coefficient.
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub eta: f64,
    pub lambda: f64,
    pub ms_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta: 0.1,
            lambda: 0.0,
            ms_decay: 0.95,
            momentum: 0.0,
            weight_decay: 0.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config_field(name, msg.to_string()))
            }
        };
        field("eta", self.eta > 0.0 && self.eta.is_finite(), "must be > 0")?;
        field(
            "lambda",
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "must be >= 0",
        )?;
        field(
            "ms_decay",
            (0.0..1.0).contains(&self.ms_decay),
            "must lie in [0, 1)",
        )?;
        field(
            "momentum",
            (0.0..1.0).contains(&self.momentum),
            "must lie in [0, 1)",
        )?;
        field(
            "weight_decay",
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "must be >= 0",
        )?;
        field(
            "epsilon",
            self.epsilon > 0.0 && self.epsilon.is_finite(),
            "must be > 0",
        )
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr >= 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::config_field(
            "lr",
            format!("learning rate {lr} must be finite and >= 0"),
        ))
    }
}

/// Velocity buffer for momentum SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: ParamStore,
}

impl MomentumState {
    pub fn new(template: &ParamStore) -> Self {
        MomentumState {
            velocity: template.zeros_like(),
        }
    }
}

/// Exponential moving average of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSquareState {
    pub ms: ParamStore,
}

impl MeanSquareState {
    pub fn new(template: &ParamStore) -> Self {
        MeanSquareState {
            ms: template.zeros_like(),
        }
    }
}

/// Inputs to a compensated update: the gradient `g` was computed at
/// `w_base`; `w_cur` is `delay` rounds fresher and is updated in place.
#[derive(Debug)]
pub struct LocalUpdateContext<'a> {
    pub w_base: &'a ParamStore,
    pub w_cur: &'a mut ParamStore,
    pub g: &'a ParamStore,
    pub delay: u32,
}

impl<'a> LocalUpdateContext<'a> {
    pub fn new(
        w_base: &'a ParamStore,
        w_cur: &'a mut ParamStore,
        g: &'a ParamStore,
        delay: u32,
    ) -> Result<Self> {
        w_base.check_compatible(w_cur)?;
        w_base.check_compatible(g)?;
        if delay == 0 {
            return Err(Error::config_field("delay", "delay must be >= 1"));
        }
        Ok(LocalUpdateContext {
            w_base,
            w_cur,
            g,
            delay,
        })
    }
}

/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
pub fn sgd_momentum_update(
    w: &mut ParamStore,
    g: &ParamStore,
    hp: &HyperParams,
    st: &mut MomentumState,
    lr: f64,
) -> Result<()> {
    check_lr(lr)?;
    w.check_compatible(g)?;
    w.check_compatible(&st.velocity)?;
    for (((_, w), (_, g)), (_, v)) in w.iter_mut().zip(g.iter()).zip(st.velocity.iter_mut()) {
        let (w, g, v) = (w.data_mut(), g.data(), v.data_mut());
        for i in 0..w.len() {
            v[i] = hp.momentum * v[i] + (g[i] + hp.weight_decay * w[i]);
            w[i] -= lr * v[i];
        }
    }
    w.ensure_finite()?;
    st.velocity.ensure_finite()
}

/// Constant-coefficient delay compensation.
pub fn dcasgd_c_update(ctx: LocalUpdateContext<'_>, hp: &HyperParams, lr: f64) -> Result<()> {
    check_lr(lr)?;
    let lambda = hp.lambda;
    compensated_step(ctx, lr, |_, _| lambda)
}

/// `ms ← m·ms + (1−m)·g⊙g`.
pub fn mean_square_step(st: &mut MeanSquareState, g: &ParamStore, hp: &HyperParams) -> Result<()> {
    if !(0.0..1.0).contains(&hp.ms_decay) {
        return Err(Error::config_field("ms_decay", "must lie in [0, 1)"));
    }
    st.ms.check_compatible(g)?;
    let m = hp.ms_decay;
    for ((_, ms), (_, g)) in st.ms.iter_mut().zip(g.iter()) {
        for (s, &gi) in ms.data_mut().iter_mut().zip(g.data()) {
            *s = m * *s + (1.0 - m) * gi * gi;
        }
    }
    st.ms.ensure_finite()
}

/// Adaptive-coefficient delay compensation. `st` must already include the
/// current gradient (call [`mean_square_step`] first).
pub fn dcasgd_a_update(
    ctx: LocalUpdateContext<'_>,
    hp: &HyperParams,
    st: &MeanSquareState,
    lr: f64,
) -> Result<()> {
    check_lr(lr)?;
    if hp.epsilon <= 0.0 {
        return Err(Error::config_field("epsilon", "must be > 0"));
    }
    ctx.w_cur.check_compatible(&st.ms)?;
    let (lambda, eps) = (hp.lambda, hp.epsilon);
    let ms = &st.ms;
    compensated_step(ctx, lr, |key, i| {
        let s = ms.get(key).expect("compatible").data()[i];
        lambda / (s + eps).sqrt()
    })
}

fn compensated_step(
    ctx: LocalUpdateContext<'_>,
    lr: f64,
    coeff: impl Fn(crate::tensor::ParamKey, usize) -> f64,
) -> Result<()> {
    let LocalUpdateContext {
        w_base, w_cur, g, ..
    } = ctx;
    for (((key, w), (_, base)), (_, g)) in w_cur.iter_mut().zip(w_base.iter()).zip(g.iter()) {
        let (w, base, g) = (w.data_mut(), base.data(), g.data());
        for i in 0..w.len() {
            let gap = w[i] - base[i];
            w[i] -= lr * (g[i] + coeff(key, i) * g[i] * g[i] * gap);
        }
    }
    w_cur.ensure_finite()
}

/// Which update rule a server or worker runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdaterKind {
    /// Leaves the weights untouched.
    None,
    Sgd,
    DcAsgdC,
    DcAsgdA,
}

impl std::str::FromStr for UpdaterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "none" | "identity" => Ok(UpdaterKind::None),
            "sgd" => Ok(UpdaterKind::Sgd),
            "dcasgd-c" | "dc-asgd-c" => Ok(UpdaterKind::DcAsgdC),
            "dcasgd-a" | "dc-asgd-a" => Ok(UpdaterKind::DcAsgdA),
            other => Err(Error::config(format!("unknown updater `{other}`"))),
        }
    }
}

/// An update rule together with its hyperparameters and accumulators.
#[derive(Debug, Clone)]
pub struct UpdaterState {
    pub kind: UpdaterKind,
    pub hp: HyperParams,
    momentum: MomentumState,
    mean_square: MeanSquareState,
}

impl UpdaterState {
    pub fn new(kind: UpdaterKind, hp: HyperParams, template: &ParamStore) -> Result<Self> {
        hp.validate()?;
        Ok(UpdaterState {
            kind,
            hp,
            momentum: MomentumState::new(template),
            mean_square: MeanSquareState::new(template),
        })
    }

    pub fn mean_square(&self) -> &MeanSquareState {
        &self.mean_square
    }

    /// Applies one step to `w_cur` with gradient `g`, which was computed at
    /// `w_base`. Plain SGD ignores `w_base`.
    pub fn apply(
        &mut self,
        w_cur: &mut ParamStore,
        w_base: &ParamStore,
        g: &ParamStore,
        lr: f64,
    ) -> Result<()> {
        match self.kind {
            UpdaterKind::None => w_cur.check_compatible(g),
            UpdaterKind::Sgd => sgd_momentum_update(w_cur, g, &self.hp, &mut self.momentum, lr),
            UpdaterKind::DcAsgdC => {
                dcasgd_c_update(LocalUpdateContext::new(w_base, w_cur, g, 1)?, &self.hp, lr)
            }
            UpdaterKind::DcAsgdA => {
                mean_square_step(&mut self.mean_square, g, &self.hp)?;
                dcasgd_a_update(
                    LocalUpdateContext::new(w_base, w_cur, g, 1)?,
                    &self.hp,
                    &self.mean_square,
                    lr,
                )
            }
        }
    }
}
