//! Desk-scale classifiers with exact analytic gradients.
//!
//! Two models are provided: multinomial softmax regression and a
//! one-hidden-layer `tanh` network. Loss is the mean cross-entropy over the
//! batch.

pub mod data;
pub mod idx;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use data::{gen_synthetic, Batch, BatchPlan, Dataset};
pub use idx::load_idx;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ParamKey, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SoftmaxRegression,
    /// One `tanh` hidden layer of the given width.
    Mlp1 {
        hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input dimension.
    pub d: usize,
    /// Number of classes.
    pub k: usize,
}

/// Mean batch loss together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamStore,
}

impl ModelSpec {
    pub fn softmax(d: usize, k: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            d,
            k,
        }
    }

    pub fn mlp(d: usize, hidden: usize, k: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1 { hidden },
            d,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config_field("model.d", "must be >= 1"));
        }
        if self.k < 2 {
            return Err(Error::config_field("model.k", "must be >= 2"));
        }
        if let ModelKind::Mlp1 { hidden: 0 } = self.kind {
            return Err(Error::config_field("model.hidden", "must be >= 1"));
        }
        Ok(())
    }

    /// Parameter keys and shapes, in key order.
    ///
    /// Softmax: `k0 = W [k,d]`, `k1 = b [k]`. MLP: `k0 = W1 [h,d]`,
    /// `k1 = b1 [h]`, `k2 = W2 [k,h]`, `k3 = b2 [k]`.
    pub fn layout(&self) -> Vec<(ParamKey, Vec<usize>)> {
        match self.kind {
            ModelKind::SoftmaxRegression => vec![
                (ParamKey(0), vec![self.k, self.d]),
                (ParamKey(1), vec![self.k]),
            ],
            ModelKind::Mlp1 { hidden } => vec![
                (ParamKey(0), vec![hidden, self.d]),
                (ParamKey(1), vec![hidden]),
                (ParamKey(2), vec![self.k, hidden]),
                (ParamKey(3), vec![self.k]),
            ],
        }
    }

    pub fn zeros(&self) -> ParamStore {
        self.layout()
            .into_iter()
            .map(|(k, s)| (k, DenseTensor::zeros(&s)))
            .collect()
    }

    /// Seeded initialisation: weight matrices drawn from `N(0, 1/fan_in)`,
    /// biases zero.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layout()
            .into_iter()
            .map(|(key, shape)| {
                let mut t = DenseTensor::zeros(&shape);
                if shape.len() == 2 {
                    let std = (1.0 / shape[1] as f64).sqrt();
                    for v in t.data_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = std * z;
                    }
                }
                (key, t)
            })
            .collect()
    }

    fn check(&self, params: &ParamStore, data: &Dataset) -> Result<()> {
        self.validate()?;
        params.check_compatible(&self.zeros())?;
        if data.d() != self.d || data.k() > self.k {
            return Err(Error::Shape(format!(
                "dataset is {}-dim with {} classes, model expects {}-dim with {}",
                data.d(),
                data.k(),
                self.d,
                self.k
            )));
        }
        Ok(())
    }
}

fn tensor(params: &ParamStore, key: u32) -> &[f64] {
    params
        .get(ParamKey(key))
        .expect("layout checked by ModelSpec::check")
        .data()
}

/// `out = W x + b` for a row-major `rows × x.len()` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Turns logits into probabilities in place and returns `-ln p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let label_shifted = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for p in logits.iter_mut() {
        *p /= sum;
    }
    sum.ln() - label_shifted
}

struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let h = match spec.kind {
            ModelKind::Mlp1 { hidden } => hidden,
            ModelKind::SoftmaxRegression => 0,
        };
        Scratch {
            hidden: vec![0.0; h],
            logits: vec![0.0; spec.k],
        }
    }
}

/// Forward pass for one sample; leaves probabilities in `s.logits` and hidden
/// activations in `s.hidden`. Returns the sample loss.
fn forward_one(spec: &ModelSpec, params: &ParamStore, x: &[f64], y: usize, s: &mut Scratch) -> f64 {
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            affine(tensor(params, 0), tensor(params, 1), x, &mut s.logits);
        }
        ModelKind::Mlp1 { .. } => {
            affine(tensor(params, 0), tensor(params, 1), x, &mut s.hidden);
            s.hidden.iter_mut().for_each(|a| *a = a.tanh());
            affine(
                tensor(params, 2),
                tensor(params, 3),
                &s.hidden,
                &mut s.logits,
            );
        }
    }
    softmax_xent(&mut s.logits, y)
}

fn batch_loss(spec: &ModelSpec, params: &ParamStore, data: &Dataset, batch: &Batch) -> f64 {
    let mut s = Scratch::new(spec);
    let total: f64 = batch
        .indices()
        .iter()
        .map(|&i| forward_one(spec, params, data.row(i), data.label(i), &mut s))
        .sum();
    total / batch.len() as f64
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn forward_backward(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &Dataset,
    batch: &Batch,
) -> Result<LossGrad> {
    spec.check(params, data)?;
    if batch.indices().iter().any(|&i| i >= data.n()) {
        return Err(Error::Shape("batch index out of range for dataset".into()));
    }
    let mut grads = spec.zeros();
    let mut s = Scratch::new(spec);
    let mut dz = vec![0.0; spec.k];
    let mut total = 0.0;

    for &i in batch.indices() {
        let (x, y) = (data.row(i), data.label(i));
        total += forward_one(spec, params, x, y, &mut s);
        dz.copy_from_slice(&s.logits);
        dz[y] -= 1.0;

        match spec.kind {
            ModelKind::SoftmaxRegression => {
                outer_acc(&mut grads, 0, &dz, x);
                vec_acc(&mut grads, 1, &dz);
            }
            ModelKind::Mlp1 { hidden } => {
                outer_acc(&mut grads, 2, &dz, &s.hidden);
                vec_acc(&mut grads, 3, &dz);
                let w2 = tensor(params, 2);
                let mut da = vec![0.0; hidden];
                for (j, a) in da.iter_mut().enumerate() {
                    let back: f64 = (0..spec.k).map(|c| w2[c * hidden + j] * dz[c]).sum();
                    *a = back * (1.0 - s.hidden[j] * s.hidden[j]);
                }
                outer_acc(&mut grads, 0, &da, x);
                vec_acc(&mut grads, 1, &da);
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    grads.scale_in_place(inv)?;
    Ok(LossGrad {
        loss: total * inv,
        grads,
    })
}

fn outer_acc(grads: &mut ParamStore, key: u32, rows: &[f64], cols: &[f64]) {
    let g = grads.get_mut(ParamKey(key)).expect("layout").data_mut();
    let n = cols.len();
    for (r, &a) in rows.iter().enumerate() {
        for (c, &b) in cols.iter().enumerate() {
            g[r * n + c] += a * b;
        }
    }
}

fn vec_acc(grads: &mut ParamStore, key: u32, v: &[f64]) {
    let g = grads.get_mut(ParamKey(key)).expect("layout").data_mut();
    g.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &Dataset,
    batch: &Batch,
    h: f64,
) -> Result<ParamStore> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config_field("h", "step must be positive"));
    }
    spec.check(params, data)?;
    let mut probe = params.clone();
    let mut out = spec.zeros();
    let keys: Vec<ParamKey> = params.keys().collect();
    for key in keys {
        let len = params.get(key).map_or(0, DenseTensor::len);
        for i in 0..len {
            let orig = params.get(key).expect("key").data()[i];
            probe.get_mut(key).expect("key").data_mut()[i] = orig + h;
            let up = batch_loss(spec, &probe, data, batch);
            probe.get_mut(key).expect("key").data_mut()[i] = orig - h;
            let down = batch_loss(spec, &probe, data, batch);
            probe.get_mut(key).expect("key").data_mut()[i] = orig;
            out.get_mut(key).expect("key").data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Top-1 accuracy and mean loss over every row. Argmax ties go to the
/// lowest class index.
pub fn evaluate(spec: &ModelSpec, params: &ParamStore, data: &Dataset) -> Result<(f64, f64)> {
    spec.check(params, data)?;
    let mut s = Scratch::new(spec);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.n() {
        let y = data.label(i);
        loss += forward_one(spec, params, data.row(i), y, &mut s);
        let mut best = 0;
        for (c, &p) in s.logits.iter().enumerate().skip(1) {
            if p > s.logits[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = data.n() as f64;
    Ok((correct as f64 / n, loss / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        gen_synthetic(5, 40, 3, 3, 2.0).unwrap()
    }

    #[test]
    fn zero_softmax_params_give_log_k() {
        let data = gen_synthetic(1, 50, 4, 10, 1.0).unwrap();
        let spec = ModelSpec::softmax(4, 10);
        let lg = forward_backward(
            &spec,
            &spec.zeros(),
            &data,
            &Batch::new(vec![0, 7, 9], 50).unwrap(),
        )
        .unwrap();
        assert!((lg.loss - 10f64.ln()).abs() < 1e-12);
        assert!((lg.loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn loss_is_nonnegative_and_pure() {
        let data = small();
        let spec = ModelSpec::mlp(3, 5, 3);
        let p = spec.init_params(9);
        let b = Batch::full(&data);
        let a = forward_backward(&spec, &p, &data, &b).unwrap();
        let again = forward_backward(&spec, &p, &data, &b).unwrap();
        assert!(a.loss >= 0.0);
        assert_eq!(a, again);
    }

    #[test]
    fn rejects_mismatched_params() {
        let data = small();
        let spec = ModelSpec::softmax(3, 3);
        let wrong = ModelSpec::softmax(4, 3).zeros();
        assert!(matches!(
            forward_backward(&spec, &wrong, &data, &Batch::full(&data)),
            Err(Error::Shape(_))
        ));
        let wide = ModelSpec::softmax(5, 3);
        assert!(matches!(
            forward_backward(&wide, &wide.zeros(), &data, &Batch::full(&data)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn finite_diff_flat_coordinate_is_zero() {
        // Two identical rows with opposite labels: the two bias coordinates
        // of a zero softmax model cancel, and the weight gradient along a
        // zero feature is identically zero.
        let data = Dataset::new(vec![1.0, 0.0, 1.0, 0.0], vec![0, 1], 2, 2).unwrap();
        let spec = ModelSpec::softmax(2, 2);
        let fd = finite_diff_grad(&spec, &spec.zeros(), &data, &Batch::full(&data), 1e-5).unwrap();
        let w = fd.get(ParamKey(0)).unwrap().data();
        assert!(w[1].abs() < 1e-12 && w[3].abs() < 1e-12);
        let b = fd.get(ParamKey(1)).unwrap().data();
        assert!(b[0].abs() < 1e-10 && b[1].abs() < 1e-10);
    }

    #[test]
    fn finite_diff_requires_positive_step() {
        let data = small();
        let spec = ModelSpec::softmax(3, 3);
        assert!(finite_diff_grad(&spec, &spec.zeros(), &data, &Batch::full(&data), 0.0).is_err());
    }

    #[test]
    fn richardson_difference_is_second_order() {
        let data = small();
        let spec = ModelSpec::mlp(3, 4, 3);
        let p = spec.init_params(2);
        let b = Batch::full(&data);
        let exact = forward_backward(&spec, &p, &data, &b).unwrap().grads;
        let g1 = finite_diff_grad(&spec, &p, &data, &b, 1e-3).unwrap();
        let g2 = finite_diff_grad(&spec, &p, &data, &b, 2e-3).unwrap();
        let e1 = g1.max_abs_diff(&exact).unwrap();
        let e2 = g2.max_abs_diff(&exact).unwrap();
        // Doubling h should roughly quadruple the truncation error.
        assert!(e2 > 2.5 * e1 && e2 < 6.0 * e1, "e1={e1} e2={e2}");
    }

    #[test]
    fn evaluate_tie_break_and_single_sample() {
        let data = Dataset::new(vec![0.5, -1.0, 2.0, 0.0], vec![0, 1, 0, 1], 1, 2).unwrap();
        let spec = ModelSpec::softmax(1, 2);
        let (acc, loss) = evaluate(&spec, &spec.zeros(), &data).unwrap();
        assert_eq!(acc, 0.5);
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        let one = Dataset::new(vec![1.0], vec![1], 1, 2).unwrap();
        let mut p = spec.zeros();
        p.get_mut(ParamKey(1)).unwrap().data_mut()[1] = 3.0;
        assert_eq!(evaluate(&spec, &p, &one).unwrap().0, 1.0);
    }
}
