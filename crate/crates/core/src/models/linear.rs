//! SGD-trained linear classifiers: hinge loss (linear SVM) and log loss
//! (logistic regression).

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

use super::check_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hinge,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta0: f64 },
    /// `eta0 / (1 + decay · t)` where `t` counts SGD steps taken so far.
    InverseScaling { eta0: f64, decay: f64 },
}

impl LearningRate {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LearningRate::Constant { eta0 } => eta0,
            LearningRate::InverseScaling { eta0, decay } => eta0 / (1.0 + decay * step as f64),
        }
    }

    fn eta0(&self) -> f64 {
        match *self {
            LearningRate::Constant { eta0 } | LearningRate::InverseScaling { eta0, .. } => eta0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub learning_rate: LearningRate,
    pub l2: f64,
    pub epochs: usize,
}

impl Default for SgdHyper {
    fn default() -> Self {
        Self {
            learning_rate: LearningRate::Constant { eta0: 0.01 },
            l2: 1e-4,
            epochs: 1,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.eta0() > 0.0) {
            return Err(Error::Config("learning rate eta0 must be positive".into()));
        }
        if let LearningRate::InverseScaling { decay, .. } = self.learning_rate {
            if !(decay >= 0.0) {
                return Err(Error::Config("learning rate decay must be >= 0".into()));
            }
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 regularization must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs per batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weight vector and bias shared between federation peers.
///
/// Floats are encoded as fixed-width decimal strings, so the serialized size
/// depends only on the dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub loss_kind: LossKind,
    #[serde(with = "fixed_width::vec")]
    pub weights: Vec<f64>,
    #[serde(with = "fixed_width::scalar")]
    pub bias: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LinearModel {
    /// Zero weights and zero bias.
    pub fn new(dimension: usize, loss_kind: LossKind) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        Ok(Self {
            loss_kind,
            weights: vec![0.0; dimension],
            bias: 0.0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.dimension())?;
        Ok(self.raw_decision(x))
    }

    fn raw_decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Malicious iff the decision value is strictly positive.
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(if self.decision(x)? > 0.0 {
            Label::Malicious
        } else {
            Label::Benign
        })
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(x)?))
    }

    /// Runs `hyper.epochs` SGD passes over `batch` in order, starting the
    /// learning-rate schedule at step 0.
    pub fn partial_fit(&self, batch: &[(&[f64], Label)], hyper: &SgdHyper) -> Result<Self> {
        self.partial_fit_from(batch, hyper, 0).map(|(m, _)| m)
    }

    /// As [`partial_fit`](Self::partial_fit) with the schedule starting at
    /// `start_step`; also returns the step count after the last update.
    pub fn partial_fit_from(
        &self,
        batch: &[(&[f64], Label)],
        hyper: &SgdHyper,
        start_step: u64,
    ) -> Result<(Self, u64)> {
        hyper.validate()?;
        for (x, _) in batch {
            check_input(x, self.dimension())?;
        }
        let mut model = self.clone();
        let mut step = start_step;
        for _ in 0..hyper.epochs {
            for &(x, y) in batch {
                let eta = hyper.learning_rate.at(step);
                match model.loss_kind {
                    LossKind::Hinge => model.hinge_step(x, y, eta, hyper.l2),
                    LossKind::Log => model.log_step(x, y, eta, hyper.l2),
                }
                step += 1;
            }
        }
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok((model, step))
    }

    fn hinge_step(&mut self, x: &[f64], y: Label, eta: f64, l2: f64) {
        let sign = if y.is_malicious() { 1.0 } else { -1.0 };
        let margin = sign * self.raw_decision(x);
        if margin < 1.0 {
            for (w, v) in self.weights.iter_mut().zip(x) {
                *w -= eta * (l2 * *w - sign * v);
            }
            self.bias += eta * sign;
        } else if l2 > 0.0 {
            for w in &mut self.weights {
                *w -= eta * l2 * *w;
            }
        }
    }

    fn log_step(&mut self, x: &[f64], y: Label, eta: f64, l2: f64) {
        let (gw, gb) = self.log_loss_gradient_unchecked(x, y, l2);
        for (w, g) in self.weights.iter_mut().zip(&gw) {
            *w -= eta * g;
        }
        self.bias -= eta * gb;
    }

    /// Regularized log loss of one sample:
    /// `−[y ln σ(z) + (1−y) ln(1−σ(z))] + (λ/2)‖w‖²`.
    pub fn log_loss(&self, x: &[f64], y: Label, l2: f64) -> Result<f64> {
        let z = self.decision(x)?;
        let target = if y.is_malicious() { 1.0 } else { 0.0 };
        let reg: f64 = self.weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
        Ok(softplus(z) - target * z + reg)
    }

    /// Gradient of [`log_loss`](Self::log_loss) with respect to `(w, b)`.
    pub fn log_loss_gradient(&self, x: &[f64], y: Label, l2: f64) -> Result<(Vec<f64>, f64)> {
        check_input(x, self.dimension())?;
        Ok(self.log_loss_gradient_unchecked(x, y, l2))
    }

    fn log_loss_gradient_unchecked(&self, x: &[f64], y: Label, l2: f64) -> (Vec<f64>, f64) {
        let target = if y.is_malicious() { 1.0 } else { 0.0 };
        let residual = sigmoid(self.raw_decision(x)) - target;
        let gw = self
            .weights
            .iter()
            .zip(x)
            .map(|(w, v)| residual * v + l2 * w)
            .collect();
        (gw, residual)
    }
}

pub(crate) mod fixed_width {
    //! `±d.dddddddddddddddde±ddd`: 17 significant digits round-trip every
    //! finite f64 exactly.

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(v: f64) -> String {
        let s = format!("{:.16e}", v.abs());
        let (mantissa, exp) = s.split_once('e').expect("exponent present");
        let exp: i32 = exp.parse().expect("integer exponent");
        let sign = if v.is_sign_negative() { '-' } else { '+' };
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{sign}{mantissa}e{esign}{:03}", exp.abs())
    }

    pub fn decode(s: &str) -> Result<f64, String> {
        s.parse::<f64>().map_err(|e| format!("bad number `{s}`: {e}"))
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&encode(*v))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            let s = String::deserialize(d)?;
            decode(&s).map_err(D::Error::custom)
        }
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&encode(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| decode(s).map_err(D::Error::custom))
                .collect()
        }
    }
}
