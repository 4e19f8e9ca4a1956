//! Targeted l2 projected gradient descent and strength sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{Classifier, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("target class {target} equals the image's true class")]
    TargetIsLabel { target: usize },
    #[error("class {class} outside the model's {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid attack strength: {0}")]
    InvalidEpsilon(String),
    #[error("non-finite gradient at PGD step {step} (image {image_id}, eps {epsilon})")]
    NonFiniteGradient {
        step: usize,
        image_id: usize,
        epsilon: Epsilon,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// An l2 attack strength, held exactly in millionths.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Epsilon(u32);

impl Epsilon {
    pub const ZERO: Epsilon = Epsilon(0);
    const SCALE: f64 = 1e6;

    /// Rounds to the nearest millionth; rejects negative or non-finite values.
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(AttackError::InvalidEpsilon(format!("{value} is not a finite non-negative number")));
        }
        let micros = (value * Self::SCALE).round();
        if micros > f64::from(u32::MAX) {
            return Err(AttackError::InvalidEpsilon(format!("{value} is too large")));
        }
        Ok(Self(micros as u32))
    }

    pub const fn from_micros(micros: u32) -> Self {
        Self(micros)
    }

    pub fn micros(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / Self::SCALE
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Inclusive arithmetic range `start, start + step, ..., end`.
    ///
    /// Rejects an empty or degenerate range (`end <= start` or `step <= 0`).
    pub fn range(start: f64, end: f64, step: f64) -> Result<Vec<Self>> {
        let (s, e, st) = (Self::new(start)?, Self::new(end)?, Self::new(step)?);
        if st.0 == 0 || e.0 <= s.0 {
            return Err(AttackError::InvalidEpsilon(format!(
                "empty range {start}:{end}:{step}"
            )));
        }
        Ok((s.0..=e.0).step_by(st.0 as usize).map(Self).collect())
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

impl fmt::Debug for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ε{self}")
    }
}

impl FromStr for Epsilon {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| AttackError::InvalidEpsilon(format!("{s:?} is not a number")))?;
        Self::new(v)
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Epsilon::new(v).map_err(serde::de::Error::custom)
    }
}

/// The ten default strengths 0.05, 0.10, ..., 0.50 preceded by 0 (no attack).
pub fn default_epsilons() -> Vec<Epsilon> {
    (0..=10).map(|i| Epsilon::from_micros(i * 50_000)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target: usize,
    pub epsilons: Vec<Epsilon>,
    pub steps: usize,
    /// Step size is `step_factor * ε / steps`.
    pub step_factor: f64,
    /// Seed for a uniform random start inside the ε-ball; `None` starts at δ = 0.
    pub random_start: Option<u64>,
    pub max_epsilon: Epsilon,
}

impl AttackConfig {
    pub fn new(target: usize) -> Self {
        Self {
            target,
            epsilons: default_epsilons(),
            steps: 40,
            step_factor: 2.5,
            random_start: None,
            max_epsilon: Epsilon::from_micros(500_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(AttackError::InvalidEpsilon("no strengths given".into()));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AttackError::InvalidEpsilon("strengths must be strictly ascending".into()));
        }
        if let Some(max) = self.epsilons.last().filter(|&&e| e > self.max_epsilon) {
            return Err(AttackError::InvalidEpsilon(format!(
                "{max} exceeds the configured maximum {}",
                self.max_epsilon
            )));
        }
        if !(self.step_factor.is_finite() && self.step_factor > 0.0) {
            return Err(AttackError::InvalidEpsilon("step factor must be positive".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, epsilon: Epsilon) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.step_factor * epsilon.as_f64() / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub image_id: usize,
    pub epsilon: Epsilon,
    pub adversarial: Tensor,
    pub delta_norm: f64,
    pub predicted: usize,
    pub success: bool,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` back onto the ε-ball if it lies outside; the identity otherwise.
pub fn project_l2(delta: &mut [f64], epsilon: f64) {
    let norm = l2(delta);
    if norm > epsilon {
        let scale = if norm > 0.0 { epsilon / norm } else { 0.0 };
        delta.iter_mut().for_each(|d| *d *= scale);
    }
}

/// `clip(x0 + delta, 0, 1)` as an image.
fn apply(x0: &[f32], delta: &[f64], shape: &[usize]) -> Tensor {
    let data = x0
        .iter()
        .zip(delta)
        .map(|(&x, &d)| ((f64::from(x) + d) as f32).clamp(0.0, 1.0))
        .collect();
    Tensor::new(shape, data).expect("finite image")
}

/// Targeted l2 PGD toward `config.target`.
///
/// Each iterate steps against the unit-normalized cross-entropy gradient,
/// projects the perturbation onto the ε-ball and clips pixels to `[0, 1]`.
/// A zero gradient produces a zero step. Success is judged on the final
/// iterate only. ε = 0 returns the unmodified image.
pub fn pgd_targeted(
    model: &impl Classifier,
    image: &Tensor,
    label: usize,
    image_id: usize,
    config: &AttackConfig,
    epsilon: Epsilon,
) -> Result<AttackResult> {
    let classes = model.num_classes();
    for class in [label, config.target] {
        if class >= classes {
            return Err(AttackError::ClassOutOfRange { class, classes });
        }
    }
    if label == config.target {
        return Err(AttackError::TargetIsLabel { target: config.target });
    }
    let x0 = image.data();
    let eps = epsilon.as_f64();
    let alpha = config.step_size(epsilon);
    let mut delta = vec![0f64; x0.len()];
    if let Some(seed) = config.random_start.filter(|_| !epsilon.is_zero()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(image_id as u64);
        delta.iter_mut().for_each(|d| *d = rng.sample::<f64, _>(StandardNormal));
        let norm = l2(&delta);
        // Uniform in the ball: radius ∝ u^(1/n).
        let radius = eps * rng.random::<f64>().powf(1.0 / delta.len() as f64);
        delta.iter_mut().for_each(|d| *d *= radius / norm);
    }
    let mut x = apply(x0, &delta, image.shape());

    if !epsilon.is_zero() {
        for step in 0..config.steps {
            let (_, grad) = model
                .loss_and_input_gradient(&x, config.target)
                .map_err(|e| match e {
                    ModelError::Tensor(TensorError::NonFinite { .. }) => AttackError::NonFiniteGradient {
                        step,
                        image_id,
                        epsilon,
                    },
                    other => other.into(),
                })?;
            let g: Vec<f64> = grad.data().iter().map(|&v| f64::from(v)).collect();
            let gnorm = l2(&g);
            if !gnorm.is_finite() {
                return Err(AttackError::NonFiniteGradient {
                    step,
                    image_id,
                    epsilon,
                });
            }
            if gnorm == 0.0 {
                continue;
            }
            let xs = x.data();
            for (((d, &xk), &x0i), &gi) in delta.iter_mut().zip(xs).zip(x0).zip(&g) {
                *d = f64::from(xk) - alpha * gi / gnorm - f64::from(x0i);
            }
            project_l2(&mut delta, eps);
            x = apply(x0, &delta, image.shape());
        }
    }

    let predicted = model.predict(&x)?;
    let delta_norm = x0
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| (f64::from(b) - f64::from(a)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(AttackResult {
        image_id,
        epsilon,
        adversarial: x,
        delta_norm,
        predicted,
        success: predicted == config.target,
    })
}

/// Every attack of every `(image, ε)` pair, grouped by ε in image order.
pub fn sweep_all(
    model: &impl Classifier,
    images: &[(usize, &Tensor)],
    label: usize,
    config: &AttackConfig,
) -> Result<BTreeMap<Epsilon, Vec<AttackResult>>> {
    config.validate()?;
    let jobs: Vec<(Epsilon, usize, &Tensor)> = config
        .epsilons
        .iter()
        .flat_map(|&e| images.iter().map(move |&(id, img)| (e, id, img)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(e, id, img)| pgd_targeted(model, img, label, id, config, e))
        .collect::<Result<Vec<_>>>()?;
    let mut out: BTreeMap<Epsilon, Vec<AttackResult>> = config.epsilons.iter().map(|&e| (e, Vec::new())).collect();
    for r in results {
        out.get_mut(&r.epsilon).expect("configured strength").push(r);
    }
    Ok(out)
}

/// Successful attacks per ε. Strengths with no success map to an empty list.
pub fn sweep(
    model: &impl Classifier,
    images: &[(usize, &Tensor)],
    label: usize,
    config: &AttackConfig,
) -> Result<BTreeMap<Epsilon, Vec<AttackResult>>> {
    Ok(successes(sweep_all(model, images, label, config)?))
}

pub fn successes(all: BTreeMap<Epsilon, Vec<AttackResult>>) -> BTreeMap<Epsilon, Vec<AttackResult>> {
    all.into_iter()
        .map(|(e, rs)| (e, rs.into_iter().filter(|r| r.success).collect()))
        .collect()
}

/// `{ "0.050000": v, ... }` in ascending strength order.
pub mod eps_map {
    use std::collections::BTreeMap;

    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Epsilon;

    pub fn serialize<S: Serializer, V: Serialize>(map: &BTreeMap<Epsilon, V>, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(map.len()))?;
        for (e, v) in map {
            m.serialize_entry(&e.to_string(), v)?;
        }
        m.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>, V: Deserialize<'de>>(d: D) -> Result<BTreeMap<Epsilon, V>, D::Error> {
        let raw = BTreeMap::<String, V>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let e: Epsilon = k
                    .parse()
                    .map_err(|_| serde::de::Error::custom(format!("invalid strength key {k:?}")))?;
                if e.to_string() != k {
                    return Err(serde::de::Error::custom(format!("strength key {k:?} is not in 6-decimal form")));
                }
                Ok((e, v))
            })
            .collect()
    }
}
