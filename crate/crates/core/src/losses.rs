//! Cross-entropy, softened-score distillation, attention transfer, and the
//! combined student objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Var};
use crate::error::{Error, Result};
use crate::similarity::{paired, sp_loss, LayerPairSet, Taps};
use crate::tensor::{Float, Tensor};

/// Which distillation terms are added to the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "kd")]
    Kd,
    #[serde(rename = "at")]
    At,
    #[serde(rename = "sp")]
    Sp,
    #[serde(rename = "kd+sp")]
    KdSp,
    #[serde(rename = "at+sp")]
    AtSp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Kd,
        Method::At,
        Method::Sp,
        Method::KdSp,
        Method::AtSp,
    ];

    pub fn uses_kd(self) -> bool {
        matches!(self, Method::Kd | Method::KdSp)
    }

    pub fn uses_at(self) -> bool {
        matches!(self, Method::At | Method::AtSp)
    }

    pub fn uses_sp(self) -> bool {
        matches!(self, Method::Sp | Method::KdSp | Method::AtSp)
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Kd => "kd",
            Method::At => "at",
            Method::Sp => "sp",
            Method::KdSp => "kd+sp",
            Method::AtSp => "at+sp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown distillation method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    pub alpha: f64,
    pub temperature: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Layer pairs for the similarity-preserving term.
    pub pairs: LayerPairSet,
    /// Layer pairs for attention transfer (one per stage by default).
    pub at_pairs: LayerPairSet,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Sp,
            alpha: 0.9,
            temperature: 4.0,
            beta: 1000.0,
            gamma: 3000.0,
            pairs: LayerPairSet::default(),
            at_pairs: LayerPairSet(
                (1..=3)
                    .map(|s| (format!("stage{s}.last"), format!("stage{s}.last")))
                    .collect(),
            ),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha must be at most 1, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.method.uses_sp() && self.pairs.is_empty() {
            return Err(Error::Config("sp method needs at least one layer pair".into()));
        }
        if self.method.uses_at() && self.at_pairs.is_empty() {
            return Err(Error::Config("at method needs at least one layer pair".into()));
        }
        Ok(())
    }

    /// Teacher tap ids needed by the configured terms.
    pub fn teacher_taps(&self) -> Vec<String> {
        self.taps(|p| p.teacher_ids())
    }

    pub fn student_taps(&self) -> Vec<String> {
        self.taps(|p| p.student_ids())
    }

    fn taps(&self, side: impl Fn(&LayerPairSet) -> Vec<String>) -> Vec<String> {
        let mut ids = Vec::new();
        if self.method.uses_sp() {
            ids.extend(side(&self.pairs));
        }
        if self.method.uses_at() {
            ids.extend(side(&self.at_pairs));
        }
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Ground-truth class indices for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(LabelBatch { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn one_hot<T: Float>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.labels.len(), self.num_classes]);
        for (i, &y) in self.labels.iter().enumerate() {
            t.data_mut()[i * self.num_classes + y] = T::ONE;
        }
        t
    }
}

fn check_logits<T: Float>(z: &Var<'_, T>, y: &LabelBatch) -> Result<()> {
    let s = z.shape();
    if s != [y.len(), y.num_classes()] {
        return Err(Error::Shape(format!(
            "logits {s:?} do not match {} labels over {} classes",
            y.len(),
            y.num_classes()
        )));
    }
    if !z.value().all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Batch mean of `-log softmax(z)[y]`.
pub fn ce_loss<'g, T: Float>(z: &Var<'g, T>, y: &LabelBatch) -> Result<Var<'g, T>> {
    check_logits(z, y)?;
    let target = z.graph().constant(y.one_hot());
    let picked = z.log_softmax(1.0)?.mul(&target)?.sum();
    Ok(picked.scale(-1.0 / y.len() as f64))
}

/// Batch mean of the cross-entropy of the student's tempered distribution
/// against the teacher's tempered distribution, which serves as the target.
pub fn soft_ce<'g, T: Float>(z_s: &Var<'g, T>, z_t: &Var<'g, T>, temperature: f64) -> Result<Var<'g, T>> {
    let (zs, zt) = (z_s.shape(), z_t.shape());
    if zs != zt || zs.len() != 2 {
        return Err(Error::Shape(format!("student logits {zs:?} vs teacher logits {zt:?}")));
    }
    let teacher = z_t.value();
    if !teacher.all_finite() {
        return Err(Error::Numeric("non-finite teacher logits".into()));
    }
    let p_t = Tensor::from_parts(zt.clone(), softmax_rows(teacher.data(), zt[0], zt[1], temperature));
    let target = z_s.graph().constant(p_t);
    let cross = z_s.log_softmax(temperature)?.mul(&target)?.sum();
    Ok(cross.scale(-1.0 / zs[0] as f64))
}

/// `(1 − α)·CE(y, σ(z_S)) + 2αT²·CE(σ(z_S/T), σ(z_T/T))`.
pub fn kd_loss<'g, T: Float>(
    z_s: &Var<'g, T>,
    z_t: &Var<'g, T>,
    y: &LabelBatch,
    alpha: f64,
    temperature: f64,
) -> Result<Var<'g, T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let ce = ce_loss(z_s, y)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let soft = soft_ce(z_s, z_t, temperature)?.scale(2.0 * alpha * temperature * temperature);
    if alpha == 1.0 {
        return Ok(soft);
    }
    ce.scale(1.0 - alpha).add(&soft)
}

/// Per-sample spatial attention: channel-summed squares, flattened and L2-normalized.
pub fn attention_map<'g, T: Float>(a: &Var<'g, T>) -> Result<Var<'g, T>> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("attention map needs a b×c×h×w tensor, got {s:?}")));
    }
    a.square().sum_axis(1)?.reshape(&[s[0], s[2] * s[3]])?.row_l2_normalize()
}

/// `Σ_pairs mean_batch ‖â_S − â_T‖₂` (unweighted).
pub fn at_loss<'g, T: Float>(
    teacher_taps: &Taps<'g, T>,
    student_taps: &Taps<'g, T>,
    pairs: &LayerPairSet,
) -> Result<Var<'g, T>> {
    let (_, pairs) = paired(teacher_taps, student_taps, pairs)?;
    let mut total: Option<Var<'g, T>> = None;
    for (layer, t, s) in pairs {
        let (ts, ss) = (t.shape(), s.shape());
        if ts.len() != 4 || ss.len() != 4 || ts[2..] != ss[2..] {
            return Err(Error::Config(format!(
                "attention transfer at {layer:?} compares maps of spatial size {:?} and {:?}; tap layers of equal resolution",
                &ts[2.min(ts.len())..],
                &ss[2.min(ss.len())..]
            )));
        }
        let term = attention_map(t)?.sub(&attention_map(s)?)?.row_norm()?.mean();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("paired() rejects empty sets"))
}

/// Loss components for one step; unused terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g, T: Float> {
    pub total: Var<'g, T>,
    pub ce: Var<'g, T>,
    pub kd: Option<Var<'g, T>>,
    pub at: Option<Var<'g, T>>,
    pub sp: Option<Var<'g, T>>,
}

/// The student's training objective for the configured method.
///
/// `z_t` and `teacher_taps` are only consulted by methods that need them.
pub fn total_loss<'g, T: Float>(
    z_s: &Var<'g, T>,
    z_t: Option<&Var<'g, T>>,
    y: &LabelBatch,
    teacher_taps: &Taps<'g, T>,
    student_taps: &Taps<'g, T>,
    cfg: &DistillConfig,
) -> Result<LossTerms<'g, T>> {
    cfg.validate()?;
    let method = cfg.method;
    let ce = ce_loss(z_s, y)?;
    let mut terms = LossTerms {
        total: ce,
        ce,
        kd: None,
        at: None,
        sp: None,
    };

    if method.uses_kd() {
        let z_t = z_t.ok_or_else(|| Error::Config("kd needs teacher logits".into()))?;
        // the kd objective replaces the plain cross-entropy term
        let kd = kd_loss(z_s, z_t, y, cfg.alpha, cfg.temperature)?;
        terms.kd = Some(soft_ce(z_s, z_t, cfg.temperature)?);
        terms.total = kd;
    }
    if method.uses_at() {
        let at = at_loss(teacher_taps, student_taps, &cfg.at_pairs)?;
        terms.at = Some(at);
        if cfg.beta != 0.0 {
            terms.total = terms.total.add(&at.scale(cfg.beta))?;
        }
    }
    if method.uses_sp() {
        let sp = sp_loss(teacher_taps, student_taps, &cfg.pairs)?;
        terms.sp = Some(sp);
        if cfg.gamma != 0.0 {
            terms.total = terms.total.add(&sp.scale(cfg.gamma))?;
        }
    }
    Ok(terms)
}
