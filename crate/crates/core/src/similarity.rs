//! Pairwise activation similarity within a mini-batch.
//!
//! Each tapped activation map `b×c×h×w` is flattened to `Q ∈ b×chw`, turned
//! into the Gram matrix `Q·Qᵀ` and row-normalized. The distillation loss is the
//! squared Frobenius distance between teacher and student matrices summed over
//! the configured layer pairs and divided once by `b²`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Activation maps captured during a forward pass, keyed by tap id.
pub type Taps<'g, T> = BTreeMap<String, Var<'g, T>>;

pub const LAST_CONV: &str = "last_conv";

/// Activations reshaped to one row per sample.
#[derive(Debug, Clone)]
pub struct FlattenedActivations<'g, T: Float> {
    pub q: Var<'g, T>,
    pub layer: String,
}

#[derive(Debug, Clone, Copy)]
pub struct GramMatrix<'g, T: Float> {
    pub unnormalized: Var<'g, T>,
    pub normalized: Var<'g, T>,
}

/// Ordered `(teacher_layer, student_layer)` pairs compared by a distillation loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerPairSet(pub Vec<(String, String)>);

impl Default for LayerPairSet {
    fn default() -> Self {
        LayerPairSet::single(LAST_CONV, LAST_CONV)
    }
}

impl LayerPairSet {
    pub fn single(teacher: &str, student: &str) -> Self {
        LayerPairSet(vec![(teacher.to_string(), student.to_string())])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(t, s)| (t.as_str(), s.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn teacher_ids(&self) -> Vec<String> {
        self.0.iter().map(|(t, _)| t.clone()).collect()
    }

    pub fn student_ids(&self) -> Vec<String> {
        self.0.iter().map(|(_, s)| s.clone()).collect()
    }

    /// Every referenced id must be among the given tap lists.
    pub fn validate(&self, teacher_taps: &[String], student_taps: &[String]) -> Result<()> {
        for (t, s) in self.iter() {
            if !teacher_taps.iter().any(|x| x == t) {
                return Err(Error::Config(format!("teacher has no tap named {t:?}")));
            }
            if !student_taps.iter().any(|x| x == s) {
                return Err(Error::Config(format!("student has no tap named {s:?}")));
            }
        }
        Ok(())
    }
}

/// Row-major reshape of a `b×c×h×w` map to `b×(c·h·w)`.
pub fn flatten<'g, T: Float>(a: &Var<'g, T>, layer: &str) -> Result<FlattenedActivations<'g, T>> {
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("flatten: expected a batched map, got {shape:?}")));
    }
    let b = shape[0];
    let rest: usize = shape[1..].iter().product();
    Ok(FlattenedActivations {
        q: a.reshape(&[b, rest])?,
        layer: layer.to_string(),
    })
}

pub fn gram<'g, T: Float>(q: &FlattenedActivations<'g, T>) -> Result<GramMatrix<'g, T>> {
    if !q.q.value().all_finite() {
        return Err(Error::Numeric(format!("non-finite activations at layer {:?}", q.layer)));
    }
    let unnormalized = q.q.matmul(&q.q.transpose()?)?;
    let normalized = unnormalized.row_l2_normalize()?;
    Ok(GramMatrix {
        unnormalized,
        normalized,
    })
}

/// Normalized Gram of a tapped activation map.
pub fn activation_gram<'g, T: Float>(a: &Var<'g, T>, layer: &str) -> Result<GramMatrix<'g, T>> {
    gram(&flatten(a, layer)?)
}

fn lookup<'a, 'g, T: Float>(taps: &'a Taps<'g, T>, id: &str, side: &str) -> Result<&'a Var<'g, T>> {
    taps.get(id)
        .ok_or_else(|| Error::Config(format!("{side} taps are missing layer {id:?}")))
}

/// Layer id with its teacher and student maps.
pub(crate) type Pair<'a, 'g, T> = (&'a str, &'a Var<'g, T>, &'a Var<'g, T>);

pub(crate) fn paired<'a, 'g, T: Float>(
    teacher_taps: &'a Taps<'g, T>,
    student_taps: &'a Taps<'g, T>,
    pairs: &LayerPairSet,
) -> Result<(usize, Vec<Pair<'a, 'g, T>>)> {
    if pairs.is_empty() {
        return Err(Error::Config("layer pair set is empty".into()));
    }
    let mut batch = None;
    let mut out = Vec::new();
    for (t, s) in pairs.iter() {
        let (tv, sv) = (lookup(teacher_taps, t, "teacher")?, lookup(student_taps, s, "student")?);
        let (tb, sb) = (tv.shape()[0], sv.shape()[0]);
        if tb != sb || batch.is_some_and(|b| b != tb) {
            return Err(Error::Shape(format!(
                "batch size mismatch for pair ({t}, {s}): teacher {tb}, student {sb}"
            )));
        }
        batch = Some(tb);
        let (tk, _) = teacher_taps.get_key_value(t).unwrap();
        out.push((tk.as_str(), tv, sv));
    }
    Ok((batch.unwrap(), out))
}

/// `(1/b²) · Σ_pairs ‖G_T − G_S‖²_F`.
///
/// Teacher taps are expected to be constants; gradient reaches the student
/// taps only.
pub fn sp_loss<'g, T: Float>(
    teacher_taps: &Taps<'g, T>,
    student_taps: &Taps<'g, T>,
    pairs: &LayerPairSet,
) -> Result<Var<'g, T>> {
    let (b, pairs) = paired(teacher_taps, student_taps, pairs)?;
    if b < 2 {
        return Err(Error::Config(
            "similarity-preserving loss needs a batch of at least 2 samples".into(),
        ));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (layer, t, s) in pairs {
        let gt = activation_gram(t, layer)?.normalized;
        let gs = activation_gram(s, layer)?.normalized;
        let term = gt.sub(&gs)?.square().sum();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().scale(1.0 / (b * b) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    fn taps<'g>(g: &'g Graph<f64>, id: &str, shape: &[usize], data: &[f64], param: bool) -> Taps<'g, f64> {
        let t = Tensor::from_f64(shape, data).unwrap();
        let v = if param { g.param(t) } else { g.constant(t) };
        [(id.to_string(), v)].into_iter().collect()
    }

    #[test]
    fn flatten_orders_channel_then_row_then_column() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let a = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &data).unwrap());
        let q = flatten(&a, "x").unwrap();
        assert_eq!(q.q.shape(), vec![1, 8]);
        assert_eq!(q.q.value().data(), &data[..]);

        let a = g.constant(Tensor::from_f64(&[2, 1, 1, 1], &[3.0, -1.0]).unwrap());
        let q = flatten(&a, "x").unwrap();
        assert_eq!(q.q.shape(), vec![2, 1]);
    }

    #[test]
    fn gram_of_orthonormal_rows_is_identity() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let gm = gram(&FlattenedActivations { q, layer: "x".into() }).unwrap();
        assert_eq!(gm.unnormalized.value().data(), q.value().data());
        assert_eq!(gm.normalized.value().data(), q.value().data());
    }

    #[test]
    fn gram_hand_values() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 1., 0.]).unwrap());
        let gm = gram(&FlattenedActivations { q, layer: "x".into() }).unwrap();
        assert_eq!(gm.unnormalized.value().data(), &[1., 1., 1., 1.]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for v in gm.normalized.value().data() {
            assert!((v - r).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_rejects_non_finite() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[2, 1], &[f64::INFINITY, 0.]).unwrap());
        assert!(matches!(gram(&FlattenedActivations { q, layer: "x".into() }), Err(Error::Numeric(_))));
    }

    #[test]
    fn hand_computed_two_sample_loss() {
        // teacher rows orthonormal -> G_T = I; student rows parallel -> all entries 1/sqrt(2)
        let g = Graph::<f64>::new();
        let t = taps(&g, LAST_CONV, &[2, 2, 1, 1], &[1., 0., 0., 1.], false);
        let s = taps(&g, LAST_CONV, &[2, 2, 1, 1], &[1., 0., 1., 0.], true);
        let loss = sp_loss(&t, &s, &LayerPairSet::default()).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = 0.25 * (2.0 * (1.0 - r).powi(2) + 2.0 * r * r);
        assert!((loss.item() - expected).abs() < 1e-12);
        assert!((loss.item() - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn configuration_errors() {
        let g = Graph::<f64>::new();
        let t = taps(&g, LAST_CONV, &[2, 1, 1, 1], &[1., 2.], false);
        let s = taps(&g, "other", &[2, 1, 1, 1], &[1., 2.], true);
        assert!(matches!(sp_loss(&t, &s, &LayerPairSet::default()), Err(Error::Config(_))));

        let s = taps(&g, LAST_CONV, &[3, 1, 1, 1], &[1., 2., 3.], true);
        assert!(matches!(sp_loss(&t, &s, &LayerPairSet::default()), Err(Error::Shape(_))));

        let t1 = taps(&g, LAST_CONV, &[1, 1, 1, 1], &[1.], false);
        let s1 = taps(&g, LAST_CONV, &[1, 1, 1, 1], &[2.], true);
        assert!(matches!(sp_loss(&t1, &s1, &LayerPairSet::default()), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_reaches_student_only() {
        let g = Graph::<f64>::new();
        let t = taps(&g, LAST_CONV, &[3, 2, 1, 1], &[1., 0.2, 0.1, 1., 0.5, 0.5], false);
        let s = taps(&g, LAST_CONV, &[3, 2, 1, 1], &[0.3, 1., 1., 0.4, -0.5, 0.2], true);
        let loss = sp_loss(&t, &s, &LayerPairSet::default()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(t[LAST_CONV]).is_none());
        assert!(grads.get(s[LAST_CONV]).is_some());
    }

    #[test]
    fn pair_validation() {
        let ids = vec!["stage1.last".to_string(), LAST_CONV.to_string()];
        assert!(LayerPairSet::default().validate(&ids, &ids).is_ok());
        assert!(LayerPairSet::single("nope", LAST_CONV).validate(&ids, &ids).is_err());
        assert!(LayerPairSet::single(LAST_CONV, "nope").validate(&ids, &ids).is_err());
    }
}
