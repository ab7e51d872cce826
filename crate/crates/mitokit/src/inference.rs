//! Test-time augmentation, checkpoint ensembling, and end-to-end prediction.
//!
//! Two prediction styles come out of training:
//!
//! - Detection patches get a dense foreground-probability map, averaged
//!   pixelwise across an ensemble of segmentation checkpoints and then
//!   thresholded into centroid detections.
//! - Classification patches get a scalar atypical probability, optionally
//!   averaged over a fixed set of deterministic input variants (flips,
//!   right-angle rotations, mild rescales and brightness shifts) before the
//!   ensemble mean. Averaging always happens in probability space, after the
//!   sigmoid, never on raw logits.
//!
//! Adapter-tuned classifiers should fold their adapters into the base
//! weights first ([`merged_member_params`]) so each variant costs one plain
//! forward pass.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use crate::augment::{self, NormalizeSpec, Sample, SampleTarget};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_detections, Detection};
use crate::lora::{merge_lora, set_adapter_merged, AdapterHost};
use crate::models::seg::SegModel;
use crate::models::vit::VitModel;
use crate::nn::{ParamSnapshot, Params, Session};
use crate::scalar::Scalar;

/// One deterministic input transform applied at prediction time.
///
/// Every variant is cheap and exactly invertible in distribution terms: the
/// patch stays a plausible stain patch, so the model's answers can be
/// averaged without re-weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TtaVariant {
    /// Pass the patch through unchanged.
    Identity,
    /// Bilinear rescale of both edges by `factor`; the classifier front-end
    /// restores its expected input size afterwards.
    Scale { factor: f64 },
    HorizontalFlip,
    VerticalFlip,
    /// Exact right-angle rotation by `quarter_turns` * 90 degrees
    /// (clockwise, `0..=3`). A pure pixel permutation, no resampling.
    Rotate { quarter_turns: u8 },
    /// Multiply all channels by `factor`, clamped back to `[0, 1]`.
    Brightness { factor: f64 },
}

impl TtaVariant {
    /// True when the variant leaves every input unchanged.
    pub fn is_identity(&self) -> bool {
        match *self {
            TtaVariant::Identity => true,
            TtaVariant::Scale { factor } | TtaVariant::Brightness { factor } => factor == 1.0,
            TtaVariant::Rotate { quarter_turns } => quarter_turns % 4 == 0,
            _ => false,
        }
    }

    /// Produce the transformed copy of `image` (`(3, h, w)`, values in
    /// `[0, 1]`).
    pub fn apply<T: Scalar>(&self, image: &Array3<T>) -> Array3<T> {
        match *self {
            TtaVariant::Identity => image.clone(),
            TtaVariant::Scale { factor } => {
                let (_, h, w) = image.dim();
                let oh = ((h as f64 * factor).round() as usize).max(1);
                let ow = ((w as f64 * factor).round() as usize).max(1);
                let mut s = wrap(image);
                augment::resize(&mut s, oh, ow);
                s.image
            }
            TtaVariant::HorizontalFlip => {
                let mut s = wrap(image);
                augment::hflip(&mut s);
                s.image
            }
            TtaVariant::VerticalFlip => {
                let mut s = wrap(image);
                augment::vflip(&mut s);
                s.image
            }
            TtaVariant::Rotate { quarter_turns } => {
                let mut out = image.clone();
                for _ in 0..(quarter_turns % 4) {
                    out = rot90_cw(&out);
                }
                out
            }
            TtaVariant::Brightness { factor } => {
                let mut s = wrap(image);
                augment::brightness(&mut s, factor);
                s.image
            }
        }
    }
}

fn wrap<T: Scalar>(image: &Array3<T>) -> Sample<T> {
    Sample {
        image: image.clone(),
        target: SampleTarget::Label(0),
    }
}

/// Rotate `(c, h, w)` by 90 degrees clockwise via exact pixel permutation.
fn rot90_cw<T: Scalar>(image: &Array3<T>) -> Array3<T> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, w, h));
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out[[ch, y, x]] = image[[ch, h - 1 - x, y]];
            }
        }
    }
    out
}

/// The set of prediction-time variants to average over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaPolicy {
    pub variants: Vec<TtaVariant>,
}

impl Default for TtaPolicy {
    /// Ten single-op variants: identity, two mild rescales, both flips, the
    /// three right-angle rotations, and two brightness shifts. Variants are
    /// never composed with each other.
    fn default() -> Self {
        TtaPolicy {
            variants: vec![
                TtaVariant::Identity,
                TtaVariant::Scale { factor: 0.9 },
                TtaVariant::Scale { factor: 1.1 },
                TtaVariant::HorizontalFlip,
                TtaVariant::VerticalFlip,
                TtaVariant::Rotate { quarter_turns: 1 },
                TtaVariant::Rotate { quarter_turns: 2 },
                TtaVariant::Rotate { quarter_turns: 3 },
                TtaVariant::Brightness { factor: 0.9 },
                TtaVariant::Brightness { factor: 1.1 },
            ],
        }
    }
}

impl TtaPolicy {
    /// A policy containing only the identity (plain single forward pass).
    pub fn identity_only() -> Self {
        TtaPolicy {
            variants: vec![TtaVariant::Identity],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::InvalidParameter(
                "test-time augmentation policy has no variants".into(),
            ));
        }
        if !self.variants.iter().any(TtaVariant::is_identity) {
            return Err(Error::InvalidParameter(
                "test-time augmentation policy must include the identity variant".into(),
            ));
        }
        for v in &self.variants {
            match *v {
                TtaVariant::Scale { factor } if !(factor.is_finite() && factor > 0.0) => {
                    return Err(Error::InvalidParameter(format!(
                        "scale factor {factor} must be finite and positive"
                    )));
                }
                TtaVariant::Brightness { factor } if !(factor.is_finite() && factor > 0.0) => {
                    return Err(Error::InvalidParameter(format!(
                        "brightness factor {factor} must be finite and positive"
                    )));
                }
                TtaVariant::Rotate { quarter_turns } if quarter_turns > 3 => {
                    return Err(Error::InvalidParameter(format!(
                        "quarter_turns {quarter_turns} must be at most 3"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Scalar-output predictor: raw RGB patch in, binary logit out.
///
/// Implementors own their whole front-end (resizing, normalization), so
/// test-time variants are applied to the raw patch before the call.
pub trait Classifier<T: Scalar> {
    fn predict_logit(&self, image: &Array3<T>) -> Result<f64>;
}

/// Adapter turning a plain closure into a [`Classifier`].
pub struct FnClassifier<F>(pub F);

impl<T, F> Classifier<T> for FnClassifier<F>
where
    T: Scalar,
    F: Fn(&Array3<T>) -> Result<f64>,
{
    fn predict_logit(&self, image: &Array3<T>) -> Result<f64> {
        (self.0)(image)
    }
}

/// Dense predictor: raw RGB patch in, per-pixel foreground probability out.
pub trait Segmenter<T: Scalar> {
    fn predict_probs(&self, image: &Array3<T>) -> Result<Array2<T>>;
}

/// Adapter turning a plain closure into a [`Segmenter`].
pub struct FnSegmenter<F>(pub F);

impl<T, F> Segmenter<T> for FnSegmenter<F>
where
    T: Scalar,
    F: Fn(&Array3<T>) -> Result<Array2<T>>,
{
    fn predict_probs(&self, image: &Array3<T>) -> Result<Array2<T>> {
        (self.0)(image)
    }
}

/// One segmentation ensemble member: a shared model structure plus its own
/// checkpoint weights.
pub struct SegMember<'m, T: Scalar> {
    model: &'m SegModel,
    params: Params<T>,
}

impl<'m, T: Scalar> SegMember<'m, T> {
    pub fn new(model: &'m SegModel, params: Params<T>) -> Self {
        SegMember { model, params }
    }
}

impl<T: Scalar> Segmenter<T> for SegMember<'_, T> {
    fn predict_probs(&self, image: &Array3<T>) -> Result<Array2<T>> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                got: vec![c, h, w],
            });
        }
        let mut sess = Session::new(&self.params, false);
        let x = sess
            .tape
            .constant(image.clone().insert_axis(Axis(0)).into_dyn());
        let probs = self.model.predict_probs(&mut sess, x);
        let v = sess
            .tape
            .value(probs)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("probability map is (1, 1, h, w)");
        Ok(v.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }
}

/// One classification ensemble member with its input front-end (resize to
/// the model's input size, then channel normalization).
pub struct ClsMember<'m, T: Scalar> {
    model: &'m VitModel,
    params: Params<T>,
    normalize: NormalizeSpec,
}

impl<'m, T: Scalar> ClsMember<'m, T> {
    pub fn new(model: &'m VitModel, params: Params<T>) -> Self {
        ClsMember {
            model,
            params,
            normalize: NormalizeSpec::default(),
        }
    }

    pub fn with_normalize(mut self, normalize: NormalizeSpec) -> Self {
        self.normalize = normalize;
        self
    }
}

impl<T: Scalar> Classifier<T> for ClsMember<'_, T> {
    fn predict_logit(&self, image: &Array3<T>) -> Result<f64> {
        let size = self.model.config.image_size;
        let mut sample = wrap(image);
        augment::resize(&mut sample, size, size);
        augment::normalize_image(&mut sample.image, &self.normalize);
        let mut sess = Session::new(&self.params, false);
        let x = sess
            .tape
            .constant(sample.image.insert_axis(Axis(0)).into_dyn());
        let logits = self.model.forward(&mut sess, x, None);
        let v = sess
            .tape
            .value(logits)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("logits are (1, outputs)");
        Ok(v[[0, 0]].as_f64())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Average the predicted probability over every variant in the policy.
pub fn tta_predict<T: Scalar>(
    model: &dyn Classifier<T>,
    image: &Array3<T>,
    policy: &TtaPolicy,
) -> Result<f64> {
    policy.validate()?;
    let mut sum = 0.0;
    for variant in &policy.variants {
        let transformed = variant.apply(image);
        sum += sigmoid(model.predict_logit(&transformed)?);
    }
    Ok(sum / policy.variants.len() as f64)
}

/// Mean probability across ensemble members; each member is first averaged
/// over the test-time policy when one is supplied.
pub fn ensemble_cls_predict<T: Scalar>(
    members: &[&dyn Classifier<T>],
    image: &Array3<T>,
    policy: Option<&TtaPolicy>,
) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidParameter("ensemble has no members".into()));
    }
    let mut sum = 0.0;
    for member in members {
        sum += match policy {
            Some(p) => tta_predict(*member, image, p)?,
            None => sigmoid(member.predict_logit(image)?),
        };
    }
    Ok(sum / members.len() as f64)
}

/// Pixelwise mean probability map across segmentation ensemble members.
///
/// All members must produce maps of the same shape.
pub fn ensemble_seg_predict<T: Scalar>(
    members: &[&dyn Segmenter<T>],
    image: &Array3<T>,
) -> Result<Array2<T>> {
    if members.is_empty() {
        return Err(Error::InvalidParameter("ensemble has no members".into()));
    }
    let mut acc: Option<Array2<T>> = None;
    for member in members {
        let map = member.predict_probs(image)?;
        match &mut acc {
            None => acc = Some(map),
            Some(a) => {
                if a.dim() != map.dim() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![a.dim().0, a.dim().1],
                        got: vec![map.dim().0, map.dim().1],
                    });
                }
                a.zip_mut_with(&map, |x, &y| *x += y);
            }
        }
    }
    let mut mean = acc.expect("at least one member");
    let n = T::of_usize(members.len());
    mean.mapv_inplace(|x| x / n);
    Ok(mean)
}

/// Run the segmentation ensemble on one patch and extract centroid
/// detections from the averaged probability map.
pub fn predict_detections<T: Scalar>(
    members: &[&dyn Segmenter<T>],
    image: &Array3<T>,
    threshold: f64,
    min_area_px: usize,
) -> Result<Vec<Detection>> {
    let probs = ensemble_seg_predict(members, image)?;
    mask_to_detections(&probs, threshold, min_area_px)
}

/// Clone the base store once per checkpoint snapshot and load the snapshot
/// into each copy. For plain (adapter-free) ensembles.
pub fn member_params<T: Scalar>(
    base: &Params<T>,
    snapshots: &[ParamSnapshot],
) -> Result<Vec<Params<T>>> {
    if snapshots.is_empty() {
        return Err(Error::InvalidParameter(
            "no checkpoint snapshots to load".into(),
        ));
    }
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut p = base.clone();
        p.load_snapshot(snap)?;
        out.push(p);
    }
    Ok(out)
}

/// Load each checkpoint snapshot into its own copy of the base store and
/// fold the adapter update into the base weights there.
///
/// One model structure fronts every returned store; on return the model is
/// marked merged, which matches all of them, so predictions skip the
/// adapter path entirely.
pub fn merged_member_params<T: Scalar>(
    model: &mut impl AdapterHost,
    base: &Params<T>,
    snapshots: &[ParamSnapshot],
) -> Result<Vec<Params<T>>> {
    if snapshots.is_empty() {
        return Err(Error::InvalidParameter(
            "no checkpoint snapshots to load".into(),
        ));
    }
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut p = base.clone();
        p.load_snapshot(snap)?;
        set_adapter_merged(model, false);
        merge_lora(model, &mut p)?;
        out.push(p);
    }
    Ok(out)
}

/// One row of a classification predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsPrediction {
    pub patch_id: String,
    pub probability: f64,
    pub predicted_label: u8,
    pub domain_id: u8,
}

impl ClsPrediction {
    /// Label with the usual 0.5 cut on the (ensembled) probability.
    pub fn from_probability(patch_id: impl Into<String>, probability: f64, domain_id: u8) -> Self {
        ClsPrediction {
            patch_id: patch_id.into(),
            probability,
            predicted_label: u8::from(probability >= 0.5),
            domain_id,
        }
    }
}

const PREDICTIONS_HEADER: &str = "patch_id,probability,predicted_label,domain_id";

/// Write predictions as CSV with a fixed header. Probabilities use the
/// shortest round-trippable decimal form.
pub fn save_cls_predictions(path: &Path, rows: &[ClsPrediction]) -> Result<()> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.patch_id, r.probability, r.predicted_label, r.domain_id
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_cls_predictions(path: &Path) -> Result<Vec<ClsPrediction>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PREDICTIONS_HEADER => {}
        other => {
            return Err(Error::InvalidParameter(format!(
                "bad predictions header: {other:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidParameter(format!(
                "predictions line {} has {} fields, expected 4",
                i + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::InvalidParameter(format!("predictions line {}: bad {what}", i + 2))
        };
        rows.push(ClsPrediction {
            patch_id: fields[0].to_string(),
            probability: fields[1].parse().map_err(|_| parse_err("probability"))?,
            predicted_label: fields[2].parse().map_err(|_| parse_err("predicted_label"))?,
            domain_id: fields[3].parse().map_err(|_| parse_err("domain_id"))?,
        });
    }
    Ok(rows)
}
