//! Encoder abstraction and the deterministic synthetic stand-in.
//!
//! The pipeline never runs a pretrained vision-language model in-process:
//! embeddings either come from files or from [`SyntheticEncoder`], which has
//! known class/style structure so tests can reason about geometry exactly.

use crate::augment::{StyleBasis, StyleWordVector};
use crate::error::{Error, Result};
use crate::matrix::{normalize, DenseMatrix};
use crate::rng::{hash64, substream};
use crate::tdeb::{EmbeddingRecord, EmbeddingTable};
use serde::{Deserialize, Serialize};

/// Maps (class, style) prompts and image instances into a shared
/// embedding space. All outputs are unit L2 norm.
pub trait Encoder {
    fn embed_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// Embedding of "a [class_k] in a [style] style".
    fn text_encode(&self, class_id: usize, style: &StyleWordVector) -> Result<Vec<f64>>;

    /// Class-agnostic embedding of "a object in a [style] style", used for
    /// confounder-dictionary entries.
    fn style_encode(&self, style: &StyleWordVector) -> Result<Vec<f64>>;

    /// Embedding of one image instance of `class_id` rendered in domain
    /// `domain_id`; `instance_seed` selects the instance.
    fn image_encode(&self, class_id: usize, domain_id: usize, instance_seed: u64) -> Result<Vec<f64>>;
}

/// Construction parameters for [`SyntheticEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticEncoderParams {
    /// Number of classes K.
    pub classes: usize,
    /// Embedding size ES.
    pub embed_dim: usize,
    /// Deterministic pseudo-noise amplitude on the text side.
    pub text_noise: f64,
    /// Per-coordinate Gaussian noise on the image side.
    pub image_noise: f64,
    /// Norm of the systematic text/image offset (0 disables it).
    pub modality_gap: f64,
    /// Target norm of a style contribution relative to a class code.
    pub style_scale: f64,
}

impl Default for SyntheticEncoderParams {
    fn default() -> Self {
        Self {
            classes: 7,
            embed_dim: 64,
            text_noise: 0.05,
            image_noise: 0.08,
            modality_gap: 0.0,
            style_scale: 1.0,
        }
    }
}

impl SyntheticEncoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("synthetic.classes must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("synthetic.embed_dim must be >= 1".into()));
        }
        for (name, v) in [
            ("synthetic.text_noise", self.text_noise),
            ("synthetic.image_noise", self.image_noise),
            ("synthetic.modality_gap", self.modality_gap),
            ("synthetic.style_scale", self.style_scale),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Deterministic encoder with planted structure:
///
/// * text:  `normalize(A_k + B s + eta * n(k, s))`
/// * image: `normalize(A_k + B s_d + mu + xi)`, `xi ~ N(0, sigma_img^2 I)`
///
/// where `A` holds per-class codes, `B` maps word-vector space into
/// embedding space, `n` is pseudo-noise keyed on the inputs, and `mu` is an
/// optional modality-gap offset. Everything derives from one master seed.
pub struct SyntheticEncoder {
    class_codes: DenseMatrix, // K x ES
    style_map: DenseMatrix,   // ES x W
    basis: StyleBasis,
    params: SyntheticEncoderParams,
    modality_offset: Vec<f64>,
    seed: u64,
}

impl SyntheticEncoder {
    /// Builds the encoder from a master seed. The basis must contain every
    /// domain the image path will be asked to render.
    pub fn new(params: SyntheticEncoderParams, basis: StyleBasis, seed: u64) -> Result<Self> {
        params.validate()?;
        let k = params.classes;
        let es = params.embed_dim;
        let w = basis.word_dim();

        let mut code_rng = substream(seed, "encoder.class-codes", 0);
        let code_scale = 1.0 / (es as f64).sqrt();
        let class_codes = DenseMatrix::from_vec(
            k,
            es,
            (0..k * es)
                .map(|_| code_scale * crate::rng::standard_normal(&mut code_rng))
                .collect(),
        )?;

        let mut map_rng = substream(seed, "encoder.style-map", 0);
        let map_scale = params.style_scale / (es as f64).sqrt();
        let style_map = DenseMatrix::from_vec(
            es,
            w,
            (0..es * w)
                .map(|_| map_scale * crate::rng::standard_normal(&mut map_rng))
                .collect(),
        )?;

        let modality_offset = if params.modality_gap > 0.0 {
            let mut gap_rng = substream(seed, "encoder.modality-gap", 0);
            let raw: Vec<f64> = (0..es).map(|_| crate::rng::standard_normal(&mut gap_rng)).collect();
            normalize(&raw)?
                .into_iter()
                .map(|v| v * params.modality_gap)
                .collect()
        } else {
            vec![0.0; es]
        };

        Ok(Self {
            class_codes,
            style_map,
            basis,
            params,
            modality_offset,
            seed,
        })
    }

    pub fn params(&self) -> &SyntheticEncoderParams {
        &self.params
    }

    pub fn basis(&self) -> &StyleBasis {
        &self.basis
    }

    fn style_contribution(&self, style_vector: &[f64]) -> Result<Vec<f64>> {
        if style_vector.len() != self.style_map.cols() {
            return Err(Error::Dimension(format!(
                "style vector dim {} != word dim {}",
                style_vector.len(),
                self.style_map.cols()
            )));
        }
        let es = self.params.embed_dim;
        let mut out = vec![0.0; es];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.style_map.row(i);
            *o = row.iter().zip(style_vector).map(|(m, s)| m * s).sum();
        }
        Ok(out)
    }

    /// Pseudo-noise keyed on (tag, style bits): repeatable across calls.
    fn text_pseudo_noise(&self, tag: u64, style: &StyleWordVector) -> Vec<f64> {
        let mut bytes = Vec::with_capacity(8 + style.vector.len() * 8);
        bytes.extend_from_slice(&tag.to_le_bytes());
        for v in &style.vector {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        let mut rng = substream(self.seed, "encoder.text-noise", hash64(&bytes));
        (0..self.params.embed_dim)
            .map(|_| self.params.text_noise * crate::rng::standard_normal(&mut rng))
            .collect()
    }
}

// Tag for the class-agnostic "a object ..." prompt.
const NEUTRAL_CLASS_TAG: u64 = u64::MAX;

impl Encoder for SyntheticEncoder {
    fn embed_dim(&self) -> usize {
        self.params.embed_dim
    }

    fn num_classes(&self) -> usize {
        self.params.classes
    }

    fn text_encode(&self, class_id: usize, style: &StyleWordVector) -> Result<Vec<f64>> {
        if class_id >= self.params.classes {
            return Err(Error::Domain(format!(
                "class id {} out of range (K={})",
                class_id, self.params.classes
            )));
        }
        let mut v = self.style_contribution(&style.vector)?;
        for (x, a) in v.iter_mut().zip(self.class_codes.row(class_id)) {
            *x += a;
        }
        if self.params.text_noise > 0.0 {
            for (x, n) in v.iter_mut().zip(self.text_pseudo_noise(class_id as u64, style)) {
                *x += n;
            }
        }
        normalize(&v)
    }

    fn style_encode(&self, style: &StyleWordVector) -> Result<Vec<f64>> {
        // Neutral class code of zeros: only the style contribution remains.
        let mut v = self.style_contribution(&style.vector)?;
        if self.params.text_noise > 0.0 {
            for (x, n) in v.iter_mut().zip(self.text_pseudo_noise(NEUTRAL_CLASS_TAG, style)) {
                *x += n;
            }
        }
        normalize(&v)
    }

    fn image_encode(&self, class_id: usize, domain_id: usize, instance_seed: u64) -> Result<Vec<f64>> {
        if class_id >= self.params.classes {
            return Err(Error::Domain(format!(
                "class id {} out of range (K={})",
                class_id, self.params.classes
            )));
        }
        if domain_id >= self.basis.len() {
            return Err(Error::Domain(format!(
                "domain id {} out of range (D={})",
                domain_id,
                self.basis.len()
            )));
        }
        let mut v = self.style_contribution(self.basis.vector(domain_id))?;
        for ((x, a), mu) in v
            .iter_mut()
            .zip(self.class_codes.row(class_id))
            .zip(&self.modality_offset)
        {
            *x += a + mu;
        }
        if self.params.image_noise > 0.0 {
            let mut rng = substream(self.seed, "encoder.image-noise", instance_seed);
            for x in &mut v {
                *x += self.params.image_noise * crate::rng::standard_normal(&mut rng);
            }
        }
        normalize(&v)
    }
}

/// Encodes the full M x K grid of (style, class) prompts into a table,
/// record (m, k) tagged with class k and style m.
pub fn build_training_set(
    enc: &dyn Encoder,
    styles: &[StyleWordVector],
    classes: usize,
) -> Result<EmbeddingTable> {
    if styles.is_empty() || classes == 0 {
        return Err(Error::Domain(
            "training set needs at least one style and one class".into(),
        ));
    }
    let mut table = EmbeddingTable::new(
        enc.embed_dim(),
        (0..classes).map(|k| format!("class-{k}")).collect(),
        Vec::new(),
    );
    for (m, style) in styles.iter().enumerate() {
        for k in 0..classes {
            let v = enc.text_encode(k, style)?;
            table.push(EmbeddingRecord {
                vector: v.iter().map(|&x| x as f32).collect(),
                class_id: k as u32,
                style_or_domain_id: m as u32,
            })?;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dot, l2_norm};
    use crate::rng::substream;

    fn basis(d: usize, w: usize) -> StyleBasis {
        let labels: Vec<String> = (0..d).map(|i| format!("style-{i}")).collect();
        StyleBasis::synthetic(&labels, w, &mut substream(2, "basis", 0)).unwrap()
    }

    fn encoder(params: SyntheticEncoderParams) -> SyntheticEncoder {
        SyntheticEncoder::new(params, basis(4, 8), 99).unwrap()
    }

    #[test]
    fn text_encode_is_bitwise_deterministic_and_unit_norm() {
        let enc = encoder(SyntheticEncoderParams::default());
        let style = StyleWordVector::pure(enc.basis(), 1).unwrap();
        let a = enc.text_encode(3, &style).unwrap();
        let b = enc.text_encode(3, &style).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!((l2_norm(&a) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn classes_separate_without_style_or_noise() {
        let params = SyntheticEncoderParams {
            text_noise: 0.0,
            style_scale: 0.0,
            ..Default::default()
        };
        let enc = encoder(params);
        let style = StyleWordVector::pure(enc.basis(), 0).unwrap();
        // With eta=0 and B=0 the embedding is exactly the normalized class code.
        let same_a = enc.text_encode(2, &style).unwrap();
        let same_b = enc.text_encode(2, &style).unwrap();
        assert_eq!(same_a, same_b);
        for k in 0..enc.num_classes() {
            for j in 0..k {
                let a = enc.text_encode(k, &style).unwrap();
                let b = enc.text_encode(j, &style).unwrap();
                assert!(dot(&a, &b) < 1.0 - 1e-6, "classes {k} and {j} collide");
            }
        }
    }

    #[test]
    fn image_matches_text_when_noise_free() {
        let params = SyntheticEncoderParams {
            text_noise: 0.0,
            image_noise: 0.0,
            modality_gap: 0.0,
            ..Default::default()
        };
        let enc = encoder(params);
        let style = StyleWordVector::pure(enc.basis(), 2).unwrap();
        let text = enc.text_encode(1, &style).unwrap();
        let image = enc.image_encode(1, 2, 12345).unwrap();
        for (t, i) in text.iter().zip(&image) {
            assert_eq!(t.to_bits(), i.to_bits());
        }
    }

    #[test]
    fn image_instances_differ_but_stay_near_their_class_code() {
        let params = SyntheticEncoderParams {
            image_noise: 0.02,
            ..Default::default()
        };
        let enc = encoder(params);
        let a = enc.image_encode(4, 1, 1).unwrap();
        let b = enc.image_encode(4, 1, 2).unwrap();
        assert_ne!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() <= 1e-6);
        // Small noise: nearest class code under cosine is still class 4.
        for v in [&a, &b] {
            let own = dot(v, enc.class_codes.row(4));
            for k in 0..enc.num_classes() {
                if k != 4 {
                    assert!(own > dot(v, enc.class_codes.row(k)));
                }
            }
        }
    }

    #[test]
    fn invalid_ids_error() {
        let enc = encoder(SyntheticEncoderParams::default());
        let style = StyleWordVector::pure(enc.basis(), 0).unwrap();
        assert!(enc.text_encode(7, &style).is_err());
        assert!(enc.image_encode(0, 9, 0).is_err());
    }

    #[test]
    fn training_set_covers_the_style_class_grid() {
        let enc = encoder(SyntheticEncoderParams::default());
        let styles: Vec<StyleWordVector> = (0..3)
            .map(|d| StyleWordVector::pure(enc.basis(), d).unwrap())
            .collect();
        let table = build_training_set(&enc, &styles, 7).unwrap();
        assert_eq!(table.len(), 21);
        let mut seen = [false; 21];
        for rec in table.records() {
            let idx = rec.style_or_domain_id as usize * 7 + rec.class_id as usize;
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&s| s));

        // Published sizing: 80 styles x 7 classes.
        let mut rng = crate::rng::substream(70, "aug", 0);
        let many: Vec<StyleWordVector> = (0..80)
            .map(|_| {
                let w = crate::augment::sample_mix_weights(4, 0.5, &mut rng).unwrap();
                crate::augment::make_style_vector(enc.basis(), &w, 0.0, &mut rng).unwrap()
            })
            .collect();
        assert_eq!(build_training_set(&enc, &many, 7).unwrap().len(), 560);

        // Single-cell grid equals a direct encode call after f32 narrowing.
        let single = build_training_set(&enc, &styles[..1], 1).unwrap();
        let direct: Vec<f32> = enc
            .text_encode(0, &styles[0])
            .unwrap()
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert_eq!(single.records()[0].vector, direct);
    }
}
