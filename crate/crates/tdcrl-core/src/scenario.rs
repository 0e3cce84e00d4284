//! Synthetic benchmark generation: a style basis split into training and
//! held-out styles, plus image tables synthesized for both splits. Held-out
//! styles never appear in the mixing basis or the confounder dictionary, so
//! they probe generalization to unseen domains.

use crate::augment::StyleBasis;
use crate::config::RunConfig;
use crate::encoder::{Encoder, SyntheticEncoder};
use crate::error::Result;
use crate::rng::{hash64, substream};
use crate::tdeb::{EmbeddingRecord, EmbeddingTable};
use std::path::{Path, PathBuf};

/// The predefined domain words, in selection order.
pub const DOMAIN_WORDS: [&str; 13] = [
    "sketch",
    "cartoon",
    "photo",
    "surrealism",
    "minimalist",
    "retro",
    "pixel-art",
    "collage",
    "pointillism",
    "stained-glass",
    "illustration",
    "fantasy",
    "landscape",
];

/// Labels for `count` styles: the predefined words first, generic names
/// beyond them.
pub fn style_labels(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            DOMAIN_WORDS
                .get(i)
                .map(|w| w.to_string())
                .unwrap_or_else(|| format!("style-{i}"))
        })
        .collect()
}

/// A fully materialized synthetic benchmark.
pub struct Benchmark {
    /// Styles visible to training (mixing and dictionary).
    pub train_basis: StyleBasis,
    /// Encoder over the full basis, including held-out styles.
    pub encoder: SyntheticEncoder,
    /// Images rendered in training styles.
    pub train_images: EmbeddingTable,
    /// Images rendered in held-out styles only.
    pub heldout_images: EmbeddingTable,
}

fn image_table(
    enc: &SyntheticEncoder,
    seed: u64,
    domain_range: std::ops::Range<usize>,
    per_cell: usize,
) -> Result<EmbeddingTable> {
    let full_basis = enc.basis();
    let mut table = EmbeddingTable::new(
        enc.embed_dim(),
        (0..enc.num_classes()).map(|k| format!("class-{k}")).collect(),
        domain_range
            .clone()
            .map(|d| full_basis.label(d).to_string())
            .collect(),
    );
    for (slot, d) in domain_range.enumerate() {
        for k in 0..enc.num_classes() {
            for i in 0..per_cell {
                // Instance seeds are position-keyed so tables do not depend
                // on generation order.
                let mut bytes = Vec::with_capacity(32);
                bytes.extend_from_slice(&seed.to_le_bytes());
                bytes.extend_from_slice(b"image-instance");
                bytes.extend_from_slice(&(k as u64).to_le_bytes());
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
                bytes.extend_from_slice(&(i as u64).to_le_bytes());
                let v = enc.image_encode(k, d, hash64(&bytes))?;
                table.push(EmbeddingRecord {
                    vector: v.iter().map(|&x| x as f32).collect(),
                    class_id: k as u32,
                    style_or_domain_id: slot as u32,
                })?;
            }
        }
    }
    Ok(table)
}

/// Builds the benchmark in memory from the configuration and master seed.
pub fn build_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let seed = cfg.master_seed();
    let d_train = cfg.benchmark.train_styles;
    let total = d_train + cfg.benchmark.heldout_styles;
    let full_basis = StyleBasis::synthetic(
        &style_labels(total),
        cfg.benchmark.word_dim,
        &mut substream(seed, "style-basis", 0),
    )?;
    let encoder = SyntheticEncoder::new(cfg.synthetic.clone(), full_basis.clone(), seed)?;
    let train_basis = full_basis.prefix(d_train)?;
    let per_cell = cfg.benchmark.images_per_class_style;
    let train_images = image_table(&encoder, seed, 0..d_train, per_cell)?;
    let heldout_images = if cfg.benchmark.heldout_styles > 0 {
        image_table(&encoder, seed, d_train..total, per_cell)?
    } else {
        EmbeddingTable::new(encoder.embed_dim(), Vec::new(), Vec::new())
    };
    Ok(Benchmark {
        train_basis,
        encoder,
        train_images,
        heldout_images,
    })
}

/// Output file names inside a benchmark directory.
pub struct BenchmarkPaths {
    pub basis: PathBuf,
    pub train_images: PathBuf,
    pub heldout_images: PathBuf,
}

impl BenchmarkPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            basis: dir.join("style_basis.tdeb"),
            train_images: dir.join("images_train.tdeb"),
            heldout_images: dir.join("images_heldout.tdeb"),
        }
    }
}

/// Writes the training basis (as a word-vector table) and both image tables.
pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<BenchmarkPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = BenchmarkPaths::in_dir(dir);

    let mut basis_table = EmbeddingTable::new(
        bench.train_basis.word_dim(),
        Vec::new(),
        bench.train_basis.labels().to_vec(),
    );
    for d in 0..bench.train_basis.len() {
        basis_table.push(EmbeddingRecord {
            vector: bench
                .train_basis
                .vector(d)
                .iter()
                .map(|&v| v as f32)
                .collect(),
            class_id: 0,
            style_or_domain_id: d as u32,
        })?;
    }
    basis_table.write(&paths.basis)?;
    bench.train_images.write(&paths.train_images)?;
    bench.heldout_images.write(&paths.heldout_images)?;
    Ok(paths)
}

/// Reads a style basis written by [`write_benchmark`].
pub fn read_basis(path: &Path) -> Result<StyleBasis> {
    let table = EmbeddingTable::read(path)?;
    let vectors: Vec<Vec<f64>> = table
        .records()
        .iter()
        .map(|r| r.vector.iter().map(|&v| v as f64).collect())
        .collect();
    StyleBasis::new(vectors, table.domain_labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_run_config;
    use tempfile::tempdir;

    fn small_config() -> RunConfig {
        let mut cfg = default_run_config();
        cfg.benchmark.images_per_class_style = 3;
        cfg.synthetic.classes = 3;
        cfg.synthetic.embed_dim = 16;
        cfg
    }

    #[test]
    fn benchmark_shapes_follow_config() {
        let cfg = small_config();
        let bench = build_benchmark(&cfg).unwrap();
        assert_eq!(bench.train_basis.len(), 4);
        assert_eq!(bench.train_basis.label(0), "sketch");
        assert_eq!(bench.encoder.basis().len(), 6);
        // 4 styles x 3 classes x 3 instances.
        assert_eq!(bench.train_images.len(), 36);
        // 2 held-out styles x 3 classes x 3 instances.
        assert_eq!(bench.heldout_images.len(), 18);
        assert_eq!(
            bench.heldout_images.domain_labels,
            vec!["minimalist".to_string(), "retro".to_string()]
        );
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let cfg = small_config();
        let dir = tempdir().unwrap();
        let a_dir = dir.path().join("a");
        let b_dir = dir.path().join("b");
        write_benchmark(&build_benchmark(&cfg).unwrap(), &a_dir).unwrap();
        write_benchmark(&build_benchmark(&cfg).unwrap(), &b_dir).unwrap();
        for name in ["style_basis.tdeb", "images_train.tdeb", "images_heldout.tdeb"] {
            let a = std::fs::read(a_dir.join(name)).unwrap();
            let b = std::fs::read(b_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn zero_heldout_styles_gives_empty_eval_table() {
        let mut cfg = small_config();
        cfg.benchmark.heldout_styles = 0;
        let bench = build_benchmark(&cfg).unwrap();
        assert!(bench.heldout_images.is_empty());
    }

    #[test]
    fn basis_roundtrips_through_file() {
        let cfg = small_config();
        let bench = build_benchmark(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let paths = write_benchmark(&bench, dir.path()).unwrap();
        let basis = read_basis(&paths.basis).unwrap();
        assert_eq!(basis.len(), bench.train_basis.len());
        assert_eq!(basis.labels(), bench.train_basis.labels());
        // f64 -> f32 -> f64 narrowing is the only loss.
        for d in 0..basis.len() {
            for (a, b) in basis.vector(d).iter().zip(bench.train_basis.vector(d)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
