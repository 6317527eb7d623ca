//! The synthetic task is solvable before any training: an encoder that
//! knows each word's latent concept retrieves the paired image.

use nir_core::corpus::{gen_synthetic, SynthConfig};
use nir_core::numerics::{l2_normalize, Tensor2D};
use nir_core::retrieval::{ground_truth_ranks, recall_at_k};
use nir_core::textprep::{tokenize, Source};

#[test]
fn concept_oracle_retrieves_paired_images() {
    let data = gen_synthetic(&SynthConfig {
        languages: vec!["en".into()],
        ..Default::default()
    })
    .unwrap();
    let (_, val) = data.split();
    assert_eq!(val.len(), 500);
    let dim = data.corpus.features.dim();
    let mut texts = Vec::new();
    let mut images = Vec::new();
    for r in &val.records {
        let mut q = vec![0.0; dim];
        for tok in tokenize(&r.caption, Source::Caption, &r.lang).tokens {
            for (a, b) in q.iter_mut().zip(&data.latent.concept_of[&tok]) {
                *a += b;
            }
        }
        texts.push(l2_normalize(&q));
        images.push(l2_normalize(val.feature(r)));
    }
    let s = Tensor2D::from_rows(&texts)
        .unwrap()
        .matmul_nt(&Tensor2D::from_rows(&images).unwrap())
        .unwrap();
    let r10 = recall_at_k(&ground_truth_ranks(&s), 10).unwrap();
    assert!(r10 >= 0.95, "oracle R@10 {r10}");
    let r10_i2t = recall_at_k(&ground_truth_ranks(&s.transpose()), 10).unwrap();
    assert!(r10_i2t >= 0.95, "oracle image-to-text R@10 {r10_i2t}");
}

#[test]
fn generator_output_files_are_reproducible() {
    let cfg = SynthConfig {
        train_per_language: 30,
        val_per_language: 10,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = gen_synthetic(&cfg).unwrap().write_to(a.path()).unwrap();
    let pb = gen_synthetic(&cfg).unwrap().write_to(b.path()).unwrap();
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}
