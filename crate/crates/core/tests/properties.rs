use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mltr::data::{generate, SynthSpec};
use mltr::harness::{evaluate_model, train, Checkpoint, TrainConfig};
use mltr::losses::LossConfig;
use mltr::metrics::evaluate;
use mltr::model::{flops_analytical, AttentionMode, MlTr, VariantSpec};
use mltr::tensor::{Real, Tensor};

fn mean_sd(xs: &[Real]) -> (Real, Real) {
    let n = xs.len() as Real;
    let m = xs.iter().sum::<Real>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<Real>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn untrained_map_matches_the_permutation_baseline() {
    let mut spec = SynthSpec::new(4, 16, 21);
    spec.base_rates = vec![0.5; 4];
    let data = generate(&spec, 40).unwrap();
    let loss = LossConfig::default();
    let mut untrained = Vec::new();
    let mut shuffled = Vec::new();
    for seed in 0..20u64 {
        let model = MlTr::new(VariantSpec::tiny(), 4, seed).unwrap();
        untrained.push(
            evaluate_model(&model, &data, &loss, 8, 0.5)
                .unwrap()
                .report
                .map,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores: Vec<Real> = (0..data.len() * 4).map(|_| rng.random()).collect();
        scores.shuffle(&mut rng);
        let t = Tensor::new(&[data.len(), 4], scores).unwrap();
        shuffled.push(evaluate(&t, &data.labels, 0.5).unwrap().map);
    }
    let (mu, su) = mean_sd(&untrained);
    let (mr, sr) = mean_sd(&shuffled);
    let se = ((su * su + sr * sr) / 20.0).sqrt();
    assert!(
        (mu - mr).abs() < 3.0 * se,
        "untrained {mu:.4}±{su:.4} vs random {mr:.4}±{sr:.4}"
    );
    let positive_rate =
        data.labels.iter().map(|y| y.z()).sum::<usize>() as Real / (data.len() * 4) as Real;
    assert!(
        (mr - positive_rate).abs() < 0.15,
        "random {mr} vs positive rate {positive_rate}"
    );
}

#[test]
fn pixel_attention_term_is_smaller_than_global_by_tokens_per_window() {
    let (h, w, c, ws) = (56u64, 56u64, 96u64, 7u64);
    let projections = 4 * h * w * c * c;
    let ga = flops_analytical(AttentionMode::Global, 56, 56, 96, 7)
        .unwrap()
        .flops
        - projections;
    let pa = flops_analytical(AttentionMode::Pixel, 56, 56, 96, 7)
        .unwrap()
        .flops
        - projections;
    assert_eq!(ga % pa, 0);
    assert_eq!(ga / pa, (h * w) / (ws * ws));
    assert_eq!(ga / pa, 64);
}

#[test]
fn overfit_checkpoint_evaluates_to_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let mut spec = SynthSpec::new(3, 16, 4);
    spec.base_rates = vec![0.5; 3];
    let data = generate(&spec, 8).unwrap();
    let cfg = TrainConfig {
        variant: VariantSpec::tiny(),
        epochs: 60,
        batch_size: 8,
        lr: 3e-3,
        cutout: 0,
        eval_every: 5,
        target_map: Some(1.0),
        checkpoint: Some(ck.clone()),
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data).unwrap();
    let last = out.last_eval().unwrap();
    assert_eq!(last.report.map, 1.0, "after {} epochs", out.epochs_done);
    let model = Checkpoint::load(&ck).unwrap().to_model().unwrap();
    let again = evaluate_model(&model, &data, &cfg.loss, 8, 0.5).unwrap();
    assert_eq!(again.report.to_json(), last.report.to_json());
}
