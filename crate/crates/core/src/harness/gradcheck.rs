use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::labels::LabelVector;
use crate::losses::{combined_loss, LossConfig};
use crate::model::MlTr;
use crate::tensor::{Real, Tensor};

/// Random images and labels sized for `model`. Every label has at least one
/// positive so the count head sees a nonzero target.
pub fn tiny_batch(model: &MlTr, batch: usize, seed: u64) -> (Tensor, Vec<LabelVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = model.spec.resolution;
    let data: Vec<Real> = (0..batch * 3 * r * r)
        .map(|_| rng.random::<Real>())
        .collect();
    let n = model.n_classes;
    let labels = (0..batch)
        .map(|_| {
            let mut y = LabelVector::new(n);
            for c in 0..n {
                if rng.random_bool(0.4) {
                    y.set(c);
                }
            }
            if y.z() == 0 {
                y.set(rng.random_range(0..n));
            }
            y
        })
        .collect();
    (
        Tensor::new(&[batch, 3, r, r], data).expect("batch shape"),
        labels,
    )
}

/// Checks the gradient of the full training loss with respect to every
/// model parameter. The model weights are left unchanged.
pub fn model_gradcheck(
    model: &mut MlTr,
    images: &Tensor,
    labels: &[LabelVector],
    loss: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut store = std::mem::take(&mut model.store);
    let report = check_gradients(&mut store, opts, |tape, p| {
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        let out = model.forward(tape, p, x, loss.s)?;
        Ok(combined_loss(tape, out.label_logits, out.count_logits, labels, loss)?.total)
    });
    model.store = store;
    report
}
