//! Central finite differences, the oracle for reverse-mode gradients.
//!
//! Only forward evaluations are used here, never the tape.

use crate::autodiff::Graph;
use crate::backbone::AdaptedModel;
use crate::error::Result;
use crate::rng::Rng;
use crate::tasks::Batch;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    diff / (na + nb).max(floor)
}

fn model_loss(model: &AdaptedModel<f64>, batch: &Batch<f64>, dropout_seed: Option<u64>) -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = dropout_seed.map(Rng::new);
    let out = model.forward(&mut g, &batch.input, rng.is_some(), rng.as_mut())?;
    let loss = model.loss(&mut g, out, &batch.target)?;
    Ok(g.value(loss).data()[0])
}

/// Relative error between tape and finite-difference gradients for every
/// trainable tensor of `model`. With `dropout_seed`, both sides run in
/// training mode and redraw identical masks from a fresh generator.
pub fn check_model(
    model: &AdaptedModel<f64>,
    batch: &Batch<f64>,
    dropout_seed: Option<u64>,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    let mut rng = dropout_seed.map(Rng::new);
    let out = model.forward(&mut g, &batch.input, rng.is_some(), rng.as_mut())?;
    let loss = model.loss(&mut g, out, &batch.target)?;
    g.backward(loss)?;

    let mut probe = model.clone();
    let names: Vec<String> = model.trainables().into_iter().map(|(n, _)| n).collect();
    let mut report = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let base = model.trainables()[k].1.value.data().to_vec();
        let analytic = match g.named_grad(name) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; base.len()],
        };
        let mut failure = None;
        let numeric = central_difference(&base, h, |x| {
            probe.trainables_mut()[k].1.value.data_mut().copy_from_slice(x);
            match model_loss(&probe, batch, dropout_seed) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        probe.trainables_mut()[k].1.value.data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        report.push((name.clone(), relative_error(&analytic, &numeric, 1e-12)));
    }
    Ok(report)
}
