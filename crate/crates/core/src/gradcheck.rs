//! Finite-difference verification of the head's analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::head::{sample_loss, sample_loss_and_grad, HeadConfig, HeadWeights};
use crate::rng::rng_for;

/// Denominator floor for the relative error. Central differences at step
/// 1e-5 cannot resolve gradients much below 1e-9 (f64 roundoff), so such
/// coordinates are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Mean loss over a labelled batch.
pub fn batch_loss(batch: &[(Array2<f64>, usize)], w: &HeadWeights, cfg: &HeadConfig) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batch {
        total += sample_loss(&x.view(), *y, w, cfg)?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    Ok(loss)
}

/// Compare analytic gradients of the mean batch loss, with respect to head
/// parameters and head inputs, against central differences. At least
/// `min_coords` coordinates are drawn, spread evenly over all tensors.
pub fn grad_check(
    w: &HeadWeights,
    batch: &[(Array2<f64>, usize)],
    cfg: &HeadConfig,
    fd_step: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {fd_step}")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = w.zeros_like();
    let mut input_grads = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let g = sample_loss_and_grad(&x.view(), *y, w, cfg)?;
        grads.add_scaled(&g.grads, 1.0 / n);
        input_grads.push(g.input_grad / n);
    }
    batch_loss(batch, w, cfg)?;

    let param_names = w.tensor_names();
    let param_lens: Vec<usize> = w.slices().iter().map(|s| s.len()).collect();
    let mut lens = param_lens.clone();
    lens.extend(batch.iter().map(|(x, _)| x.len()));
    let available: usize = lens.iter().sum();
    if available < min_coords {
        return Err(Error::InvalidArgument(format!(
            "only {available} coordinates available, {min_coords} requested"
        )));
    }
    // smallest per-tensor quota that reaches min_coords in total
    let mut per_tensor = min_coords.div_ceil(lens.len());
    while lens.iter().map(|&l| l.min(per_tensor)).sum::<usize>() < min_coords {
        per_tensor += 1;
    }
    let mut rng = rng_for(seed, "gradcheck");

    let mut max_rel = 0.0;
    let mut worst = (String::new(), 0);
    let mut checked = 0;
    let mut record = |name: &str, idx: usize, a: f64, num: f64| {
        let r = relative_error(a, num);
        if r > max_rel || checked == 0 {
            max_rel = r;
            worst = (name.to_string(), idx);
        }
        checked += 1;
    };

    for (t, (name, &len)) in param_names.iter().zip(&param_lens).enumerate() {
        for idx in sample(&mut rng, len, per_tensor.min(len)).into_iter() {
            let mut probe = w.clone();
            let orig = probe.slices()[t][idx];
            probe.slices_mut()[t][idx] = orig + fd_step;
            let plus = batch_loss(batch, &probe, cfg)?;
            probe.slices_mut()[t][idx] = orig - fd_step;
            let minus = batch_loss(batch, &probe, cfg)?;
            let numeric = (plus - minus) / (2.0 * fd_step);
            record(name, idx, grads.slices()[t][idx], numeric);
        }
    }
    for (b, (x, _)) in batch.iter().enumerate() {
        let len = x.len();
        let name = format!("input.{b}");
        for idx in sample(&mut rng, len, per_tensor.min(len)).into_iter() {
            let mut probe: Vec<(Array2<f64>, usize)> = batch.to_vec();
            let cell = probe[b].0.as_slice_mut().expect("standard layout");
            let orig = cell[idx];
            cell[idx] = orig + fd_step;
            let plus = batch_loss(&probe, w, cfg)?;
            probe[b].0.as_slice_mut().expect("standard layout")[idx] = orig - fd_step;
            let minus = batch_loss(&probe, w, cfg)?;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let analytic = input_grads[b].as_slice().expect("standard layout")[idx];
            record(&name, idx, analytic, numeric);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::init_head;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(margin: f64) -> (HeadWeights, Vec<(Array2<f64>, usize)>, HeadConfig) {
        let cfg = HeadConfig {
            input_dim: 8,
            tdnn_dim: 16,
            embed_dim: 8,
            n_classes: 4,
            margin,
            ..Default::default()
        };
        let w = init_head(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let batch = (0..4)
            .map(|i| (Array2::from_shape_simple_fn((12, 8), || rng.gen_range(-1.0..1.0)), i % 4))
            .collect();
        (w, batch, cfg)
    }

    #[test]
    fn small_head_passes() {
        let (w, batch, cfg) = setup(0.35);
        let r = grad_check(&w, &batch, &cfg, 1e-5, 200, 1).unwrap();
        assert!(r.coords_checked >= 200);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_margin_passes() {
        // s = 32 without a margin saturates the softmax; gradients of ~1e-7
        // then sit below finite-difference resolution
        let (w, batch, mut cfg) = setup(0.0);
        cfg.scale = 8.0;
        let r = grad_check(&w, &batch, &cfg, 1e-5, 200, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_step_rejected() {
        let (w, batch, cfg) = setup(0.35);
        assert!(grad_check(&w, &batch, &cfg, 0.0, 200, 1).is_err());
    }
}
