//! Finite-difference verification of the analytic gradients through the
//! full network and HPML loss at 64-bit precision.

use ndarray::{Array2, Array4, ArrayD, Axis};
use polyseg_core::engine::{fd_check, Graph};
use polyseg_core::hierarchy::TargetFormat;
use polyseg_core::loss::{targets_per_scale, total_loss_node, FormatGroup};
use polyseg_core::network::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        decoder_width: 6,
        patch: 16,
        seed: 42,
    }
}

fn make_batch(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (ArrayD<f64>, Vec<FormatGroup<f64>>) {
    let mut input = Array4::<f64>::zeros((n, 3, p, p));
    for v in input.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    // one item per format, random labels within range
    let formats = TargetFormat::ALL;
    let mut groups = Vec::new();
    for (i, &f) in formats.iter().take(n).enumerate() {
        let mut labels = Array2::<u8>::zeros((p, p));
        for v in labels.iter_mut() {
            *v = rng.random_range(0..f.channels() as u8);
        }
        let targets = targets_per_scale::<f64>(&[labels.view()], f).unwrap();
        groups.push(FormatGroup {
            format: f,
            indices: vec![i],
            targets,
        });
    }
    (input.into_dyn(), groups)
}

/// The loss as a pure function of the parameter vector (used by the
/// finite-difference probes). Running statistics are restored after each
/// call so probes see identical state.
fn loss_fn(model: &Model<f64>, input: &ArrayD<f64>, groups: &[FormatGroup<f64>], params: &[ArrayD<f64>]) -> f64 {
    let mut m = model.cast::<f64>();
    m.params = params.to_vec();
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, input.clone()).unwrap();
    let (total, _) = total_loss_node(&mut g, &out, groups).unwrap();
    g.scalar_value(total)
}

#[test]
fn fd_matches_analytic_on_tiny_model() {
    let model = Model::<f64>::new(tiny_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let (input, groups) = make_batch(&mut rng, 5, 16);

    // analytic gradients at the base point
    let mut m = model.cast::<f64>();
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, input.clone()).unwrap();
    let (total, _) = total_loss_node(&mut g, &out, &groups).unwrap();
    let grads = g.backward(total, m.params.len()).unwrap();
    let analytic: Vec<ArrayD<f64>> = (0..m.params.len())
        .map(|i| grads.get(i, m.params[i].shape()))
        .collect();

    // sample coordinates across all parameters
    let mut coords = Vec::new();
    let mut crng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..60 {
        let pi = crng.random_range(0..model.params.len());
        let off = crng.random_range(0..model.params[pi].len());
        coords.push((pi, off));
    }
    let report = fd_check(
        |p| loss_fn(&model, &input, &groups, p),
        &model.params,
        &analytic,
        &coords,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        report.passed(),
        "max relative error {} over {} coords ({} excluded)",
        report.max_rel_err,
        report.rows.len(),
        report.excluded.len()
    );
}

/// Items of one format must leave the other heads untouched.
#[test]
fn untouched_head_gets_zero_gradient() {
    let model = Model::<f64>::new(tiny_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = 16;
    let mut input = Array4::<f64>::zeros((1, 3, p, p));
    for v in input.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let mut labels = Array2::<u8>::zeros((p, p));
    for v in labels.iter_mut() {
        *v = rng.random_range(0..2);
    }
    let targets = targets_per_scale::<f64>(&[labels.view()], TargetFormat::Airway).unwrap();
    let groups = vec![FormatGroup {
        format: TargetFormat::Airway,
        indices: vec![0],
        targets,
    }];
    let mut m = model.cast::<f64>();
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, input.into_dyn()).unwrap();
    let (total, _) = total_loss_node(&mut g, &out, &groups).unwrap();
    let grads = g.backward(total, m.params.len()).unwrap();

    // airway loss must produce nonzero gradient somewhere (encoder shared)
    let any_nonzero = (0..m.params.len()).any(|i| !grads.is_zero(i));
    assert!(any_nonzero);

    // poly and vessel head parameters come after the shared trunk: verify
    // via a fresh forward where those outputs are perturbed — instead, use
    // the structural fact that select_rows only touched airway outputs by
    // checking the gradient of the final poly/vessel head convs is zero.
    // Their parameter indices are located by shape: the 4-channel and the
    // later 2-channel 1x1 convs.
    let mut poly_final = Vec::new();
    for (i, prm) in m.params.iter().enumerate() {
        let s = prm.shape();
        if s.len() == 4 && s[0] == 4 && s[2] == 1 && s[3] == 1 {
            poly_final.push(i);
        }
    }
    assert!(!poly_final.is_empty());
    for i in poly_final {
        assert!(grads.is_zero(i), "poly head conv {i} should have zero grad");
    }
    let _ = Axis(0);
}
