use petmr_core::checkpoint;
use petmr_core::models::*;
use petmr_core::tensor::{grad_check_sampled, DropoutMode, Graph, Tensor};
use petmr_core::{Image2D, Modality, Rng};

fn small_arch(heads: usize) -> Architecture {
    Architecture {
        channels: 4,
        dilations: vec![1, 2],
        ..Architecture::synthesis(heads)
    }
}

fn mr_image(n: usize, seed: u64) -> Image2D {
    let mut rng = Rng::new(seed);
    Image2D::new(
        n,
        n,
        3.0,
        Modality::Mr,
        (0..n * n).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn ct_image(n: usize, seed: u64) -> Image2D {
    let mut rng = Rng::new(seed);
    Image2D::new(
        n,
        n,
        3.0,
        Modality::CtHu,
        (0..n * n).map(|_| rng.uniform_range(-1000.0, 1200.0) as f32).collect(),
    )
    .unwrap()
}

#[test]
fn synthesis_outputs_one_image_per_head() {
    let m = SynthesisModel::new(Architecture::synthesis(3), 16, &mut Rng::new(1)).unwrap();
    let out = m.synth_forward(&mr_image(16, 2), DropoutMode::Off, &mut Rng::new(0)).unwrap();
    assert_eq!(out.len(), 3);
    for o in &out {
        assert_eq!((o.width(), o.height(), o.modality()), (16, 16, Modality::CtHu));
        assert!(o.data().iter().all(|v| v.is_finite()));
    }
    assert_ne!(out[0].data(), out[1].data());
    assert!(m.synth_forward(&mr_image(8, 2), DropoutMode::Off, &mut Rng::new(0)).is_err());
    assert!(m.synth_forward(&ct_image(16, 2), DropoutMode::Off, &mut Rng::new(0)).is_err());
}

#[test]
fn perturbing_one_head_leaves_the_others() {
    let mut m = SynthesisModel::new(small_arch(3), 12, &mut Rng::new(4)).unwrap();
    let mr = mr_image(12, 5);
    let before = m.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap();
    for name in m.net.head_param_names(1) {
        for v in m.net.params_mut().get_mut(&name).unwrap().data_mut() {
            *v += 0.3;
        }
    }
    let after = m.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap();
    assert_eq!(before[0], after[0]);
    assert_eq!(before[2], after[2]);
    assert_ne!(before[1], after[1]);
}

#[test]
fn copied_heads_give_identical_outputs() {
    let mut m = SynthesisModel::new(small_arch(2), 10, &mut Rng::new(6)).unwrap();
    let [w0, b0] = m.net.head_param_names(0);
    let [w1, b1] = m.net.head_param_names(1);
    let (w, b) = {
        let p = m.net.params();
        (p.get(&w0).unwrap().clone(), p.get(&b0).unwrap().clone())
    };
    *m.net.params_mut().get_mut(&w1).unwrap() = w;
    *m.net.params_mut().get_mut(&b1).unwrap() = b;
    let out = m.synth_forward(&mr_image(10, 1), DropoutMode::Off, &mut Rng::new(0)).unwrap();
    assert_eq!(out[0].data(), out[1].data());
}

#[test]
fn selected_head_reproduces_that_head() {
    let m = SynthesisModel::new(small_arch(3), 12, &mut Rng::new(8)).unwrap();
    let mr = mr_image(12, 3);
    let all = m.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap();
    let one = m.select_head(2).unwrap();
    assert_eq!(one.heads(), 1);
    let out = one.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap();
    assert_eq!(out, vec![all[2].clone()]);
    let back = SynthesisModel::from_checkpoint(one.to_checkpoint()).unwrap();
    assert_eq!(back.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap(), out);
    assert!(m.select_head(3).is_err());
}

#[test]
fn imitation_output_is_a_residual_map() {
    let m = ImitationModel::new(Architecture::imitation(), &mut Rng::new(2)).unwrap();
    let z = m.imitation_forward(&ct_image(16, 1), &ct_image(16, 2)).unwrap();
    assert_eq!(z.modality(), Modality::Residual);
    assert!(z.data().iter().all(|v| v.is_finite()));
    assert!(m.imitation_forward(&mr_image(16, 1), &ct_image(16, 2)).is_err());
    assert!(ImitationModel::new(Architecture::synthesis(1), &mut Rng::new(0)).is_err());
}

#[test]
fn mc_dropout_passes_differ_but_reproduce_under_a_seed() {
    let arch = Architecture {
        dropout: 0.2,
        ..small_arch(1)
    };
    let m = SynthesisModel::new(arch, 12, &mut Rng::new(8)).unwrap();
    let mr = mr_image(12, 9);
    let a = m.mc_dropout_sample(&mr, 3, &mut Rng::new(77)).unwrap();
    let b = m.mc_dropout_sample(&mr, 3, &mut Rng::new(77)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
    assert_ne!(a[1], a[2]);

    let plain = SynthesisModel::new(small_arch(1), 12, &mut Rng::new(8)).unwrap();
    assert!(plain.mc_dropout_sample(&mr, 3, &mut Rng::new(0)).is_err());
    let multi = SynthesisModel::new(
        Architecture {
            dropout: 0.2,
            ..small_arch(2)
        },
        12,
        &mut Rng::new(8),
    )
    .unwrap();
    assert!(multi.mc_dropout_sample(&mr, 3, &mut Rng::new(0)).is_err());
}

#[test]
fn checkpoints_round_trip_through_bytes() {
    let m = SynthesisModel::new(small_arch(3), 12, &mut Rng::new(3)).unwrap();
    let bytes = checkpoint::encode(&m.to_checkpoint());
    let back = SynthesisModel::from_checkpoint(checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.net.architecture(), m.net.architecture());
    assert_eq!(back.size, 12);
    let mr = mr_image(12, 4);
    assert_eq!(
        m.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap(),
        back.synth_forward(&mr, DropoutMode::Off, &mut Rng::new(0)).unwrap()
    );
    assert!(ImitationModel::from_checkpoint(m.to_checkpoint()).is_err());

    let g = ImitationModel::new(Architecture::imitation(), &mut Rng::new(3)).unwrap();
    let back = ImitationModel::from_checkpoint(checkpoint::decode(&checkpoint::encode(&g.to_checkpoint())).unwrap()).unwrap();
    assert_eq!(back.net.params(), g.net.params());
    assert!(SynthesisModel::from_checkpoint(g.to_checkpoint()).is_err());
}

#[test]
fn same_seed_same_initialization() {
    let a = Network::new(Architecture::synthesis(3), &mut Rng::new(5)).unwrap();
    let b = Network::new(Architecture::synthesis(3), &mut Rng::new(5)).unwrap();
    let c = Network::new(Architecture::synthesis(3), &mut Rng::new(6)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn invalid_architectures_are_rejected() {
    let mut rng = Rng::new(0);
    for arch in [
        Architecture { heads: 0, ..small_arch(1) },
        Architecture { kernel: 2, ..small_arch(1) },
        Architecture { dilations: vec![1, 0], ..small_arch(1) },
        Architecture { dropout: 1.0, ..small_arch(1) },
        Architecture { output_scale: 0.0, ..small_arch(1) },
    ] {
        assert!(Network::new(arch, &mut rng).is_err());
    }
}

/// Weighted sum of every head output; the weights break symmetry between
/// pixels and heads.
fn network_gradcheck(net: &Network, input: Tensor<f64>) -> f64 {
    let mut rng = Rng::new(99);
    let shape = input.shape().to_vec();
    let out_shape = [shape[0], 1, shape[2], shape[3]];
    let weights: Vec<Tensor<f64>> = (0..net.architecture().heads)
        .map(|_| Tensor::from_fn(&out_shape, |_| rng.normal()))
        .collect();
    let leaves: Vec<Tensor<f64>> = net.params().iter().map(|(_, t)| t.cast()).collect();
    let report = grad_check_sampled(
        |g: &mut Graph<f64>, v| {
            let x = g.constant(input.clone());
            let outs = net.forward(g, v, x, DropoutMode::Off, &mut Rng::new(0))?;
            let mut total = None;
            for (o, w) in outs.iter().zip(&weights) {
                let wv = g.constant(w.clone());
                let p = g.mul(*o, wv)?;
                let s = g.sum(p);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        },
        &leaves,
        1e-5,
        24,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn synthesis_network_gradients_match_finite_differences() {
    let net = Network::new(small_arch(2), &mut Rng::new(12)).unwrap();
    let mut rng = Rng::new(13);
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.uniform());
    let err = network_gradcheck(&net, x);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn imitation_network_gradients_match_finite_differences() {
    let arch = Architecture {
        channels: 4,
        dilations: vec![1, 2],
        ..Architecture::imitation()
    };
    let net = Network::new(arch, &mut Rng::new(14)).unwrap();
    let mut rng = Rng::new(15);
    let x = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.uniform_range(-1000.0, 1000.0));
    let err = network_gradcheck(&net, x);
    assert!(err < 1e-4, "max relative error {err}");
}
