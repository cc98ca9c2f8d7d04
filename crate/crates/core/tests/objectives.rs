use biost::networks::{build_autoencoder, Autoencoder, Domain, Mode, NetConfig};
use biost::objectives::{
    backward_terms, phase2_total, CycleToggles, DetachMask, LossWeights, Net, Pass, Term,
};
use biost::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> NetConfig {
    NetConfig {
        image_channels: 3,
        image_size: 8,
        base_width: 2,
        n_residual_blocks: 1,
    }
}

fn batch(n: usize, salt: f32) -> Tensor<f32> {
    let s = cfg().image_size;
    let data = (0..n * 3 * s * s)
        .map(|i| (i as f32 * 0.37 + salt).sin() * 0.8)
        .collect();
    Tensor::from_vec(&[n, 3, s, s], data).unwrap()
}

/// Phase-II-like pair: A cloned from B, then perturbed so the two differ.
fn pair(seed: u64) -> (Autoencoder, Autoencoder) {
    let b = build_autoencoder(cfg(), seed, Domain::B).unwrap();
    let a = build_autoencoder(cfg(), seed + 100, Domain::A).unwrap();
    (a, b)
}

fn grads(a: &Autoencoder, b: &Autoencoder) -> [(Net, f32); 4] {
    [
        (Net::EncoderA, a.encoder.group().max_abs_grad()),
        (Net::DecoderA, a.decoder.group().max_abs_grad()),
        (Net::EncoderB, b.encoder.group().max_abs_grad()),
        (Net::DecoderB, b.decoder.group().max_abs_grad()),
    ]
}

fn grad_vectors(a: &Autoencoder, b: &Autoencoder) -> Vec<f32> {
    a.named_params()
        .into_iter()
        .chain(b.named_params())
        .flat_map(|(_, p)| p.read().grad.data().to_vec())
        .collect()
}

fn zero_all(a: &Autoencoder, b: &Autoencoder) {
    a.zero_grad();
    b.zero_grad();
}

fn run(a: &mut Autoencoder, b: &mut Autoencoder, term: Term, weight: f32) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    backward_terms(
        a,
        b,
        &batch(2, 0.1),
        &batch(2, 0.9),
        &[(term, weight)],
        false,
        &mut rng,
        Pass::Backward,
    )
    .unwrap()[0]
}

#[test]
fn each_term_leaves_its_masked_networks_untouched() {
    let (mut a, mut b) = pair(1);
    for term in Term::ALL {
        zero_all(&a, &b);
        run(&mut a, &mut b, term, 1.0);
        let mask = DetachMask::of(term);
        for (net, g) in grads(&a, &b) {
            if mask.freezes(net) {
                assert_eq!(g, 0.0, "{term:?} wrote gradient into {net:?}");
            }
        }
    }
}

#[test]
fn bab_cycle_reaches_encoder_b_through_frozen_pair() {
    let (mut a, mut b) = pair(2);
    zero_all(&a, &b);
    run(&mut a, &mut b, Term::BabCycle, 1.0);
    let g = grads(&a, &b);
    assert_eq!(g[0].1, 0.0);
    assert_eq!(g[1].1, 0.0);
    assert!(g[2].1 > 0.0, "E_B gradient {}", g[2].1);
    assert!(g[3].1 > 0.0);
}

#[test]
fn f_cycle_updates_both_a_networks() {
    let (mut a, mut b) = pair(3);
    zero_all(&a, &b);
    run(&mut a, &mut b, Term::FCycle, 1.0);
    let g = grads(&a, &b);
    assert!(g[0].1 > 0.0 && g[1].1 > 0.0);
    assert_eq!(g[2].1, 0.0);
    assert_eq!(g[3].1, 0.0, "D_B is not part of the feature cycle");
}

#[test]
fn gradient_sources_per_network() {
    let (mut a, mut b) = pair(4);
    let mut sources: Vec<(Net, Vec<Term>)> =
        [Net::EncoderA, Net::DecoderA, Net::EncoderB, Net::DecoderB]
            .into_iter()
            .map(|n| (n, Vec::new()))
            .collect();
    for term in Term::ALL {
        zero_all(&a, &b);
        run(&mut a, &mut b, term, 1.0);
        for (i, (_, g)) in grads(&a, &b).into_iter().enumerate() {
            if g > 0.0 {
                sources[i].1.push(term);
            }
        }
    }
    use Term::*;
    assert_eq!(sources[0].1, vec![RecA, VaeA, AbaCycle, FCycle]);
    assert_eq!(sources[1].1, vec![RecA, AbaCycle, FCycle]);
    assert_eq!(sources[2].1, vec![RecB, VaeB, BabCycle]);
    assert_eq!(sources[3].1, vec![RecB, BabCycle]);
}

#[test]
fn term_weight_scales_gradients_exactly() {
    let (mut a, mut b) = pair(5);
    for term in Term::ALL {
        zero_all(&a, &b);
        run(&mut a, &mut b, term, 1.0);
        let g1 = grad_vectors(&a, &b);
        zero_all(&a, &b);
        run(&mut a, &mut b, term, 4.0);
        let g4 = grad_vectors(&a, &b);
        for (x, y) in g1.iter().zip(&g4) {
            assert_eq!(x * 4.0, *y, "{term:?}");
        }
    }
}

fn l1(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn term_values_match_tensor_level_recomputation() {
    let (mut a, mut b) = pair(6);
    let (xa, xb) = (batch(2, 0.1), batch(2, 0.9));
    let t = Mode::Train;
    let enc_b = b.encode_tensor(&xb, t).unwrap();
    let enc_a = a.encode_tensor(&xa, t).unwrap();
    let expect = [
        (Term::RecB, l1(&b.decode_tensor(&enc_b, t).unwrap(), &xb)),
        (
            Term::VaeB,
            0.5 * enc_b.dot(&enc_b) as f64 / enc_b.len() as f64,
        ),
        (Term::RecA, l1(&a.decode_tensor(&enc_a, t).unwrap(), &xa)),
        (
            Term::BabCycle,
            l1(
                &b.decode_tensor(
                    &a.encode_tensor(&a.decode_tensor(&enc_b, t).unwrap(), t)
                        .unwrap(),
                    t,
                )
                .unwrap(),
                &xb,
            ),
        ),
        (
            Term::AbaCycle,
            l1(
                &a.decode_tensor(
                    &b.encode_tensor(&b.decode_tensor(&enc_a, t).unwrap(), t)
                        .unwrap(),
                    t,
                )
                .unwrap(),
                &xa,
            ),
        ),
        (
            Term::FCycle,
            l1(
                &a.encode_tensor(&a.decode_tensor(&enc_b, t).unwrap(), t)
                    .unwrap(),
                &enc_b,
            ),
        ),
    ];
    for (term, want) in expect {
        let got = run(&mut a, &mut b, term, 1.0) as f64;
        assert!(got >= 0.0);
        assert!(
            (got - want).abs() <= 1e-6 * want.max(1.0),
            "{term:?}: {got} vs {want}"
        );
    }
}

#[test]
fn cycles_reduce_to_double_reconstruction_on_clones() {
    let mut b = build_autoencoder(cfg(), 7, Domain::B).unwrap();
    let mut a = b.clone_params(Domain::A);
    let s = batch(2, 0.4);
    let t = Mode::Train;
    let twice = |ae: &Autoencoder, x: &Tensor<f32>| {
        let r = ae.reconstruct_tensor(x, t).unwrap();
        ae.reconstruct_tensor(&r, t).unwrap()
    };
    let double_b = l1(&twice(&b, &s), &s) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bab = backward_terms(
        &mut a,
        &mut b,
        &s,
        &s,
        &[(Term::BabCycle, 1.0)],
        false,
        &mut rng,
        Pass::ForwardOnly,
    )
    .unwrap()[0];
    let aba = backward_terms(
        &mut a,
        &mut b,
        &s,
        &s,
        &[(Term::AbaCycle, 1.0)],
        false,
        &mut rng,
        Pass::ForwardOnly,
    )
    .unwrap()[0];
    assert!((bab - double_b).abs() <= 1e-6);
    assert_eq!(
        bab, aba,
        "swapping roles of identical clones gives the same cycle"
    );
}

#[test]
fn forward_only_pass_writes_nothing() {
    let (mut a, mut b) = pair(8);
    zero_all(&a, &b);
    let before: Vec<Vec<f32>> = b
        .named_params()
        .iter()
        .map(|(_, p)| p.read().value.data().to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toggles = CycleToggles {
        fcycle_random: true,
        ..CycleToggles::default()
    };
    let r = phase2_total(
        &mut a,
        &mut b,
        &batch(2, 0.2),
        &batch(2, 0.5),
        &LossWeights::default(),
        &toggles,
        &mut rng,
        Pass::ForwardOnly,
    )
    .unwrap();
    assert!(r.fcycle.unwrap() > 0.0);
    assert!(grad_vectors(&a, &b).iter().all(|&g| g == 0.0));
    let after: Vec<Vec<f32>> = b
        .named_params()
        .iter()
        .map(|(_, p)| p.read().value.data().to_vec())
        .collect();
    assert_eq!(before, after);
    assert!(
        !a.encoder.is_frozen() && !b.encoder.is_frozen(),
        "mask restored"
    );
}

#[test]
fn mismatched_masks_in_one_graph_are_rejected() {
    let (mut a, mut b) = pair(9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = backward_terms(
        &mut a,
        &mut b,
        &batch(2, 0.0),
        &batch(2, 0.0),
        &[(Term::RecB, 1.0), (Term::BabCycle, 1.0)],
        false,
        &mut rng,
        Pass::Backward,
    );
    assert!(err.is_err());
}
