use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check_params, Optimizer};

fn toy_hyper() -> DseHyper {
    DseHyper { seq_len: 4, feat_dim: 3, latent_dim: 2, hidden: 2, ..DseHyper::default() }
}

fn model(h: &DseHyper, seed: u64) -> (ParamStore, DseParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = DseParams::new(&mut store, "dse", h, &mut rng).unwrap();
    (store, params)
}

fn rand_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
    Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn samples(h: &DseHyper, n: usize, seed: u64) -> Vec<DseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rand_seq(&mut rng, h.seq_len, h.feat_dim);
            DseSample::draw(x, h, &mut rng).unwrap()
        })
        .collect()
}

fn zero_params(store: &mut ParamStore, ids: &[crate::numerics::ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

// ---- encode -----------------------------------------------------------------

#[test]
fn zero_static_heads_give_standard_posterior() {
    let h = toy_hyper();
    let (mut store, params) = model(&h, 1);
    let ids = [params.static_mu.weight, params.static_mu.bias, params.static_log_sigma.weight, params.static_log_sigma.bias];
    zero_params(&mut store, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_seq(&mut rng, 4, 3);
    let lat = encode(&store, &params, &x, &mut rng).unwrap();
    assert_eq!(lat.q_s.mu.data(), &[0.0, 0.0]);
    assert_eq!(lat.q_s.log_sigma.data(), &[0.0, 0.0]);
    assert_eq!(lat.s.data(), lat.eps_s.data());
}

#[test]
fn encode_is_deterministic_given_noise() {
    let h = toy_hyper();
    let (store, params) = model(&h, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_seq(&mut rng, 4, 3);
    let a = encode(&store, &params, &x, &mut rng).unwrap();
    let b = encode_with(&store, &params, &x, &a.eps_s, &a.eps_z).unwrap();
    assert_eq!(a, b);
    assert!(encode(&store, &params, &Tensor::zeros(&[0, 3]), &mut rng).is_err());
}

#[test]
fn sample_mean_of_static_factor_converges() {
    let h = toy_hyper();
    let (store, params) = model(&h, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_seq(&mut rng, 4, 3);
    let n = 10_000;
    let t = Tape::new();
    let p = store.bind_frozen(&t);
    let steps: Vec<Var> = (0..4)
        .map(|i| t.constant(Tensor::matrix(n, 3, x.row_slice(i).repeat(n)).unwrap()))
        .collect();
    let eps_z: Vec<Var> = (0..4).map(|_| t.constant(Tensor::zeros(&[n, 2]))).collect();
    let eps_s = t.constant(standard_normal(&mut rng, &[n, 2]));
    let enc = encode_batch(&p, &params, &steps, eps_s, &eps_z).unwrap();
    let s = t.to_tensor(enc.s);
    let mu = t.to_tensor(enc.mu_s);
    let ls = t.to_tensor(enc.log_sigma_s);
    for c in 0..2 {
        let mean = (0..n).map(|i| s.at(i, c)).sum::<f64>() / n as f64;
        let sigma = ls.at(0, c).exp();
        assert!((mean - mu.at(0, c)).abs() <= 3.0 * sigma / 100.0, "coord {c}");
    }
}

// ---- prior / decode ---------------------------------------------------------

#[test]
fn zero_prior_is_standard_normal() {
    let h = toy_hyper();
    let (mut store, params) = model(&h, 7);
    let ids = [params.prior_mu.weight, params.prior_mu.bias, params.prior_log_sigma.weight, params.prior_log_sigma.bias];
    zero_params(&mut store, &ids);
    for len in 0..4 {
        let prefix = Tensor::full(&[len, 2], 0.7);
        let g = prior_step_params(&store, &params, &prefix).unwrap();
        assert_eq!(g, GaussianParams::standard(2));
    }
}

#[test]
fn prior_is_a_pure_function_of_the_prefix() {
    let h = toy_hyper();
    let (store, params) = model(&h, 8);
    let prefix = t2(&[&[0.1, -0.2], &[0.5, 0.3]]);
    let a = prior_step_params(&store, &params, &prefix).unwrap();
    let b = prior_step_params(&store, &params, &prefix).unwrap();
    assert_eq!(a, b);
    let c = prior_step_params(&store, &params, &Tensor::zeros(&[0, 2])).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prior_path_gradient_matches_finite_differences() {
    let h = toy_hyper();
    let (store, params) = model(&h, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z: Vec<Tensor> = (0..4).map(|_| standard_normal(&mut rng, &[2, 2])).collect();
    let mu_q = standard_normal(&mut rng, &[2, 2]);
    let err = grad_check_params(
        &store,
        |p| {
            let t = p.tape;
            let zs: Vec<Var> = z.iter().map(|x| t.constant(x.clone())).collect();
            let (pm, pl) = prior_batch(p, &params, &zs)?;
            let mut acc = t.constant(Tensor::scalar(0.0));
            for i in 0..4 {
                let q = t.constant(mu_q.clone());
                let k = kl_rows(t, q, t.constant(Tensor::zeros(&[2, 2])), pm[i], pl[i])?;
                acc = t.add(acc, t.sum(k)?)?;
            }
            Ok(acc)
        },
        1e-6,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn zero_decoder_reconstructs_zeros() {
    let h = toy_hyper();
    let (mut store, params) = model(&h, 11);
    let d = params.decoder;
    zero_params(&mut store, &[d.hidden.weight, d.hidden.bias, d.out.weight, d.out.bias]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lat = encode(&store, &params, &rand_seq(&mut rng, 4, 3), &mut rng).unwrap();
    assert!(decode(&store, &params, &lat).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_is_shared_across_time() {
    let h = toy_hyper();
    let (store, params) = model(&h, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut lat = encode(&store, &params, &rand_seq(&mut rng, 4, 3), &mut rng).unwrap();
    let row0 = lat.z.row_slice(0).to_vec();
    lat.z.data_mut()[4..6].copy_from_slice(&row0);
    let x = decode(&store, &params, &lat).unwrap();
    assert_eq!(x.row_slice(0), x.row_slice(2));
    assert_ne!(x.row_slice(0), x.row_slice(1));
}

#[test]
fn decode_gradient_matches_finite_differences() {
    let h = toy_hyper();
    let (store, params) = model(&h, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = standard_normal(&mut rng, &[2, 2]);
    let z: Vec<Tensor> = (0..3).map(|_| standard_normal(&mut rng, &[2, 2])).collect();
    let err = grad_check_params(
        &store,
        |p| {
            let t = p.tape;
            let zs: Vec<Var> = z.iter().map(|x| t.constant(x.clone())).collect();
            let xs = decode_batch(p, &params, t.constant(s.clone()), &zs)?;
            t.sum(t.square(t.vcat(&xs)?)?)
        },
        1e-6,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

// ---- KL -----------------------------------------------------------------------

#[test]
fn kl_closed_forms() {
    let std = GaussianParams::standard(1);
    assert_eq!(kl_gaussian(&std, &std).unwrap(), 0.0);
    let shifted = GaussianParams { mu: Tensor::row(&[1.0]), log_sigma: Tensor::row(&[0.0]) };
    assert!((kl_gaussian(&shifted, &std).unwrap() - 0.5).abs() <= 1e-12);
    assert!(kl_gaussian(&shifted, &GaussianParams::standard(2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn kl_is_nonnegative(
        mq in prop::collection::vec(-3.0f64..3.0, 3),
        lq in prop::collection::vec(-2.0f64..2.0, 3),
        mp in prop::collection::vec(-3.0f64..3.0, 3),
        lp in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let q = GaussianParams { mu: Tensor::row(&mq), log_sigma: Tensor::row(&lq) };
        let p = GaussianParams { mu: Tensor::row(&mp), log_sigma: Tensor::row(&lp) };
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= -1e-12);
    }

    #[test]
    fn pair_hinge_stays_in_range(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        delta in 0.0f64..0.99,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-6) && b.iter().any(|v| v.abs() > 1e-6));
        let (ls, lz) = pair_contrastive_losses(&Tensor::row(&a), &Tensor::row(&b), &Tensor::row(&b), &Tensor::row(&a), delta).unwrap();
        prop_assert!((0.0..=1.0 - delta + 1e-12).contains(&ls));
        prop_assert_eq!(ls, lz);
    }

    #[test]
    fn contrastive_mi_negative_and_increasing_in_positive_cosine(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        n in prop::collection::vec(-1.0f64..1.0, 3),
        w in 0.05f64..0.95,
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3 && n.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let anchor = Tensor::row(&a);
        // a positive that is further from the anchor than the anchor itself
        let mixed: Vec<f64> = a.iter().zip(&n).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        prop_assume!(mixed.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let negs = [Tensor::row(&n)];
        let near = contrastive_mi(&anchor, &anchor, &negs, 0.5).unwrap();
        let far = contrastive_mi(&anchor, &Tensor::row(&mixed), &negs, 0.5).unwrap();
        prop_assert!(near < 0.0 && far < 0.0);
        prop_assert!(near >= far);
    }
}

// ---- contrastive ----------------------------------------------------------------

#[test]
fn contrastive_score_examples() {
    let x = Tensor::row(&[1.0, 2.0]);
    assert!((contrastive_score(&x, &x, 0.5).unwrap() - 7.389056).abs() < 1e-6);
    let o = Tensor::row(&[-2.0, 1.0]);
    assert!((contrastive_score(&x, &o, 0.5).unwrap() - 1.0).abs() < 1e-15);
    let neg = Tensor::row(&[-1.0, -2.0]);
    assert!((contrastive_score(&x, &neg, 0.5).unwrap() - 0.135335).abs() < 1e-6);
    assert!(matches!(
        contrastive_score(&x, &Tensor::row(&[0.0, 0.0]), 0.5),
        Err(Error::ZeroNorm { .. })
    ));
}

#[test]
fn contrastive_mi_examples() {
    let a = Tensor::row(&[1.0, 0.0]);
    let o = Tensor::row(&[0.0, 1.0]);
    let e2 = 2f64.exp();
    let v = contrastive_mi(&a, &a, std::slice::from_ref(&o), 0.5).unwrap();
    assert!((v - (e2 / (e2 + 1.0)).ln()).abs() <= 1e-12);
    assert!((v + 0.126928).abs() < 1e-6);
    let mut prev = 0.0;
    for n in 1..6 {
        let negs = vec![o.clone(); n];
        let v = contrastive_mi(&a, &a, &negs, 0.5).unwrap();
        assert!((v - (e2 / (e2 + n as f64)).ln()).abs() <= 1e-12);
        assert!(v < prev);
        prev = v;
    }
    assert!(contrastive_mi(&a, &a, &[], 0.5).is_err());
}

#[test]
fn mi_terms_match_hand_evaluation() {
    let z = t2(&[&[1.0, 0.0, 0.5], &[0.2, 1.0, -0.3]]);
    let zm = t2(&[&[0.9, 0.1, 0.4], &[0.0, 1.0, 0.0]]);
    let s = t2(&[&[1.0, 1.0], &[1.0, -1.0]]);
    let sc = t2(&[&[0.8, 1.0], &[0.5, -1.0]]);
    let row = |m: &Tensor, i: usize| Tensor::row(m.row_slice(i));
    let c = |a: &Tensor, p: &Tensor| -> f64 {
        (0..2).map(|i| contrastive_mi(&row(a, i), &row(p, i), &[row(p, 1 - i)], 0.5).unwrap()).sum::<f64>() / 2.0
    };
    let want_z = 0.5 * (c(&z, &zm) + c(&zm, &z));
    let want_s = 0.5 * (c(&s, &sc) + c(&sc, &s));

    let t = Tape::new();
    let k = |m: &Tensor| t.constant(m.clone());
    let (iz, is) = mi_terms(&t, k(&z), k(&zm), k(&s), k(&sc), 0.5, None).unwrap();
    assert!((t.scalar_value(iz) - want_z).abs() < 1e-12);
    assert!((t.scalar_value(is) - want_s).abs() < 1e-12);
    assert!(want_z <= 0.0 && want_s <= 0.0);

    // reversed batch order
    let r = |m: &Tensor| m.select_rows(&[1, 0]).unwrap();
    let (iz2, is2) = mi_terms(&t, k(&r(&z)), k(&r(&zm)), k(&r(&s)), k(&r(&sc)), 0.5, None).unwrap();
    assert!((t.scalar_value(iz2) - want_z).abs() < 1e-12);
    assert!((t.scalar_value(is2) - want_s).abs() < 1e-12);

    let one = k(&row(&z, 0));
    assert!(mi_terms(&t, one, one, one, one, 0.5, None).is_err());
}

#[test]
fn restricted_negatives_use_following_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = standard_normal(&mut rng, &[4, 3]);
    let p = standard_normal(&mut rng, &[4, 3]);
    let t = Tape::new();
    let v = contrastive_term(&t, t.constant(a.clone()), t.constant(p.clone()), 0.5, Some(1)).unwrap();
    let row = |m: &Tensor, i: usize| Tensor::row(m.row_slice(i));
    let want = (0..4)
        .map(|i| contrastive_mi(&row(&a, i), &row(&p, i), &[row(&p, (i + 1) % 4)], 0.5).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((t.scalar_value(v) - want).abs() < 1e-12);
}

// ---- I(z; s) --------------------------------------------------------------------

fn mi_zs_value(s: &Tensor, mu_s: &Tensor, ls_s: &Tensor, z: &Tensor, mu_z: &Tensor, ls_z: &Tensor) -> f64 {
    let t = Tape::new();
    let k = |m: &Tensor| t.constant(m.clone());
    t.scalar_value(mi_zs_penalty(&t, k(s), k(mu_s), k(ls_s), k(z), k(mu_z), k(ls_z)).unwrap())
}

#[test]
fn mi_zs_of_delta_posteriors_is_log_two() {
    let s = t2(&[&[0.0, 0.0], &[5.0, 5.0]]);
    let z = t2(&[&[1.0, -1.0, 0.0], &[-3.0, 2.0, 4.0]]);
    let ls_s = Tensor::full(&[2, 2], -6.0);
    let ls_z = Tensor::full(&[2, 3], -6.0);
    let v = mi_zs_value(&s, &s, &ls_s, &z, &z, &ls_z);
    assert!((v - 2f64.ln()).abs() < 1e-9, "{v}");
}

#[test]
fn mi_zs_of_identical_posteriors_is_zero() {
    let mu_s = t2(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]]);
    let mu_z = t2(&[&[1.0], &[1.0], &[1.0]]);
    let s = t2(&[&[0.0, 0.5], &[1.0, -0.4], &[0.2, 0.2]]);
    let z = t2(&[&[0.7], &[1.4], &[0.9]]);
    let v = mi_zs_value(&s, &mu_s, &Tensor::zeros(&[3, 2]), &z, &mu_z, &Tensor::zeros(&[3, 1]));
    assert!(v.abs() < 1e-12);
}

#[test]
fn shuffling_the_pairing_does_not_increase_mi_zs_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (b, trials) = (6, 200);
    let (mut paired, mut shuffled) = (0.0, 0.0);
    for _ in 0..trials {
        // z carries s plus noise
        let mu_s = standard_normal(&mut rng, &[b, 2]);
        let noise = standard_normal(&mut rng, &[b, 2]).map(|v| 0.3 * v);
        let mu_z = Tensor::new(vec![b, 2], mu_s.data().iter().zip(noise.data()).map(|(a, n)| a + n).collect()).unwrap();
        let ls = Tensor::full(&[b, 2], -1.0);
        let draw = |mu: &Tensor, rng: &mut ChaCha8Rng| {
            let e = standard_normal(rng, &[b, 2]);
            Tensor::new(vec![b, 2], mu.data().iter().zip(e.data()).map(|(m, e)| m + (-1f64).exp() * e).collect()).unwrap()
        };
        let s = draw(&mu_s, &mut rng);
        let z = draw(&mu_z, &mut rng);
        paired += mi_zs_value(&s, &mu_s, &ls, &z, &mu_z, &ls);
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let zp = z.select_rows(&perm).unwrap();
        let mzp = mu_z.select_rows(&perm).unwrap();
        shuffled += mi_zs_value(&s, &mu_s, &ls, &zp, &mzp, &ls);
    }
    assert!(shuffled <= paired, "{shuffled} > {paired}");
}

// ---- augmentation -----------------------------------------------------------------

#[test]
fn content_augment_permutes_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_seq(&mut rng, 6, 3);
    let y = content_augment(&x, &mut rng).unwrap();
    let key = |m: &Tensor| {
        let mut rows: Vec<Vec<u64>> = (0..m.rows()).map(|i| m.row_slice(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows
    };
    assert_eq!(key(&x), key(&y));
    let same = Tensor::full(&[5, 2], 0.25);
    assert_eq!(content_augment(&same, &mut rng).unwrap(), same);
    assert!(content_augment(&Tensor::zeros(&[1, 2]), &mut rng).is_err());
}

#[test]
fn content_augment_of_two_frames_is_a_fair_coin() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = t2(&[&[1.0], &[2.0]]);
    let n = 10_000;
    let swaps = (0..n).filter(|_| content_augment(&x, &mut rng).unwrap().data()[0] == 2.0).count();
    let sd = (n as f64 * 0.25).sqrt();
    assert!((swaps as f64 - n as f64 / 2.0).abs() <= 3.0 * sd, "{swaps}");
}

#[test]
fn motion_augment_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_seq(&mut rng, 4, 3);
    assert_eq!(motion_augment(&x, &mut rng, 0.0).unwrap(), x);
    let n = 10_000;
    let mut sq = vec![0.0; 12];
    for _ in 0..n {
        let y = motion_augment(&x, &mut rng, 0.3).unwrap();
        for (k, (a, b)) in y.data().iter().zip(x.data()).enumerate() {
            sq[k] += (a - b) * (a - b);
        }
    }
    for s in sq {
        let sd = (s / n as f64).sqrt();
        assert!((sd - 0.3).abs() <= 0.015, "{sd}");
    }
    // frames stay in place: small noise never moves a frame closer to another
    let y = motion_augment(&x, &mut rng, 1e-6).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-4);
    assert!(motion_augment(&x, &mut rng, -1.0).is_err());
}

// ---- losses ------------------------------------------------------------------------

#[test]
fn sequence_loss_without_regularisers_is_reconstruction() {
    let h = DseHyper { gamma: 0.0, theta: 0.0, ..toy_hyper() };
    let (store, params) = model(&h, 22);
    let batch = samples(&h, 3, 23);
    let refs: Vec<&DseSample> = batch.iter().collect();
    let t = Tape::new();
    let p = store.bind(&t);
    let terms = dse_loss(&p, &params, &refs, &h).unwrap().values(&t);
    assert_eq!(terms.total, terms.recon);

    // reconstruction oracle from the single-sequence path
    let mut want = 0.0;
    for s in &batch {
        let lat = encode_with(&store, &params, &s.x, &s.eps_s, &s.eps_z).unwrap();
        let xh = decode(&store, &params, &lat).unwrap();
        want += 0.5 * xh.data().iter().zip(s.x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    assert!((terms.recon - want / 3.0).abs() < 1e-12);
    assert!(terms.kl_s >= 0.0 && terms.kl_z >= 0.0);
}

#[test]
fn sequence_loss_is_invariant_to_batch_order() {
    let h = toy_hyper();
    let (store, params) = model(&h, 24);
    let batch = samples(&h, 4, 25);
    let value = |order: &[usize]| {
        let refs: Vec<&DseSample> = order.iter().map(|&i| &batch[i]).collect();
        let t = Tape::new();
        let p = store.bind(&t);
        dse_loss(&p, &params, &refs, &h).unwrap().values(&t).total
    };
    let a = value(&[0, 1, 2, 3]);
    let b = value(&[2, 0, 3, 1]);
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn sequence_loss_gradient_matches_finite_differences() {
    let h = toy_hyper();
    let (store, params) = model(&h, 26);
    let batch = samples(&h, 2, 27);
    let refs: Vec<&DseSample> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let err = grad_check_params(&store, |p| Ok(dse_loss(p, &params, &refs, &h)?.total), 1e-6, None, &mut rng).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn pair_contrastive_examples() {
    let a = Tensor::row(&[1.0, 2.0]);
    let o = Tensor::row(&[2.0, -1.0]);
    let (ls, lz) = pair_contrastive_losses(&a, &a, &a, &o, 0.2).unwrap();
    assert!((ls - 0.8).abs() < 1e-15);
    assert_eq!(lz, 0.0);
    assert!(pair_contrastive_losses(&a, &Tensor::row(&[0.0, 0.0]), &a, &a, 0.2).is_err());
}

fn paired_forward<'t>(
    p: &Bound<'t>,
    params: &DseParams,
    batch: &[DseSample],
    h: &DseHyper,
    pair_losses: bool,
) -> DsePlusTerms {
    let refs: Vec<&DseSample> = batch.iter().collect();
    let f = dse_forward(p, params, &refs).unwrap();
    let n = batch.len() / 2;
    let r1: Vec<usize> = (0..n).collect();
    let r2: Vec<usize> = (n..2 * n).collect();
    dse_plus_terms(p.tape, &f, &r1, &r2, h, pair_losses).unwrap()
}

#[test]
fn inactive_hinges_leave_the_sequence_losses() {
    let h = DseHyper { delta: 1.0, ..toy_hyper() };
    let (store, params) = model(&h, 29);
    let batch = samples(&h, 4, 30);
    let t = Tape::new();
    let p = store.bind(&t);
    let terms = paired_forward(&p, &params, &batch, &h, true);
    assert_eq!(t.scalar_value(terms.contra_s), 0.0);
    assert_eq!(t.scalar_value(terms.contra_z), 0.0);
    let sum = t.scalar_value(terms.obj1.total) + t.scalar_value(terms.obj2.total);
    assert_eq!(t.scalar_value(terms.total), sum);

    // the per-object terms match separate sequence losses
    let t2 = Tape::new();
    let p2 = store.bind(&t2);
    let first: Vec<&DseSample> = batch[..2].iter().collect();
    let sep = dse_loss(&p2, &params, &first, &h).unwrap().values(&t2).total;
    assert!((sep - t.scalar_value(terms.obj1.total)).abs() < 1e-12);
}

#[test]
fn paired_loss_gradient_matches_finite_differences() {
    let h = DseHyper { delta: 0.0, ..toy_hyper() };
    let (store, params) = model(&h, 31);
    let batch = samples(&h, 6, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let err = grad_check_params(&store, |p| Ok(paired_forward(p, &params, &batch, &h, true).total), 1e-6, Some(150), &mut rng)
        .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn paired_loss_decreases_on_a_fixed_batch() {
    let h = DseHyper { seq_len: 6, feat_dim: 5, latent_dim: 3, hidden: 6, ..DseHyper::default() };
    let (mut store, params) = model(&h, 34);
    let batch = samples(&h, 8, 35);
    let mut opt = Optimizer::adam(3e-3, &store);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let t = Tape::new();
        let p = store.bind(&t);
        let terms = paired_forward(&p, &params, &batch, &h, true);
        last = t.scalar_value(terms.total);
        first.get_or_insert(last);
        let g = t.backward(terms.total).unwrap();
        let grads = p.grads(&g, &store);
        opt.step(&mut store, &grads, None).unwrap();
    }
    assert!(last < first.unwrap(), "{last} !< {first:?}");
}
