use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check_params;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn imlm(d: usize, dr: usize, seed: u64) -> (ParamStore, ImlmParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = ImlmParams::new(&mut store, "imlm", d, dr, &mut rng).unwrap();
    (store, params)
}

fn zero(store: &mut ParamStore, mlp: &Mlp) {
    for id in [mlp.hidden.weight, mlp.hidden.bias, mlp.out.weight, mlp.out.bias] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn encoders_with_zero_weights_output_zero() {
    let (mut store, params) = imlm(3, 2, 1);
    zero(&mut store, &params.shared);
    zero(&mut store, &params.unique);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tape::new();
    let p = store.bind(&t);
    let x = t.constant(rand_mat(&mut rng, 4, 3));
    assert!(t.value(encode_shared(&p, &params, x).unwrap()).data().iter().all(|&v| v == 0.0));
    assert!(t.value(encode_unique(&p, &params, x).unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoders_share_weights_across_modalities_but_not_with_each_other() {
    let (mut store, params) = imlm(3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_mat(&mut rng, 1, 3);
    let run = |store: &ParamStore| {
        let t = Tape::new();
        let p = store.bind(&t);
        let xv = t.constant(x.clone());
        let sa = t.to_tensor(encode_shared(&p, &params, xv).unwrap());
        let sb = t.to_tensor(encode_shared(&p, &params, xv).unwrap());
        let u = t.to_tensor(encode_unique(&p, &params, xv).unwrap());
        (sa, sb, u)
    };
    let (sa, sb, u) = run(&store);
    assert_eq!(sa, sb);
    store.get_mut(params.shared.hidden.weight).data_mut()[0] += 0.5;
    let (sa2, _, u2) = run(&store);
    assert_ne!(sa, sa2);
    assert_eq!(u, u2);
}

#[test]
fn encoder_and_projection_gradients() {
    let (mut store, params) = imlm(3, 2, 5);
    // nonzero projection so every parameter has a gradient path
    for v in store.get_mut(params.projection.out.weight).data_mut() {
        *v = 0.3;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_mat(&mut rng, 3, 3);
    let err = grad_check_params(
        &store,
        |p| {
            let t = p.tape;
            let xv = t.constant(x.clone());
            let rs = encode_shared(p, &params, xv)?;
            let ru = encode_unique(p, &params, xv)?;
            let out = project_residual(p, &params, rs, ru, xv)?;
            let ul = unique_loss(p, &params, ru, &[0, 1, 2])?;
            t.add(t.sum(t.square(out)?)?, ul)
        },
        1e-6,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn zero_projection_is_identity_and_residual_is_additive() {
    let (store, params) = imlm(3, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = Tape::new();
    let p = store.bind(&t);
    let x = rand_mat(&mut rng, 2, 3);
    let (rs_t, ru_t) = (rand_mat(&mut rng, 2, 2), rand_mat(&mut rng, 2, 2));
    let rs = t.constant(rs_t.clone());
    let ru = t.constant(ru_t.clone());
    let out = project_residual(&p, &params, rs, ru, t.constant(x.clone())).unwrap();
    assert_eq!(t.to_tensor(out), x);

    let (mut store, params) = imlm(3, 2, 9);
    for v in store.get_mut(params.projection.out.weight).data_mut() {
        *v = 0.7;
    }
    let t = Tape::new();
    let p = store.bind(&t);
    let (rs, ru) = (t.constant(rs_t), t.constant(ru_t));
    let x2 = rand_mat(&mut rng, 2, 3);
    let a = t.to_tensor(project_residual(&p, &params, rs, ru, t.constant(x.clone())).unwrap());
    let b = t.to_tensor(project_residual(&p, &params, rs, ru, t.constant(x2.clone())).unwrap());
    // f(x) - x is independent of x
    for i in 0..6 {
        assert!(((a.data()[i] - x.data()[i]) - (b.data()[i] - x2.data()[i])).abs() < 1e-14);
    }
}

#[test]
fn mark_missing_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = mark_missing(10, 0.0, &mut rng).unwrap();
    assert!(m.missing.is_empty());
    assert_eq!(m.complete, (0..10).collect::<Vec<_>>());
    let m = mark_missing(10, 1.0, &mut rng).unwrap();
    assert!(m.complete.is_empty());
    let m = mark_missing(10, 0.3, &mut rng).unwrap();
    assert_eq!(m.missing.len(), 3);
    assert_eq!(m.missing.len() + m.complete.len(), 10);
    assert!(m.missing.iter().all(|i| !m.complete.contains(i)));
    assert!(m.missing.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(mark_missing(10, 0.7, &mut rng).unwrap().missing.len(), 7);
    assert_eq!(missing_count(100, 0.29), 29);
    assert_eq!(missing_count(16, 0.5), 8);
    assert_eq!(missing_count(7, 0.5), 3);
    assert!(mark_missing(10, 1.5, &mut rng).is_err());
    assert!(mark_missing(10, -0.1, &mut rng).is_err());
}

#[test]
fn shared_completion_examples() {
    let a = Tensor::row(&[1.0, 2.0]);
    let b = Tensor::row(&[3.0, 4.0]);
    assert_eq!(complete_shared_audio(&a, &b).unwrap().data(), &[2.0, 3.0]);
    assert_eq!(complete_shared_audio(&a, &a).unwrap(), a);
    assert_eq!(complete_shared_audio(&b, &a).unwrap(), complete_shared_audio(&a, &b).unwrap());
    assert_eq!(complete_shared_general(std::slice::from_ref(&a)).unwrap(), a);
    assert_eq!(complete_shared_general(&[a.clone(), b.clone()]).unwrap(), complete_shared_audio(&a, &b).unwrap());
    let c = Tensor::row(&[-1.0, 0.5]);
    let x = complete_shared_general(&[a.clone(), b.clone(), c.clone()]).unwrap();
    let y = complete_shared_general(&[c, a, b]).unwrap();
    assert!(x.max_abs_diff(&y) < 1e-15);
    assert!(complete_shared_general(&[]).is_err());
}

#[test]
fn unique_completion_examples() {
    let m = Tensor::from_rows(&[vec![0.0, 2.0], vec![4.0, 6.0]]).unwrap();
    assert_eq!(complete_unique(&m).unwrap().data(), &[2.0, 4.0]);
    let r = m.select_rows(&[1, 0]).unwrap();
    assert_eq!(complete_unique(&r).unwrap(), complete_unique(&m).unwrap());
    assert_eq!(complete_unique(&Tensor::row(&[1.5, -2.0])).unwrap().data(), &[1.5, -2.0]);
    assert_eq!(complete_unique(&Tensor::full(&[5, 3], 0.1)).unwrap().data(), Tensor::full(&[1, 3], 0.1).data());
    assert!(complete_unique(&Tensor::zeros(&[0, 2])).is_err());
}

#[test]
fn unique_loss_examples() {
    let (mut store, params) = imlm(3, 2, 11);
    for id in [params.modal.weight, params.modal.bias] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let t = Tape::new();
    let p = store.bind(&t);
    let r = t.constant(Tensor::full(&[3, 2], 0.4));
    let v = t.scalar_value(unique_loss(&p, &params, r, &[0, 1, 2]).unwrap());
    assert!((v - 2f64.ln()).abs() < 1e-15);

    // a perfect separating classifier on one-hot-like unique features
    store.get_mut(params.modal.weight).data_mut().copy_from_slice(&[40.0, -40.0, -40.0, -40.0, 40.0, -40.0]);
    store.get_mut(params.modal.bias).data_mut().copy_from_slice(&[-20.0, -20.0, 20.0]);
    let t = Tape::new();
    let p = store.bind(&t);
    // rows: modality 0 = (1,0), modality 1 = (0,1), modality 2 = (0,0)
    let r = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap());
    let v = t.scalar_value(unique_loss(&p, &params, r, &[0, 1, 2]).unwrap());
    assert!((0.0..=1e-6).contains(&v), "{v}");
    assert!(unique_loss(&p, &params, r, &[0, 1]).is_err());
}

#[test]
fn share_loss_examples() {
    let a = Tensor::row(&[0.0, 0.0]);
    let z = Tensor::row(&[1.0, 0.0]);
    let s = Tensor::row(&[1.0, 1.0]);
    assert!((share_loss(&a, &z, &s).unwrap() - 8.0).abs() <= 1e-12);
    for (x, y, w) in [(&a, &s, &z), (&z, &a, &s), (&s, &z, &a), (&z, &s, &a)] {
        assert_eq!(share_loss(x, y, w).unwrap(), 8.0);
    }
    assert_eq!(share_loss(&s, &s, &s).unwrap(), 0.0);
    assert!(share_loss(&a, &a, &z).unwrap() > 0.0);
    assert_eq!(imlm_loss(0.0, 0.0), 0.0);
    assert!((imlm_loss(2f64.ln(), 8.0) - 8.693147).abs() < 1e-6);
    assert!(imlm_loss(1.0, 2.0) < imlm_loss(1.5, 2.0) && imlm_loss(1.0, 2.0) < imlm_loss(1.0, 2.5));
}

fn run_completion(
    store: &ParamStore,
    params: &ImlmParams,
    x: &[Tensor; 3],
    present: [&[bool]; 3],
) -> Result<([Tensor; 3], [Tensor; 3], [Tensor; 3], f64, f64)> {
    let t = Tape::new();
    let p = store.bind(&t);
    let xv = [t.constant(x[0].clone()), t.constant(x[1].clone()), t.constant(x[2].clone())];
    let out = complete_and_project(&p, params, xv, present)?;
    let get = |v: [Var; 3]| [t.to_tensor(v[0]), t.to_tensor(v[1]), t.to_tensor(v[2])];
    Ok((
        get(out.projected),
        get(out.r_share),
        get(out.r_unique),
        t.scalar_value(out.unique_loss),
        t.scalar_value(out.share_loss),
    ))
}

#[test]
fn completion_fills_missing_rows_from_other_modalities() {
    let (store, params) = imlm(3, 2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = [rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3)];
    let audio = [true, false, true, false];
    let video = [true, true, false, true];
    let (proj, share, unique, _, _) = run_completion(&store, &params, &x, [&audio, &video, &video]).unwrap();

    let t = Tape::new();
    let p = store.bind_frozen(&t);
    let enc = |m: usize, i: usize, shared: bool| {
        let v = t.constant(Tensor::row(x[m].row_slice(i)));
        let e = if shared { encode_shared(&p, &params, v) } else { encode_unique(&p, &params, v) }.unwrap();
        t.to_tensor(e)
    };
    // audio missing at 1 and 3: mean of static and dynamic shared features
    for i in [1, 3] {
        let want = complete_shared_audio(&enc(2, i, true), &enc(1, i, true)).unwrap();
        assert!(Tensor::row(share[0].row_slice(i)).max_abs_diff(&want) < 1e-14);
        let uniq = complete_unique(&Tensor::vstack(&[enc(0, 0, false), enc(0, 2, false)]).unwrap()).unwrap();
        assert!(Tensor::row(unique[0].row_slice(i)).max_abs_diff(&uniq) < 1e-14);
    }
    // video missing at 2: both video modalities take the audio shared feature
    let a2 = enc(0, 2, true);
    assert!(Tensor::row(share[1].row_slice(2)).max_abs_diff(&a2) < 1e-14);
    assert!(Tensor::row(share[2].row_slice(2)).max_abs_diff(&a2) < 1e-14);
    // present rows are plain encodings
    assert!(Tensor::row(share[1].row_slice(0)).max_abs_diff(&enc(1, 0, true)) < 1e-14);
    // zero projection: identity on features
    for m in 0..3 {
        assert_eq!(proj[m], x[m]);
    }
}

#[test]
fn completion_without_missing_rows_matches_direct_encoding() {
    let (store, params) = imlm(3, 2, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = [rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3)];
    let all = [true; 3];
    let (proj, share, _, ul, sl) = run_completion(&store, &params, &x, [&all, &all, &all]).unwrap();
    for m in 0..3 {
        assert_eq!(proj[m], x[m]);
    }
    let direct = share_loss(&share[0], &share[2], &share[1]).unwrap();
    assert_eq!(sl, direct);
    assert!(ul > 0.0);
}

#[test]
fn completion_rejects_unrecoverable_batches() {
    let (store, params) = imlm(3, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = [rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 2, 3)];
    let none = [false, false];
    let all = [true, true];
    assert!(run_completion(&store, &params, &x, [&none, &all, &all]).is_err());
    let half = [true, false];
    assert!(run_completion(&store, &params, &x, [&half, &[false, true], &[false, true]]).is_ok());
    assert!(run_completion(&store, &params, &x, [&half, &half, &half]).is_err());
}

#[test]
fn completion_is_deterministic() {
    let (store, params) = imlm(3, 2, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = [rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 5, 3)];
    let a = [false, true, true, false, true];
    let v = [true; 5];
    let r1 = run_completion(&store, &params, &x, [&a, &v, &v]).unwrap();
    let r2 = run_completion(&store, &params, &x, [&a, &v, &v]).unwrap();
    assert_eq!(r1.1, r2.1);
    assert_eq!(r1.2, r2.2);
    assert_eq!(r1.3.to_bits(), r2.3.to_bits());
}
