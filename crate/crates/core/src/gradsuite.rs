//! Seeded central-difference checks of every tape operation and of each full
//! training loss at toy shapes (`T = 4`, `d = 3`, `B = 3`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::completion::{encode_unique, share_loss_on_tape, unique_loss, ImlmParams};
use crate::counterfactual::{cross_entropy_on_tape, tie_forward, ClmHyper, ClmParams};
use crate::error::Result;
use crate::numerics::{grad_check_many, grad_check_params, ParamStore, Tape, Tensor, Var};
use crate::seqvae::{dse_forward, dse_loss, dse_plus_terms, standard_normal, DseHyper, DseParams, DseSample};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-6;
/// Parameter coordinates sampled per seed for the full losses.
pub const COORDS_PER_SEED: usize = 40;

pub type OpFn = fn(&Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(usize, usize)>,
    pub f: OpFn,
}

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
    pub seeds: u64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOLERANCE
    }
}

// distinct weights per output coordinate, so each gradient entry matters
fn weigh(t: &Tape, v: Var) -> Result<Var> {
    let (r, c) = t.shape(v);
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = t.constant(Tensor::matrix(r, c, w)?);
    t.sum(t.mul(v, w)?)
}

fn case(name: &'static str, shapes: &[(usize, usize)], f: OpFn) -> OpCase {
    OpCase { name, shapes: shapes.to_vec(), f }
}

/// Every differentiable tape operation, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[(3, 4), (3, 4)], |t, v| weigh(t, t.add(v[0], v[1])?)),
        case("add_scalar_bcast", &[(3, 4), (1, 1)], |t, v| weigh(t, t.add(v[0], v[1])?)),
        case("sub", &[(3, 4), (3, 4)], |t, v| weigh(t, t.sub(v[0], v[1])?)),
        case("sub_scalar_left", &[(1, 1), (2, 3)], |t, v| weigh(t, t.sub(v[0], v[1])?)),
        case("mul", &[(3, 4), (3, 4)], |t, v| weigh(t, t.mul(v[0], v[1])?)),
        case("mul_scalar", &[(2, 5), (1, 1)], |t, v| weigh(t, t.mul(v[0], v[1])?)),
        case("div", &[(3, 4), (3, 4)], |t, v| {
            let d = t.add_scalar(t.square(v[1])?, 0.5)?;
            weigh(t, t.div(v[0], d)?)
        }),
        case("add_row", &[(3, 4), (1, 4)], |t, v| weigh(t, t.add_row(v[0], v[1])?)),
        case("mul_row", &[(3, 4), (1, 4)], |t, v| weigh(t, t.mul_row(v[0], v[1])?)),
        case("mul_col", &[(3, 4), (3, 1)], |t, v| weigh(t, t.mul_col(v[0], v[1])?)),
        case("exp", &[(2, 3)], |t, v| weigh(t, t.exp(v[0])?)),
        case("log", &[(2, 3)], |t, v| weigh(t, t.log(t.add_scalar(t.square(v[0])?, 0.1)?)?)),
        case("tanh", &[(2, 3)], |t, v| weigh(t, t.tanh(v[0])?)),
        case("sigmoid", &[(2, 3)], |t, v| weigh(t, t.sigmoid(v[0])?)),
        case("relu", &[(2, 3)], |t, v| weigh(t, t.relu(v[0])?)),
        case("max_scalar", &[(2, 3)], |t, v| weigh(t, t.max_scalar(v[0], 0.1)?)),
        case("neg_scale", &[(2, 3)], |t, v| weigh(t, t.scale(t.neg(v[0])?, 1.7)?)),
        case("square", &[(2, 3)], |t, v| weigh(t, t.square(v[0])?)),
        case("sqrt", &[(2, 3)], |t, v| weigh(t, t.sqrt(t.add_scalar(t.square(v[0])?, 0.2)?)?)),
        case("abs", &[(2, 3)], |t, v| weigh(t, t.abs(v[0])?)),
        case("recip", &[(2, 3)], |t, v| weigh(t, t.recip(t.add_scalar(t.square(v[0])?, 0.3)?)?)),
        case("matmul", &[(3, 4), (4, 2)], |t, v| weigh(t, t.matmul(v[0], v[1])?)),
        case("transpose", &[(3, 2)], |t, v| weigh(t, t.transpose(v[0])?)),
        case("sum_rows", &[(3, 4)], |t, v| weigh(t, t.sum_rows(v[0])?)),
        case("sum_cols", &[(3, 4)], |t, v| weigh(t, t.sum_cols(v[0])?)),
        case("mean", &[(3, 4)], |t, v| t.mean(t.square(v[0])?)),
        case("logsumexp_cols", &[(3, 4)], |t, v| weigh(t, t.logsumexp_cols(v[0])?)),
        case("hcat", &[(2, 3), (2, 2)], |t, v| weigh(t, t.hcat(&[v[0], v[1]])?)),
        case("vcat", &[(2, 3), (1, 3)], |t, v| weigh(t, t.vcat(&[v[0], v[1]])?)),
        case("slice_cols", &[(3, 5)], |t, v| weigh(t, t.slice_cols(v[0], 1, 3)?)),
        case("select_rows", &[(4, 2)], |t, v| weigh(t, t.select_rows(v[0], &[2, 0, 2])?)),
        case("pick", &[(3, 4)], |t, v| weigh(t, t.pick(v[0], &[3, 0, 1])?)),
        case("gauss_pairs", &[(3, 2), (4, 2), (4, 2)], |t, v| {
            weigh(t, t.gauss_log_density_pairs(v[0], v[1], t.scale(v[2], 0.5)?)?)
        }),
    ]
}

pub fn rand_tensor<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> Tensor {
    Tensor::from_parts(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn seed_rng(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(tag))
}

pub fn toy_dse_hyper() -> DseHyper {
    DseHyper { seq_len: 4, feat_dim: 3, latent_dim: 2, hidden: 3, ..DseHyper::default() }
}

fn toy_samples(h: &DseHyper, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DseSample>> {
    (0..n)
        .map(|_| {
            let x = rand_tensor(rng, h.seq_len, h.feat_dim);
            DseSample::draw(x, h, rng)
        })
        .collect()
}

fn check_sequence_loss(seed: u64) -> Result<f64> {
    let mut rng = seed_rng("sequence_loss", seed);
    let h = toy_dse_hyper();
    let mut store = ParamStore::new();
    let params = DseParams::new(&mut store, "dse", &h, &mut rng)?;
    let batch = toy_samples(&h, 3, &mut rng)?;
    let refs: Vec<&DseSample> = batch.iter().collect();
    grad_check_params(&store, |p| Ok(dse_loss(p, &params, &refs, &h)?.total), GRAD_EPS, Some(COORDS_PER_SEED), &mut rng)
}

fn check_paired_loss(seed: u64) -> Result<f64> {
    let mut rng = seed_rng("paired_loss", seed);
    let h = toy_dse_hyper();
    let mut store = ParamStore::new();
    let params = DseParams::new(&mut store, "dse", &h, &mut rng)?;
    let batch = toy_samples(&h, 6, &mut rng)?;
    let refs: Vec<&DseSample> = batch.iter().collect();
    grad_check_params(
        &store,
        |p| {
            let f = dse_forward(p, &params, &refs)?;
            Ok(dse_plus_terms(p.tape, &f, &[0, 1, 2], &[3, 4, 5], &h, true)?.total)
        },
        GRAD_EPS,
        Some(COORDS_PER_SEED),
        &mut rng,
    )
}

fn check_tie_loss(seed: u64) -> Result<f64> {
    let mut rng = seed_rng("tie_loss", seed);
    let d = 3;
    let mut store = ParamStore::new();
    let params = ClmParams::new(&mut store, "clm", d, &mut rng)?;
    let x: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 6, d)).collect();
    params.init_intervention(&mut store, [&x[0], &x[1], &x[2]])?;
    let q = rand_tensor(&mut rng, 3, d);
    let noise: Vec<[Tensor; 3]> = (0..2)
        .map(|_| [standard_normal(&mut rng, &[6, d]), standard_normal(&mut rng, &[6, d]), standard_normal(&mut rng, &[6, d])])
        .collect();
    let h = ClmHyper { tau: 2.0, k: 3 };
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
    // the features are differentiable inputs as well
    let ids = [
        store.add("x.audio", x[0].clone())?,
        store.add("x.static", x[1].clone())?,
        store.add("x.dynamic", x[2].clone())?,
    ];
    grad_check_params(
        &store,
        |p| {
            let t = p.tape;
            let xv = [p.p(ids[0]), p.p(ids[1]), p.p(ids[2])];
            let out = tie_forward(p, &params, &h, xv, t.constant(q.clone()), &noise)?;
            cross_entropy_on_tape(t, out.tie, &labels)
        },
        GRAD_EPS,
        Some(COORDS_PER_SEED),
        &mut rng,
    )
}

fn check_unique_loss(seed: u64) -> Result<f64> {
    let mut rng = seed_rng("unique_loss", seed);
    let mut store = ParamStore::new();
    let params = ImlmParams::new(&mut store, "imlm", 3, 2, &mut rng)?;
    let x = rand_tensor(&mut rng, 9, 3);
    let tags: Vec<usize> = (0..9).map(|i| i / 3).collect();
    grad_check_params(
        &store,
        |p| {
            let ru = encode_unique(p, &params, p.tape.constant(x.clone()))?;
            unique_loss(p, &params, ru, &tags)
        },
        GRAD_EPS,
        None,
        &mut rng,
    )
}

fn check_share_loss(seed: u64) -> Result<f64> {
    let mut rng = seed_rng("share_loss", seed);
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 3, 2)).collect();
    grad_check_many(|t, v| share_loss_on_tape(t, v[0], v[1], v[2]), &xs, GRAD_EPS)
}

fn accumulate(name: &str, seeds: u64, mut f: impl FnMut(u64) -> Result<f64>) -> Result<GradCheck> {
    let mut out = GradCheck { name: name.to_string(), worst: 0.0, worst_seed: 0, seeds };
    for seed in 0..seeds {
        let e = f(seed)?;
        if e > out.worst {
            out.worst = e;
            out.worst_seed = seed;
        }
    }
    Ok(out)
}

/// Runs every check over `seeds` seeds, reporting each as it finishes.
pub fn run_gradient_suite(seeds: u64, mut on_check: impl FnMut(&GradCheck)) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut push = |c: GradCheck| {
        on_check(&c);
        out.push(c);
    };
    for op in op_cases() {
        push(accumulate(op.name, seeds, |seed| {
            let mut rng = seed_rng(op.name, seed);
            let xs: Vec<Tensor> = op.shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
            grad_check_many(op.f, &xs, GRAD_EPS)
        })?);
    }
    let losses: [(&str, fn(u64) -> Result<f64>); 5] = [
        ("sequence_loss", check_sequence_loss),
        ("paired_loss", check_paired_loss),
        ("tie_loss", check_tie_loss),
        ("unique_loss", check_unique_loss),
        ("share_loss", check_share_loss),
    ];
    for (name, f) in losses {
        push(accumulate(name, seeds, f)?);
    }
    Ok(out)
}
