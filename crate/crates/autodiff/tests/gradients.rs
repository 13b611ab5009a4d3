//! Finite-difference checks of every backward rule, on random graphs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsam_autodiff::gradcheck::{self, GradCheckOptions};
use tsam_autodiff::{ParamId, ParamStore, Segment, Tape, Tensor, TensorError, Var};

const ROWS: usize = 3;
const COLS: usize = 4;
const TEMPLATES: usize = 24;

struct Params {
    a: ParamId,
    b: ParamId,
    c: ParamId,
    v: ParamId,
    g: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    core: ParamId,
    cand: ParamId,
    mix: ParamId,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_store(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, Params) {
    let mut s = ParamStore::new();
    let p = Params {
        a: s.add("a", random_tensor(rng, ROWS, COLS, 1.0)),
        b: s.add("b", random_tensor(rng, COLS, ROWS, 1.0)),
        c: s.add("c", random_tensor(rng, ROWS, COLS, 1.0)),
        v: s.add("v", random_tensor(rng, 1, COLS, 1.0)),
        g: s.add("g", random_tensor(rng, 1, COLS, 1.0)),
        wq: s.add("wq", random_tensor(rng, COLS, COLS, 0.8)),
        wk: s.add("wk", random_tensor(rng, COLS, COLS, 0.8)),
        wv: s.add("wv", random_tensor(rng, COLS, COLS, 0.8)),
        core: s.add("core", random_tensor(rng, COLS, COLS * COLS, 0.5)),
        cand: s.add("cand", random_tensor(rng, 5, COLS, 1.0)),
        mix: s.add("mix", random_tensor(rng, 5, COLS, 0.5)),
    };
    (s, p)
}

/// Applies template `k` to a `ROWS×COLS` value, returning a value of the same shape.
fn apply(t: &mut Tape<f64>, s: &ParamStore<f64>, p: &Params, x: Var, k: usize) -> Result<Var, TensorError> {
    let pv = |t: &mut Tape<f64>, id| t.param(s, id);
    Ok(match k {
        0 => t.tanh(x),
        1 => t.gelu(x),
        2 => t.sigmoid(x),
        3 => {
            let v = pv(t, p.v);
            let y = t.add(x, v)?;
            let a = pv(t, p.a);
            t.sub(y, a)?
        }
        4 => {
            let v = pv(t, p.v);
            t.mul(x, v)?
        }
        5 => {
            let v = pv(t, p.v);
            let sv = t.sigmoid(v);
            let den = t.shift(sv, 1.5);
            t.div(x, den)?
        }
        6 => {
            let y = t.softmax(x)?;
            t.scale(y, 3.0)
        }
        7 => {
            let g = pv(t, p.g);
            let v = pv(t, p.v);
            t.layer_norm(x, g, v, 1e-5)?
        }
        8 => {
            let b = pv(t, p.b);
            let y = t.matmul(x, b)?;
            let c = pv(t, p.c);
            let ct = t.transpose(c);
            let z = t.matmul(ct, y)?; // 4x3
            let z = t.transpose(z);
            t.scale(z, 0.3)
        }
        9 => {
            let r = t.gather_rows(x, &[2, 0, 1])?;
            let top = t.slice_rows(r, 0, 1)?;
            let rest = t.slice_rows(r, 1, 2)?;
            t.concat_rows(&[rest, top])?
        }
        10 => {
            let l = t.slice_cols(x, 0, 1)?;
            let r = t.slice_cols(x, 1, 3)?;
            let r = t.scale(r, -0.5);
            t.concat_cols(&[r, l])?
        }
        11 => {
            let y = t.reshape(x, COLS, ROWS)?;
            let y = t.sin(y);
            t.reshape(y, ROWS, COLS)?
        }
        12 => t.l2_normalize_rows(x, 1e-8)?,
        13 => {
            let y = t.scale(x, 0.3);
            t.exp(y)
        }
        14 => {
            let y = t.softplus(x);
            let y = t.shift(y, 0.1);
            t.log(y)?
        }
        15 => {
            let y = t.square(x);
            let y = t.shift(y, 0.5);
            t.sqrt(y)?
        }
        16 => {
            let (wq, wk, wv) = (pv(t, p.wq), pv(t, p.wk), pv(t, p.wv));
            let q = t.matmul(x, wq)?;
            let kk = t.matmul(x, wk)?;
            let v = t.matmul(x, wv)?;
            t.segment_attention(q, kk, v, &[Segment::new(0, 2), Segment::new(2, 1)], 2)?
        }
        17 => {
            let lse = t.logsumexp(x)?;
            let y = t.add(x, lse)?;
            let cs = t.col_sums(x);
            let cs = t.scale(cs, 0.1);
            t.add(y, cs)?
        }
        18 => {
            let m = t.segment_mean(x, &[Segment::new(0, 3)])?;
            let rs = t.row_sums(x);
            let y = t.add(x, m)?;
            let rs = t.scale(rs, 0.2);
            t.sub(y, rs)?
        }
        19 => {
            let core = pv(t, p.core);
            let hw = t.matmul(x, core)?;
            let a = pv(t, p.a);
            t.tucker_contract(hw, a)?
        }
        20 => {
            let cand = pv(t, p.cand);
            let d = t.pairwise_l2(x, cand)?;
            let mix = pv(t, p.mix);
            t.matmul(d, mix)?
        }
        21 => {
            let cand = pv(t, p.cand);
            let d = t.pairwise_complex_l1(x, cand)?;
            let mix = pv(t, p.mix);
            let y = t.matmul(d, mix)?;
            t.scale(y, 0.5)
        }
        22 => {
            let y = t.cos(x);
            let n = t.l2_norm_rows(x)?;
            t.mul(y, n)?
        }
        _ => {
            let v = pv(t, p.v);
            let y = t.mul(x, v)?;
            let d = t.dot(y, x)?;
            let d = t.tanh(d);
            t.add(x, d)?
        }
    })
}

fn build(
    t: &mut Tape<f64>,
    s: &ParamStore<f64>,
    p: &Params,
    plan: &[usize],
    weights: &[f64],
) -> Result<Var, TensorError> {
    let mut x = t.param(s, p.a);
    for &k in plan {
        x = apply(t, s, p, x, k)?;
    }
    let w = t.constant(ROWS, COLS, weights.to_vec())?;
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut worst = 0.0f64;
    let mut seen = [false; TEMPLATES];
    for graph in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + graph);
        let (store, p) = random_store(&mut rng);
        let depth = rng.gen_range(3..=6);
        // First op cycles deterministically so every template is exercised.
        let mut plan = vec![graph as usize % TEMPLATES];
        plan.extend((1..depth).map(|_| rng.gen_range(0..TEMPLATES)));
        plan.iter().for_each(|&k| seen[k] = true);
        let weights: Vec<f64> = (0..ROWS * COLS).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let report = gradcheck::check(
            &store,
            |t, s| build(t, s, &p, &plan, &weights),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "graph {graph} plan {plan:?}: {report:?}"
        );
        worst = worst.max(report.max_rel_err);
    }
    assert!(seen.iter().all(|&s| s), "templates not all exercised: {seen:?}");
    eprintln!("worst relative error over 100 graphs: {worst:.3e}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, p) = random_store(&mut rng);
    let w1: Vec<f64> = (0..ROWS * COLS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..ROWS * COLS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (plan1, plan2) = ([1usize, 16, 7], [12usize, 19, 20]);
    let (ca, cb) = (0.7, -2.3);

    let grads = |f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var| {
        let mut s = store.clone();
        s.zero_grad();
        let mut t = Tape::new();
        let l = f(&mut t, &s);
        t.backward(l, &mut s).unwrap();
        s.ids()
            .flat_map(|id| s.get(id).grad().unwrap().to_vec())
            .collect::<Vec<f64>>()
    };
    let g1 = grads(&|t, s| build(t, s, &p, &plan1, &w1).unwrap());
    let g2 = grads(&|t, s| build(t, s, &p, &plan2, &w2).unwrap());
    let gc = grads(&|t, s| {
        let l1 = build(t, s, &p, &plan1, &w1).unwrap();
        let l2 = build(t, s, &p, &plan2, &w2).unwrap();
        let l1 = t.scale(l1, ca);
        let l2 = t.scale(l2, cb);
        t.add(l1, l2).unwrap()
    });
    for ((a, b), c) in g1.iter().zip(&g2).zip(&gc) {
        assert!((ca * a + cb * b - c).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        xs in prop::collection::vec(-50.0f32..50.0, 1..12),
        rot in 0usize..12,
    ) {
        let n = xs.len();
        let mut t = Tape::<f32>::new();
        let x = t.constant(1, n, xs.clone()).unwrap();
        let y = t.softmax(x).unwrap();
        let out = t.value(y).to_vec();
        let total: f64 = out.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(out.iter().all(|&v| v >= 0.0));

        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<f32> = perm.iter().map(|&i| xs[i]).collect();
        let xp = t.constant(1, n, permuted).unwrap();
        let yp = t.softmax(xp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((t.value(yp)[k] - out[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_adam_is_bit_identical(
        vals in prop::collection::vec(-1e3f32..1e3, 1..16),
        grad_scale in -10.0f32..10.0,
    ) {
        use tsam_autodiff::{AdamConfig, AdamState};
        let mut s = ParamStore::<f32>::new();
        let id = s.add("p", Tensor::vector(vals.clone()).unwrap());
        let mut adam = AdamState::new(&s, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        for _ in 0..3 {
            s.zero_grad();
            let mut t = Tape::new();
            let x = t.param(&s, id);
            let y = t.scale(x, grad_scale as f64);
            let l = t.dot(y, x).unwrap();
            t.backward(l, &mut s).unwrap();
            adam.step(&mut s).unwrap();
        }
        let before: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
        let after: Vec<u32> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
    }
}
