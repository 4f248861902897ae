use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tal_core::autodiff::{Graph, Tensor, Var};
use tal_core::data::{AnnotationSet, Instance};
use tal_core::gradcheck::{check_gradients, FdSettings};
use tal_core::labels::{make_offset_targets, make_phase_labels, OffsetTargets, PhaseLabels};
use tal_core::losses::*;
use tal_core::Error;

// ---- independent oracles ----

fn oracle_intra(p: &[f64], g: &[bool]) -> f64 {
    let (mut su, mut sv, mut suv) = (0.0, 0.0, 0.0);
    let (mut nu, mut nv, mut nuv) = (0usize, 0usize, 0usize);
    for i in 0..p.len() {
        for j in 0..p.len() {
            let a = (p[i] - p[j]).abs();
            match (g[i], g[j]) {
                (true, true) => {
                    su += a;
                    nu += 1
                }
                (false, false) => {
                    sv += a;
                    nv += 1
                }
                (true, false) => {
                    suv += a;
                    nuv += 1
                }
                (false, true) => {}
            }
        }
    }
    let mut out = 0.0;
    if nu > 0 {
        out += su / nu as f64;
    }
    if nv > 0 {
        out += sv / nv as f64;
    }
    if nuv > 0 {
        out += 1.0 - suv / nuv as f64;
    }
    out
}

fn oracle_inter(c: &[f64], s: &[f64], e: &[f64]) -> f64 {
    let n = c.len() - 1;
    let mut acc = 0.0;
    for t in 0..n {
        let d = c[t + 1] - c[t];
        acc += (d.max(0.0) - s[t]).abs() + ((-d).max(0.0) - e[t]).abs();
    }
    acc / n as f64
}

fn oracle_cls(p: &[f64], g: &[bool]) -> f64 {
    let clamp = |x: f64| x.clamp(1e-7, 1.0 - 1e-7);
    let pos: Vec<f64> = p.iter().zip(g).filter(|(_, &l)| l).map(|(&x, _)| clamp(x).ln()).collect();
    let neg: Vec<f64> = p.iter().zip(g).filter(|(_, &l)| !l).map(|(&x, _)| (1.0 - clamp(x)).ln()).collect();
    let mut out = 0.0;
    if !pos.is_empty() {
        out -= pos.iter().sum::<f64>() / pos.len() as f64;
    }
    if !neg.is_empty() {
        out -= neg.iter().sum::<f64>() / neg.len() as f64;
    }
    out
}

fn oracle_sl1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn oracle_reg(os: &[f64], oe: &[f64], t: &OffsetTargets) -> f64 {
    let mut out = 0.0;
    for (pred, target, mask) in [(os, &t.start, &t.start_mask), (oe, &t.end, &t.end_mask)] {
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if !idx.is_empty() {
            out += idx.iter().map(|&i| oracle_sl1(pred[i] - target[i])).sum::<f64>() / idx.len() as f64;
        }
    }
    out
}

// ---- helpers ----

fn eval<F>(p: &[f64], f: F) -> f64
where
    F: FnOnce(&mut Graph, Var) -> tal_core::Result<Var>,
{
    eval_scalar(p, f).unwrap()
}

fn grad_of<F>(p: &[f64], f: F) -> Vec<f64>
where
    F: FnOnce(&mut Graph, Var) -> tal_core::Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(Tensor::vector(p.to_vec()));
    let loss = f(&mut g, v).unwrap();
    g.backward(loss).unwrap();
    g.grad(v).unwrap().data().to_vec()
}

fn random_case(rng: &mut ChaCha8Rng, t: usize) -> (Vec<f64>, Vec<bool>) {
    let p = (0..t).map(|_| rng.random::<f64>()).collect();
    let g = (0..t).map(|_| rng.random_bool(0.4)).collect();
    (p, g)
}

fn bools(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&b| b == 1).collect()
}

// ---- IntraC ----

#[test]
fn intra_examples() {
    let g = bools(&[1, 1, 0, 0]);
    for f in [intra_consistency, intra_consistency_fast] {
        assert_eq!(eval(&[1.0, 1.0, 0.0, 0.0], |gr, p| f(gr, p, &g)), 0.0);
        assert!((eval(&[0.8, 0.8, 0.1, 0.1], |gr, p| f(gr, p, &g)) - 0.3).abs() < 1e-12);
        let p = [0.2f64, 0.9, 0.4];
        let all = vec![true; 3];
        let mean_pair: f64 = p.iter().flat_map(|a| p.iter().map(move |b| (a - b).abs())).sum::<f64>() / 9.0;
        assert!((eval(&p, |gr, v| f(gr, v, &all)) - mean_pair).abs() < 1e-12);
        // Single frame, equal probabilities.
        assert_eq!(eval(&[0.3], |gr, v| f(gr, v, &[true])), 0.0);
        assert_eq!(eval(&[0.3], |gr, v| f(gr, v, &[false])), 0.0);
        let v = eval(&[0.5; 6], |gr, x| f(gr, x, &bools(&[1, 0, 1, 1, 0, 0])));
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn intra_length_mismatch() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![0.1, 0.2]));
    assert!(matches!(intra_consistency(&mut g, p, &[true]), Err(Error::Shape(_))));
    assert!(matches!(intra_consistency_fast(&mut g, p, &[true]), Err(Error::Shape(_))));
}

#[test]
fn pair_mask_counts_cover_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 1..40 {
        let (_, g) = random_case(&mut rng, t);
        let m = PairMasks::new(&g);
        assert_eq!(m.n_pos_pairs + m.n_neg_pairs + 2 * m.n_cross_pairs, t * t);
    }
}

#[test]
fn intra_fast_matches_naive_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let t = rng.random_range(2..=128);
        let (mut p, g) = random_case(&mut rng, t);
        // Force some ties so the rank bookkeeping sees them.
        if t > 4 {
            p[1] = p[0];
            p[3] = p[2];
        }
        let naive = eval(&p, |gr, v| intra_consistency(gr, v, &g));
        let fast = eval(&p, |gr, v| intra_consistency_fast(gr, v, &g));
        let oracle = oracle_intra(&p, &g);
        assert!((naive - fast).abs() <= 1e-9, "T={t} naive {naive} fast {fast}");
        assert!((naive - oracle).abs() <= 1e-9);
        assert!((0.0..=3.0).contains(&fast));
    }
}

#[test]
fn intra_fast_gradient_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let t = rng.random_range(2..=128);
        let (p, g) = random_case(&mut rng, t);
        let a = grad_of(&p, |gr, v| intra_consistency(gr, v, &g));
        let b = grad_of(&p, |gr, v| intra_consistency_fast(gr, v, &g));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-7, "T={t}: {x} vs {y}");
        }
    }
}

#[test]
fn intra_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let t = rng.random_range(2..40);
        let (p, g) = random_case(&mut rng, t);
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<bool> = perm.iter().map(|&i| g[i]).collect();
        let a = eval(&p, |gr, v| intra_consistency(gr, v, &g));
        let b = eval(&pp, |gr, v| intra_consistency(gr, v, &gp));
        assert!((a - b).abs() < 1e-12);
    }
}

// ---- InterC ----

fn inter3(c: &[f64], s: &[f64], e: &[f64]) -> tal_core::Result<f64> {
    let mut g = Graph::new();
    let (vc, vs, ve) = (
        g.constant(Tensor::vector(c.to_vec())),
        g.constant(Tensor::vector(s.to_vec())),
        g.constant(Tensor::vector(e.to_vec())),
    );
    let out = inter_consistency(&mut g, vc, vs, ve)?;
    Ok(g.value(out).item().unwrap())
}

#[test]
fn inter_examples() {
    assert_eq!(inter3(&[0.0, 1.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.7], &[0.0, 0.0, 1.0, 0.2]).unwrap(), 0.0);
    assert_eq!(inter3(&[0.4; 5], &[0.0; 5], &[0.0; 5]).unwrap(), 0.0);
    assert!((inter3(&[0.0, 0.5, 1.0], &[0.0, 0.0, 0.9], &[0.0, 0.0, 0.3]).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(inter3(&[0.5], &[0.5], &[0.5]), Err(Error::DegenerateInput(_))));
    assert!(inter3(&[0.5, 0.2], &[0.5], &[0.5, 0.1]).is_err());
}

#[test]
fn inter_matches_oracle_and_self_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let t = rng.random_range(2..64);
        let c: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let s: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let e: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let v = inter3(&c, &s, &e).unwrap();
        assert!((v - oracle_inter(&c, &s, &e)).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&v));
        let mut plus = vec![0.0; t];
        let mut minus = vec![0.0; t];
        for i in 0..t - 1 {
            let d = c[i + 1] - c[i];
            plus[i] = d.max(0.0);
            minus[i] = (-d).max(0.0);
        }
        assert!(inter3(&c, &plus, &minus).unwrap() <= 1e-15);
    }
}

// ---- classification and regression ----

#[test]
fn cls_examples() {
    let g = bools(&[1, 0, 0, 1, 1]);
    let exact: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    // Each side is -ln(1 - 1e-7) = 1e-7 + 5e-15 after clamping.
    let v = eval(&exact, |gr, p| phase_cls_loss(gr, p, &g));
    assert!(v <= 2e-7 + 1e-12, "{v}");
    let v = eval(&[0.5; 5], |gr, p| phase_cls_loss(gr, p, &g));
    assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    let v = eval(&[0.5; 5], |gr, p| phase_cls_loss(gr, p, &[false; 5]));
    assert!((v - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn cls_length_mismatch() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![0.1, 0.2]));
    assert!(matches!(phase_cls_loss(&mut g, p, &[true]), Err(Error::Shape(_))));
}

#[test]
fn cls_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let t = rng.random_range(1..50);
        let (p, g) = random_case(&mut rng, t);
        let v = eval(&p, |gr, x| phase_cls_loss(gr, x, &g));
        assert!((v - oracle_cls(&p, &g)).abs() < 1e-12);
        assert!(v >= 0.0);
    }
}

fn one_frame_targets(target: f64) -> OffsetTargets {
    OffsetTargets {
        start: vec![0.0, target, 0.0],
        end: vec![0.0; 3],
        start_mask: vec![false, true, false],
        end_mask: vec![false; 3],
    }
}

fn reg(os: &[f64], oe: &[f64], t: &OffsetTargets) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(os.to_vec()));
    let b = g.constant(Tensor::vector(oe.to_vec()));
    let out = regression_loss(&mut g, a, b, t).unwrap();
    g.value(out).item().unwrap()
}

#[test]
fn regression_examples() {
    let t = one_frame_targets(1.0);
    assert_eq!(reg(&[9.0, 1.0, 9.0], &[5.0; 3], &t), 0.0);
    assert!((reg(&[0.0, 1.5, 0.0], &[0.0; 3], &t) - 0.125).abs() < 1e-15);
    assert!((reg(&[0.0, -1.0, 0.0], &[0.0; 3], &t) - 1.5).abs() < 1e-15);
    let empty = OffsetTargets {
        start: vec![0.0; 3],
        end: vec![0.0; 3],
        start_mask: vec![false; 3],
        end_mask: vec![false; 3],
    };
    assert_eq!(reg(&[3.0; 3], &[4.0; 3], &empty), 0.0);
}

#[test]
fn regression_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let (_, targets) = random_labels(&mut rng, 48);
        
        let os: Vec<f64> = (0..48).map(|_| rng.random_range(-4.0..4.0)).collect();
        let oe: Vec<f64> = (0..48).map(|_| rng.random_range(-4.0..4.0)).collect();
        assert!((reg(&os, &oe, &targets) - oracle_reg(&os, &oe, &targets)).abs() < 1e-12);
    }
}

// ---- weights ----

#[test]
fn weight_parsing() {
    assert_eq!(LossWeights::parse("1,1,0,0").unwrap(), LossWeights::baseline());
    assert_eq!(LossWeights::parse(" 1, 1 ,1,1").unwrap(), LossWeights::default());
    assert!(LossWeights::parse("1,1,0").is_err());
    assert!(LossWeights::parse("1,1,x,0").is_err());
    assert!(LossWeights::parse("1,1,-1,0").is_err());
}

// ---- total ----

fn random_labels(rng: &mut ChaCha8Rng, t: usize) -> (PhaseLabels, OffsetTargets) {
    let n = rng.random_range(0..4);
    let instances = (0..n)
        .map(|_| {
            let s = rng.random_range(0..t - 3);
            let e = rng.random_range(s + 1..t);
            Instance::new(s, e, 0)
        })
        .collect();
    let a = AnnotationSet::new(instances, t).unwrap();
    (make_phase_labels(&a, t), make_offset_targets(&a, t))
}

struct Outputs {
    c: Vec<f64>,
    s: Vec<f64>,
    e: Vec<f64>,
    os: Vec<f64>,
    oe: Vec<f64>,
}

fn random_outputs(rng: &mut ChaCha8Rng, t: usize) -> Outputs {
    let mut prob = || (0..t).map(|_| rng.random_range(0.01..0.99)).collect::<Vec<f64>>();
    let (c, s, e) = (prob(), prob(), prob());
    let os = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
    let oe = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
    Outputs { c, s, e, os, oe }
}

fn run_total(o: &Outputs, l: &PhaseLabels, t: &OffsetTargets, w: &LossWeights, imp: IntraImpl) -> LossReport {
    let mut g = Graph::new();
    let heads = HeadVars {
        continuing: g.param(Tensor::vector(o.c.clone())),
        starting: g.param(Tensor::vector(o.s.clone())),
        ending: g.param(Tensor::vector(o.e.clone())),
        start_offset: g.param(Tensor::vector(o.os.clone())),
        end_offset: g.param(Tensor::vector(o.oe.clone())),
    };
    let (loss, report) = total_loss(&mut g, &heads, l, t, w, imp).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), report.l_total);
    report
}

#[test]
fn total_matches_scripted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for case in 0..50 {
        let t = 32;
        let (labels, targets) = random_labels(&mut rng, t);
        let o = random_outputs(&mut rng, t);
        let w = if case % 2 == 0 {
            LossWeights::default()
        } else {
            LossWeights {
                cls: 0.5,
                reg: 2.0,
                intra: 0.0,
                inter: 1.5,
            }
        };
        let cls = oracle_cls(&o.c, &labels.continuing)
            + oracle_cls(&o.s, &labels.starting)
            + oracle_cls(&o.e, &labels.ending);
        let regv = oracle_reg(&o.os, &o.oe, &targets);
        let intra = oracle_intra(&o.c, &labels.continuing)
            + oracle_intra(&o.s, &labels.starting)
            + oracle_intra(&o.e, &labels.ending);
        let inter = oracle_inter(&o.c, &o.s, &o.e);
        let expected = w.cls * cls + w.reg * regv + w.intra * intra + w.inter * inter;
        for imp in [IntraImpl::Naive, IntraImpl::Fast] {
            let r = run_total(&o, &labels, &targets, &w, imp);
            assert!((r.l_total - expected).abs() <= 1e-9, "{} vs {expected}", r.l_total);
            assert!((r.l_cls - (r.l_c + r.l_s + r.l_e)).abs() < 1e-12);
            assert!((r.l_intra - (r.l_intra_c + r.l_intra_s + r.l_intra_e)).abs() < 1e-12);
            assert!((r.l_intra - intra).abs() <= 1e-9);
            assert!(r.components().iter().all(|(_, v)| *v >= 0.0));
        }
    }
}

#[test]
fn baseline_weights_reduce_to_cls_plus_reg_and_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (labels, targets) = random_labels(&mut rng, 24);
    let o = random_outputs(&mut rng, 24);
    let r = run_total(&o, &labels, &targets, &LossWeights::baseline(), IntraImpl::Fast);
    assert!((r.l_total - (r.l_cls + r.l_reg)).abs() < 1e-12);
    assert!(r.l_intra > 0.0 && r.l_inter > 0.0);

    // Intra-only: gradient on the offsets must vanish.
    let mut g = Graph::new();
    let heads = HeadVars {
        continuing: g.param(Tensor::vector(o.c.clone())),
        starting: g.param(Tensor::vector(o.s.clone())),
        ending: g.param(Tensor::vector(o.e.clone())),
        start_offset: g.param(Tensor::vector(o.os.clone())),
        end_offset: g.param(Tensor::vector(o.oe.clone())),
    };
    let w = LossWeights {
        cls: 0.0,
        reg: 0.0,
        intra: 1.0,
        inter: 0.0,
    };
    let (loss, _) = total_loss(&mut g, &heads, &labels, &targets, &w, IntraImpl::Fast).unwrap();
    g.backward(loss).unwrap();
    let gr = g.grad(heads.start_offset).map(|t| t.data().to_vec()).unwrap_or_default();
    assert!(gr.iter().all(|&v| v == 0.0));
}

#[test]
fn perfect_predictions_give_near_zero_components() {
    let a = AnnotationSet::new(vec![Instance::new(10, 30, 0)], 48).unwrap();
    let labels = make_phase_labels(&a, 48);
    let targets = make_offset_targets(&a, 48);
    let as_f = |v: &[bool]| v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let o = Outputs {
        c: as_f(&labels.continuing),
        s: as_f(&labels.starting),
        e: as_f(&labels.ending),
        os: targets.start.clone(),
        oe: targets.end.clone(),
    };
    let r = run_total(&o, &labels, &targets, &LossWeights::default(), IntraImpl::Fast);
    assert!(r.l_intra <= 1e-6 && r.l_reg <= 1e-6 && r.l_cls <= 1e-6, "{r:?}");
    // InterC is zero against its own fixed point.
    let mut plus = vec![0.0; 48];
    let mut minus = vec![0.0; 48];
    for t in 0..47 {
        let d = o.c[t + 1] - o.c[t];
        plus[t] = d.max(0.0);
        minus[t] = (-d).max(0.0);
    }
    assert!(inter3(&o.c, &plus, &minus).unwrap() <= 1e-6);
}

// ---- gradients ----

#[test]
fn loss_gradients_match_finite_differences() {
    let settings = FdSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..10 {
        let t = rng.random_range(4..20);
        let (p, g) = random_case(&mut rng, t);
        let p = Tensor::vector(p.iter().map(|v| 0.05 + 0.9 * v).collect());
        for f in [intra_consistency, intra_consistency_fast] {
            let g2 = g.clone();
            let out = check_gradients(&[p.clone()], &settings, None, move |gr, v| f(gr, v[0], &g2)).unwrap();
            assert!(out.passed(&settings), "{out:?}");
        }
        let g2 = g.clone();
        let out = check_gradients(&[p.clone()], &settings, None, move |gr, v| phase_cls_loss(gr, v[0], &g2)).unwrap();
        assert!(out.passed(&settings), "{out:?}");
        let c = Tensor::vector((0..t).map(|_| rng.random_range(0.05..0.95)).collect());
        let s = Tensor::vector((0..t).map(|_| rng.random_range(0.05..0.95)).collect());
        let out = check_gradients(&[c, s, p.clone()], &settings, None, |gr, v| {
            inter_consistency(gr, v[0], v[1], v[2])
        })
        .unwrap();
        assert!(out.passed(&settings), "{out:?}");
    }
}
