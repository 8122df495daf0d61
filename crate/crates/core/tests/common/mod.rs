#![allow(dead_code)]

use reid_core::eval::Meta;
use reid_core::Rng;

/// Brute-force retrieval scores computed without sorting: the rank of a
/// gallery item is one plus the number of valid items that beat it on
/// (distance, index).
pub struct Oracle {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub aps: Vec<Option<f64>>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

pub fn oracle(q: &[Vec<f64>], qm: &[Meta], g: &[Vec<f64>], gm: &[Meta]) -> Oracle {
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for (qi, qv) in q.iter().enumerate() {
        let valid = |j: usize| !(gm[j].identity == qm[qi].identity && gm[j].camera == qm[qi].camera);
        let d: Vec<f64> = g.iter().map(|gv| dist(qv, gv)).collect();
        let rank = |j: usize| {
            1 + (0..g.len())
                .filter(|&h| valid(h) && (d[h] < d[j] || (d[h] == d[j] && h < j)))
                .count()
        };
        let relevant: Vec<usize> = (0..g.len())
            .filter(|&j| valid(j) && gm[j].identity == qm[qi].identity)
            .collect();
        if relevant.is_empty() {
            aps.push(None);
            continue;
        }
        let mut ap = 0.0;
        for &r in &relevant {
            let rr = rank(r);
            let above = relevant.iter().filter(|&&o| rank(o) <= rr).count();
            ap += above as f64 / rr as f64;
        }
        aps.push(Some(ap / relevant.len() as f64));
        firsts.push(relevant.iter().map(|&r| rank(r)).min().unwrap());
    }
    let answered: Vec<f64> = aps.iter().flatten().copied().collect();
    let cmc = (1..=g.len())
        .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len().max(1) as f64)
        .collect();
    Oracle {
        cmc,
        map: answered.iter().sum::<f64>() / answered.len().max(1) as f64,
        aps,
    }
}

pub struct Instance {
    pub q: Vec<Vec<f64>>,
    pub qm: Vec<Meta>,
    pub g: Vec<Vec<f64>>,
    pub gm: Vec<Meta>,
}

/// Random retrieval problem with at least one answerable query. Coordinates
/// come from a coarse grid so that distance ties occur.
pub fn random_instance(rng: &mut Rng) -> Instance {
    loop {
        let nq = rng.int_inclusive(1, 6);
        let ng = rng.int_inclusive(1, 12);
        let dim = rng.int_inclusive(1, 4);
        let ids = rng.int_inclusive(1, 4) as u32;
        let coarse = rng.bernoulli(0.5);
        let vec_of = |rng: &mut Rng| -> Vec<f64> {
            (0..dim)
                .map(|_| if coarse { rng.below(3) as f64 } else { rng.normal(0.0, 1.0) })
                .collect()
        };
        let meta = |rng: &mut Rng| Meta {
            identity: 1 + rng.below(ids as usize) as u32,
            camera: 1 + rng.below(2) as u32,
        };
        let q: Vec<_> = (0..nq).map(|_| vec_of(rng)).collect();
        let g: Vec<_> = (0..ng).map(|_| vec_of(rng)).collect();
        let qm: Vec<_> = (0..nq).map(|_| meta(rng)).collect();
        let gm: Vec<_> = (0..ng).map(|_| meta(rng)).collect();
        let answerable = qm.iter().any(|a| {
            gm.iter().any(|b| b.identity == a.identity && b.camera != a.camera)
        });
        if answerable {
            return Instance { q, qm, g, gm };
        }
    }
}

/// Largest absolute difference between evaluator output and the oracle.
pub fn oracle_gap(inst: &Instance) -> f64 {
    let r = reid_core::eval::evaluate_descriptors(&inst.q, &inst.qm, &inst.g, &inst.gm).unwrap();
    let o = oracle(&inst.q, &inst.qm, &inst.g, &inst.gm);
    let mut gap = (r.map - o.map).abs();
    assert_eq!(r.cmc.len(), o.cmc.len());
    for (a, b) in r.cmc.iter().zip(&o.cmc) {
        gap = gap.max((a - b).abs());
    }
    for (qr, oa) in r.queries.iter().zip(&o.aps) {
        match (qr.ap, oa) {
            (Some(a), Some(b)) => gap = gap.max((a - b).abs()),
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    gap
}
