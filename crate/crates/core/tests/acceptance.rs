//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use reid_core::augment::AugmentConfig;
use reid_core::backbone::{BackboneConfig, Mode};
use reid_core::consensus::{ConsensusConfig, ConsensusNet};
use reid_core::dataset::{generate_synthetic, SynthConfig};
use reid_core::eval::evaluate;
use reid_core::gradcheck::{network_check, op_suite, toy_check_config, DEFAULT_STEP, SUITE_RTOL};
use reid_core::layers::Module;
use reid_core::trainer::{checkpoint_path, fit, init_model, TrainConfig};
use reid_core::{Rng, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TWO_SCALES: [(usize, usize); 2] = [(64, 32), (48, 24)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let ops = op_suite(0).expect("op suite runs");
    let ops_err = ops.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = ops
        .iter()
        .filter(|(_, r)| !r.passes(SUITE_RTOL))
        .map(|(n, _)| n.as_str())
        .collect();
    let cfg = toy_check_config();
    let net = network_check(&cfg, 0, 32, DEFAULT_STEP).expect("network check runs");
    let secs = t.elapsed().as_secs_f64();
    let scope_ok = cfg.backbone.num_blocks == 4 && cfg.backbone.factors_per_block == 4 && cfg.backbone.feature_dim == 32 && cfg.scales == [(32, 16)];
    Outcome {
        pass: failed.is_empty() && net.passes(SUITE_RTOL) && secs < 120.0 && scope_ok,
        detail: format!(
            "{} op checks max rel err {:.1e}, toy network ({} probes) max rel err {:.1e}, tolerance {:.0e}, {:.1}s of 120s{}",
            ops.len(),
            ops_err,
            net.len(),
            net.max_rel_error(),
            SUITE_RTOL,
            secs,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    }
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(2024);
    let worst = (0..200)
        .map(|_| common::oracle_gap(&common::random_instance(&mut rng)))
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-12 && secs < 10.0,
        detail: format!("200 instances, max |CMC/AP/mAP - brute force| = {worst:.1e} (<= 1e-12), {secs:.2}s of 10s"),
    }
}

fn structure() -> Outcome {
    let paper = BackboneConfig::paper();
    let paper_fs = paper.signature_len();

    let toy = ConsensusConfig::new(TWO_SCALES.to_vec(), BackboneConfig::toy(), 8);
    let mut net = ConsensusNet::<f64>::new(&toy, &Rng::new(0)).expect("toy net");
    let mut rng = Rng::new(1);
    let images: Vec<Tensor<f64>> = TWO_SCALES
        .iter()
        .map(|&(h, w)| {
            let n = 2 * 3 * h * w;
            Tensor::new(&[2, 3, h, w], (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
        })
        .collect();
    let out = net.forward(&images).expect("forward");
    let fs_len = out.branches[0].signature.as_ref().map(|s| s.len()).unwrap_or(0);
    let toy_fs_ok = fs_len == toy.backbone.num_blocks * toy.backbone.factors_per_block;
    let d = toy.backbone.feature_dim;
    let desc = out.consensus_feature.shape()[1];

    for p in net.parameters_mut() {
        if p.name().contains("classifier") {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
    }
    let loss = net.forward(&images).unwrap().total_loss(&[0, 5]).unwrap().value();
    let expected = 3.0 * 8f64.ln();
    let paper_desc = ConsensusConfig::paper(751).descriptor_len();

    Outcome {
        pass: paper_fs == 512 && toy_fs_ok && desc == 2 * d && paper_desc == 2 * paper.feature_dim && loss == expected,
        detail: format!(
            "signature length {paper_fs} at reference scale (32x16), {fs_len} at toy scale (4x4); descriptor {desc} = 2x{d} (reference {paper_desc}); uniform-logit loss {loss} vs 3 ln 8 = {expected}"
        ),
    }
}

struct RunResult {
    train_r1: f64,
    query_r1: f64,
    map: f64,
    secs: f64,
}

fn learn(seed: u64, scales: &[(usize, usize)], mode: Mode) -> RunResult {
    let t = Instant::now();
    let data = generate_synthetic(&SynthConfig { seed, ..SynthConfig::default() }).expect("synthetic data");
    let backbone = BackboneConfig { mode, ..BackboneConfig::toy() };
    let model = ConsensusConfig::new(scales.to_vec(), backbone, 8);
    let cfg = TrainConfig {
        lr: 3e-4,
        beta1: 0.5,
        beta2: 0.999,
        batch_size: 16,
        epochs: 80,
        seed,
        deterministic: true,
        augment: AugmentConfig::toy(),
        ..TrainConfig::default()
    };
    let mut net = init_model::<f32>(&model, &cfg).expect("model");
    fit(&mut net, &data.train, &cfg, 0).expect("training");
    let train = evaluate(&net, &data.train, &data.train, 64).expect("train eval");
    let query = evaluate(&net, &data.query, &data.gallery, 64).expect("query eval");
    RunResult {
        train_r1: train.rank1(),
        query_r1: query.rank1(),
        map: query.map,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn runs(scales: &[(usize, usize)], mode: Mode, label: &str) -> Vec<RunResult> {
    SEEDS
        .iter()
        .map(|&s| {
            let r = learn(s, scales, mode);
            println!(
                "    {label} seed {s}: train Rank-1 {:.3}, query Rank-1 {:.3}, mAP {:.3}, {:.0}s",
                r.train_r1, r.query_r1, r.map, r.secs
            );
            r
        })
        .collect()
}

fn end_to_end(full: &[RunResult]) -> Outcome {
    let train = median(full.iter().map(|r| r.train_r1).collect());
    let query = median(full.iter().map(|r| r.query_r1).collect());
    let slowest = full.iter().map(|r| r.secs).fold(0.0, f64::max);
    let total: f64 = full.iter().map(|r| r.secs).sum();
    Outcome {
        pass: train >= 0.95 && query >= 0.80 && slowest < 600.0,
        detail: format!(
            "median train Rank-1 {train:.3} (>= 0.95), median query Rank-1 {query:.3} (>= 0.80), slowest run {slowest:.0}s of 600s, {total:.0}s for 5 seeds"
        ),
    }
}

fn ablation(full: &[RunResult], single: &[RunResult], fusion: &[RunResult]) -> Outcome {
    let m = |v: &[RunResult]| median(v.iter().map(|r| r.map).collect());
    let (deep, mlfn, fo) = (m(full), m(single), m(fusion));
    Outcome {
        pass: deep >= mlfn - 0.02 && mlfn >= fo - 0.02,
        detail: format!(
            "median mAP: two-scale {deep:.3}, single-scale {mlfn:.3}, single-scale without signature {fo:.3} (each >= next - 0.02)"
        ),
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = generate_synthetic(&SynthConfig::default()).expect("synthetic data");
    let model = ConsensusConfig::new(TWO_SCALES.to_vec(), BackboneConfig::toy(), 8);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            checkpoint_every: 1,
            deterministic: true,
            checkpoint_dir: Some(out.clone()),
            log_path: Some(out.join("log.csv")),
            augment: AugmentConfig::toy(),
            ..TrainConfig::default()
        };
        let mut net = init_model::<f32>(&model, &cfg).expect("model");
        fit(&mut net, &data.train, &cfg, 0).expect("training");
        out
    };
    let (a, b) = (run("a"), run("b"));
    let same = |p: &Path, q: &Path| fs::read(p).ok().is_some_and(|x| Some(x) == fs::read(q).ok());
    let mut files = vec![("log.csv".to_string(), a.join("log.csv"), b.join("log.csv"))];
    for e in 1..=3 {
        let name = format!("epoch_{e:04}.ckpt");
        files.push((name, checkpoint_path(&a, e), checkpoint_path(&b, e)));
    }
    let differing: Vec<&str> = files.iter().filter(|(_, p, q)| !same(p, q)).map(|(n, _, _)| n.as_str()).collect();
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} files byte-identical across two single-threaded runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    }
}

fn non_reproducibility_statement() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&readme).unwrap_or_default();
    let numbers = ["90.6", "75.8", "82.1", "64.3", "56.7", "52.6"];
    let missing: Vec<&str> = numbers.iter().copied().filter(|n| !text.contains(n)).collect();
    let stated = text.contains("not acceptance targets");
    Outcome {
        pass: missing.is_empty() && stated,
        detail: if missing.is_empty() && stated {
            "README lists the published benchmark numbers and states they are not acceptance targets".into()
        } else {
            format!("README statement incomplete (missing numbers: {missing:?}, statement present: {stated})")
        },
    }
}

fn main() {
    let mut all = true;
    let mut record = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        all &= o.pass;
    };
    record(1, "gradient integrity", gradient_integrity());
    record(2, "metric oracle equivalence", metric_oracle());
    record(3, "shape and structure invariants", structure());

    println!("    training 5 seeds x 3 variants, 80 epochs each");
    let full = runs(&TWO_SCALES, Mode::Full, "two-scale");
    record(4, "end-to-end learning", end_to_end(&full));
    let single = runs(&TWO_SCALES[..1], Mode::Full, "single-scale");
    let fusion = runs(&TWO_SCALES[..1], Mode::FusionOnly, "no-signature");
    record(5, "ablation trend", ablation(&full, &single, &fusion));

    record(6, "determinism", determinism());
    record(7, "non-reproducibility statement", non_reproducibility_statement());
    if !all {
        std::process::exit(1);
    }
}
