//! End-to-end acceptance checks. Runs as a plain binary so that one
//! PASS/FAIL line per criterion is always printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use multiquant::experiment::{
    load_csv, run_highres_experiment, run_noisy_on, standardize, uniform_pairs, ColumnSelect,
    HighResConfig, Method, NoiseKind, NoisyConfig, HIGHRES_SCHEMA, NOISY_SCHEMA,
};
use multiquant::highres::{
    bz_numeric, example2_bz, example2_norm_constant, theorem1_predict, theorem2_prediction,
    theorem2_predict, r2_constants, ConstantSource, DensityModel,
};
use multiquant::lloyd::fit_all_restarts;
use multiquant::metrics::{ami, ari, contingency, mutual_information};
use multiquant::quadrature::{integrate_pieces, Quadrature};
use multiquant::quantizer::{empirical_distortion, lemma1_center, weighted_average};
use multiquant::{Codebook, DistortionSpec, FitOptions, MultiDataset, Partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Histories gathered from the fitting criteria, checked by criterion 9.
#[derive(Default)]
struct Monotone {
    checked: usize,
    violations: usize,
}

fn uniform_pair_model() -> DensityModel {
    DensityModel::uniform_cube(1, 2).unwrap()
}

fn c1_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let l = rng.random_range(2..=4);
        let d = rng.random_range(1..=3);
        let m = rng.random_range(20..=200);
        let data: Vec<f64> = (0..m * l * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ds = MultiDataset::from_flat(data, m, l, d).unwrap();
        let weights: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..3.0)).collect();
        let spec = DistortionSpec::new(2.0, weights).unwrap();
        let n = rng.random_range(1..=6);
        let centers: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let cb = Codebook::new(centers).unwrap();

        let z: Vec<Vec<f64>> = ds.samples().map(|s| weighted_average(s, &spec)).collect();
        let zds = MultiDataset::from_points(&z).unwrap();
        let kmeans = DistortionSpec::uniform(2.0, 1).unwrap();
        let consts = r2_constants(ConstantSource::Dataset(&ds), &spec).unwrap();
        let lhs = empirical_distortion(&cb, &ds, &spec).unwrap();
        let rhs = consts.c2.unwrap() + consts.c1 * empirical_distortion(&cb, &zds, &kmeans).unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs());
    }
    outcome(worst <= 1e-10, format!("max relative error {worst:.2e} over 50 codebooks"))
}

// Minimizer of t^r + λ (1 − t)^r on [0, 1] by bisection on the derivative.
fn segment_oracle(lambda2: f64, r: f64) -> f64 {
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let t = 0.5 * (a + b);
        let g = t.powf(r - 1.0) - lambda2 * (1.0 - t).powf(r - 1.0);
        if g < 0.0 {
            a = t;
        } else {
            b = t;
        }
    }
    0.5 * (a + b)
}

fn c2_lemma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut pos_err, mut obj_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let d = rng.random_range(1..=3);
        let x1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda2 = rng.random_range(0.1..10.0);
        let r = 5.0 - 4.0 * rng.random::<f64>() * 0.999;
        let sol = lemma1_center(&x1, &x2, lambda2, r).unwrap();
        let t = segment_oracle(lambda2, r);
        let dist: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let u: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + t * (b - a)).collect();
        let obj = (t * dist).powf(r) + lambda2 * ((1.0 - t) * dist).powf(r);
        let pe = sol
            .center
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pos_err = pos_err.max(pe);
        obj_err = obj_err.max((sol.objective - obj).abs() / obj.max(f64::MIN_POSITIVE));
    }
    outcome(
        pos_err <= 1e-7 && obj_err <= 1e-9,
        format!("max position error {pos_err:.2e}, max relative objective error {obj_err:.2e}"),
    )
}

fn c3_example2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let model = uniform_pair_model();
    let mut bz_err: f64 = 0.0;
    for _ in 0..100 {
        let z = rng.random_range(-0.1..1.1);
        let r: f64 = rng.random_range(1.05..5.0);
        let alpha: f64 = rng.random_range(1.0..5.0);
        let spec = DistortionSpec::new(r, vec![1.0, alpha.powf(r - 1.0)]).unwrap();
        let b = bz_numeric(&model, &[z], &spec).unwrap().matrix[0];
        bz_err = bz_err.max((b - example2_bz(z, r, alpha)).abs());
    }
    let mut norm_err: f64 = 0.0;
    for r in [1.5, 2.0, 3.0, 4.0] {
        let want = 2f64.cbrt() * 3.0 / (r + 2.0);
        let closed = example2_norm_constant(r, 1.0).unwrap();
        let direct = integrate_pieces(
            |z| example2_bz(z, r, 1.0).cbrt(),
            &[0.0, 0.5, 1.0],
            &Quadrature::with_tol(1e-13),
        )
        .unwrap()
        .value;
        norm_err = norm_err.max((closed - want).abs()).max((direct - want).abs());
    }
    outcome(
        bz_err <= 1e-6 && norm_err <= 1e-10,
        format!("max |B closed − B numeric| {bz_err:.2e}; max normalizer error {norm_err:.2e}"),
    )
}

fn c4_agreement() -> Outcome {
    let model = uniform_pair_model();
    let spec = DistortionSpec::uniform(2.0, 2).unwrap();
    let consts = r2_constants(ConstantSource::Density(&model), &spec).unwrap();
    let fz = model.average_density(spec.weights()).unwrap();
    let mut worst: f64 = 0.0;
    for n in [4, 8, 16] {
        let t1 = theorem1_predict(&consts, &fz, n).unwrap();
        let t2 = theorem2_predict(&model, &spec, n).unwrap();
        worst = worst.max((t1 - t2).abs());
    }
    outcome(worst <= 1e-6, format!("max |difference| {worst:.2e} for n = 4, 8, 16"))
}

fn c5_constant(mono: &mut Monotone) -> Outcome {
    let ds = uniform_pairs(200_000, 505).unwrap();
    let spec = DistortionSpec::uniform(2.0, 2).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [4usize, 8] {
        let runs = fit_all_restarts(&ds, &spec, &FitOptions::new(n, 5).with_restarts(3)).unwrap();
        for (_, h) in &runs {
            mono.checked += 1;
            mono.violations += usize::from(!h.is_monotone());
        }
        let got = runs
            .iter()
            .map(|(cb, _)| cb.fit_info.distortion)
            .fold(f64::INFINITY, f64::min);
        let tail = 9.0 / 64.0 / (n * n) as f64;
        let corrected = 1.0 / 12.0 + tail;
        let literal = 1.0 / 3.0 + tail;
        let near = (got - corrected).abs() <= 0.03 * corrected;
        let far = (got - literal).abs() > 0.30 * literal;
        pass &= near && far;
        parts.push(format!(
            "n={n}: {got:.6} vs {corrected:.6} ({:+.2}%), literal {literal:.6}",
            100.0 * (got / corrected - 1.0)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c6_highres(mono: &mut Monotone) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, r) in [(4usize, 3.0), (8, 4.0)] {
        let cfg = HighResConfig {
            schema: HIGHRES_SCHEMA.into(),
            r,
            lambdas: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            n: vec![n],
            m: 100_000,
            seed: 606,
            restarts: 3,
        };
        let res = run_highres_experiment(&cfg).unwrap();
        let max_gap = res.rows.iter().map(|r| r.max_gap).fold(0.0, f64::max);
        let interior = res.rows.iter().map(|r| r.interior_gap).fold(0.0, f64::max);
        let dist_gap = res.rows.iter().map(|r| r.distortion_gap()).fold(0.0, f64::max);
        for row in &res.rows {
            mono.checked += cfg.restarts;
            mono.violations += row.non_monotone;
        }
        pass &= max_gap <= 0.03 && interior <= 0.015;
        if n == 8 {
            pass &= dist_gap <= 0.03;
        }
        parts.push(format!(
            "n={n}, r={r}: max gap {max_gap:.4}, interior {interior:.4}, distortion gap {:.2}%",
            100.0 * dist_gap
        ));
    }
    outcome(pass, parts.join("; "))
}

fn all_partitions(m: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, m: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == m {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |x| x + 1);
        for l in 0..=next {
            prefix.push(l);
            go(prefix, m, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), m, &mut out);
    out
}

fn pair_counting_ari(p: &[usize], q: &[usize]) -> Option<f64> {
    let (mut both, mut in_p, mut in_q, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let sp = f64::from(u8::from(p[i] == p[j]));
            let sq = f64::from(u8::from(q[i] == q[j]));
            both += sp * sq;
            in_p += sp;
            in_q += sq;
            total += 1.0;
        }
    }
    let expected = in_p * in_q / total;
    let denom = 0.5 * (in_p + in_q) - expected;
    (denom.abs() > 1e-12).then(|| (both - expected) / denom)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for k in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(k);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn entropy(labels: &[usize]) -> f64 {
    let m = labels.len() as f64;
    let k = labels.iter().max().map_or(0, |x| x + 1);
    let mut counts = vec![0.0; k];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / m) * (c / m).ln())
        .sum()
}

fn c7_metrics() -> Outcome {
    let part = |l: &[usize]| Partition::new(l.to_vec()).unwrap();
    let mut ari_err: f64 = 0.0;
    let mut pairs = 0;
    for m in 2..=6 {
        let parts = all_partitions(m);
        for p in &parts {
            for q in &parts {
                let got = ari(&part(p), &part(q)).unwrap();
                let want = pair_counting_ari(p, q).unwrap_or(if p == q { 1.0 } else { 0.0 });
                ari_err = ari_err.max((got - want).abs());
                pairs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut ami_err: f64 = 0.0;
    let mut cases = 0;
    while cases < 50 {
        let m = rng.random_range(3..=7);
        let p: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let q: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let (pp, qq) = (part(&p), part(&q));
        if contingency(&pp, &qq).unwrap().is_matching() {
            continue;
        }
        let perms = permutations(&q);
        let emi = perms
            .iter()
            .map(|s| mutual_information(&contingency(&pp, &part(s)).unwrap()))
            .sum::<f64>()
            / perms.len() as f64;
        let mi = mutual_information(&contingency(&pp, &qq).unwrap());
        let denom = 0.5 * (entropy(&p) + entropy(&q)) - emi;
        let want = if denom.abs() <= 1e-15 { 0.0 } else { (mi - emi) / denom };
        ami_err = ami_err.max((ami(&pp, &qq).unwrap() - want).abs());
        cases += 1;
    }
    outcome(
        ari_err <= 1e-12 && ami_err <= 1e-9,
        format!("ARI max error {ari_err:.1e} over {pairs} pairs; AMI max error {ami_err:.1e} over 50 cases"),
    )
}

fn c8_noisy(mono: &mut Monotone) -> Outcome {
    let data = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.csv");
    let cols = ColumnSelect {
        include: None,
        exclude: vec!["class".into()],
    };
    let clean = standardize(&load_csv(&data, &cols).unwrap()).unwrap();
    let config = |noise, observations| NoisyConfig {
        schema: NOISY_SCHEMA.into(),
        dataset: data.clone(),
        columns: cols.clone(),
        standardize: true,
        noise,
        observations,
        n: vec![3],
        r: 2.0,
        weights: None,
        trials: 200,
        seed: 808,
        restarts: 10,
    };
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    let cases = [
        (NoiseKind::Gaussian { variance: 0.25 }, 4, "gaussian σ²=0.25"),
        (NoiseKind::Gaussian { variance: 1.0 }, 4, "gaussian σ²=1"),
        (NoiseKind::Gaussian { variance: 4.0 }, 4, "gaussian σ²=4"),
        (NoiseKind::Uniform { half_width: 2.0 }, 2, "uniform η=2"),
    ];
    for (noise, l, label) in cases {
        let res = run_noisy_on(&clean, &config(noise, l)).unwrap();
        mono.checked += res.histories;
        mono.violations += res.non_monotone();
        let p = res.get(Method::Proposed, 3).unwrap().ari.mean;
        let o = res.get(Method::Ordinary, 3).unwrap().ari.mean;
        gaps.push(p - o);
        parts.push(format!("{label}: {p:.4} vs {o:.4}"));
    }
    let pass = gaps[1] > 0.0 && gaps[2] > 0.0 && gaps[2] >= gaps[0] && gaps[2] >= gaps[1] && gaps[3] > 0.0;
    outcome(pass, format!("mean ARI proposed vs ordinary: {}", parts.join("; ")))
}

fn c10_rate() -> Outcome {
    let model = uniform_pair_model();
    let mut worst: f64 = 0.0;
    for r in [2.0, 3.0] {
        let spec = DistortionSpec::uniform(r, 2).unwrap();
        let pred = theorem2_prediction(&model, &spec).unwrap();
        for n in [8usize, 16] {
            let a = pred.at(n).unwrap() - pred.constant;
            let b = pred.at(2 * n).unwrap() - pred.constant;
            worst = worst.max((a / b / 4.0 - 1.0).abs());
        }
    }
    outcome(worst <= 1e-9, format!("max relative deviation from n^-2 scaling {worst:.1e}"))
}

fn timed<F: FnOnce() -> Outcome>(limit: Duration, f: F) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    if elapsed > limit {
        out.pass = false;
        out.detail.push_str(&format!(" [exceeded {limit:?}]"));
    }
    (out, elapsed)
}

fn main() -> ExitCode {
    // respect the filter arguments cargo test passes through
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut mono = Monotone::default();
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    let mut run = |id: u32, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let (out, t) = timed(limit, f);
        println!(
            "{} [{id:>2}] {name}: {} ({:.1}s)",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.as_secs_f64()
        );
        results.push(out.pass);
    };
    run(1, "squared-error reduction", secs(1), &mut c1_reduction);
    run(2, "two-observation center", secs(10), &mut c2_lemma);
    run(3, "uniform-pair closed forms", secs(60), &mut c3_example2);
    run(4, "squared-error predictions agree", secs(60), &mut c4_agreement);
    run(5, "asymptotic constant", secs(120), &mut || c5_constant(&mut mono));
    run(6, "analytical vs fitted codebooks", secs(300), &mut || c6_highres(&mut mono));
    run(7, "partition metrics", secs(60), &mut c7_metrics);
    run(8, "noisy Iris direction", secs(600), &mut || c8_noisy(&mut mono));
    let (checked, violations) = (mono.checked, mono.violations);
    run(9, "monotone descent", secs(1), &mut || {
        outcome(
            violations == 0 && checked > 0,
            format!("{violations} of {checked} histories increased beyond rounding"),
        )
    });
    run(10, "rate scaling", secs(60), &mut c10_rate);
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
