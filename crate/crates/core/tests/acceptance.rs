//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use icpwave::bo::{self, BoConfig, SyntheticQuadratic};
use icpwave::gp::{gp_fit, BoDataset, GpHyperparams};
use icpwave::harness::{
    execute, identify_plant, run_modulation, run_tracking, write_modulation, write_tracking,
    RunConfig, TrackingOutcome,
};
use icpwave::model::{augment, Constraints};
use icpwave::mpc::ControllerKind;
use icpwave::observer::{place_observer_poles, PoleSpec};
use icpwave::qpsolver::{solve_qp, QpProblem, QpSettings};
use icpwave::refgen::{ReferenceParams, ThetaBounds};
use nalgebra::{Complex, DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    match limit {
        Some(l) if elapsed > l => verdict(
            false,
            format!(
                "{}; runtime {:.1} s exceeds {:.0} s",
                v.detail,
                elapsed.as_secs_f64(),
                l.as_secs_f64()
            ),
        ),
        _ => verdict(
            v.pass,
            format!("{}; runtime {:.2} s", v.detail, elapsed.as_secs_f64()),
        ),
    }
}

/// Mean of `r - y` over the top plateau of period `index`.
fn plateau_offset(outcome: &TrackingOutcome, kind: ControllerKind, index: usize) -> f64 {
    let t = outcome.reference.period();
    let peak = outcome.reference.peak();
    let rows = &outcome.run(kind).expect("controller ran").rows[index * t..(index + 1) * t];
    let errs: Vec<f64> = rows
        .iter()
        .filter(|r| (r.r - peak).abs() < 1e-12)
        .map(|r| r.r - r.y)
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

fn criterion_1(logs: &Path) -> Verdict {
    let mut worst_of = 0.0f64;
    let mut weakest_plain = f64::INFINITY;
    for (i, d) in [-0.3, -0.2, -0.1, 0.1, 0.2, 0.3].into_iter().enumerate() {
        let mut cfg = RunConfig::tracking();
        cfg.tracking.output_offset_mm = d;
        cfg.tracking.periods = 4;
        cfg.tracking.controllers = vec![ControllerKind::Mpc, ControllerKind::MpcOffsetFree];
        let out = run_tracking(&cfg).expect("tracking run");
        write_log(logs, &format!("offset_{i}"), |dir| {
            write_tracking(&out, &cfg, dir)
        });
        worst_of = worst_of.max(plateau_offset(&out, ControllerKind::MpcOffsetFree, 3).abs());
        weakest_plain = weakest_plain.min(plateau_offset(&out, ControllerKind::Mpc, 3).abs());
    }
    verdict(
        worst_of < 1e-3 && weakest_plain > 0.05,
        format!(
            "plateau offset after 3 periods: offset-free max {worst_of:.2e} mm (< 1e-3), plain min {weakest_plain:.3} mm (> 0.05)"
        ),
    )
}

fn criterion_2(logs: &Path) -> Verdict {
    let seeds = 5;
    let mut nrmse = [0.0; 3];
    let mut mate = [0.0; 3];
    for seed in 0..seeds {
        let cfg = RunConfig {
            seed,
            ..RunConfig::tracking()
        };
        let out = run_tracking(&cfg).expect("tracking run");
        write_log(logs, &format!("tracking_seed_{seed}"), |dir| {
            write_tracking(&out, &cfg, dir)
        });
        for (i, kind) in ControllerKind::ALL.into_iter().enumerate() {
            let r = out.run(kind).expect("controller ran").report;
            nrmse[i] += r.nrmse / seeds as f64;
            mate[i] += r.mate / seeds as f64;
        }
    }
    let [pid, mpc, of] = nrmse;
    let reduction = 100.0 * (1.0 - of / pid);
    let ordered = of < mpc && mpc < pid && mate[2] < mate[1] && mate[1] < mate[0];
    verdict(
        ordered && reduction >= 60.0,
        format!(
            "NRMSE pid {pid:.2}% mpc {mpc:.2}% of {of:.2}%, MATE pid {:.4} mpc {:.4} of {:.4} mm, reduction {reduction:.1}% (>= 60)",
            mate[0], mate[1], mate[2]
        ),
    )
}

fn criterion_3(logs: &Path) -> Verdict {
    let c = Constraints::default();
    let (mut files, mut rows, mut input_viol, mut position_viol) = (0, 0usize, 0, 0);
    for trace in trace_files(logs) {
        let mut reader = csv::Reader::from_path(&trace).expect("trace readable");
        let headers = reader.headers().expect("header").clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .expect("column present")
        };
        let (iu, ip) = (col("u_A"), col("position_mm"));
        for record in reader.records() {
            let record = record.expect("row");
            let u: f64 = record[iu].parse().expect("number");
            let p: f64 = record[ip].parse().expect("number");
            input_viol += usize::from(!c.input.contains(u));
            position_viol += usize::from(!c.position.contains(p));
            rows += 1;
        }
        files += 1;
    }
    verdict(
        files > 0 && input_viol == 0 && position_viol == 0,
        format!("{files} trace files, {rows} rows: {input_viol} input and {position_viol} position violations"),
    )
}

/// Exhaustive active-set enumeration for `min ½zᵀHz + gᵀz, lo ≤ z ≤ hi`.
fn enumeration_oracle(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let n = g.len();
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut status = vec![0u8; n];
        let mut c = code;
        for s in status.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let mut z = DVector::zeros(n);
        let free: Vec<usize> = (0..n).filter(|&i| status[i] == 0).collect();
        for i in 0..n {
            match status[i] {
                1 => z[i] = lo[i],
                2 => z[i] = hi[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -g[free[a]]
                    - (0..n)
                        .filter(|j| status[*j] != 0)
                        .map(|j| h[(free[a], j)] * z[j])
                        .sum::<f64>()
            });
            let Some(zf) = hff.lu().solve(&rhs) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                z[i] = zf[a];
            }
        }
        if (0..n).all(|i| z[i] >= lo[i] - 1e-12 && z[i] <= hi[i] + 1e-12) {
            best = best.min(0.5 * z.dot(&(h * &z)) + g.dot(&z));
        }
    }
    best
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let lo = DVector::from_fn(n, |_, _| rng.random_range(-2.0..0.0));
        let hi = DVector::from_fn(n, |i, _| lo[i] + rng.random_range(0.1..2.5));
        let oracle = enumeration_oracle(&h, &g, &lo, &hi);
        let p = QpProblem::boxed(h, g, lo, hi).expect("valid problem");
        let sol = solve_qp(&p, &QpSettings::default()).expect("solve");
        worst = worst.max((p.objective(&sol.z) - oracle).abs());
    }
    verdict(
        worst <= 1e-6,
        format!("50 box QPs, max |objective - oracle| = {worst:.2e} (<= 1e-6)"),
    )
}

fn dense_posterior(
    data: &BoDataset,
    hp: &GpHyperparams,
    bounds: &ThetaBounds,
    theta: &ReferenceParams,
) -> (f64, f64) {
    let xs: Vec<[f64; 2]> = data
        .entries
        .iter()
        .map(|o| bounds.to_unit(&o.theta()))
        .collect();
    let ys: Vec<f64> = data.entries.iter().map(|o| o.cost).collect();
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let k = |a: &[f64; 2], b: &[f64; 2]| {
        let r2 = ((a[0] - b[0]) / hp.lengthscales[0]).powi(2)
            + ((a[1] - b[1]) / hp.lengthscales[1]).powi(2);
        hp.signal_variance * (-0.5 * r2).exp()
    };
    let inv = DMatrix::from_fn(n, n, |i, j| {
        k(&xs[i], &xs[j]) + if i == j { hp.noise_variance } else { 0.0 }
    })
    .try_inverse()
    .expect("invertible Gram matrix");
    let x = bounds.to_unit(theta);
    let ks = DVector::from_fn(n, |i, _| k(&xs[i], &x));
    let y = DVector::from_fn(n, |i, _| (ys[i] - mean) / sd);
    let mu = mean + sd * (ks.transpose() * &inv * y)[0];
    let var = hp.signal_variance - (ks.transpose() * &inv * &ks)[0];
    (mu, sd * var.max(0.0).sqrt())
}

fn criterion_5() -> Verdict {
    let hp = GpHyperparams::default();
    let bounds = ThetaBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = |rng: &mut ChaCha8Rng| {
        bounds.from_unit([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
    };
    let (mut worst_mu, mut worst_sd) = (0.0f64, 0.0f64);
    let (mut negative, mut increases) = (0, 0);
    for _ in 0..50 {
        let n = rng.random_range(2..=10);
        let mut data = BoDataset::new();
        for i in 0..n {
            let theta = draw(&mut rng);
            data.push(i, theta, rng.random_range(-2.0..0.0), 0.0);
        }
        let post = gp_fit(&data, &hp, &bounds).expect("fit");
        let mut bigger = data.clone();
        bigger.push(n, draw(&mut rng), rng.random_range(-2.0..0.0), 0.0);
        let post_bigger = gp_fit(&bigger, &hp, &bounds).expect("fit");
        for _ in 0..20 {
            let q = draw(&mut rng);
            let (mu, sd) = post.predict(&q);
            let (omu, osd) = dense_posterior(&data, &hp, &bounds, &q);
            worst_mu = worst_mu.max((mu - omu).abs());
            worst_sd = worst_sd.max((sd - osd).abs());
            let (_, var) = post.predict_standardized(&q);
            let (_, var_bigger) = post_bigger.predict_standardized(&q);
            negative += usize::from(var < 0.0 || var_bigger < 0.0);
            increases += usize::from(var_bigger > var + 1e-12);
        }
    }
    verdict(
        worst_mu <= 1e-10 && worst_sd <= 1e-10 && negative == 0 && increases == 0,
        format!(
            "max |dmu| {worst_mu:.1e}, |dsigma| {worst_sd:.1e} (<= 1e-10); {negative} negative variances, {increases} variance increases after adding data"
        ),
    )
}

fn criterion_6() -> Verdict {
    let theta_true = ReferenceParams::new(0.137, 0.83);
    let bounds = ThetaBounds::default();
    let tolerance = 0.05 * bounds.diagonal();
    let mut hits = 0;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let cfg = BoConfig {
            seed,
            ..BoConfig::default()
        };
        let run = bo::run(&cfg, &mut SyntheticQuadratic { theta_true }).expect("BO run");
        let dist = ((run.best_theta.delay - theta_true.delay).powi(2)
            + (run.best_theta.magnitude - theta_true.magnitude).powi(2))
        .sqrt();
        worst = worst.max(dist);
        hits += usize::from(dist <= tolerance);
    }
    verdict(
        hits >= 9,
        format!("{hits}/10 seeds within {tolerance:.4} of the optimum (need 9), worst distance {worst:.4}"),
    )
}

fn criterion_7(logs: &Path) -> Verdict {
    let limit = Duration::from_secs(300);
    let mut pass = true;
    let mut parts = Vec::new();
    for bpm in [60.0, 90.0] {
        let start = Instant::now();
        let cfg = RunConfig::modulation(bpm);
        let out = run_modulation(&cfg).expect("modulation run");
        write_log(logs, &format!("modulation_{bpm}"), |dir| {
            write_modulation(&out, &cfg, dir)
        });
        let r = out.report;
        let elapsed = start.elapsed();
        let ok = (1.8..=2.2).contains(&r.amplification)
            && r.max_relative_mean_increase < 2.0
            && elapsed <= limit;
        pass &= ok;
        parts.push(format!(
            "{bpm} BPM: amplification {:.3} in [1.8, 2.2], mean increase {:.3}% (< 2), theta* ({:.4} s, {:.4} mm), {:.1} s",
            r.amplification,
            r.max_relative_mean_increase,
            out.bo.best_theta.delay,
            out.bo.best_theta.magnitude,
            elapsed.as_secs_f64()
        ));
    }
    verdict(pass, parts.join("; "))
}

fn matches_poles(m: &Matrix3<f64>, poles: &[Complex<f64>; 3]) -> f64 {
    let eig = m.complex_eigenvalues();
    let mut used = [false; 3];
    let mut worst = 0.0f64;
    for p in poles {
        let (j, d) = (0..3)
            .filter(|j| !used[*j])
            .map(|j| (j, (eig[j] - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("unused eigenvalue");
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

fn criterion_8() -> Verdict {
    let ident = identify_plant(&RunConfig::tracking()).expect("identification");
    let aug = augment(&ident.model);
    let sets = [
        PoleSpec::real([0.5, 0.6, 0.7]),
        PoleSpec::default(),
        PoleSpec::real(icpwave::harness::DEFAULT_LOOP_POLES),
        PoleSpec([[0.6, 0.2], [0.6, -0.2], [0.3, 0.0]]),
    ];
    let mut worst = 0.0f64;
    for spec in sets {
        let poles = spec.poles();
        let gain = place_observer_poles(&aug, &poles).expect("placement");
        worst = worst.max(matches_poles(&gain.error_dynamics(&aug), &poles));
    }
    let zero = [Complex::new(0.0, 0.0); 3];
    let gain = place_observer_poles(&aug, &zero).expect("deadbeat placement");
    let m = gain.error_dynamics(&aug);
    let cube = (m * m * m).abs().max();
    verdict(
        worst <= 1e-8 && cube <= 1e-8,
        format!(
            "max eigenvalue error {worst:.1e} (<= 1e-8); deadbeat max |M^3| {cube:.1e} (<= 1e-8)"
        ),
    )
}

fn criterion_9(root: &Path) -> Verdict {
    let mut identical = true;
    let mut checked = Vec::new();
    for (name, cfg) in [
        ("tracking", RunConfig::tracking()),
        ("modulation", RunConfig::modulation(90.0)),
    ] {
        let summaries: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|run| {
                let cfg = RunConfig {
                    out_dir: root.join(run),
                    ..cfg.clone()
                };
                let dir = execute(&cfg).expect("run");
                std::fs::read(dir.join("summary.csv")).expect("summary written")
            })
            .collect();
        identical &= summaries[0] == summaries[1];
        checked.push(format!("{name} ({} bytes)", summaries[0].len()));
    }
    verdict(
        identical,
        format!(
            "repeated runs give byte-identical summary.csv: {}",
            checked.join(", ")
        ),
    )
}

fn write_log(
    root: &Path,
    name: &str,
    write: impl FnOnce(&Path) -> Result<(), icpwave::harness::HarnessError>,
) {
    let dir = root.join(name);
    for sub in ["traces", "gp"] {
        std::fs::create_dir_all(dir.join(sub)).expect("log directory");
    }
    write(&dir).expect("outputs written");
}

fn trace_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable").flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.parent().is_some_and(|p| p.ends_with("traces"))
                && path.extension().is_some_and(|e| e == "csv")
                && !path
                    .file_name()
                    .is_some_and(|f| f.to_string_lossy().starts_with("reference"))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let logs = tmp.path().join("logs");
    let secs = |s: u64| Some(Duration::from_secs(s));
    let results = [
        (
            "1 offset-free plateau tracking",
            timed(secs(10), || criterion_1(&logs)),
        ),
        (
            "2 controller ordering",
            timed(secs(60), || criterion_2(&logs)),
        ),
        ("4 QP vs enumeration oracle", timed(secs(5), criterion_4)),
        ("5 GP vs dense oracle", timed(None, criterion_5)),
        ("6 BO on synthetic optimum", timed(secs(30), criterion_6)),
        (
            "7 end-to-end modulation",
            timed(None, || criterion_7(&logs)),
        ),
        ("8 observer pole placement", timed(None, criterion_8)),
        (
            "9 determinism",
            timed(None, || criterion_9(&tmp.path().join("repeat"))),
        ),
        (
            "3 constraint safety from traces",
            timed(None, || criterion_3(&logs)),
        ),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "{} criterion {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
