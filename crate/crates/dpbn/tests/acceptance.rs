//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Criteria 5-7 train three full-size models (about an hour on one core).
//! Set `DPBN_ACCEPTANCE_RUNS=<dir>` to read `<dir>/<name>/log.csv` from
//! earlier `dpbn train` runs of the configs in `configs/` instead.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dpbn::data::{self, ShiftPlan};
use dpbn::fit::TrainingLog;
use dpbn_core::saddle::solve_saddle;
use dpbn_core::{DpbnNetwork, Layer, MaxEntKind, Matrix, SolverOptions, Tca, TcaLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist(name: &str) -> PathBuf {
    repo().join("data/mnist").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpbn"))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

fn in_range(rng: &mut ChaCha8Rng, kind: MaxEntKind) -> f64 {
    match kind {
        MaxEntKind::Linear => rng.sample(StandardNormal),
        MaxEntKind::TruncGauss => rng.random_range(0.05..3.0),
        MaxEntKind::TruncExpon => rng.random_range(0.02..0.98),
    }
}

fn random_tca(rng: &mut ChaCha8Rng, base: MaxEntKind, k: usize) -> Tca {
    let a = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let w = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tca::new(base, a, w, b).unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let out = bin().arg("gradcheck").output().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err = stdout
        .split_whitespace()
        .find_map(|f| f.strip_prefix("max_rel_err="))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::INFINITY);
    outcome(
        out.status.success() && err <= 1e-4 && secs <= 300.0,
        format!("max_rel_err={err:e} (<= 1e-4), {secs:.2}s (<= 300s), exit {:?}", out.status.code()),
    )
}

fn pseudo_inverse_solution(w: &Matrix, z: &[f64]) -> Vec<f64> {
    let wn = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    let pinv = wn.transpose().pseudo_inverse(1e-14).unwrap();
    let x = pinv * nalgebra::DVector::from_column_slice(z);
    x.iter().copied().collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let opts = SolverOptions::default();
    let mut failures = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_pinv: f64 = 0.0;
    for kind in MaxEntKind::ALL {
        for _ in 0..1000 {
            let m = rng.random_range(1..=16);
            let n = rng.random_range(m..=32);
            let w = gaussian_matrix(&mut rng, n, m);
            let u: Vec<f64> = (0..n).map(|_| in_range(&mut rng, kind)).collect();
            let z = w.mul_t_vec(&u);
            let bound = 1e-10 * (1.0 + dpbn_core::linalg::norm_inf(&z));
            match solve_saddle(&w, &z, kind, opts) {
                Ok(r) => {
                    let back = w.mul_t_vec(&r.x_hat);
                    let res = back.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst_ratio = worst_ratio.max(res / bound);
                    if res > bound {
                        failures += 1;
                    }
                    if kind == MaxEntKind::Linear {
                        let p = pseudo_inverse_solution(&w, &z);
                        let d = p.iter().zip(&r.x_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                        worst_pinv = worst_pinv.max(d);
                    }
                }
                Err(_) => failures += 1,
            }
        }
    }
    outcome(
        failures == 0 && worst_pinv <= 1e-8,
        format!(
            "3000 instances, {failures} failures, worst residual/bound {worst_ratio:.3e}, linear vs pseudo-inverse {worst_pinv:.3e} (<= 1e-8)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst_tca: f64 = 0.0;
    let mut worst_maxent: f64 = 0.0;
    let mut errors = 0;
    for i in 0..10_000 {
        let base = MaxEntKind::ALL[i % 3];
        let k = rng.random_range(1..=4);
        let t = random_tca(&mut rng, base, k);
        let x = rng.random_range(-6.0..6.0);
        match t.invert(t.eval(x)) {
            Ok(back) => worst_tca = worst_tca.max((back - x).abs()),
            Err(_) => errors += 1,
        }
        let alpha = rng.random_range(-20.0..20.0);
        match base.lambda_inverse(base.lambda(alpha)) {
            Ok(back) => worst_maxent = worst_maxent.max((back - alpha).abs()),
            Err(_) => errors += 1,
        }
    }
    outcome(
        errors == 0 && worst_tca <= 1e-9 && worst_maxent <= 1e-9,
        format!("10^4 draws each: TCA worst {worst_tca:.3e}, MaxEnt worst {worst_maxent:.3e} (<= 1e-9), {errors} errors"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let opts = SolverOptions::default();
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=4);
        let mut dims = vec![rng.random_range(8..=40)];
        for _ in 0..depth {
            let prev = *dims.last().unwrap();
            dims.push(rng.random_range((prev / 2).max(1)..=prev));
        }
        let mut layers = Vec::new();
        for l in 0..depth {
            let base = if l == 0 {
                MaxEntKind::Linear
            } else {
                [MaxEntKind::TruncGauss, MaxEntKind::TruncExpon][rng.random_range(0..2)]
            };
            let k = rng.random_range(1..=3);
            let units = (0..dims[l]).map(|_| random_tca(&mut rng, base, k)).collect();
            let tca = TcaLayer::from_units(dims[l], false, units).unwrap();
            layers.push(Layer::new(gaussian_matrix(&mut rng, dims[l], dims[l + 1]), tca).unwrap());
        }
        let net = DpbnNetwork::from_layers(layers).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (y, _) = net.encode(&x).unwrap();
        let out = net.decode(&y, opts).unwrap();
        let last = out.layers.last().unwrap();
        let w = &net.layers()[depth - 1].weights;
        let back = w.mul_t_vec(&last.solve.x_hat);
        let res = back.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let bound = opts.tol * (1.0 + dpbn_core::linalg::norm_inf(&y));
        worst = worst.max(res / bound);
        if !last.solve.converged || res > bound {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("100 random nets, {failures} failures, worst residual/tolerance {worst:.3e}"))
}

/// Final log rows of the three Experiment-1 runs, training them if needed.
struct Runs {
    plain: TrainingLog,
    tca: TrainingLog,
    aec: TrainingLog,
    aec_header: String,
    tca_header: String,
    source: String,
}

fn read_log(path: &Path) -> Result<(TrainingLog, String), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let columns = text.lines().find(|l| !l.starts_with('#')).unwrap_or_default().to_string();
    let rows = TrainingLog::parse_rows(&text);
    if rows.is_empty() {
        return Err(format!("{}: no rows", path.display()));
    }
    Ok((TrainingLog { header: Vec::new(), rows }, columns))
}

fn experiment_runs() -> Result<Runs, String> {
    let (dir, source) = match std::env::var_os("DPBN_ACCEPTANCE_RUNS") {
        Some(d) => (PathBuf::from(&d), format!("logs from {}", PathBuf::from(d).display())),
        None => {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?.keep();
            for name in ["dpbn_plain", "dpbn_tca", "aec"] {
                let t = Instant::now();
                let status = bin()
                    .args(["train", "--quiet", "--config"])
                    .arg(repo().join("configs").join(format!("{name}.json")))
                    .arg("--out")
                    .arg(dir.join(name))
                    .status()
                    .map_err(|e| e.to_string())?;
                if !status.success() {
                    return Err(format!("dpbn train {name} exited with {status}"));
                }
                println!("  trained {name} in {:.0}s", t.elapsed().as_secs_f64());
            }
            (dir, "fresh training runs".to_string())
        }
    };
    let (plain, _) = read_log(&dir.join("dpbn_plain/log.csv"))?;
    let (tca, tca_header) = read_log(&dir.join("dpbn_tca/log.csv"))?;
    let (aec, aec_header) = read_log(&dir.join("aec/log.csv"))?;
    Ok(Runs { plain, tca, aec, aec_header, tca_header, source })
}

fn criteria_5_to_7() -> [Outcome; 3] {
    let runs = match experiment_runs() {
        Ok(r) => r,
        Err(e) => return [0, 1, 2].map(|_| outcome(false, format!("training unavailable: {e}"))),
    };
    println!("  ({})", runs.source);
    let plain = runs.plain.last().unwrap();
    let tca = runs.tca.last().unwrap();
    let aec = runs.aec.last().unwrap();
    let c5 = outcome(
        tca.test_mse < plain.test_mse && tca.epoch >= 200 && plain.epoch >= 200,
        format!(
            "test MSE D-PBN/TCA {:.4} vs D-PBN {:.4} (needs TCA lower), {}/{} epochs (train {:.4} / {:.4})",
            tca.test_mse, plain.test_mse, tca.epoch, plain.epoch, tca.train_mse, plain.train_mse
        ),
    );
    let c6 = outcome(
        aec.test_mse <= 2.0 * aec.train_mse && runs.aec_header == runs.tca_header && aec.epoch >= 200,
        format!(
            "AEC test {:.4} <= 2 x train {:.4}, {} epochs, CSV schema {}",
            aec.test_mse,
            aec.train_mse,
            aec.epoch,
            if runs.aec_header == runs.tca_header { "matches" } else { "differs" }
        ),
    );
    let initial = runs.tca.rows[0].efficiency;
    let c7 = outcome(
        tca.efficiency >= 0.98,
        format!("D-PBN/TCA test efficiency {:.4} (>= 0.98), initial {:.4}", tca.efficiency, initial),
    );
    [c5, c6, c7]
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = repo().join("configs/determinism.json");
    let mut files = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(run);
        let status = bin()
            .env("DPBN_THREADS", threads)
            .args(["train", "--quiet", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let model = std::fs::read(out.join("model.dpbn")).unwrap();
        let log = std::fs::read(out.join("log.csv")).unwrap();
        files.push((model, log));
    }
    let same_model = files[0].0 == files[1].0;
    let same_log = files[0].1 == files[1].1;
    outcome(
        same_model && same_log,
        format!(
            "model files {}, logs {} (1 vs 3 worker threads)",
            if same_model { "identical" } else { "differ" },
            if same_log { "identical" } else { "differ" }
        ),
    )
}

fn criterion_9() -> Outcome {
    let raw = match data::load_idx(&mnist("train-images-idx3-ubyte.gz"), &mnist("train-labels-idx1-ubyte.gz")) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("MNIST unavailable: {e}")),
    };
    let subset = data::select_subset(&raw, &[3, 8, 9], Some(500), 1).unwrap();
    let counts = [3u8, 8, 9].map(|c| subset.count_of(c));
    let counts_ok = counts == [500, 500, 500] && subset.len() == 1500;
    let dithered = data::dither(&subset, 0.01, 1).unwrap();
    let g = data::gaussianify(&dithered).unwrap();
    let round_trip = g
        .samples
        .as_slice()
        .iter()
        .zip(dithered.samples.as_slice())
        .map(|(&a, &b)| (data::sigmoid(a) - b).abs())
        .fold(0.0, f64::max);
    let (r, c) = g.shape;
    let plan = ShiftPlan::new(r, c);
    let mut roll: f64 = 0.0;
    for i in 0..20 {
        let img = g.samples.row(i * 70);
        for (dv, dh) in [(1i64, 0i64), (0, 1), (-1, 1), (2, -3)] {
            let y = plan.shift(img, dv as f64, dh as f64);
            for p in 0..r {
                for q in 0..c {
                    let sp = (p as i64 - dv).rem_euclid(r as i64) as usize;
                    let sq = (q as i64 - dh).rem_euclid(c as i64) as usize;
                    roll = roll.max((y[p * c + q] - img[sp * c + sq]).abs());
                }
            }
        }
    }
    outcome(
        counts_ok && round_trip <= 1e-12 && roll <= 1e-9,
        format!(
            "sigmoid(gaussianify) {round_trip:.2e} (<= 1e-12), integer shift vs roll {roll:.2e} (<= 1e-9), class counts {counts:?} of {}",
            subset.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let [c5, c6, c7] = criteria_5_to_7();
    report(5, c5);
    report(6, c6);
    report(7, c7);
    report(8, criterion_8());
    report(9, criterion_9());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
