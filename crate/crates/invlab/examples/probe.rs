use invlab::harness::*;

fn pairwise(report: &MetricsReport, a: &str, b: &str) -> (usize, usize) {
    let ra: Vec<f64> = report.rows.iter().filter(|r| r.method == a).map(|r| r.mse).collect();
    let rb: Vec<f64> = report.rows.iter().filter(|r| r.method == b).map(|r| r.mse).collect();
    let wins = ra.iter().zip(&rb).filter(|(x, y)| x < y).count();
    (wins, ra.len())
}

fn within_factor(report: &MetricsReport, a: &str, b: &str, f: f64) -> (usize, usize) {
    let ra: Vec<f64> = report.rows.iter().filter(|r| r.method == a).map(|r| r.mse).collect();
    let rb: Vec<f64> = report.rows.iter().filter(|r| r.method == b).map(|r| r.mse).collect();
    let ok = ra.iter().zip(&rb).filter(|(x, y)| **x <= f * **y).count();
    (ok, ra.len())
}

fn main() {
    // criterion 5 shape: exact GMM, no injection
    let mut c = ExperimentConfig::default_with(100, 20240817, 8);
    c.model = ModelSpec::GmmRandom { components: 3 };
    c.grid.steps = 50;
    c.methods = vec!["ife".into(), "ddim".into(), "fp:k=2,tol=1e-300".into(), "fp:k=1,tol=1e-300".into(), "ife-noerr".into(), "ife-noinit".into()];
    let t0 = std::time::Instant::now();
    let rep = run_roundtrip(&c).unwrap();
    println!("clean run: {:?}, failures {}", t0.elapsed(), rep.failures.len());
    for a in &rep.aggregates {
        println!("  {:<22} mse {:.4e} (+-{:.1e}) psnr {:.2} nfe {}", a.method, a.mse_mean, a.mse_std, a.psnr_mean, a.nfe_mean);
    }
    let (w, n) = pairwise(&rep, "ife", "ddim");
    println!("ife < ddim: {w}/{n}");
    let (w, n) = within_factor(&rep, "ife", "fp:k=2,tol=1e-300", 2.0);
    println!("ife <= 2x fp2: {w}/{n}");
    let (w, n) = pairwise(&rep, "ife", "fp:k=1,tol=1e-300");
    println!("ife < fp1 (clean): {w}/{n}");
    let (w, n) = pairwise(&rep, "ife", "ife-noerr");
    println!("ife < ife-noerr (clean): {w}/{n}");

    // criterion 6 shape: same instances, rho = 0.75 injection
    let mut c2 = c.clone();
    c2.error_model = Some(ErrorModelSpec { gamma: invlab::models::GammaSchedule::Constant(0.01), rho: 0.75 });
    let t0 = std::time::Instant::now();
    let rep2 = run_roundtrip(&c2).unwrap();
    println!("injected run: {:?}, failures {}", t0.elapsed(), rep2.failures.len());
    for a in &rep2.aggregates {
        println!("  {:<22} mse {:.4e} (+-{:.1e}) psnr {:.2}", a.method, a.mse_mean, a.mse_std, a.psnr_mean);
    }
    let (w, n) = pairwise(&rep2, "ife", "ife-noerr");
    println!("ife < ife-noerr (rho 0.75): {w}/{n}");
    let (w, n) = pairwise(&rep2, "ife", "fp:k=1,tol=1e-300");
    println!("ife < fp1 (rho 0.75): {w}/{n}");
    let ife = rep2.aggregate("ife").unwrap().mse_mean;
    let noinit = rep2.aggregate("ife-noinit").unwrap().mse_mean;
    println!("mean mse ife {ife:.6e} vs ife-noinit {noinit:.6e} -> degradation: {}", noinit > ife);
    let ifec = rep.aggregate("ife").unwrap().mse_mean;
    let noinitc = rep.aggregate("ife-noinit").unwrap().mse_mean;
    println!("clean: mean mse ife {ifec:.6e} vs ife-noinit {noinitc:.6e} -> degradation: {}", noinitc > ifec);
}
