//! Probe the combined per-word loss `-log q + (q/p) log(q/p)` around its
//! stationary point: the Taylor expansion of its derivative, the cubic decay
//! of the expansion residual, and the step-size scale relative to plain
//! cross-entropy.

use revkl::propcheck::{
    run_suite, step_scale_ratio, sweep, taylor_residual, PropPoint, Side,
};

fn main() {
    println!("p_hat      eps          side    exact          predicted      residual");
    for row in sweep().iter().filter(|r| r.eps > 1e-4 * r.p_hat) {
        println!(
            "{:<8} {:<12.3e} {:<7} {:>13.6e} {:>13.6e} {:>13.3e}",
            row.p_hat,
            row.eps,
            format!("{:?}", row.side),
            row.exact,
            row.predicted,
            row.residual
        );
    }

    // halving eps shrinks the residual ~8x: the residual is cubic
    let p_hat = 0.1;
    println!("\ncubic decay at p_hat = {p_hat}:");
    for k in 0..4 {
        let eps = 0.01 * p_hat / f64::powi(2.0, k);
        let r = taylor_residual(&PropPoint::new(p_hat, eps, Side::Below));
        println!("  eps {:.2e}: residual {:.3e}", eps, r);
    }

    // the gradient-step scale carries the extra eps/p factor
    let point = PropPoint::new(0.5, 0.005, Side::Below);
    println!(
        "\nstep-size ratio vs plain CE at p_hat=0.5, eps=0.005: {:.5} (leading order 2 eps/p = {:.5})",
        step_scale_ratio(&point),
        2.0 * 0.005 / 0.5
    );

    let summary = run_suite(1).unwrap();
    println!("\nfull verification suite pass: {}", summary.pass);
    assert!(summary.pass);
}
