//! Synthesize a Riccati stabilizer, certify it as (kappa, gamma)-strongly
//! stable, and see how much model error the certificate tolerates.

use netctl::linalg::Mat;
use netctl::lti::SystemParams;
use netctl::stability::{
    certify_strong_stability, controllability_index, perturbation_margin, strong_controllability,
    synthesize_stabilizer,
};

fn main() -> netctl::Result<()> {
    // Open-loop unstable: spectral radius 1.2.
    let a = Mat::from_row_slice(3, 3, &[1.2, 0.3, 0.0, 0.0, 0.8, 0.2, 0.1, 0.0, 0.5]);
    let b = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let sys = SystemParams::new(a.clone(), b.clone())?;

    let k = synthesize_stabilizer(&sys)?;
    let cert = certify_strong_stability(&k, &sys)?;
    println!("K =\n{k:.4}");
    println!(
        "certificate ({:?}): kappa={:.4} gamma={:.4} spectral radius={:.4}",
        cert.method, cert.kappa, cert.gamma, cert.spectral_radius
    );
    cert.verify(&k, &sys)?;

    for eps in [0.0, 1e-3, 1e-2] {
        match perturbation_margin(&cert, eps) {
            Ok((kappa, gamma)) => println!("model error {eps:.0e}: still ({kappa:.3}, {gamma:.4})-stable"),
            Err(e) => println!("model error {eps:.0e}: {e}"),
        }
    }

    let q = controllability_index(&a, &b).expect("controllable pair");
    let ctrl = strong_controllability(&a, &b, q)?;
    println!("controllability index q={q}, |(C_q C_q^T)^-1|={:.4}", ctrl.kappa_ctrl);
    Ok(())
}
