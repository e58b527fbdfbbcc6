//! Verify the reverse-mode gradients of all three training losses against
//! central finite differences on a tiny model.

use revkl::corpus::{Sentence, SENTENCE_TOKENS};
use revkl::nncore::{gradient_check, LossKind, ModelDims};

fn main() {
    let dims = ModelDims::new(20, 8);
    let batch: Vec<Sentence> = (0..4)
        .map(|s| {
            let mut sent = [0u32; SENTENCE_TOKENS];
            for (t, slot) in sent.iter_mut().enumerate().skip(1) {
                *slot = ((s * 13 + t * 7) as u32 % 20) + 1;
            }
            sent
        })
        .collect();

    println!("finite differences with h = 1e-4 on a V=20, hidden=8 model:");
    for kind in LossKind::ALL {
        let report = gradient_check(kind, dims, &batch, 7, 1e-4).unwrap();
        println!(
            "  {:<14} max relative error {:.3e} over {} coordinates (small-coordinate abs {:.1e})",
            kind.name(),
            report.max_rel_err,
            report.compared,
            report.max_abs_err_small
        );
        assert!(report.max_rel_err < 1e-4);
    }
    println!("all gradients agree with the finite-difference oracle");
}
