//! Sensitivity of target-specified NTL to the scaling factors α and α′.
//!
//! Nine 30-epoch runs, about eighteen minutes on one core, so ignored by
//! default: `cargo test -p ntl-core --test robustness -- --ignored --nocapture`.

use ntl::domains::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes};
use ntl::models::{build_model, ArchitectureSpec};
use ntl::objective::{train_target_specified, NtlConfig};

#[test]
#[ignore]
fn scaling_factors_do_not_matter_much() {
    let sizes = SyntheticSizes {
        image_size: 16,
        train: 2000,
        test: 500,
    };
    let (src, tgt) = make_synthetic_domain_pair(2021, &SyntheticShiftSpec::strong_tint(), &sizes).unwrap();
    let (s_tr, s_te) = src.split_at(2000);
    let (t_tr, t_te) = tgt.split_at(2000);
    let spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
    let run = |alpha: f64, alpha_prime: f64| {
        let cfg = NtlConfig {
            alpha,
            alpha_prime,
            epochs: 30,
            learning_rate: 3e-4,
            ..Default::default()
        };
        let (m, _) = train_target_specified(&s_tr, &t_tr, build_model(&spec, 2021).unwrap(), &cfg).unwrap();
        (m.accuracy(&s_te).unwrap(), m.accuracy(&t_te).unwrap())
    };
    let (base_src, base_aux) = run(0.1, 0.1);
    println!("default: source {base_src:.3} aux {base_aux:.3}");
    let mut misses = Vec::new();
    for value in [0.01, 0.05, 0.2, 0.5] {
        for (name, a, ap) in [("alpha", value, 0.1), ("alpha_prime", 0.1, value)] {
            let (s, x) = run(a, ap);
            let ok = (s - base_src).abs() <= 0.05 && (x - base_aux).abs() <= 0.08;
            println!("{name} = {value}: source {s:.3} aux {x:.3} {}", if ok { "ok" } else { "MISS" });
            if !ok {
                misses.push(format!("{name}={value}"));
            }
        }
    }
    assert!(misses.is_empty(), "outside tolerance: {misses:?}");
}
