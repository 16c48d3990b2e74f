use std::ffi::CStr;
use std::ptr;

use epochal_ffi::*;

fn last_error() -> String {
    let p = epochal_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn run_config(protocol: EpochalProtocol, seed: u64) -> EpochalRunConfig {
    EpochalRunConfig {
        protocol,
        components: 6,
        seed,
        delay_lo: 1,
        delay_hi: 10,
        crash_prob: 0.3,
        epoch: 1,
        boundary: 40,
        ack_timeout: 100,
    }
}

#[test]
fn pr_atomic_matches_closed_form() {
    let mut out = 0.0;
    assert_eq!(unsafe { epochal_pr_atomic(0.9, 3, &mut out) }, EpochalStatus::Ok);
    assert!((out - (0.729 + 0.001)).abs() < 1e-15);

    assert_eq!(unsafe { epochal_pr_atomic(1.5, 3, &mut out) }, EpochalStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { epochal_pr_atomic(0.5, 3, ptr::null_mut()) }, EpochalStatus::NullPointer);
}

#[test]
fn table_rows_round_to_published() {
    let n = epochal_reliability_row_count();
    assert_eq!(n, 5);
    for i in 0..n {
        let mut row = EpochalReliabilityRow::default();
        assert_eq!(unsafe { epochal_reliability_row(i, &mut row) }, EpochalStatus::Ok);
        assert!(((row.pr_atomic * 1000.0).round() / 1000.0 - row.published).abs() < 1e-12);
    }
    let mut row = EpochalReliabilityRow::default();
    assert_eq!(unsafe { epochal_reliability_row(n, &mut row) }, EpochalStatus::InvalidArgument);
}

#[test]
fn moment_skew_elementwise() {
    let g = [1.0, -2.0, 0.5];
    let mut out = [0.0; 3];
    assert_eq!(unsafe { epochal_moment_skew(g.as_ptr(), 3, 0.9, out.as_mut_ptr()) }, EpochalStatus::Ok);
    for (o, gi) in out.iter().zip(g) {
        assert!((o - 0.09 * gi).abs() < 1e-15);
    }
    assert_eq!(
        unsafe { epochal_moment_skew(g.as_ptr(), 3, 1.0, out.as_mut_ptr()) },
        EpochalStatus::InvalidArgument
    );
}

#[test]
fn protocol_runs_are_deterministic_and_bilateral_never_mixes() {
    for seed in 0..40 {
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let cfg = run_config(EpochalProtocol::Bilateral, seed);
            let mut run = ptr::null_mut();
            assert_eq!(unsafe { epochal_run_protocol(&cfg, &mut run) }, EpochalStatus::Ok);
            let mut class = EpochalClass::Top;
            let mut kind = EpochalDecisionKind::NoDecision;
            let mut epoch = 0;
            let mut h = 0;
            unsafe {
                assert_eq!(epochal_run_class(run, &mut class), EpochalStatus::Ok);
                assert_eq!(epochal_run_decision(run, &mut kind, &mut epoch), EpochalStatus::Ok);
                assert_eq!(epochal_run_trace_hash(run, &mut h), EpochalStatus::Ok);
            }
            assert_ne!(class, EpochalClass::Mixed);
            if kind == EpochalDecisionKind::Committed {
                assert_eq!(class, EpochalClass::Top);
            }
            hashes.push(h);
            unsafe { epochal_run_free(run) };
        }
        assert_eq!(hashes[0], hashes[1]);
    }
}

#[test]
fn run_vector_reports_length_then_fills() {
    let cfg = run_config(EpochalProtocol::Naive, 3);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { epochal_run_protocol(&cfg, &mut run) }, EpochalStatus::Ok);
    let mut len = 0;
    assert_eq!(unsafe { epochal_run_vector(run, ptr::null_mut(), 0, &mut len) }, EpochalStatus::Ok);
    assert_eq!(len, 6);
    let mut small = [0i8; 2];
    assert_eq!(
        unsafe { epochal_run_vector(run, small.as_mut_ptr(), 2, &mut len) },
        EpochalStatus::InvalidArgument
    );
    let mut buf = [9i8; 6];
    assert_eq!(unsafe { epochal_run_vector(run, buf.as_mut_ptr(), 6, &mut len) }, EpochalStatus::Ok);
    assert!(buf.iter().all(|p| (-1..=1).contains(p)));
    unsafe { epochal_run_free(run) };
}

#[test]
fn bad_run_config_is_reported() {
    let mut cfg = run_config(EpochalProtocol::Naive, 1);
    cfg.components = 0;
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { epochal_run_protocol(&cfg, &mut run) }, EpochalStatus::InvalidArgument);
    assert!(run.is_null());
    epochal_clear_error();
    assert!(epochal_last_error().is_null());
}

#[test]
fn optimizer_handle_steps_and_rejects_lagged_moment() {
    let w = [1.0, -1.0];
    let mut opt = ptr::null_mut();
    assert_eq!(unsafe { epochal_optimizer_new(w.as_ptr(), 2, 7, &mut opt) }, EpochalStatus::Ok);
    let hyper = epochal_adamw_default();
    let g = [0.5, 0.5];
    unsafe {
        assert_eq!(epochal_optimizer_step(opt, g.as_ptr(), 2, &hyper, true), EpochalStatus::Ok);
        assert_eq!(epochal_optimizer_epoch(opt), 1);
        let mut m = [0.0; 2];
        assert_eq!(epochal_optimizer_moment(opt, m.as_mut_ptr(), 2), EpochalStatus::Ok);
        assert!((m[0] - (1.0 - hyper.beta1) * 0.5).abs() < 1e-15);

        let zero = [0.0; 2];
        assert_eq!(epochal_optimizer_lag_moment(opt, zero.as_ptr(), 2), EpochalStatus::Ok);
        assert!(!epochal_optimizer_is_consistent(opt));
        let mut before = [0.0; 2];
        epochal_optimizer_weights(opt, before.as_mut_ptr(), 2);
        assert_eq!(epochal_optimizer_step(opt, g.as_ptr(), 2, &hyper, true), EpochalStatus::TypeViolation);
        assert!(last_error().contains("m@0"));
        let mut after = [0.0; 2];
        epochal_optimizer_weights(opt, after.as_mut_ptr(), 2);
        assert_eq!(before, after);

        assert_eq!(epochal_optimizer_step(opt, g.as_ptr(), 2, &hyper, false), EpochalStatus::Ok);
        assert_eq!(epochal_optimizer_epoch(opt), 2);
        epochal_optimizer_free(opt);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/epochal.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
