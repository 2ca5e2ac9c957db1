use proptest::prelude::*;
use tristack_core::dynamics::{normalize, readjust, QualityAssessment, QUALITY_FLOOR};
use tristack_core::equilibrium::{solve_sne, verify_sne, SneSolution};
use tristack_core::matching::{match_solution, Matching};
use tristack_core::{ComputeCenter, DataOwner, MarketParams};

fn market(f: &[f64]) -> (SneSolution, Matching) {
    let owners: Vec<DataOwner> = f
        .iter()
        .enumerate()
        .map(|(i, &q)| DataOwner::new(i + 1, q, 1e6))
        .collect();
    let centers: Vec<ComputeCenter> = (0..f.len())
        .map(|i| ComputeCenter::new(i + 1, 0.2 + 0.05 * i as f64, 1e6))
        .collect();
    let sol = solve_sne(&owners, &centers, &MarketParams::default()).unwrap();
    let (m, _) = match_solution(&sol).unwrap();
    (sol, m)
}

fn assessment(normalized: &[f64], xi: f64) -> QualityAssessment {
    QualityAssessment {
        round: 3,
        raw: normalized.iter().map(|v| Some(*v)).collect(),
        normalized: normalized.iter().map(|v| Some(*v)).collect(),
        excluded: (0..normalized.len()).filter(|&n| normalized[n] < xi).collect(),
    }
}

#[test]
fn rescaling_check_for_min_max() {
    let raw = [0.1, 0.3, 0.5];
    let norm = normalize(&raw);
    // affine map sending 0.1 → 0 and 0.5 → 1
    let expect: Vec<f64> = raw.iter().map(|v| (v * 2.5 - 0.25).max(QUALITY_FLOOR)).collect();
    for (a, b) in norm.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn truthful_assessment_is_a_fixed_point() {
    let f = [0.8, 0.9, 1.0];
    let (sol, m) = market(&f);
    let before = m.clone();
    let adj = readjust(&sol, &assessment(&f, 0.05), &m, 3).unwrap();
    assert_eq!(adj.solution.profile.contributions, sol.profile.contributions);
    assert_eq!(adj.solution.eta(), sol.eta());
    assert!(adj.payments.is_empty());
    assert_eq!(m, before);
}

#[test]
fn higher_measured_quality_buys_more_data() {
    let f = [0.6, 0.9, 1.0];
    let (sol, m) = market(&f);
    let adj = readjust(&sol, &assessment(&[0.75, 0.9, 1.0], 0.05), &m, 3).unwrap();
    let before = sol.profile.contributions[0].quantity;
    let after = adj.solution.profile.contributions[0].quantity;
    assert!(after > before, "{before} -> {after}");
    let entry = adj.payments.iter().find(|p| p.payer == 1).unwrap();
    assert!((entry.amount - (after - before)).abs() < 1e-12);
    let center = m.center_of(0).unwrap();
    assert_eq!(entry.payee, sol.centers[center].id);
}

#[test]
fn only_two_left_above_threshold() {
    let f = [0.9, 0.95, 1.0, 0.92];
    let (sol, m) = market(&f);
    let adj = readjust(&sol, &assessment(&[QUALITY_FLOOR, 1.0, 0.8, 0.01], 0.05), &m, 3).unwrap();
    assert_eq!(adj.solution.intermediates.participants, vec![1, 2]);
    assert_eq!(adj.solution.profile.contributions[0].quantity, 0.0);
    assert_eq!(adj.solution.profile.contributions[3].quantity, 0.0);
}

#[test]
fn readjusted_profile_passes_verification() {
    let (sol, m) = market(&[0.7, 0.8, 0.9, 1.0]);
    let adj = readjust(&sol, &assessment(&[1.0, 0.5, 0.9, 0.8], 0.05), &m, 3).unwrap();
    assert!(verify_sne(&sol, 5_000, 1e-5).passed());
    assert!(verify_sne(&adj.solution, 5_000, 1e-5).passed());
}

/// The quantity `x_n = q_n / f_n` is not monotone in `f_n` for the strongest
/// owner of a small market, even though `q_n` is.
#[test]
fn quantity_can_shrink_when_top_owner_improves() {
    let f = [0.842, 0.376, 0.506];
    let (sol, m) = market(&f);
    let adj = readjust(&sol, &assessment(&[0.9262, 0.376, 0.506], 0.05), &m, 3).unwrap();
    let (b, a) = (&sol.profile.contributions[0], &adj.solution.profile.contributions[0]);
    assert!(a.quality > b.quality);
    assert!(a.quantity < b.quantity);
    assert!(adj.payments.iter().all(|p| p.payer != 1));
}

proptest! {
    #[test]
    fn contribution_monotone_and_payments_nonnegative(
        f in prop::collection::vec(0.5f64..1.0, 3..7),
        measured in prop::collection::vec(0.05f64..1.0, 7),
        bump in 0.01f64..0.5,
    ) {
        let (sol, m) = market(&f);
        let mut norm: Vec<f64> = measured[..f.len()].to_vec();
        let Ok(base) = readjust(&sol, &assessment(&norm, 0.05), &m, 3) else {
            return Ok(());
        };
        prop_assert!(base.payments.iter().all(|p| p.amount > 0.0));
        norm[0] = (norm[0] + bump).min(1.0);
        let Ok(up) = readjust(&sol, &assessment(&norm, 0.05), &m, 3) else {
            return Ok(());
        };
        if base.solution.is_participant(0) {
            let q0 = base.solution.profile.contributions[0].quality;
            let q1 = up.solution.profile.contributions[0].quality;
            prop_assert!(q1 >= q0 - 1e-12 * q0.abs(), "{q0} -> {q1}");
        }
    }

    #[test]
    fn normalization_preserves_order(raw in prop::collection::vec(-1.0f64..1.0, 2..10)) {
        let norm = normalize(&raw);
        for i in 0..raw.len() {
            prop_assert!(norm[i] >= QUALITY_FLOOR && norm[i] <= 1.0);
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(norm[i] <= norm[j]);
                }
            }
        }
    }
}
