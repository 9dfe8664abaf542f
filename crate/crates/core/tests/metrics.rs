mod common;

use common::{brute_assd_hd, flood_fill_labels};
use mbseg::metrics::{
    assd, connected_components, dsc, evaluate_case, hausdorff, label_components, lesion_volume_regression, lfpr,
    ltpr, overall_score, pearson, ppv, volume_difference, CaseMetrics, Connectivity, MetricsReport,
};
use mbseg::volio::Volume3D;
use proptest::prelude::*;

type D = (usize, usize, usize);

fn mask(d: D, spacing: (f64, f64, f64), bits: &[u8]) -> Volume3D {
    Volume3D::from_mask(d, spacing, bits[..d.0 * d.1 * d.2].to_vec()).unwrap()
}

/// Oracle: overlapped fraction of flood-fill components of `a` touching `b`.
fn touched(a: &[u8], b: &[u8], d: D, conn: usize) -> Option<f64> {
    let (labels, n) = flood_fill_labels(a, d, conn);
    if n == 0 {
        return None;
    }
    let hit = (1..=n)
        .filter(|&l| labels.iter().zip(b).any(|(&x, &y)| x == l && y == 1))
        .count();
    Some(hit as f64 / n as f64)
}

fn sparse_bits() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::bool::weighted(0.3).prop_map(u8::from), 343)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_metrics_match_counts(d in (1usize..8, 1usize..8, 1usize..8), a in sparse_bits(), b in sparse_bits()) {
        let n = d.0 * d.1 * d.2;
        let (s, r) = (mask(d, (1.0, 1.0, 1.0), &a), mask(d, (1.0, 1.0, 1.0), &b));
        let tp = (0..n).filter(|&i| a[i] == 1 && b[i] == 1).count() as f64;
        let sv = a[..n].iter().filter(|&&v| v == 1).count() as f64;
        let rv = b[..n].iter().filter(|&&v| v == 1).count() as f64;
        let want = if sv + rv == 0.0 { 1.0 } else { 2.0 * tp / (sv + rv) };
        prop_assert_eq!(dsc(&s, &r).unwrap(), want);
        prop_assert_eq!(ppv(&s, &r).unwrap(), (sv > 0.0).then(|| tp / sv));
        match volume_difference(&s, &r) {
            Ok(vd) => prop_assert_eq!(vd, (sv - rv).abs() / rv),
            Err(_) => prop_assert_eq!(rv, 0.0),
        }
    }

    #[test]
    fn lesion_rates_match_flood_fill(d in (1usize..8, 1usize..8, 1usize..8), a in sparse_bits(), b in sparse_bits(), ci in 0usize..3) {
        let conn_n = [6, 18, 26][ci];
        let conn = Connectivity::try_from(conn_n).unwrap();
        let n = d.0 * d.1 * d.2;
        let (s, r) = (mask(d, (1.0, 1.0, 1.0), &a), mask(d, (1.0, 1.0, 1.0), &b));
        prop_assert_eq!(ltpr(&s, &r, conn).unwrap(), touched(&b[..n], &a[..n], d, conn_n));
        prop_assert_eq!(lfpr(&s, &r, conn).unwrap(), touched(&a[..n], &b[..n], d, conn_n).map(|h| 1.0 - h));
        let (labels, count) = label_components(&a[..n], d, conn);
        let (oracle, oc) = flood_fill_labels(&a[..n], d, conn_n);
        prop_assert_eq!(count, oc);
        // Same partition: labels correspond one-to-one.
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(labels[i] == labels[j], oracle[i] == oracle[j]);
            }
        }
    }

    #[test]
    fn surface_distances_match_brute_force(
        d in (1usize..7, 1usize..7, 1usize..7),
        a in sparse_bits(),
        b in sparse_bits(),
        sp in (0.5f64..2.0, 0.5f64..2.0, 0.5f64..3.0),
    ) {
        let n = d.0 * d.1 * d.2;
        let (s, r) = (mask(d, sp, &a), mask(d, sp, &b));
        let both = a[..n].contains(&1) && b[..n].contains(&1);
        let got_a = assd(&s, &r).unwrap();
        let got_h = hausdorff(&s, &r).unwrap();
        if both {
            let (wa, wh) = brute_assd_hd(&a[..n], &b[..n], d, sp);
            prop_assert!((got_a.unwrap() - wa).abs() < 1e-9);
            prop_assert!((got_h.unwrap() - wh).abs() < 1e-9);
        } else {
            prop_assert_eq!(got_a, None);
            prop_assert_eq!(got_h, None);
        }
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(a in sparse_bits(), b in sparse_bits()) {
        let d = (7, 7, 7);
        let (s, r) = (mask(d, (1.0, 1.0, 1.0), &a), mask(d, (1.0, 1.0, 1.0), &b));
        let x = dsc(&s, &r).unwrap();
        prop_assert_eq!(x, dsc(&r, &s).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(dsc(&s, &s).unwrap(), 1.0);
    }
}

#[test]
fn connectivity_parsing() {
    assert_eq!("18".parse::<Connectivity>().unwrap(), Connectivity::Eighteen);
    assert!("8".parse::<Connectivity>().is_err());
    assert!(Connectivity::try_from(4).is_err());
}

#[test]
fn component_volumes_use_spacing() {
    let d = (4, 1, 1);
    let m = mask(d, (0.5, 2.0, 3.0), &[1, 1, 0, 1]);
    let comps = connected_components(&m, Connectivity::Six).unwrap();
    assert_eq!(comps.len(), 2);
    assert_eq!(comps[0].volume_mm3, 6.0);
    assert_eq!(comps[1].volume_mm3, 3.0);
}

#[test]
fn case_metrics_hand_example() {
    // Reference: two lesions at x=0..2 and x=6; segmentation hits the first
    // and adds a false lesion at x=9.
    let d = (10, 1, 1);
    let r = mask(d, (1.0, 1.0, 1.0), &[1, 1, 1, 0, 0, 0, 1, 0, 0, 0]);
    let s = mask(d, (1.0, 1.0, 1.0), &[0, 1, 1, 0, 0, 0, 0, 0, 0, 1]);
    let m = evaluate_case("x", &s, &r, Connectivity::TwentySix).unwrap();
    assert_eq!(m.dsc, 4.0 / 7.0);
    assert_eq!(m.ppv, Some(2.0 / 3.0));
    assert_eq!(m.ltpr, Some(0.5));
    assert_eq!(m.lfpr, Some(0.5));
    assert_eq!(m.vd, Some(1.0 / 4.0));
    assert_eq!(m.seg_volume_mm3, 3.0);
    assert_eq!(m.ref_volume_mm3, 4.0);
    // Surfaces: seg {1,2,9}, ref {0,1,2,6}. seg->ref {0,0,3}, ref->seg {1,0,0,3}.
    assert!((m.sd_mm.unwrap() - 7.0 / 7.0).abs() < 1e-12);
    assert_eq!(m.hd_mm, Some(3.0));
}

fn cm(dsc: f64, ppv: Option<f64>, ltpr: Option<f64>, lfpr: Option<f64>, sv: f64, rv: f64) -> CaseMetrics {
    CaseMetrics {
        case_id: "c".into(),
        dsc,
        ppv,
        ltpr,
        lfpr,
        vd: None,
        sd_mm: None,
        hd_mm: None,
        seg_volume_mm3: sv,
        ref_volume_mm3: rv,
    }
}

#[test]
fn overall_score_closed_form() {
    let a = vec![
        cm(0.8, Some(0.6), Some(0.5), Some(0.2), 10.0, 12.0),
        cm(0.4, None, None, None, 20.0, 24.0),
    ];
    // Volumes are exactly proportional, so Cor = 1.
    let first = 0.8 / 8.0 + 0.6 / 8.0 + 0.8 / 4.0 + 0.5 / 4.0 + 0.25;
    let second = 0.4 / 8.0 + 0.0 + 0.0 + 0.0 + 0.25;
    let want = 100.0 * (first + second) / 2.0;
    assert!((overall_score(std::slice::from_ref(&a)).unwrap() - want).abs() < 1e-12);
    assert!((overall_score(&[a.clone(), a.clone()]).unwrap() - want).abs() < 1e-12);
    assert!(overall_score(&[a[..1].to_vec()]).is_err());
    assert!(overall_score(&[a.clone(), a[..1].to_vec()]).is_err());
}

#[test]
fn pearson_oracles() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn regression_recovers_a_known_line() {
    // Reference lesions of 1, 2 and 4 voxels; segmented copies twice as long.
    let d = (20, 1, 1);
    let mut r = vec![0u8; 20];
    let mut s = vec![0u8; 20];
    for (start, len) in [(0usize, 1usize), (4, 2), (10, 4)] {
        for i in 0..len {
            r[start + i] = 1;
        }
        for i in 0..2 * len {
            s[start + i] = 1;
        }
    }
    let (rv, sv) = (mask(d, (1.0, 1.0, 1.0), &r), mask(d, (1.0, 1.0, 1.0), &s));
    let reg = lesion_volume_regression(&[(&sv, &rv)], Connectivity::Six).unwrap();
    assert_eq!(reg.pairs, vec![(1.0, 2.0), (2.0, 4.0), (4.0, 8.0)]);
    assert!((reg.slope - 2.0).abs() < 1e-12);
    assert!(reg.intercept.abs() < 1e-12);
    assert!((reg.pearson_r - 1.0).abs() < 1e-12);
}

#[test]
fn report_tsv_has_mean_row_and_na() {
    let rep = MetricsReport::new(vec![
        cm(0.5, None, Some(1.0), Some(0.0), 1.0, 2.0),
        cm(1.0, Some(1.0), Some(1.0), Some(0.0), 2.0, 2.0),
    ]);
    let tsv = rep.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], MetricsReport::COLUMNS.join("\t"));
    assert!(lines[1].contains("\tNA\t"));
    assert!(lines[3].starts_with("mean\t0.750000\t1.000000\t"));
    assert_eq!(rep.mean.ppv, Some(1.0));
    assert!(rep.sc.is_some());
}
