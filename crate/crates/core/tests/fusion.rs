mod common;

use common::simulated_raters;
use mbseg::fusion::{
    average_fusion, ensemble_fuse, fuse_masks, majority_vote, mpr_reconstruct, staple, FusionError, FusionMethod,
};
use mbseg::slicer::SlicePlane;
use mbseg::volio::Volume3D;
use proptest::prelude::*;

fn m(d: (usize, usize, usize), bits: Vec<u8>) -> Volume3D {
    Volume3D::from_mask(d, (1.0, 1.0, 1.0), bits).unwrap()
}

#[test]
fn majority_equals_averaging_for_three_inputs_exhaustively() {
    // Voxel i carries bit pattern i across the three inputs.
    let d = (8, 1, 1);
    let vols: Vec<Volume3D> = (0..3).map(|k| m(d, (0..8u8).map(|i| (i >> k) & 1).collect())).collect();
    let mv = majority_vote(&vols).unwrap();
    assert_eq!(mv, average_fusion(&vols, 0.5).unwrap());
    assert_eq!(mv.as_mask().unwrap(), &[0, 0, 0, 1, 0, 1, 1, 1]);
}

#[test]
fn even_split_is_background() {
    let d = (1, 1, 1);
    let vols = vec![m(d, vec![1]), m(d, vec![0])];
    assert_eq!(majority_vote(&vols).unwrap().as_mask().unwrap(), &[0]);
    assert_eq!(average_fusion(&vols, 0.5).unwrap().as_mask().unwrap(), &[0]);
}

#[test]
fn staple_recovers_rater_quality() {
    let d = (24, 24, 24);
    let rates = [(0.9, 0.98), (0.75, 0.99), (0.6, 0.97)];
    let (truth, raters) = simulated_raters(d, 0.15, &rates, 3);
    let vols: Vec<Volume3D> = raters.into_iter().map(|r| m(d, r)).collect();
    let res = staple(&vols, 200, 1e-8).unwrap();
    for (k, &(p, q)) in rates.iter().enumerate() {
        assert!((res.sensitivity[k] - p).abs() < 0.05, "p[{k}] = {}", res.sensitivity[k]);
        assert!((res.specificity[k] - q).abs() < 0.02, "q[{k}] = {}", res.specificity[k]);
    }
    let agree = res.consensus.as_mask().unwrap().iter().zip(&truth).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / truth.len() as f64 > 0.97);
}

#[test]
fn staple_degenerate_inputs() {
    let d = (4, 1, 1);
    let empty = vec![m(d, vec![0; 4]), m(d, vec![0; 4])];
    assert!(matches!(staple(&empty, 10, 1e-6), Err(FusionError::Degenerate(_))));
    assert_eq!(fuse_masks(&empty, FusionMethod::Staple).unwrap(), empty[0]);
    assert!(matches!(staple(&empty[..1], 10, 1e-6), Err(FusionError::TooFewRaters)));
    let other = m((2, 2, 1), vec![0; 4]);
    assert!(matches!(majority_vote(&[empty[0].clone(), other]), Err(FusionError::GridMismatch(_))));
}

#[test]
fn mpr_averaging_uses_soft_values() {
    let d = (3, 1, 1);
    let p = |v: Vec<f32>| Volume3D::from_f32(d, (1.0, 1.0, 1.0), v).unwrap();
    // Voxel 0: one confident plane outweighs two weak negatives under
    // averaging but loses the vote; voxel 1 is the reverse.
    let planes = vec![
        (SlicePlane::Axial, p(vec![0.99, 0.6, 0.0])),
        (SlicePlane::Coronal, p(vec![0.3, 0.6, 0.0])),
        (SlicePlane::Sagittal, p(vec![0.3, 0.1, 1.0])),
    ];
    assert_eq!(mpr_reconstruct(&planes, FusionMethod::Averaging).unwrap().as_mask().unwrap(), &[1, 0, 0]);
    assert_eq!(mpr_reconstruct(&planes, FusionMethod::MajorityVote).unwrap().as_mask().unwrap(), &[0, 1, 0]);
    assert!(matches!(
        mpr_reconstruct(&planes[..2], FusionMethod::MajorityVote),
        Err(FusionError::MissingPlane(SlicePlane::Sagittal))
    ));
}

proptest! {
    #[test]
    fn fusion_of_identical_inputs_is_identity(bits in prop::collection::vec(0u8..2, 27), n in 2usize..6) {
        let v = m((3, 3, 3), bits);
        let vols = vec![v.clone(); n];
        for method in FusionMethod::ALL {
            prop_assert_eq!(&fuse_masks(&vols, method).unwrap(), &v);
        }
        prop_assert_eq!(ensemble_fuse(&vols).unwrap(), v);
    }

    #[test]
    fn majority_is_monotone(a in prop::collection::vec(0u8..2, 27), b in prop::collection::vec(0u8..2, 27), c in prop::collection::vec(0u8..2, 27)) {
        // Adding foreground to one input never removes fused foreground.
        let d = (3, 3, 3);
        let base = majority_vote(&[m(d, a.clone()), m(d, b.clone()), m(d, c.clone())]).unwrap();
        let more: Vec<u8> = a.iter().map(|_| 1).collect();
        let grown = majority_vote(&[m(d, more), m(d, b), m(d, c)]).unwrap();
        for (x, y) in base.as_mask().unwrap().iter().zip(grown.as_mask().unwrap()) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn staple_consensus_is_between_intersection_and_union(seed in 0u64..50) {
        let d = (6, 6, 6);
        let (_, raters) = simulated_raters(d, 0.3, &[(0.9, 0.95), (0.8, 0.9), (0.85, 0.92)], seed);
        let vols: Vec<Volume3D> = raters.iter().cloned().map(|r| m(d, r)).collect();
        if let Ok(res) = staple(&vols, 100, 1e-6) {
            prop_assert!(res.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            for (i, &c) in res.consensus.as_mask().unwrap().iter().enumerate() {
                let votes: u8 = raters.iter().map(|r| r[i]).sum();
                if votes == 0 { prop_assert_eq!(c, 0); }
                if votes == 3 { prop_assert_eq!(c, 1); }
            }
        }
    }
}
