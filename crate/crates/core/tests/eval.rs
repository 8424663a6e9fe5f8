use enzymeflow::eval::{
    aggregate_topk, build_report, ec_metrics, format_plot_csv, format_report_tsv, kabsch_align, rmsd_after_alignment,
    tm_d0, tm_score, Better, SampleMetrics,
};
use enzymeflow::geometry::{so3_exp, RigidTransform};
use enzymeflow::Error;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)))
        .collect()
}

fn plain_rmsd(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
    (p.iter().zip(q).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / p.len() as f64).sqrt()
}

proptest! {
    #[test]
    fn rigid_copies_align_to_zero(seed in 0u64..500, n in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cloud(&mut rng, n);
        let g = RigidTransform::random(&mut rng, 20.0);
        let q: Vec<_> = p.iter().map(|x| g.apply(x)).collect();
        let (rot, trans, rmsd) = kabsch_align(&p, &q).unwrap();
        prop_assert!(rmsd < 1e-9);
        prop_assert!((rot.matrix() - g.rot.matrix()).norm() < 1e-8);
        prop_assert!((trans - g.trans).norm() < 1e-7);
        prop_assert!((rot.matrix().determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn no_grid_rotation_beats_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = cloud(&mut rng, 12);
    let q: Vec<_> = cloud(&mut rng, 12)
        .iter()
        .zip(&p)
        .map(|(noise, x)| so3_exp(&Vector3::new(0.4, -0.2, 0.9)).apply(x) + noise * 0.2)
        .collect();
    let best = rmsd_after_alignment(&p, &q).unwrap();
    let cp = p.iter().sum::<Vector3<f64>>() / 12.0;
    let cq = q.iter().sum::<Vector3<f64>>() / 12.0;
    // 2° steps over a 20° box around the optimum plus a coarse global sweep
    let (rot, _, _) = kabsch_align(&p, &q).unwrap();
    let step = 2f64.to_radians();
    let mut grid_min = f64::INFINITY;
    for i in -5..=5 {
        for j in -5..=5 {
            for k in -5..=5 {
                let r = rot.compose(&so3_exp(&(Vector3::new(i as f64, j as f64, k as f64) * step)));
                let moved: Vec<_> = p.iter().map(|x| r.apply(&(x - cp)) + cq).collect();
                grid_min = grid_min.min(plain_rmsd(&moved, &q));
            }
        }
    }
    let coarse = 30f64.to_radians();
    for i in -6..=6 {
        for j in -6..=6 {
            for k in -6..=6 {
                let r = so3_exp(&(Vector3::new(i as f64, j as f64, k as f64) * coarse));
                let moved: Vec<_> = p.iter().map(|x| r.apply(&(x - cp)) + cq).collect();
                grid_min = grid_min.min(plain_rmsd(&moved, &q));
            }
        }
    }
    assert!(best <= grid_min + 1e-12, "{best} > {grid_min}");
    assert!(grid_min - best < 0.05, "grid optimum should land near the analytic one");
}

#[test]
fn mirror_images_do_not_superpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = cloud(&mut rng, 10);
    let q: Vec<_> = p.iter().map(|x| Vector3::new(-x.x, x.y, x.z)).collect();
    let (rot, _, rmsd) = kabsch_align(&p, &q).unwrap();
    assert!((rot.matrix().determinant() - 1.0).abs() < 1e-12);
    assert!(rmsd > 0.1);
}

#[test]
fn degenerate_inputs_are_errors() {
    let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(kabsch_align(&line, &line), Err(Error::DegenerateGeometry(_))));
    let two = vec![Vector3::zeros(), Vector3::x()];
    assert!(matches!(kabsch_align(&two, &two), Err(Error::Length(_))));
    assert!(matches!(tm_score(&line, &line), Err(Error::Length(_))));
}

#[test]
fn tm_scale_and_displacement_ladder() {
    assert!((tm_d0(32) - 1.3884).abs() < 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = cloud(&mut rng, 32);
    assert!((tm_score(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    // shifting half of the residues by growing distances lowers the score
    let mut last = 1.0;
    for d in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let q: Vec<_> = p
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 2 == 0 { x + Vector3::new(0.0, 0.0, d) } else { *x })
            .collect();
        let s = tm_score(&p, &q).unwrap();
        assert!(s < last && s > 0.0, "d={d}: {s}");
        last = s;
    }
}

#[test]
fn ec_fixtures() {
    let m = ec_metrics(&[1, 1, 1, 1], &[1, 1, 2, 2]).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
    assert!((m.precision - 0.25).abs() < 1e-15);
    assert!((m.recall - 0.5).abs() < 1e-15);
    let perfect = ec_metrics(&[3, 5, 7], &[3, 5, 7]).unwrap();
    assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
    assert!(matches!(ec_metrics(&[8], &[1]), Err(Error::InvalidTarget(_))));
}

#[test]
fn aggregation_fixtures() {
    let groups = vec![vec![3.0, 1.0, 2.0], vec![10.0, 20.0]];
    let low = aggregate_topk(&groups, 2, Better::Lower).unwrap();
    assert_eq!(low.top1, (1.0 + 10.0) / 2.0);
    assert_eq!(low.topk, (1.5 + 15.0) / 2.0);
    assert_eq!(low.median, (2.0 + 15.0) / 2.0);
    let high = aggregate_topk(&groups, 2, Better::Higher).unwrap();
    assert_eq!(high.top1, (3.0 + 20.0) / 2.0);
    assert_eq!(high.topk, (2.5 + 15.0) / 2.0);
    let short = aggregate_topk(&groups, 3, Better::Lower).unwrap();
    assert_eq!(short.short_groups, 1);
    assert!(aggregate_topk(&[], 1, Better::Lower).is_err());
}

#[test]
fn report_outputs() {
    let samples = (0..4)
        .map(|k| SampleMetrics {
            reaction: format!("r{}", k / 2),
            sample: format!("s{k}"),
            crmsd: 1.0 + k as f64,
            tm: Some(0.5),
            aar: 0.25 * k as f64,
            ec_pred: 1,
            ec_true: 1 + k / 2,
        })
        .collect();
    let report = build_report(samples, 2).unwrap();
    assert_eq!(report.crmsd.top1, 2.0);
    let tsv = format_report_tsv(&report);
    assert!(tsv.contains("crmsd\t2.000000\t2.500000\t2.500000"));
    let csv = format_plot_csv(&report);
    assert!(csv.starts_with("metric,class,value\n"));
    assert!(csv.contains("f1,EC2,0.000000"));
}
