mod common;

use common::fake_kitti;
use distancenet::data::{
    ingest_sequences, load_synthetic, make_windows, parse_kitti_poses, parse_window_index, save_synthetic, synth_generate,
    traveled_distance, window_index_text, Dataset, PoseTrajectory, SynthConfig, PIXEL_MEANS,
};
use distancenet::Error;
use proptest::prelude::*;

fn pose_line(t: [f64; 3]) -> String {
    format!("1 0 0 {} 0 1 0 {} 0 0 1 {}\n", t[0], t[1], t[2])
}

#[test]
fn closed_square_has_arc_length_four() {
    let text: String = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]].map(pose_line).concat();
    let traj = parse_kitti_poses(&text).unwrap();
    assert_eq!(traveled_distance(&traj, 0, 4).unwrap(), 4.0);
}

#[test]
fn circle_matches_its_chord_sum() {
    // 12 points on a radius-2 circle: each chord is 2 r sin(pi / 12)
    let r = 2.0;
    let pts: Vec<[f64; 3]> = (0..=12)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 12.0;
            [r * a.cos(), 0.0, r * a.sin()]
        })
        .collect();
    let traj = PoseTrajectory::from_positions(&pts).unwrap();
    let expected = 12.0 * 2.0 * r * (std::f64::consts::PI / 12.0).sin();
    assert!((traveled_distance(&traj, 0, 12).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn rejects_bad_pose_lines_and_ranges() {
    assert!(matches!(parse_kitti_poses("1 0 0 0\n"), Err(Error::Parse { line: 1, .. })));
    let traj = PoseTrajectory::from_positions(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(traveled_distance(&traj, 1, 1), Err(Error::Domain(_))));
    assert!(matches!(traveled_distance(&traj, 0, 2), Err(Error::Domain(_))));
}

#[test]
fn ingests_a_kitti_layout() {
    let dir = tempfile::tempdir().unwrap();
    fake_kitti(dir.path(), &[("00", 14, 0.25), ("02", 3, 1.0)], 40, 20);
    let seqs = vec!["00".to_string(), "02".to_string()];
    let s = ingest_sequences(dir.path(), &seqs, 10, 1, 3.1).unwrap();
    assert_eq!(s.per_sequence, vec![("00".to_string(), 5), ("02".to_string(), 0)]);
    assert!(s.windows.iter().all(|w| (w.gt_distance - 2.25).abs() < 1e-12 && w.frame_paths.len() == 10));
    assert_eq!(s.histogram.into_iter().collect::<Vec<_>>(), vec![(2, 5)]);

    let text = window_index_text(&s.windows);
    let back = parse_window_index(&text, dir.path(), 10).unwrap();
    assert_eq!(back, s.windows);

    let data = Dataset::from_windows(back);
    let sample = data.load_sample::<f32>(2, PIXEL_MEANS, (32, 16)).unwrap();
    assert_eq!(sample.frames.len(), 10);
    assert_eq!(sample.frame_shape(), &[3, 16, 32]);
    assert_eq!(sample.mirrored().mirrored(), sample);
}

#[test]
fn image_and_pose_counts_must_agree() {
    let traj = PoseTrajectory::from_positions(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(make_windows("x", &traj, &[], 2, 1, 3.0), Err(Error::Ingest(_))));
}

#[test]
fn missing_sequence_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ingest_sequences(dir.path(), &["05".into()], 10, 1, 3.1), Err(Error::Ingest(_))));
}

#[test]
fn synthetic_sets_round_trip_through_disk() {
    let cfg = SynthConfig { count: 3, width: 32, height: 16, pixels_per_meter: 18.0, seed: 9, ..SynthConfig::default() };
    let data = synth_generate(&cfg).unwrap();
    let again = synth_generate(&cfg).unwrap();
    for i in 0..3 {
        assert_eq!(again.item(i).images().unwrap(), data.item(i).images().unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    save_synthetic(dir.path(), &data).unwrap();
    let back = load_synthetic(dir.path(), true).unwrap();
    assert_eq!(back.len(), 3);
    for i in 0..3 {
        assert_eq!(back.item(i).gt_distance, data.item(i).gt_distance);
        assert_eq!(back.item(i).images().unwrap(), data.item(i).images().unwrap());
    }
    let max = cfg.speed_max * (cfg.frames - 1) as f64;
    assert!(data.items().iter().all(|it| it.gt_distance >= 0.0 && it.gt_distance <= max + 1e-12));
}

proptest! {
    #[test]
    fn arc_length_is_additive_and_bounds_displacement(
        pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 3..12),
        cut in 1usize..10,
    ) {
        let traj = PoseTrajectory::from_positions(&pts).unwrap();
        let last = pts.len() - 1;
        let mid = cut.min(last - 1);
        let whole = traveled_distance(&traj, 0, last).unwrap();
        let split = traveled_distance(&traj, 0, mid).unwrap() + traveled_distance(&traj, mid, last).unwrap();
        prop_assert!((whole - split).abs() <= 1e-9 * whole.max(1.0));
        let d = (0..3).map(|k| (pts[last][k] - pts[0][k]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(whole + 1e-9 >= d);
    }
}
