use ulast_core::net::Model;
use ulast_core::runtime::{evaluate, track_sequence, RuntimeConfig};
use ulast_core::scenes::{generate_sequence, SceneSpec};
use ulast_core::train::{Stage, TrainConfig, Trainer};

fn short_run(seed: u64) -> TrainConfig {
    TrainConfig { legacy_epochs: 1, cycle_epochs: 1, steps_per_epoch: 3, batch: 2, seed, ..TrainConfig::default() }
}

#[test]
fn both_stages_run_and_replay_exactly() {
    let run = |seed| {
        let mut t = Trainer::new(short_run(seed)).unwrap();
        let mut logs = Vec::new();
        while !t.done() {
            let stage = t.stage();
            let log = t.train_step().unwrap();
            logs.push((stage, log));
        }
        (t.model, logs)
    };
    let (m1, l1) = run(3);
    let (m2, l2) = run(3);
    assert!(l1.iter().zip(&l2).all(|(a, b)| a.1.loss.to_bits() == b.1.loss.to_bits()));
    assert_eq!(l1.len(), 6);
    assert!(l1[..3].iter().all(|(s, _)| *s == Stage::Legacy));
    assert!(l1[3..].iter().all(|(s, l)| *s == Stage::Cycle && l.l_cycle > 0.0));
    assert!(l1.iter().all(|(_, l)| l.loss.is_finite()));
    for (a, b) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
    let (m3, _) = run(4);
    assert!(m1.params.iter().zip(m3.params.iter()).any(|(a, b)| a.tensor != b.tensor));
}

#[test]
fn untrained_tracker_follows_protocol() {
    let model = Model::new(Default::default(), 1).unwrap();
    let seq = generate_sequence(&SceneSpec { frames: 10, ..SceneSpec::default() }, 77).unwrap();
    let out = track_sequence(&model, &RuntimeConfig::default(), &seq.frames, &seq.gt_boxes[0]).unwrap();
    assert_eq!(out.len(), seq.frames.len());
    assert_eq!(out[0].b, seq.gt_boxes[0]);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.frame, i);
        assert!(r.b.is_valid());
        assert!(r.b.x1 >= 0.0 && r.b.y1 >= 0.0 && r.b.x2 <= 128.0 && r.b.y2 <= 128.0);
    }
    let boxes: Vec<_> = out.iter().map(|r| r.b).collect();
    let m = evaluate(&boxes, &seq.gt_boxes).unwrap();
    assert!((0.0..=1.0).contains(&m.mean_iou));
    assert!(evaluate(&boxes[1..], &seq.gt_boxes).is_err());
}
