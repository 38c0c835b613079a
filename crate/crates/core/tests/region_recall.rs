use petition_core::corpus::render_scene_with_count;
use petition_core::corpus::{IssueClass, SceneConditions, Season};
use petition_core::imaging::{preprocess, DEFAULT_BLUR_SIGMA, STANDARD_SIZE};
use petition_core::regions::{iou, propose_regions, ProposerSettings};

/// Share of single-issue easy scenes where some proposal overlaps the
/// truth box with IoU ≥ 0.5, per class.
fn recall(n: u64, seed: u64) -> [f64; 3] {
    let settings = ProposerSettings::default();
    let (mut hits, mut totals) = ([0usize; 3], [0usize; 3]);
    for i in 0..n {
        let class = IssueClass::ALL[(i % 3) as usize];
        let conditions = SceneConditions::easy(Season::ALL[(i % 4) as usize]);
        let (img, truth) = render_scene_with_count(class, conditions, STANDARD_SIZE, seed + i, 1).unwrap();
        let img = preprocess(&img, STANDARD_SIZE, DEFAULT_BLUR_SIGMA).unwrap();
        let props = propose_regions(&img, &settings).unwrap();
        let best = props.iter().map(|p| iou(&p.bbox, &truth[0].bbox)).fold(0.0, f64::max);
        totals[class.code()] += 1;
        hits[class.code()] += usize::from(best >= 0.5);
    }
    [0, 1, 2].map(|k| hits[k] as f64 / totals[k] as f64)
}

#[test]
fn every_class_is_found_on_easy_scenes() {
    for (k, r) in recall(150, 77).into_iter().enumerate() {
        assert!(r >= 0.9, "class {k} recall {r}");
    }
}
