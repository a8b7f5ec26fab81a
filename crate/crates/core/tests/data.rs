use std::time::Duration;

use proptest::prelude::*;

use relgen_core::data::{
    build_dataset, build_triplet, ingest_annotations, ingest_staged, load_manifest, packaged_relation_set,
    render_consistent, same_identity_prompt, save_manifest, synthesize_scene, validate_keypoints, AnnotationSet,
    GenerativeClient, Keypoint, MockClient, Relation, RelationsFile, RetryPolicy, RleMask, StagedTriplet,
    MANIFEST_FILE, NUM_KEYPOINTS,
};
use relgen_core::image::Image;
use relgen_core::Error;

fn no_wait(attempts: u32) -> RetryPolicy {
    RetryPolicy { attempts, base_delay: Duration::ZERO }
}

/// Wraps the mock but hides its ground truth, like an external service.
struct Blind(MockClient);

impl GenerativeClient for Blind {
    fn name(&self) -> &str {
        "blind"
    }
    fn open_session(&mut self, prompt: &str) -> relgen_core::Result<Image> {
        self.0.open_session(prompt)
    }
    fn follow_up(&mut self, prompt: &str) -> relgen_core::Result<Image> {
        self.0.follow_up(prompt)
    }
}

#[test]
fn mock_is_deterministic_per_seed_and_prompt_sequence() {
    let prompts = ["A red figure is hugging a blue figure.", "A green figure is riding a red figure."];
    let run = |seed| {
        let mut c = MockClient::new(seed);
        let mut out = Vec::new();
        for p in prompts {
            out.push(c.open_session(p).unwrap());
            out.push(c.follow_up(&same_identity_prompt("red figure")).unwrap());
        }
        out
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert!(MockClient::new(0).follow_up("The photo of the same cat.").is_err());
    assert!(MockClient::new(0).open_session("A still life").is_err());
}

#[test]
fn identity_follow_up_uses_the_carry_over_phrase() {
    assert_eq!(same_identity_prompt("dog"), "The photo of the same dog.");
    let classes = vec!["red figure".to_string(), "blue figure".to_string()];
    let mut c = MockClient::new(1);
    let staged = build_triplet(&mut c, "A red figure is hugging a blue figure.", &classes, &no_wait(1)).unwrap();
    assert_eq!(staged.prompts.len(), 2);
    assert_eq!(staged.relation.as_deref(), Some(Relation::Hug.label()));
    assert_ne!(staged.prompts[0], staged.prompts[1]);
    assert!(build_triplet(&mut c, "A red figure is hugging a blue figure.", &[], &no_wait(1)).is_err());
}

#[test]
fn retries_absorb_transient_failures_then_give_up() {
    let classes = vec!["red figure".to_string()];
    let mut ok = MockClient::new(2).failing_first(2);
    assert!(build_triplet(&mut ok, "A red figure is shaking hands with a blue figure.", &classes, &no_wait(3)).is_ok());
    let mut bad = MockClient::new(2).failing_first(3);
    match build_triplet(&mut bad, "A red figure is shaking hands with a blue figure.", &classes, &no_wait(3)) {
        Err(Error::Client { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected a client error, got {other:?}"),
    }
}

#[test]
fn manifest_round_trips() {
    let set = packaged_relation_set(1, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(dir.path(), &set).unwrap();
    assert_eq!(path.file_name().unwrap(), MANIFEST_FILE);
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.len(), set.len());
    for (a, b) in set.iter().zip(&back) {
        assert_eq!(a.target.to_rgb8(), b.target.to_rgb8());
        assert_eq!((&a.text, &a.classes, &a.boxes, &a.captions), (&b.text, &b.classes, &b.boxes, &b.captions));
        assert_eq!((&a.keypoints_x, &a.keypoints_ci, &a.masks), (&b.keypoints_x, &b.keypoints_ci, &b.masks));
    }
    let line = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    for key in ["target", "prompts", "text", "keypoints", "boxes", "captions"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["keypoints"]["target"][0].as_array().unwrap().len(), NUM_KEYPOINTS);
    assert_eq!(v["keypoints"]["target"][0][0].as_array().unwrap().len(), 3);
}

#[test]
fn packaged_set_has_four_to_six_per_relation() {
    let set = packaged_relation_set(5, 0);
    assert_eq!(set.len(), 5 * Relation::ALL.len());
    for r in Relation::ALL {
        let n = set.iter().filter(|t| t.relation.as_deref() == Some(r.label())).count();
        assert!((4..=6).contains(&n));
    }
    assert_eq!(packaged_relation_set(5, 0), set);
}

#[test]
fn keypoint_validation_reports_the_object() {
    let good = vec![Keypoint { x: 1.0, y: 1.0, v: 2 }; NUM_KEYPOINTS];
    assert!(validate_keypoints(&good, 0, 8, 8).is_ok());
    assert!(matches!(validate_keypoints(&good[..16], 1, 8, 8), Err(Error::Keypoints { object: 1, .. })));
    let mut out = good.clone();
    out[3].x = 8.0;
    assert!(validate_keypoints(&out, 0, 8, 8).is_err());
    let mut flag = good;
    flag[0].v = 3;
    assert!(validate_keypoints(&flag, 0, 8, 8).is_err());
}

#[test]
fn mock_build_then_reingest_gives_the_same_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut client = MockClient::new(7);
    let summary = build_dataset(&RelationsFile::packaged(2), &mut client, &no_wait(1), dir.path()).unwrap();
    assert_eq!((summary.triplets, summary.staged.len(), summary.failed.len()), (8, 0, 0));
    let manifest = dir.path().join(MANIFEST_FILE);
    let first = std::fs::read_to_string(&manifest).unwrap();
    std::fs::remove_file(&manifest).unwrap();
    assert_eq!(ingest_staged(dir.path()).unwrap(), 8);
    assert_eq!(std::fs::read_to_string(&manifest).unwrap(), first);
}

#[test]
fn external_style_clients_leave_triplets_staged() {
    let dir = tempfile::tempdir().unwrap();
    let mut client = Blind(MockClient::new(8));
    let summary = build_dataset(&RelationsFile::packaged(1), &mut client, &no_wait(1), dir.path()).unwrap();
    assert_eq!((summary.triplets, summary.staged.len()), (0, 4));
    assert!(!dir.path().join(MANIFEST_FILE).exists());

    // Annotate the first staged triplet by hand from the mock's ground truth.
    let mut gt = MockClient::new(8);
    let spec = &RelationsFile::packaged(1).relations[0];
    build_triplet(&mut gt, &spec.prompt, &spec.classes, &no_wait(1)).unwrap();
    let ann = gt.annotations().unwrap();
    ann.save_dir(summary.staged[0].join("annotations")).unwrap();
    assert_eq!(ingest_staged(dir.path()).unwrap(), 1);
    let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded[0].keypoints_x, ann.keypoints[0]);

    let staged = StagedTriplet::load_dir(&summary.staged[0]).unwrap();
    let mut short = AnnotationSet::load_dir(summary.staged[0].join("annotations"), 3).unwrap();
    short.captions.pop();
    assert!(ingest_annotations(&staged, &short).is_err());
}

proptest! {
    #[test]
    fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
        let m = RleMask::encode(bits.len(), 1, &bits).unwrap();
        prop_assert_eq!(m.decode().unwrap(), bits.clone());
        prop_assert_eq!(m.area(), bits.iter().filter(|b| **b).count());
        let json = serde_json::to_string(&m).unwrap();
        prop_assert_eq!(serde_json::from_str::<RleMask>(&json).unwrap(), m);
    }

    #[test]
    fn synthetic_keypoints_agree_with_the_render(seed in 0u64..10_000, r in 0usize..4) {
        let (scene, t) = synthesize_scene(Relation::ALL[r], seed);
        prop_assert!(render_consistent(&scene, 1));
        prop_assert!(t.validate().is_ok());
        prop_assert_eq!(t.relation.as_deref(), Some(Relation::ALL[r].label()));
    }
}
