use relgen_core::config::{parse_override, RunConfig};
use relgen_core::id_extractor::InjectionMethod;
use serde_json::json;

#[test]
fn overrides_win_over_the_file_which_wins_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, json!({"train": {"steps": 40, "lr": 0.01}, "sampler": {"num_steps": 12}}).to_string()).unwrap();
    let c = RunConfig::resolve(Some(&file), &["train.steps=7".into(), "model.extractor.injection=add".into()]).unwrap();
    assert_eq!(c.train.steps, 7);
    assert_eq!(c.train.lr, 0.01);
    assert_eq!(c.sampler.num_steps, 12);
    assert_eq!(c.model.extractor.injection, InjectionMethod::Add);
    assert_eq!(c.train.lora_rank, RunConfig::default().train.lora_rank);
}

#[test]
fn override_values_parse_as_json_then_string() {
    assert_eq!(parse_override("a.b=3").unwrap(), (vec!["a".into(), "b".into()], json!(3)));
    assert_eq!(parse_override("a=[1,2]").unwrap().1, json!([1, 2]));
    assert_eq!(parse_override("a=no_kml").unwrap().1, json!("no_kml"));
    assert!(parse_override("a..b=1").is_err());
    assert!(parse_override("novalue").is_err());
}

#[test]
fn invalid_values_are_rejected() {
    for bad in ["train.gamma=2", "sampler.num_steps=0", "train.steps=\"many\"", "model.extractor.injection=sum"] {
        assert!(RunConfig::resolve(None, &[bad.into()]).is_err(), "{bad}");
    }
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("list.json");
    std::fs::write(&file, "[1, 2]").unwrap();
    assert!(RunConfig::resolve(Some(&file), &[]).is_err());
}

#[test]
fn hash_tracks_content_only() {
    let a = RunConfig::resolve(None, &["train.steps=9".into()]).unwrap();
    let b = RunConfig::resolve(None, &["train.steps=9".into()]).unwrap();
    assert_eq!(a.resolved_hash(), b.resolved_hash());
    assert_eq!(a.resolved_hash().len(), 64);
    let c = RunConfig::resolve(None, &["train.steps=10".into()]).unwrap();
    assert_ne!(a.resolved_hash(), c.resolved_hash());
}

#[test]
fn saved_records_replay_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run_config.json");
    let a = RunConfig::resolve(None, &["train.lambda_kml=0.01".into(), "data.seed=4".into()]).unwrap();
    a.save_record(&path).unwrap();
    assert_eq!(RunConfig::load_record(&path).unwrap(), a);
    let replay = RunConfig::resolve(Some(&path), &[]).unwrap();
    assert_eq!(replay, a);
    assert_eq!(replay.resolved_hash(), a.resolved_hash());

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["config"]["train"]["steps"] = json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(RunConfig::load_record(&path).is_err());
}
