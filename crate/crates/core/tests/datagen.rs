use rolecraft::corpus::{validate_card_set, CardSource};
use rolecraft::datagen::{
    build_personality_dataset, casual_corpus, narrative_corpus, synth_persona_cards, Assets, PersonalityShape,
    ASSET_FILES,
};
use rolecraft::Error;

#[test]
fn generators_are_seeded() {
    let assets = Assets::builtin();
    let cards = synth_persona_cards(&assets, 6, 1).unwrap();
    assert_eq!(cards, synth_persona_cards(&assets, 6, 1).unwrap());
    assert_ne!(cards, synth_persona_cards(&assets, 6, 2).unwrap());
    validate_card_set(&cards).unwrap();
    assert!(cards.iter().any(|c| c.source_kind == CardSource::Modern));

    let a = casual_corpus(&assets, 50, 3).unwrap();
    assert_eq!(a, casual_corpus(&assets, 50, 3).unwrap());
    assert_eq!(a.len(), 50);

    let n = narrative_corpus(&assets, &cards, 5, 3).unwrap();
    assert_eq!(n, narrative_corpus(&assets, &cards, 5, 3).unwrap());
}

#[test]
fn personality_samples_refer_to_known_cards() {
    let assets = Assets::builtin();
    let cards = synth_persona_cards(&assets, 4, 1).unwrap();
    let shape = PersonalityShape {
        questions_per_card: Some(3),
        ..Default::default()
    };
    let d = build_personality_dataset(&assets, &cards, &assets.questions, None, 5, shape).unwrap();
    assert!(!d.is_empty());
    for s in &d {
        let id = s.persona_id.as_ref().unwrap();
        assert!(cards.iter().any(|c| &c.id == id));
    }
    let asked: usize = d.iter().map(|s| s.turns.len()).sum();
    assert_eq!(asked, 4 * 3);
}

#[test]
fn asset_directories_must_be_complete() {
    let dir = tempfile::tempdir().unwrap();
    match Assets::load_dir(dir.path()) {
        Err(Error::MissingAsset(name)) => assert!(ASSET_FILES.iter().any(|f| name.ends_with(f)), "{name:?}"),
        other => panic!("{other:?}"),
    }
}
