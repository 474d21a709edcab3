use shotnoise::verify::{run, VerifyConfig, CRITERIA};

#[test]
fn every_criterion_passes_at_default_tolerance() {
    let cfg = VerifyConfig::default();
    for id in CRITERIA {
        let c = run(id, &cfg).unwrap();
        println!("{}", c.line());
        assert!(c.passed, "{}", c.line());
    }
}
