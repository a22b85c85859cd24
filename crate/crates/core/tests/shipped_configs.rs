use std::path::Path;

use tricoat_core::config::Config;

#[test]
fn every_shipped_config_loads_and_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let config = Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        config.validate().unwrap();
        for name in &config.harness.models {
            name.parse::<tricoat_core::models::ModelKind>().unwrap();
        }
        let back = Config::parse(&config.to_toml()).unwrap();
        assert_eq!(back, config, "{}", path.display());
        n += 1;
    }
    assert!(n >= 3);
}
