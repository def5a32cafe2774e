//! Configuration files as documented in the README.

use std::path::PathBuf;

use slc::config::{AppConfig, ChatBackendConfig, EmbedderConfig};
use slc::evaluation::Weighting;

fn readme_config() -> String {
    let readme = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```toml\n").expect("README has a toml block") + "```toml\n".len();
    let len = readme[start..].find("```").unwrap();
    readme[start..start + len].to_string()
}

#[test]
fn readme_example_parses() {
    let config = AppConfig::from_toml(&readme_config()).unwrap();
    assert_eq!(config.top_k, 1);
    assert_eq!(config.weighting, Weighting::Mean);
    assert_eq!(config.parallelism, 4);
    let ChatBackendConfig::Http(small) = &config.small_model else { panic!("small model is not http") };
    assert_eq!(small.timeout_secs, 60.0);
    assert_eq!(small.model_name, "qwen2.5-vl-3b");
    let EmbedderConfig::Http { config: embed, dimension } = &config.embedder else { panic!("embedder is not http") };
    assert_eq!(*dimension, Some(768));
    assert_eq!(embed.base_url, "http://localhost:8001/v1");
    config.pipeline().unwrap();
    config.embedder().unwrap();
}

#[test]
fn relative_paths_follow_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slc.toml");
    std::fs::write(&path, readme_config()).unwrap();
    let config = AppConfig::load(&path).unwrap();
    assert_eq!(config.registry.unwrap(), dir.path().join("registry.json"));
    assert_eq!(config.dictionary.unwrap(), dir.path().join("dict.json"));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = readme_config();
    assert!(AppConfig::from_toml(&base.replace("top_k = 1", "top_k = 0")).is_err());
    assert!(AppConfig::from_toml(&base.replace("temperature = 0.0", "temperature = -1.0")).is_err());
    assert!(AppConfig::from_toml(&format!("unknown_key = 1\n{base}")).is_err());
    assert!(AppConfig::from_toml(&base.replace("kind = \"http\"             # OpenAI-compatible /embeddings", "kind = \"nope\" #")).is_err());
}
