#![allow(dead_code)]

pub mod oracles;

use bevinstructor::cli::RunConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in [
        ("n_train", "12"),
        ("n_seen", "2"),
        ("n_unseen", "4"),
        ("bev_grid", "5"),
        ("n_ref", "2"),
        ("n_d", "4"),
        ("bev_blocks", "1"),
        ("bev_heads", "2"),
        ("d_b", "8"),
        ("bev_scenes", "4"),
        ("bev_epochs", "2"),
        ("d", "16"),
        ("fusion_heads", "2"),
        ("fusion_blocks", "1"),
        ("compressor_blocks", "1"),
        ("n_q", "4"),
        ("n_p", "4"),
        ("d_lm", "32"),
        ("m_l", "2"),
        ("n_a", "1"),
        ("lm_heads", "2"),
        ("lm_ffn_mult", "2"),
        ("warmup_epochs", "1"),
        ("iterations", "12"),
        ("log_every", "4"),
        ("ablate_iterations", "4"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

/// `key = value` text of a configuration.
pub fn config_file(dir: &std::path::Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, cfg.to_text()).unwrap();
    p
}
