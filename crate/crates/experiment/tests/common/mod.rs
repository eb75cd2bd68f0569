#![allow(dead_code)]

use std::path::Path;

/// Small synthetic run that finishes in a few seconds.
pub const TINY: &str = r#"
dataset = "synthetic-10"
num_tasks = 5
buffer_capacity = 50
seeds = [0]
methods = ["cvt"]
protocols = ["task_free", "task_aware"]

[synthetic]
train_per_class = 20
test_per_class = 10

[train]
stream_batch_size = 10
memory_batch_size = 10
learning_rate = 0.01

[model]
stem_channels = 8
stage_dims = [16, 24]
heads_per_stage = [2, 2]
key_dims = [8, 8]
blocks_per_stage = [1, 1]
embed_dim = 24
projection_dim = 16
"#;

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}
