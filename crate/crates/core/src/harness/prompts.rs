//! The bundled prompt set. Prompts only seed embeddings, so the wording is
//! arbitrary; the list is versioned so sweeps stay reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PROMPT_SET_VERSION: u32 = 1;

pub const DEFAULT_PROMPTS: [&str; 16] = [
    "a red square moving right",
    "a cat walking on a wall",
    "ocean waves at sunset",
    "a car driving through rain",
    "fireworks over a city",
    "a dog running on the beach",
    "leaves falling in autumn",
    "a candle flickering in the dark",
    "clouds drifting over mountains",
    "a horse galloping in a field",
    "snow falling on a forest",
    "a bird flying over a lake",
    "a train crossing a bridge",
    "smoke rising from a chimney",
    "a boat sailing at dawn",
    "a panda eating bamboo",
];

/// One prompt per line; blank lines and `#` comments are skipped.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no prompts",
            path.display()
        )));
    }
    Ok(prompts)
}

pub fn default_prompts() -> Vec<String> {
    DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect()
}
