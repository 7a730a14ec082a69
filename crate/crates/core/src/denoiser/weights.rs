//! Weight dump/load: one IEAD file per parameter plus a plain-text
//! manifest of `name=file` lines and a `config.txt` of model settings.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ToyVdm};
use crate::error::{Error, Result};
use crate::harness::config::parse_kv;
use crate::numcore::iead;

pub const MANIFEST: &str = "weights.manifest";
pub const CONFIG: &str = "config.txt";

impl ToyVdm {
    pub fn save_weights(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut all = self.named_parameters();
        all.push(("decoder.proj".into(), &self.decoder.proj));
        all.push(("decoder.bias".into(), &self.decoder.bias));
        for (name, t) in all {
            let file = format!("{name}.iead");
            iead::write(dir.join(&file), t)?;
            manifest.push_str(&format!("{name}={file}\n"));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        fs::write(dir.join(CONFIG), self.config().to_kv())?;
        Ok(())
    }

    pub fn load_weights(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = ModelConfig::from_kv(&fs::read_to_string(dir.join(CONFIG))?)?;
        let mut model = ToyVdm::new(cfg)?;
        let entries = parse_kv(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let lookup = |name: &str| -> Result<crate::numcore::Tensor> {
            let file = entries
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Config(format!("manifest lacks `{name}`")))?;
            iead::read(dir.join(file))
        };
        let mut loaded = Vec::new();
        for (name, _) in model.named_parameters() {
            loaded.push(lookup(&name)?);
        }
        for ((name, slot), t) in model.named_parameters_mut().into_iter().zip(loaded) {
            if slot.dims() != t.dims() {
                return Err(Error::Config(format!(
                    "`{name}` has dims {:?}, expected {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t;
        }
        model.decoder.proj = lookup("decoder.proj")?;
        model.decoder.bias = lookup("decoder.bias")?;
        Ok(model)
    }
}
