//! Flat `key=value` configuration files with dotted keys and `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featmap::FeatureKind;
use crate::model::{AdamWConfig, EncoderConfig, TrainConfig, Variant};
use crate::spectral::{ResamplePolicy, SamplerKind};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "KLAB_SEED";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && !key.starts_with('.')
        && !key.ends_with('.')
        && !key.contains("..")
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected `key=value`, got `{line}`",
                    no + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(Error::config(format!(
                    "line {}: invalid key `{key}`",
                    no + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    no + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get_str(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::config(format!("`{key}={v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get_str(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|e| Error::config(format!("`{key}` item `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Rejects keys outside `allowed`; a trailing `*` in an allowed entry
    /// matches any suffix.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .keys()
            .filter(|k| {
                !allowed.iter().any(|a| match a.strip_suffix('*') {
                    Some(prefix) => k.starts_with(prefix),
                    None => k == a,
                })
            })
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )))
        }
    }

    /// Sorted `key=value` lines; two configs with the same entries have the
    /// same canonical text regardless of order, spacing or comments.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, in lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Seed from `env_value` (the `KLAB_SEED` value, if any), else the
    /// `seed` key, else 0.
    pub fn seed_with(&self, env_value: Option<&str>) -> Result<u64> {
        match env_value {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|e| Error::config(format!("{SEED_ENV}=`{v}`: {e}"))),
            None => self.get_or("seed", 0),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed_with(std::env::var(SEED_ENV).ok().as_deref())
    }
}

/// Keys read by [`encoder_config`].
pub const MODEL_KEYS: &[&str] = &[
    "model.*",
    "featmap.*",
    "sampler.kind",
    "sampler.resample_interval",
    "gmm.*",
    "fastfood.*",
    "generator.*",
];

/// Keys read by [`train_config`].
pub const TRAIN_KEYS: &[&str] = &["train.*", "seed"];

fn variant_from(cfg: &Config) -> Result<Variant> {
    let explicit: Option<Variant> = cfg.get("model.variant")?;
    let sampler: Option<String> = cfg.get("sampler.kind")?;
    let features: Option<FeatureKind> = cfg.get("featmap.kind")?;
    if sampler.as_deref() == Some("softmax") {
        if features.is_some() {
            return Err(Error::config("softmax attention takes no featmap.kind"));
        }
        return match explicit {
            Some(v) if v != Variant::Softmax => Err(Error::config(format!(
                "model.variant={v} conflicts with sampler.kind=softmax"
            ))),
            _ => Ok(Variant::Softmax),
        };
    }
    let sampler: Option<SamplerKind> = sampler.map(|s| s.parse()).transpose()?;
    match (explicit, sampler, features) {
        (Some(v), None, None) => Ok(v),
        (None, s, f) => Ok(Variant::kernel(
            s.unwrap_or(SamplerKind::Gmm),
            f.unwrap_or(FeatureKind::Rks),
        )),
        (Some(v), s, f) => {
            let built = match v {
                Variant::Kernel { sampler, features } => {
                    Variant::kernel(s.unwrap_or(sampler), f.unwrap_or(features))
                }
                Variant::Softmax => {
                    Variant::kernel(s.unwrap_or(SamplerKind::Gmm), f.unwrap_or(FeatureKind::Rks))
                }
            };
            if built == v {
                Ok(v)
            } else {
                Err(Error::config(format!(
                    "model.variant={v} conflicts with sampler.kind/featmap.kind"
                )))
            }
        }
    }
}

/// Encoder settings on top of `base`.
pub fn encoder_config(cfg: &Config, base: EncoderConfig) -> Result<EncoderConfig> {
    let b = base;
    let has_variant = ["model.variant", "sampler.kind", "featmap.kind"]
        .iter()
        .any(|k| cfg.get_str(k).is_some());
    let c = EncoderConfig {
        layers: cfg.get_or("model.layers", b.layers)?,
        d_model: cfg.get_or("model.d_model", b.d_model)?,
        d_ff: cfg.get_or("model.d_ff", b.d_ff)?,
        heads: cfg.get_or("model.heads", b.heads)?,
        d_head: cfg.get_or("model.d_head", b.d_head)?,
        variant: if has_variant {
            variant_from(cfg)?
        } else {
            b.variant
        },
        num_samples: cfg.get_or("featmap.num_samples", b.num_samples)?,
        gmm_components: cfg.get_or("gmm.components", b.gmm_components)?,
        gmm_init_scale: cfg.get_or("gmm.init_scale", b.gmm_init_scale)?,
        fastfood_learnable: cfg.get_or("fastfood.learnable", b.fastfood_learnable)?,
        fastfood_sigma: cfg.get_or("fastfood.sigma", b.fastfood_sigma)?,
        generator_scaled_output: cfg
            .get_or("generator.scaled_output", b.generator_scaled_output)?,
        generator_output_scale: cfg.get_or("generator.output_scale", b.generator_output_scale)?,
        feature_eps: cfg.get_or("featmap.eps", b.feature_eps)?,
        prf_clamp: cfg.get_or("featmap.clamp", b.prf_clamp)?,
        positional: cfg.get_or("model.positional", b.positional)?,
        pooling: cfg.get_or("model.pooling", b.pooling)?,
        dropout: cfg.get_or("model.dropout", b.dropout)?,
        max_len: cfg.get_or("model.max_len", b.max_len)?,
        input_dim: b.input_dim,
        num_classes: b.num_classes,
        classifier_hidden: cfg.get_or("model.classifier_hidden", b.classifier_hidden)?,
        qk_init_scale: cfg.get_or("model.qk_init_scale", b.qk_init_scale)?,
    };
    c.validate()?;
    Ok(c)
}

/// Optimizer, resampling and seed settings on top of `base`; the seed
/// honours `KLAB_SEED`.
pub fn train_config(cfg: &Config, base: TrainConfig) -> Result<TrainConfig> {
    let a = base.adamw;
    let adamw = AdamWConfig {
        lr: cfg.get_or("train.lr", a.lr)?,
        beta1: cfg.get_or("train.beta1", a.beta1)?,
        beta2: cfg.get_or("train.beta2", a.beta2)?,
        eps: cfg.get_or("train.eps", a.eps)?,
        weight_decay: cfg.get_or("train.weight_decay", a.weight_decay)?,
        max_grad_norm: cfg.get("train.max_grad_norm")?.or(a.max_grad_norm),
    };
    adamw.validate()?;
    let interval = cfg.get_or("sampler.resample_interval", base.resample.interval())?;
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => cfg.seed_with(Some(&v))?,
        Err(_) => cfg.get_or("seed", base.seed)?,
    };
    Ok(TrainConfig {
        adamw,
        resample: ResamplePolicy::new(interval)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let c = Config::parse(
            "# header\nsampler.kind = gmm  # trailing\n\nfeatmap.kind=prf\nfastfood.learnable=sgb\n",
        )
        .unwrap();
        assert_eq!(c.get_str("sampler.kind"), Some("gmm"));
        assert_eq!(c.get_str("featmap.kind"), Some("prf"));
        assert_eq!(c.keys().count(), 3);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("novalue\n").is_err());
        assert!(Config::parse("a=1\na=2\n").is_err());
        assert!(Config::parse("bad key=1\n").is_err());
        assert!(Config::parse("a..b=1\n").is_err());
    }

    #[test]
    fn typed_access_reports_key() {
        let c = Config::parse("train.lr=fast\nlist=1, 2,3\n").unwrap();
        let err = c.get::<f64>("train.lr").unwrap_err().to_string();
        assert!(err.contains("train.lr"));
        assert_eq!(c.get_list::<usize>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(c.get_or("missing", 7u32).unwrap(), 7);
    }

    #[test]
    fn hash_ignores_order_and_comments() {
        let a = Config::parse("x=1\ny=2\n").unwrap();
        let b = Config::parse("# c\ny = 2\nx=1\n").unwrap();
        let c = Config::parse("x=1\ny=3\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seed_precedence() {
        let c = Config::parse("seed=5\n").unwrap();
        assert_eq!(c.seed_with(None).unwrap(), 5);
        assert_eq!(c.seed_with(Some("9")).unwrap(), 9);
        assert_eq!(Config::default().seed_with(None).unwrap(), 0);
        assert!(c.seed_with(Some("x")).is_err());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let c = Config::parse("model.layers=2\nmodle.heads=4\n").unwrap();
        let err = c.check_keys(MODEL_KEYS).unwrap_err().to_string();
        assert!(err.contains("modle.heads") && !err.contains("model.layers"));
    }

    #[test]
    fn variant_from_parts_or_name() {
        let parse = |t: &str| encoder_config(&Config::parse(t).unwrap(), EncoderConfig::default());
        assert_eq!(
            parse("sampler.kind=fastfood\nfeatmap.kind=prf\n")
                .unwrap()
                .variant,
            Variant::kernel(SamplerKind::FastFood, FeatureKind::Prf)
        );
        assert_eq!(
            parse("model.variant=softmax\n").unwrap().variant,
            Variant::Softmax
        );
        assert_eq!(
            parse("sampler.kind=softmax\n").unwrap().variant,
            Variant::Softmax
        );
        assert_eq!(
            parse("model.variant=gmm-prf\nfeatmap.kind=prf\n")
                .unwrap()
                .variant,
            Variant::kernel(SamplerKind::Gmm, FeatureKind::Prf)
        );
        assert!(parse("model.variant=gmm-prf\nfeatmap.kind=rks\n").is_err());
        assert!(parse("model.heads=3\n").is_err());
    }

    #[test]
    fn train_settings() {
        let c = Config::parse("train.lr=0.001\nsampler.resample_interval=10\nseed=3\n").unwrap();
        if std::env::var(SEED_ENV).is_ok() {
            return;
        }
        let t = train_config(&c, TrainConfig::default()).unwrap();
        assert_eq!(t.adamw.lr, 1e-3);
        assert_eq!(t.resample.interval(), 10);
        assert_eq!(t.seed, 3);
        assert!(train_config(
            &Config::parse("train.lr=-1\n").unwrap(),
            TrainConfig::default()
        )
        .is_err());
    }
}
