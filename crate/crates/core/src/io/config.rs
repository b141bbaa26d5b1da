//! Plain-text key=value configuration. Blank lines and `#` comments are
//! skipped; unknown or duplicate keys fail fast naming the key; omitted
//! keys keep their defaults. Each typed builder also produces a canonical
//! echo of the resolved values for the run manifest.

use std::str::FromStr;

use super::IoError;
use crate::model::ModelConfig;
use crate::rollout::RolloutConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Ordered key=value pairs from one config file.
pub type ParsedConfig = Vec<(String, String)>;

pub fn parse_kv(text: &str) -> Result<ParsedConfig, IoError> {
    let mut pairs: ParsedConfig = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            IoError::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(IoError::Config(format!("line {}: empty key", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| k == &key) {
            return Err(IoError::Config(format!("duplicate key `{key}`")));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_as<T: FromStr>(key: &str, value: &str, want: &str) -> Result<T, IoError> {
    value.parse::<T>().map_err(|_| {
        IoError::Config(format!("key `{key}`: cannot parse {value:?} as {want}"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, IoError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(IoError::Config(format!(
            "key `{key}`: cannot parse {value:?} as bool"
        ))),
    }
}

fn unknown(section: &str, key: &str) -> IoError {
    IoError::Config(format!("unknown {section} key `{key}`"))
}

/// Applies pairs onto the default training configuration.
pub fn train_config_from_kv(pairs: &ParsedConfig) -> Result<TrainConfig, IoError> {
    let mut c = TrainConfig::default();
    for (k, v) in pairs {
        match k.as_str() {
            "learning_rate" => c.learning_rate = parse_as(k, v, "float")?,
            "adam_beta1" => c.adam_beta1 = parse_as(k, v, "float")?,
            "adam_beta2" => c.adam_beta2 = parse_as(k, v, "float")?,
            "adam_eps" => c.adam_eps = parse_as(k, v, "float")?,
            "batch_size" => c.batch_size = parse_as(k, v, "integer")?,
            "max_steps" => c.max_steps = parse_as(k, v, "integer")?,
            "seed" => c.seed = parse_as(k, v, "integer")?,
            "gradient_clip_norm" => c.gradient_clip_norm = parse_as(k, v, "float")?,
            "val_every" => c.val_every = parse_as(k, v, "integer")?,
            "early_stop_patience" => c.early_stop_patience = parse_as(k, v, "integer")?,
            _ => return Err(unknown("training", k)),
        }
    }
    c.validate()
        .map_err(|e| IoError::Config(e.to_string()))?;
    Ok(c)
}

pub fn echo_train_config(c: &TrainConfig) -> String {
    format!(
        "learning_rate={}\nadam_beta1={}\nadam_beta2={}\nadam_eps={}\nbatch_size={}\nmax_steps={}\nseed={}\ngradient_clip_norm={}\nval_every={}\nearly_stop_patience={}\n",
        c.learning_rate,
        c.adam_beta1,
        c.adam_beta2,
        c.adam_eps,
        c.batch_size,
        c.max_steps,
        c.seed,
        c.gradient_clip_norm,
        c.val_every,
        c.early_stop_patience
    )
}

pub fn rollout_config_from_kv(pairs: &ParsedConfig) -> Result<RolloutConfig, IoError> {
    let mut c = RolloutConfig::default();
    for (k, v) in pairs {
        match k.as_str() {
            "steps" => c.steps = parse_as(k, v, "integer")?,
            "substitute_heads" => c.substitute_heads = parse_bool(k, v)?,
            _ => return Err(unknown("rollout", k)),
        }
    }
    if c.steps == 0 {
        return Err(IoError::Config("key `steps`: must be positive".into()));
    }
    Ok(c)
}

pub fn echo_rollout_config(c: &RolloutConfig) -> String {
    format!("steps={}\nsubstitute_heads={}\n", c.steps, c.substitute_heads)
}

pub fn synth_config_from_kv(pairs: &ParsedConfig) -> Result<SynthConfig, IoError> {
    let mut c = SynthConfig::default();
    for (k, v) in pairs {
        match k.as_str() {
            "n_sequences" => c.n_sequences = parse_as(k, v, "integer")?,
            "t_steps" => c.t_steps = parse_as(k, v, "integer")?,
            "seed" => c.seed = parse_as(k, v, "integer")?,
            _ => return Err(unknown("synth", k)),
        }
    }
    if c.n_sequences == 0 || c.t_steps < 2 {
        return Err(IoError::Config(
            "synth needs n_sequences >= 1 and t_steps >= 2".into(),
        ));
    }
    Ok(c)
}

pub fn echo_synth_config(c: &SynthConfig) -> String {
    format!(
        "n_sequences={}\nt_steps={}\nseed={}\n",
        c.n_sequences, c.t_steps, c.seed
    )
}

pub fn model_config_from_kv(pairs: &ParsedConfig) -> Result<ModelConfig, IoError> {
    let mut c = ModelConfig::default();
    for (k, v) in pairs {
        match k.as_str() {
            "embed_width" => c.embed_width = parse_as(k, v, "integer")?,
            "blocks" => c.blocks = parse_as(k, v, "integer")?,
            "attention_heads" => c.attention_heads = parse_as(k, v, "integer")?,
            "ffn_width" => c.ffn_width = parse_as(k, v, "integer")?,
            "t_in" => c.t_in = parse_as(k, v, "integer")?,
            "t_out" => c.t_out = parse_as(k, v, "integer")?,
            "dropout" => c.dropout = parse_as(k, v, "float")?,
            _ => return Err(unknown("model", k)),
        }
    }
    c.validate().map_err(|e| IoError::Config(e.to_string()))?;
    Ok(c)
}

pub fn echo_model_config(c: &ModelConfig) -> String {
    format!(
        "embed_width={}\nblocks={}\nattention_heads={}\nffn_width={}\nt_in={}\nt_out={}\ndropout={}\n",
        c.embed_width, c.blocks, c.attention_heads, c.ffn_width, c.t_in, c.t_out, c.dropout
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_all_defaults() {
        let pairs = parse_kv("").unwrap();
        assert_eq!(train_config_from_kv(&pairs).unwrap(), TrainConfig::default());
        assert_eq!(
            rollout_config_from_kv(&pairs).unwrap(),
            RolloutConfig::default()
        );
        let pairs = parse_kv("\n# just a comment\n\n").unwrap();
        assert_eq!(model_config_from_kv(&pairs).unwrap(), ModelConfig::default());
    }

    #[test]
    fn steps_sets_the_horizon() {
        let pairs = parse_kv("steps=4").unwrap();
        assert_eq!(rollout_config_from_kv(&pairs).unwrap().steps, 4);
    }

    #[test]
    fn unknown_key_fails_naming_it() {
        let pairs = parse_kv("stepz=4").unwrap();
        let err = rollout_config_from_kv(&pairs).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn type_mismatch_and_duplicates_fail() {
        let pairs = parse_kv("steps=four").unwrap();
        assert!(rollout_config_from_kv(&pairs)
            .unwrap_err()
            .to_string()
            .contains("steps"));
        assert!(parse_kv("a=1\na=2")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        assert!(parse_kv("novalue").unwrap_err().to_string().contains("key=value"));
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let pairs = parse_kv("learning_rate=0.01\nbatch_size=2\nseed=9").unwrap();
        let c = train_config_from_kv(&pairs).unwrap();
        let echoed = parse_kv(&echo_train_config(&c)).unwrap();
        assert_eq!(train_config_from_kv(&echoed).unwrap(), c);
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "# training\n  max_steps = 50 \n\nbatch_size=3\n";
        let c = train_config_from_kv(&parse_kv(text).unwrap()).unwrap();
        assert_eq!(c.max_steps, 50);
        assert_eq!(c.batch_size, 3);
    }
}
