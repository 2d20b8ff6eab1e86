//! JSON configuration.
//!
//! Accepts the Hugging Face style field names of the reference checkpoint
//! (`hidden_size`, `num_hidden_layers`, `vocab_size`, `aux_loss_alpha`,
//! `audio_expert_indices`, `hidden_act`, ...) alongside the toy-model fields.
//! Any other key is rejected with [`Error::UnknownField`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::mamoe::{ExpertPartition, LayerDims, RouterConfig, Variant};
use crate::numkit::Precision;
use crate::trainer::TaskKind;

const TOP_LEVEL: &[&str] = &[
    // reference checkpoint schema
    "architectures",
    "attention_bias",
    "attention_dropout",
    "audio_expert_indices",
    "auto_map",
    "aux_loss_alpha",
    "bos_token_id",
    "eos_token_id",
    "hidden_act",
    "hidden_size",
    "intermediate_size",
    "num_hidden_layers",
    "rope_scaling",
    "vocab_size",
    "use_cache",
    "torch_dtype",
    "hubert_model_path",
    "quantizer_model_path",
    // toy model
    "num_attention_heads",
    "n_routed_experts",
    "K",
    "variant",
    "d_ff",
    "shared_d_ff",
    "code_vocab",
    "d_feat",
    "max_position_embeddings",
    "renormalize_topk",
    "router_init_std",
    "precision",
    "seed",
    "training",
];

const TRAINING: &[&str] = &[
    "lr",
    "warmup_steps",
    "total_steps",
    "grad_clip",
    "weight_decay",
    "seq_len",
    "log_every",
    "ckpt_every",
    "eval_batch_size",
    "stage1",
    "stage2",
];

const STAGE: &[&str] = &["batch_size", "mix"];

/// Fields of the reference schema that the toy model records but does not use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architectures: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_map: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_token_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_scaling: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_cache: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torch_dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hubert_model_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer_model_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub batch_size: usize,
    pub mix: BTreeMap<TaskKind, f64>,
}

impl StageConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be positive")));
        }
        if self.mix.is_empty() {
            return Err(Error::Config(format!("{name}.mix is empty")));
        }
        if self.mix.values().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("{name}.mix ratios must be nonnegative")));
        }
        let total: f64 = self.mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{name}.mix ratios sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub log_every: u64,
    pub ckpt_every: u64,
    pub eval_batch_size: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            warmup_steps: 100,
            total_steps: 2000,
            grad_clip: 1.0,
            weight_decay: 0.01,
            seq_len: 16,
            log_every: 100,
            ckpt_every: 500,
            eval_batch_size: 32,
            stage1: StageConfig {
                batch_size: 16,
                mix: BTreeMap::from([
                    (TaskKind::PseudoAsr, 0.4),
                    (TaskKind::PseudoTts, 0.4),
                    (TaskKind::TextLm, 0.2),
                ]),
            },
            stage2: StageConfig {
                batch_size: 16,
                mix: BTreeMap::from([
                    (TaskKind::SpeechInstruct, 0.4),
                    (TaskKind::TextInstruct, 0.4),
                    (TaskKind::PseudoAsr, 0.1),
                    (TaskKind::PseudoTts, 0.1),
                ]),
            },
        }
    }
}

impl TrainConfig {
    /// Reference-scale optimizer settings: peak lr 5e-5, 1000 warmup steps,
    /// 10,000 fine-tuning steps.
    pub fn reference() -> Self {
        Self {
            lr: 5e-5,
            warmup_steps: 1000,
            total_steps: 10_000,
            log_every: 500,
            ckpt_every: 2500,
            ..Self::default()
        }
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(Error::Argument(format!("stage must be 1 or 2, got {s}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.seq_len < 4 || self.seq_len % 2 != 0 {
            return Err(Error::Config(format!(
                "seq_len must be an even number ≥ 4, got {}",
                self.seq_len
            )));
        }
        if self.log_every == 0 || self.ckpt_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("log_every, ckpt_every and eval_batch_size must be positive".into()));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")
    }
}

/// Fully resolved model and training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub k: usize,
    pub d_ff: usize,
    pub shared_d_ff: usize,
    pub v_text: usize,
    pub code_vocab: usize,
    pub d_feat: usize,
    pub max_pos: usize,
    pub variant: Variant,
    pub aux_alpha: f64,
    pub renormalize_topk: bool,
    pub router_init_std: f64,
    pub audio_expert_indices: Vec<usize>,
    pub hidden_act: String,
    pub precision: Precision,
    pub seed: u64,
    pub training: TrainConfig,
    #[serde(default)]
    pub reference: ReferenceMeta,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            n_experts: 8,
            k: 2,
            d_ff: 64,
            shared_d_ff: 64,
            v_text: 64,
            code_vocab: 64,
            d_feat: 16,
            max_pos: 64,
            variant: Variant::Mamoe,
            aux_alpha: 0.001,
            renormalize_topk: false,
            router_init_std: 0.02,
            audio_expert_indices: (4..8).collect(),
            hidden_act: "silu".into(),
            precision: Precision::F64,
            seed: 0,
            training: TrainConfig::default(),
            reference: ReferenceMeta::default(),
        }
    }
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::UnknownField(format!("{path}{key}")));
        }
    }
    Ok(())
}

fn take<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| Error::Config(format!("field `{key}`: {e}"))),
    }
}

fn as_object(v: Value, what: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        other => Err(Error::Config(format!("{what} must be a JSON object, got {other}"))),
    }
}

fn parse_stage(v: Value, name: &str, default: &StageConfig) -> Result<StageConfig> {
    let mut obj = as_object(v, name)?;
    check_keys(&obj, STAGE, &format!("training.{name}."))?;
    let batch_size = take(&mut obj, "batch_size")?.unwrap_or(default.batch_size);
    let mix = match obj.remove("mix") {
        None => default.mix.clone(),
        Some(v) => {
            let raw = as_object(v, &format!("{name}.mix"))?;
            let mut mix = BTreeMap::new();
            for (key, ratio) in raw {
                let kind: TaskKind = key.parse()?;
                let ratio = ratio
                    .as_f64()
                    .ok_or_else(|| Error::Config(format!("{name}.mix.{key} must be a number")))?;
                mix.insert(kind, ratio);
            }
            mix
        }
    };
    Ok(StageConfig { batch_size, mix })
}

fn parse_training(v: Value) -> Result<TrainConfig> {
    let mut obj = as_object(v, "training")?;
    check_keys(&obj, TRAINING, "training.")?;
    let d = TrainConfig::default();
    let stage1 = match obj.remove("stage1") {
        Some(v) => parse_stage(v, "stage1", &d.stage1)?,
        None => d.stage1.clone(),
    };
    let stage2 = match obj.remove("stage2") {
        Some(v) => parse_stage(v, "stage2", &d.stage2)?,
        None => d.stage2.clone(),
    };
    Ok(TrainConfig {
        lr: take(&mut obj, "lr")?.unwrap_or(d.lr),
        warmup_steps: take(&mut obj, "warmup_steps")?.unwrap_or(d.warmup_steps),
        total_steps: take(&mut obj, "total_steps")?.unwrap_or(d.total_steps),
        grad_clip: take(&mut obj, "grad_clip")?.unwrap_or(d.grad_clip),
        weight_decay: take(&mut obj, "weight_decay")?.unwrap_or(d.weight_decay),
        seq_len: take(&mut obj, "seq_len")?.unwrap_or(d.seq_len),
        log_every: take(&mut obj, "log_every")?.unwrap_or(d.log_every),
        ckpt_every: take(&mut obj, "ckpt_every")?.unwrap_or(d.ckpt_every),
        eval_batch_size: take(&mut obj, "eval_batch_size")?.unwrap_or(d.eval_batch_size),
        stage1,
        stage2,
    })
}

impl ModelConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut obj = as_object(serde_json::from_str(text)?, "config")?;
        check_keys(&obj, TOP_LEVEL, "")?;
        let d = ModelConfig::default();

        let audio: Option<Vec<usize>> = take(&mut obj, "audio_expert_indices")?;
        let n_given: Option<usize> = take(&mut obj, "n_routed_experts")?;
        let (n_experts, audio_expert_indices) = match (n_given, audio) {
            (Some(n), Some(a)) => (n, a),
            // the reference layout lists the upper half, so N is one past its last index
            (None, Some(a)) => (a.iter().max().map_or(0, |m| m + 1), a),
            (Some(n), None) => (n, (n / 2..n).collect()),
            (None, None) => (d.n_experts, d.audio_expert_indices.clone()),
        };

        let training = match obj.remove("training") {
            Some(v) => parse_training(v)?,
            None => d.training.clone(),
        };

        let reference = ReferenceMeta {
            architectures: take(&mut obj, "architectures")?,
            attention_bias: take(&mut obj, "attention_bias")?,
            attention_dropout: take(&mut obj, "attention_dropout")?,
            auto_map: take(&mut obj, "auto_map")?,
            bos_token_id: take(&mut obj, "bos_token_id")?,
            eos_token_id: take(&mut obj, "eos_token_id")?,
            intermediate_size: take(&mut obj, "intermediate_size")?,
            rope_scaling: take(&mut obj, "rope_scaling")?,
            use_cache: take(&mut obj, "use_cache")?,
            torch_dtype: take(&mut obj, "torch_dtype")?,
            hubert_model_path: take(&mut obj, "hubert_model_path")?,
            quantizer_model_path: take(&mut obj, "quantizer_model_path")?,
        };

        let cfg = ModelConfig {
            d_model: take(&mut obj, "hidden_size")?.unwrap_or(d.d_model),
            n_layers: take(&mut obj, "num_hidden_layers")?.unwrap_or(d.n_layers),
            n_heads: take(&mut obj, "num_attention_heads")?.unwrap_or(d.n_heads),
            n_experts,
            k: take(&mut obj, "K")?.unwrap_or(d.k),
            d_ff: take(&mut obj, "d_ff")?.unwrap_or(d.d_ff),
            shared_d_ff: take(&mut obj, "shared_d_ff")?.unwrap_or(d.shared_d_ff),
            v_text: take(&mut obj, "vocab_size")?.unwrap_or(d.v_text),
            code_vocab: take(&mut obj, "code_vocab")?.unwrap_or(d.code_vocab),
            d_feat: take(&mut obj, "d_feat")?.unwrap_or(d.d_feat),
            max_pos: take(&mut obj, "max_position_embeddings")?.unwrap_or(d.max_pos),
            variant: match take::<String>(&mut obj, "variant")? {
                Some(s) => s.parse()?,
                None => d.variant,
            },
            aux_alpha: take(&mut obj, "aux_loss_alpha")?.unwrap_or(d.aux_alpha),
            renormalize_topk: take(&mut obj, "renormalize_topk")?.unwrap_or(d.renormalize_topk),
            router_init_std: take(&mut obj, "router_init_std")?.unwrap_or(d.router_init_std),
            audio_expert_indices,
            hidden_act: take(&mut obj, "hidden_act")?.unwrap_or(d.hidden_act),
            precision: take(&mut obj, "precision")?.unwrap_or(d.precision),
            seed: take(&mut obj, "seed")?.unwrap_or(d.seed),
            training,
            reference,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Serializes back into the accepted input schema.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        let mut put = |k: &str, v: Value| {
            obj.insert(k.to_string(), v);
        };
        put("hidden_size", self.d_model.into());
        put("num_hidden_layers", self.n_layers.into());
        put("num_attention_heads", self.n_heads.into());
        put("n_routed_experts", self.n_experts.into());
        put("K", self.k.into());
        put("d_ff", self.d_ff.into());
        put("shared_d_ff", self.shared_d_ff.into());
        put("vocab_size", self.v_text.into());
        put("code_vocab", self.code_vocab.into());
        put("d_feat", self.d_feat.into());
        put("max_position_embeddings", self.max_pos.into());
        put("variant", self.variant.as_str().into());
        put("aux_loss_alpha", self.aux_alpha.into());
        put("renormalize_topk", self.renormalize_topk.into());
        put("router_init_std", self.router_init_std.into());
        put("audio_expert_indices", self.audio_expert_indices.clone().into());
        put("hidden_act", self.hidden_act.clone().into());
        put(
            "precision",
            serde_json::to_value(self.precision).expect("precision serializes"),
        );
        put("seed", self.seed.into());
        put(
            "training",
            serde_json::to_value(&self.training).expect("training config serializes"),
        );
        if let Value::Object(meta) =
            serde_json::to_value(&self.reference).expect("reference metadata serializes")
        {
            obj.extend(meta);
        }
        Value::Object(obj)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.d_model),
            ("num_attention_heads", self.n_heads),
            ("n_routed_experts", self.n_experts),
            ("d_ff", self.d_ff),
            ("shared_d_ff", self.shared_d_ff),
            ("vocab_size", self.v_text),
            ("code_vocab", self.code_vocab),
            ("d_feat", self.d_feat),
            ("max_position_embeddings", self.max_pos),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_attention_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.hidden_act != "silu" {
            return Err(Error::Config(format!(
                "hidden_act `{}` is not supported (only silu)",
                self.hidden_act
            )));
        }
        if !(self.router_init_std >= 0.0 && self.router_init_std.is_finite()) {
            return Err(Error::Config("router_init_std must be nonnegative".into()));
        }
        self.router().validate(&self.partition()?)?;
        self.training.validate()
    }

    pub fn partition(&self) -> Result<ExpertPartition> {
        ExpertPartition::from_audio_indices(self.n_experts, &self.audio_expert_indices)
    }

    pub fn router(&self) -> RouterConfig {
        RouterConfig {
            k: self.k,
            variant: self.variant,
            aux_alpha: self.aux_alpha,
            renormalize_topk: self.renormalize_topk,
        }
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            n_experts: self.n_experts,
            d_ff: self.d_ff,
            shared_d_ff: self.shared_d_ff,
        }
    }

    /// Applies a `MAMOE_SEED`-style override.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("MAMOE_SEED `{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        let cfg = Self {
            variant,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
